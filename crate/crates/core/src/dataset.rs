//! Observation matrices `(y, d, x, z)`, CSV ingestion through a column-role
//! mapping file, and a cached fetcher for the Card (1995) proximity archive.
//!
//! # Mapping files
//!
//! A mapping is a small `key = value` text file:
//!
//! ```text
//! # roles
//! outcome     = lwage
//! endogenous  = educ
//! exogenous   = exper, expersq, black
//! instruments = nearc2, nearc4
//! intercept   = true
//! # optional derived columns, evaluated before role lookup
//! derive lwage   = log(wage)
//! derive expersq = exper^2
//! ```
//!
//! Derived columns support `log(col)`, `col^k` for integer `k` and `a*b`.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::Matrix;

pub const INTERCEPT_NAME: &str = "(Intercept)";
pub const CACHE_ENV: &str = "IVQR_CACHE_DIR";
pub const CARD_ARCHIVE_URL: &str = "http://davidcard.berkeley.edu/data_sets/proximity.zip";

/// The 3010-observation returns-to-schooling extract shipped with the crate.
pub const CARD_CSV: &str = include_str!("../data/card.csv");
/// Role mapping for [`CARD_CSV`].
pub const CARD_MAP: &str = include_str!("../data/card.map");

/// The shipped Card extract under the shipped mapping.
pub fn card_dataset() -> Result<Dataset> {
    let map = RoleMap::parse(CARD_MAP)?;
    Ok(load_csv_from_reader(CARD_CSV.as_bytes(), "card.csv", &map, map.intercept)?.dataset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnNames {
    pub outcome: String,
    pub endogenous: Vec<String>,
    pub exogenous: Vec<String>,
    pub instruments: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    y: Vec<f64>,
    d: Matrix,
    x: Matrix,
    z: Matrix,
    names: ColumnNames,
}

impl Dataset {
    /// Validates shapes, finiteness and the single-intercept rule.
    pub fn new(y: Vec<f64>, d: Matrix, x: Matrix, z: Matrix, names: ColumnNames) -> Result<Self> {
        let n = y.len();
        if d.nrows() != n || x.nrows() != n || z.nrows() != n {
            return Err(Error::Dimension(format!(
                "columns of unequal length: y {n}, d {}, x {}, z {}",
                d.nrows(),
                x.nrows(),
                z.nrows()
            )));
        }
        if n == 0 {
            return Err(Error::EmptyData);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite outcome value".into()));
        }
        if d.ncols() == 0 {
            return Err(Error::InvalidArgument("at least one endogenous column is required".into()));
        }
        if z.ncols() == 0 {
            return Err(Error::InvalidArgument("at least one instrument is required".into()));
        }
        if names.endogenous.len() != d.ncols()
            || names.exogenous.len() != x.ncols()
            || names.instruments.len() != z.ncols()
        {
            return Err(Error::Dimension("column names do not match matrix widths".into()));
        }
        let intercepts = (0..x.ncols())
            .filter(|&j| (0..n).all(|i| x[(i, j)] == 1.0))
            .count();
        if intercepts > 1 {
            return Err(Error::InvalidArgument(format!(
                "{intercepts} intercept columns among the exogenous regressors"
            )));
        }
        Ok(Self { y, d, x, z, names })
    }

    /// Convenience constructor with generated names; prepends an intercept to `x`
    /// when `add_intercept` is set.
    pub fn from_columns(
        y: Vec<f64>,
        d: Vec<f64>,
        x: Vec<Vec<f64>>,
        z: Vec<Vec<f64>>,
        add_intercept: bool,
    ) -> Result<Self> {
        let n = y.len();
        let mut xcols = Vec::new();
        let mut xnames = Vec::new();
        if add_intercept {
            xcols.push(vec![1.0; n]);
            xnames.push(INTERCEPT_NAME.to_string());
        }
        for (j, c) in x.into_iter().enumerate() {
            xcols.push(c);
            xnames.push(format!("x{}", j + 1));
        }
        let znames = (1..=z.len()).map(|j| format!("z{j}")).collect();
        let names = ColumnNames {
            outcome: "y".into(),
            endogenous: vec!["d".into()],
            exogenous: xnames,
            instruments: znames,
        };
        let x = if xcols.is_empty() {
            Matrix::zeros(n, 0)
        } else {
            Matrix::from_columns(&xcols)?
        };
        Self::new(y, Matrix::from_columns(&[d])?, x, Matrix::from_columns(&z)?, names)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of endogenous columns.
    pub fn r(&self) -> usize {
        self.d.ncols()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    pub fn p(&self) -> usize {
        self.z.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn d(&self) -> &Matrix {
        &self.d
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn z(&self) -> &Matrix {
        &self.z
    }

    pub fn names(&self) -> &ColumnNames {
        &self.names
    }

    /// The single endogenous column; estimators work one equation at a time.
    pub fn endogenous(&self) -> Result<Vec<f64>> {
        if self.r() != 1 {
            return Err(Error::MultipleEndogenous(self.r()));
        }
        Ok(self.d.column(0))
    }

    /// `w = (x, z)`.
    pub fn w(&self) -> Matrix {
        Matrix::hstack(&[&self.x, &self.z]).expect("row counts validated at construction")
    }

    pub fn w_names(&self) -> Vec<String> {
        self.names
            .exogenous
            .iter()
            .chain(&self.names.instruments)
            .cloned()
            .collect()
    }

    /// Dataset restricted to endogenous column `j`.
    pub fn select_endogenous(&self, j: usize) -> Result<Dataset> {
        if j >= self.r() {
            return Err(Error::InvalidArgument(format!("no endogenous column {j}")));
        }
        let mut names = self.names.clone();
        names.endogenous = vec![names.endogenous[j].clone()];
        Dataset::new(
            self.y.clone(),
            Matrix::from_columns(&[self.d.column(j)])?,
            self.x.clone(),
            self.z.clone(),
            names,
        )
    }

    /// Dataset keeping only the listed instruments, in the given order.
    pub fn select_instruments(&self, idx: &[usize]) -> Result<Dataset> {
        if idx.is_empty() || idx.iter().any(|&j| j >= self.p()) {
            return Err(Error::InvalidArgument("invalid instrument selection".into()));
        }
        let cols: Vec<Vec<f64>> = idx.iter().map(|&j| self.z.column(j)).collect();
        let mut names = self.names.clone();
        names.instruments = idx.iter().map(|&j| self.names.instruments[j].clone()).collect();
        Dataset::new(self.y.clone(), self.d.clone(), self.x.clone(), Matrix::from_columns(&cols)?, names)
    }

    /// Dataset with observations permuted (or subsampled) by row index.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Dataset> {
        Dataset::new(
            rows.iter().map(|&i| self.y[i]).collect(),
            self.d.select_rows(rows),
            self.x.select_rows(rows),
            self.z.select_rows(rows),
            self.names.clone(),
        )
    }

    /// Indices into `z` for the given instrument names.
    pub fn instrument_indices(&self, names: &[String]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|name| {
                self.names
                    .instruments
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::UnknownColumn(name.clone()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Derivation {
    Log(String),
    Power(String, i32),
    Product(String, String),
}

impl Derivation {
    fn parse(expr: &str) -> Result<Self> {
        let e = expr.trim();
        if let Some(inner) = e.strip_prefix("log(").and_then(|s| s.strip_suffix(')')) {
            return Ok(Derivation::Log(inner.trim().to_string()));
        }
        if let Some((col, pow)) = e.split_once('^') {
            let k = pow
                .trim()
                .parse::<i32>()
                .map_err(|_| Error::Parse(format!("bad exponent in `{e}`")))?;
            return Ok(Derivation::Power(col.trim().to_string(), k));
        }
        if let Some((a, b)) = e.split_once('*') {
            return Ok(Derivation::Product(a.trim().to_string(), b.trim().to_string()));
        }
        Err(Error::Parse(format!("unsupported derived column expression `{e}`")))
    }

    fn sources(&self) -> Vec<&str> {
        match self {
            Derivation::Log(c) | Derivation::Power(c, _) => vec![c],
            Derivation::Product(a, b) => vec![a, b],
        }
    }

    fn eval(&self, mut get: impl FnMut(&str) -> Option<f64>) -> Option<f64> {
        let v = match self {
            Derivation::Log(c) => get(c)?.ln(),
            Derivation::Power(c, k) => get(c)?.powi(*k),
            Derivation::Product(a, b) => get(a)? * get(b)?,
        };
        v.is_finite().then_some(v)
    }
}

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleMap {
    pub outcome: String,
    pub endogenous: Vec<String>,
    pub exogenous: Vec<String>,
    pub instruments: Vec<String>,
    pub intercept: bool,
    derived: Vec<(String, Derivation)>,
}

impl RoleMap {
    pub fn new(outcome: &str, endogenous: &[&str], exogenous: &[&str], instruments: &[&str]) -> Self {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self {
            outcome: outcome.to_string(),
            endogenous: own(endogenous),
            exogenous: own(exogenous),
            instruments: own(instruments),
            intercept: true,
            derived: Vec::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map: HashMap<String, String> = HashMap::new();
        let mut derived = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("mapping line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            if let Some(name) = key.strip_prefix("derive ") {
                derived.push((name.trim().to_string(), Derivation::parse(value)?));
                continue;
            }
            map.insert(key.to_string(), value.trim().to_string());
        }
        let list = |key: &str| -> Vec<String> {
            map.get(key)
                .map(|v| {
                    v.split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                })
                .unwrap_or_default()
        };
        let outcome = map
            .get("outcome")
            .cloned()
            .ok_or_else(|| Error::Parse("mapping has no `outcome` entry".into()))?;
        let intercept = match map.get("intercept").map(|s| s.to_ascii_lowercase()) {
            None => true,
            Some(v) if v == "true" || v == "yes" || v == "1" => true,
            Some(v) if v == "false" || v == "no" || v == "0" => false,
            Some(v) => return Err(Error::Parse(format!("bad intercept flag `{v}`"))),
        };
        let rm = Self {
            outcome,
            endogenous: list("endogenous"),
            exogenous: list("exogenous"),
            instruments: list("instruments"),
            intercept,
            derived,
        };
        if rm.endogenous.is_empty() {
            return Err(Error::Parse("mapping has no `endogenous` entry".into()));
        }
        if rm.instruments.is_empty() {
            return Err(Error::Parse("mapping has no `instruments` entry".into()));
        }
        Ok(rm)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// What ingestion did besides building the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport {
    pub dataset: Dataset,
    pub rows_read: usize,
    pub rows_dropped: usize,
    pub warnings: Vec<String>,
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "." || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan")
}

pub fn load_csv(path: &Path, mapping: &RoleMap, add_intercept: bool) -> Result<Dataset> {
    Ok(load_csv_report(path, mapping, add_intercept)?.dataset)
}

/// Reads a headed CSV, applies derived columns, drops rows with a missing
/// mapped value (listwise) and assembles the role matrices.
pub fn load_csv_report(path: &Path, mapping: &RoleMap, add_intercept: bool) -> Result<LoadReport> {
    let file = fs::File::open(path)?;
    load_csv_from_reader(file, &path.display().to_string(), mapping, add_intercept)
}

/// [`load_csv_report`] over any byte source; `label` names it in messages.
pub fn load_csv_from_reader<R: Read>(
    source: R,
    label: &str,
    mapping: &RoleMap,
    add_intercept: bool,
) -> Result<LoadReport> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    let col_index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();

    let derived_names: Vec<&str> = mapping.derived.iter().map(|(n, _)| n.as_str()).collect();
    for (_, deriv) in &mapping.derived {
        for src in deriv.sources() {
            if !col_index.contains_key(src) {
                return Err(Error::UnknownColumn(src.to_string()));
            }
        }
    }
    let role_columns: Vec<&str> = std::iter::once(mapping.outcome.as_str())
        .chain(mapping.endogenous.iter().map(String::as_str))
        .chain(mapping.exogenous.iter().map(String::as_str))
        .chain(mapping.instruments.iter().map(String::as_str))
        .collect();
    for c in &role_columns {
        if !col_index.contains_key(c) && !derived_names.contains(c) {
            return Err(Error::UnknownColumn(c.to_string()));
        }
    }

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); role_columns.len()];
    let mut rows_read = 0;
    let mut rows_dropped = 0;
    for (rowno, record) in reader.records().enumerate() {
        let record = record?;
        rows_read += 1;
        let raw = |name: &str| -> Result<Option<f64>> {
            let Some(&idx) = col_index.get(name) else {
                return Ok(None);
            };
            let cell = record.get(idx).unwrap_or("");
            if is_missing(cell) {
                return Ok(None);
            }
            cell.trim().parse::<f64>().map(Some).map_err(|_| {
                Error::Parse(format!("row {}: column `{name}` holds non-numeric `{cell}`", rowno + 2))
            })
        };
        let mut row = Vec::with_capacity(role_columns.len());
        let mut missing = false;
        for c in &role_columns {
            let v = if let Some((_, deriv)) = mapping.derived.iter().find(|(n, _)| n == c) {
                let mut err = None;
                let v = deriv.eval(|src| match raw(src) {
                    Ok(v) => v,
                    Err(e) => {
                        err = Some(e);
                        None
                    }
                });
                if let Some(e) = err {
                    return Err(e);
                }
                v
            } else {
                raw(c)?
            };
            match v {
                Some(v) if v.is_finite() => row.push(v),
                _ => {
                    missing = true;
                    break;
                }
            }
        }
        if missing {
            rows_dropped += 1;
            continue;
        }
        for (col, v) in values.iter_mut().zip(row) {
            col.push(v);
        }
    }
    if rows_dropped > 0 {
        log::info!("{label}: dropped {rows_dropped} of {rows_read} rows with missing mapped values");
    }
    if values[0].is_empty() {
        return Err(Error::EmptyData);
    }

    let n = values[0].len();
    let r = mapping.endogenous.len();
    let k = mapping.exogenous.len();
    let mut it = values.into_iter();
    let y = it.next().unwrap_or_default();
    let dcols: Vec<Vec<f64>> = it.by_ref().take(r).collect();
    let mut xcols: Vec<Vec<f64>> = it.by_ref().take(k).collect();
    let zcols: Vec<Vec<f64>> = it.collect();

    let mut xnames = mapping.exogenous.clone();
    if add_intercept {
        xcols.insert(0, vec![1.0; n]);
        xnames.insert(0, INTERCEPT_NAME.to_string());
    }
    let mut warnings = Vec::new();
    for (name, col) in mapping.instruments.iter().zip(&zcols) {
        if col.iter().all(|v| *v == col[0]) {
            let msg = format!("instrument `{name}` is constant after row deletion");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    let names = ColumnNames {
        outcome: mapping.outcome.clone(),
        endogenous: mapping.endogenous.clone(),
        exogenous: xnames,
        instruments: mapping.instruments.clone(),
    };
    let x = if xcols.is_empty() {
        Matrix::zeros(n, 0)
    } else {
        Matrix::from_columns(&xcols)?
    };
    let dataset = Dataset::new(y, Matrix::from_columns(&dcols)?, x, Matrix::from_columns(&zcols)?, names)?;
    Ok(LoadReport {
        dataset,
        rows_read,
        rows_dropped,
        warnings,
    })
}

/// `$IVQR_CACHE_DIR`, else `$HOME/.cache/ivqr`, else `./.ivqr-cache`.
pub fn default_cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(CACHE_ENV) {
        return PathBuf::from(dir);
    }
    match std::env::var_os("HOME") {
        Some(home) => PathBuf::from(home).join(".cache").join("ivqr"),
        None => PathBuf::from(".ivqr-cache"),
    }
}

/// Downloads the proximity archive once into `cache_dir`, verifies it is a
/// readable zip, and extracts it to `cache_dir/proximity/`. Returns the
/// extraction directory. A warm cache never touches the network.
pub fn fetch_card_archive(url: &str, cache_dir: &Path) -> Result<PathBuf> {
    let archive = cache_dir.join("proximity.zip");
    let cached = fs::metadata(&archive).map(|m| m.len() > 0).unwrap_or(false);
    if !cached {
        fs::create_dir_all(cache_dir)?;
        let bytes = download(url)?;
        if bytes.is_empty() {
            return Err(Error::Fetch {
                url: url.to_string(),
                reason: "empty response body".into(),
            });
        }
        let tmp = cache_dir.join("proximity.zip.part");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, &archive)?;
        log::info!("cached {url} at {}", archive.display());
    }
    let out = cache_dir.join("proximity");
    if let Err(e) = extract_archive(&archive, &out) {
        if matches!(e, Error::CorruptArchive { .. }) {
            // drop it so the next call downloads again
            let _ = fs::remove_file(&archive);
        }
        return Err(e);
    }
    Ok(out)
}

fn download(url: &str) -> Result<Vec<u8>> {
    let fetch_err = |reason: String| Error::Fetch {
        url: url.to_string(),
        reason,
    };
    let mut response = ureq::get(url).call().map_err(|e| fetch_err(e.to_string()))?;
    let mut bytes = Vec::new();
    response
        .body_mut()
        .as_reader()
        .read_to_end(&mut bytes)
        .map_err(|e| fetch_err(e.to_string()))?;
    Ok(bytes)
}

fn extract_archive(archive: &Path, out: &Path) -> Result<()> {
    let corrupt = |reason: String| Error::CorruptArchive {
        path: archive.to_path_buf(),
        reason,
    };
    let file = fs::File::open(archive)?;
    let mut zip = zip::ZipArchive::new(file).map_err(|e| corrupt(e.to_string()))?;
    fs::create_dir_all(out)?;
    for i in 0..zip.len() {
        let mut entry = zip.by_index(i).map_err(|e| corrupt(e.to_string()))?;
        let Some(rel) = entry.enclosed_name() else {
            return Err(corrupt(format!("unsafe entry name `{}`", entry.name())));
        };
        let dest = out.join(rel);
        if entry.is_dir() {
            fs::create_dir_all(&dest)?;
            continue;
        }
        if dest.exists() && fs::metadata(&dest)?.len() == entry.size() {
            continue;
        }
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut buf = Vec::with_capacity(entry.size() as usize);
        entry.read_to_end(&mut buf).map_err(|e| corrupt(e.to_string()))?;
        fs::write(&dest, buf)?;
    }
    Ok(())
}
