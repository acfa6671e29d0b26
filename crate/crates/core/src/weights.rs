//! Observation-level conditional density estimates `f_i` at the quantile of
//! interest, from the difference quotient of two IVQR fits at `tau +- h`.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::ivqr::{fit_ivqr_warm, AlphaGrid, IvqrFit, WeightingMode};
use crate::stats::linalg::dot;
use crate::stats::{norm_pdf, norm_quantile};

pub const WEIGHT_FLOOR: f64 = 1e-6;
pub const WEIGHT_CAP: f64 = 1e3;
pub const CLIP_WARN_FRACTION: f64 = 0.10;
/// `tau +- h` is kept inside `(TAU_MARGIN, 1 - TAU_MARGIN)`.
pub const TAU_MARGIN: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    Unit,
    Sparsity,
    TrueDensity,
    Supplied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub source: WeightSource,
    pub tau: Option<f64>,
    pub bandwidth: Option<f64>,
    pub values: Vec<f64>,
    /// Raw quotients that were nonpositive, undefined or above the cap.
    pub clipped_count: usize,
}

impl WeightVector {
    /// All ones: the ordinary least squares first stage.
    pub fn unit(n: usize) -> Self {
        Self {
            source: WeightSource::Unit,
            tau: None,
            bandwidth: None,
            values: vec![1.0; n],
            clipped_count: 0,
        }
    }

    /// Caller-supplied nonnegative finite weights.
    pub fn from_values(values: Vec<f64>, tau: Option<f64>, source: WeightSource) -> Result<Self> {
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Domain("weights must be finite and nonnegative".into()));
        }
        Ok(Self {
            source,
            tau,
            bandwidth: None,
            values,
            clipped_count: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn clipped_fraction(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.clipped_count as f64 / self.values.len() as f64
        }
    }
}

/// `2 n^{-1/3} z_{0.975}^{2/3} [1.5 phi(Phi^{-1}(tau))^4 / (2 Phi^{-1}(tau)^2 + 1)]^{1/3}`,
/// shrunk when needed so that `tau +- h` stays inside `(0.001, 0.999)`.
pub fn hall_sheather_bandwidth(tau: f64, n: usize) -> f64 {
    let x0 = norm_quantile(tau).unwrap_or(0.0);
    let f0 = norm_pdf(x0);
    let z = norm_quantile(0.975).unwrap_or(1.959_963_984_540_054);
    let h = 2.0
        * (n.max(1) as f64).powf(-1.0 / 3.0)
        * z.powf(2.0 / 3.0)
        * (1.5 * f0.powi(4) / (2.0 * x0 * x0 + 1.0)).powf(1.0 / 3.0);
    let room = (tau - TAU_MARGIN).min(1.0 - TAU_MARGIN - tau);
    if room <= 0.0 {
        // tau itself is outside the supported band; stay strictly inside (0, 1)
        return 0.5 * tau.min(1.0 - tau);
    }
    if h >= room {
        room * (1.0 - 1e-9)
    } else {
        h
    }
}

pub fn sparsity_weights(data: &Dataset, tau: f64, grid: &AlphaGrid, mode: WeightingMode) -> Result<WeightVector> {
    Ok(sparsity_weights_detailed(data, tau, grid, mode, None)?.0)
}

/// Sparsity weights together with the two side fits. `start` warm-starts
/// the inner quantile regressions.
pub fn sparsity_weights_detailed(
    data: &Dataset,
    tau: f64,
    grid: &AlphaGrid,
    mode: WeightingMode,
    start: Option<&[usize]>,
) -> Result<(WeightVector, IvqrFit, IvqrFit)> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Domain(format!("quantile level must lie in (0, 1), got {tau}")));
    }
    let h = hall_sheather_bandwidth(tau, data.n());
    let upper = fit_ivqr_warm(data, tau + h, grid, mode, start)?;
    let lower = fit_ivqr_warm(data, tau - h, grid, mode, Some(&upper.basis))?;
    let w = weights_from_fits(data, tau, h, &upper, &lower)?;
    Ok((w, upper, lower))
}

/// `f_i = 2h / s_i (theta(tau + h) - theta(tau - h))` with `s_i = (d_i, x_i, z_i)`.
pub fn weights_from_fits(data: &Dataset, tau: f64, h: f64, upper: &IvqrFit, lower: &IvqrFit) -> Result<WeightVector> {
    let d = data.endogenous()?;
    let diff: Vec<f64> = upper.theta().iter().zip(lower.theta()).map(|(a, b)| a - b).collect();
    let k = data.k();
    let (x, z) = (data.x(), data.z());
    let mut clipped = 0;
    let values: Vec<f64> = (0..data.n())
        .map(|i| {
            let denom = d[i] * diff[0] + dot(x.row(i), &diff[1..1 + k]) + dot(z.row(i), &diff[1 + k..]);
            let (v, clip) = clip_quotient(2.0 * h, denom);
            clipped += clip as usize;
            v
        })
        .collect();
    let out = WeightVector {
        source: WeightSource::Sparsity,
        tau: Some(tau),
        bandwidth: Some(h),
        values,
        clipped_count: clipped,
    };
    if out.clipped_fraction() > CLIP_WARN_FRACTION {
        log::warn!(
            "tau {tau}: {} of {} density weights clipped",
            out.clipped_count,
            out.values.len()
        );
    }
    Ok(out)
}

// A zero denominator means the two fitted quantiles coincide: infinite
// density, so the cap. A negative one is a quantile crossing: the floor.
fn clip_quotient(num: f64, denom: f64) -> (f64, bool) {
    if denom == 0.0 {
        return (WEIGHT_CAP, true);
    }
    let q = num / denom;
    if q.is_nan() || q <= 0.0 {
        (WEIGHT_FLOOR, true)
    } else if q > WEIGHT_CAP {
        (WEIGHT_CAP, true)
    } else {
        (q, false)
    }
}
