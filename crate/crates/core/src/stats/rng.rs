use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A reproducible random stream addressed by `(seed, stream_id)`.
///
/// Backed by ChaCha20, whose 64-bit stream selector gives every Monte Carlo
/// replication its own non-overlapping sequence. Two streams with the same
/// address always produce the same draws, no matter which worker runs them.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Standard bivariate normal pair with correlation `rho`:
/// `u = e1`, `v = rho e1 + sqrt(1 - rho^2) e2`.
pub fn bivariate_normal_sample(rng: &mut RngStream, rho: f64) -> Result<(f64, f64)> {
    if !(rho.abs() < 1.0) {
        return Err(Error::Domain(format!("correlation must satisfy |rho| < 1, got {rho}")));
    }
    let e1 = rng.standard_normal();
    let e2 = rng.standard_normal();
    Ok((e1, rho * e1 + (1.0 - rho * rho).sqrt() * e2))
}
