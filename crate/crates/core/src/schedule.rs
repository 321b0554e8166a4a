use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

/// Linear-beta DDPM forward-process coefficients.
///
/// For each timestep t we keep beta_t and the cumulative product
/// alpha_bar_t = prod_{s<=t} (1 - beta_s); the forward map uses
/// alpha_t = sqrt(alpha_bar_t) and sigma_t = sqrt(1 - alpha_bar_t).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub const DEFAULT_TIMESTEPS: usize = 200;

impl NoiseSchedule {
    pub fn linear(timesteps: usize) -> Self {
        Self::linear_range(timesteps, 1e-4, 0.02)
    }

    pub fn linear_range(timesteps: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(timesteps >= 2);
        let mut betas = Vec::with_capacity(timesteps);
        let mut alpha_bars = Vec::with_capacity(timesteps);
        let mut prod = 1.0;
        for t in 0..timesteps {
            let frac = t as f64 / (timesteps - 1) as f64;
            let beta = beta_start + (beta_end - beta_start) * frac;
            prod *= 1.0 - beta;
            betas.push(beta);
            alpha_bars.push(prod);
        }
        Self { betas, alpha_bars }
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// sqrt(alpha_bar_t)
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bars[t].sqrt()
    }

    /// sqrt(1 - alpha_bar_t)
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bars[t]).sqrt()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.timesteps() {
            return Err(Error::InvalidInput(format!(
                "timestep {t} out of range [0, {})",
                self.timesteps()
            )));
        }
        Ok(())
    }

    /// Forward diffusion: z_t = alpha_t * z0 + sigma_t * eps.
    pub fn add_noise<F: Scalar>(
        &self,
        z0: &ArrayD<F>,
        eps: &ArrayD<F>,
        t: usize,
    ) -> Result<ArrayD<F>> {
        self.check_t(t)?;
        if z0.shape() != eps.shape() {
            return Err(Error::InvalidShape(format!(
                "z0 shape {:?} != eps shape {:?}",
                z0.shape(),
                eps.shape()
            )));
        }
        let a = c::<F>(self.alpha(t));
        let s = c::<F>(self.sigma(t));
        Ok(z0.mapv(|v| v * a) + &eps.mapv(|v| v * s))
    }
}
