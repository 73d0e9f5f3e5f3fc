//! Diffusion variance schedule and the closed-form coefficients derived from it.
//!
//! Index convention: `t = 0` is clean data, `1..=T` are noised steps. All
//! tables are computed and stored in 64-bit precision.

use crate::error::{invalid, Error, Result};
use crate::tensor::Mat;

/// Upper bound applied to every beta.
pub const MAX_BETA: f64 = 0.999;
/// Default cosine offset.
pub const DEFAULT_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    // Length T + 1; entry 0 holds the t = 0 sentinel (beta = 0, alpha = 1).
    beta: Vec<f64>,
    alpha: Vec<f64>,
    bar_alpha: Vec<f64>,
}

/// Unnormalised cosine profile `cos²(((t/T + s)/(1 + s)) · π/2)`.
pub fn cosine_profile(t: f64, steps: usize, offset: f64) -> f64 {
    let x = ((t / steps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
    let c = x.cos();
    c * c
}

impl NoiseSchedule {
    /// Cosine schedule: `ᾱ_t = f(t)/f(0)`, `β_t = 1 − ᾱ_t/ᾱ_{t−1}` clamped to
    /// [`MAX_BETA`], after which `ᾱ` is rebuilt as the running product of
    /// `1 − β`.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid!("schedule needs at least one step"));
        }
        if !(offset > 0.0 && offset < 1.0) {
            return Err(invalid!("cosine offset must lie in (0, 1), got {offset}"));
        }
        let f0 = cosine_profile(0.0, steps, offset);
        let mut beta = vec![0.0; steps + 1];
        let mut prev = 1.0;
        for (t, b) in beta.iter_mut().enumerate().skip(1) {
            let bar = cosine_profile(t as f64, steps, offset) / f0;
            *b = (1.0 - bar / prev).clamp(f64::MIN_POSITIVE, MAX_BETA);
            prev = bar;
        }
        Self::from_betas_padded(beta)
    }

    /// Builds a schedule from explicit betas for `t = 1..=T`.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(invalid!("schedule needs at least one step"));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(invalid!("beta[{}] = {b} is outside (0, 1)", i + 1));
        }
        let mut padded = Vec::with_capacity(betas.len() + 1);
        padded.push(0.0);
        padded.extend_from_slice(betas);
        Self::from_betas_padded(padded)
    }

    fn from_betas_padded(beta: Vec<f64>) -> Result<Self> {
        let steps = beta.len() - 1;
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut bar_alpha = Vec::with_capacity(steps + 1);
        bar_alpha.push(1.0);
        for t in 1..=steps {
            bar_alpha.push(bar_alpha[t - 1] * alpha[t]);
        }
        Ok(NoiseSchedule {
            steps,
            beta,
            alpha,
            bar_alpha,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps, "beta index {t} out of 1..={}", self.steps);
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps, "alpha index {t} out of 1..={}", self.steps);
        self.alpha[t]
    }

    /// `ᾱ_t` for `0 ≤ t ≤ T`.
    pub fn bar_alpha(&self, t: usize) -> f64 {
        self.bar_alpha[t]
    }

    pub fn bar_alphas(&self) -> &[f64] {
        &self.bar_alpha
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(invalid!("step {t} exceeds schedule length {}", self.steps));
        }
        Ok(())
    }

    /// `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · eps`.
    pub fn forward_noise(&self, z0: &Mat, t: usize, eps: &Mat) -> Result<Mat> {
        self.check_step(t)?;
        z0.ensure_same_shape(eps, "forward_noise")?;
        let ab = self.bar_alpha[t];
        Ok(z0.lin_comb(ab.sqrt(), eps, (1.0 - ab).sqrt()))
    }

    /// Coefficients `(c_zt, c_z0)` of the posterior mean and the posterior
    /// variance `σ_t²` of `q(z_{t−1} | z_t, z_0)`.
    pub fn posterior_coeffs(&self, t: usize) -> Result<(f64, f64, f64)> {
        if t == 0 {
            return Err(invalid!("no posterior step below t = 1"));
        }
        self.check_step(t)?;
        let a = self.alpha[t];
        let ab = self.bar_alpha[t];
        let ab_prev = self.bar_alpha[t - 1];
        let denom = 1.0 - ab;
        let c_zt = a.sqrt() * (1.0 - ab_prev) / denom;
        let c_z0 = ab_prev.sqrt() * (1.0 - a) / denom;
        let var = ((1.0 - ab_prev) * (1.0 - a) / denom).max(0.0);
        Ok((c_zt, c_z0, var))
    }

    /// Posterior mean and variance given the predicted clean latent.
    pub fn posterior_params(&self, z_t: &Mat, z0_hat: &Mat, t: usize) -> Result<(Mat, f64)> {
        z_t.ensure_same_shape(z0_hat, "posterior_params")?;
        let (c_zt, c_z0, var) = self.posterior_coeffs(t)?;
        Ok((z_t.lin_comb(c_zt, z0_hat, c_z0), var))
    }

    /// DDIM jump coefficients from `t` to `t − k`.
    pub fn ddim_coeffs(&self, t: usize, k: usize, eta: f64) -> Result<DdimCoeffs> {
        self.check_step(t)?;
        if k < 1 || k > t {
            return Err(invalid!("jump size {k} must satisfy 1 <= k <= t = {t}"));
        }
        if eta.is_nan() || eta < 0.0 {
            return Err(invalid!("eta must be non-negative, got {eta}"));
        }
        let ab_t = self.bar_alpha[t];
        let ab_s = self.bar_alpha[t - k];
        let sigma_sq = eta * (1.0 - ab_s) * (1.0 - self.alpha[t]) / (1.0 - ab_t);
        let mut radicand = 1.0 - ab_s - sigma_sq;
        if radicand < 0.0 {
            if radicand < -1e-9 {
                return Err(Error::NumericDomain {
                    t,
                    k,
                    eta,
                    radicand,
                });
            }
            radicand = 0.0;
        }
        Ok(DdimCoeffs {
            a: ab_s.sqrt(),
            gamma: radicand.sqrt(),
            sigma: sigma_sq.max(0.0).sqrt(),
        })
    }
}

/// `z_{t−k} = a · ẑ0 + gamma · ε_θ + sigma · ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimCoeffs {
    pub a: f64,
    pub gamma: f64,
    pub sigma: f64,
}
