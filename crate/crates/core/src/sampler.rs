//! Reverse-process generation in latent space.

use crate::error::{invalid, Result};
use crate::model::{Denoiser, ModelState};
use crate::rng::{normal_vec, Rng};
use crate::schedule::NoiseSchedule;
use crate::sequence::{argmax_row, Base};
use crate::tensor::Mat;

fn noise_like(m: &Mat, rng: &mut Rng) -> Mat {
    Mat::from_vec(m.rows(), m.cols(), normal_vec(rng, m.rows() * m.cols()))
        .expect("shape taken from an existing matrix")
}

fn ddpm_step_scaled(
    z_t: &Mat,
    t: usize,
    c: &Mat,
    den: &impl Denoiser,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    noise_scale: f64,
) -> Result<Mat> {
    if t == 0 || t > sched.steps() {
        return Err(invalid!("step {t} outside 1..={}", sched.steps()));
    }
    let z0_hat = den.predict(z_t, t, c)?;
    let (mean, var) = sched.posterior_params(z_t, &z0_hat, t)?;
    if var == 0.0 || noise_scale == 0.0 {
        return Ok(mean);
    }
    let eps = noise_like(&mean, rng);
    Ok(mean.lin_comb(1.0, &eps, noise_scale * var.sqrt()))
}

/// One stochastic reverse step `z_t → z_{t−1}` through the posterior. At
/// `t = 1` the posterior variance is zero and the mean is returned.
pub fn ddpm_step(
    z_t: &Mat,
    t: usize,
    c: &Mat,
    den: &impl Denoiser,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Mat> {
    ddpm_step_scaled(z_t, t, c, den, sched, rng, 1.0)
}

/// Jump `z_t → z_{t−k}` via the predicted clean latent.
#[allow(clippy::too_many_arguments)]
pub fn ddim_jump(
    z_t: &Mat,
    t: usize,
    k: usize,
    eta: f64,
    c: &Mat,
    den: &impl Denoiser,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Mat> {
    let coeffs = sched.ddim_coeffs(t, k, eta)?;
    let z0_hat = den.predict(z_t, t, c)?;
    if coeffs.gamma == 0.0 && coeffs.sigma == 0.0 && coeffs.a == 1.0 {
        return Ok(z0_hat);
    }
    let ab = sched.bar_alpha(t);
    let eps_pred = z_t.lin_comb(1.0 / (1.0 - ab).sqrt(), &z0_hat, -ab.sqrt() / (1.0 - ab).sqrt());
    let mut out = z0_hat.lin_comb(coeffs.a, &eps_pred, coeffs.gamma);
    if coeffs.sigma > 0.0 {
        out.add_assign(&noise_like(&out, rng).scale(coeffs.sigma));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SamplerKind {
    /// Every posterior step from `T` down to 1.
    #[default]
    Ddpm,
    /// Jumps of `jump` steps (the last one possibly shorter).
    Ddim { jump: usize, eta: f64 },
}

/// Runs the reverse process from `z_T ~ N(0, I)` and returns the final
/// clean latent.
pub fn sample_latent(
    c: &Mat,
    latent_dim: usize,
    den: &impl Denoiser,
    sched: &NoiseSchedule,
    kind: SamplerKind,
    rng: &mut Rng,
) -> Result<Mat> {
    let mut z = Mat::from_vec(c.rows(), latent_dim, normal_vec(rng, c.rows() * latent_dim))?;
    let mut t = sched.steps();
    match kind {
        SamplerKind::Ddpm => {
            while t > 0 {
                z = ddpm_step(&z, t, c, den, sched, rng)?;
                t -= 1;
            }
        }
        SamplerKind::Ddim { jump, eta } => {
            if jump == 0 {
                return Err(invalid!("DDIM jump must be at least 1"));
            }
            while t > 0 {
                let k = jump.min(t);
                z = ddim_jump(&z, t, k, eta, c, den, sched, rng)?;
                t -= k;
            }
        }
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub sequence: Vec<Base>,
    /// Per-position probabilities over A, U, C, G.
    pub probs: Mat,
}

/// Argmax sequence of a probability matrix.
pub fn argmax_sequence(probs: &Mat) -> Vec<Base> {
    (0..probs.rows())
        .map(|i| Base::from_index(argmax_row(probs.row(i))))
        .collect()
}

/// Draws `n` designs for the backbone described by `c`.
pub fn sample_sequences(
    c: &Mat,
    n: usize,
    state: &ModelState,
    sched: &NoiseSchedule,
    kind: SamplerKind,
    rng: &mut Rng,
) -> Result<Vec<Design>> {
    if n == 0 {
        return Err(invalid!("sample count must be at least 1"));
    }
    (0..n)
        .map(|_| {
            let z = sample_latent(c, state.config.latent_dim, state, sched, kind, rng)?;
            let probs = state.decode(&z)?;
            Ok(Design {
                sequence: argmax_sequence(&probs),
                probs,
            })
        })
        .collect()
}

/// Tab-separated per-position probabilities with a header row.
pub fn probability_table(probs: &Mat) -> String {
    let mut s = String::from("position\tpA\tpU\tpC\tpG\n");
    for i in 0..probs.rows() {
        let r = probs.row(i);
        s.push_str(&format!("{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n", i + 1, r[0], r[1], r[2], r[3]));
    }
    s
}
