//! Finite-difference verification of the hand-written backward passes.
//!
//! Parameters are stored in 32-bit, so each probe divides by the perturbation
//! actually applied after rounding. Losses are evaluated in 64-bit. Central
//! differences at steps `h` and `2h` are Richardson-combined; `h` shrinks
//! until the two agree, so sharply curved losses are probed in their smooth
//! regime.

use rand::seq::index;

use crate::error::Result;
use crate::model::{LdmSample, ModelState};
use crate::nn::Grads;
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;

/// First probe step before rounding to the parameter's 32-bit grid.
const PROBE: f64 = 1.0 / 1024.0;
const MIN_PROBE: f64 = 1.0 / 1048576.0;
/// Relative disagreement between the two step sizes that triggers a smaller step.
const STEP_AGREEMENT: f64 = 0.001;
const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Tensor name and offset of the worst entry.
    pub worst: (String, usize),
    /// Analytic and numeric derivative at the worst entry.
    pub worst_values: (f64, f64),
}

/// Flat indices to probe: one random entry of every tensor, then uniform
/// draws without replacement up to `count`.
pub fn probe_indices(state: &ModelState, count: usize, rng: &mut Rng) -> Vec<usize> {
    let total = state.params.num_scalars();
    if count >= total {
        return (0..total).collect();
    }
    let mut picked: Vec<usize> = Vec::with_capacity(count);
    let mut start = 0;
    for t in state.params.tensors() {
        if !t.is_empty() {
            picked.push(start + index::sample(rng, t.len(), 1).index(0));
        }
        start += t.len();
    }
    for i in index::sample(rng, total, total.min(count * 2)) {
        if picked.len() >= count {
            break;
        }
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked
}

/// Compares `analytic` against extrapolated central differences of `loss` at
/// the given flat indices. Relative error is `|a − n| / (|a| + 1e-8)`.
pub fn compare_gradients(
    state: &ModelState,
    analytic: &Grads,
    indices: &[usize],
    mut loss: impl FnMut(&ModelState) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut probe = state.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: (String::new(), 0),
        worst_values: (0.0, 0.0),
    };
    for &flat in indices {
        let (id, off) = state.params.locate(flat);
        let p = state.params.data(id)[off];
        let mut slope = |step: f64| -> Result<f64> {
            let hi = (p as f64 + step) as f32;
            let lo = (p as f64 - step) as f32;
            probe.params.tensors_mut()[id].data[off] = hi;
            let plus = loss(&probe)?;
            probe.params.tensors_mut()[id].data[off] = lo;
            let minus = loss(&probe)?;
            probe.params.tensors_mut()[id].data[off] = p;
            Ok((plus - minus) / (hi as f64 - lo as f64))
        };
        let mut h = PROBE;
        let numeric = loop {
            let near = slope(h)?;
            let far = slope(2.0 * h)?;
            if (near - far).abs() <= STEP_AGREEMENT * near.abs().max(DENOM_FLOOR) || h <= MIN_PROBE {
                break (4.0 * near - far) / 3.0;
            }
            h /= 4.0;
        };
        let a = analytic.flat(id, off);
        let rel = (a - numeric).abs() / (a.abs() + DENOM_FLOOR);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.0.is_empty() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = (state.params.get(id).name.clone(), off);
            report.worst_values = (a, numeric);
        }
    }
    Ok(report)
}

/// Checks the latent-diffusion loss gradient over `count` random parameters
/// spanning every group.
pub fn check_gradients(
    state: &ModelState,
    sample: &LdmSample,
    sched: &NoiseSchedule,
    count: usize,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let (_, grads) = state.ldm_loss_and_grads(sample, sched)?;
    let idx = probe_indices(state, count, rng);
    compare_gradients(state, &grads, &idx, |s| Ok(s.ldm_loss_and_grads(sample, sched)?.0))
}
