//! Step-wise policy-gradient fine-tuning of a pre-trained model.
//!
//! Each rollout draws a step `t`, noises the encoded native sequence, and
//! asks the reference denoiser for `ẑ0`. Two actions are sampled from it: a
//! jump straight to a clean latent (long-term) and a single posterior step
//! (short-term). Both are decoded and scored; the step index picks which
//! reward and which action drive the clipped importance-weighted update.
//! Only the denoiser is trained.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::RnaRecord;
use crate::error::{invalid, Error, Result};
use crate::fold::EnergyModel;
use crate::model::{Group, ModelState};
use crate::nn::{clip_grad_norm, AdamWConfig, Grads};
use crate::rewards::{composite_reward, normalize_batch, piecewise_total, RewardSpec, RewardTarget};
use crate::rng::{self, normal_vec, Rng, Stream};
use crate::sampler::argmax_sequence;
use crate::schedule::NoiseSchedule;
use crate::sequence::Base;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip: f64,
    /// Weight of the squared log-ratio penalty.
    pub kl_weight: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Samples whose gradients are summed per optimizer step.
    pub accum_steps: usize,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Floor on every policy standard deviation.
    pub sigma_min: f64,
    /// Consecutive rollouts drawn per record within a batch. Larger groups
    /// make the batch-normalised advantage compare actions on the same
    /// target rather than targets against each other.
    pub group_size: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 1e-4,
            kl_weight: 1.0,
            lr: 1e-5,
            weight_decay: 1e-3,
            accum_steps: 32,
            grad_clip: 1.0,
            batch_size: 32,
            epochs: 100,
            sigma_min: 1e-2,
            group_size: 1,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("clip", self.clip),
            ("kl_weight", self.kl_weight),
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
            ("sigma_min", self.sigma_min),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid!("{name} must be positive, got {v}"));
            }
        }
        if self.clip >= 1.0 {
            return Err(invalid!("clip must be below 1, got {}", self.clip));
        }
        if self.accum_steps == 0 || self.batch_size == 0 || self.group_size == 0 {
            return Err(invalid!("accum_steps, batch_size and group_size must be at least 1"));
        }
        Ok(())
    }
}

/// Isotropic normal log-density summed over all entries.
pub fn gaussian_logprob(x: &Mat, mean: &Mat, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid!("sigma must be positive, got {sigma}"));
    }
    x.ensure_same_shape(mean, "gaussian_logprob")?;
    let n = x.data().len() as f64;
    Ok(-x.sum_sq_diff(mean) / (2.0 * sigma * sigma) - n * sigma.ln() - 0.5 * n * (2.0 * PI).ln())
}

/// Standard deviation of the long-term policy at step `t`.
pub fn long_sigma(sched: &NoiseSchedule, t: usize, eta: f64, sigma_min: f64) -> f64 {
    (eta * sched.beta(t)).max(sigma_min * sigma_min).sqrt()
}

/// Standard deviation of the short-term policy at step `t`.
pub fn short_sigma(sched: &NoiseSchedule, t: usize, sigma_min: f64) -> Result<f64> {
    Ok(sched.posterior_coeffs(t)?.2.sqrt().max(sigma_min))
}

/// The action whose log-probability is optimised for one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    pub z_t: Mat,
    pub t: usize,
    pub cond: Mat,
    pub action: Mat,
    pub sigma: f64,
    /// True when the action is the one-step posterior sample.
    pub short_term: bool,
}

impl PolicySample {
    fn mean(&self, z0_hat: &Mat, sched: &NoiseSchedule) -> Result<Mat> {
        if self.short_term {
            Ok(sched.posterior_params(&self.z_t, z0_hat, self.t)?.0)
        } else {
            Ok(z0_hat.clone())
        }
    }

    fn mean_slope(&self, sched: &NoiseSchedule) -> Result<f64> {
        if self.short_term {
            Ok(sched.posterior_coeffs(self.t)?.1)
        } else {
            Ok(1.0)
        }
    }

    /// Log-probability of the action under `state`.
    pub fn logprob(&self, state: &ModelState, sched: &NoiseSchedule) -> Result<f64> {
        let z0_hat = state.denoise_predict(&self.z_t, self.t, &self.cond)?;
        gaussian_logprob(&self.action, &self.mean(&z0_hat, sched)?, self.sigma)
    }
}

/// Per-sample loss terms of the clipped objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyTerms {
    pub loss: f64,
    pub ratio: f64,
    pub kl: f64,
    /// Derivative of the loss with respect to the current log-probability.
    pub dloss_dlogp: f64,
}

/// `−min(r·A, clip(r)·A) + λ·½(logp − logp_ref)²` with `r = exp(logp − logp_ref)`.
pub fn policy_terms(logp: f64, logp_ref: f64, advantage: f64, cfg: &PpoConfig) -> PolicyTerms {
    let diff = logp - logp_ref;
    let ratio = diff.exp();
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * advantage;
    // Gradient flows through the unclipped branch unless the clipped one is
    // strictly smaller, in which case the clipped ratio is a constant.
    let (surrogate, dsurr) = if clipped < unclipped {
        (clipped, 0.0)
    } else {
        (unclipped, unclipped)
    };
    let kl = 0.5 * diff * diff;
    PolicyTerms {
        loss: -surrogate + cfg.kl_weight * kl,
        ratio,
        kl,
        dloss_dlogp: -dsurr + cfg.kl_weight * diff,
    }
}

/// Loss of one sample and its gradient with respect to the denoiser.
pub fn policy_loss(
    state: &ModelState,
    sample: &PolicySample,
    logp_ref: f64,
    advantage: f64,
    cfg: &PpoConfig,
    sched: &NoiseSchedule,
) -> Result<(PolicyTerms, Grads)> {
    let z0_hat = state.denoise_predict(&sample.z_t, sample.t, &sample.cond)?;
    let mean = sample.mean(&z0_hat, sched)?;
    let logp = gaussian_logprob(&sample.action, &mean, sample.sigma)?;
    let terms = policy_terms(logp, logp_ref, advantage, cfg);
    // d logp / d mean = (x − mean)/σ²; d mean / d ẑ0 is a scalar.
    let scale = terms.dloss_dlogp * sample.mean_slope(sched)? / (sample.sigma * sample.sigma);
    let upstream = sample.action.lin_comb(scale, &mean, -scale);
    let (_, grads) = state.denoise_vjp(&sample.z_t, sample.t, &sample.cond, &upstream)?;
    Ok((terms, grads))
}

/// Current policy and the frozen snapshot that generated the rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyPair {
    pub current: ModelState,
    pub reference: ModelState,
}

impl PolicyPair {
    pub fn new(state: ModelState) -> Self {
        PolicyPair {
            reference: state.clone(),
            current: state,
        }
    }

    pub fn refresh(&mut self) {
        self.reference.params.clone_from(&self.current.params);
    }
}

struct Rollout {
    record: usize,
    sample: PolicySample,
    logp_ref: f64,
    short_seq: Vec<Base>,
    long_seq: Vec<Base>,
}

fn rollout(
    policies: &PolicyPair,
    rec: &RnaRecord,
    record: usize,
    spec: &RewardSpec,
    cfg: &PpoConfig,
    sched: &NoiseSchedule,
    r: &mut Rng,
) -> Result<Rollout> {
    let refm = &policies.reference;
    let n = rec.len();
    let d = refm.config.latent_dim;
    let t = r.random_range(1..=sched.steps());
    let mut noise = || Mat::from_vec(n, d, normal_vec(r, n * d)).expect("shape");
    let z0 = refm.encode_seq(&rec.sequence);
    let z_t = sched.forward_noise(&z0, t, &noise())?;
    let z0_hat = refm.denoise_predict(&z_t, t, &rec.features)?;

    let s_long = long_sigma(sched, t, spec.eta, cfg.sigma_min);
    let z0_prime = z0_hat.lin_comb(1.0, &noise(), s_long);
    let s_short = short_sigma(sched, t, cfg.sigma_min)?;
    let (post_mean, _) = sched.posterior_params(&z_t, &z0_hat, t)?;
    let z_prev = post_mean.lin_comb(1.0, &noise(), s_short);

    let long_seq = argmax_sequence(&refm.decode(&z0_prime)?);
    let short_seq = argmax_sequence(&refm.decode(&z_prev)?);
    let short_term = t >= spec.tau;
    let sample = PolicySample {
        z_t,
        t,
        cond: rec.features.clone(),
        action: if short_term { z_prev } else { z0_prime },
        sigma: if short_term { s_short } else { s_long },
        short_term,
    };
    let logp_ref = sample.logprob(refm, sched)?;
    Ok(Rollout {
        record,
        sample,
        logp_ref,
        short_seq,
        long_seq,
    })
}

/// Summary of one rollout batch and its updates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub r_total: Vec<f64>,
    pub r_short: Vec<f64>,
    pub r_long: Vec<f64>,
    pub kl: Vec<f64>,
    pub ratio: Vec<f64>,
    /// Importance ratio of the first sample after the reference refresh.
    pub first_ratio: f64,
    pub first_kl: f64,
    /// L2 distance between the parameters before and after the batch.
    pub drift: f64,
    pub optimizer_steps: usize,
}

/// One rollout batch followed by accumulated clipped-surrogate updates. The
/// reference is refreshed once the batch has been consumed.
#[allow(clippy::too_many_arguments)]
pub fn policy_update(
    batch: &[&RnaRecord],
    policies: &mut PolicyPair,
    spec: &RewardSpec,
    cfg: &PpoConfig,
    sched: &NoiseSchedule,
    em: &impl EnergyModel,
    seed: u64,
    first_key: u64,
) -> Result<BatchStats> {
    if batch.is_empty() {
        return Err(invalid!("empty rollout batch"));
    }
    let rollouts: Vec<Rollout> = batch
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let mut r = rng::keyed(seed, Stream::Rl, first_key + i as u64);
            rollout(policies, rec, i, spec, cfg, sched, &mut r)
        })
        .collect::<Result<_>>()?;
    let scored: Vec<(f64, f64)> = rollouts
        .par_iter()
        .map(|ro| {
            let rec = batch[ro.record];
            let target = RewardTarget {
                structure: &rec.truth_db,
                coords: &rec.coords,
            };
            let short = composite_reward(&ro.short_seq, target, spec, em)?.total;
            let long = composite_reward(&ro.long_seq, target, spec, em)?.total;
            Ok((short, long))
        })
        .collect::<Result<_>>()?;
    let r_short: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let r_long: Vec<f64> = scored.iter().map(|s| s.1).collect();
    let r_total: Vec<f64> = rollouts
        .iter()
        .zip(&scored)
        .map(|(ro, (s, l))| piecewise_total(ro.sample.t, *s, *l, spec))
        .collect();
    let adv = normalize_batch(&r_total)?;

    let opt_cfg = AdamWConfig::new(cfg.lr, cfg.weight_decay);
    let trainable = |name: &str| Group::of(name) == Group::Denoiser;
    let start = policies.current.params.clone();
    let mut acc = policies.current.params.zero_grads();
    let mut pending = 0usize;
    let mut steps = 0usize;
    let mut kl = Vec::with_capacity(rollouts.len());
    let mut ratio = Vec::with_capacity(rollouts.len());
    for (i, ro) in rollouts.iter().enumerate() {
        let (terms, grads) = policy_loss(&policies.current, &ro.sample, ro.logp_ref, adv[i], cfg, sched)?;
        if !terms.loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                step: i,
                msg: "policy loss is not finite".into(),
            });
        }
        kl.push(terms.kl);
        ratio.push(terms.ratio);
        acc.add_assign(&grads);
        pending += 1;
        if pending == cfg.accum_steps || i + 1 == rollouts.len() {
            acc.scale(1.0 / pending as f64);
            clip_grad_norm(&mut acc, cfg.grad_clip);
            let ModelState { params, optimizer, .. } = &mut policies.current;
            optimizer.step(params, &acc, &opt_cfg, trainable);
            if !policies.current.params.all_finite() {
                return Err(Error::Diverged {
                    epoch: 0,
                    step: i,
                    msg: "parameters became non-finite".into(),
                });
            }
            acc = policies.current.params.zero_grads();
            pending = 0;
            steps += 1;
        }
    }
    let drift = policies.current.params.l2_distance(&start);
    policies.refresh();
    Ok(BatchStats {
        first_ratio: ratio[0],
        first_kl: kl[0],
        r_total,
        r_short,
        r_long,
        kl,
        ratio,
        drift,
        optimizer_steps: steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_r_total: f64,
    pub std_r_total: f64,
    pub mean_r_short: f64,
    pub mean_r_long: f64,
    pub mean_kl: f64,
    pub mean_ratio: f64,
    pub drift: f64,
    /// Whether every batch started with ratio 1 and zero penalty.
    pub fresh_identity: bool,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pop_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Tab-separated reward curve, one row per epoch.
pub fn curve_table(stats: &[EpochStats]) -> String {
    let mut s = String::from("epoch\tmean_r_total\tstd_r_total\tmean_r_short\tmean_r_long\tmean_kl\tmean_ratio\n");
    for e in stats {
        let _ = writeln!(
            s,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}\t{:.6}",
            e.epoch, e.mean_r_total, e.std_r_total, e.mean_r_short, e.mean_r_long, e.mean_kl, e.mean_ratio
        );
    }
    s
}

pub const STAGE_KEY: &str = "stage";

/// Runs `cfg.epochs` epochs over `records`. Every epoch visits the records in
/// a fresh order; each batch holds `cfg.batch_size` rollouts, `group_size`
/// per record, wrapping around when the corpus is smaller than a batch. With
/// zero epochs the checkpoint is returned unchanged.
pub fn finetune(
    records: &[RnaRecord],
    checkpoint: &Checkpoint,
    spec: &RewardSpec,
    cfg: &PpoConfig,
    sched: &NoiseSchedule,
    em: &impl EnergyModel,
    seed: u64,
) -> Result<(Checkpoint, Vec<EpochStats>)> {
    cfg.validate()?;
    spec.validate(sched.steps())?;
    match checkpoint.meta.get(STAGE_KEY).map(String::as_str) {
        Some("pretrained") | Some("finetuned") => {}
        other => {
            return Err(Error::Precondition(format!(
                "fine-tuning needs a pre-trained checkpoint, found stage {other:?}"
            )))
        }
    }
    if records.is_empty() {
        return Err(invalid!("fine-tuning set is empty"));
    }
    if cfg.epochs == 0 {
        return Ok((checkpoint.clone(), Vec::new()));
    }
    let mut state = checkpoint.state.clone();
    state.optimizer.reset();
    let mut policies = PolicyPair::new(state);
    let mut order_rng = rng::substream(seed, Stream::Rl);
    let per_batch = cfg.batch_size.div_ceil(cfg.group_size);
    let per_epoch = records.len().div_ceil(per_batch).max(1);
    let mut key = 0u64;
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut order_rng);
        let mut all = Vec::new();
        let mut fresh = true;
        let mut drift = 0.0;
        let mut cursor = 0;
        for _ in 0..per_epoch {
            let batch: Vec<&RnaRecord> = (0..cfg.batch_size)
                .map(|j| &records[order[(cursor + j / cfg.group_size) % order.len()]])
                .collect();
            cursor += cfg.batch_size.div_ceil(cfg.group_size);
            let stats = policy_update(&batch, &mut policies, spec, cfg, sched, em, seed, key)
                .map_err(|e| match e {
                    Error::Diverged { step, msg, .. } => Error::Diverged { epoch, step, msg },
                    other => other,
                })?;
            key += batch.len() as u64;
            fresh &= stats.first_ratio == 1.0 && stats.first_kl == 0.0;
            drift += stats.drift;
            all.push(stats);
        }
        let cat = |f: fn(&BatchStats) -> &Vec<f64>| -> Vec<f64> { all.iter().flat_map(|b| f(b).iter().copied()).collect() };
        let total = cat(|b| &b.r_total);
        let e = EpochStats {
            epoch,
            mean_r_total: mean(&total),
            std_r_total: pop_std(&total),
            mean_r_short: mean(&cat(|b| &b.r_short)),
            mean_r_long: mean(&cat(|b| &b.r_long)),
            mean_kl: mean(&cat(|b| &b.kl)),
            mean_ratio: mean(&cat(|b| &b.ratio)),
            drift,
            fresh_identity: fresh,
        };
        log::info!(
            "epoch {epoch}: reward {:.4} ± {:.4}, kl {:.3e}",
            e.mean_r_total,
            e.std_r_total,
            e.mean_kl
        );
        curve.push(e);
    }
    let mut out = Checkpoint {
        state: policies.current,
        meta: checkpoint.meta.clone(),
    };
    out.meta.insert(STAGE_KEY.into(), "finetuned".into());
    out.meta.insert("reward".into(), format!("{spec:?}"));
    out.meta.insert("ppo".into(), format!("{cfg:?}"));
    Ok((out, curve))
}

/// Piecewise rewards of `repeats` training-style rollouts per record under
/// `state`. Draws are keyed by record and repeat, so two models compared with
/// the same seed see identical step indices and noise.
#[allow(clippy::too_many_arguments)]
pub fn policy_rewards(
    state: &ModelState,
    records: &[RnaRecord],
    repeats: usize,
    spec: &RewardSpec,
    cfg: &PpoConfig,
    sched: &NoiseSchedule,
    em: &impl EnergyModel,
    seed: u64,
) -> Result<Vec<f64>> {
    let pair = PolicyPair::new(state.clone());
    let jobs: Vec<(usize, usize)> = (0..records.len())
        .flat_map(|i| (0..repeats).map(move |j| (i, j)))
        .collect();
    jobs.par_iter()
        .map(|&(i, j)| {
            let mut r = rng::keyed(seed, Stream::Eval, (i * repeats + j) as u64);
            let rec = &records[i];
            let ro = rollout(&pair, rec, i, spec, cfg, sched, &mut r)?;
            let target = RewardTarget {
                structure: &rec.truth_db,
                coords: &rec.coords,
            };
            let seq = if ro.sample.short_term { &ro.short_seq } else { &ro.long_seq };
            Ok(composite_reward(seq, target, spec, em)?.total)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};
    use crate::fold::PairEnergies;
    use crate::gradcheck::{compare_gradients, probe_indices};
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn logprob_closed_forms() {
        let x = Mat::from_vec(2, 3, vec![0.5, -1.0, 2.0, 0.0, 0.25, 1.5]).unwrap();
        let n = 6.0;
        let at_mode = gaussian_logprob(&x, &x, 1.0).unwrap();
        assert!((at_mode + n / 2.0 * (2.0 * PI).ln()).abs() < 1e-12);
        let wider = gaussian_logprob(&x, &x, 2.0).unwrap();
        assert!((at_mode - wider - n * 2f64.ln()).abs() < 1e-12);
        let m = Mat::from_vec(1, 4, vec![0.1, 0.2, -0.3, 0.0]).unwrap();
        let y = Mat::from_vec(1, 4, vec![1.0, -0.5, 0.7, 2.0]).unwrap();
        let s = 0.7;
        let want: f64 = (0..4)
            .map(|i| {
                let z = (y.data()[i] - m.data()[i]) / s;
                -0.5 * z * z - s.ln() - 0.5 * (2.0 * PI).ln()
            })
            .sum();
        assert!((gaussian_logprob(&y, &m, s).unwrap() - want).abs() < 1e-12);
        assert!(gaussian_logprob(&y, &m, 0.0).is_err());
        assert!(gaussian_logprob(&y, &m, -1.0).is_err());
    }

    #[test]
    fn sigmas_respect_floor() {
        let sched = NoiseSchedule::cosine(100, 0.008).unwrap();
        assert_eq!(long_sigma(&sched, 1, 1.0, 0.01), (sched.beta(1).max(1e-4)).sqrt());
        assert_eq!(long_sigma(&sched, 50, 0.0, 0.01), 0.01);
        assert_eq!(short_sigma(&sched, 1, 0.01).unwrap(), 0.01);
        assert!(short_sigma(&sched, 80, 0.01).unwrap() > 0.01);
    }

    proptest! {
        #[test]
        fn clipped_objective_bounds(lp in -3.0f64..3.0, lp_ref in -3.0f64..3.0, a in -3.0f64..3.0, clip in 1e-4f64..0.5) {
            let cfg = PpoConfig { clip, ..Default::default() };
            let t = policy_terms(lp, lp_ref, a, &cfg);
            let surrogate = -(t.loss - cfg.kl_weight * t.kl);
            let unclipped = t.ratio * a;
            if a > 0.0 {
                prop_assert!(surrogate <= unclipped + 1e-12);
            } else if a < 0.0 {
                prop_assert!(surrogate <= unclipped + 1e-12);
                prop_assert!(surrogate >= unclipped.min(t.ratio.clamp(1.0 - clip, 1.0 + clip) * a) - 1e-12);
            }
            prop_assert!(t.kl >= 0.0);
            prop_assert_eq!(t.kl == 0.0, lp == lp_ref);
        }
    }

    #[test]
    fn fresh_snapshot_identity() {
        let t = policy_terms(-3.5, -3.5, 0.7, &PpoConfig::default());
        assert_eq!(t.ratio, 1.0);
        assert_eq!(t.kl, 0.0);
        assert_eq!(t.dloss_dlogp, -0.7);
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            hidden: 8,
            latent_dim: 4,
            denoiser_hidden: 8,
            blocks: 2,
            time_dim: 8,
            neighbors: 2,
        }
    }

    fn policy_sample(state: &ModelState, short_term: bool, r: &mut rng::Rng) -> PolicySample {
        let (n, d, c) = (6, state.config.latent_dim, state.config.cond_dim());
        PolicySample {
            z_t: Mat::from_vec(n, d, normal_vec(r, n * d)).unwrap(),
            t: 42,
            cond: Mat::from_vec(n, c, normal_vec(r, n * c)).unwrap(),
            action: Mat::from_vec(n, d, normal_vec(r, n * d)).unwrap(),
            sigma: 0.8,
            short_term,
        }
    }

    #[test]
    fn policy_gradient_matches_finite_differences() {
        let sched = NoiseSchedule::cosine(100, 0.008).unwrap();
        let state = ModelState::new(tiny(), 9).unwrap();
        let mut r = rng::seeded(10);
        for (short, clip, offset, adv) in [(false, 0.2, 0.05, 1.3), (true, 0.2, -0.05, -0.8), (false, 1e-4, 0.4, 0.9), (true, 1e-4, -0.4, 0.5)] {
            let cfg = PpoConfig { clip, ..Default::default() };
            let s = policy_sample(&state, short, &mut r);
            let lp_ref = s.logprob(&state, &sched).unwrap() + offset;
            let (_, grads) = policy_loss(&state, &s, lp_ref, adv, &cfg, &sched).unwrap();
            let idx = probe_indices(&state, 200, &mut r);
            let idx: Vec<usize> = idx
                .into_iter()
                .filter(|&f| Group::of(&state.params.get(state.params.locate(f).0).name) == Group::Denoiser)
                .collect();
            let rep = compare_gradients(&state, &grads, &idx, |m| {
                let lp = s.logprob(m, &sched)?;
                Ok(policy_terms(lp, lp_ref, adv, &cfg).loss)
            })
            .unwrap();
            assert!(rep.max_rel_error <= 1e-3, "{short} {clip}: {rep:?}");
        }
    }

    fn corpus(n: usize) -> Vec<RnaRecord> {
        let cfg = SynthConfig {
            count: n,
            min_len: 10,
            max_len: 16,
            neighbors: 2,
            coord_noise: None,
        };
        gen_synthetic(&cfg, &PairEnergies::default(), 3).unwrap()
    }

    fn pretrained() -> Checkpoint {
        let mut ck = Checkpoint::new(ModelState::new(tiny(), 4).unwrap());
        ck.meta.insert(STAGE_KEY.into(), "pretrained".into());
        ck
    }

    #[test]
    fn zero_epochs_returns_input() {
        let sched = NoiseSchedule::cosine(20, 0.008).unwrap();
        let ck = pretrained();
        let cfg = PpoConfig { epochs: 0, ..Default::default() };
        let (out, curve) = finetune(&corpus(3), &ck, &RewardSpec { tau: 18, ..Default::default() }, &cfg, &sched, &PairEnergies::default(), 1).unwrap();
        assert!(curve.is_empty());
        assert_eq!(out.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn missing_pretraining_is_precondition_error() {
        let sched = NoiseSchedule::cosine(20, 0.008).unwrap();
        let ck = Checkpoint::new(ModelState::new(tiny(), 4).unwrap());
        let r = finetune(&corpus(3), &ck, &RewardSpec { tau: 18, ..Default::default() }, &PpoConfig::default(), &sched, &PairEnergies::default(), 1);
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn equal_rewards_only_decay() {
        let sched = NoiseSchedule::cosine(20, 0.008).unwrap();
        let recs = corpus(4);
        // The zero model decodes every latent to the same all-A sequence.
        let mut state = ModelState::new(tiny(), 4).unwrap();
        state.zero_parameters();
        for t in state.params.tensors_mut() {
            if Group::of(&t.name) == Group::Denoiser {
                t.data.iter_mut().for_each(|v| *v = 0.5);
            }
        }
        let mut pair = PolicyPair::new(state.clone());
        let cfg = PpoConfig { accum_steps: 4, batch_size: 4, lr: 1e-2, weight_decay: 0.1, ..Default::default() };
        let batch: Vec<&RnaRecord> = recs.iter().collect();
        let stats = policy_update(&batch, &mut pair, &RewardSpec { tau: 18, ..Default::default() }, &cfg, &sched, &PairEnergies::default(), 1, 0).unwrap();
        assert!(stats.r_total.iter().all(|r| *r == stats.r_total[0]));
        for (a, b) in pair.current.params.tensors().iter().zip(state.params.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                let decayed = (*y as f64 * (1.0 - cfg.lr * cfg.weight_decay)) as f32;
                if Group::of(&a.name) == Group::Denoiser {
                    assert_eq!(*x, decayed);
                } else {
                    assert_eq!(x, y);
                }
            }
        }
    }

    #[test]
    fn reference_refresh_and_determinism() {
        let sched = NoiseSchedule::cosine(20, 0.008).unwrap();
        let recs = corpus(6);
        let cfg = PpoConfig { epochs: 2, batch_size: 4, accum_steps: 2, lr: 1e-3, ..Default::default() };
        let spec = RewardSpec { tau: 10, ..Default::default() };
        let run = || finetune(&recs, &pretrained(), &spec, &cfg, &sched, &PairEnergies::default(), 5).unwrap();
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(curve_table(&ca), curve_table(&cb));
        assert_eq!(a, b);
        assert!(ca.iter().all(|e| e.fresh_identity));
        assert_eq!(ca.len(), 2);
        assert_eq!(a.meta[STAGE_KEY], "finetuned");
        for (x, y) in a.state.params.tensors().iter().zip(pretrained().state.params.tensors()) {
            if Group::of(&x.name) != Group::Denoiser {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn policy_rewards_are_paired() {
        let sched = NoiseSchedule::cosine(20, 0.008).unwrap();
        let recs = corpus(5);
        let s = ModelState::new(tiny(), 2).unwrap();
        let spec = RewardSpec { tau: 18, ..Default::default() };
        let cfg = PpoConfig::default();
        let em = PairEnergies::default();
        let a = policy_rewards(&s, &recs, 3, &spec, &cfg, &sched, &em, 3).unwrap();
        let b = policy_rewards(&s, &recs, 3, &spec, &cfg, &sched, &em, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
    }

    #[test]
    fn grouped_batches_repeat_records() {
        let sched = NoiseSchedule::cosine(20, 0.008).unwrap();
        let recs = corpus(6);
        let cfg = PpoConfig { epochs: 1, batch_size: 6, accum_steps: 6, group_size: 3, lr: 1e-3, ..Default::default() };
        let spec = RewardSpec { tau: 10, ..Default::default() };
        let (_, curve) = finetune(&recs, &pretrained(), &spec, &cfg, &sched, &PairEnergies::default(), 5).unwrap();
        assert_eq!(curve.len(), 1);
        assert!(curve[0].fresh_identity);
    }
}
