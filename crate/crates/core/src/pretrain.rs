//! Latent-diffusion pre-training.
//!
//! Phase 0 fits the embedding, encoder and decoder as an autoencoder on
//! per-position cross-entropy. Phase 1 freezes them and trains the denoiser
//! on the latent-diffusion loss. Each phase stops early once its validation
//! recovery has not improved by `min_boost` for `patience` epochs, and the
//! best evaluated parameters are kept.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::RnaRecord;
use crate::error::{invalid, Error, Result};
use crate::metrics::mean_sequence_recovery;
use crate::model::{Group, LdmSample, ModelConfig, ModelState};
use crate::nn::{AdamWConfig, Grads};
use crate::rng::{self, normal_vec, Stream};
use crate::sampler::{sample_latent, SamplerKind};
use crate::schedule::NoiseSchedule;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub autoencoder_epochs: usize,
    pub autoencoder_lr: f64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Passes over every record per epoch.
    pub repeats: usize,
    pub patience: usize,
    pub min_boost: f64,
    /// Diffusion epochs between validation sampling rounds.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            autoencoder_epochs: 100,
            autoencoder_lr: 1e-3,
            epochs: 200,
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 16,
            repeats: 1,
            patience: 10,
            min_boost: 0.005,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be at least 1"));
        }
        if self.repeats == 0 || self.eval_every == 0 {
            return Err(invalid!("repeats and eval_every must be at least 1"));
        }
        for (name, v) in [
            ("autoencoder_lr", self.autoencoder_lr),
            ("lr", self.lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid!("{name} must be positive, got {v}"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(invalid!("weight decay must be non-negative"));
        }
        if !(self.min_boost.is_finite() && self.min_boost >= 0.0) {
            return Err(invalid!("min_boost must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Autoencoder,
    Diffusion,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Autoencoder => "autoencoder",
            Phase::Diffusion => "diffusion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    /// Mean per-sample loss over the epoch.
    pub loss: f64,
    /// Validation recovery, when evaluated this epoch.
    pub recovery: Option<f64>,
}

pub fn log_table(log: &[EpochLog]) -> String {
    let mut s = String::from("phase\tepoch\tloss\trecovery\n");
    for e in log {
        let rec = e.recovery.map(|r| format!("{r:.6}")).unwrap_or_else(|| "NA".into());
        s.push_str(&format!("{}\t{}\t{:.6}\t{rec}\n", e.phase.label(), e.epoch, e.loss));
    }
    s
}

struct EarlyStop {
    best: f64,
    best_epoch: usize,
    best_state: Option<ModelState>,
}

impl EarlyStop {
    fn new() -> Self {
        EarlyStop {
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            best_state: None,
        }
    }

    /// Records an evaluation; returns true when training should stop.
    fn update(&mut self, epoch: usize, value: f64, state: &ModelState, cfg: &TrainConfig) -> bool {
        if self.best_state.is_none() || value >= self.best + cfg.min_boost {
            self.best = value;
            self.best_epoch = epoch;
            self.best_state = Some(state.clone());
        } else if value > self.best {
            // Small gains keep the better parameters without resetting patience.
            self.best = value;
            self.best_state = Some(state.clone());
        }
        epoch - self.best_epoch >= cfg.patience
    }
}

fn epoch_order(n: usize, repeats: usize, r: &mut rng::Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..repeats).flat_map(|_| 0..n).collect();
    order.shuffle(r);
    order
}

fn sum_in_order(results: Vec<(f64, Grads)>, state: &ModelState) -> (f64, Grads) {
    let mut total = state.params.zero_grads();
    let mut loss = 0.0;
    for (l, g) in &results {
        loss += l;
        total.add_assign(g);
    }
    (loss, total)
}

fn diverged(epoch: usize, step: usize, what: &str) -> Error {
    Error::Diverged {
        epoch,
        step,
        msg: format!("{what} loss is not finite"),
    }
}

/// Mean per-record recovery of decode(encode(seq)).
pub fn reconstruction_recovery(state: &ModelState, records: &[RnaRecord]) -> Result<f64> {
    let probs: Vec<Mat> = records
        .par_iter()
        .map(|r| state.decode(&state.encode_seq(&r.sequence)))
        .collect::<Result<_>>()?;
    mean_sequence_recovery(records.iter().zip(&probs).map(|(r, p)| (r.sequence.as_slice(), p)))
}

/// Mean recovery of one full-trajectory sample per record. Record `i` draws
/// from its own keyed stream so results do not depend on scheduling.
pub fn sampling_recovery(
    state: &ModelState,
    records: &[RnaRecord],
    sched: &NoiseSchedule,
    kind: SamplerKind,
    seed: u64,
) -> Result<f64> {
    let probs: Vec<Mat> = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut g = rng::keyed(seed, Stream::Eval, i as u64);
            let z = sample_latent(&r.features, state.config.latent_dim, state, sched, kind, &mut g)?;
            state.decode(&z)
        })
        .collect::<Result<_>>()?;
    mean_sequence_recovery(records.iter().zip(&probs).map(|(r, p)| (r.sequence.as_slice(), p)))
}

fn check_records(records: &[RnaRecord], cfg: &ModelConfig) -> Result<()> {
    if records.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    for r in records {
        if r.features.cols() != cfg.cond_dim() {
            return Err(invalid!(
                "record {} has {} feature columns, model expects {}",
                r.id,
                r.features.cols(),
                cfg.cond_dim()
            ));
        }
    }
    Ok(())
}

/// Phase 0 on `state`, in place.
pub fn train_autoencoder(
    state: &mut ModelState,
    train: &[RnaRecord],
    val: &[RnaRecord],
    cfg: &TrainConfig,
    seed: u64,
    log: &mut Vec<EpochLog>,
) -> Result<()> {
    cfg.validate()?;
    check_records(train, &state.config)?;
    let monitor = if val.is_empty() { train } else { val };
    let opt_cfg = AdamWConfig::new(cfg.autoencoder_lr, cfg.weight_decay);
    let mut r = rng::substream(seed, Stream::Data);
    let mut stop = EarlyStop::new();
    let trainable = |name: &str| Group::of(name) != Group::Denoiser;
    for epoch in 1..=cfg.autoencoder_epochs {
        let order = epoch_order(train.len(), cfg.repeats, &mut r);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(f64, Grads)> = batch
                .par_iter()
                .map(|&i| state.reconstruction_loss(&train[i].sequence))
                .collect();
            let (loss, mut grads) = sum_in_order(results, state);
            if !loss.is_finite() || !grads.is_finite() {
                return Err(diverged(epoch, step, "reconstruction"));
            }
            grads.scale(1.0 / batch.len() as f64);
            let ModelState { params, optimizer, .. } = state;
            optimizer.step(params, &grads, &opt_cfg, trainable);
            epoch_loss += loss;
        }
        let recovery = reconstruction_recovery(state, monitor)?;
        log.push(EpochLog {
            phase: Phase::Autoencoder,
            epoch,
            loss: epoch_loss / order.len() as f64,
            recovery: Some(recovery),
        });
        log::debug!("autoencoder epoch {epoch}: recovery {recovery:.4}");
        if stop.update(epoch, recovery, state, cfg) {
            break;
        }
    }
    if let Some(best) = stop.best_state {
        *state = best;
    }
    Ok(())
}

/// Phase 1 on `state`, in place; embedding, encoder and decoder stay fixed.
pub fn train_diffusion(
    state: &mut ModelState,
    train: &[RnaRecord],
    val: &[RnaRecord],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    seed: u64,
    log: &mut Vec<EpochLog>,
) -> Result<()> {
    cfg.validate()?;
    check_records(train, &state.config)?;
    let monitor = if val.is_empty() { train } else { val };
    let opt_cfg = AdamWConfig::new(cfg.lr, cfg.weight_decay);
    let latents: Vec<Mat> = train.iter().map(|r| state.encode_seq(&r.sequence)).collect();
    let mut r = rng::substream(seed, Stream::Diffusion);
    let mut stop = EarlyStop::new();
    let trainable = |name: &str| Group::of(name) == Group::Denoiser;
    let d = state.config.latent_dim;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train.len(), cfg.repeats, &mut r);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<(usize, LdmSample)> = batch
                .iter()
                .map(|&i| {
                    let n = train[i].len();
                    let t = r.random_range(1..=sched.steps());
                    let eps = Mat::from_vec(n, d, normal_vec(&mut r, n * d)).expect("shape");
                    (
                        i,
                        LdmSample {
                            target: train[i].sequence.clone(),
                            t,
                            eps,
                            cond: train[i].features.clone(),
                        },
                    )
                })
                .collect();
            let results: Vec<(f64, Grads)> = samples
                .par_iter()
                .map(|(i, s)| state.ldm_loss_and_grads_from_latent(&latents[*i], s, sched))
                .collect::<Result<_>>()?;
            let (loss, mut grads) = sum_in_order(results, state);
            if !loss.is_finite() || !grads.is_finite() {
                return Err(diverged(epoch, step, "latent diffusion"));
            }
            grads.scale(1.0 / batch.len() as f64);
            let ModelState { params, optimizer, .. } = state;
            optimizer.step(params, &grads, &opt_cfg, trainable);
            if !state.params.all_finite() {
                return Err(diverged(epoch, step, "parameter update"));
            }
            epoch_loss += loss;
        }
        let evaluate = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        let recovery = if evaluate {
            Some(sampling_recovery(state, monitor, sched, SamplerKind::Ddpm, seed)?)
        } else {
            None
        };
        log.push(EpochLog {
            phase: Phase::Diffusion,
            epoch,
            loss: epoch_loss / order.len() as f64,
            recovery,
        });
        if let Some(rec) = recovery {
            log::debug!("diffusion epoch {epoch}: recovery {rec:.4}");
            if stop.update(epoch, rec, state, cfg) {
                break;
            }
        }
    }
    if let Some(best) = stop.best_state {
        *state = best;
    }
    Ok(())
}

/// Both phases from a freshly initialised model.
pub fn train_ldm(
    train: &[RnaRecord],
    val: &[RnaRecord],
    model: ModelConfig,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<(ModelState, Vec<EpochLog>)> {
    cfg.validate()?;
    let mut state = ModelState::new(model, seed)?;
    let mut log = Vec::new();
    train_autoencoder(&mut state, train, val, cfg, seed, &mut log)?;
    state.optimizer.reset();
    train_diffusion(&mut state, train, val, cfg, sched, seed, &mut log)?;
    Ok((state, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};
    use crate::fold::PairEnergies;

    fn tiny() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            hidden: 16,
            latent_dim: 4,
            denoiser_hidden: 16,
            blocks: 1,
            time_dim: 8,
            neighbors: 4,
        }
    }

    fn corpus(n: usize, seed: u64) -> Vec<RnaRecord> {
        let cfg = SynthConfig {
            count: n,
            min_len: 12,
            max_len: 20,
            neighbors: 4,
            coord_noise: None,
        };
        gen_synthetic(&cfg, &PairEnergies::default(), seed).unwrap()
    }

    #[test]
    fn zero_batch_rejected() {
        let recs = corpus(2, 1);
        let sched = NoiseSchedule::cosine(10, 0.008).unwrap();
        let cfg = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(matches!(
            train_ldm(&recs, &[], tiny(), &cfg, &sched, 1),
            Err(Error::InvalidArgument(_))
        ));
        assert!(train_ldm(&[], &[], tiny(), &TrainConfig::default(), &sched, 1).is_err());
    }

    #[test]
    fn autoencoder_learns_and_is_deterministic() {
        let recs = corpus(8, 2);
        let cfg = TrainConfig {
            autoencoder_epochs: 30,
            batch_size: 4,
            repeats: 2,
            patience: 100,
            ..Default::default()
        };
        let run = || {
            let mut s = ModelState::new(tiny(), 3).unwrap();
            let mut log = Vec::new();
            train_autoencoder(&mut s, &recs, &[], &cfg, 3, &mut log).unwrap();
            (s, log)
        };
        let (a, log) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        assert!(log.last().unwrap().loss < log[0].loss);
        assert!(reconstruction_recovery(&a, &recs).unwrap() > 0.9);
    }

    #[test]
    fn early_stopping_honours_patience() {
        let recs = corpus(4, 3);
        let cfg = TrainConfig {
            autoencoder_epochs: 200,
            patience: 3,
            min_boost: 2.0,
            ..Default::default()
        };
        let mut s = ModelState::new(tiny(), 1).unwrap();
        let mut log = Vec::new();
        train_autoencoder(&mut s, &recs, &[], &cfg, 1, &mut log).unwrap();
        assert_eq!(log.len(), 4);
    }

    #[test]
    fn diffusion_phase_leaves_autoencoder_untouched() {
        let recs = corpus(3, 4);
        let sched = NoiseSchedule::cosine(10, 0.008).unwrap();
        let cfg = TrainConfig {
            autoencoder_epochs: 2,
            epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        let mut s = ModelState::new(tiny(), 5).unwrap();
        let mut log = Vec::new();
        train_autoencoder(&mut s, &recs, &[], &cfg, 5, &mut log).unwrap();
        let before = s.clone();
        train_diffusion(&mut s, &recs, &[], &cfg, &sched, 5, &mut log).unwrap();
        for (a, b) in s.params.tensors().iter().zip(before.params.tensors()) {
            if Group::of(&a.name) != Group::Denoiser {
                assert_eq!(a, b);
            }
        }
        assert_ne!(s.params, before.params);
        assert!(log.iter().any(|e| e.phase == Phase::Diffusion && e.recovery.is_some()));
        assert!(log_table(&log).starts_with("phase\tepoch\tloss\trecovery\n"));
    }
}
