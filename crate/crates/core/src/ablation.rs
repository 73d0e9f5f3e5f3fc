//! Sweeps over the reward switch threshold and the latent width.

use crate::checkpoint::Checkpoint;
use crate::data::RnaRecord;
use crate::error::{invalid, Result};
use crate::fold::EnergyModel;
use crate::model::{ModelConfig, ModelState};
use crate::pretrain::{reconstruction_recovery, train_autoencoder, EpochLog, TrainConfig};
use crate::rewards::RewardSpec;
use crate::schedule::NoiseSchedule;
use crate::trainer::{finetune, EpochStats, PpoConfig};

/// One fine-tuning run of the threshold ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TauArm {
    pub name: &'static str,
    pub tau: usize,
}

/// Long-term only, short-term only, and switches at 60 % and 90 % of the
/// schedule.
pub fn tau_arms(steps: usize) -> [TauArm; 4] {
    let at = |pct: usize| (pct * steps).div_ceil(100);
    [
        TauArm { name: "long_only", tau: steps },
        TauArm { name: "short_only", tau: 0 },
        TauArm { name: "tau60", tau: at(60) },
        TauArm { name: "tau90", tau: at(90) },
    ]
}

/// Fine-tunes `checkpoint` once per arm with the same seed and returns each
/// arm's reward curve.
pub fn tau_ablation(
    records: &[RnaRecord],
    checkpoint: &Checkpoint,
    spec: &RewardSpec,
    cfg: &PpoConfig,
    sched: &NoiseSchedule,
    em: &impl EnergyModel,
    seed: u64,
) -> Result<Vec<(TauArm, Vec<EpochStats>)>> {
    tau_arms(sched.steps())
        .into_iter()
        .map(|arm| {
            log::info!("tau ablation arm {} (tau {})", arm.name, arm.tau);
            let spec = RewardSpec { tau: arm.tau, ..*spec };
            let (_, curve) = finetune(records, checkpoint, &spec, cfg, sched, em, seed)?;
            Ok((arm, curve))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DimResult {
    pub latent_dim: usize,
    pub train_recovery: f64,
    pub eval_recovery: f64,
    pub epochs_run: usize,
}

/// Trains one autoencoder per latent width and reports reconstruction
/// recovery. Every width starts from the same seed.
pub fn dim_sweep(
    train: &[RnaRecord],
    eval: &[RnaRecord],
    dims: &[usize],
    model: ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<DimResult>> {
    if dims.is_empty() {
        return Err(invalid!("no latent widths to sweep"));
    }
    let eval = if eval.is_empty() { train } else { eval };
    dims.iter()
        .map(|&latent_dim| {
            let mut state = ModelState::new(ModelConfig { latent_dim, ..model }, seed)?;
            let mut log: Vec<EpochLog> = Vec::new();
            train_autoencoder(&mut state, train, &[], cfg, seed, &mut log)?;
            let r = DimResult {
                latent_dim,
                train_recovery: reconstruction_recovery(&state, train)?,
                eval_recovery: reconstruction_recovery(&state, eval)?,
                epochs_run: log.len(),
            };
            log::info!("latent width {latent_dim}: recovery {:.4}", r.eval_recovery);
            Ok(r)
        })
        .collect()
}

pub fn dim_table(rows: &[DimResult]) -> String {
    let mut s = String::from("latent_dim\ttrain_recovery\teval_recovery\tepochs\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{}\n",
            r.latent_dim, r.train_recovery, r.eval_recovery, r.epochs_run
        ));
    }
    s
}
