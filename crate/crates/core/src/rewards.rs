//! Folding-based rewards and their combination across denoising steps.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fold::{brute_force_fold, fold_mfe, ss_similarity, DotBracket, EnergyModel, Fold};
use crate::layout::helix_layout;
use crate::metrics::{lddt, BackboneCoords};
use crate::sequence::Base;

/// How the energy term enters the reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MfeScale {
    /// `exp(1/(mfe − 1/4))`, in (0, e⁻⁴].
    #[default]
    Mapped,
    /// `−mfe`, unbounded above.
    Raw,
}

/// Secondary-structure predictor used by the reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Folder {
    #[default]
    Dp,
    /// Exhaustive enumeration; only for very short sequences.
    Exhaustive,
}

/// 3D predictor used by the lDDT term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Structure3d {
    #[default]
    Helix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSpec {
    pub w_ss: f64,
    pub w_mfe: f64,
    pub w_lddt: f64,
    /// Steps `t ≥ tau` use the short-term reward, earlier ones the long-term.
    pub tau: usize,
    /// Scales the long-term policy variance relative to `β_t`.
    pub eta: f64,
    pub mfe_scale: MfeScale,
    pub folder: Folder,
    pub structure: Structure3d,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            w_ss: 0.0,
            w_mfe: 1.0,
            w_lddt: 0.0,
            tau: 90,
            eta: 1.0,
            mfe_scale: MfeScale::Raw,
            folder: Folder::Dp,
            structure: Structure3d::Helix,
        }
    }
}

impl RewardSpec {
    /// Threshold used when none is configured: 60 when the secondary-structure
    /// term is the only one, 90 otherwise, for a 100-step schedule.
    pub fn default_tau(w_ss: f64, w_mfe: f64, w_lddt: f64, steps: usize) -> usize {
        let base = if w_ss > 0.0 && w_mfe == 0.0 && w_lddt == 0.0 { 60 } else { 90 };
        (base * steps).div_ceil(100)
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        let w = [self.w_ss, self.w_mfe, self.w_lddt];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(invalid!("reward weights must be finite and non-negative, got {w:?}"));
        }
        if w.iter().all(|x| *x == 0.0) {
            return Err(invalid!("at least one reward weight must be positive"));
        }
        if self.tau > steps {
            return Err(invalid!("tau {} exceeds the number of steps {steps}", self.tau));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(invalid!("eta must be finite and non-negative, got {}", self.eta));
        }
        Ok(())
    }

    fn fold(&self, seq: &[Base], em: &impl EnergyModel) -> Result<Fold> {
        match self.folder {
            Folder::Dp => fold_mfe(seq, em),
            Folder::Exhaustive => brute_force_fold(seq, em),
        }
    }

    fn energy_term(&self, mfe: f64) -> Result<f64> {
        match self.mfe_scale {
            MfeScale::Mapped => mfe_reward(mfe),
            MfeScale::Raw => Ok(-mfe),
        }
    }
}

/// Maps an energy in kcal/mol onto (0, e⁻⁴]; lower energies score higher.
pub fn mfe_reward(mfe: f64) -> Result<f64> {
    if mfe.is_nan() || mfe > 0.0 {
        return Err(invalid!("free energy must be non-positive, got {mfe}"));
    }
    Ok((1.0 / (mfe - 0.25)).exp())
}

/// Target a design is scored against.
#[derive(Debug, Clone, Copy)]
pub struct RewardTarget<'a> {
    pub structure: &'a DotBracket,
    pub coords: &'a BackboneCoords,
}

/// Individual terms and their weighted sum. Terms with zero weight are not
/// evaluated and reported as zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardParts {
    pub ss: f64,
    pub mfe: f64,
    pub lddt: f64,
    pub energy: f64,
    pub total: f64,
}

pub fn composite_reward(
    seq: &[Base],
    target: RewardTarget<'_>,
    spec: &RewardSpec,
    em: &impl EnergyModel,
) -> Result<RewardParts> {
    if seq.len() != target.structure.len() || seq.len() != target.coords.len() {
        return Err(invalid!(
            "sequence length {} differs from target structure {} / coordinates {}",
            seq.len(),
            target.structure.len(),
            target.coords.len()
        ));
    }
    let fold = spec.fold(seq, em)?;
    let mut parts = RewardParts {
        energy: fold.energy,
        ..Default::default()
    };
    let mut total = 0.0;
    if spec.w_ss > 0.0 {
        parts.ss = ss_similarity(&fold.structure, target.structure)?;
        total += spec.w_ss * parts.ss;
    }
    if spec.w_mfe > 0.0 {
        parts.mfe = spec.energy_term(fold.energy)?;
        total += spec.w_mfe * parts.mfe;
    }
    if spec.w_lddt > 0.0 {
        let predicted = match spec.structure {
            Structure3d::Helix => helix_layout(&fold.structure),
        };
        parts.lddt = lddt(target.coords, &predicted)?;
        total += spec.w_lddt * parts.lddt;
    }
    parts.total = total;
    Ok(parts)
}

/// Short-term reward for `t ≥ tau`, long-term otherwise.
pub fn piecewise_total(t: usize, r_short: f64, r_long: f64, spec: &RewardSpec) -> f64 {
    if t >= spec.tau {
        r_short
    } else {
        r_long
    }
}

/// `(r − mean) / (population std + 1e-8)`.
pub fn normalize_batch(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(invalid!("cannot normalise an empty batch"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}
