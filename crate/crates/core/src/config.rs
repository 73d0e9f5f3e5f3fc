//! Run configuration and the manifest every run leaves behind.
//!
//! Configs are TOML with one table per stage. Every field has a default, so
//! an empty file is a valid config; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::fold::PairEnergies;
use crate::model::ModelConfig;
use crate::pretrain::TrainConfig;
use crate::rewards::{Folder, MfeScale, RewardSpec, Structure3d};
use crate::sampler::SamplerKind;
use crate::schedule::{NoiseSchedule, DEFAULT_OFFSET};
use crate::trainer::PpoConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Gaussian coordinate noise in Å; zero disables it.
    pub coord_noise: f64,
    /// Train, fine-tune and test proportions.
    pub split: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            count: 200,
            min_len: 16,
            max_len: 48,
            coord_noise: 0.0,
            split: [0.7, 0.1, 0.2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub offset: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            steps: 100,
            offset: DEFAULT_OFFSET,
        }
    }
}

/// Reward settings as written in the file. `tau` falls back to
/// [`RewardSpec::default_tau`] when omitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    pub w_ss: f64,
    pub w_mfe: f64,
    pub w_lddt: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<usize>,
    pub eta: f64,
    pub mfe_scale: MfeScale,
    pub folder: Folder,
    pub structure: Structure3d,
}

impl Default for RewardSection {
    fn default() -> Self {
        let d = RewardSpec::default();
        RewardSection {
            w_ss: d.w_ss,
            w_mfe: d.w_mfe,
            w_lddt: d.w_lddt,
            tau: None,
            eta: d.eta,
            mfe_scale: d.mfe_scale,
            folder: d.folder,
            structure: d.structure,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergySection {
    pub gc: f64,
    pub au: f64,
    pub gu: f64,
    pub hairpin_min: usize,
}

impl Default for EnergySection {
    fn default() -> Self {
        let d = PairEnergies::default();
        EnergySection {
            gc: d.gc,
            au: d.au,
            gu: d.gu,
            hairpin_min: d.hairpin_min,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerName {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub kind: SamplerName,
    /// DDIM jump size.
    pub jump: usize,
    /// DDIM stochasticity.
    pub eta: f64,
    pub designs_per_record: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            kind: SamplerName::Ddpm,
            jump: 10,
            eta: 0.0,
            designs_per_record: 4,
        }
    }
}

impl SamplerSection {
    pub fn kind(&self) -> SamplerKind {
        match self.kind {
            SamplerName::Ddpm => SamplerKind::Ddpm,
            SamplerName::Ddim => SamplerKind::Ddim {
                jump: self.jump,
                eta: self.eta,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    /// Latent widths swept by the dimension ablation.
    pub latent_dims: Vec<usize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            latent_dims: vec![8, 16, 32, 64, 128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataSection,
    pub model: ModelConfig,
    pub schedule: ScheduleSection,
    pub train: TrainConfig,
    pub rewards: RewardSection,
    pub ppo: PpoConfig,
    pub energy: EnergySection,
    pub sampler: SamplerSection,
    pub ablation: AblationSection,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Config::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every section, reporting problems as config errors.
    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        wrap(self.model.validate())?;
        wrap(self.train.validate())?;
        wrap(self.ppo.validate())?;
        let sched = self.schedule()?;
        wrap(self.reward_spec().validate(sched.steps()))?;
        wrap(self.energy().map(|_| ()))?;
        let d = &self.data;
        if d.split.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config(format!("data.split ratios must be positive, got {:?}", d.split)));
        }
        if !(d.coord_noise.is_finite() && d.coord_noise >= 0.0) {
            return Err(Error::Config("data.coord_noise must be finite and non-negative".into()));
        }
        if self.sampler.designs_per_record == 0 {
            return Err(Error::Config("sampler.designs_per_record must be at least 1".into()));
        }
        if self.sampler.kind == SamplerName::Ddim && self.sampler.jump == 0 {
            return Err(Error::Config("sampler.jump must be at least 1".into()));
        }
        if self.ablation.latent_dims.contains(&0) {
            return Err(Error::Config("ablation.latent_dims must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.schedule.steps, self.schedule.offset).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn reward_spec(&self) -> RewardSpec {
        let r = &self.rewards;
        RewardSpec {
            w_ss: r.w_ss,
            w_mfe: r.w_mfe,
            w_lddt: r.w_lddt,
            tau: r
                .tau
                .unwrap_or_else(|| RewardSpec::default_tau(r.w_ss, r.w_mfe, r.w_lddt, self.schedule.steps)),
            eta: r.eta,
            mfe_scale: r.mfe_scale,
            folder: r.folder,
            structure: r.structure,
        }
    }

    pub fn energy(&self) -> Result<PairEnergies> {
        let e = &self.energy;
        PairEnergies::new(e.gc, e.au, e.gu, e.hairpin_min)
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            count: self.data.count,
            min_len: self.data.min_len,
            max_len: self.data.max_len,
            neighbors: self.model.neighbors,
            coord_noise: (self.data.coord_noise > 0.0).then_some(self.data.coord_noise),
        }
    }
}

/// Hex-encoded SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(sha256_hex(&bytes))
}

pub const RUN_MANIFEST: &str = "run.toml";

/// What a run read and wrote. Paths of outputs are relative to the output
/// directory; inputs are recorded as given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub workers: usize,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub config: Config,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, workers: usize, config: &Config) -> Self {
        RunManifest {
            command: command.into(),
            seed,
            workers,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config: config.clone(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    /// Records `path`, which must lie under `out_dir`.
    pub fn add_output(&mut self, out_dir: &Path, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        let rel = path.strip_prefix(out_dir).unwrap_or(path);
        self.outputs.insert(rel.display().to_string(), hash);
        Ok(())
    }

    /// Writes the manifest into `out_dir` and returns its path.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(RUN_MANIFEST);
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&path, text).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
