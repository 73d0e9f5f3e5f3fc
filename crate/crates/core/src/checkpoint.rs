//! Checkpoint files: a line-oriented text header terminated by `end`,
//! followed by little-endian 32-bit floats for every parameter tensor in
//! header order, then the first and second optimizer moments in the same
//! order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "rnadiff-checkpoint";

/// Model plus free-form metadata such as the schedule or reward settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    /// Keys and values must not contain newlines; keys must not contain
    /// spaces.
    pub meta: BTreeMap<String, String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(state: ModelState) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("ldm_loss".into(), "sum over latent entries, mean over batch".into());
        Checkpoint { state, meta }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let c = &s.config;
        let mut h = format!("{MAGIC} {FORMAT_VERSION}\n");
        h.push_str(&format!("seed {}\n", s.seed));
        for (k, v) in [
            ("embed_dim", c.embed_dim),
            ("hidden", c.hidden),
            ("latent_dim", c.latent_dim),
            ("denoiser_hidden", c.denoiser_hidden),
            ("blocks", c.blocks),
            ("time_dim", c.time_dim),
            ("neighbors", c.neighbors),
        ] {
            h.push_str(&format!("model.{k} {v}\n"));
        }
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(bad(format!("metadata entry {k:?} cannot be stored")));
            }
            h.push_str(&format!("meta {k} {v}\n"));
        }
        h.push_str(&format!("optimizer.step {}\n", s.optimizer.step));
        for t in s.params.tensors() {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            h.push_str(&format!("tensor {} {}\n", t.name, dims.join("x")));
        }
        h.push_str("end\n");
        let mut out = h.into_bytes();
        let sections = s
            .params
            .tensors()
            .iter()
            .map(|t| &t.data)
            .chain(&s.optimizer.m)
            .chain(&s.optimizer.v);
        for data in sections {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut lines = Vec::new();
        let mut pos = 0;
        loop {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|b| *b == b'\n')
                .ok_or_else(|| bad("header is not terminated by 'end'"))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8"))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line.to_string());
        }
        let mut it = lines.iter();
        let first = it.next().ok_or_else(|| bad("empty header"))?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad("not a checkpoint file"))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let mut seed = None;
        let mut model: BTreeMap<String, usize> = BTreeMap::new();
        let mut meta = BTreeMap::new();
        let mut step = None;
        let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
        for line in it {
            let (key, value) = line.split_once(' ').ok_or_else(|| bad(format!("malformed header line {line:?}")))?;
            let num = |v: &str| v.parse::<u64>().map_err(|_| bad(format!("bad number in {line:?}")));
            match key {
                "seed" => seed = Some(num(value)?),
                "optimizer.step" => step = Some(num(value)?),
                "meta" => {
                    let (k, v) = value.split_once(' ').unwrap_or((value, ""));
                    meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let (name, dims) = value
                        .split_once(' ')
                        .ok_or_else(|| bad(format!("malformed tensor line {line:?}")))?;
                    let dims = dims
                        .split('x')
                        .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad shape in {line:?}"))))
                        .collect::<Result<Vec<_>>>()?;
                    tensors.push((name.to_string(), dims));
                }
                k if k.starts_with("model.") => {
                    model.insert(k["model.".len()..].to_string(), num(value)? as usize);
                }
                _ => return Err(bad(format!("unknown header key {key:?}"))),
            }
        }
        let get = |k: &str| model.get(k).copied().ok_or_else(|| bad(format!("missing model.{k}")));
        let config = ModelConfig {
            embed_dim: get("embed_dim")?,
            hidden: get("hidden")?,
            latent_dim: get("latent_dim")?,
            denoiser_hidden: get("denoiser_hidden")?,
            blocks: get("blocks")?,
            time_dim: get("time_dim")?,
            neighbors: get("neighbors")?,
        };
        let seed = seed.ok_or_else(|| bad("missing seed"))?;
        let mut state = ModelState::new(config, seed).map_err(|e| bad(e.to_string()))?;
        if tensors.len() != state.params.tensors().len() {
            return Err(bad(format!(
                "header lists {} tensors, model has {}",
                tensors.len(),
                state.params.tensors().len()
            )));
        }
        for ((name, shape), t) in tensors.iter().zip(state.params.tensors()) {
            if *name != t.name || *shape != t.shape {
                return Err(bad(format!(
                    "tensor {name} {shape:?} does not match model tensor {} {:?}",
                    t.name, t.shape
                )));
            }
        }
        let body = &bytes[pos..];
        let scalars = state.params.num_scalars();
        if body.len() != 3 * scalars * 4 {
            return Err(bad(format!(
                "expected {} data bytes, found {}",
                3 * scalars * 4,
                body.len()
            )));
        }
        let mut words = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut fill = |dst: &mut [f32]| dst.iter_mut().for_each(|d| *d = words.next().unwrap_or(0.0));
        for t in state.params.tensors_mut() {
            fill(&mut t.data);
        }
        for m in state.optimizer.m.iter_mut() {
            fill(m);
        }
        for v in state.optimizer.v.iter_mut() {
            fill(v);
        }
        state.optimizer.step = step.ok_or_else(|| bad("missing optimizer.step"))?;
        if !state.params.all_finite() {
            return Err(bad("checkpoint contains non-finite parameters"));
        }
        Ok(Checkpoint { state, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{AdamWConfig, Grads};

    fn config() -> ModelConfig {
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

    #[test]
    fn round_trip_is_bit_exact() {
        let mut state = ModelState::new(config(), 77).unwrap();
        let grads = Grads {
            data: state.params.tensors().iter().map(|t| vec![0.1; t.len()]).collect(),
        };
        let mut opt = state.optimizer.clone();
        opt.step(&mut state.params, &grads, &AdamWConfig::new(1e-3, 0.01), |_| true);
        state.optimizer = opt;
        let mut ck = Checkpoint::new(state);
        ck.meta.insert("schedule.steps".into(), "100".into());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let ck = Checkpoint::new(ModelState::new(config(), 1).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
        assert!(matches!(Checkpoint::load(&dir.path().join("nope")), Err(Error::Io { .. })));
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let ck = Checkpoint::new(ModelState::new(config(), 1).unwrap());
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(Checkpoint::from_bytes(b"hello\nend\n").is_err());
        let text = String::from_utf8_lossy(&bytes).replace("model.latent_dim 4", "model.latent_dim 5");
        assert!(Checkpoint::from_bytes(text.as_bytes()).is_err());
        let mut nan = bytes.clone();
        let body = nan.len() - 3 * ck.state.params.num_scalars() * 4;
        nan[body..body + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(Checkpoint::from_bytes(&nan).is_err());
    }

    #[test]
    fn bad_meta_rejected() {
        let mut ck = Checkpoint::new(ModelState::new(config(), 1).unwrap());
        ck.meta.insert("two words".into(), "x".into());
        assert!(ck.to_bytes().is_err());
    }
}
