//! Encoder, decoder and conditional denoiser, their parameters and the
//! latent-diffusion training loss.
//!
//! All three networks act row-wise on `L × width` matrices, one row per
//! residue. The denoiser receives the noisy latent, a sinusoidal embedding of
//! the step index and the per-residue conditioning features; each is projected
//! to the hidden width and summed before a stack of residual blocks.

use serde::{Deserialize, Serialize};

use crate::data::feature_width;
use crate::error::{invalid, Result};
use crate::nn::{
    log_softmax_rows, silu, silu_backward, softmax_rows, xavier_uniform, AdamW, Grads, Linear,
    ParamId, ParamStore,
};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use crate::sequence::Base;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of the learned nucleotide embedding.
    pub embed_dim: usize,
    /// Hidden width of the encoder and decoder.
    pub hidden: usize,
    pub latent_dim: usize,
    pub denoiser_hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
    /// Nearest neighbours per residue in the conditioning features.
    pub neighbors: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            hidden: 128,
            latent_dim: 32,
            denoiser_hidden: 128,
            blocks: 4,
            time_dim: 64,
            neighbors: 8,
        }
    }
}

impl ModelConfig {
    pub fn cond_dim(&self) -> usize {
        feature_width(self.neighbors)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 8 {
            return Err(invalid!("embed_dim must be at least 8, got {}", self.embed_dim));
        }
        for (name, v) in [
            ("hidden", self.hidden),
            ("latent_dim", self.latent_dim),
            ("denoiser_hidden", self.denoiser_hidden),
            ("neighbors", self.neighbors),
        ] {
            if v == 0 {
                return Err(invalid!("{name} must be positive"));
            }
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(invalid!("time_dim must be a positive even number, got {}", self.time_dim));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Mlp3 {
    layers: [Linear; 3],
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    inner: Linear,
    outer: Linear,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    embed: ParamId,
    encoder: Mlp3,
    decoder: Mlp3,
    input_proj: Linear,
    time_proj: Linear,
    cond_proj: Linear,
    blocks: Vec<Block>,
    output_proj: Linear,
}

/// Parameter group a tensor belongs to, derived from its name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Embedding,
    Encoder,
    Decoder,
    Denoiser,
}

impl Group {
    pub fn of(name: &str) -> Group {
        match name.split('.').next() {
            Some("embed") => Group::Embedding,
            Some("encoder") => Group::Encoder,
            Some("decoder") => Group::Decoder,
            _ => Group::Denoiser,
        }
    }
}

/// All trainable tensors plus optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub optimizer: AdamW,
    /// Seed the parameters were initialised from.
    pub seed: u64,
    layout: Layout,
}

fn register_mlp(store: &mut ParamStore, name: &str, dims: [usize; 4], rng: &mut Rng) -> Mlp3 {
    Mlp3 {
        layers: [
            Linear::register(store, &format!("{name}.0"), dims[0], dims[1], rng),
            Linear::register(store, &format!("{name}.1"), dims[1], dims[2], rng),
            Linear::register(store, &format!("{name}.2"), dims[2], dims[3], rng),
        ],
    }
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::substream(seed, crate::rng::Stream::Init);
        let mut store = ParamStore::new();
        let e = config.embed_dim;
        let table = xavier_uniform(&mut rng, 4, e, 4 * e);
        let embed = store.add("embed.table", vec![4, e], table);
        let encoder = register_mlp(
            &mut store,
            "encoder",
            [e, config.hidden, config.hidden, config.latent_dim],
            &mut rng,
        );
        let decoder = register_mlp(
            &mut store,
            "decoder",
            [config.latent_dim, config.hidden, config.hidden, 4],
            &mut rng,
        );
        let hd = config.denoiser_hidden;
        let input_proj = Linear::register(&mut store, "denoiser.input", config.latent_dim, hd, &mut rng);
        let time_proj = Linear::register(&mut store, "denoiser.time", config.time_dim, hd, &mut rng);
        let cond_proj = Linear::register(&mut store, "denoiser.cond", config.cond_dim(), hd, &mut rng);
        let blocks = (0..config.blocks)
            .map(|b| Block {
                inner: Linear::register(&mut store, &format!("denoiser.block{b}.0"), hd, hd, &mut rng),
                outer: Linear::register(&mut store, &format!("denoiser.block{b}.1"), hd, hd, &mut rng),
            })
            .collect();
        let output_proj = Linear::register(&mut store, "denoiser.output", hd, config.latent_dim, &mut rng);
        let optimizer = AdamW::new(&store);
        Ok(ModelState {
            config,
            params: store,
            optimizer,
            seed,
            layout: Layout {
                embed,
                encoder,
                decoder,
                input_proj,
                time_proj,
                cond_proj,
                blocks,
                output_proj,
            },
        })
    }

    /// Sets every parameter to zero.
    pub fn zero_parameters(&mut self) {
        for t in self.params.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn group_params(&self, group: Group) -> impl Iterator<Item = &crate::nn::Tensor> {
        self.params
            .tensors()
            .iter()
            .filter(move |t| Group::of(&t.name) == group)
    }

    // ---- embedding ----

    pub fn embed(&self, seq: &[Base]) -> Mat {
        let e = self.config.embed_dim;
        let table = self.params.data(self.layout.embed);
        let mut h = Mat::zeros(seq.len(), e);
        for (i, b) in seq.iter().enumerate() {
            let src = &table[b.index() * e..(b.index() + 1) * e];
            for (d, s) in h.row_mut(i).iter_mut().zip(src) {
                *d = *s as f64;
            }
        }
        h
    }

    fn embed_backward(&self, seq: &[Base], dh: &Mat, grads: &mut Grads) {
        let e = self.config.embed_dim;
        let g = &mut grads.data[self.layout.embed];
        for (i, b) in seq.iter().enumerate() {
            for (gd, d) in g[b.index() * e..(b.index() + 1) * e].iter_mut().zip(dh.row(i)) {
                *gd += d;
            }
        }
    }

    // ---- encoder / decoder ----

    fn mlp_forward(&self, mlp: &Mlp3, x: &Mat) -> MlpCache {
        let a1 = mlp.layers[0].forward(&self.params, x);
        let h1 = a1.map(silu);
        let a2 = mlp.layers[1].forward(&self.params, &h1);
        let h2 = a2.map(silu);
        let out = mlp.layers[2].forward(&self.params, &h2);
        MlpCache {
            x: x.clone(),
            a1,
            h1,
            a2,
            h2,
            out,
        }
    }

    fn mlp_backward(&self, mlp: &Mlp3, cache: &MlpCache, dout: &Mat, grads: &mut Grads) -> Mat {
        let dh2 = mlp.layers[2].backward(&self.params, &cache.h2, dout, grads);
        let da2 = silu_backward(&cache.a2, &dh2);
        let dh1 = mlp.layers[1].backward(&self.params, &cache.h1, &da2, grads);
        let da1 = silu_backward(&cache.a1, &dh1);
        mlp.layers[0].backward(&self.params, &cache.x, &da1, grads)
    }

    /// Row-wise encoder from embedding rows to latent rows.
    pub fn encode(&self, h: &Mat) -> Result<Mat> {
        if !h.is_finite() {
            return Err(invalid!("encoder input contains non-finite values"));
        }
        if h.cols() != self.config.embed_dim {
            return Err(invalid!("encoder expects width {}, got {}", self.config.embed_dim, h.cols()));
        }
        Ok(self.mlp_forward(&self.layout.encoder, h).out)
    }

    /// Latent of a nucleotide sequence.
    pub fn encode_seq(&self, seq: &[Base]) -> Mat {
        self.mlp_forward(&self.layout.encoder, &self.embed(seq)).out
    }

    pub fn decode_logits(&self, z: &Mat) -> Result<Mat> {
        if !z.is_finite() {
            return Err(invalid!("decoder input contains non-finite values"));
        }
        if z.cols() != self.config.latent_dim {
            return Err(invalid!("decoder expects width {}, got {}", self.config.latent_dim, z.cols()));
        }
        Ok(self.mlp_forward(&self.layout.decoder, z).out)
    }

    /// Per-position distributions over A, U, C, G.
    pub fn decode(&self, z: &Mat) -> Result<Mat> {
        self.decode_logits(z).map(|l| softmax_rows(&l))
    }

    // ---- denoiser ----

    fn denoise_forward(&self, z_t: &Mat, t: usize, c: &Mat) -> Result<DenoiseCache> {
        let cfg = &self.config;
        if z_t.cols() != cfg.latent_dim {
            return Err(invalid!("denoiser expects latent width {}, got {}", cfg.latent_dim, z_t.cols()));
        }
        if c.cols() != cfg.cond_dim() {
            return Err(invalid!("denoiser expects {} conditioning features, got {}", cfg.cond_dim(), c.cols()));
        }
        if c.rows() != z_t.rows() {
            return Err(invalid!(
                "conditioning has {} rows but latent has {}",
                c.rows(),
                z_t.rows()
            ));
        }
        if t == 0 {
            return Err(invalid!("denoiser step must be at least 1"));
        }
        let l = &self.layout;
        let temb = time_embedding(t, cfg.time_dim);
        let tproj = l.time_proj.forward(&self.params, &temb);
        let mut h = l.input_proj.forward(&self.params, z_t);
        h.add_assign(&l.cond_proj.forward(&self.params, c));
        for r in 0..h.rows() {
            for (v, tv) in h.row_mut(r).iter_mut().zip(tproj.row(0)) {
                *v += tv;
            }
        }
        let mut hs = vec![h];
        let mut pre = Vec::with_capacity(l.blocks.len());
        let mut acts = Vec::with_capacity(l.blocks.len());
        for block in &l.blocks {
            let last = hs.last().expect("non-empty");
            let a = block.inner.forward(&self.params, last);
            let r = a.map(silu);
            let mut next = block.outer.forward(&self.params, &r);
            next.add_assign(last);
            pre.push(a);
            acts.push(r);
            hs.push(next);
        }
        let top = hs.last().expect("non-empty");
        let s = top.map(silu);
        let out = l.output_proj.forward(&self.params, &s);
        Ok(DenoiseCache {
            z_t: z_t.clone(),
            c: c.clone(),
            temb,
            hs,
            pre,
            acts,
            s,
            out,
        })
    }

    /// Accumulates denoiser gradients; returns `dL/dz_t`.
    fn denoise_backward(&self, cache: &DenoiseCache, dout: &Mat, grads: &mut Grads) -> Mat {
        let l = &self.layout;
        let top = cache.hs.last().expect("non-empty");
        let ds = l.output_proj.backward(&self.params, &cache.s, dout, grads);
        let mut dh = silu_backward(top, &ds);
        for (b, block) in l.blocks.iter().enumerate().rev() {
            let dr = block.outer.backward(&self.params, &cache.acts[b], &dh, grads);
            let da = silu_backward(&cache.pre[b], &dr);
            let dprev = block.inner.backward(&self.params, &cache.hs[b], &da, grads);
            dh.add_assign(&dprev);
        }
        let mut dt = Mat::zeros(1, dh.cols());
        for r in 0..dh.rows() {
            for (a, v) in dt.row_mut(0).iter_mut().zip(dh.row(r)) {
                *a += v;
            }
        }
        l.time_proj.backward(&self.params, &cache.temb, &dt, grads);
        l.cond_proj.backward(&self.params, &cache.c, &dh, grads);
        l.input_proj.backward(&self.params, &cache.z_t, &dh, grads)
    }

    /// Predicted clean latent `ẑ0 = π(z_t, t, c)`.
    pub fn denoise_predict(&self, z_t: &Mat, t: usize, c: &Mat) -> Result<Mat> {
        Ok(self.denoise_forward(z_t, t, c)?.out)
    }

    /// Gradients of `Σ upstream ⊙ ẑ0` with respect to every parameter, used
    /// for Jacobian-vector checks and the policy loss.
    pub fn denoise_vjp(&self, z_t: &Mat, t: usize, c: &Mat, upstream: &Mat) -> Result<(Mat, Grads)> {
        let cache = self.denoise_forward(z_t, t, c)?;
        upstream.ensure_same_shape(&cache.out, "denoise_vjp")?;
        let mut grads = self.params.zero_grads();
        self.denoise_backward(&cache, upstream, &mut grads);
        Ok((cache.out, grads))
    }

    /// Autoencoder reconstruction cross-entropy (summed over positions) and
    /// its gradient.
    pub fn reconstruction_loss(&self, seq: &[Base]) -> (f64, Grads) {
        let h = self.embed(seq);
        let enc = self.mlp_forward(&self.layout.encoder, &h);
        let dec = self.mlp_forward(&self.layout.decoder, &enc.out);
        let logp = log_softmax_rows(&dec.out);
        let mut loss = 0.0;
        let mut dlogits = softmax_rows(&dec.out);
        for (i, b) in seq.iter().enumerate() {
            loss -= logp.get(i, b.index());
            let v = dlogits.get(i, b.index());
            dlogits.set(i, b.index(), v - 1.0);
        }
        let mut grads = self.params.zero_grads();
        let dz = self.mlp_backward(&self.layout.decoder, &dec, &dlogits, &mut grads);
        let dh = self.mlp_backward(&self.layout.encoder, &enc, &dz, &mut grads);
        self.embed_backward(seq, &dh, &mut grads);
        (loss, grads)
    }

    /// Latent-diffusion loss of one sample and its gradient through the whole
    /// graph: embedding, encoder, forward noising, denoiser and decoder.
    pub fn ldm_loss_and_grads(&self, sample: &LdmSample, sched: &NoiseSchedule) -> Result<(f64, Grads)> {
        let h = self.embed(&sample.target);
        let enc = self.mlp_forward(&self.layout.encoder, &h);
        let mut grads = self.params.zero_grads();
        let (loss, dz0) = self.ldm_from_latent(&enc.out, sample, sched, &mut grads)?;
        if loss.is_finite() {
            let dh = self.mlp_backward(&self.layout.encoder, &enc, &dz0, &mut grads);
            self.embed_backward(&sample.target, &dh, &mut grads);
        }
        Ok((loss, grads))
    }

    /// Same loss with the clean latent given, so no gradient reaches the
    /// embedding or encoder.
    pub fn ldm_loss_and_grads_from_latent(
        &self,
        z0: &Mat,
        sample: &LdmSample,
        sched: &NoiseSchedule,
    ) -> Result<(f64, Grads)> {
        let mut grads = self.params.zero_grads();
        let (loss, _) = self.ldm_from_latent(z0, sample, sched, &mut grads)?;
        Ok((loss, grads))
    }

    /// Returns the loss and `dL/dz0`; parameter gradients land in `grads`.
    /// On a non-finite loss no gradients are accumulated.
    fn ldm_from_latent(
        &self,
        z0: &Mat,
        sample: &LdmSample,
        sched: &NoiseSchedule,
        grads: &mut Grads,
    ) -> Result<(f64, Mat)> {
        if sample.target.len() != z0.rows() {
            return Err(invalid!(
                "target length {} differs from latent rows {}",
                sample.target.len(),
                z0.rows()
            ));
        }
        let z_t = sched.forward_noise(z0, sample.t, &sample.eps)?;
        let den = self.denoise_forward(&z_t, sample.t, &sample.cond)?;
        let z0_hat = &den.out;
        let dec = self.mlp_forward(&self.layout.decoder, z0_hat);
        let logp = log_softmax_rows(&dec.out);

        let mut loss = z0.sum_sq_diff(z0_hat);
        let mut dlogits = softmax_rows(&dec.out);
        for (i, b) in sample.target.iter().enumerate() {
            loss -= logp.get(i, b.index());
            let v = dlogits.get(i, b.index());
            dlogits.set(i, b.index(), v - 1.0);
        }
        if !loss.is_finite() {
            return Ok((loss, Mat::zeros(z0.rows(), z0.cols())));
        }

        let mut dz0_hat = self.mlp_backward(&self.layout.decoder, &dec, &dlogits, grads);
        // d/dẑ0 of ‖z0 − ẑ0‖² is −2(z0 − ẑ0); d/dz0 is the negation.
        let diff = z0.lin_comb(1.0, z0_hat, -1.0);
        dz0_hat.add_assign(&diff.scale(-2.0));
        let dz_t = self.denoise_backward(&den, &dz0_hat, grads);
        let mut dz0 = diff.scale(2.0);
        dz0.add_assign(&dz_t.scale(sched.bar_alpha(sample.t).sqrt()));
        Ok((loss, dz0))
    }
}

/// Sum-of-squares latent error plus decoder negative log-likelihood of
/// `target` under `Dec(ẑ0)`.
pub fn ldm_loss(z0: &Mat, z0_hat: &Mat, target: &[Base], state: &ModelState) -> Result<f64> {
    z0.ensure_same_shape(z0_hat, "ldm_loss")?;
    if target.len() != z0.rows() {
        return Err(invalid!(
            "target length {} differs from latent rows {}",
            target.len(),
            z0.rows()
        ));
    }
    let logp = log_softmax_rows(&state.decode_logits(z0_hat)?);
    let nll: f64 = target
        .iter()
        .enumerate()
        .map(|(i, b)| -logp.get(i, b.index()))
        .sum();
    Ok(z0.sum_sq_diff(z0_hat) + nll)
}

/// One draw of the latent-diffusion training objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LdmSample {
    pub target: Vec<Base>,
    pub t: usize,
    pub eps: Mat,
    pub cond: Mat,
}

struct MlpCache {
    x: Mat,
    a1: Mat,
    h1: Mat,
    a2: Mat,
    h2: Mat,
    out: Mat,
}

struct DenoiseCache {
    z_t: Mat,
    c: Mat,
    temb: Mat,
    hs: Vec<Mat>,
    pre: Vec<Mat>,
    acts: Vec<Mat>,
    s: Mat,
    out: Mat,
}

/// `[sin(t·f_k) …, cos(t·f_k) …]` with `f_k = 10000^(−k/(W/2))`.
pub fn time_embedding(t: usize, width: usize) -> Mat {
    let half = width / 2;
    let mut m = Mat::zeros(1, width);
    for k in 0..half {
        let f = (-(10000f64).ln() * k as f64 / half as f64).exp();
        m.set(0, k, (t as f64 * f).sin());
        m.set(0, half + k, (t as f64 * f).cos());
    }
    m
}

/// Predicts the clean latent from a noisy one.
pub trait Denoiser {
    fn predict(&self, z_t: &Mat, t: usize, c: &Mat) -> Result<Mat>;
}

impl Denoiser for ModelState {
    fn predict(&self, z_t: &Mat, t: usize, c: &Mat) -> Result<Mat> {
        self.denoise_predict(z_t, t, c)
    }
}
