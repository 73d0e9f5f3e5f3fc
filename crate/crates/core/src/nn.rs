//! Minimal neural-network plumbing with hand-written reverse passes.
//!
//! Parameters are stored as 32-bit floats. Forward and backward arithmetic is
//! carried out in 64-bit and gradients are accumulated in 64-bit.

use rand::Rng;

use crate::tensor::Mat;

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor {
            name: name.into(),
            shape,
            data,
        });
        self.tensors.len() - 1
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn data(&self, id: ParamId) -> &[f32] {
        &self.tensors[id].data
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Maps a flat scalar index onto `(tensor, offset)`.
    pub fn locate(&self, mut flat: usize) -> (ParamId, usize) {
        for (id, t) in self.tensors.iter().enumerate() {
            if flat < t.len() {
                return (id, flat);
            }
            flat -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            data: self.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// Euclidean distance between two stores with identical layout.
    pub fn l2_distance(&self, other: &ParamStore) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data))
            .map(|(x, y)| {
                let d = *x as f64 - *y as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn flat(&self, id: ParamId, offset: usize) -> f64 {
        self.data[id][offset]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|x| x.is_finite())
    }

    /// Zeroes every tensor for which `keep` returns false.
    pub fn retain(&mut self, store: &ParamStore, keep: impl Fn(&str) -> bool) {
        for (g, t) in self.data.iter_mut().zip(store.tensors()) {
            if !keep(&t.name) {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
}

/// Uniform ±√(6/(fan_in + fan_out)).
pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f32> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n)
        .map(|_| rng.random_range(-bound..bound) as f32)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = xavier_uniform(rng, fan_in, fan_out, fan_in * fan_out);
        let weight = store.add(format!("{name}.weight"), vec![fan_out, fan_in], w);
        let bias = store.add(format!("{name}.bias"), vec![fan_out], vec![0.0; fan_out]);
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// `y = x Wᵀ + b`, applied row-wise.
    pub fn forward(&self, store: &ParamStore, x: &Mat) -> Mat {
        debug_assert_eq!(x.cols(), self.fan_in);
        let w = store.data(self.weight);
        let b = store.data(self.bias);
        let mut y = Mat::zeros(x.rows(), self.fan_out);
        for r in 0..x.rows() {
            let xr = x.row(r);
            let yr = y.row_mut(r);
            for (o, out) in yr.iter_mut().enumerate() {
                let wr = &w[o * self.fan_in..(o + 1) * self.fan_in];
                let mut acc = b[o] as f64;
                for (wi, xi) in wr.iter().zip(xr) {
                    acc += *wi as f64 * xi;
                }
                *out = acc;
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, store: &ParamStore, x: &Mat, dy: &Mat, grads: &mut Grads) -> Mat {
        let w = store.data(self.weight);
        let mut dx = Mat::zeros(x.rows(), self.fan_in);
        {
            let (gw, gb) = two_mut(&mut grads.data, self.weight, self.bias);
            for r in 0..x.rows() {
                let xr = x.row(r);
                let dyr = dy.row(r);
                for (o, &g) in dyr.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    gb[o] += g;
                    let gwr = &mut gw[o * self.fan_in..(o + 1) * self.fan_in];
                    for (gwi, xi) in gwr.iter_mut().zip(xr) {
                        *gwi += g * xi;
                    }
                }
            }
        }
        for r in 0..x.rows() {
            let dyr = dy.row(r);
            let dxr = dx.row_mut(r);
            for (o, &g) in dyr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let wr = &w[o * self.fan_in..(o + 1) * self.fan_in];
                for (d, wi) in dxr.iter_mut().zip(wr) {
                    *d += g * *wi as f64;
                }
            }
        }
        dx
    }
}

fn two_mut(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut Vec<f64>, &mut Vec<f64>) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `dL/da` for `h = silu(a)` given `dL/dh`.
pub fn silu_backward(a: &Mat, dh: &Mat) -> Mat {
    let mut out = dh.clone();
    for (o, x) in out.data_mut().iter_mut().zip(a.data()) {
        *o *= silu_grad(*x);
    }
    out
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Mat) -> Mat {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    p
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Mat) -> Mat {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    p
}

/// Adam with decoupled weight decay. Moments are kept in 32-bit alongside the
/// parameters; the update itself is computed in 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        AdamW {
            m: store.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            v: store.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().flatten().for_each(|x| *x = 0.0);
        self.v.iter_mut().flatten().for_each(|x| *x = 0.0);
        self.step = 0;
    }

    /// One update over the tensors selected by `trainable`; others are left
    /// untouched, including their weight decay.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Grads,
        cfg: &AdamWConfig,
        trainable: impl Fn(&str) -> bool,
    ) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (id, t) in store.tensors_mut().iter_mut().enumerate() {
            if !trainable(&t.name) {
                continue;
            }
            let g = &grads.data[id];
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            for i in 0..t.data.len() {
                let p = t.data[i] as f64;
                let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g[i];
                let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g[i] * g[i];
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
                let decayed = p * (1.0 - cfg.lr * cfg.weight_decay);
                t.data[i] = (decayed - cfg.lr * update) as f32;
            }
        }
    }
}

/// Rescales `grads` in place so that their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut r = rng::seeded(3);
        let mut store = ParamStore::new();
        let lin = Linear::register(&mut store, "l", 3, 2, &mut r);
        let x = Mat::from_vec(2, 3, vec![0.1, -0.3, 0.8, 1.2, 0.5, -0.9]).unwrap();
        let dy = Mat::from_vec(2, 2, vec![1.0, -2.0, 0.5, 0.25]).unwrap();
        let loss = |s: &ParamStore, x: &Mat| -> f64 {
            let y = lin.forward(s, x);
            y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
        };
        let mut g = store.zero_grads();
        let dx = lin.backward(&store, &x, &dy, &mut g);
        let h = 1e-6;
        for i in 0..6 {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let num = (loss(&store, &xp) - loss(&store, &xm)) / (2.0 * h);
            assert!((num - dx.data()[i]).abs() < 1e-8);
        }
        // Bias gradient is the column sum of dy.
        assert!((g.data[lin.bias][0] - 1.5).abs() < 1e-12);
        assert!((g.data[lin.bias][1] + 1.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_normalised() {
        let l = Mat::from_vec(2, 4, vec![10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let p = softmax_rows(&l);
        assert!(p.row(1).iter().all(|v| (v - 0.25).abs() < 1e-15));
        let s: f64 = p.row(0).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        let lp = log_softmax_rows(&l);
        for (a, b) in lp.data().iter().zip(p.data()) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn silu_grad_matches_difference() {
        for &x in &[-4.0, -0.3, 0.0, 0.7, 5.0] {
            let h = 1e-6;
            let num = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((num - silu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn clip_grad_norm_caps_norm() {
        let mut g = Grads {
            data: vec![vec![3.0, 4.0]],
        };
        let before = clip_grad_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", vec![2], vec![1.0, -1.0]);
        let mut opt = AdamW::new(&store);
        let mut g = store.zero_grads();
        g.data[id] = vec![0.5, -2.0];
        let cfg = AdamWConfig::new(0.1, 0.0);
        opt.step(&mut store, &g, &cfg, |_| true);
        let d = store.data(id);
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adamw_weight_decay_alone() {
        let mut store = ParamStore::new();
        let id = store.add("p", vec![1], vec![2.0]);
        let mut opt = AdamW::new(&store);
        let g = store.zero_grads();
        opt.step(&mut store, &g, &AdamWConfig::new(0.1, 0.5), |_| true);
        assert!((store.data(id)[0] - 1.9).abs() < 1e-6);
    }
}
