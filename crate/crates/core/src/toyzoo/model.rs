//! Two-hidden-layer tanh MLP with optional low-rank adapters, trained by
//! explicit backpropagation and momentum SGD.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::suite::Dataset;
use crate::checkpoint::{Checkpoint, FROZEN_KEY};
use crate::error::{Error, Result};
use crate::linalg::Tensor;

pub const LAYERS: usize = 3;

pub fn weight_name(layer: usize) -> String {
    format!("layer{layer}.w")
}

pub fn bias_name(layer: usize) -> String {
    format!("layer{layer}.b")
}

/// Low-rank additive update `B·A` on one layer: `A` is `rank × d_in`,
/// `B` is `d_out × rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub a: Tensor,
    pub b: Tensor,
}

impl Adapter {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// `A` uniform in ±1/√d_in, `B` zero (so the adapter starts as a no-op)
    /// unless `b_scale` is positive.
    pub fn init(rank: usize, d_out: usize, d_in: usize, b_scale: f32, rng: &mut ChaCha8Rng) -> Result<Adapter> {
        if rank == 0 || rank > d_out.min(d_in) {
            return Err(Error::Argument(format!(
                "adapter rank {rank} outside 1..={}",
                d_out.min(d_in)
            )));
        }
        let bound = 1.0 / (d_in as f32).sqrt();
        let a = (0..rank * d_in).map(|_| rng.random_range(-bound..bound)).collect();
        let b = (0..d_out * rank)
            .map(|_| {
                if b_scale > 0.0 {
                    rng.random_range(-b_scale..b_scale)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Adapter {
            a: Tensor::matrix(rank, d_in, a)?,
            b: Tensor::matrix(d_out, rank, b)?,
        })
    }

    /// The dense update `B·A`.
    pub fn product(&self) -> Tensor {
        self.b.matmul(&self.a).expect("adapter factors are conformable")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    /// `[input, hidden, hidden, classes]`
    pub dims: [usize; 4],
    pub params: Checkpoint,
    pub adapters: BTreeMap<usize, Adapter>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub rank: usize,
    pub layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adapter: Option<AdapterConfig>,
}

fn default_batch() -> usize {
    64
}

fn default_momentum() -> f64 {
    0.9
}

impl TrainConfig {
    pub fn new(epochs: usize, lr: f64, seed: u64) -> Self {
        Self {
            epochs,
            lr,
            batch_size: default_batch(),
            momentum: default_momentum(),
            seed,
            adapter: None,
        }
    }
}

impl ToyModel {
    /// Seeded uniform ±1/√fan_in initialization.
    pub fn init(input: usize, hidden: usize, classes: usize, seed: u64) -> ToyModel {
        let dims = [input, hidden, hidden, classes];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for l in 0..LAYERS {
            let (d_in, d_out) = (dims[l], dims[l + 1]);
            let bound = 1.0 / (d_in as f32).sqrt();
            let w = (0..d_out * d_in).map(|_| rng.random_range(-bound..bound)).collect();
            let b = (0..d_out).map(|_| rng.random_range(-bound..bound)).collect();
            params.insert(weight_name(l), Tensor::matrix(d_out, d_in, w).expect("sized"));
            params.insert(bias_name(l), Tensor::vector(b));
        }
        ToyModel {
            dims,
            params: Checkpoint::new(params).expect("finite init"),
            adapters: BTreeMap::new(),
        }
    }

    /// Wrap a checkpoint, inferring the layer sizes from its weights.
    pub fn from_checkpoint(params: Checkpoint) -> Result<ToyModel> {
        let mut dims = [0usize; 4];
        for l in 0..LAYERS {
            let (d_out, d_in) = params.tensor(&weight_name(l))?.dims2()?;
            if l == 0 {
                dims[0] = d_in;
            } else if dims[l] != d_in {
                return Err(Error::Shape(format!("layer{l} input {d_in} != previous output {}", dims[l])));
            }
            dims[l + 1] = d_out;
            if params.tensor(&bias_name(l))?.shape() != [d_out] {
                return Err(Error::Shape(format!("layer{l} bias shape")));
            }
        }
        if params.len() != 2 * LAYERS {
            return Err(Error::Shape("unexpected tensors in toy checkpoint".into()));
        }
        Ok(ToyModel {
            dims,
            params,
            adapters: BTreeMap::new(),
        })
    }

    pub fn hidden(&self) -> usize {
        self.dims[2]
    }

    pub fn classes(&self) -> usize {
        self.dims[3]
    }

    /// Attach fresh adapters to the given layers.
    pub fn with_adapters(mut self, rank: usize, layers: &[usize], b_scale: f32, seed: u64) -> Result<ToyModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &l in layers {
            if l >= LAYERS {
                return Err(Error::Argument(format!("no layer {l}")));
            }
            let ad = Adapter::init(rank, self.dims[l + 1], self.dims[l], b_scale, &mut rng)?;
            self.adapters.insert(l, ad);
        }
        Ok(self)
    }

    /// Dense checkpoint with every adapter folded in: `W + B·A`.
    pub fn merge_adapter(&self) -> Result<Checkpoint> {
        if self.adapters.is_empty() {
            return Err(Error::State("model has no adapter to fold".into()));
        }
        let mut out = self.params.clone();
        for (&l, ad) in &self.adapters {
            let name = weight_name(l);
            let folded = out.tensor(&name)?.add(&ad.product())?;
            out.set(&name, folded)?;
        }
        Ok(out)
    }

    /// The adapters as a dense delta over the full parameter set
    /// (zero where no adapter is attached).
    pub fn adapter_delta(&self) -> crate::checkpoint::Delta {
        let params = self
            .params
            .iter()
            .map(|(name, t)| {
                let d = self
                    .adapters
                    .iter()
                    .find(|(&l, _)| weight_name(l) == *name)
                    .map(|(_, ad)| ad.product())
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.clone(), d)
            })
            .collect();
        crate::checkpoint::Delta::new(params)
    }

    fn effective(&self) -> Result<Mlp> {
        let mut mlp = Mlp::from_checkpoint(&self.params, self.dims)?;
        for (&l, ad) in &self.adapters {
            let ba = ad.product();
            mlp.w[l].iter_mut().zip(ba.data()).for_each(|(w, d)| *w += d);
        }
        Ok(mlp)
    }

    pub fn logits(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.check_input(x)?;
        Ok(self.effective()?.forward_one(x).2)
    }

    /// Activations of the last hidden layer.
    pub fn penultimate(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.check_input(x)?;
        Ok(self.effective()?.forward_one(x).1)
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.dims[0] {
            return Err(Error::Argument(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.dims[0]
            )));
        }
        Ok(())
    }

    pub fn predict(&self, data: &Dataset) -> Result<Vec<usize>> {
        if data.dim != self.dims[0] {
            return Err(Error::Argument(format!(
                "dataset has {} features, model expects {}",
                data.dim, self.dims[0]
            )));
        }
        Ok(self.effective()?.predict(data))
    }

    /// Classification accuracy on `data`.
    pub fn score(&self, data: &Dataset) -> Result<f64> {
        score_predictions(&self.predict(data)?, data)
    }

    /// Penultimate activations for every row of `data`, row-major.
    pub fn embed_all(&self, data: &Dataset) -> Result<Vec<f32>> {
        let mlp = self.effective()?;
        let mut out = Vec::with_capacity(data.len() * self.hidden());
        for i in 0..data.len() {
            out.extend(mlp.forward_one(data.row(i)).1);
        }
        Ok(out)
    }

    /// Fine-tune on `data`. With an adapter config only the adapter factors
    /// move; base weights stay bit-identical.
    pub fn train(&self, data: &Dataset, cfg: &TrainConfig) -> Result<ToyModel> {
        if data.dim != self.dims[0] {
            return Err(Error::Argument("dataset dimension does not match model".into()));
        }
        if data.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        if let Some(y) = data.y.iter().find(|&&y| y >= self.classes()) {
            return Err(Error::Data(format!("label {y} out of range")));
        }
        let mut model = self.clone();
        if let Some(ac) = &cfg.adapter {
            model = model.with_adapters(ac.rank, &ac.layers, 0.0, cfg.seed ^ 0xada9)?;
        }
        if cfg.epochs == 0 {
            return Ok(model);
        }
        let adapter_only = !model.adapters.is_empty();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut base = Mlp::from_checkpoint(&model.params, model.dims)?;
        let mut vel = base.zeros_like();
        let mut adapters: Vec<(usize, Vec<f32>, Vec<f32>)> = model
            .adapters
            .iter()
            .map(|(&l, ad)| (l, ad.a.data().to_vec(), ad.b.data().to_vec()))
            .collect();
        let mut adapter_vel: Vec<(Vec<f32>, Vec<f32>)> = adapters
            .iter()
            .map(|(_, a, b)| (vec![0.0; a.len()], vec![0.0; b.len()]))
            .collect();
        let rank_of = |a: &Vec<f32>, l: usize| a.len() / model.dims[l];

        let mut order: Vec<usize> = (0..data.len()).collect();
        let lr = cfg.lr as f32;
        let mu = cfg.momentum as f32;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size.max(1)) {
                let mut eff = base.clone();
                for (l, a, b) in &adapters {
                    let r = rank_of(a, *l);
                    add_product(&mut eff.w[*l], b, a, model.dims[*l + 1], r, model.dims[*l]);
                }
                let (loss, grads) = eff.backprop(data, batch);
                if !loss.is_finite() {
                    return Err(Error::Training(format!("loss became {loss} in epoch {epoch}")));
                }
                if adapter_only {
                    for ((l, a, b), (va, vb)) in adapters.iter_mut().zip(adapter_vel.iter_mut()) {
                        let (d_out, d_in) = (model.dims[*l + 1], model.dims[*l]);
                        let r = a.len() / d_in;
                        let gw = &grads.w[*l];
                        // dA = Bᵀ·G (r × d_in), dB = G·Aᵀ (d_out × r)
                        let mut ga = vec![0.0f32; r * d_in];
                        let mut gb = vec![0.0f32; d_out * r];
                        for i in 0..d_out {
                            for k in 0..r {
                                let bik = b[i * r + k];
                                let mut acc = 0.0f32;
                                for j in 0..d_in {
                                    let g = gw[i * d_in + j];
                                    ga[k * d_in + j] += bik * g;
                                    acc += g * a[k * d_in + j];
                                }
                                gb[i * r + k] = acc;
                            }
                        }
                        momentum_step(a, va, &ga, lr, mu);
                        momentum_step(b, vb, &gb, lr, mu);
                    }
                } else {
                    for l in 0..LAYERS {
                        momentum_step(&mut base.w[l], &mut vel.w[l], &grads.w[l], lr, mu);
                        momentum_step(&mut base.b[l], &mut vel.b[l], &grads.b[l], lr, mu);
                    }
                }
            }
        }
        if !adapter_only {
            model.params = base.to_checkpoint(model.params.meta())?;
        } else {
            for (l, a, b) in adapters {
                let r = a.len() / model.dims[l];
                model.adapters.insert(
                    l,
                    Adapter {
                        a: Tensor::matrix(r, model.dims[l], a)?,
                        b: Tensor::matrix(model.dims[l + 1], r, b)?,
                    },
                );
            }
        }
        Ok(model)
    }

    /// Mark tensors that adapter training never touches as frozen.
    pub fn tag_frozen(mut self, names: &[String]) -> ToyModel {
        if !names.is_empty() {
            self.params.meta_mut().insert(FROZEN_KEY.into(), names.join(","));
        }
        self
    }
}

pub fn score_predictions(pred: &[usize], data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot score an empty dataset".into()));
    }
    let correct = pred.iter().zip(&data.y).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}

fn momentum_step(p: &mut [f32], v: &mut [f32], g: &[f32], lr: f32, mu: f32) {
    for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = mu * *v + g;
        *p -= lr * *v;
    }
}

/// `w += B·A` with `B` `d_out × r` and `A` `r × d_in`.
fn add_product(w: &mut [f32], b: &[f32], a: &[f32], d_out: usize, r: usize, d_in: usize) {
    for i in 0..d_out {
        for k in 0..r {
            let bik = b[i * r + k];
            if bik == 0.0 {
                continue;
            }
            let row = &mut w[i * d_in..(i + 1) * d_in];
            for (wj, &aj) in row.iter_mut().zip(&a[k * d_in..(k + 1) * d_in]) {
                *wj += bik * aj;
            }
        }
    }
}

/// Flat-buffer view of the network used in the hot loops.
#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    dims: [usize; 4],
    w: [Vec<f32>; LAYERS],
    b: [Vec<f32>; LAYERS],
}

impl Mlp {
    pub(crate) fn from_checkpoint(c: &Checkpoint, dims: [usize; 4]) -> Result<Mlp> {
        let w = [0, 1, 2].map(|l| c.tensor(&weight_name(l)).map(|t| t.data().to_vec()));
        let b = [0, 1, 2].map(|l| c.tensor(&bias_name(l)).map(|t| t.data().to_vec()));
        let [w0, w1, w2] = w;
        let [b0, b1, b2] = b;
        Ok(Mlp {
            dims,
            w: [w0?, w1?, w2?],
            b: [b0?, b1?, b2?],
        })
    }

    fn to_checkpoint(&self, meta: &BTreeMap<String, String>) -> Result<Checkpoint> {
        let mut params = BTreeMap::new();
        for l in 0..LAYERS {
            params.insert(
                weight_name(l),
                Tensor::matrix(self.dims[l + 1], self.dims[l], self.w[l].clone())?,
            );
            params.insert(bias_name(l), Tensor::vector(self.b[l].clone()));
        }
        let mut c = Checkpoint::new(params)?;
        *c.meta_mut() = meta.clone();
        Ok(c)
    }

    fn zeros_like(&self) -> Mlp {
        Mlp {
            dims: self.dims,
            w: self.w.clone().map(|v| vec![0.0; v.len()]),
            b: self.b.clone().map(|v| vec![0.0; v.len()]),
        }
    }

    fn affine(&self, l: usize, x: &[f32], out: &mut Vec<f32>) {
        let (d_in, d_out) = (self.dims[l], self.dims[l + 1]);
        out.clear();
        for i in 0..d_out {
            let row = &self.w[l][i * d_in..(i + 1) * d_in];
            let z: f32 = row.iter().zip(x).map(|(w, x)| w * x).sum::<f32>() + self.b[l][i];
            out.push(z);
        }
    }

    /// Returns (first hidden, second hidden, logits).
    pub(crate) fn forward_one(&self, x: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let mut h0 = Vec::with_capacity(self.dims[1]);
        self.affine(0, x, &mut h0);
        h0.iter_mut().for_each(|v| *v = v.tanh());
        let mut h1 = Vec::with_capacity(self.dims[2]);
        self.affine(1, &h0, &mut h1);
        h1.iter_mut().for_each(|v| *v = v.tanh());
        let mut logits = Vec::with_capacity(self.dims[3]);
        self.affine(2, &h1, &mut logits);
        (h0, h1, logits)
    }

    pub(crate) fn predict(&self, data: &Dataset) -> Vec<usize> {
        (0..data.len()).map(|i| argmax(&self.forward_one(data.row(i)).2)).collect()
    }

    /// Mean cross-entropy over `batch` and its gradient.
    fn backprop(&self, data: &Dataset, batch: &[usize]) -> (f32, Mlp) {
        let mut g = self.zeros_like();
        let [d0, d1, d2, d3] = self.dims;
        let scale = 1.0 / batch.len() as f32;
        let mut loss = 0.0f32;
        let mut dz1 = vec![0.0f32; d2];
        let mut dz0 = vec![0.0f32; d1];
        for &i in batch {
            let x = data.row(i);
            let (h0, h1, logits) = self.forward_one(x);
            let probs = softmax(&logits);
            let y = data.y[i];
            loss -= probs[y].max(1e-30).ln() * scale;
            let dlogits: Vec<f32> = probs
                .iter()
                .enumerate()
                .map(|(k, &p)| (p - if k == y { 1.0 } else { 0.0 }) * scale)
                .collect();
            // output layer
            dz1.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..d3 {
                let dk = dlogits[k];
                g.b[2][k] += dk;
                let wrow = &self.w[2][k * d2..(k + 1) * d2];
                let grow = &mut g.w[2][k * d2..(k + 1) * d2];
                for j in 0..d2 {
                    grow[j] += dk * h1[j];
                    dz1[j] += dk * wrow[j];
                }
            }
            for j in 0..d2 {
                dz1[j] *= 1.0 - h1[j] * h1[j];
            }
            // second hidden layer
            dz0.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..d2 {
                let dj = dz1[j];
                g.b[1][j] += dj;
                let wrow = &self.w[1][j * d1..(j + 1) * d1];
                let grow = &mut g.w[1][j * d1..(j + 1) * d1];
                for m in 0..d1 {
                    grow[m] += dj * h0[m];
                    dz0[m] += dj * wrow[m];
                }
            }
            for m in 0..d1 {
                dz0[m] *= 1.0 - h0[m] * h0[m];
            }
            // first hidden layer
            for m in 0..d1 {
                let dm = dz0[m];
                g.b[0][m] += dm;
                let grow = &mut g.w[0][m * d0..(m + 1) * d0];
                for (gv, &xv) in grow.iter_mut().zip(x) {
                    *gv += dm * xv;
                }
            }
        }
        (loss, g)
    }
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyzoo::suite::{gen_suite, SuiteConfig};

    fn tiny_data() -> Dataset {
        let s = gen_suite(&SuiteConfig {
            tasks: 2,
            dim: 6,
            classes: 3,
            n_per_task: 120,
            shared_strength: 0.5,
            seed: 3,
        })
        .unwrap();
        s.tasks[0].train.clone()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let data = tiny_data();
        let m = ToyModel::init(6, 5, 3, 1);
        let mlp = Mlp::from_checkpoint(&m.params, m.dims).unwrap();
        let batch: Vec<usize> = (0..16).collect();
        let (_, g) = mlp.backprop(&data, &batch);
        let loss_at = |mlp: &Mlp| -> f64 {
            batch
                .iter()
                .map(|&i| {
                    let logits = mlp.forward_one(data.row(i)).2;
                    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                    let lse = logits.iter().map(|&z| (z as f64 - max).exp()).sum::<f64>().ln() + max;
                    lse - logits[data.y[i]] as f64
                })
                .sum::<f64>()
                / batch.len() as f64
        };
        let h = 1e-2f32;
        for l in 0..LAYERS {
            for idx in [0usize, 3, mlp.w[l].len() - 1] {
                let mut plus = mlp.clone();
                plus.w[l][idx] += h;
                let mut minus = mlp.clone();
                minus.w[l][idx] -= h;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h as f64);
                assert!((fd - g.w[l][idx] as f64).abs() < 2e-3, "w{l}[{idx}] fd {fd} vs {}", g.w[l][idx]);
            }
            let mut plus = mlp.clone();
            plus.b[l][0] += h;
            let mut minus = mlp.clone();
            minus.b[l][0] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h as f64);
            assert!((fd - g.b[l][0] as f64).abs() < 2e-3);
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let data = tiny_data();
        let m = ToyModel::init(6, 5, 3, 2);
        let out = m.train(&data, &TrainConfig::new(0, 0.1, 0)).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data = tiny_data();
        let m = ToyModel::init(6, 16, 3, 2);
        let cfg = TrainConfig::new(20, 0.05, 7);
        let a = m.train(&data, &cfg).unwrap();
        let b = m.train(&data, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.score(&data).unwrap() > m.score(&data).unwrap());
        assert!(a.score(&data).unwrap() > 0.9);
    }

    #[test]
    fn adapter_training_freezes_base() {
        let data = tiny_data();
        let m = ToyModel::init(6, 16, 3, 2);
        let mut cfg = TrainConfig::new(5, 0.05, 7);
        cfg.adapter = Some(AdapterConfig {
            rank: 2,
            layers: vec![0, 1],
        });
        let out = m.train(&data, &cfg).unwrap();
        assert_eq!(out.params, m.params);
        assert_eq!(out.adapters.len(), 2);
        assert!(out.adapters[&1].b.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn fold_zero_b_is_base() {
        let m = ToyModel::init(6, 5, 3, 4).with_adapters(2, &[0, 2], 0.0, 1).unwrap();
        assert_eq!(m.merge_adapter().unwrap(), m.params);
        let bare = ToyModel::init(6, 5, 3, 4);
        assert!(matches!(bare.merge_adapter(), Err(Error::State(_))));
    }

    #[test]
    fn fold_full_rank_recovers_product() {
        let m = ToyModel::init(6, 5, 3, 4).with_adapters(5, &[1], 0.5, 9).unwrap();
        let folded = m.merge_adapter().unwrap();
        let d = folded.diff(&m.params).unwrap();
        let ba = m.adapters[&1].product();
        assert!(d.get("layer1.w").unwrap().relative_error(&ba) < 1e-5);
    }

    #[test]
    fn adapter_forward_uses_folded_weights() {
        let data = tiny_data();
        let m = ToyModel::init(6, 5, 3, 4).with_adapters(2, &[0, 1], 0.3, 9).unwrap();
        let folded = ToyModel::from_checkpoint(m.merge_adapter().unwrap()).unwrap();
        for i in 0..5 {
            let a = m.logits(data.row(i)).unwrap();
            let b = folded.logits(data.row(i)).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn score_contracts() {
        let data = tiny_data();
        // A model with zero weights and biases predicts class 0 for everything.
        let zero = ToyModel::from_checkpoint(ToyModel::init(6, 5, 3, 0).params.zeros_like()).unwrap();
        let acc = zero.score(&data).unwrap();
        let frac0 = data.y.iter().filter(|&&y| y == 0).count() as f64 / data.len() as f64;
        assert_eq!(acc, frac0);
        assert!((acc - 1.0 / 3.0).abs() < 0.05);

        let m = ToyModel::init(6, 16, 3, 2).train(&data, &TrainConfig::new(10, 0.05, 1)).unwrap();
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.reverse();
        assert_eq!(m.score(&data).unwrap(), m.score(&data.select(&idx)).unwrap());
        assert!(matches!(m.score(&Dataset::new(6)), Err(Error::Data(_))));
    }

    #[test]
    fn checkpoint_roundtrip_through_container() {
        let m = ToyModel::init(6, 5, 3, 4);
        let c = crate::container::decode(&crate::container::encode(&m.params.to_container()).unwrap()).unwrap();
        let back = ToyModel::from_checkpoint(Checkpoint::new(c.tensors).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
