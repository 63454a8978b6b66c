//! The trainable fuser: maps an input embedding to softmax merging weights
//! over the task experts.
//!
//! Architecture: three affine layers, batch normalization (no affine
//! parameters) and Leaky ReLU after the first two. The final layer starts at
//! zero, so an untrained router routes uniformly.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, Container};
use crate::error::{Error, Result};
use crate::linalg::Tensor;
use crate::toyzoo::ToyModel;

const BN_EPS: f64 = 1e-5;
/// Upper bound on router training items per task.
pub const MAX_ITEMS_PER_TASK: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterConfig {
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_slope")]
    pub leaky_slope: f64,
    #[serde(default = "d_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub seed: u64,
}

/// Update rule for router training. Both use `momentum` as the first-moment
/// decay.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Heavy-ball SGD: `v = μv + g; p -= lr·v`.
    Sgd,
    /// Adam with second-moment decay 0.999 and bias correction.
    #[default]
    Adam,
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn d_hidden() -> usize {
    64
}
fn d_epochs() -> usize {
    10
}
fn d_lr() -> f64 {
    5e-4
}
fn d_momentum() -> f64 {
    0.9
}
fn d_batch() -> usize {
    64
}
fn d_slope() -> f64 {
    0.01
}
fn d_bn_momentum() -> f64 {
    0.1
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            hidden: d_hidden(),
            epochs: d_epochs(),
            lr: d_lr(),
            momentum: d_momentum(),
            batch_size: d_batch(),
            leaky_slope: d_slope(),
            bn_momentum: d_bn_momentum(),
            optimizer: Optimizer::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    /// `(embed_dim, hidden, hidden, tasks)`
    pub dims: [usize; 4],
    pub leaky_slope: f64,
    /// `w[l]` is `dims[l+1] × dims[l]`, row-major.
    w: [Vec<f64>; 3],
    b: [Vec<f64>; 3],
    bn_mean: [Vec<f64>; 2],
    bn_var: [Vec<f64>; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub weights: Vec<f64>,
    pub logits: Vec<f64>,
}

impl RoutingDecision {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Self {
            weights: exps.into_iter().map(|e| e / sum).collect(),
            logits,
        }
    }

    /// Index of the largest logit; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &z) in self.logits.iter().enumerate() {
            if z > self.logits[best] {
                best = i;
            }
        }
        best
    }

    /// A decision that puts all weight on one task.
    pub fn one_hot(task: usize, tasks: usize) -> Self {
        let mut weights = vec![0.0; tasks];
        weights[task] = 1.0;
        let logits = weights.iter().map(|&w| if w > 0.0 { 0.0 } else { f64::NEG_INFINITY }).collect();
        Self { weights, logits }
    }
}

/// Penultimate-layer activations of the shared expert.
pub fn embed(shared: &ToyModel, x: &[f32]) -> Result<Vec<f32>> {
    shared.penultimate(x)
}

impl Router {
    pub fn init(embed_dim: usize, hidden: usize, tasks: usize, leaky_slope: f64, seed: u64) -> Router {
        let dims = [embed_dim, hidden, hidden, tasks];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |l: usize| -> Vec<f64> {
            let (d_in, d_out) = (dims[l], dims[l + 1]);
            if l == 2 {
                return vec![0.0; d_out * d_in];
            }
            let bound = 1.0 / (d_in as f64).sqrt();
            (0..d_out * d_in).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let w = [layer(0), layer(1), layer(2)];
        Router {
            dims,
            leaky_slope,
            w,
            b: [vec![0.0; hidden], vec![0.0; hidden], vec![0.0; tasks]],
            bn_mean: [vec![0.0; hidden], vec![0.0; hidden]],
            bn_var: [vec![1.0; hidden], vec![1.0; hidden]],
        }
    }

    pub fn tasks(&self) -> usize {
        self.dims[3]
    }

    pub fn embed_dim(&self) -> usize {
        self.dims[0]
    }

    fn affine(&self, l: usize, x: &[f64]) -> Vec<f64> {
        let (d_in, d_out) = (self.dims[l], self.dims[l + 1]);
        (0..d_out)
            .map(|i| {
                self.w[l][i * d_in..(i + 1) * d_in]
                    .iter()
                    .zip(x)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
                    + self.b[l][i]
            })
            .collect()
    }

    fn leaky(&self, v: f64) -> f64 {
        if v > 0.0 {
            v
        } else {
            self.leaky_slope * v
        }
    }

    /// Eval-mode logits (running normalization statistics).
    pub fn logits(&self, emb: &[f32]) -> Result<Vec<f64>> {
        if emb.len() != self.dims[0] {
            return Err(Error::Argument(format!(
                "embedding has {} features, router expects {}",
                emb.len(),
                self.dims[0]
            )));
        }
        let mut h: Vec<f64> = emb.iter().map(|&v| v as f64).collect();
        for l in 0..2 {
            let z = self.affine(l, &h);
            h = z
                .iter()
                .enumerate()
                .map(|(i, &v)| self.leaky((v - self.bn_mean[l][i]) / (self.bn_var[l][i] + BN_EPS).sqrt()))
                .collect();
        }
        Ok(self.affine(2, &h))
    }

    pub fn route(&self, emb: &[f32]) -> Result<RoutingDecision> {
        Ok(RoutingDecision::from_logits(self.logits(emb)?))
    }

    /// Training-mode forward/backward over a minibatch. Returns the mean
    /// cross-entropy, parameter gradients, and the batch statistics.
    fn backprop(&self, emb: &[Vec<f64>], labels: &[usize]) -> (f64, Grads, [BatchStats; 2]) {
        let n = emb.len();
        let nf = n as f64;
        let h = self.dims[1];
        // Forward, caching per-layer values.
        let mut inputs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(3);
        let mut normed: Vec<Vec<Vec<f64>>> = Vec::with_capacity(2);
        let mut stats: Vec<BatchStats> = Vec::with_capacity(2);
        let mut act: Vec<Vec<f64>> = emb.to_vec();
        for l in 0..2 {
            inputs.push(act.clone());
            let z: Vec<Vec<f64>> = act.iter().map(|x| self.affine(l, x)).collect();
            let mut mean = vec![0.0; h];
            for row in &z {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / nf);
            }
            let mut var = vec![0.0; h];
            for row in &z {
                var.iter_mut()
                    .zip(row.iter().zip(&mean))
                    .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / nf);
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let xhat: Vec<Vec<f64>> = z
                .iter()
                .map(|row| row.iter().enumerate().map(|(i, v)| (v - mean[i]) * inv_std[i]).collect())
                .collect();
            act = xhat.iter().map(|row| row.iter().map(|&v| self.leaky(v)).collect()).collect();
            normed.push(xhat);
            stats.push(BatchStats { mean, var, inv_std });
        }
        inputs.push(act.clone());
        let logits: Vec<Vec<f64>> = act.iter().map(|x| self.affine(2, x)).collect();

        let mut g = Grads::zeros(self);
        let mut loss = 0.0;
        let mut upstream: Vec<Vec<f64>> = Vec::with_capacity(n);
        for (row, &y) in logits.iter().zip(labels) {
            let d = RoutingDecision::from_logits(row.clone());
            loss -= d.weights[y].max(1e-300).ln() / nf;
            upstream.push(
                d.weights
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| (p - if k == y { 1.0 } else { 0.0 }) / nf)
                    .collect(),
            );
        }
        for l in (0..3).rev() {
            let (d_in, d_out) = (self.dims[l], self.dims[l + 1]);
            let x = &inputs[l];
            // upstream holds dL/dz for layer l's affine output.
            let mut dx = vec![vec![0.0; d_in]; n];
            for s in 0..n {
                for i in 0..d_out {
                    let dz = upstream[s][i];
                    if dz == 0.0 {
                        continue;
                    }
                    g.b[l][i] += dz;
                    let wrow = &self.w[l][i * d_in..(i + 1) * d_in];
                    let grow = &mut g.w[l][i * d_in..(i + 1) * d_in];
                    for j in 0..d_in {
                        grow[j] += dz * x[s][j];
                        dx[s][j] += dz * wrow[j];
                    }
                }
            }
            if l == 0 {
                break;
            }
            // Back through leaky ReLU and batch norm of layer l − 1.
            let bn = l - 1;
            let xhat = &normed[bn];
            let st = &stats[bn];
            let dxhat: Vec<Vec<f64>> = dx
                .iter()
                .zip(xhat)
                .map(|(d, xh)| {
                    d.iter()
                        .zip(xh)
                        .map(|(&d, &v)| if v > 0.0 { d } else { self.leaky_slope * d })
                        .collect()
                })
                .collect();
            let mut mean_d = vec![0.0; h];
            let mut mean_dx = vec![0.0; h];
            for (d, xh) in dxhat.iter().zip(xhat) {
                for i in 0..h {
                    mean_d[i] += d[i] / nf;
                    mean_dx[i] += d[i] * xh[i] / nf;
                }
            }
            upstream = dxhat
                .iter()
                .zip(xhat)
                .map(|(d, xh)| {
                    (0..h)
                        .map(|i| st.inv_std[i] * (d[i] - mean_d[i] - xh[i] * mean_dx[i]))
                        .collect()
                })
                .collect();
        }
        let [s0, s1]: [BatchStats; 2] = stats.try_into().ok().expect("two layers");
        (loss, g, [s0, s1])
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut tensors = BTreeMap::new();
        let f = |v: &Vec<f64>| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        for l in 0..3 {
            tensors.insert(
                format!("layer{l}.w"),
                Tensor::matrix(self.dims[l + 1], self.dims[l], f(&self.w[l]))?,
            );
            tensors.insert(format!("layer{l}.b"), Tensor::vector(f(&self.b[l])));
        }
        for l in 0..2 {
            tensors.insert(format!("bn{l}.mean"), Tensor::vector(f(&self.bn_mean[l])));
            tensors.insert(format!("bn{l}.var"), Tensor::vector(f(&self.bn_var[l])));
        }
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "router".into());
        meta.insert("tasks".into(), self.tasks().to_string());
        meta.insert("leaky_slope".into(), self.leaky_slope.to_string());
        Ok(Container { tensors, meta })
    }

    pub fn from_container(c: &Container) -> Result<Router> {
        if c.meta.get("kind").map(String::as_str) != Some("router") {
            return Err(Error::Format("container is not a router".into()));
        }
        let get = |name: &str| {
            c.tensors
                .get(name)
                .ok_or_else(|| Error::Format(format!("router missing {name:?}")))
        };
        let f = |t: &Tensor| t.data().iter().map(|&x| x as f64).collect::<Vec<f64>>();
        let (hidden, embed_dim) = get("layer0.w")?.dims2()?;
        let (tasks, h2) = get("layer2.w")?.dims2()?;
        if get("layer1.w")?.dims2()? != (hidden, hidden) || h2 != hidden {
            return Err(Error::Format("router layer shapes are inconsistent".into()));
        }
        let declared: usize = c
            .meta
            .get("tasks")
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Format("router metadata missing task count".into()))?;
        if declared != tasks {
            return Err(Error::Format(format!("router declares {declared} tasks but has {tasks} outputs")));
        }
        let leaky_slope = c
            .meta
            .get("leaky_slope")
            .and_then(|s| s.parse().ok())
            .unwrap_or_else(d_slope);
        let bn_var = [f(get("bn0.var")?), f(get("bn1.var")?)];
        if bn_var.iter().flatten().any(|&v| v <= 0.0) {
            return Err(Error::Format("router running variances must be positive".into()));
        }
        Ok(Router {
            dims: [embed_dim, hidden, hidden, tasks],
            leaky_slope,
            w: [f(get("layer0.w")?), f(get("layer1.w")?), f(get("layer2.w")?)],
            b: [f(get("layer0.b")?), f(get("layer1.b")?), f(get("layer2.b")?)],
            bn_mean: [f(get("bn0.mean")?), f(get("bn1.mean")?)],
            bn_var,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write(&self.to_container()?, path)
    }

    /// Parameters are stored as f32; a loaded router matches the saved one
    /// up to that rounding.
    pub fn load(path: &Path) -> Result<Router> {
        Router::from_container(&container::read(path)?)
    }

    pub fn param_count(&self) -> usize {
        self.w.iter().chain(&self.b).map(Vec::len).sum::<usize>()
            + self.bn_mean.iter().chain(&self.bn_var).map(Vec::len).sum::<usize>()
    }

    /// Round every parameter through f32, matching what a save/load cycle does.
    pub fn quantized(&self) -> Router {
        let q = |v: &Vec<f64>| v.iter().map(|&x| x as f32 as f64).collect::<Vec<f64>>();
        Router {
            dims: self.dims,
            leaky_slope: self.leaky_slope,
            w: [q(&self.w[0]), q(&self.w[1]), q(&self.w[2])],
            b: [q(&self.b[0]), q(&self.b[1]), q(&self.b[2])],
            bn_mean: [q(&self.bn_mean[0]), q(&self.bn_mean[1])],
            bn_var: [q(&self.bn_var[0]), q(&self.bn_var[1])],
        }
    }
}

struct BatchStats {
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
}

struct Grads {
    w: [Vec<f64>; 3],
    b: [Vec<f64>; 3],
}

impl Grads {
    fn zeros(r: &Router) -> Grads {
        Grads {
            w: r.w.clone().map(|v| vec![0.0; v.len()]),
            b: r.b.clone().map(|v| vec![0.0; v.len()]),
        }
    }
}

/// Training result with the mean loss of every epoch.
#[derive(Debug, Clone)]
pub struct TrainedRouter {
    pub router: Router,
    pub epoch_losses: Vec<f64>,
}

/// Train a router on `(embedding, task id)` pairs with cross-entropy on the
/// task id.
pub fn train_router(data: &[(Vec<f32>, usize)], tasks: usize, cfg: &RouterConfig) -> Result<TrainedRouter> {
    if tasks < 2 {
        return Err(Error::Data(format!("router needs at least 2 tasks, got {tasks}")));
    }
    let embed_dim = data
        .first()
        .map(|(e, _)| e.len())
        .ok_or_else(|| Error::Data("no router training data".into()))?;
    let mut counts = vec![0usize; tasks];
    for (e, t) in data {
        if e.len() != embed_dim {
            return Err(Error::Data("embeddings have inconsistent dimensions".into()));
        }
        if *t >= tasks {
            return Err(Error::Data(format!("task id {t} out of range")));
        }
        counts[*t] += 1;
    }
    if let Some(t) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("no router training items for task {t}")));
    }
    if let Some(t) = counts.iter().position(|&c| c > MAX_ITEMS_PER_TASK) {
        return Err(Error::Data(format!(
            "task {t} has {} router items, limit is {MAX_ITEMS_PER_TASK}",
            counts[t]
        )));
    }

    let mut router = Router::init(embed_dim, cfg.hidden, tasks, cfg.leaky_slope, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut vw = router.w.clone().map(|v| vec![0.0; v.len()]);
    let mut vb = router.b.clone().map(|v| vec![0.0; v.len()]);
    let mut sw = vw.clone();
    let mut sb = vb.clone();
    let mut steps = 0i32;
    let emb: Vec<Vec<f64>> = data.iter().map(|(e, _)| e.iter().map(|&v| v as f64).collect()).collect();
    let labels: Vec<usize> = data.iter().map(|(_, t)| *t).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let be: Vec<Vec<f64>> = batch.iter().map(|&i| emb[i].clone()).collect();
            let bl: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, g, stats) = router.backprop(&be, &bl);
            if !loss.is_finite() {
                return Err(Error::Training(format!("router loss became {loss}")));
            }
            total += loss * batch.len() as f64;
            steps += 1;
            for l in 0..3 {
                match cfg.optimizer {
                    Optimizer::Sgd => {
                        sgd_step(&mut router.w[l], &mut vw[l], &g.w[l], cfg.lr, cfg.momentum);
                        sgd_step(&mut router.b[l], &mut vb[l], &g.b[l], cfg.lr, cfg.momentum);
                    }
                    Optimizer::Adam => {
                        adam_step(&mut router.w[l], &mut vw[l], &mut sw[l], &g.w[l], cfg, steps);
                        adam_step(&mut router.b[l], &mut vb[l], &mut sb[l], &g.b[l], cfg, steps);
                    }
                }
            }
            let n = batch.len() as f64;
            let unbias = if batch.len() > 1 { n / (n - 1.0) } else { 1.0 };
            for (l, st) in stats.iter().enumerate() {
                for i in 0..router.dims[1] {
                    router.bn_mean[l][i] = (1.0 - cfg.bn_momentum) * router.bn_mean[l][i] + cfg.bn_momentum * st.mean[i];
                    router.bn_var[l][i] =
                        (1.0 - cfg.bn_momentum) * router.bn_var[l][i] + cfg.bn_momentum * st.var[i] * unbias;
                }
            }
        }
        epoch_losses.push(total / data.len() as f64);
    }
    Ok(TrainedRouter { router, epoch_losses })
}

fn sgd_step(p: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, mu: f64) {
    for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = mu * *v + g;
        *p -= lr * *v;
    }
}

fn adam_step(p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], cfg: &RouterConfig, t: i32) {
    let b1 = cfg.momentum;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
    }
}

/// Batch grouping for merge-once-per-group inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    /// Group index of every item.
    pub assignment: Vec<usize>,
    /// Merging weights of every group.
    pub weights: Vec<Vec<f64>>,
}

impl Grouping {
    pub fn group_count(&self) -> usize {
        self.weights.len()
    }
}

pub const KMEANS_ITERS: usize = 10;

/// Bin decisions by arg-max logit, cluster each bin's logits with k-means
/// into at most `group_count` groups, and give each group the renormalized
/// mean of its members' weights.
///
/// When `group_count` is at least the batch size every item is its own group
/// and keeps its weights verbatim.
pub fn group_weights(decisions: &[RoutingDecision], group_count: usize, seed: u64) -> Result<Grouping> {
    if decisions.is_empty() {
        return Err(Error::Argument("cannot group an empty batch".into()));
    }
    if group_count == 0 {
        return Err(Error::Argument("group count must be at least 1".into()));
    }
    if group_count >= decisions.len() {
        return Ok(Grouping {
            assignment: (0..decisions.len()).collect(),
            weights: decisions.iter().map(|d| d.weights.clone()).collect(),
        });
    }
    let mut bins: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, d) in decisions.iter().enumerate() {
        bins.entry(d.argmax()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; decisions.len()];
    let mut weights = Vec::new();
    for members in bins.values() {
        let points: Vec<&[f64]> = members.iter().map(|&i| decisions[i].logits.as_slice()).collect();
        let clusters = kmeans(&points, group_count.min(members.len()), &mut rng);
        for cluster in clusters {
            let gid = weights.len();
            let items: Vec<usize> = cluster.iter().map(|&p| members[p]).collect();
            for &i in &items {
                assignment[i] = gid;
            }
            weights.push(mean_weights(decisions, &items));
        }
    }
    Ok(Grouping { assignment, weights })
}

fn mean_weights(decisions: &[RoutingDecision], items: &[usize]) -> Vec<f64> {
    let first = &decisions[items[0]].weights;
    if items.iter().all(|&i| decisions[i].weights == *first) {
        return first.clone();
    }
    let mut mean = vec![0.0; first.len()];
    for &i in items {
        mean.iter_mut().zip(&decisions[i].weights).for_each(|(m, w)| *m += w);
    }
    let sum: f64 = mean.iter().sum();
    mean.iter_mut().for_each(|m| *m /= sum);
    mean
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with seeded farthest-point initialization. Returns the
/// member indices of each non-empty cluster.
pub fn kmeans(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let n = points.len();
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].to_vec()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let (far, dist) = nearest
            .iter()
            .enumerate()
            .fold((0, -1.0), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        if dist <= 0.0 {
            break;
        }
        centers.push(points[far].to_vec());
        let c = centers.last().expect("just pushed");
        for (nd, p) in nearest.iter_mut().zip(points) {
            *nd = nd.min(sq_dist(p, c));
        }
    }
    let assign = |centers: &[Vec<f64>]| -> Vec<usize> {
        points
            .iter()
            .map(|p| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (j, c) in centers.iter().enumerate() {
                    let d = sq_dist(p, c);
                    if d < best_d {
                        best_d = d;
                        best = j;
                    }
                }
                best
            })
            .collect()
    };
    let mut labels = assign(&centers);
    for _ in 0..KMEANS_ITERS {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p.iter()).for_each(|(s, x)| *s += x);
        }
        for (j, c) in centers.iter_mut().enumerate() {
            if counts[j] > 0 {
                *c = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let next = assign(&centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    let mut clusters = vec![Vec::new(); centers.len()];
    for (i, &l) in labels.iter().enumerate() {
        clusters[l].push(i);
    }
    clusters.retain(|c| !c.is_empty());
    clusters
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(tasks: usize, per_task: usize, dim: usize, sep: f64, seed: u64) -> Vec<(Vec<f32>, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let centers: Vec<Vec<f64>> = (0..tasks)
            .map(|_| (0..dim).map(|_| noise.sample(&mut rng) * sep).collect())
            .collect();
        let mut out = Vec::new();
        for t in 0..tasks {
            for _ in 0..per_task {
                let e = centers[t].iter().map(|c| (c + noise.sample(&mut rng)) as f32).collect();
                out.push((e, t));
            }
        }
        out
    }

    #[test]
    fn fresh_router_routes_uniformly() {
        let r = Router::init(5, 8, 4, 0.01, 1);
        let d = r.route(&[0.3, -1.0, 2.0, 0.0, 1.0]).unwrap();
        assert!(d.weights.iter().all(|&w| (w - 0.25).abs() < 1e-12));
        assert!(r.route(&[0.0; 3]).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = RoutingDecision::from_logits(vec![0.5, -1.0, 2.0]);
        let b = RoutingDecision::from_logits(vec![100.5, 99.0, 102.0]);
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let data = blobs(3, 6, 4, 1.0, 2);
        let mut r = Router::init(4, 5, 3, 0.01, 3);
        // give the zero-initialized output layer some weight so every gradient is live
        r.w[2].iter_mut().enumerate().for_each(|(i, w)| *w = ((i as f64) * 0.37).sin() * 0.5);
        let emb: Vec<Vec<f64>> = data.iter().map(|(e, _)| e.iter().map(|&v| v as f64).collect()).collect();
        let labels: Vec<usize> = data.iter().map(|(_, t)| *t).collect();
        let (_, g, _) = r.backprop(&emb, &labels);
        let h = 1e-6;
        for l in 0..3 {
            for idx in [0usize, 2, r.w[l].len() - 1] {
                let mut p = r.clone();
                p.w[l][idx] += h;
                let mut m = r.clone();
                m.w[l][idx] -= h;
                let fd = (p.backprop(&emb, &labels).0 - m.backprop(&emb, &labels).0) / (2.0 * h);
                assert!((fd - g.w[l][idx]).abs() < 1e-6, "w{l}[{idx}]: {fd} vs {}", g.w[l][idx]);
            }
            let mut p = r.clone();
            p.b[l][1] += h;
            let mut m = r.clone();
            m.b[l][1] -= h;
            let fd = (p.backprop(&emb, &labels).0 - m.backprop(&emb, &labels).0) / (2.0 * h);
            assert!((fd - g.b[l][1]).abs() < 1e-6, "b{l}: {fd} vs {}", g.b[l][1]);
        }
    }

    #[test]
    fn separable_single_feature_routes_correctly() {
        let mut data = Vec::new();
        for i in 0..400 {
            let x = 1.0 + (i % 50) as f32 * 0.02;
            data.push((vec![x], 0));
            data.push((vec![-x], 1));
        }
        let trained = train_router(&data, 2, &RouterConfig::default()).unwrap();
        let correct = data
            .iter()
            .filter(|(e, t)| trained.router.route(e).unwrap().argmax() == *t)
            .count();
        assert!(correct as f64 / data.len() as f64 >= 0.99);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let data = blobs(2, 10, 3, 2.0, 1);
        let cfg = RouterConfig {
            epochs: 0,
            seed: 4,
            ..RouterConfig::default()
        };
        let r = train_router(&data, 2, &cfg).unwrap().router;
        assert_eq!(r, Router::init(3, cfg.hidden, 2, cfg.leaky_slope, 4));
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(3, 50, 6, 2.0, 5);
        let cfg = RouterConfig::default();
        let a = train_router(&data, 3, &cfg).unwrap();
        let b = train_router(&data, 3, &cfg).unwrap();
        assert_eq!(a.router, b.router);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn train_router_data_errors() {
        let data = blobs(2, 5, 3, 1.0, 1);
        assert!(matches!(train_router(&data, 3, &RouterConfig::default()), Err(Error::Data(_))));
        assert!(matches!(train_router(&data, 1, &RouterConfig::default()), Err(Error::Data(_))));
        let big = blobs(2, 1001, 3, 1.0, 1);
        assert!(matches!(train_router(&big, 2, &RouterConfig::default()), Err(Error::Data(_))));
    }

    #[test]
    fn eval_route_is_independent_of_batch() {
        let data = blobs(3, 40, 4, 2.0, 6);
        let r = train_router(&data, 3, &RouterConfig::default()).unwrap().router;
        let alone = r.route(&data[0].0).unwrap();
        for (e, _) in &data[1..5] {
            r.route(e).unwrap();
        }
        assert_eq!(r.route(&data[0].0).unwrap(), alone);
    }

    #[test]
    fn container_roundtrip() {
        let data = blobs(3, 20, 4, 2.0, 7);
        let r = train_router(&data, 3, &RouterConfig::default()).unwrap().router;
        let c = r.to_container().unwrap();
        assert_eq!(c.meta["tasks"], "3");
        assert!(c.tensors.contains_key("bn1.var"));
        assert_eq!(Router::from_container(&c).unwrap(), r.quantized());
    }

    #[test]
    fn grouping_degenerates_when_groups_cover_batch() {
        let ds: Vec<RoutingDecision> = (0..7)
            .map(|i| RoutingDecision::from_logits(vec![i as f64 * 0.3, 1.0 - i as f64 * 0.1]))
            .collect();
        let g = group_weights(&ds, 7, 0).unwrap();
        assert_eq!(g.group_count(), 7);
        for (i, d) in ds.iter().enumerate() {
            assert_eq!(g.weights[g.assignment[i]], d.weights);
        }
    }

    #[test]
    fn identical_decisions_form_one_group() {
        let d = RoutingDecision::from_logits(vec![0.2, 1.4, -0.3]);
        let ds = vec![d.clone(); 30];
        let g = group_weights(&ds, 5, 1).unwrap();
        assert_eq!(g.group_count(), 1);
        assert_eq!(g.weights[0], d.weights);
    }

    #[test]
    fn groups_respect_bins_and_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds: Vec<RoutingDecision> = (0..200)
            .map(|_| RoutingDecision::from_logits((0..4).map(|_| rng.random_range(-2.0..2.0)).collect()))
            .collect();
        let g = group_weights(&ds, 5, 2).unwrap();
        assert!(g.group_count() <= 5 * 4);
        for (i, d) in ds.iter().enumerate() {
            let gw = &g.weights[g.assignment[i]];
            assert!((gw.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // every member of a group shares its arg-max bin
            let members: Vec<usize> = (0..ds.len()).filter(|&j| g.assignment[j] == g.assignment[i]).collect();
            assert!(members.iter().all(|&j| ds[j].argmax() == d.argmax()));
        }
        assert!(group_weights(&[], 3, 0).is_err());
        assert!(group_weights(&ds, 0, 0).is_err());
    }

    #[test]
    fn kmeans_separates_obvious_clusters() {
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| if i < 10 { vec![0.0 + i as f64 * 0.01] } else { vec![10.0 + i as f64 * 0.01] })
            .collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clusters = kmeans(&refs, 2, &mut rng);
        assert_eq!(clusters.len(), 2);
        let mut sizes: Vec<usize> = clusters.iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![10, 10]);
    }

    #[test]
    fn embed_zero_input_identity_model() {
        let mut m = ToyModel::init(3, 3, 2, 0);
        let mut p = m.params.zeros_like();
        p.set("layer0.w", Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap()).unwrap();
        p.set("layer1.w", Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap()).unwrap();
        m.params = p;
        assert_eq!(embed(&m, &[0.0; 3]).unwrap(), vec![0.0; 3]);
        let x = [0.3, -0.2, 0.9];
        assert_eq!(embed(&m, &x).unwrap().len(), m.hidden());
        assert_eq!(embed(&m, &x).unwrap(), embed(&m, &x).unwrap());
        assert!(embed(&m, &[0.0; 2]).is_err());
    }
}
