//! Synthetic multi-task classification suites.
//!
//! Every task shares one global layout of class means. Task `t` sees the
//! layout blended with a seeded random rotation of it:
//! `mean_t = s · layout + (1 − s) · R_t · layout`, where `s` is the shared
//! strength. `R_t` acts inside the span of the layout, so a rotated class
//! mean lands among the other classes' directions and tasks disagree about
//! what those directions mean. Samples add isotropic Gaussian noise with
//! σ = 0.5.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{self, Container};
use crate::error::{Error, Result};
use crate::linalg::Tensor;

pub const NOISE_SIGMA: f64 = 0.5;
/// Norm of each global class mean.
pub const MEAN_NORM: f64 = 24.0;
pub const MAX_VALIDATION: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    #[serde(default = "d_tasks")]
    pub tasks: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_n")]
    pub n_per_task: usize,
    #[serde(default = "d_strength")]
    pub shared_strength: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_tasks() -> usize {
    4
}
fn d_dim() -> usize {
    32
}
fn d_classes() -> usize {
    4
}
fn d_n() -> usize {
    2000
}
fn d_strength() -> f64 {
    0.5
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            tasks: d_tasks(),
            dim: d_dim(),
            classes: d_classes(),
            n_per_task: d_n(),
            shared_strength: d_strength(),
            seed: 0,
        }
    }
}

impl SuiteConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Labelled samples, row-major features.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub x: Vec<f32>,
    pub y: Vec<usize>,
    pub task: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, x: &[f32], y: usize, task: usize) {
        debug_assert_eq!(x.len(), self.dim);
        self.x.extend_from_slice(x);
        self.y.push(y);
        self.task.push(task);
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            dim: self.dim,
            x: self.x[range.start * self.dim..range.end * self.dim].to_vec(),
            y: self.y[range.clone()].to_vec(),
            task: self.task[range].to_vec(),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut out = Dataset::new(self.dim);
        for &i in idx {
            out.push(self.row(i), self.y[i], self.task[i]);
        }
        out
    }

    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Dataset {
        let mut iter = parts.into_iter().peekable();
        let dim = iter.peek().map_or(0, |d| d.dim);
        let mut out = Dataset::new(dim);
        for d in iter {
            out.x.extend_from_slice(&d.x);
            out.y.extend_from_slice(&d.y);
            out.task.extend_from_slice(&d.task);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub config: SuiteConfig,
    pub tasks: Vec<TaskData>,
    /// Mixture weights αₜ, positive and summing to one.
    pub alphas: Vec<f64>,
    /// Class means per task, `classes × dim` row-major.
    pub means: Vec<Vec<f32>>,
    /// Samples from the un-rotated global layout, used to pretrain the base.
    pub pretrain: Dataset,
}

pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = (n / 5).min(MAX_VALIDATION);
    let test = n / 5;
    (n - val - test, val, test)
}

/// Random orthogonal matrix (row-major `dim × dim`) from Gram–Schmidt on a
/// Gaussian matrix.
pub(crate) fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for _ in 0..2 {
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
    }
    rows.concat()
}

/// Gram–Schmidt basis of the row space of a row-major matrix with `dim` columns.
fn orthonormal_rows(m: &[f64], dim: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for src in m.chunks(dim) {
        let mut v = src.to_vec();
        for _ in 0..2 {
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
    }
    rows
}

/// Apply a random rotation acting only inside the span of `basis` to every
/// row of `layout`.
fn rotate_in_span(layout: &[f64], basis: &[Vec<f64>], dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m = basis.len();
    let g = random_rotation(m, rng);
    let mut out = Vec::with_capacity(layout.len());
    for row in layout.chunks(dim) {
        let coords: Vec<f64> = basis.iter().map(|q| q.iter().zip(row).map(|(a, b)| a * b).sum()).collect();
        let mut v = vec![0.0f64; dim];
        for i in 0..m {
            let gi: f64 = (0..m).map(|j| g[i * m + j] * coords[j]).sum();
            v.iter_mut().zip(&basis[i]).for_each(|(a, q)| *a += gi * q);
        }
        out.extend(v);
    }
    out
}

pub fn gen_suite(cfg: &SuiteConfig) -> Result<TaskSuite> {
    if cfg.tasks < 2 {
        return Err(Error::Argument(format!("need at least 2 tasks, got {}", cfg.tasks)));
    }
    if cfg.dim == 0 || cfg.classes < 2 {
        return Err(Error::Argument("dim must be positive and classes ≥ 2".into()));
    }
    if !(0.0..=1.0).contains(&cfg.shared_strength) {
        return Err(Error::Argument(format!(
            "shared strength {} outside [0, 1]",
            cfg.shared_strength
        )));
    }
    if cfg.n_per_task < 5 {
        return Err(Error::Argument("n_per_task must be at least 5".into()));
    }
    let (d, c) = (cfg.dim, cfg.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");

    let mut layout = vec![0.0f64; c * d];
    for k in 0..c {
        let row = &mut layout[k * d..(k + 1) * d];
        row.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v *= MEAN_NORM / norm);
    }

    let s = cfg.shared_strength;
    let basis = orthonormal_rows(&layout, d);
    let mut means = Vec::with_capacity(cfg.tasks);
    for _ in 0..cfg.tasks {
        let rotated = rotate_in_span(&layout, &basis, d, &mut rng);
        let m: Vec<f32> = layout
            .iter()
            .zip(&rotated)
            .map(|(&b, &r)| (s * b + (1.0 - s) * r) as f32)
            .collect();
        means.push(m);
    }

    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid normal");
    let sample = |means: &[f32], n: usize, task: usize, rng: &mut ChaCha8Rng| {
        let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        labels.shuffle(rng);
        let mut ds = Dataset::new(d);
        let mut x = vec![0.0f32; d];
        for y in labels {
            for (i, xi) in x.iter_mut().enumerate() {
                *xi = means[y * d + i] + noise.sample(rng) as f32;
            }
            ds.push(&x, y, task);
        }
        ds
    };

    let (n_train, n_val, _) = split_sizes(cfg.n_per_task);
    let mut tasks = Vec::with_capacity(cfg.tasks);
    for (t, m) in means.iter().enumerate() {
        let all = sample(m, cfg.n_per_task, t, &mut rng);
        tasks.push(TaskData {
            train: all.slice(0..n_train),
            validation: all.slice(n_train..n_train + n_val),
            test: all.slice(n_train + n_val..cfg.n_per_task),
        });
    }
    let layout32: Vec<f32> = layout.iter().map(|&v| v as f32).collect();
    let pretrain = sample(&layout32, cfg.n_per_task, usize::MAX, &mut rng);

    Ok(TaskSuite {
        config: cfg.clone(),
        tasks,
        alphas: vec![1.0 / cfg.tasks as f64; cfg.tasks],
        means,
        pretrain,
    })
}

impl TaskSuite {
    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    /// Keep only the first `n` tasks (alphas renormalized).
    pub fn first_tasks(&self, n: usize) -> TaskSuite {
        let mut out = self.clone();
        out.tasks.truncate(n);
        out.means.truncate(n);
        out.config.tasks = out.tasks.len();
        out.alphas = vec![1.0 / out.tasks.len() as f64; out.tasks.len()];
        out
    }

    pub fn set_alphas(&mut self, alphas: Vec<f64>) -> Result<()> {
        if alphas.len() != self.tasks.len() || alphas.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Argument("alphas must be positive, one per task".into()));
        }
        let sum: f64 = alphas.iter().sum();
        self.alphas = alphas.iter().map(|a| a / sum).collect();
        Ok(())
    }

    /// Test mixture D = Σ αₜ Dₜ: task `t` contributes
    /// `round(αₜ / max α · |testₜ|)` items, in task order.
    pub fn mixture_test(&self) -> Dataset {
        let max_alpha = self.alphas.iter().cloned().fold(0.0, f64::max);
        let parts: Vec<Dataset> = self
            .tasks
            .iter()
            .zip(&self.alphas)
            .map(|(t, &a)| {
                let n = ((a / max_alpha) * t.test.len() as f64).round() as usize;
                t.test.slice(0..n.clamp(1, t.test.len()))
            })
            .collect();
        Dataset::concat(&parts)
    }

    pub fn validation_mixture(&self) -> Dataset {
        Dataset::concat(self.tasks.iter().map(|t| &t.validation))
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut tensors = BTreeMap::new();
        let mut put = |prefix: &str, ds: &Dataset| -> Result<()> {
            if ds.is_empty() {
                return Ok(());
            }
            tensors.insert(format!("{prefix}.x"), Tensor::matrix(ds.len(), ds.dim, ds.x.clone())?);
            tensors.insert(
                format!("{prefix}.y"),
                Tensor::vector(ds.y.iter().map(|&y| y as f32).collect()),
            );
            Ok(())
        };
        for (t, data) in self.tasks.iter().enumerate() {
            let all = Dataset::concat([&data.train, &data.validation, &data.test]);
            put(&format!("task{t}"), &all)?;
        }
        put("pretrain", &self.pretrain)?;
        for (t, m) in self.means.iter().enumerate() {
            tensors.insert(
                format!("task{t}.means"),
                Tensor::matrix(self.config.classes, self.config.dim, m.clone())?,
            );
        }
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "suite".into());
        meta.insert("seed".into(), self.config.seed.to_string());
        meta.insert(
            "alphas".into(),
            serde_json::to_string(&self.alphas).expect("serializable"),
        );
        meta.insert(
            "config".into(),
            serde_json::to_string(&self.config).expect("serializable"),
        );
        let first = &self.tasks[0];
        meta.insert(
            "splits".into(),
            format!("{},{},{}", first.train.len(), first.validation.len(), first.test.len()),
        );
        Ok(Container { tensors, meta })
    }

    pub fn from_container(c: &Container) -> Result<TaskSuite> {
        let meta = |k: &str| {
            c.meta
                .get(k)
                .ok_or_else(|| Error::Format(format!("suite metadata missing {k:?}")))
        };
        if meta("kind")? != "suite" {
            return Err(Error::Format("container is not a task suite".into()));
        }
        let config: SuiteConfig = serde_json::from_str(meta("config")?)
            .map_err(|e| Error::Format(format!("suite config: {e}")))?;
        let alphas: Vec<f64> = serde_json::from_str(meta("alphas")?)
            .map_err(|e| Error::Format(format!("suite alphas: {e}")))?;
        let splits: Vec<usize> = meta("splits")?
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Format("bad splits metadata".into())))
            .collect::<Result<_>>()?;
        let [n_train, n_val, n_test] = splits[..] else {
            return Err(Error::Format("splits must have three entries".into()));
        };
        let read = |prefix: &str, task: usize| -> Result<Dataset> {
            let x = c
                .tensors
                .get(&format!("{prefix}.x"))
                .ok_or_else(|| Error::Format(format!("missing {prefix}.x")))?;
            let y = c
                .tensors
                .get(&format!("{prefix}.y"))
                .ok_or_else(|| Error::Format(format!("missing {prefix}.y")))?;
            let (n, dim) = x.dims2()?;
            if y.len() != n {
                return Err(Error::Format(format!("{prefix}: label count mismatch")));
            }
            Ok(Dataset {
                dim,
                x: x.data().to_vec(),
                y: y.data().iter().map(|&v| v as usize).collect(),
                task: vec![task; n],
            })
        };
        let mut tasks = Vec::new();
        let mut means = Vec::new();
        for t in 0..config.tasks {
            let all = read(&format!("task{t}"), t)?;
            if all.len() != n_train + n_val + n_test {
                return Err(Error::Format(format!("task{t} size disagrees with splits")));
            }
            tasks.push(TaskData {
                train: all.slice(0..n_train),
                validation: all.slice(n_train..n_train + n_val),
                test: all.slice(n_train + n_val..all.len()),
            });
            let m = c
                .tensors
                .get(&format!("task{t}.means"))
                .ok_or_else(|| Error::Format(format!("missing task{t}.means")))?;
            means.push(m.data().to_vec());
        }
        let pretrain = read("pretrain", usize::MAX)?;
        Ok(TaskSuite {
            config,
            tasks,
            alphas,
            means,
            pretrain,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write(&self.to_container()?, path)
    }

    pub fn load(path: &Path) -> Result<TaskSuite> {
        TaskSuite::from_container(&container::read(path)?)
    }
}
