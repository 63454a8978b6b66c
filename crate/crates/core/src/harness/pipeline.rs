//! Builds the toy world every experiment runs on: a suite, a pretrained base,
//! fine-tuned experts, their reference scores, and the twin-merging system.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Delta};
use crate::compress::{self, TwinVector};
use crate::error::{Error, Result};
use crate::harness::metrics::normalized_score;
use crate::merge::{self, TwinPrep};
use crate::router::{self, Router, RouterConfig};
use crate::toyzoo::{gen_suite, AdapterConfig, Dataset, SuiteConfig, TaskSuite, ToyModel, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSettings {
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "d_pretrain_lr")]
    pub pretrain_lr: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default)]
    pub adapter: Option<AdapterConfig>,
}

fn d_hidden() -> usize {
    64
}
fn d_pretrain_epochs() -> usize {
    10
}
fn d_epochs() -> usize {
    30
}
fn d_pretrain_lr() -> f64 {
    0.05
}
fn d_lr() -> f64 {
    0.2
}

impl Default for ExpertSettings {
    fn default() -> Self {
        Self {
            hidden: d_hidden(),
            pretrain_epochs: d_pretrain_epochs(),
            pretrain_lr: d_pretrain_lr(),
            epochs: d_epochs(),
            lr: d_lr(),
            adapter: None,
        }
    }
}

/// Derive an independent seed for a named sub-step.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Validation,
    Test,
}

/// A suite, its pretrained base, and one fine-tuned expert per task.
#[derive(Debug, Clone)]
pub struct Zoo {
    pub suite: TaskSuite,
    pub base: ToyModel,
    /// Experts as trained (possibly carrying adapters).
    pub experts: Vec<ToyModel>,
    /// Dense expert checkpoints (adapters folded in).
    pub checkpoints: Vec<Checkpoint>,
    /// Own-task test accuracy of every expert.
    pub ft_test: Vec<f64>,
    /// Own-task validation accuracy of every expert.
    pub ft_val: Vec<f64>,
    pub seed: u64,
}

pub fn pretrain_base(suite: &TaskSuite, settings: &ExpertSettings, seed: u64) -> Result<ToyModel> {
    let cfg = &suite.config;
    let init = ToyModel::init(cfg.dim, settings.hidden, cfg.classes, sub_seed(seed, 1));
    init.train(
        &suite.pretrain,
        &TrainConfig::new(settings.pretrain_epochs, settings.pretrain_lr, sub_seed(seed, 2)),
    )
}

pub fn train_experts(suite: &TaskSuite, base: &ToyModel, settings: &ExpertSettings, seed: u64) -> Result<Vec<ToyModel>> {
    suite
        .tasks
        .iter()
        .enumerate()
        .map(|(t, data)| {
            let mut cfg = TrainConfig::new(settings.epochs, settings.lr, sub_seed(seed, 100 + t as u64));
            cfg.adapter = settings.adapter.clone();
            base.train(&data.train, &cfg)
        })
        .collect()
}

impl Zoo {
    pub fn build(suite_cfg: &SuiteConfig, settings: &ExpertSettings) -> Result<Zoo> {
        let suite = gen_suite(suite_cfg)?;
        Zoo::from_suite(suite, settings)
    }

    pub fn from_suite(suite: TaskSuite, settings: &ExpertSettings) -> Result<Zoo> {
        let seed = suite.config.seed;
        let base = pretrain_base(&suite, settings, seed)?;
        let experts = train_experts(&suite, &base, settings, seed)?;
        Zoo::from_parts(suite, base, experts, seed)
    }

    pub fn from_parts(suite: TaskSuite, base: ToyModel, experts: Vec<ToyModel>, seed: u64) -> Result<Zoo> {
        let checkpoints = experts
            .iter()
            .map(|e| if e.adapters.is_empty() { Ok(e.params.clone()) } else { e.merge_adapter() })
            .collect::<Result<Vec<_>>>()?;
        let mut zoo = Zoo {
            suite,
            base,
            experts,
            checkpoints,
            ft_test: Vec::new(),
            ft_val: Vec::new(),
            seed,
        };
        for t in 0..zoo.tasks() {
            let m = ToyModel::from_checkpoint(zoo.checkpoints[t].clone())?;
            zoo.ft_test.push(m.score(&zoo.suite.tasks[t].test)?);
            zoo.ft_val.push(m.score(&zoo.suite.tasks[t].validation)?);
        }
        Ok(zoo)
    }

    /// Restrict to the first `n` tasks.
    pub fn first_tasks(&self, n: usize) -> Zoo {
        Zoo {
            suite: self.suite.first_tasks(n),
            base: self.base.clone(),
            experts: self.experts[..n].to_vec(),
            checkpoints: self.checkpoints[..n].to_vec(),
            ft_test: self.ft_test[..n].to_vec(),
            ft_val: self.ft_val[..n].to_vec(),
            seed: self.seed,
        }
    }

    pub fn tasks(&self) -> usize {
        self.checkpoints.len()
    }

    fn split(&self, t: usize, split: Split) -> &Dataset {
        match split {
            Split::Validation => &self.suite.tasks[t].validation,
            Split::Test => &self.suite.tasks[t].test,
        }
    }

    fn references(&self, split: Split) -> &[f64] {
        match split {
            Split::Validation => &self.ft_val,
            Split::Test => &self.ft_test,
        }
    }

    /// Accuracy of a static checkpoint on each task.
    pub fn task_scores(&self, c: &Checkpoint, split: Split) -> Result<Vec<f64>> {
        let m = ToyModel::from_checkpoint(c.clone())?;
        (0..self.tasks()).map(|t| m.score(self.split(t, split))).collect()
    }

    pub fn normalized(&self, c: &Checkpoint, split: Split) -> Result<f64> {
        normalized_score(&self.task_scores(c, split)?, self.references(split))
    }

    pub fn weight_average(&self) -> Result<Checkpoint> {
        merge::weight_average(&self.checkpoints)
    }

    pub fn task_arithmetic(&self, gamma: f64) -> Result<Checkpoint> {
        merge::task_arithmetic(&self.base.params, &self.checkpoints, &vec![gamma; self.tasks()])
    }

    /// Pick the best shared coefficient from the grid by validation score
    /// (ties keep the smaller coefficient).
    pub fn search_gamma(&self, build: impl Fn(f64) -> Result<Checkpoint>) -> Result<(f64, Checkpoint)> {
        let mut best: Option<(f64, f64, Checkpoint)> = None;
        for g in merge::gamma_grid() {
            let c = build(g)?;
            let s = self.normalized(&c, Split::Validation)?;
            if best.as_ref().is_none_or(|(bs, _, _)| s > *bs) {
                best = Some((s, g, c));
            }
        }
        let (_, g, c) = best.expect("grid is non-empty");
        Ok((g, c))
    }

    pub fn searched_task_arithmetic(&self) -> Result<(f64, Checkpoint)> {
        self.search_gamma(|g| self.task_arithmetic(g))
    }

    pub fn searched_ties(&self, density: f64) -> Result<(f64, Checkpoint)> {
        self.search_gamma(|l| merge::ties_merge(&self.base.params, &self.checkpoints, density, l))
    }

    pub fn router_data(&self, shared: &ToyModel) -> Result<Vec<(Vec<f32>, usize)>> {
        let mut out = Vec::new();
        for (t, task) in self.suite.tasks.iter().enumerate() {
            let v = &task.validation;
            let n = v.len().min(router::MAX_ITEMS_PER_TASK);
            for i in 0..n {
                out.push((router::embed(shared, v.row(i))?, t));
            }
        }
        Ok(out)
    }
}

/// Shared expert, exclusive vectors (compressed and cached dense), and the
/// trained router.
#[derive(Debug, Clone)]
pub struct TwinSystem {
    pub shared: Checkpoint,
    pub shared_model: ToyModel,
    pub twins: Vec<TwinVector>,
    /// Decompressed twins, built once.
    pub dense: Vec<Delta>,
    /// `None` for a single task, where routing is trivial.
    pub router: Option<Router>,
    pub gamma: f64,
}

impl TwinSystem {
    pub fn tasks(&self) -> usize {
        self.twins.len()
    }

    pub fn from_prep(prep: TwinPrep, router: Option<Router>, gamma: f64) -> Result<TwinSystem> {
        let dense = prep.twins.iter().map(compress::decompress).collect();
        Ok(TwinSystem {
            shared_model: ToyModel::from_checkpoint(prep.shared.clone())?,
            shared: prep.shared,
            twins: prep.twins,
            dense,
            router,
            gamma,
        })
    }

    /// Same shared expert and router with differently compressed twins.
    pub fn with_twins(&self, twins: Vec<TwinVector>) -> TwinSystem {
        TwinSystem {
            dense: twins.iter().map(compress::decompress).collect(),
            twins,
            ..self.clone()
        }
    }

    pub fn storage_params(&self) -> usize {
        self.twins.iter().map(TwinVector::param_count).sum()
    }
}

/// How exclusive knowledge is compressed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Compression {
    /// Rank-r SVD (clamped per tensor).
    Rank(usize),
    /// SVD with rank chosen from a parameter-count sparsity.
    SvdSparsity(f64),
    /// Keep the top `1 − sparsity` magnitudes of each matrix.
    Magnitude(f64),
    /// DARE at drop rate `sparsity` on each matrix.
    Bernoulli(f64),
}

impl Compression {
    pub fn apply(&self, d: &Delta, seed: u64) -> Result<TwinVector> {
        match *self {
            Compression::Rank(r) => compress::svd_compress(d, r),
            Compression::SvdSparsity(s) => compress::svd_compress_sparsity(d, s),
            Compression::Magnitude(s) => compress::magnitude_compress(d, s),
            Compression::Bernoulli(s) => compress::bernoulli_compress(d, s, seed),
        }
    }
}

/// Build the twin system: shared expert from task arithmetic (searched
/// coefficient unless `gamma` is given), compressed twins, and a router
/// trained on validation embeddings from the shared expert.
pub fn build_twin(zoo: &Zoo, gamma: Option<f64>, compression: Compression, router_cfg: &RouterConfig) -> Result<TwinSystem> {
    let (gamma, shared) = match gamma {
        Some(g) => (g, zoo.task_arithmetic(g)?),
        None => zoo.searched_task_arithmetic()?,
    };
    let mut stream = 0u64;
    let prep = merge::twins_from_shared(shared, &zoo.checkpoints, |d| {
        stream += 1;
        compression.apply(d, sub_seed(zoo.seed, 500 + stream))
    })?;
    let shared_model = ToyModel::from_checkpoint(prep.shared.clone())?;
    let router = if zoo.tasks() >= 2 {
        let data = zoo.router_data(&shared_model)?;
        let mut cfg = router_cfg.clone();
        cfg.seed = sub_seed(zoo.seed ^ router_cfg.seed, 900);
        Some(router::train_router(&data, zoo.tasks(), &cfg)?.router)
    } else {
        None
    };
    TwinSystem::from_prep(prep, router, gamma)
}

/// Recompress an existing system's twins from the exact residuals.
pub fn recompress(zoo: &Zoo, sys: &TwinSystem, compression: Compression) -> Result<TwinSystem> {
    if zoo.tasks() != sys.tasks() {
        return Err(Error::Config("task count mismatch between zoo and twin system".into()));
    }
    let twins = zoo
        .checkpoints
        .iter()
        .enumerate()
        .map(|(t, e)| compression.apply(&e.diff(&sys.shared)?, sub_seed(zoo.seed, 700 + t as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(sys.with_twins(twins))
}
