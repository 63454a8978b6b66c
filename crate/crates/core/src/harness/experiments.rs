//! Controlled experiments. Each returns CSV rows
//! (`experiment,knob,seed,method,task,score`) with a summary row per
//! (knob, method) cell carrying the normalized score.

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::harness::inference::{run_inference, InferenceMode, InferenceOptions};
use crate::harness::metrics::normalized_score;
use crate::harness::pipeline::{build_twin, recompress, sub_seed, Compression, ExpertSettings, Split, TwinSystem, Zoo};
use crate::harness::report::{rows_for, CsvRow};
use crate::merge::{self, DEFAULT_DARE_RATE};
use crate::router::RouterConfig;
use crate::toyzoo::{gen_suite, AdapterConfig, SuiteConfig, ToyModel, TrainConfig};

/// Run independent cells on a pool of `jobs` threads, keeping input order.
/// Every cell is seeded on its own, so results do not depend on `jobs`.
pub fn run_cells<C, T, F>(jobs: usize, cells: Vec<C>, f: F) -> Result<Vec<T>>
where
    C: Send,
    T: Send,
    F: Fn(C) -> Result<T> + Sync + Send,
{
    if jobs <= 1 {
        return cells.into_iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| cells.into_par_iter().map(f).collect())
}

/// Scores of one method on one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodScore {
    pub method: String,
    pub per_task: Vec<f64>,
    pub normalized: f64,
}

fn static_score(zoo: &Zoo, method: &str, c: &Checkpoint) -> Result<MethodScore> {
    let per_task = zoo.task_scores(c, Split::Test)?;
    Ok(MethodScore {
        method: method.into(),
        normalized: normalized_score(&per_task, &zoo.ft_test)?,
        per_task,
    })
}

fn twin_score(zoo: &Zoo, sys: &TwinSystem, method: &str, opts: &InferenceOptions) -> Result<MethodScore> {
    let r = run_inference(sys, &zoo.suite.mixture_test(), &zoo.ft_test, opts)?;
    Ok(MethodScore {
        method: method.into(),
        per_task: r.per_task_scores,
        normalized: r.normalized_score,
    })
}

/// Weight average, task arithmetic, TIES (each with and without DARE), and
/// twin merging with a full-rank twin and trained router.
pub fn compare_methods(zoo: &Zoo, router_cfg: &RouterConfig, ties_density: f64) -> Result<Vec<MethodScore>> {
    let mut out = vec![
        static_score(zoo, "weight_average", &zoo.weight_average()?)?,
        static_score(zoo, "task_arithmetic", &zoo.searched_task_arithmetic()?.1)?,
        static_score(zoo, "ties", &zoo.searched_ties(ties_density)?.1)?,
    ];
    let dared = Zoo {
        checkpoints: merge::dare_experts(&zoo.base.params, &zoo.checkpoints, DEFAULT_DARE_RATE, sub_seed(zoo.seed, 300))?,
        ..zoo.clone()
    };
    out.push(static_score(zoo, "task_arithmetic+dare", &dared.searched_task_arithmetic()?.1)?);
    out.push(static_score(zoo, "ties+dare", &dared.searched_ties(ties_density)?.1)?);
    let sys = build_twin(zoo, None, Compression::Rank(usize::MAX), router_cfg)?;
    out.push(twin_score(zoo, &sys, "twin", &InferenceOptions::default())?);
    Ok(out)
}

fn rows_from(experiment: &str, knob: &str, seed: u64, scores: &[MethodScore]) -> Vec<CsvRow> {
    scores
        .iter()
        .flat_map(|s| rows_for(experiment, knob, seed, &s.method, &s.per_task, s.normalized))
        .collect()
}

pub fn compare_methods_rows(zoo: &Zoo, router_cfg: &RouterConfig, ties_density: f64) -> Result<Vec<CsvRow>> {
    Ok(rows_from("compare", "default", zoo.seed, &compare_methods(zoo, router_cfg, ties_density)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsityMethod {
    Svd,
    Magnitude,
    Bernoulli,
}

impl SparsityMethod {
    pub const ALL: [SparsityMethod; 3] = [SparsityMethod::Svd, SparsityMethod::Magnitude, SparsityMethod::Bernoulli];

    pub fn name(self) -> &'static str {
        match self {
            SparsityMethod::Svd => "svd",
            SparsityMethod::Magnitude => "magnitude",
            SparsityMethod::Bernoulli => "bernoulli",
        }
    }

    pub fn at(self, rate: f64) -> Compression {
        match self {
            SparsityMethod::Svd => Compression::SvdSparsity(rate),
            SparsityMethod::Magnitude => Compression::Magnitude(rate),
            SparsityMethod::Bernoulli => Compression::Bernoulli(rate),
        }
    }
}

/// Twin score per compression method and sparsity rate, reusing the shared
/// expert and router of `sys`. Rate 0 reproduces `sys` itself.
pub fn sweep_sparsity(zoo: &Zoo, sys: &TwinSystem, methods: &[SparsityMethod], rates: &[f64]) -> Result<Vec<CsvRow>> {
    if let Some(r) = rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Error::Config(format!("sparsity rate {r} outside [0, 1)")));
    }
    let mut rows = Vec::new();
    for &rate in rates {
        for &m in methods {
            let s = if rate == 0.0 {
                sys.clone()
            } else {
                recompress(zoo, sys, m.at(rate))?
            };
            let score = twin_score(zoo, &s, m.name(), &InferenceOptions::default())?;
            rows.extend(rows_from("sparsity", &rate.to_string(), zoo.seed, &[score]));
        }
    }
    Ok(rows)
}

/// Merge scores as the number of merged tasks grows. The suite is generated
/// once with the largest task count and truncated.
pub fn sweep_tasks(zoo: &Zoo, task_counts: &[usize], router_cfg: &RouterConfig) -> Result<Vec<CsvRow>> {
    let mut rows = Vec::new();
    for &t in task_counts {
        if t == 0 || t > zoo.tasks() {
            return Err(Error::Config(format!("task count {t} outside 1..={}", zoo.tasks())));
        }
        let sub = zoo.first_tasks(t);
        let sys = build_twin(&sub, None, Compression::Rank(usize::MAX), router_cfg)?;
        let scores = [
            static_score(&sub, "weight_average", &sub.weight_average()?)?,
            static_score(&sub, "task_arithmetic", &sub.searched_task_arithmetic()?.1)?,
            twin_score(&sub, &sys, "twin", &InferenceOptions::default())?,
        ];
        rows.extend(rows_from("tasks", &t.to_string(), zoo.seed, &scores));
    }
    Ok(rows)
}

/// Task-arithmetic score and expert own-task scores as expert training
/// length grows, on one suite and one pretrained base.
pub fn sweep_epochs(suite_cfg: &SuiteConfig, settings: &ExpertSettings, epochs: &[usize], jobs: usize) -> Result<Vec<CsvRow>> {
    let suite = gen_suite(suite_cfg)?;
    let base = crate::harness::pipeline::pretrain_base(&suite, settings, suite_cfg.seed)?;
    let cells: Vec<usize> = epochs.to_vec();
    let per_cell = run_cells(jobs, cells, |e| {
        let s = ExpertSettings {
            epochs: e,
            ..settings.clone()
        };
        let experts = crate::harness::pipeline::train_experts(&suite, &base, &s, suite_cfg.seed)?;
        let zoo = Zoo::from_parts(suite.clone(), base.clone(), experts, suite_cfg.seed)?;
        let ta = static_score(&zoo, "task_arithmetic", &zoo.searched_task_arithmetic()?.1)?;
        let mut rows = rows_from("epochs", &e.to_string(), suite_cfg.seed, &[ta]);
        let mean_ft = zoo.ft_test.iter().sum::<f64>() / zoo.tasks() as f64;
        rows.extend(rows_for("epochs", &e.to_string(), suite_cfg.seed, "expert", &zoo.ft_test, 100.0 * mean_ft));
        Ok(rows)
    })?;
    Ok(per_cell.into_iter().flatten().collect())
}

/// Compress each expert's own task vector (against the base) and score the
/// result on that task only, normalized by the uncompressed expert.
pub fn sweep_single_task_sparsity(zoo: &Zoo, methods: &[SparsityMethod], rates: &[f64]) -> Result<Vec<CsvRow>> {
    let mut rows = Vec::new();
    for &rate in rates {
        for &m in methods {
            let mut per_task = Vec::with_capacity(zoo.tasks());
            for t in 0..zoo.tasks() {
                let delta = zoo.checkpoints[t].diff(&zoo.base.params)?;
                let kept = if rate == 0.0 {
                    delta
                } else {
                    crate::compress::decompress(&m.at(rate).apply(&delta, sub_seed(zoo.seed, 800 + t as u64))?)
                };
                let model = ToyModel::from_checkpoint(zoo.base.params.add_delta(&kept)?)?;
                per_task.push(model.score(&zoo.suite.tasks[t].test)?);
            }
            let norm = normalized_score(&per_task, &zoo.ft_test)?;
            rows.extend(rows_for("single_task_sparsity", &rate.to_string(), zoo.seed, m.name(), &per_task, norm));
        }
    }
    Ok(rows)
}

/// Grid over `(γ₁, γ₂)` in `[lo, hi]` with the given step for the first two
/// experts: `base + γ₁·δ₁ + γ₂·δ₂`, scored on those two tasks.
pub fn coeff_grid(zoo: &Zoo, lo: f64, hi: f64, step: f64) -> Result<Vec<CsvRow>> {
    if zoo.tasks() < 2 {
        return Err(Error::Config("coefficient grid needs two experts".into()));
    }
    if !(step > 0.0) || !(lo <= hi) {
        return Err(Error::Config(format!("bad grid [{lo}, {hi}] step {step}")));
    }
    let sub = zoo.first_tasks(2);
    let deltas = [
        sub.checkpoints[0].diff(&sub.base.params)?,
        sub.checkpoints[1].diff(&sub.base.params)?,
    ];
    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    // Snap to the step lattice so 0 is exactly representable when in range.
    let values: Vec<f64> = (0..n).map(|i| ((lo + i as f64 * step) / step).round() * step).collect();
    let mut rows = Vec::new();
    for &g1 in &values {
        for &g2 in &values {
            let c = sub.base.params.axpy(&[&deltas[0], &deltas[1]], &[g1, g2])?;
            let s = static_score(&sub, "task_arithmetic", &c)?;
            rows.extend(rows_from("coeff_grid", &format!("{g1}:{g2}"), zoo.seed, &[s]));
        }
    }
    Ok(rows)
}

/// Outcome of merging two adapter experts.
#[derive(Debug, Clone, PartialEq)]
pub struct NonOverlap {
    /// Own-task accuracy of each adapter expert.
    pub expert_scores: [f64; 2],
    /// Per-task accuracy of the merged model.
    pub merged_scores: [f64; 2],
    pub layers: [Vec<usize>; 2],
}

impl NonOverlap {
    pub fn expert_mean(&self) -> f64 {
        (self.expert_scores[0] + self.expert_scores[1]) / 2.0
    }

    pub fn merged_mean(&self) -> f64 {
        (self.merged_scores[0] + self.merged_scores[1]) / 2.0
    }
}

/// Train adapter experts for the first two tasks on the given layer sets
/// and merge them by adding both adapter deltas to the base.
pub fn adapter_merge(zoo: &Zoo, settings: &ExpertSettings, rank: usize, layers: [Vec<usize>; 2]) -> Result<NonOverlap> {
    let mut expert_scores = [0.0; 2];
    let mut deltas = Vec::with_capacity(2);
    for t in 0..2 {
        let mut cfg = TrainConfig::new(settings.epochs, settings.lr, sub_seed(zoo.seed, 1000 + t as u64));
        cfg.adapter = Some(AdapterConfig {
            rank,
            layers: layers[t].clone(),
        });
        let expert = zoo.base.train(&zoo.suite.tasks[t].train, &cfg)?;
        let folded = ToyModel::from_checkpoint(expert.merge_adapter()?)?;
        expert_scores[t] = folded.score(&zoo.suite.tasks[t].test)?;
        deltas.push(folded.params.diff(&zoo.base.params)?);
    }
    let merged = ToyModel::from_checkpoint(zoo.base.params.axpy(&[&deltas[0], &deltas[1]], &[1.0, 1.0])?)?;
    let merged_scores = [
        merged.score(&zoo.suite.tasks[0].test)?,
        merged.score(&zoo.suite.tasks[1].test)?,
    ];
    Ok(NonOverlap {
        expert_scores,
        merged_scores,
        layers,
    })
}

/// Adapters on disjoint layers (task 0 on the first layer, task 1 on the
/// last) versus adapters on every layer for both tasks.
pub fn nonoverlap_experiment(zoo: &Zoo, settings: &ExpertSettings, rank: usize) -> Result<(NonOverlap, NonOverlap)> {
    if zoo.tasks() < 2 {
        return Err(Error::Config("non-overlap experiment needs two tasks".into()));
    }
    let disjoint = adapter_merge(zoo, settings, rank, [vec![0], vec![2]])?;
    let overlapping = adapter_merge(zoo, settings, rank, [vec![0, 1, 2], vec![0, 1, 2]])?;
    Ok((disjoint, overlapping))
}

pub fn nonoverlap_rows(zoo: &Zoo, settings: &ExpertSettings, rank: usize) -> Result<Vec<CsvRow>> {
    let (disjoint, overlapping) = nonoverlap_experiment(zoo, settings, rank)?;
    let mut rows = Vec::new();
    for (knob, r) in [("disjoint", &disjoint), ("overlapping", &overlapping)] {
        let norm = normalized_score(&r.merged_scores, &r.expert_scores)?;
        rows.extend(rows_for("nonoverlap", knob, zoo.seed, "merged", &r.merged_scores, norm));
        rows.extend(rows_for("nonoverlap", knob, zoo.seed, "expert", &r.expert_scores, 100.0));
    }
    Ok(rows)
}

/// Per-sample versus grouped inference on the same twin system.
pub fn grouped_gap(zoo: &Zoo, sys: &TwinSystem, group_count: usize) -> Result<Vec<CsvRow>> {
    let mut scores = Vec::new();
    for (name, mode) in [("per-sample", InferenceMode::PerSample), ("grouped", InferenceMode::Grouped)] {
        let opts = InferenceOptions {
            mode,
            group_count,
            seed: zoo.seed,
        };
        scores.push(twin_score(zoo, sys, name, &opts)?);
    }
    Ok(rows_from("grouped", &group_count.to_string(), zoo.seed, &scores))
}
