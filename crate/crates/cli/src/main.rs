//! `twinforge`: generate a toy suite, train experts, merge them, and evaluate
//! routed twin merging from the command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use twinforge_core::compress::svd_compress;
use twinforge_core::harness::experiments::{self, SparsityMethod};
use twinforge_core::harness::inference::mode_name;
use twinforge_core::harness::pipeline::{self, sub_seed};
use twinforge_core::harness::report::{rows_for, write_csv, write_json, CsvRow};
use twinforge_core::harness::{
    build_twin, infer, run_inference, storage_report, Compression, InferenceMode, InferenceOptions, RunConfig,
    StorageAccount, TwinSystem, Zoo,
};
use twinforge_core::merge::{self, TwinPrep};
use twinforge_core::router::train_router;
use twinforge_core::toyzoo::{gen_suite, SuiteConfig, TaskSuite, ToyModel};
use twinforge_core::{selftest, Checkpoint, Error, MergeMethod, Result, Router, TwinVector};

const SUITE_FILE: &str = "suite.safetensors";
const BASE_FILE: &str = "base.safetensors";
const SHARED_FILE: &str = "shared.safetensors";
const ROUTER_FILE: &str = "router.safetensors";
const CONFIG_ECHO: &str = "config.json";

const SPARSITY_RATES: [f64; 5] = [0.0, 0.5, 0.9, 0.95, 0.99];
const EPOCHS: [usize; 5] = [5, 10, 20, 40, 80];
const COEFF_RANGE: (f64, f64, f64) = (-2.0, 2.0, 0.5);
const ADAPTER_RANK: usize = 4;

#[derive(Parser, Debug)]
#[command(name = "twinforge", version, about = "Merge fine-tuned experts into a shared model plus routed exclusive twins")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(clap::Args, Debug)]
struct Flags {
    /// JSON run configuration; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Merge method: average, task-arithmetic, ties or twin.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Twin rank (clamped per tensor).
    #[arg(long, global = true)]
    rank: Option<usize>,
    /// TIES density.
    #[arg(long, global = true)]
    density: Option<f64>,
    /// DARE drop rate applied before a static merge.
    #[arg(long, global = true)]
    drop_rate: Option<f64>,
    /// Coefficient for every task (TIES: the scale λ).
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    group_count: Option<usize>,
    /// Inference mode: per-sample, grouped or oracle.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Worker threads for independent seeds and sweep cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic task suite.
    GenSuite,
    /// Pretrain the base model and fine-tune one expert per task.
    TrainExperts,
    /// Static merge (average, task arithmetic, TIES; optional DARE).
    Merge,
    /// Build the shared expert and compressed twin vectors.
    TwinPrep,
    /// Train the router on shared-expert embeddings of validation data.
    TrainRouter,
    /// Write routed predictions for the test mixture.
    Infer,
    /// Score routed twin merging on the test mixture.
    Eval,
    /// Run a controlled experiment over every seed.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
    },
    /// Storage accounting for the configured model and twin rank.
    Storage,
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SweepKind {
    Methods,
    Sparsity,
    Tasks,
    Epochs,
    SingleTaskSparsity,
    CoeffGrid,
    Nonoverlap,
    Grouped,
}

impl SweepKind {
    fn name(self) -> String {
        self.to_possible_value().expect("no skipped variants").get_name().to_string()
    }
}

struct Ctx {
    cfg: RunConfig,
    run_dir: PathBuf,
    jobs: usize,
}

impl Ctx {
    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.run_dir.join(format!("seed-{seed}"))
    }

    fn suite_config(&self, seed: u64) -> SuiteConfig {
        self.cfg.suite.clone().with_seed(seed)
    }

    fn inference(&self, seed: u64) -> InferenceOptions {
        InferenceOptions {
            mode: self.cfg.eval.mode,
            group_count: self.cfg.eval.group_count,
            seed,
        }
    }

    /// Run `f` for every seed, in seed order.
    fn per_seed<T: Send>(&self, f: impl Fn(u64) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
        experiments::run_cells(self.jobs, self.cfg.seeds.clone(), f)
    }
}

fn apply_flags(cfg: &mut RunConfig, f: &Flags) -> Result<()> {
    if let Some(m) = &f.method {
        cfg.merge.method = m.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    }
    if let Some(r) = f.rank {
        cfg.merge.twin_rank = r;
    }
    if let Some(d) = f.density {
        cfg.merge.ties_density = d;
    }
    if let Some(p) = f.drop_rate {
        cfg.merge.dare_drop_rate = Some(p);
    }
    if let Some(g) = f.gamma {
        match cfg.merge.method {
            MergeMethod::Ties => cfg.merge.ties_lambda = g,
            _ => cfg.merge.gammas = vec![g; cfg.suite.tasks],
        }
    }
    if let Some(s) = f.seed {
        cfg.seeds = vec![s];
    }
    if let Some(g) = f.group_count {
        cfg.eval.group_count = g;
    }
    if let Some(m) = &f.mode {
        cfg.eval.mode = m.parse()?;
    }
    if f.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    cfg.validate()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))
}

/// Attach the missing path to load errors so the message says which artifact
/// an earlier command should have produced.
fn missing<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("cannot read {}: {io}", path.display())),
        other => other,
    })
}

fn expert_file(t: usize) -> String {
    format!("expert-{t}.safetensors")
}

fn twin_file(t: usize) -> String {
    format!("twin-{t}.safetensors")
}

fn load_suite(ctx: &Ctx, dir: &Path) -> Result<TaskSuite> {
    let path = dir.join(SUITE_FILE);
    let mut suite = missing(&path, TaskSuite::load(&path))?;
    if !ctx.cfg.eval.alphas.is_empty() {
        suite.set_alphas(ctx.cfg.eval.alphas.clone())?;
    }
    Ok(suite)
}

fn load_model(path: &Path) -> Result<ToyModel> {
    ToyModel::from_checkpoint(missing(path, Checkpoint::load(path))?)
}

fn load_zoo(ctx: &Ctx, dir: &Path) -> Result<Zoo> {
    let suite = load_suite(ctx, dir)?;
    let base = load_model(&dir.join(BASE_FILE))?;
    let experts = (0..suite.task_count())
        .map(|t| load_model(&dir.join(expert_file(t))))
        .collect::<Result<Vec<_>>>()?;
    let seed = suite.config.seed;
    Zoo::from_parts(suite, base, experts, seed)
}

fn load_system(dir: &Path, tasks: usize) -> Result<TwinSystem> {
    let path = dir.join(SHARED_FILE);
    let shared = missing(&path, Checkpoint::load(&path))?;
    let gamma = shared.meta().get("gamma").and_then(|g| g.parse().ok()).unwrap_or(f64::NAN);
    let twins = (0..tasks)
        .map(|t| {
            let p = dir.join(twin_file(t));
            missing(&p, TwinVector::load(&p))
        })
        .collect::<Result<Vec<_>>>()?;
    let path = dir.join(ROUTER_FILE);
    let router = missing(&path, Router::load(&path))?;
    TwinSystem::from_prep(TwinPrep { shared, twins }, Some(router), gamma)
}

fn gen_suite_cmd(ctx: &Ctx) -> Result<()> {
    ctx.per_seed(|seed| {
        let dir = ctx.seed_dir(seed);
        create_dir(&dir)?;
        gen_suite(&ctx.suite_config(seed))?.save(&dir.join(SUITE_FILE))
    })?;
    println!("wrote {} suite(s) under {}", ctx.cfg.seeds.len(), ctx.run_dir.display());
    Ok(())
}

fn train_experts_cmd(ctx: &Ctx) -> Result<()> {
    let scores = ctx.per_seed(|seed| {
        let dir = ctx.seed_dir(seed);
        let suite = load_suite(ctx, &dir)?;
        let s = suite.config.seed;
        let base = pipeline::pretrain_base(&suite, &ctx.cfg.experts, s)?;
        let experts = pipeline::train_experts(&suite, &base, &ctx.cfg.experts, s)?;
        base.params.save(&dir.join(BASE_FILE))?;
        let mut own = Vec::new();
        for (t, e) in experts.iter().enumerate() {
            let folded = if e.adapters.is_empty() { e.params.clone() } else { e.merge_adapter()? };
            folded.save(&dir.join(expert_file(t)))?;
            own.push(ToyModel::from_checkpoint(folded)?.score(&suite.tasks[t].test)?);
        }
        Ok(own)
    })?;
    for (seed, own) in ctx.cfg.seeds.iter().zip(scores) {
        println!("seed {seed}: expert test accuracy {}", fmt_list(&own));
    }
    Ok(())
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

fn merge_cmd(ctx: &Ctx) -> Result<()> {
    let recipe = &ctx.cfg.merge;
    if recipe.method == MergeMethod::Twin {
        return Err(Error::Config(
            "twin merging is input-conditioned; use twin-prep, train-router and eval".into(),
        ));
    }
    let method = recipe.method.to_string().replace('_', "-");
    let file = match recipe.dare_drop_rate {
        Some(p) if p > 0.0 => format!("merged-{method}-dare.safetensors"),
        _ => format!("merged-{method}.safetensors"),
    };
    let results = ctx.per_seed(|seed| {
        let dir = ctx.seed_dir(seed);
        let zoo = load_zoo(ctx, &dir)?;
        let dare_seed = sub_seed(zoo.seed, 300);
        let build = |r: &twinforge_core::MergeRecipe| merge::static_merge(r, &zoo.base.params, &zoo.checkpoints, dare_seed);
        let (gamma, merged) = if recipe.method == MergeMethod::TaskArithmetic && recipe.gammas.is_empty() {
            zoo.search_gamma(|g| {
                let mut r = recipe.clone();
                r.gammas = vec![g; zoo.tasks()];
                build(&r)
            })
            .map(|(g, c)| (Some(g), c))?
        } else {
            (None, build(recipe)?)
        };
        let mut merged = merged.with_meta("method", method.as_str());
        if let Some(g) = gamma {
            merged = merged.with_meta("gamma", g.to_string());
        }
        merged.save(&dir.join(&file))?;
        Ok((gamma, zoo.normalized(&merged, pipeline::Split::Test)?))
    })?;
    for (seed, (gamma, score)) in ctx.cfg.seeds.iter().zip(results) {
        let g = gamma.map(|g| format!(" (searched gamma {g})")).unwrap_or_default();
        println!("seed {seed}: {method}{g} normalized test score {score:.2}");
    }
    Ok(())
}

fn twin_prep_cmd(ctx: &Ctx) -> Result<()> {
    let rank = ctx.cfg.merge.twin_rank;
    if rank == 0 {
        return Err(Error::Config("twin rank must be at least 1".into()));
    }
    let results = ctx.per_seed(|seed| {
        let dir = ctx.seed_dir(seed);
        let zoo = load_zoo(ctx, &dir)?;
        let (gamma, shared) = match ctx.cfg.merge.gammas.as_slice() {
            [] => zoo.searched_task_arithmetic()?,
            gs => (gs[0], merge::task_arithmetic(&zoo.base.params, &zoo.checkpoints, gs)?),
        };
        let clamped: Vec<String> = zoo
            .base
            .params
            .iter()
            .filter(|(_, t)| t.is_matrix() && rank > t.shape()[0].min(t.shape()[1]))
            .map(|(n, t)| format!("{n} ({}x{})", t.shape()[0], t.shape()[1]))
            .collect();
        let prep = merge::twins_from_shared(shared, &zoo.checkpoints, |d| svd_compress(d, rank))?;
        prep.shared
            .clone()
            .with_meta("gamma", gamma.to_string())
            .with_meta("gammas", serde_json::to_string(&ctx.cfg.merge.gammas).expect("floats serialize"))
            .save(&dir.join(SHARED_FILE))?;
        for (t, tv) in prep.twins.iter().enumerate() {
            tv.save(&dir.join(twin_file(t)))?;
        }
        Ok((gamma, clamped, prep.twins.iter().map(TwinVector::param_count).sum::<usize>()))
    })?;
    if let Some((_, clamped, _)) = results.first() {
        if !clamped.is_empty() {
            eprintln!(
                "warning: rank {rank} exceeds the full rank of {}; clamped per tensor (twins are lossless)",
                clamped.join(", ")
            );
        }
    }
    for (seed, (gamma, _, params)) in ctx.cfg.seeds.iter().zip(results) {
        println!("seed {seed}: shared gamma {gamma}, {params} twin parameters");
    }
    Ok(())
}

fn train_router_cmd(ctx: &Ctx) -> Result<()> {
    let results = ctx.per_seed(|seed| {
        let dir = ctx.seed_dir(seed);
        let zoo = load_zoo(ctx, &dir)?;
        let path = dir.join(SHARED_FILE);
        let shared = ToyModel::from_checkpoint(missing(&path, Checkpoint::load(&path))?)?;
        let data = zoo.router_data(&shared)?;
        let mut cfg = ctx.cfg.router.clone();
        cfg.seed = sub_seed(zoo.seed ^ ctx.cfg.router.seed, 900);
        let trained = train_router(&data, zoo.tasks(), &cfg)?;
        let hits = data
            .iter()
            .map(|(e, t)| trained.router.route(e).map(|d| d.argmax() == *t))
            .collect::<Result<Vec<_>>>()?;
        trained.router.save(&dir.join(ROUTER_FILE))?;
        let acc = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
        Ok((trained.epoch_losses.last().copied().unwrap_or(f64::NAN), acc))
    })?;
    for (seed, (loss, acc)) in ctx.cfg.seeds.iter().zip(results) {
        println!("seed {seed}: final loss {loss:.4}, training routing accuracy {acc:.4}");
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictionRow {
    item: usize,
    task: usize,
    label: usize,
    prediction: usize,
    routed_task: usize,
    routed_weight: f64,
}

fn infer_cmd(ctx: &Ctx) -> Result<()> {
    let mode = mode_name(ctx.cfg.eval.mode);
    let results = ctx.per_seed(|seed| {
        let dir = ctx.seed_dir(seed);
        let suite = load_suite(ctx, &dir)?;
        let sys = load_system(&dir, suite.task_count())?;
        let data = suite.mixture_test();
        let out = infer(&sys, &data, &ctx.inference(seed))?;
        let path = dir.join(format!("predictions-{mode}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(e.to_string()))?;
        let mut correct = 0;
        for i in 0..data.len() {
            let d = &out.decisions[i];
            let routed = d.argmax();
            w.serialize(PredictionRow {
                item: i,
                task: data.task[i],
                label: data.y[i],
                prediction: out.predictions[i],
                routed_task: routed,
                routed_weight: d.weights[routed],
            })
            .map_err(|e| Error::Data(e.to_string()))?;
            correct += usize::from(out.predictions[i] == data.y[i]);
        }
        w.flush()?;
        Ok((correct as f64 / data.len() as f64, out.merged_models))
    })?;
    for (seed, (acc, models)) in ctx.cfg.seeds.iter().zip(results) {
        println!("seed {seed}: {mode} accuracy {acc:.4} with {models} merged model(s)");
    }
    Ok(())
}

/// One seed of an evaluation, without timing so files are reproducible.
#[derive(Serialize)]
struct SeedEval {
    seed: u64,
    method: String,
    per_task_scores: Vec<f64>,
    reference_scores: Vec<f64>,
    normalized_score: f64,
    merged_models: usize,
    routing_accuracy: Option<f64>,
    config: serde_json::Value,
    storage: StorageAccount,
}

#[derive(Serialize)]
struct EvalSummary {
    mode: InferenceMode,
    group_count: usize,
    seeds: Vec<u64>,
    mean_normalized_score: f64,
    std_normalized_score: f64,
    runs: Vec<SeedEval>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Parameter count of the toy MLP for the configured sizes.
fn model_params(cfg: &RunConfig) -> u64 {
    let h = cfg.experts.hidden;
    let dims = [cfg.suite.dim, h, h, cfg.suite.classes];
    dims.windows(2).map(|w| (w[0] * w[1] + w[1]) as u64).sum()
}

/// Storage for `tasks` twins holding `twin_params` in total; the per-task
/// ratio is capped at 1 since a twin never needs more than the dense delta.
fn storage_for(cfg: &RunConfig, tasks: usize, twin_params: usize, router_params: usize) -> Result<StorageAccount> {
    let p = model_params(cfg);
    let ratio = (twin_params as f64 / (tasks as f64 * p as f64)).clamp(f64::MIN_POSITIVE, 1.0);
    storage_report(tasks as u64, p, p, 0, router_params as u64, ratio)
}

fn eval_cmd(ctx: &Ctx) -> Result<()> {
    let mode = ctx.cfg.eval.mode;
    let knob = match mode {
        InferenceMode::Grouped => format!("group_count={}", ctx.cfg.eval.group_count),
        m => mode_name(m).to_string(),
    };
    let runs = ctx.per_seed(|seed| {
        let dir = ctx.seed_dir(seed);
        let zoo = load_zoo(ctx, &dir)?;
        let sys = load_system(&dir, zoo.tasks())?;
        let report = run_inference(&sys, &zoo.suite.mixture_test(), &zoo.ft_test, &ctx.inference(seed))?;
        let router_params = sys.router.as_ref().map_or(0, Router::param_count);
        Ok(SeedEval {
            seed,
            storage: storage_for(&ctx.cfg, sys.tasks(), sys.storage_params(), router_params)?,
            method: report.method,
            per_task_scores: report.per_task_scores,
            reference_scores: report.reference_scores,
            normalized_score: report.normalized_score,
            merged_models: report.merged_models,
            routing_accuracy: report.routing_accuracy,
            config: report.config,
        })
    })?;
    let rows: Vec<CsvRow> = runs
        .iter()
        .flat_map(|r| rows_for("eval", &knob, r.seed, &r.method, &r.per_task_scores, r.normalized_score))
        .collect();
    let name = mode_name(mode);
    write_csv(&rows, &ctx.run_dir.join(format!("eval-{name}.csv")))?;
    let scores: Vec<f64> = runs.iter().map(|r| r.normalized_score).collect();
    let (mean, std) = mean_std(&scores);
    for r in &runs {
        println!("seed {}: {} normalized score {:.2}", r.seed, r.method, r.normalized_score);
    }
    println!("mean {mean:.2} ± {std:.2} over {} seed(s)", runs.len());
    write_json(
        &EvalSummary {
            mode,
            group_count: ctx.cfg.eval.group_count,
            seeds: ctx.cfg.seeds.clone(),
            mean_normalized_score: mean,
            std_normalized_score: std,
            runs,
        },
        &ctx.run_dir.join(format!("eval-{name}.json")),
    )
}

#[derive(Serialize)]
struct SweepCell {
    knob: String,
    method: String,
    mean: f64,
    std: f64,
    seeds: usize,
}

#[derive(Serialize)]
struct SweepSummary {
    experiment: String,
    seeds: Vec<u64>,
    cells: Vec<SweepCell>,
}

/// Mean and standard deviation of the summary rows per (knob, method), in
/// order of first appearance.
fn summarize(rows: &[CsvRow]) -> Vec<SweepCell> {
    let mut keys: Vec<(String, String)> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for r in rows.iter().filter(|r| r.is_summary()) {
        let key = (r.knob.clone(), r.method.clone());
        match keys.iter().position(|k| *k == key) {
            Some(i) => values[i].push(r.score),
            None => {
                keys.push(key);
                values.push(vec![r.score]);
            }
        }
    }
    keys.into_iter()
        .zip(values)
        .map(|((knob, method), v)| {
            let (mean, std) = mean_std(&v);
            SweepCell { knob, method, mean, std, seeds: v.len() }
        })
        .collect()
}

fn sweep_cmd(ctx: &Ctx, kind: SweepKind) -> Result<()> {
    let cfg = &ctx.cfg;
    let twin = |zoo: &Zoo| build_twin(zoo, None, Compression::Rank(cfg.merge.twin_rank), &cfg.router);
    let rows: Vec<CsvRow> = if kind == SweepKind::Epochs {
        let mut rows = Vec::new();
        for &seed in &cfg.seeds {
            rows.extend(experiments::sweep_epochs(&ctx.suite_config(seed), &cfg.experts, &EPOCHS, ctx.jobs)?);
        }
        rows
    } else {
        let per_seed = ctx.per_seed(|seed| {
            let mut zoo = Zoo::build(&ctx.suite_config(seed), &cfg.experts)?;
            if !cfg.eval.alphas.is_empty() {
                zoo.suite.set_alphas(cfg.eval.alphas.clone())?;
            }
            match kind {
                SweepKind::Methods => experiments::compare_methods_rows(&zoo, &cfg.router, cfg.merge.ties_density),
                SweepKind::Sparsity => experiments::sweep_sparsity(&zoo, &twin(&zoo)?, &SparsityMethod::ALL, &SPARSITY_RATES),
                SweepKind::Tasks => {
                    let counts: Vec<usize> = (1..=zoo.tasks()).collect();
                    experiments::sweep_tasks(&zoo, &counts, &cfg.router)
                }
                SweepKind::SingleTaskSparsity => {
                    experiments::sweep_single_task_sparsity(&zoo, &SparsityMethod::ALL, &SPARSITY_RATES)
                }
                SweepKind::CoeffGrid => experiments::coeff_grid(&zoo, COEFF_RANGE.0, COEFF_RANGE.1, COEFF_RANGE.2),
                SweepKind::Nonoverlap => experiments::nonoverlap_rows(&zoo, &cfg.experts, ADAPTER_RANK),
                SweepKind::Grouped => experiments::grouped_gap(&zoo, &twin(&zoo)?, cfg.eval.group_count),
                SweepKind::Epochs => unreachable!("handled above"),
            }
        })?;
        per_seed.into_iter().flatten().collect()
    };
    let name = kind.name();
    write_csv(&rows, &ctx.run_dir.join(format!("sweep-{name}.csv")))?;
    let cells = summarize(&rows);
    for c in &cells {
        println!("{:<24} {:<28} {:>8.2} ± {:.2}", c.knob, c.method, c.mean, c.std);
    }
    write_json(
        &SweepSummary {
            experiment: name.clone(),
            seeds: cfg.seeds.clone(),
            cells,
        },
        &ctx.run_dir.join(format!("sweep-{name}.json")),
    )
}

/// Parameters of a rank-`r` twin for the configured model.
fn twin_params(cfg: &RunConfig, rank: usize) -> usize {
    let h = cfg.experts.hidden;
    let dims = [cfg.suite.dim, h, h, cfg.suite.classes];
    dims.windows(2)
        .map(|w| {
            let (rows, cols) = (w[1], w[0]);
            rank.min(rows.min(cols)) * (rows + cols + 1) + rows
        })
        .sum()
}

fn storage_cmd(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let tasks = cfg.suite.tasks;
    let router_params = Router::init(cfg.experts.hidden, cfg.router.hidden, tasks, cfg.router.leaky_slope, 0).param_count();
    let account = storage_for(cfg, tasks, tasks * twin_params(cfg, cfg.merge.twin_rank), router_params)?;
    println!(
        "fine-tuned {} bytes, single merged {} bytes, twin {} bytes (ratio {:.4})",
        account.bytes_finetuned, account.bytes_single, account.bytes_twin, account.ratio
    );
    write_json(&account, &ctx.run_dir.join("storage.json"))
}

fn selftest_cmd() -> Result<()> {
    let checks = selftest::run();
    for c in &checks {
        match &c.outcome {
            Ok(()) => println!("ok    {}", c.name),
            Err(msg) => println!("FAIL  {}: {msg}", c.name),
        }
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} of {} checks failed", checks.len())));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.flags.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_flags(&mut cfg, &cli.flags)?;
    let run_dir = cfg.run_dir()?;
    create_dir(&run_dir)?;
    std::fs::write(run_dir.join(CONFIG_ECHO), cfg.echo()?)?;
    let ctx = Ctx {
        cfg,
        run_dir,
        jobs: cli.flags.jobs,
    };
    match cli.command {
        Command::GenSuite => gen_suite_cmd(&ctx),
        Command::TrainExperts => train_experts_cmd(&ctx),
        Command::Merge => merge_cmd(&ctx),
        Command::TwinPrep => twin_prep_cmd(&ctx),
        Command::TrainRouter => train_router_cmd(&ctx),
        Command::Infer => infer_cmd(&ctx),
        Command::Eval => eval_cmd(&ctx),
        Command::Sweep { kind } => sweep_cmd(&ctx, kind),
        Command::Storage => storage_cmd(&ctx),
        Command::Selftest => selftest_cmd(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_groups_by_knob_and_method() {
        let rows = vec![
            CsvRow::summary("x", "a", 0, "m", 1.0),
            CsvRow::summary("x", "a", 1, "m", 3.0),
            CsvRow::summary("x", "b", 0, "m", 5.0),
        ];
        let cells = summarize(&rows);
        assert_eq!(cells.len(), 2);
        assert_eq!((cells[0].mean, cells[0].seeds), (2.0, 2));
        assert!((cells[0].std - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(cells[1].std, 0.0);
    }

    #[test]
    fn gamma_flag_sets_ties_scale() {
        let cli = Cli::try_parse_from(["twinforge", "merge", "--method", "ties", "--gamma", "0.4"]).unwrap();
        let mut cfg = RunConfig::default();
        apply_flags(&mut cfg, &cli.flags).unwrap();
        assert_eq!(cfg.merge.ties_lambda, 0.4);
        assert!(cfg.merge.gammas.is_empty());
    }

    #[test]
    fn model_params_match_toy_model() {
        let cfg = RunConfig::default();
        let m = ToyModel::init(cfg.suite.dim, cfg.experts.hidden, cfg.suite.classes, 0);
        assert_eq!(model_params(&cfg), m.params.param_count() as u64);
    }
}
