//! End-to-end acceptance run: every criterion is evaluated, one line is
//! printed per criterion, and the test fails if any criterion fails.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use twinforge_core::compress::dare_drop;
use twinforge_core::harness::experiments::{
    compare_methods, nonoverlap_experiment, run_cells, sweep_epochs, sweep_sparsity, MethodScore, SparsityMethod,
};
use twinforge_core::harness::{
    build_twin, infer, run_inference, storage_report, Compression, ExpertSettings, InferenceMode, InferenceOptions, TwinSystem, Zoo,
};
use twinforge_core::linalg::{svd, truncate};
use twinforge_core::merge::{adapter_twin_merge, dynamic_merge, twin_preprocess};
use twinforge_core::router::{Router, RouterConfig, MAX_ITEMS_PER_TASK};
use twinforge_core::toyzoo::{SuiteConfig, ToyModel};
use twinforge_core::{Delta, Result, Tensor};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(SEEDS.len())
}

/// Default-suite zoos for every seed, built once.
fn zoos() -> &'static [Zoo] {
    static ZOOS: OnceLock<Vec<Zoo>> = OnceLock::new();
    ZOOS.get_or_init(|| {
        run_cells(jobs(), SEEDS.to_vec(), |s| {
            Zoo::build(&SuiteConfig::default().with_seed(s), &ExpertSettings::default())
        })
        .expect("default zoos build")
    })
}

/// Full-rank twin system with a trained router on the seed-0 suite.
fn default_system() -> &'static TwinSystem {
    static SYS: OnceLock<TwinSystem> = OnceLock::new();
    SYS.get_or_init(|| build_twin(&zoos()[0], None, Compression::Rank(usize::MAX), &RouterConfig::default()).expect("twin builds"))
}

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Duration,
    check: fn() -> Result<(bool, String)>,
}

fn lora_identity() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let tasks = rng.random_range(2..=4usize);
        let adapter_rank = rng.random_range(1..=3usize);
        let hidden = rng.random_range(8..=24usize);
        let base = ToyModel::init(10, hidden, 4, seed);
        let adapters = (0..tasks)
            .map(|t| Ok(base.clone().with_adapters(adapter_rank, &[0, 1, 2], 0.5, seed * 100 + t as u64)?.adapter_delta()))
            .collect::<Result<Vec<Delta>>>()?;
        let folded = adapters.iter().map(|a| base.params.add_delta(a)).collect::<Result<Vec<_>>>()?;
        let gammas: Vec<f64> = (0..tasks).map(|_| rng.random_range(0.1..1.0)).collect();
        let raw: Vec<f64> = (0..tasks).map(|_| rng.random_range(0.01..1.0)).collect();
        let weights: Vec<f64> = raw.iter().map(|w| w / raw.iter().sum::<f64>()).collect();
        // At least the residual rank, so both sides keep the same subspace.
        let rank = rng.random_range(tasks * adapter_rank..=tasks * adapter_rank + hidden);
        let left = adapter_twin_merge(&base.params, &adapters, &gammas, rank, &weights)?;
        let prep = twin_preprocess(&base.params, &folded, &gammas, rank)?;
        let right = dynamic_merge(&prep.shared, &prep.twins, &weights)?;
        for (name, t) in left.iter() {
            worst = worst.max(t.relative_error(right.tensor(name)?));
        }
    }
    Ok((worst <= 1e-5, format!("20 configs, worst relative error {worst:.2e} (tol 1e-5)")))
}

fn exact_recovery() -> Result<(bool, String)> {
    let zoo = &zoos()[0];
    let prep = twin_preprocess(&zoo.base.params, &zoo.checkpoints, &vec![0.3; zoo.tasks()], usize::MAX)?;
    let mut worst = 0.0f64;
    let mut scores_exact = true;
    for (t, expert) in zoo.checkpoints.iter().enumerate() {
        let mut w = vec![0.0; zoo.tasks()];
        w[t] = 1.0;
        let rebuilt = dynamic_merge(&prep.shared, &prep.twins, &w)?;
        for (name, x) in expert.iter() {
            worst = worst.max(rebuilt.tensor(name)?.relative_error(x));
        }
        let score = ToyModel::from_checkpoint(rebuilt)?.score(&zoo.suite.tasks[t].test)?;
        scores_exact &= score == zoo.ft_test[t];
    }
    let sys = TwinSystem::from_prep(prep, None, 0.3)?;
    let oracle = InferenceOptions {
        mode: InferenceMode::Oracle,
        ..InferenceOptions::default()
    };
    let report = run_inference(&sys, &zoo.suite.mixture_test(), &zoo.ft_test, &oracle)?;
    scores_exact &= report.per_task_scores == zoo.ft_test;
    let norm = report.normalized_score;
    Ok((
        worst <= 1e-5 && scores_exact && (norm - 100.0).abs() <= 0.5,
        format!("worst relative error {worst:.2e}, per-task scores exact: {scores_exact}, normalized {norm:.2}"),
    ))
}

fn dare_unbiased() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::vector((0..64).map(|_| rng.random_range(-1.0f32..1.0)).collect());
    let d = Delta::new([("x".to_string(), x.clone())].into());
    let masks = 10_000u64;
    let mut worst_z = 0.0f64;
    for p in [0.3, 0.7, 0.9] {
        let mut sum = vec![0.0f64; x.len()];
        let mut sq = vec![0.0f64; x.len()];
        for s in 0..masks {
            for (i, &v) in dare_drop(&d, p, s)?.get("x").expect("kept name").data().iter().enumerate() {
                sum[i] += v as f64;
                sq[i] += (v as f64).powi(2);
            }
        }
        let n = masks as f64;
        for i in 0..x.len() {
            let mean = sum[i] / n;
            let se = ((sq[i] / n - mean * mean).max(0.0) / n).sqrt();
            worst_z = worst_z.max((mean - x.data()[i] as f64).abs() / se);
        }
    }
    Ok((worst_z <= 5.0, format!("10000 masks, p in {{0.3, 0.7, 0.9}}, worst |z| {worst_z:.2} (max 5)")))
}

fn eckart_young() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (r, c) = (rng.random_range(2..=24usize), rng.random_range(2..=24usize));
        let m = Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0f32..1.0)).collect())?;
        let f = svd(&m)?;
        for k in 1..=f.rank() {
            let resid = m.sub(&truncate(&f, k)?.reconstruct())?.frobenius();
            let tail = f.s.data()[k..].iter().map(|&s| (s as f64).powi(2)).sum::<f64>().sqrt();
            worst = worst.max((resid - tail).abs() / m.frobenius());
        }
    }
    Ok((worst <= 1e-5, format!("50 matrices, all ranks, worst |residual - tail| / |M| {worst:.2e} (tol 1e-5)")))
}

fn mean_of(scores: &[Vec<MethodScore>], method: &str) -> f64 {
    let v: Vec<f64> = scores
        .iter()
        .map(|s| s.iter().find(|m| m.method == method).expect("method present").normalized)
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn baseline_ordering() -> Result<(bool, String)> {
    let scores = run_cells(jobs(), zoos().iter().collect(), |z| compare_methods(z, &RouterConfig::default(), 0.2))?;
    let (twin, ta, wa) = (
        mean_of(&scores, "twin"),
        mean_of(&scores, "task_arithmetic"),
        mean_of(&scores, "weight_average"),
    );
    Ok((
        twin > ta && ta > wa && twin >= ta + 5.0,
        format!("5-seed means: twin {twin:.2}, task arithmetic {ta:.2}, weight average {wa:.2}"),
    ))
}

fn sparsity_retention() -> Result<(bool, String)> {
    let zoo = &zoos()[0];
    let rows = sweep_sparsity(zoo, default_system(), &SparsityMethod::ALL, &[0.0, 0.9])?;
    let at = |knob: &str, method: &str| {
        rows.iter()
            .find(|r| r.is_summary() && r.knob == knob && r.method == method)
            .expect("row present")
            .score
    };
    let full = at("0", "svd");
    let (s, m, b) = (at("0.9", "svd"), at("0.9", "magnitude"), at("0.9", "bernoulli"));
    let retention = s / full;
    Ok((
        retention >= 0.85 && s >= m && m >= b,
        format!("uncompressed {full:.2}; at 90%: svd {s:.2} ({:.1}% retained), magnitude {m:.2}, bernoulli {b:.2}", 100.0 * retention),
    ))
}

fn grouping() -> Result<(bool, String)> {
    let zoo = &zoos()[0];
    let sys = default_system();
    let mix = zoo.suite.mixture_test();
    let per = InferenceOptions::default();
    let degenerate = InferenceOptions {
        mode: InferenceMode::Grouped,
        group_count: mix.len(),
        seed: 0,
    };
    let twenty = InferenceOptions {
        group_count: 20,
        ..degenerate
    };
    let a = infer(sys, &mix, &per)?;
    let b = infer(sys, &mix, &degenerate)?;
    let bit_exact = a.predictions == b.predictions && a.weights == b.weights;
    let per_report = run_inference(sys, &mix, &zoo.ft_test, &per)?;
    let deg_report = run_inference(sys, &mix, &zoo.ft_test, &degenerate)?;
    let grouped = run_inference(sys, &mix, &zoo.ft_test, &twenty)?;
    let same = bit_exact && per_report.same_scores(&deg_report);
    let gap = per_report.normalized_score - grouped.normalized_score;
    Ok((
        same && gap.abs() <= 7.0,
        format!(
            "degenerate grouping bit-exact: {same}; per-sample {:.2} vs 20 groups {:.2} ({} merged models)",
            per_report.normalized_score, grouped.normalized_score, grouped.merged_models
        ),
    ))
}

fn storage() -> Result<(bool, String)> {
    let s = storage_report(8, 1_000_000, 1_000_000, 0, 10_000, 0.001)?;
    let one = storage_report(1, 4096, 4096, 0, 0, 1.0)?;
    let split = storage_report(4, 10_000, 2_500, 7_500, 300, 0.1)?;
    let ok = s.bytes_twin == 2 * 8 * 1000 + 2_000_000 + 10_000
        && s.bytes_twin == 2_026_000
        && s.bytes_finetuned == 16_000_000
        && s.bytes_single == 2_000_000
        && one.bytes_finetuned == 8192
        && one.bytes_single == 8192
        && one.bytes_twin == 16_384
        && split.bytes_finetuned == 2 * (4 * 2_500 + 7_500)
        && split.bytes_twin == 2 * 4 * 250 + 20_000 + 300;
    Ok((ok, format!("worked example bytes_twin = {}", s.bytes_twin)))
}

fn forgetting() -> Result<(bool, String)> {
    let epochs = [5, 10, 20, 40, 80];
    let rows = sweep_epochs(&SuiteConfig::default(), &ExpertSettings::default(), &epochs, jobs())?;
    let ta: Vec<f64> = epochs
        .iter()
        .map(|e| {
            rows.iter()
                .find(|r| r.is_summary() && r.method == "task_arithmetic" && r.knob == e.to_string())
                .expect("row present")
                .score
        })
        .collect();
    let min_expert = rows
        .iter()
        .filter(|r| r.method == "expert" && !r.is_summary())
        .map(|r| r.score)
        .fold(f64::INFINITY, f64::min);
    let non_increasing = (0..ta.len()).all(|i| (i + 1..ta.len()).all(|j| ta[j] <= ta[i] + 2.0));
    let curve: Vec<String> = ta.iter().map(|s| format!("{s:.2}")).collect();
    Ok((
        non_increasing && min_expert >= 0.90,
        format!("task arithmetic over epochs 5..80: [{}]; lowest expert accuracy {min_expert:.3}", curve.join(", ")),
    ))
}

fn router_quality() -> Result<(bool, String)> {
    let cfg = RouterConfig::default();
    let hyper = cfg.lr == 5e-4 && cfg.epochs == 10 && MAX_ITEMS_PER_TASK <= 1000;
    let systems = run_cells(jobs(), zoos().iter().collect(), |z| {
        let sys = build_twin(z, None, Compression::Rank(usize::MAX), &cfg)?;
        let items = z.router_data(&sys.shared_model)?.len();
        let r = run_inference(&sys, &z.suite.mixture_test(), &z.ft_test, &InferenceOptions::default())?;
        Ok((r.routing_accuracy.expect("routed"), items <= MAX_ITEMS_PER_TASK * z.tasks()))
    })?;
    let worst = systems.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let capped = systems.iter().all(|s| s.1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut uniform = true;
    for tasks in 2..=6 {
        let r = Router::init(64, 32, tasks, 0.01, tasks as u64);
        let emb: Vec<f32> = (0..64).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        uniform &= r.route(&emb)?.weights.iter().all(|&w| w == 1.0 / tasks as f64);
    }
    Ok((
        hyper && capped && worst >= 0.95 && uniform,
        format!("held-out routing accuracy min over 5 seeds {:.2}%; uniform at init: {uniform}", 100.0 * worst),
    ))
}

fn nonoverlap() -> Result<(bool, String)> {
    let settings = ExpertSettings::default();
    let results = run_cells(jobs(), zoos().iter().collect(), |z| nonoverlap_experiment(z, &settings, 4))?;
    let gaps: Vec<String> = results
        .iter()
        .map(|(d, _)| format!("{:.3}<{:.3}", d.merged_mean(), d.expert_mean()))
        .collect();
    let ok = results.iter().all(|(d, _)| d.merged_mean() < d.expert_mean());
    Ok((ok, format!("disjoint-layer merged vs expert means per seed: {}", gaps.join(", "))))
}

#[test]
fn acceptance() {
    let criteria = [
        Criterion { id: 1, name: "adapter-space twin merge identity", limit: Duration::from_secs(10), check: lora_identity },
        Criterion { id: 2, name: "exact recovery with one-hot full-rank twins", limit: Duration::from_secs(30), check: exact_recovery },
        Criterion { id: 3, name: "dare unbiasedness", limit: Duration::from_secs(10), check: dare_unbiased },
        Criterion { id: 4, name: "svd truncation residual", limit: Duration::from_secs(5), check: eckart_young },
        Criterion { id: 5, name: "baseline ordering", limit: Duration::from_secs(300), check: baseline_ordering },
        Criterion { id: 6, name: "sparsity retention and ordering", limit: Duration::from_secs(300), check: sparsity_retention },
        Criterion { id: 7, name: "grouped inference", limit: Duration::from_secs(180), check: grouping },
        Criterion { id: 8, name: "storage formulas", limit: Duration::from_secs(1), check: storage },
        Criterion { id: 9, name: "forgetting trend", limit: Duration::from_secs(600), check: forgetting },
        Criterion { id: 10, name: "router quality", limit: Duration::from_secs(60), check: router_quality },
        Criterion { id: 11, name: "non-overlap interference", limit: Duration::from_secs(300), check: nonoverlap },
    ];
    let mut failed = Vec::new();
    for c in &criteria {
        let start = Instant::now();
        let outcome = (c.check)();
        let took = start.elapsed();
        let (pass, detail) = match outcome {
            Ok((ok, detail)) => (ok && took <= c.limit, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        // Written to the stderr handle directly so the line survives output capture.
        let _ = writeln!(
            std::io::stderr().lock(),
            "{} criterion {:>2} {}: {} [{:.1}s, limit {}s]",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            detail,
            took.as_secs_f64(),
            c.limit.as_secs()
        );
        if !pass {
            failed.push(c.id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

