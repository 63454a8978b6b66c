//! Fast invariant checks across every module, run by `twinforge selftest`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, Delta};
use crate::compress::{dare_drop, magnitude_prune, svd_compress};
use crate::container;
use crate::harness::inference::{run_inference, InferenceMode, InferenceOptions};
use crate::harness::metrics::storage_report;
use crate::harness::pipeline::{build_twin, Compression, ExpertSettings, Zoo};
use crate::linalg::{svd, truncate, Tensor};
use crate::merge::{adapter_twin_merge, dynamic_merge, twin_preprocess};
use crate::router::{Router, RouterConfig};
use crate::toyzoo::{SuiteConfig, ToyModel};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub outcome: std::result::Result<(), String>,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.outcome.is_ok()
    }
}

type Outcome = std::result::Result<(), String>;
type NamedCheck = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).expect("valid shape")
}

fn random_checkpoint(rng: &mut ChaCha8Rng) -> Checkpoint {
    let mut p = BTreeMap::new();
    p.insert("l0.w".to_string(), random_tensor(&[6, 5], rng));
    p.insert("l0.b".to_string(), random_tensor(&[6], rng));
    p.insert("l1.w".to_string(), random_tensor(&[3, 6], rng));
    Checkpoint::new(p).expect("finite")
}

fn eckart_young() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..10 {
        let m = random_tensor(&[7 + case % 3, 5 + case % 4], &mut rng);
        let f = svd(&m).map_err(|e| e.to_string())?;
        for r in 1..=f.rank() {
            let t = truncate(&f, r).map_err(|e| e.to_string())?;
            let resid = m.sub(&t.reconstruct()).map_err(|e| e.to_string())?.frobenius();
            let tail = f.s.data()[r..].iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>().sqrt();
            ensure((resid - tail).abs() <= 1e-5 * m.frobenius().max(1.0), || {
                format!("case {case} rank {r}: residual {resid} vs tail {tail}")
            })?;
        }
    }
    Ok(())
}

fn container_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c = random_checkpoint(&mut rng).with_meta("kind", "selftest");
    let bytes = container::encode(&c.to_container()).map_err(|e| e.to_string())?;
    let back = Checkpoint::from_container(container::decode(&bytes).map_err(|e| e.to_string())?);
    ensure(back == c, || "decoded checkpoint differs".into())?;
    let again = container::encode(&back.to_container()).map_err(|e| e.to_string())?;
    ensure(again == bytes, || "re-encoding is not byte-identical".into())
}

fn axpy_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random_checkpoint(&mut rng);
    let b = random_checkpoint(&mut rng);
    let d = b.diff(&a).map_err(|e| e.to_string())?;
    let zero = a.axpy(&[&d], &[0.0]).map_err(|e| e.to_string())?;
    ensure(zero == a, || "axpy with zero coefficient changed the checkpoint".into())?;
    let back = a.axpy(&[&d], &[1.0]).map_err(|e| e.to_string())?;
    for (name, t) in b.iter() {
        let err = back.tensor(name).map_err(|e| e.to_string())?.relative_error(t);
        ensure(err < 1e-6, || format!("{name}: a + (b − a) off by {err}"))?;
    }
    Ok(())
}

fn dare_unbiased() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let delta = Delta::new([("x".to_string(), random_tensor(&[40], &mut rng))].into());
    let x = delta.get("x").expect("present").data().to_vec();
    let masks = 2000;
    for p in [0.3, 0.7, 0.9] {
        let mut sum = vec![0.0f64; x.len()];
        let mut sq = vec![0.0f64; x.len()];
        for s in 0..masks {
            let out = dare_drop(&delta, p, s).map_err(|e| e.to_string())?;
            for (i, &v) in out.get("x").expect("present").data().iter().enumerate() {
                sum[i] += v as f64;
                sq[i] += (v as f64) * (v as f64);
            }
        }
        for i in 0..x.len() {
            let mean = sum[i] / masks as f64;
            let var = (sq[i] / masks as f64 - mean * mean).max(0.0);
            let se = (var / masks as f64).sqrt();
            ensure((mean - x[i] as f64).abs() <= 5.0 * se + 1e-9, || {
                format!("p={p} entry {i}: mean {mean} vs {}", x[i])
            })?;
        }
    }
    Ok(())
}

fn magnitude_support() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let d = Delta::new([("w".to_string(), random_tensor(&[9, 7], &mut rng))].into());
    for density in [0.1, 0.33, 0.5, 1.0] {
        let kept = magnitude_prune(&d, density).map_err(|e| e.to_string())?.nonzero_count();
        let want = (density * 63.0 - 1e-9).ceil() as usize;
        ensure(kept == want, || format!("density {density}: kept {kept}, expected {want}"))?;
    }
    Ok(())
}

fn storage_example() -> Outcome {
    let s = storage_report(8, 1_000_000, 1_000_000, 0, 10_000, 0.001).map_err(|e| e.to_string())?;
    ensure(s.bytes_twin == 2_026_000, || format!("bytes_twin = {}", s.bytes_twin))
}

fn router_uniform_at_init() -> Outcome {
    let r = Router::init(8, 16, 5, 0.01, 3);
    let w = r.route(&[0.5; 8]).map_err(|e| e.to_string())?.weights;
    ensure(w.iter().all(|&x| (x - 0.2).abs() < 1e-12), || format!("weights {w:?}"))
}

fn lora_identity() -> Outcome {
    for seed in 0..4u64 {
        let base = ToyModel::init(6, 8, 3, seed);
        let adapters: Vec<Delta> = (0..3)
            .map(|t| {
                base.clone()
                    .with_adapters(2, &[0, 1, 2], 0.5, seed * 10 + t)
                    .map(|m| m.adapter_delta())
            })
            .collect::<crate::Result<_>>()
            .map_err(|e| e.to_string())?;
        let folded: Vec<Checkpoint> = adapters
            .iter()
            .map(|a| base.params.add_delta(a))
            .collect::<crate::Result<_>>()
            .map_err(|e| e.to_string())?;
        let gammas = [0.3, 0.5, 0.2];
        let weights = [0.6, 0.1, 0.3];
        let rank = 8;
        let left = adapter_twin_merge(&base.params, &adapters, &gammas, rank, &weights).map_err(|e| e.to_string())?;
        let prep = twin_preprocess(&base.params, &folded, &gammas, rank).map_err(|e| e.to_string())?;
        let right = dynamic_merge(&prep.shared, &prep.twins, &weights).map_err(|e| e.to_string())?;
        for (name, t) in left.iter() {
            let err = t.relative_error(right.tensor(name).map_err(|e| e.to_string())?);
            ensure(err <= 1e-5, || format!("seed {seed} {name}: relative error {err}"))?;
        }
    }
    Ok(())
}

fn small_zoo() -> crate::Result<Zoo> {
    let suite = SuiteConfig {
        tasks: 2,
        n_per_task: 300,
        ..SuiteConfig::default()
    };
    let settings = ExpertSettings {
        pretrain_epochs: 3,
        epochs: 5,
        ..ExpertSettings::default()
    };
    Zoo::build(&suite, &settings)
}

fn exact_recovery_and_grouping() -> Outcome {
    let zoo = small_zoo().map_err(|e| e.to_string())?;
    let prep = twin_preprocess(&zoo.base.params, &zoo.checkpoints, &[0.5, 0.5], usize::MAX).map_err(|e| e.to_string())?;
    for (t, expert) in zoo.checkpoints.iter().enumerate() {
        let mut w = vec![0.0; zoo.tasks()];
        w[t] = 1.0;
        let rebuilt = dynamic_merge(&prep.shared, &prep.twins, &w).map_err(|e| e.to_string())?;
        for (name, x) in expert.iter() {
            let err = rebuilt.tensor(name).map_err(|e| e.to_string())?.relative_error(x);
            ensure(err <= 1e-5, || format!("expert {t} {name}: relative error {err}"))?;
        }
    }
    let cfg = RouterConfig {
        epochs: 2,
        ..RouterConfig::default()
    };
    let sys = build_twin(&zoo, Some(0.5), Compression::Rank(usize::MAX), &cfg).map_err(|e| e.to_string())?;
    let mix = zoo.suite.mixture_test();
    let oracle = run_inference(
        &sys,
        &mix,
        &zoo.ft_test,
        &InferenceOptions {
            mode: InferenceMode::Oracle,
            ..InferenceOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(oracle.per_task_scores == zoo.ft_test, || {
        format!("oracle scores {:?} vs experts {:?}", oracle.per_task_scores, zoo.ft_test)
    })?;
    let per_sample = run_inference(&sys, &mix, &zoo.ft_test, &InferenceOptions::default()).map_err(|e| e.to_string())?;
    let grouped = run_inference(
        &sys,
        &mix,
        &zoo.ft_test,
        &InferenceOptions {
            mode: InferenceMode::Grouped,
            group_count: mix.len(),
            seed: 0,
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(grouped.same_scores(&per_sample), || "grouped degenerate case differs from per-sample".into())
}

fn rank_clamp_lossless() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let d = Delta::new([("w".to_string(), random_tensor(&[5, 9], &mut rng))].into());
    let twin = svd_compress(&d, 999_999).map_err(|e| e.to_string())?;
    let back = crate::compress::decompress(&twin);
    let err = back.get("w").expect("present").relative_error(d.get("w").expect("present"));
    ensure(err <= 1e-5, || format!("full-rank twin relative error {err}"))
}

/// Run every check. Checks are independent and all run even if some fail.
pub fn run() -> Vec<Check> {
    let checks: [NamedCheck; 11] = [
        ("svd truncation residual equals tail norm", eckart_young),
        ("container round trip is byte-stable", container_roundtrip),
        ("axpy identities", axpy_identities),
        ("dare is unbiased", dare_unbiased),
        ("magnitude prune support size", magnitude_support),
        ("storage worked example", storage_example),
        ("router is uniform at init", router_uniform_at_init),
        ("adapter-space twin merge equals folded twin merge", lora_identity),
        ("one-hot full-rank twins recover experts", exact_recovery_and_grouping),
        ("rank clamp is lossless", rank_clamp_lossless),
        ("svd of zero matrix", zero_matrix),
    ];
    checks
        .into_iter()
        .map(|(name, f)| Check { name, outcome: f() })
        .collect()
}

fn zero_matrix() -> Outcome {
    let f = svd(&Tensor::zeros(&[4, 3])).map_err(|e| e.to_string())?;
    ensure(f.s.data().iter().all(|&s| s == 0.0), || format!("singular values {:?}", f.s.data()))
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run() {
            assert!(c.passed(), "{}: {:?}", c.name, c.outcome);
        }
    }
}
