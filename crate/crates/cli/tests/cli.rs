use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use twinforge_core::compress::decompress;
use twinforge_core::harness::report::read_csv;
use twinforge_core::harness::RunConfig;
use twinforge_core::{Checkpoint, TwinVector};

const SMALL: &str = r#"{
  "suite": {"tasks": 2, "n_per_task": 400},
  "experts": {"pretrain_epochs": 2, "epochs": 3},
  "seeds": [5]
}"#;

struct Env {
    out: tempfile::TempDir,
    config: PathBuf,
}

impl Env {
    fn new(config: &str) -> Env {
        let out = tempfile::tempdir().unwrap();
        let path = out.path().join("run.json");
        fs::write(&path, config).unwrap();
        Env { out, config: path }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_twinforge"))
            .args(args)
            .arg("--config")
            .arg(&self.config)
            .env("TWINFORGE_OUT", self.out.path().join("out"))
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let o = self.run(args);
        assert!(
            o.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        o
    }

    /// The single run directory under the output root.
    fn run_dir(&self) -> PathBuf {
        let dirs: Vec<PathBuf> = fs::read_dir(self.out.path().join("out"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        assert_eq!(dirs.len(), 1, "{dirs:?}");
        dirs[0].clone()
    }

    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.run_dir().join(format!("seed-{seed}"))
    }
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.clone(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn task_arithmetic_merge_equals_axpy() {
    let env = Env::new(SMALL);
    env.ok(&["gen-suite"]);
    env.ok(&["train-experts"]);
    env.ok(&["merge", "--method", "task-arithmetic", "--gamma", "0.3"]);
    let dir = env.seed_dir(5);
    let base = Checkpoint::load(&dir.join("base.safetensors")).unwrap();
    let deltas: Vec<_> = (0..2)
        .map(|t| {
            Checkpoint::load(&dir.join(format!("expert-{t}.safetensors")))
                .unwrap()
                .diff(&base)
                .unwrap()
        })
        .collect();
    let want = base.axpy(&[&deltas[0], &deltas[1]], &[0.3, 0.3]).unwrap();
    let got = Checkpoint::load(&dir.join("merged-task-arithmetic.safetensors")).unwrap();
    assert_eq!(got.params(), want.params());
}

#[test]
fn oversized_rank_is_clamped_with_warning_and_lossless() {
    let env = Env::new(SMALL);
    env.ok(&["gen-suite"]);
    env.ok(&["train-experts"]);
    let o = env.ok(&["twin-prep", "--rank", "999999"]);
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("warning") && stderr.contains("clamped"), "{stderr}");
    let dir = env.seed_dir(5);
    let shared = Checkpoint::load(&dir.join("shared.safetensors")).unwrap();
    for t in 0..2 {
        let expert = Checkpoint::load(&dir.join(format!("expert-{t}.safetensors"))).unwrap();
        let twin = TwinVector::load(&dir.join(format!("twin-{t}.safetensors"))).unwrap();
        let rebuilt = shared.add_delta(&decompress(&twin)).unwrap();
        for (name, x) in expert.iter() {
            let err = rebuilt.tensor(name).unwrap().relative_error(x);
            assert!(err <= 1e-5, "task {t} {name}: {err}");
        }
    }
}

#[test]
fn grouped_eval_is_close_to_per_sample_on_default_suite() {
    let env = Env::new("{}");
    for cmd in ["gen-suite", "train-experts", "twin-prep", "train-router"] {
        env.ok(&[cmd]);
    }
    env.ok(&["eval", "--mode", "per-sample"]);
    env.ok(&["eval", "--mode", "grouped", "--group-count", "20"]);
    let summary = |mode: &str| {
        read_csv(&env.run_dir().join(format!("eval-{mode}.csv")))
            .unwrap()
            .into_iter()
            .find(|r| r.is_summary())
            .unwrap()
            .score
    };
    let (per_sample, grouped) = (summary("per-sample"), summary("grouped"));
    assert!((per_sample - grouped).abs() <= 7.0, "{per_sample} vs {grouped}");
}

#[test]
fn reruns_are_byte_identical() {
    let env = Env::new(SMALL);
    let steps: [&[&str]; 6] = [
        &["gen-suite"],
        &["train-experts"],
        &["merge", "--method", "ties", "--drop-rate", "0.7"],
        &["twin-prep", "--rank", "4"],
        &["train-router"],
        &["eval", "--mode", "grouped", "--group-count", "5"],
    ];
    for s in steps {
        env.ok(s);
    }
    let first = snapshot(&env.out.path().join("out"));
    for s in steps {
        env.ok(s);
    }
    assert_eq!(first, snapshot(&env.out.path().join("out")));
}

#[test]
fn config_echo_is_written_first_and_lists_defaults() {
    let env = Env::new(SMALL);
    // Fails for lack of artifacts, after the echo.
    let o = env.run(&["eval"]);
    assert_eq!(o.status.code(), Some(2));
    let echo = fs::read_to_string(env.run_dir().join("config.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&echo).unwrap();
    for key in ["suite", "experts", "merge", "router", "eval", "output_dir", "seeds"] {
        assert!(value.get(key).is_some(), "echo lacks {key}");
    }
    assert!(value["router"].get("lr").is_some());
    let parsed = RunConfig::from_json(&echo).unwrap();
    assert_eq!(parsed, RunConfig::from_json(SMALL).unwrap());
}

#[test]
fn output_env_overrides_output_dir() {
    let env = Env::new(r#"{"output_dir": "/nonexistent/never/used"}"#);
    env.ok(&["storage"]);
    assert!(env.run_dir().join("storage.json").is_file());
}

#[test]
fn exit_codes() {
    let env = Env::new(SMALL);
    assert_eq!(env.run(&["merge", "--method", "twin"]).status.code(), Some(1));
    assert_eq!(env.run(&["merge", "--method", "bogus"]).status.code(), Some(1));
    assert_eq!(env.run(&["eval", "--mode", "bogus"]).status.code(), Some(1));
    assert_eq!(env.run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(env.run(&["train-experts"]).status.code(), Some(2));
    let o = env.run(&["merge", "--method", "average"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());

    let bad = Env::new(r#"{"suite": {"tasks": 2}, "sweet": 1}"#);
    assert_eq!(bad.run(&["gen-suite"]).status.code(), Some(1));

    let small = Env::new(SMALL);
    small.ok(&["gen-suite"]);
    small.ok(&["train-experts"]);
    // Coefficients this large overflow f32 in the merged weights.
    let o = small.run(&["merge", "--method", "task-arithmetic", "--gamma", "1e300"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    let negative = Env::new(r#"{"experts": {"lr": -0.1}}"#);
    assert_eq!(negative.run(&["gen-suite"]).status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let o = Command::new(env!("CARGO_BIN_EXE_twinforge")).arg("--help").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("twin-prep"));
}

#[test]
fn selftest_passes() {
    let env = Env::new("{}");
    let o = env.ok(&["selftest"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("all 11 checks passed"));
}
