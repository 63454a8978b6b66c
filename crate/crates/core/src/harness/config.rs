//! The JSON run configuration shared by the command line and tests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::inference::InferenceMode;
use crate::harness::pipeline::ExpertSettings;
use crate::harness::report::config_hash;
use crate::merge::MergeRecipe;
use crate::router::RouterConfig;
use crate::toyzoo::SuiteConfig;

/// Environment variable that overrides `output_dir`.
pub const OUT_ENV: &str = "TWINFORGE_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Mixture weights αₜ for the test mixture; empty means uniform.
    #[serde(default)]
    pub alphas: Vec<f64>,
    #[serde(default = "d_mode")]
    pub mode: InferenceMode,
    #[serde(default = "d_group_count")]
    pub group_count: usize,
}

fn d_mode() -> InferenceMode {
    InferenceMode::PerSample
}
fn d_group_count() -> usize {
    20
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alphas: Vec::new(),
            mode: d_mode(),
            group_count: d_group_count(),
        }
    }
}

/// Every section has defaults; unknown keys are rejected. `suite.seed` is
/// replaced by each entry of `seeds` at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub suite: SuiteConfig,
    #[serde(default)]
    pub experts: ExpertSettings,
    #[serde(default)]
    pub merge: MergeRecipe,
    #[serde(default)]
    pub router: RouterConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "d_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
}

fn d_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn d_seeds() -> Vec<u64> {
    vec![0]
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            suite: SuiteConfig::default(),
            experts: ExpertSettings::default(),
            merge: MergeRecipe::default(),
            router: RouterConfig::default(),
            eval: EvalConfig::default(),
            output_dir: d_output_dir(),
            seeds: d_seeds(),
        }
    }
}

/// The part of a config that determines the trained artifacts.
#[derive(Serialize)]
struct WorldKey<'a> {
    suite: &'a SuiteConfig,
    experts: &'a ExpertSettings,
    seeds: &'a [u64],
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.suite.tasks < 2 {
            return Err(Error::Config("suite needs at least 2 tasks".into()));
        }
        if !self.eval.alphas.is_empty() && self.eval.alphas.len() != self.suite.tasks {
            return Err(Error::Config(format!(
                "{} mixture weights for {} tasks",
                self.eval.alphas.len(),
                self.suite.tasks
            )));
        }
        let rates = [
            ("experts.lr", self.experts.lr),
            ("experts.pretrain_lr", self.experts.pretrain_lr),
            ("router.lr", self.router.lr),
        ];
        if let Some((name, lr)) = rates.iter().find(|(_, lr)| !(lr.is_finite() && *lr > 0.0)) {
            return Err(Error::Config(format!("{name} must be positive and finite, got {lr}")));
        }
        if self.experts.hidden == 0 || self.router.hidden == 0 || self.router.batch_size == 0 {
            return Err(Error::Config("hidden sizes and batch size must be at least 1".into()));
        }
        if self.eval.group_count == 0 {
            return Err(Error::Config("group_count must be at least 1".into()));
        }
        self.merge
            .validate(self.suite.tasks)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn echo(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    /// `output_dir`, or the value of [`OUT_ENV`] when set.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    /// Run directory: the output root joined with a hash of the suite,
    /// expert settings and seeds, so every command of one pipeline shares it
    /// while merge, router and eval knobs vary.
    pub fn run_dir(&self) -> Result<PathBuf> {
        let key = WorldKey {
            suite: &self.suite,
            experts: &self.experts,
            seeds: &self.seeds,
        };
        Ok(self.output_root().join(config_hash(&key)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn non_positive_rates_are_rejected() {
        assert!(matches!(
            RunConfig::from_json(r#"{"experts": {"lr": -1}}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"router": {"lr": 0}}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"sweet": {}}"#), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_json(r#"{"suite": {"taks": 3}}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn echo_roundtrips_with_explicit_defaults() {
        let echo = RunConfig::default().echo().unwrap();
        for key in ["suite", "experts", "merge", "router", "eval", "output_dir", "seeds", "group_count"] {
            assert!(echo.contains(&format!("\"{key}\"")), "{key} missing from echo");
        }
        assert_eq!(RunConfig::from_json(&echo).unwrap(), RunConfig::default());
    }

    #[test]
    fn run_dir_ignores_merge_knobs() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.merge.ties_density = 0.5;
        b.eval.group_count = 3;
        assert_eq!(a.run_dir().unwrap(), b.run_dir().unwrap());
        let mut c = a.clone();
        c.seeds = vec![1];
        assert_ne!(a.run_dir().unwrap(), c.run_dir().unwrap());
    }
}
