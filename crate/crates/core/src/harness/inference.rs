//! The routed inference loop: embed with the shared expert, route, merge,
//! predict.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::metrics::normalized_score;
use crate::harness::pipeline::TwinSystem;
use crate::harness::report::ExperimentReport;
use crate::merge;
use crate::router::{self, group_weights, RoutingDecision};
use crate::toyzoo::{argmax, Dataset, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    /// One merged model per input.
    PerSample,
    /// One merged model per router-decision group.
    Grouped,
    /// One-hot weights on the item's true task (upper bound).
    Oracle,
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "per-sample" => Ok(InferenceMode::PerSample),
            "grouped" => Ok(InferenceMode::Grouped),
            "oracle" => Ok(InferenceMode::Oracle),
            other => Err(Error::Config(format!("unknown inference mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceOptions {
    pub mode: InferenceMode,
    pub group_count: usize,
    pub seed: u64,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            mode: InferenceMode::PerSample,
            group_count: 20,
            seed: 0,
        }
    }
}

/// Routing decision for every item of `data`.
pub fn route_all(sys: &TwinSystem, data: &Dataset, mode: InferenceMode) -> Result<Vec<RoutingDecision>> {
    let tasks = sys.tasks();
    (0..data.len())
        .map(|i| {
            if mode == InferenceMode::Oracle {
                let t = data.task[i];
                if t >= tasks {
                    return Err(Error::Config(format!("item task {t} has no expert")));
                }
                return Ok(RoutingDecision::one_hot(t, tasks));
            }
            match &sys.router {
                Some(r) => r.route(&router::embed(&sys.shared_model, data.row(i))?),
                None => Ok(RoutingDecision::from_logits(vec![0.0; tasks])),
            }
        })
        .collect()
}

/// Per-item output of routed inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub decisions: Vec<RoutingDecision>,
    /// Merge weights actually used for each item (group weights when grouped).
    pub weights: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    /// Number of distinct merged models built.
    pub merged_models: usize,
}

/// Route every item, merge once per item or group, and predict.
pub fn infer(sys: &TwinSystem, data: &Dataset, opts: &InferenceOptions) -> Result<Inference> {
    let tasks = sys.tasks();
    if let Some(r) = &sys.router {
        if r.tasks() != tasks {
            return Err(Error::Config(format!(
                "router has {} outputs for {tasks} twin vectors",
                r.tasks()
            )));
        }
    }
    let decisions = route_all(sys, data, opts.mode)?;
    let (groups, group_weights_): (Vec<usize>, Vec<Vec<f64>>) = match opts.mode {
        InferenceMode::Grouped => {
            let g = group_weights(&decisions, opts.group_count, opts.seed)?;
            (g.assignment, g.weights)
        }
        _ => ((0..decisions.len()).collect(), decisions.iter().map(|d| d.weights.clone()).collect()),
    };
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    let mut predictions = vec![0usize; data.len()];
    for (g, items) in &members {
        let merged = merge::dynamic_merge_dense(&sys.shared, &sys.dense, &group_weights_[*g])?;
        let model = ToyModel::from_checkpoint(merged)?;
        for &i in items {
            predictions[i] = argmax(&model.logits(data.row(i))?);
        }
    }
    Ok(Inference {
        weights: groups.iter().map(|&g| group_weights_[g].clone()).collect(),
        decisions,
        predictions,
        merged_models: members.len(),
    })
}

/// Run twin-merging inference over a test mixture and score it per task.
pub fn run_inference(sys: &TwinSystem, data: &Dataset, ft_scores: &[f64], opts: &InferenceOptions) -> Result<ExperimentReport> {
    let start = Instant::now();
    let tasks = sys.tasks();
    if ft_scores.len() != tasks {
        return Err(Error::Config(format!(
            "{} reference scores for {tasks} tasks",
            ft_scores.len()
        )));
    }
    let out = infer(sys, data, opts)?;
    let mut correct = vec![0usize; tasks];
    let mut total = vec![0usize; tasks];
    for i in 0..data.len() {
        let t = data.task[i];
        if t >= tasks {
            return Err(Error::Config(format!("item task {t} has no expert")));
        }
        total[t] += 1;
        if out.predictions[i] == data.y[i] {
            correct[t] += 1;
        }
    }
    if let Some(t) = total.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("test mixture has no items for task {t}")));
    }
    let scores: Vec<f64> = correct.iter().zip(&total).map(|(&c, &n)| c as f64 / n as f64).collect();
    let routed = out.decisions.iter().zip(&data.task).filter(|(d, &t)| d.argmax() == t).count();
    Ok(ExperimentReport {
        method: format!("twin/{}", mode_name(opts.mode)),
        normalized_score: normalized_score(&scores, ft_scores)?,
        per_task_scores: scores,
        reference_scores: ft_scores.to_vec(),
        merged_models: out.merged_models,
        routing_accuracy: Some(routed as f64 / data.len() as f64),
        wall_time_secs: start.elapsed().as_secs_f64(),
        config: serde_json::json!({
            "mode": mode_name(opts.mode),
            "group_count": opts.group_count,
            "seed": opts.seed,
            "gamma": sys.gamma,
        }),
        storage: None,
    })
}

pub fn mode_name(m: InferenceMode) -> &'static str {
    match m {
        InferenceMode::PerSample => "per-sample",
        InferenceMode::Grouped => "grouped",
        InferenceMode::Oracle => "oracle",
    }
}
