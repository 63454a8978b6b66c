//! Merge algorithms: weight averaging, task arithmetic, TIES, their DARE
//! variants, and the twin-merging pre-calculation and dynamic merge.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Delta};
use crate::compress::{self, TwinVector};
use crate::error::{Error, Result};
use crate::linalg::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Average,
    TaskArithmetic,
    Ties,
    Twin,
}

impl std::str::FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "average" | "weight_average" => Ok(MergeMethod::Average),
            "task_arithmetic" => Ok(MergeMethod::TaskArithmetic),
            "ties" => Ok(MergeMethod::Ties),
            "twin" => Ok(MergeMethod::Twin),
            other => Err(Error::Argument(format!("unknown merge method {other:?}"))),
        }
    }
}

impl std::fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MergeMethod::Average => "average",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Ties => "ties",
            MergeMethod::Twin => "twin",
        };
        f.write_str(s)
    }
}

/// DARE drop rate applied in the "w/ DARE" variants.
pub const DEFAULT_DARE_RATE: f64 = 0.7;

/// Coefficient grid searched on validation data.
pub fn gamma_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    /// Per-task coefficients. Empty means "search on validation data".
    #[serde(default)]
    pub gammas: Vec<f64>,
    #[serde(default = "default_ties_density")]
    pub ties_density: f64,
    #[serde(default = "default_ties_lambda")]
    pub ties_lambda: f64,
    #[serde(default)]
    pub dare_drop_rate: Option<f64>,
    #[serde(default = "default_twin_rank")]
    pub twin_rank: usize,
}

fn default_ties_density() -> f64 {
    0.2
}

fn default_ties_lambda() -> f64 {
    1.0
}

fn default_twin_rank() -> usize {
    usize::MAX
}

impl Default for MergeRecipe {
    fn default() -> Self {
        Self {
            method: MergeMethod::Twin,
            gammas: Vec::new(),
            ties_density: default_ties_density(),
            ties_lambda: default_ties_lambda(),
            dare_drop_rate: None,
            twin_rank: default_twin_rank(),
        }
    }
}

impl MergeRecipe {
    pub fn validate(&self, tasks: usize) -> Result<()> {
        let needs_gammas = matches!(self.method, MergeMethod::TaskArithmetic | MergeMethod::Twin);
        if needs_gammas && !self.gammas.is_empty() && self.gammas.len() != tasks {
            return Err(Error::Argument(format!(
                "{} gammas for {tasks} tasks",
                self.gammas.len()
            )));
        }
        if self.gammas.iter().any(|g| !g.is_finite()) {
            return Err(Error::Argument("gammas must be finite".into()));
        }
        if !(self.ties_density > 0.0 && self.ties_density <= 1.0) {
            return Err(Error::Argument(format!("ties density {} outside (0, 1]", self.ties_density)));
        }
        if !self.ties_lambda.is_finite() {
            return Err(Error::Argument("ties lambda must be finite".into()));
        }
        if let Some(p) = self.dare_drop_rate {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Argument(format!("drop rate {p} outside [0, 1)")));
            }
        }
        if self.twin_rank == 0 {
            return Err(Error::Argument("twin rank must be at least 1".into()));
        }
        Ok(())
    }
}

/// Names frozen by any participant. Their tensors must agree bit for bit.
fn check_frozen(base: Option<&Checkpoint>, experts: &[Checkpoint]) -> Result<BTreeSet<String>> {
    let mut frozen = BTreeSet::new();
    for c in base.into_iter().chain(experts) {
        frozen.extend(c.frozen());
    }
    let reference = base.or(experts.first());
    if let Some(reference) = reference {
        for name in &frozen {
            let want = reference.tensor(name)?;
            for e in experts {
                if e.tensor(name)? != want {
                    return Err(Error::Compat(format!(
                        "frozen tensor {name:?} differs between checkpoints"
                    )));
                }
            }
        }
    }
    Ok(frozen)
}

fn restore_frozen(
    mut merged: Checkpoint,
    source: &Checkpoint,
    frozen: &BTreeSet<String>,
) -> Result<Checkpoint> {
    for name in frozen {
        merged.set(name, source.tensor(name)?.clone())?;
    }
    Ok(merged)
}

fn check_all_compatible(base: &Checkpoint, experts: &[Checkpoint]) -> Result<()> {
    for e in experts {
        base.check_compatible(e)?;
    }
    Ok(())
}

fn task_deltas(base: &Checkpoint, experts: &[Checkpoint]) -> Result<Vec<Delta>> {
    experts.iter().map(|e| e.diff(base)).collect()
}

/// Per-tensor arithmetic mean of the experts.
pub fn weight_average(experts: &[Checkpoint]) -> Result<Checkpoint> {
    let first = experts
        .first()
        .ok_or_else(|| Error::Argument("weight averaging needs at least one checkpoint".into()))?;
    check_all_compatible(first, experts)?;
    let frozen = check_frozen(None, experts)?;
    let n = experts.len() as f64;
    let mut params = BTreeMap::new();
    for (name, t) in first.iter() {
        let mut acc = vec![0.0f64; t.len()];
        for e in experts {
            for (a, &x) in acc.iter_mut().zip(e.tensor(name)?.data()) {
                *a += x as f64;
            }
        }
        let data = acc.into_iter().map(|a| (a / n) as f32).collect();
        params.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?);
    }
    let mut out = Checkpoint::new(params)?;
    *out.meta_mut() = first.meta().clone();
    restore_frozen(out, first, &frozen)
}

/// `base + Σ γₜ (expertₜ − base)`.
pub fn task_arithmetic(base: &Checkpoint, experts: &[Checkpoint], gammas: &[f64]) -> Result<Checkpoint> {
    if gammas.len() != experts.len() {
        return Err(Error::Argument(format!(
            "{} gammas for {} experts",
            gammas.len(),
            experts.len()
        )));
    }
    check_all_compatible(base, experts)?;
    let frozen = check_frozen(Some(base), experts)?;
    let deltas = task_deltas(base, experts)?;
    let refs: Vec<&Delta> = deltas.iter().collect();
    let merged = base.axpy(&refs, gammas)?;
    restore_frozen(merged, base, &frozen)
}

/// TIES: trim each delta to its top-`density` magnitudes, elect a sign per
/// coordinate from the sum of trimmed values, average the entries that agree
/// with it, and add `lambda` times the result to the base.
///
/// A coordinate whose trimmed sum is exactly zero merges to zero.
pub fn ties_merge(base: &Checkpoint, experts: &[Checkpoint], density: f64, lambda: f64) -> Result<Checkpoint> {
    check_all_compatible(base, experts)?;
    let frozen = check_frozen(Some(base), experts)?;
    let deltas = task_deltas(base, experts)?;
    ties_from_deltas(base, &deltas, density, lambda, &frozen)
}

fn ties_from_deltas(
    base: &Checkpoint,
    deltas: &[Delta],
    density: f64,
    lambda: f64,
    frozen: &BTreeSet<String>,
) -> Result<Checkpoint> {
    if !lambda.is_finite() {
        return Err(Error::Argument("ties lambda must be finite".into()));
    }
    let trimmed = deltas
        .iter()
        .map(|d| compress::magnitude_prune(d, density))
        .collect::<Result<Vec<_>>>()?;
    let merged = trimmed
        .first()
        .map(|first| {
            first.map_tensors(|name, t| {
                let columns: Vec<&[f32]> = trimmed.iter().map(|d| d.get(name).expect("same layout").data()).collect();
                let data = (0..t.len())
                    .map(|i| {
                        let sum: f64 = columns.iter().map(|c| c[i] as f64).sum();
                        if sum == 0.0 {
                            return 0.0;
                        }
                        let (total, count) = columns
                            .iter()
                            .map(|c| c[i] as f64)
                            .filter(|&v| v != 0.0 && v.signum() == sum.signum())
                            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
                        if count == 0 {
                            0.0
                        } else {
                            (total / count as f64) as f32
                        }
                    })
                    .collect();
                Tensor::new(t.shape().to_vec(), data)
            })
        })
        .transpose()?;
    let out = match merged {
        Some(m) => base.axpy(&[&m], &[lambda])?,
        None => base.clone(),
    };
    restore_frozen(out, base, frozen)
}

/// Shared expert plus one compressed exclusive vector per task.
#[derive(Debug, Clone)]
pub struct TwinPrep {
    pub shared: Checkpoint,
    pub twins: Vec<TwinVector>,
}

/// Twin-merging pre-calculation, run once per expert set:
/// `shared = base + Σ γₜ(θₜ − base)` and `twinₜ = SVD_r(θₜ − shared)`.
pub fn twin_preprocess(base: &Checkpoint, experts: &[Checkpoint], gammas: &[f64], rank: usize) -> Result<TwinPrep> {
    if rank == 0 {
        return Err(Error::Argument("twin rank must be at least 1".into()));
    }
    let shared = task_arithmetic(base, experts, gammas)?;
    twins_from_shared(shared, experts, |d| compress::svd_compress(d, rank))
}

/// Build twins against an arbitrary shared expert with a caller-chosen compressor.
pub fn twins_from_shared(
    shared: Checkpoint,
    experts: &[Checkpoint],
    mut compress_fn: impl FnMut(&Delta) -> Result<TwinVector>,
) -> Result<TwinPrep> {
    let frozen = check_frozen(Some(&shared), experts)?;
    let mut twins = Vec::with_capacity(experts.len());
    for (t, e) in experts.iter().enumerate() {
        let mut d = e.diff(&shared)?;
        if !frozen.is_empty() {
            d = d.map_tensors(|name, x| {
                Ok(if frozen.contains(name) {
                    Tensor::zeros(x.shape())
                } else {
                    x.clone()
                })
            })?;
        }
        twins.push(compress_fn(&d)?.with_source("expert", &t.to_string()));
    }
    Ok(TwinPrep { shared, twins })
}

/// `shared + Σ wₜ · decompress(twinₜ)`.
pub fn dynamic_merge(shared: &Checkpoint, twins: &[TwinVector], weights: &[f64]) -> Result<Checkpoint> {
    let dense: Vec<Delta> = twins.iter().map(compress::decompress).collect();
    dynamic_merge_dense(shared, &dense, weights)
}

/// [`dynamic_merge`] over twins that were already decompressed.
pub fn dynamic_merge_dense(shared: &Checkpoint, twins: &[Delta], weights: &[f64]) -> Result<Checkpoint> {
    if twins.len() != weights.len() {
        return Err(Error::Compat(format!(
            "{} twin vectors but {} routing weights",
            twins.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Numeric("routing weights must be finite".into()));
    }
    let refs: Vec<&Delta> = twins.iter().collect();
    let merged = shared.axpy(&refs, weights)?;
    let frozen = shared.frozen();
    restore_frozen(merged, shared, &frozen)
}

/// Twin merging carried out on adapter deltas instead of folded checkpoints:
/// `base + [s + Σ wₜ·SVD_r(aₜ − s)]` with the shared adapter
/// `s = Σ γₜ aₜ`. For adapters on the same layers this equals
/// [`twin_preprocess`] + [`dynamic_merge`] on `base + aₜ` up to rounding.
pub fn adapter_twin_merge(
    base: &Checkpoint,
    adapters: &[Delta],
    gammas: &[f64],
    rank: usize,
    weights: &[f64],
) -> Result<Checkpoint> {
    if adapters.len() != gammas.len() {
        return Err(Error::Argument(format!(
            "{} gammas for {} adapters",
            gammas.len(),
            adapters.len()
        )));
    }
    let zero = base.zeros_like();
    let refs: Vec<&Delta> = adapters.iter().collect();
    let shared = zero.axpy(&refs, gammas)?;
    let twins = adapters
        .iter()
        .map(|a| {
            let d = a.clone().into_checkpoint()?.diff(&shared)?;
            Ok(compress::decompress(&compress::svd_compress(&d, rank)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let merged_adapter = dynamic_merge_dense(&shared, &twins, weights)?;
    base.add_delta(&merged_adapter.diff(&zero)?)
}

/// Static merge for the non-twin recipes, with optional DARE pre-sparsification
/// of every task delta.
pub fn static_merge(recipe: &MergeRecipe, base: &Checkpoint, experts: &[Checkpoint], seed: u64) -> Result<Checkpoint> {
    recipe.validate(experts.len())?;
    if experts.is_empty() {
        return Err(Error::Argument("no experts to merge".into()));
    }
    let gammas = if recipe.gammas.is_empty() {
        vec![1.0 / experts.len() as f64; experts.len()]
    } else {
        recipe.gammas.clone()
    };
    let dropped;
    let experts = match recipe.dare_drop_rate {
        Some(p) if p > 0.0 => {
            dropped = dare_experts(base, experts, p, seed)?;
            dropped.as_slice()
        }
        _ => experts,
    };
    match recipe.method {
        MergeMethod::Average => weight_average(experts),
        MergeMethod::TaskArithmetic => task_arithmetic(base, experts, &gammas),
        MergeMethod::Ties => ties_merge(base, experts, recipe.ties_density, recipe.ties_lambda),
        MergeMethod::Twin => Err(Error::Argument(
            "twin merging is input-conditioned; use twin_preprocess and dynamic_merge".into(),
        )),
    }
}

/// Apply DARE to each expert's task delta and rebuild the experts.
/// Expert `t` uses seed `seed + t`.
pub fn dare_experts(base: &Checkpoint, experts: &[Checkpoint], drop_rate: f64, seed: u64) -> Result<Vec<Checkpoint>> {
    experts
        .iter()
        .enumerate()
        .map(|(t, e)| {
            let d = compress::dare_drop(&e.diff(base)?, drop_rate, seed.wrapping_add(t as u64))?;
            let mut out = base.add_delta(&d)?;
            *out.meta_mut() = e.meta().clone();
            Ok(out)
        })
        .collect()
}
