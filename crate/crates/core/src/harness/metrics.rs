//! Normalized score and storage accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean over tasks of `score / reference`, times 100.
pub fn normalized_score(scores: &[f64], references: &[f64]) -> Result<f64> {
    if scores.len() != references.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} reference scores",
            scores.len(),
            references.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Metric("no tasks to score".into()));
    }
    if let Some(r) = references.iter().find(|&&r| !(r > 0.0)) {
        return Err(Error::Metric(format!("reference score {r} is not positive")));
    }
    let sum: f64 = scores.iter().zip(references).map(|(s, r)| s / r).sum();
    Ok(100.0 * sum / scores.len() as f64)
}

/// Byte counts for storing fine-tuned experts, one merged model, or a twin
/// system, at two bytes per parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageAccount {
    pub tasks: u64,
    /// total parameters per model, `P = P_a + P_f`
    pub params: u64,
    /// activated (fine-tuned) parameters
    pub active: u64,
    /// frozen parameters
    pub frozen: u64,
    /// router parameters
    pub router: u64,
    /// compression ratio in (0, 1]
    pub ratio: f64,
    pub bytes_finetuned: u64,
    pub bytes_single: u64,
    pub bytes_twin: u64,
}

/// Evaluate the three storage formulas exactly:
/// `2(T·P_a + P_f)`, `2P`, and `2T·⌈k·P_a⌉ + 2P + P_r`.
pub fn storage_report(tasks: u64, params: u64, active: u64, frozen: u64, router: u64, ratio: f64) -> Result<StorageAccount> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Argument(format!("compression ratio {ratio} outside (0, 1]")));
    }
    if active.checked_add(frozen) != Some(params) {
        return Err(Error::Argument(format!(
            "active ({active}) + frozen ({frozen}) must equal total parameters ({params})"
        )));
    }
    let overflow = || Error::Argument("storage byte count overflows u64".into());
    // ⌈k·P_a⌉ with a small guard so 0.001 · 1e6 counts as exactly 1000.
    let compressed = ((ratio * active as f64) - 1e-9).ceil().max(0.0) as u64;
    let bytes_finetuned = tasks
        .checked_mul(active)
        .and_then(|x| x.checked_add(frozen))
        .and_then(|x| x.checked_mul(2))
        .ok_or_else(overflow)?;
    let bytes_single = params.checked_mul(2).ok_or_else(overflow)?;
    let bytes_twin = tasks
        .checked_mul(compressed)
        .and_then(|x| x.checked_mul(2))
        .and_then(|x| x.checked_add(bytes_single))
        .and_then(|x| x.checked_add(router))
        .ok_or_else(overflow)?;
    Ok(StorageAccount {
        tasks,
        params,
        active,
        frozen,
        router,
        ratio,
        bytes_finetuned,
        bytes_single,
        bytes_twin,
    })
}
