//! Sparsification of deltas and the compressed twin vector.
//!
//! Three ways to shrink a delta: keep the largest magnitudes, drop at random
//! and rescale (DARE), or keep a rank-r SVD of each matrix.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Delta;
use crate::container::{self, Container};
use crate::error::{Error, Result};
use crate::linalg::{self, SvdFactors, Tensor};

/// One tensor of a twin vector.
#[derive(Debug, Clone, PartialEq)]
pub enum TwinEntry {
    Factored(SvdFactors),
    Dense(Tensor),
}

impl TwinEntry {
    pub fn param_count(&self) -> usize {
        match self {
            TwinEntry::Factored(f) => f.param_count(),
            TwinEntry::Dense(t) => t.len(),
        }
    }

    pub fn to_dense(&self) -> Tensor {
        match self {
            TwinEntry::Factored(f) => f.reconstruct(),
            TwinEntry::Dense(t) => t.clone(),
        }
    }
}

/// Compressed exclusive knowledge of one expert.
///
/// `rank` is the requested rank; each factored entry holds
/// `min(rank, d_out, d_in)` triplets. Twins built from magnitude or random
/// sparsification hold only dense entries and have no rank.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinVector {
    pub entries: BTreeMap<String, TwinEntry>,
    pub rank: Option<usize>,
    pub source_meta: BTreeMap<String, String>,
}

impl TwinVector {
    pub fn from_dense(d: &Delta) -> TwinVector {
        TwinVector {
            entries: d
                .iter()
                .map(|(k, t)| (k.clone(), TwinEntry::Dense(t.clone())))
                .collect(),
            rank: None,
            source_meta: BTreeMap::new(),
        }
    }

    /// Stored parameter count: `r·(d_out + d_in + 1)` per factored matrix plus
    /// the length of every dense tensor.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(TwinEntry::param_count).sum()
    }

    pub fn with_source(mut self, key: &str, value: &str) -> Self {
        self.source_meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_container(&self) -> Container {
        let mut tensors = BTreeMap::new();
        for (name, e) in &self.entries {
            match e {
                TwinEntry::Factored(f) => {
                    tensors.insert(format!("{name}.u"), f.u.clone());
                    tensors.insert(format!("{name}.s"), f.s.clone());
                    tensors.insert(format!("{name}.v"), f.v.clone());
                }
                TwinEntry::Dense(t) => {
                    tensors.insert(name.clone(), t.clone());
                }
            }
        }
        let mut meta = self.source_meta.clone();
        meta.insert("kind".into(), "twin".into());
        meta.insert(
            "rank".into(),
            self.rank.map_or_else(|| "dense".to_string(), |r| r.to_string()),
        );
        Container { tensors, meta }
    }

    pub fn from_container(c: Container) -> Result<TwinVector> {
        if c.meta.get("kind").map(String::as_str) != Some("twin") {
            return Err(Error::Format("container is not a twin vector".into()));
        }
        let rank = match c.meta.get("rank").map(String::as_str) {
            Some("dense") => None,
            Some(r) => Some(
                r.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad rank metadata {r:?}")))?,
            ),
            None => return Err(Error::Format("twin vector missing rank metadata".into())),
        };
        let mut source_meta = c.meta.clone();
        source_meta.remove("kind");
        source_meta.remove("rank");

        let mut tensors = c.tensors;
        let mut entries = BTreeMap::new();
        let factored: Vec<String> = tensors
            .keys()
            .filter_map(|k| k.strip_suffix(".s").map(String::from))
            .filter(|base| {
                tensors.contains_key(&format!("{base}.u")) && tensors.contains_key(&format!("{base}.v"))
            })
            .collect();
        for base in factored {
            let u = tensors.remove(&format!("{base}.u")).expect("checked");
            let s = tensors.remove(&format!("{base}.s")).expect("checked");
            let v = tensors.remove(&format!("{base}.v")).expect("checked");
            let (rows, ru) = u.dims2()?;
            let (cols, rv) = v.dims2()?;
            if ru != s.len() || rv != s.len() {
                return Err(Error::Format(format!("factor ranks disagree for {base:?}")));
            }
            entries.insert(
                base,
                TwinEntry::Factored(SvdFactors {
                    u,
                    s,
                    v,
                    original_shape: (rows, cols),
                }),
            );
        }
        for (name, t) in tensors {
            entries.insert(name, TwinEntry::Dense(t));
        }
        Ok(TwinVector {
            entries,
            rank,
            source_meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write(&self.to_container(), path)
    }

    pub fn load(path: &Path) -> Result<TwinVector> {
        TwinVector::from_container(container::read(path)?)
    }
}

/// Number of entries kept at a given density: `⌈density·n⌉`, at least one.
pub fn kept_count(density: f64, n: usize) -> usize {
    // Guard against 0.3 * 10 = 3.0000000000000004 style round-up.
    let k = (density * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

/// Keep the `⌈density·n⌉` largest-magnitude entries of each tensor.
///
/// Equal magnitudes keep the lower flat index. Kept values are not rescaled.
pub fn magnitude_prune(d: &Delta, density: f64) -> Result<Delta> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Argument(format!("density {density} outside (0, 1]")));
    }
    d.map_tensors(|_, t| Ok(prune_tensor(t, density)))
}

pub(crate) fn prune_tensor(t: &Tensor, density: f64) -> Tensor {
    let n = t.len();
    let keep = kept_count(density, n);
    if keep == n {
        return t.clone();
    }
    let data = t.data();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| data[b].abs().total_cmp(&data[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0f32; n];
    for &i in &order[..keep] {
        out[i] = data[i];
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

/// Stable 64-bit FNV-1a, used to derive a per-tensor RNG stream.
pub(crate) fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(name_hash(name));
    rng
}

/// Drop each entry with probability `drop_rate` and divide survivors by
/// `1 − drop_rate`, so the expected output equals the input.
pub fn dare_drop(d: &Delta, drop_rate: f64, seed: u64) -> Result<Delta> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::Argument(format!("drop rate {drop_rate} outside [0, 1)")));
    }
    if drop_rate == 0.0 {
        return Ok(d.clone());
    }
    let keep = 1.0 - drop_rate;
    d.map_tensors(|name, t| {
        let mut rng = tensor_rng(seed, name);
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if rng.random::<f64>() < drop_rate {
                    0.0
                } else {
                    (v as f64 / keep) as f32
                }
            })
            .collect();
        Tensor::new(t.shape().to_vec(), data)
    })
}

/// Rank-r SVD of every matrix in the delta; vectors stay dense.
///
/// The rank is clamped per tensor to `min(d_out, d_in)`.
pub fn svd_compress(d: &Delta, rank: usize) -> Result<TwinVector> {
    if rank == 0 {
        return Err(Error::Argument("twin rank must be at least 1".into()));
    }
    let mut entries = BTreeMap::new();
    for (name, t) in d.iter() {
        let entry = if t.is_matrix() {
            let (rows, cols) = t.dims2()?;
            let r = rank.min(rows.min(cols));
            let full = linalg::svd(t)?;
            TwinEntry::Factored(linalg::truncate(&full, r)?)
        } else {
            TwinEntry::Dense(t.clone())
        };
        entries.insert(name.clone(), entry);
    }
    Ok(TwinVector {
        entries,
        rank: Some(rank),
        source_meta: BTreeMap::new(),
    })
}

/// Rank that keeps a `d_out × d_in` matrix within `(1 − sparsity)` of its
/// dense parameter count. Zero sparsity means lossless (full rank).
pub fn rank_for_sparsity(rows: usize, cols: usize, sparsity: f64) -> usize {
    let full = rows.min(cols);
    if sparsity <= 0.0 {
        return full;
    }
    let budget = (1.0 - sparsity) * (rows * cols) as f64;
    let r = (budget / (rows + cols + 1) as f64 + 1e-9).floor() as usize;
    r.clamp(1, full)
}

/// Like [`svd_compress`] but with a per-tensor rank chosen from a sparsity rate.
pub fn svd_compress_sparsity(d: &Delta, sparsity: f64) -> Result<TwinVector> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Argument(format!("sparsity {sparsity} outside [0, 1)")));
    }
    let mut entries = BTreeMap::new();
    let mut max_rank = 1;
    for (name, t) in d.iter() {
        let entry = if t.is_matrix() {
            let (rows, cols) = t.dims2()?;
            let r = rank_for_sparsity(rows, cols, sparsity);
            max_rank = max_rank.max(r);
            TwinEntry::Factored(linalg::truncate(&linalg::svd(t)?, r)?)
        } else {
            TwinEntry::Dense(t.clone())
        };
        entries.insert(name.clone(), entry);
    }
    Ok(TwinVector {
        entries,
        rank: Some(max_rank),
        source_meta: BTreeMap::new(),
    })
}

/// Expand a twin vector back into a dense delta.
/// Twin vector keeping the top `1 − sparsity` magnitudes of every matrix;
/// 1-D tensors stay dense, as in SVD twins.
pub fn magnitude_compress(d: &Delta, sparsity: f64) -> Result<TwinVector> {
    let pruned = magnitude_prune(d, 1.0 - sparsity)?;
    Ok(TwinVector::from_dense(&keep_vectors_dense(d, pruned)?))
}

/// Twin vector from DARE at drop rate `sparsity` on every matrix; 1-D
/// tensors stay dense, as in SVD twins.
pub fn bernoulli_compress(d: &Delta, sparsity: f64, seed: u64) -> Result<TwinVector> {
    let dropped = dare_drop(d, sparsity, seed)?;
    Ok(TwinVector::from_dense(&keep_vectors_dense(d, dropped)?))
}

fn keep_vectors_dense(original: &Delta, compressed: Delta) -> Result<Delta> {
    compressed.map_tensors(|name, t| {
        Ok(if t.is_matrix() {
            t.clone()
        } else {
            original.get(name).expect("same names").clone()
        })
    })
}

pub fn decompress(t: &TwinVector) -> Delta {
    Delta::new(
        t.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.to_dense()))
            .collect(),
    )
}
