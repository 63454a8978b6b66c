//! Dense f32 tensors and a one-sided Jacobi SVD.
//!
//! Every checkpoint tensor is rank 1 or rank 2. Matrices are row-major with
//! shape `[d_out, d_in]`. Internally the SVD works in f64 and rounds its
//! factors back to f32.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::Shape(format!(
                "tensors must have rank 1 or 2, got shape {shape:?}"
            )));
        }
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other)?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other)?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn scale(&self, k: f32) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Frobenius norm, accumulated in f64.
    pub fn frobenius(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// `‖self − other‖_F / ‖other‖_F`, or the absolute distance when `other` is zero.
    pub fn relative_error(&self, reference: &Tensor) -> f64 {
        let diff: f64 = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        let norm = reference.frobenius();
        if norm == 0.0 {
            diff
        } else {
            diff / norm
        }
    }

    /// Matrix product `self · other`, accumulated in f64.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimension mismatch: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![0.0f32; m * n];
        let mut row = vec![0.0f64; n];
        for i in 0..m {
            row.iter_mut().for_each(|v| *v = 0.0);
            for p in 0..k {
                let a = self.data[i * k + p] as f64;
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (acc, &b) in row.iter_mut().zip(brow) {
                    *acc += a * b as f64;
                }
            }
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&row) {
                *o = v as f32;
            }
        }
        Tensor::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }
}

/// Thin SVD factors `m ≈ u · diag(s) · vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// `d_out × r`
    pub u: Tensor,
    /// length `r`, non-negative, non-increasing
    pub s: Tensor,
    /// `d_in × r`
    pub v: Tensor,
    pub original_shape: (usize, usize),
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// Rebuild the dense `d_out × d_in` matrix, accumulating in f64.
    pub fn reconstruct(&self) -> Tensor {
        let (rows, cols) = self.original_shape;
        let r = self.rank();
        let u = self.u.data();
        let s = self.s.data();
        let v = self.v.data();
        let mut out = vec![0.0f32; rows * cols];
        let mut acc = vec![0.0f64; cols];
        for i in 0..rows {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for k in 0..r {
                let us = u[i * r + k] as f64 * s[k] as f64;
                if us == 0.0 {
                    continue;
                }
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += us * v[j * r + k] as f64;
                }
            }
            for (o, &a) in out[i * cols..(i + 1) * cols].iter_mut().zip(&acc) {
                *o = a as f32;
            }
        }
        Tensor {
            shape: vec![rows, cols],
            data: out,
        }
    }

    /// Parameters needed to store the factors: `r·(d_out + d_in + 1)`.
    pub fn param_count(&self) -> usize {
        let (rows, cols) = self.original_shape;
        self.rank() * (rows + cols + 1)
    }
}

const JACOBI_TOL: f64 = 1e-15;
const JACOBI_MAX_SWEEPS: usize = 60;

/// Full (thin) singular value decomposition of a 2-D tensor.
///
/// One-sided Jacobi on the columns of the taller orientation. The largest
/// magnitude entry of each left singular vector is made non-negative so the
/// factors are deterministic.
pub fn svd(m: &Tensor) -> Result<SvdFactors> {
    let (rows, cols) = m.dims2()?;
    if !m.is_finite() {
        return Err(Error::Numeric("svd input has non-finite entries".into()));
    }
    let transposed = rows < cols;
    // Work on a tall matrix a (p × q, p ≥ q) stored column-major.
    let (p, q) = if transposed { (cols, rows) } else { (rows, cols) };
    let mut a = vec![vec![0.0f64; p]; q];
    for i in 0..rows {
        for j in 0..cols {
            let x = m.data[i * cols + j] as f64;
            if transposed {
                a[i][j] = x;
            } else {
                a[j][i] = x;
            }
        }
    }
    let mut w = vec![vec![0.0f64; q]; q];
    for (j, col) in w.iter_mut().enumerate() {
        col[j] = 1.0;
    }

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for j in 0..q {
            for k in (j + 1)..q {
                let (alpha, beta, gamma) = {
                    let (cj, ck) = (&a[j], &a[k]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in cj.iter().zip(ck) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut a, j, k, c, s);
                rotate_pair(&mut w, j, k, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = a
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]).then(x.cmp(&y)));

    // Left vectors (length p) are the normalized columns of a; right vectors
    // (length q) are the columns of w.
    let scale = sigma.iter().cloned().fold(0.0, f64::max).max(1.0);
    let null_tol = scale * (p as f64) * f64::EPSILON * 8.0;
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(q);
    let mut right: Vec<Vec<f64>> = Vec::with_capacity(q);
    let mut values = Vec::with_capacity(q);
    for &idx in &order {
        let sv = sigma[idx];
        if sv > null_tol {
            left.push(a[idx].iter().map(|x| x / sv).collect());
        } else {
            left.push(Vec::new());
            sigma[idx] = 0.0;
        }
        right.push(w[idx].clone());
        values.push(sigma[idx]);
    }
    complete_orthonormal(&mut left, p);

    for (l, r) in left.iter_mut().zip(right.iter_mut()) {
        let pivot = l
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |best, (i, &x)| {
                if x.abs() > best.1 {
                    (i, x.abs())
                } else {
                    best
                }
            })
            .0;
        if l[pivot] < 0.0 {
            l.iter_mut().for_each(|x| *x = -*x);
            r.iter_mut().for_each(|x| *x = -*x);
        }
    }

    // In the transposed case the roles of left and right swap.
    let (u_cols, v_cols) = if transposed {
        (&right, &left)
    } else {
        (&left, &right)
    };
    let pack = |cols_vec: &Vec<Vec<f64>>, n: usize| -> Vec<f32> {
        let mut out = vec![0.0f32; n * q];
        for (k, col) in cols_vec.iter().enumerate() {
            for (i, &x) in col.iter().enumerate() {
                out[i * q + k] = x as f32;
            }
        }
        out
    };
    let u = Tensor::matrix(rows, q, pack(u_cols, rows))?;
    let v = Tensor::matrix(cols, q, pack(v_cols, cols))?;
    let s = Tensor::vector(values.iter().map(|&x| x as f32).collect());
    let factors = SvdFactors {
        u,
        s,
        v,
        original_shape: (rows, cols),
    };
    if transposed {
        // Sign convention applies to u; after the swap u came from w.
        return Ok(fix_left_signs(factors));
    }
    Ok(factors)
}

fn rotate_pair(cols: &mut [Vec<f64>], j: usize, k: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(k);
    let cj = &mut lo[j];
    let ck = &mut hi[0];
    for (x, y) in cj.iter_mut().zip(ck.iter_mut()) {
        let xj = *x;
        let xk = *y;
        *x = c * xj - s * xk;
        *y = s * xj + c * xk;
    }
}

/// Fill empty entries of `vecs` with unit vectors orthogonal to the rest.
fn complete_orthonormal(vecs: &mut [Vec<f64>], dim: usize) {
    let mut candidate = 0usize;
    for i in 0..vecs.len() {
        if !vecs[i].is_empty() {
            continue;
        }
        loop {
            assert!(candidate < dim, "ran out of basis vectors");
            let mut e = vec![0.0f64; dim];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for other in vecs.iter().filter(|o| !o.is_empty()) {
                    let dot: f64 = e.iter().zip(other).map(|(x, y)| x * y).sum();
                    e.iter_mut().zip(other).for_each(|(x, y)| *x -= dot * y);
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                e.iter_mut().for_each(|x| *x /= norm);
                vecs[i] = e;
                break;
            }
        }
    }
}

fn fix_left_signs(mut f: SvdFactors) -> SvdFactors {
    let (rows, _) = f.original_shape;
    let r = f.rank();
    for k in 0..r {
        let mut pivot = 0;
        let mut best = -1.0f32;
        for i in 0..rows {
            let x = f.u.data[i * r + k].abs();
            if x > best {
                best = x;
                pivot = i;
            }
        }
        if f.u.data[pivot * r + k] < 0.0 {
            for i in 0..rows {
                f.u.data[i * r + k] = -f.u.data[i * r + k];
            }
            let vrows = f.v.shape[0];
            for i in 0..vrows {
                f.v.data[i * r + k] = -f.v.data[i * r + k];
            }
        }
    }
    f
}

/// Keep the leading `r` singular triplets.
pub fn truncate(f: &SvdFactors, r: usize) -> Result<SvdFactors> {
    let full = f.rank();
    if r == 0 || r > full {
        return Err(Error::Argument(format!(
            "truncation rank {r} outside 1..={full}"
        )));
    }
    let take_cols = |t: &Tensor| -> Result<Tensor> {
        let (rows, cols) = t.dims2()?;
        let mut out = Vec::with_capacity(rows * r);
        for i in 0..rows {
            out.extend_from_slice(&t.data[i * cols..i * cols + r]);
        }
        Tensor::matrix(rows, r, out)
    };
    Ok(SvdFactors {
        u: take_cols(&f.u)?,
        s: Tensor::vector(f.s.data[..r].to_vec()),
        v: take_cols(&f.v)?,
        original_shape: f.original_shape,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn assert_orthonormal_columns(t: &Tensor, tol: f64) {
        let (rows, r) = t.dims2().unwrap();
        for a in 0..r {
            for b in 0..r {
                let dot: f64 = (0..rows)
                    .map(|i| t.data()[i * r + a] as f64 * t.data()[i * r + b] as f64)
                    .sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < tol, "cols {a},{b}: {dot}");
            }
        }
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let f = svd(&eye).unwrap();
        assert_eq!(f.s.data(), &[1.0, 1.0]);
    }

    #[test]
    fn diagonal_matrix() {
        let m = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let f = svd(&m).unwrap();
        assert_eq!(f.s.data(), &[3.0, 1.0]);
        // signed permutation of identity, with non-negative pivots on u
        assert_eq!(f.u.data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(f.v.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn reconstructs_seeded_matrices() {
        for (rows, cols) in [(8, 5), (5, 8), (64, 32), (4, 64), (1, 7), (7, 1)] {
            let m = seeded(rows, cols, 11);
            let f = svd(&m).unwrap();
            assert!(f.reconstruct().relative_error(&m) < 1e-5);
            assert_orthonormal_columns(&f.u, 1e-4);
            assert_orthonormal_columns(&f.v, 1e-4);
            assert!(f.s.data().windows(2).all(|w| w[0] >= w[1]));
            assert!(f.s.data().iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn rank_deficient_input_gets_orthonormal_completion() {
        let mut data = vec![0.0f32; 6 * 4];
        // rank 1: outer product
        for i in 0..6 {
            for j in 0..4 {
                data[i * 4 + j] = (i as f32 + 1.0) * (j as f32 - 1.5);
            }
        }
        let m = Tensor::matrix(6, 4, data).unwrap();
        let f = svd(&m).unwrap();
        assert!(f.s.data()[1..].iter().all(|&x| x < 1e-5));
        assert_orthonormal_columns(&f.u, 1e-4);
        assert!(f.reconstruct().relative_error(&m) < 1e-6);

        let z = Tensor::zeros(&[3, 5]);
        let f = svd(&z).unwrap();
        assert!(f.s.data().iter().all(|&x| x == 0.0));
        assert_orthonormal_columns(&f.u, 1e-6);
    }

    #[test]
    fn largest_left_entry_non_negative() {
        let m = seeded(9, 6, 3);
        let f = svd(&m).unwrap();
        let (rows, r) = f.u.dims2().unwrap();
        for k in 0..r {
            let col: Vec<f32> = (0..rows).map(|i| f.u.data()[i * r + k]).collect();
            let max = col.iter().cloned().fold(0.0f32, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(max >= 0.0);
        }
    }

    #[test]
    fn svd_rejects_bad_inputs() {
        assert!(matches!(svd(&Tensor::vector(vec![1.0, 2.0])), Err(Error::Shape(_))));
        let m = Tensor::matrix(1, 2, vec![f32::NAN, 1.0]).unwrap();
        assert!(matches!(svd(&m), Err(Error::Numeric(_))));
    }

    #[test]
    fn truncate_diag_residual_is_discarded_value() {
        let m = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let f = truncate(&svd(&m).unwrap(), 1).unwrap();
        let resid = f.reconstruct().sub(&m).unwrap().frobenius();
        assert!((resid - 1.0).abs() < 1e-6);
    }

    #[test]
    fn truncate_full_rank_is_lossless() {
        let m = seeded(8, 5, 5);
        let f = svd(&m).unwrap();
        let t = truncate(&f, 5).unwrap();
        assert!(t.reconstruct().relative_error(&f.reconstruct()) < 1e-6);
    }

    #[test]
    fn truncate_matches_tail_norm() {
        let m = seeded(8, 5, 7);
        let f = svd(&m).unwrap();
        let t = truncate(&f, 2).unwrap();
        let resid = t.reconstruct().sub(&m).unwrap().frobenius();
        let tail: f64 = f.s.data()[2..].iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!(((resid - tail) / tail).abs() < 1e-5, "{resid} vs {tail}");
    }

    #[test]
    fn truncate_rejects_out_of_range() {
        let f = svd(&seeded(3, 3, 1)).unwrap();
        assert!(matches!(truncate(&f, 0), Err(Error::Argument(_))));
        assert!(matches!(truncate(&f, 4), Err(Error::Argument(_))));
    }

    #[test]
    fn elementwise_identities() {
        let x = seeded(3, 4, 2);
        let zeros = Tensor::zeros(&[3, 4]);
        assert_eq!(x.add(&zeros).unwrap(), x);
        assert_eq!(x.scale(0.0), zeros);
        assert_eq!(x.sub(&x).unwrap(), zeros);
        assert!(matches!(x.add(&Tensor::zeros(&[4, 3])), Err(Error::Shape(_))));
    }

    #[test]
    fn constructor_validates_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 2, 2], vec![0.0; 8]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }
}
