//! Dense tensors and matrices, plus the handful of linear-algebra kernels the
//! rest of the crate is built on (and tested against).
//!
//! [`DenseTensor`] is column-major: the first index varies fastest, so a
//! reshape never moves data. [`DenseMatrix`] stores its entries row-major,
//! which is also its on-disk order.

use crate::error::{Error, Result};

/// Default relative tolerance for [`numerical_rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

fn checked_product(dims: &[usize]) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::Shape(format!("extent product overflows: {dims:?}")))
    })
}

/// Column-major strides for `dims`.
fn col_major_strides(dims: &[usize]) -> Vec<usize> {
    let mut strides = Vec::with_capacity(dims.len());
    let mut s = 1;
    for &d in dims {
        strides.push(s);
        s *= d;
    }
    strides
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("extents must be positive: {dims:?}")));
        }
        let n = checked_product(&dims)?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} hold {n} entries but data has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n = checked_product(&dims)?;
        Self::new(dims, vec![0.0; n])
    }

    /// Builds a tensor by evaluating `f` at every multi-index.
    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let n = checked_product(&dims)?;
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; dims.len()];
        for _ in 0..n {
            data.push(f(&idx));
            increment(&mut idx, &dims);
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> Result<usize> {
        if idx.len() != self.dims.len() {
            return Err(Error::Shape(format!(
                "index of order {} into tensor of order {}",
                idx.len(),
                self.dims.len()
            )));
        }
        let mut off = 0;
        let mut stride = 1;
        for (&i, &d) in idx.iter().zip(&self.dims) {
            if i >= d {
                return Err(Error::IndexOutOfRange { index: i, extent: d });
            }
            off += i * stride;
            stride *= d;
        }
        Ok(off)
    }

    pub fn get(&self, idx: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(idx)?])
    }

    /// Reinterprets the flat data under new extents. Data order is untouched.
    pub fn reshape(&self, new_dims: &[usize]) -> Result<Self> {
        let n = checked_product(new_dims)?;
        if n != self.data.len() || new_dims.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {new_dims:?}",
                self.dims
            )));
        }
        Ok(Self {
            dims: new_dims.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Axis permutation. Output axis `k` is input axis `perm[k]`, so
    /// `out[j] == self[i]` whenever `j[k] == i[perm[k]]` for every `k`.
    ///
    /// Composition: `permute(permute(t, p), q) == permute(t, r)` with
    /// `r[k] = p[q[k]]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let order = self.dims.len();
        if perm.len() != order {
            return Err(Error::Shape(format!(
                "permutation {perm:?} has wrong length for order {order}"
            )));
        }
        let mut seen = vec![false; order];
        for &p in perm {
            if p >= order || seen[p] {
                return Err(Error::Shape(format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        let src_strides = col_major_strides(&self.dims);
        let out_dims: Vec<usize> = perm.iter().map(|&p| self.dims[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();

        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; order];
        for _ in 0..self.data.len() {
            let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            data.push(self.data[src]);
            increment(&mut idx, &out_dims);
        }
        Ok(Self {
            dims: out_dims,
            data,
        })
    }
}

/// Advances a column-major multi-index counter, wrapping to zero at the end.
pub(crate) fn increment(idx: &mut [usize], dims: &[usize]) {
    for (i, &d) in idx.iter_mut().zip(dims) {
        *i += 1;
        if *i < d {
            return;
        }
        *i = 0;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// `data` is row-major.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "matrix extents must be positive, got {rows}x{cols}"
            )));
        }
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Shape("matrix size overflows".into()))?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {n} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows.saturating_mul(cols)])
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.saturating_mul(cols));
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major entries.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `||self - other||_F / ||other||_F`, or the absolute norm when `other` is zero.
    pub fn relative_error(&self, other: &Self) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let base = other.frobenius_norm();
        Ok(if base > 0.0 { diff / base } else { diff })
    }

    /// Views the entries as a column-major tensor of shape `(rows, cols)`.
    pub fn to_tensor(&self) -> DenseTensor {
        DenseTensor {
            dims: vec![self.rows, self.cols],
            data: self.transpose().data,
        }
    }

    /// Inverse of [`DenseMatrix::to_tensor`] for order-2 tensors.
    pub fn from_tensor(t: &DenseTensor) -> Result<Self> {
        match *t.dims() {
            [rows, cols] => Self::from_col_major(rows, cols, t.data()),
            _ => Err(Error::Shape(format!(
                "expected an order-2 tensor, got dims {:?}",
                t.dims()
            ))),
        }
    }

    pub(crate) fn from_col_major(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape("column-major buffer has wrong length".into()));
        }
        Self::from_fn(rows, cols, |i, j| data[i + rows * j])
    }
}

/// Standard matrix product with 64-bit accumulation in ascending `k` order.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "inner dimensions differ: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let bt = b.transpose();
    let mut data = Vec::with_capacity(a.rows * b.cols);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.cols {
            let bc = bt.row(j);
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += ar[k] * bc[k];
            }
            data.push(acc);
        }
    }
    DenseMatrix::new(a.rows, b.cols, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `rows x k` with orthonormal columns, `k = min(rows, cols)`.
    pub u: DenseMatrix,
    /// Non-increasing, non-negative.
    pub singular_values: Vec<f64>,
    /// `k x cols` with orthonormal rows.
    pub vt: DenseMatrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> DenseMatrix {
        let (m, k, n) = (self.u.rows, self.singular_values.len(), self.vt.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for r in 0..k {
                let w = self.u.get(i, r) * self.singular_values[r];
                if w == 0.0 {
                    continue;
                }
                let vr = self.vt.row(r);
                for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(vr) {
                    *o += w * v;
                }
            }
        }
        DenseMatrix { rows: m, cols: n, data: out }
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-15;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Thin SVD by one-sided (Hestenes) Jacobi rotations.
///
/// Signs are fixed so that the largest-magnitude entry of each column of `u`
/// is positive.
pub fn svd(m: &DenseMatrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    if m.rows < m.cols {
        let t = svd_tall(&m.transpose());
        // A^T = U S V^T  =>  A = V S U^T
        let mut res = SvdResult {
            u: t.vt.transpose(),
            singular_values: t.singular_values,
            vt: t.u.transpose(),
        };
        fix_signs(&mut res);
        Ok(res)
    } else {
        let mut res = svd_tall(m);
        fix_signs(&mut res);
        Ok(res)
    }
}

fn svd_tall(a: &DenseMatrix) -> SvdResult {
    let (m, n) = (a.rows, a.cols);
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    let smax = norms.iter().cloned().fold(0.0, f64::max);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut singular_values = Vec::with_capacity(n);
    for &j in &order {
        let s = norms[j];
        singular_values.push(s);
        let mut col: Vec<f64> = if s > 0.0 {
            cols[j].iter().map(|x| x / s).collect()
        } else {
            vec![0.0; m]
        };
        // Columns carrying (near-)zero singular values are dominated by
        // rounding; re-orthogonalize them and fall back to completion.
        if s <= smax * 1e-10 || s == 0.0 {
            col = orthogonal_completion(&u_cols, col, m);
        }
        u_cols.push(col);
    }

    let mut u = vec![0.0; m * n];
    for (r, col) in u_cols.iter().enumerate() {
        for i in 0..m {
            u[i * n + r] = col[i];
        }
    }
    let mut vt = vec![0.0; n * n];
    for (r, &j) in order.iter().enumerate() {
        vt[r * n..(r + 1) * n].copy_from_slice(&v[j]);
    }
    SvdResult {
        u: DenseMatrix { rows: m, cols: n, data: u },
        singular_values,
        vt: DenseMatrix { rows: n, cols: n, data: vt },
    }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Projects `cand` off `basis` (twice, for stability). If little remains,
/// picks the standard basis vector with the largest residual instead.
fn orthogonal_completion(basis: &[Vec<f64>], cand: Vec<f64>, m: usize) -> Vec<f64> {
    let project = |mut x: Vec<f64>| {
        for _ in 0..2 {
            for b in basis {
                let d = dot(&x, b);
                for (xi, bi) in x.iter_mut().zip(b) {
                    *xi -= d * bi;
                }
            }
        }
        let nrm = dot(&x, &x).sqrt();
        (x, nrm)
    };
    let (x, nrm) = project(cand);
    if nrm > 0.5 {
        return x.into_iter().map(|v| v / nrm).collect();
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    for e in 0..m {
        let mut unit = vec![0.0; m];
        unit[e] = 1.0;
        let (x, nrm) = project(unit);
        if best.as_ref().is_none_or(|(_, b)| nrm > *b) {
            best = Some((x, nrm));
        }
        if nrm > 0.7 {
            break;
        }
    }
    let (x, nrm) = best.expect("m >= 1");
    x.into_iter().map(|v| v / nrm).collect()
}

fn fix_signs(res: &mut SvdResult) {
    let k = res.singular_values.len();
    let (m, n) = (res.u.rows, res.vt.cols);
    for r in 0..k {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for i in 0..m {
            let x = res.u.get(i, r);
            if x.abs() > best {
                best = x.abs();
                sign = x.signum();
            }
        }
        if sign < 0.0 {
            for i in 0..m {
                res.u.data[i * k + r] *= -1.0;
            }
            for x in &mut res.vt.data[r * n..(r + 1) * n] {
                *x = -*x;
            }
        }
    }
}

/// Number of singular values above `tol_factor * s_max * max(rows, cols)`.
pub fn numerical_rank(m: &DenseMatrix, tol_factor: f64) -> Result<usize> {
    if !(tol_factor > 0.0 && tol_factor.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "tolerance factor must be positive, got {tol_factor}"
        )));
    }
    let s = svd(m)?.singular_values;
    Ok(rank_from_singular_values(&s, tol_factor, m.rows.max(m.cols)))
}

pub(crate) fn rank_from_singular_values(s: &[f64], tol_factor: f64, max_dim: usize) -> usize {
    let smax = s.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return 0;
    }
    let thresh = tol_factor * smax * max_dim as f64;
    s.iter().filter(|&&x| x > thresh).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn assert_orthonormal_cols(u: &DenseMatrix, tol: f64) {
        for a in 0..u.cols() {
            for b in 0..u.cols() {
                let d: f64 = (0..u.rows()).map(|i| u.get(i, a) * u.get(i, b)).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < tol, "cols {a},{b}: {d}");
            }
        }
    }

    #[test]
    fn reshape_is_column_major() {
        let t = DenseTensor::new(vec![6], (0..6).map(f64::from).collect()).unwrap();
        let r = t.reshape(&[2, 3]).unwrap();
        assert_eq!(r.get(&[1, 2]).unwrap(), 5.0);
        let back = r.reshape(&[6]).unwrap().reshape(&[2, 3]).unwrap();
        assert_eq!(back, r);
        assert!(matches!(t.reshape(&[4]), Err(Error::Shape(_))));
    }

    #[test]
    fn reshape_to_flat_enumerates_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = DenseTensor::from_fn(vec![2, 2, 2], |_| rng.random()).unwrap();
        let flat = t.reshape(&[8]).unwrap();
        let mut k = 0;
        for c in 0..2 {
            for b in 0..2 {
                for a in 0..2 {
                    assert_eq!(flat.get(&[k]).unwrap(), t.get(&[a, b, c]).unwrap());
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn permute_transposes_and_validates() {
        let t = DenseTensor::from_fn(vec![2, 3], |i| (10 * i[0] + i[1]) as f64).unwrap();
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.dims(), &[3, 2]);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(p.get(&[j, i]).unwrap(), t.get(&[i, j]).unwrap());
            }
        }
        assert_eq!(t.permute(&[0, 1]).unwrap(), t);
        assert!(t.permute(&[0, 0]).is_err());
        assert!(t.permute(&[0, 2]).is_err());
        assert!(t.permute(&[0]).is_err());
    }

    #[test]
    fn permute_order3_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = DenseTensor::from_fn(vec![2, 3, 4], |_| rng.random()).unwrap();
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.dims(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    // Direct index math on the flat buffers.
                    let src = a + 2 * b + 6 * c;
                    let dst = c + 4 * a + 8 * b;
                    assert_eq!(p.data()[dst], t.data()[src]);
                }
            }
        }
    }

    #[test]
    fn matmul_basics() {
        let a = random_matrix(3, 4, 1);
        let i3 = DenseMatrix::identity(3).unwrap();
        assert_eq!(matmul(&i3, &a).unwrap(), a);
        let x = DenseMatrix::new(1, 1, vec![2.0]).unwrap();
        let y = DenseMatrix::new(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&x, &y).unwrap().data(), &[6.0]);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random_matrix(3, 4, 2);
        let b = random_matrix(4, 2, 3);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert_eq!(c.get(i, j), acc);
            }
        }
    }

    #[test]
    fn svd_of_diagonal() {
        let d = DenseMatrix::from_fn(3, 3, |i, j| if i == j { 3.0 - i as f64 } else { 0.0 }).unwrap();
        let s = svd(&d).unwrap();
        assert_eq!(s.singular_values, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn svd_rank_one_outer_product() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 1.0, -1.0];
        let m = DenseMatrix::from_fn(4, 3, |i, j| u[i] * v[j]).unwrap();
        let s = svd(&m).unwrap();
        let big = s.singular_values.iter().filter(|&&x| x > 1e-12).count();
        assert_eq!(big, 1);
        assert_orthonormal_cols(&s.u, 1e-10);
        assert!(s.reconstruct().relative_error(&m).unwrap() < 1e-12);
    }

    #[test]
    fn svd_random_reconstructs() {
        for (r, c, seed) in [(8, 5, 1), (5, 8, 2), (1, 7, 3), (7, 1, 4), (13, 13, 5)] {
            let m = random_matrix(r, c, seed);
            let s = svd(&m).unwrap();
            assert_eq!(s.u.rows(), r);
            assert_eq!(s.vt.cols(), c);
            assert!(s.reconstruct().relative_error(&m).unwrap() < 1e-10);
            assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
            assert_orthonormal_cols(&s.u, 1e-10);
            assert_orthonormal_cols(&s.vt.transpose(), 1e-10);
            for k in 0..s.u.cols() {
                let col: Vec<f64> = (0..r).map(|i| s.u.get(i, k)).collect();
                let big = col.iter().cloned().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
                assert!(big > 0.0);
            }
        }
    }

    #[test]
    fn svd_zero_matrix_is_orthonormal() {
        let z = DenseMatrix::zeros(4, 3).unwrap();
        let s = svd(&z).unwrap();
        assert!(s.singular_values.iter().all(|&x| x == 0.0));
        assert_orthonormal_cols(&s.u, 1e-12);
        assert_orthonormal_cols(&s.vt.transpose(), 1e-12);
    }

    #[test]
    fn svd_rejects_non_finite() {
        let m = DenseMatrix::new(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(svd(&m), Err(Error::NonFinite(_))));
        assert!(numerical_rank(&m, 1e-9).is_err());
    }

    #[test]
    fn numerical_rank_cases() {
        assert_eq!(numerical_rank(&DenseMatrix::zeros(4, 4).unwrap(), 1e-9).unwrap(), 0);
        assert_eq!(numerical_rank(&DenseMatrix::identity(5).unwrap(), 1e-9).unwrap(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = DenseMatrix::from_fn(16, 16, |i, j| u[i] * v[j] + 1e-15 * rng.random_range(-1.0..1.0)).unwrap();
        assert_eq!(numerical_rank(&m, DEFAULT_RANK_TOL).unwrap(), 1);
        assert!(numerical_rank(&m, 0.0).is_err());
    }
}
