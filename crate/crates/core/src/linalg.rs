//! Dense complex linear algebra used throughout the crate.
//!
//! Matrices are row-major `Vec<C64>` buffers wrapped in [`Mat`]. Products go
//! through `matrixmultiply`'s complex GEMM; factorizations (SVD, QR, Hermitian
//! eigendecomposition) are delegated to `nalgebra`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
pub fn re(x: f64) -> C64 {
    C64::new(x, 0.0)
}

/// Row-major dense complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<C64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = ONE;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer length does not match shape");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_real(rows: usize, cols: usize, vals: &[f64]) -> Self {
        Mat::from_vec(rows, cols, vals.iter().map(|&x| re(x)).collect())
    }

    pub fn diag_real(vals: &[f64]) -> Self {
        let n = vals.len();
        let mut m = Mat::zeros(n, n);
        for (i, &v) in vals.iter().enumerate() {
            m.data[i * n + i] = re(v);
        }
        m
    }

    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        Mat::from_fn(rows, cols, |_, _| c(rng.sample(StandardNormal), rng.sample(StandardNormal)))
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: C64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut C64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn adjoint(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i).conj())
    }

    pub fn conj(&self) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    pub fn scale(&self, s: C64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn add_assign_scaled(&mut self, other: &Mat, s: C64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        Mat::from_vec(self.rows, other.cols, gemm(&self.data, &other.data, self.rows, self.cols, other.cols))
    }

    pub fn matvec(&self, v: &[C64]) -> Vec<C64> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|i| {
                let row = &self.data[i * self.cols..(i + 1) * self.cols];
                row.iter().zip(v).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    pub fn kron(&self, other: &Mat) -> Mat {
        let (r, cc) = (self.rows * other.rows, self.cols * other.cols);
        Mat::from_fn(r, cc, |i, j| {
            self.get(i / other.rows, j / other.cols) * other.get(i % other.rows, j % other.cols)
        })
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Largest elementwise deviation from `other`.
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    /// `max |A†A - I|`, zero for matrices with orthonormal columns.
    pub fn column_isometry_residual(&self) -> f64 {
        self.adjoint().matmul(self).max_abs_diff(&Mat::identity(self.cols))
    }

    pub fn row_isometry_residual(&self) -> f64 {
        self.matmul(&self.adjoint()).max_abs_diff(&Mat::identity(self.rows))
    }

    pub fn unitarity_residual(&self) -> f64 {
        assert!(self.is_square());
        self.column_isometry_residual()
    }

    pub fn hermiticity_residual(&self) -> f64 {
        self.max_abs_diff(&self.adjoint())
    }

    pub fn column(&self, j: usize) -> Vec<C64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn columns(&self, cols: std::ops::Range<usize>) -> Mat {
        let n = cols.len();
        Mat::from_fn(self.rows, n, |i, j| self.get(i, cols.start + j))
    }

    pub fn rows_range(&self, rows: std::ops::Range<usize>) -> Mat {
        let n = rows.len();
        Mat::from_vec(n, self.cols, self.data[rows.start * self.cols..(rows.start + n) * self.cols].to_vec())
    }

    pub fn to_nalgebra(&self) -> DMatrix<C64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<C64>) -> Mat {
        Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    /// Thin SVD with singular values sorted descending: `self = U diag(s) V†`.
    pub fn svd(&self) -> Svd {
        let k = self.rows.min(self.cols);
        if k == 0 {
            return Svd {
                u: Mat::zeros(self.rows, 0),
                s: vec![],
                vt: Mat::zeros(0, self.cols),
            };
        }
        let a = self.to_nalgebra();
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        // verify the factorization, retrying with looser tolerances
        let mut svd = nalgebra::SVD::new(a.clone(), true, true);
        for eps in [1e-14, 1e-13, 1e-12, 1e-11] {
            if svd
                .clone()
                .recompose()
                .map(|r| (r - &a).iter().all(|z| z.norm() <= 1e-12 * scale))
                .unwrap_or(false)
            {
                break;
            }
            if let Some(s) = nalgebra::SVD::try_new(a.clone(), true, true, eps, 0) {
                svd = s;
            }
        }
        let u = svd.u.expect("u requested");
        let vt = svd.v_t.expect("v_t requested");
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let s: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
        let u = Mat::from_fn(self.rows, k, |i, j| u[(i, order[j])]);
        let vt = Mat::from_fn(k, self.cols, |i, j| vt[(order[i], j)]);
        Svd { u, s, vt }
    }

    /// Thin QR: `self = Q R` with `Q` having orthonormal columns.
    pub fn qr(&self) -> (Mat, Mat) {
        let qr = nalgebra::QR::new(self.to_nalgebra());
        (Mat::from_nalgebra(&qr.q()), Mat::from_nalgebra(&qr.r()))
    }

    /// Eigendecomposition of a Hermitian matrix, eigenvalues ascending.
    pub fn eigh(&self) -> (Vec<f64>, Mat) {
        assert!(self.is_square());
        let n = self.rows;
        // symmetrize to suppress round-off asymmetry
        let h = Mat::from_fn(n, n, |i, j| (self.get(i, j) + self.get(j, i).conj()) * 0.5);
        let eig = nalgebra::SymmetricEigen::new(h.to_nalgebra());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let vecs = Mat::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
        (vals, vecs)
    }

    /// Extends the orthonormal columns of `self` to a full unitary.
    ///
    /// Completion columns are obtained by Gram-Schmidt over the standard basis,
    /// which keeps the result deterministic.
    pub fn complete_to_unitary(&self) -> Mat {
        let n = self.rows;
        let mut cols: Vec<Vec<C64>> = (0..self.cols).map(|j| self.column(j)).collect();
        let mut e = 0;
        while cols.len() < n {
            assert!(e < n, "failed to complete basis");
            let mut v = vec![ZERO; n];
            v[e] = ONE;
            e += 1;
            for _ in 0..2 {
                for q in &cols {
                    let p = dot(q, &v);
                    axpy(-p, q, &mut v);
                }
            }
            let nv = norm(&v);
            if nv > 1e-6 {
                scale_in_place(&mut v, re(1.0 / nv));
                cols.push(v);
            }
        }
        Mat::from_fn(n, n, |i, j| cols[j][i])
    }
}

#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Mat,
    pub s: Vec<f64>,
    pub vt: Mat,
}

/// Row-major complex GEMM `C = A B` with `A` m×k and `B` k×n.
pub fn gemm(a: &[C64], b: &[C64], m: usize, k: usize, n: usize) -> Vec<C64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![ZERO; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    // SAFETY: Complex<f64> is repr(C) with layout [f64; 2], matching
    // matrixmultiply's c64; slices are sized as asserted above.
    unsafe {
        matrixmultiply::zgemm(
            matrixmultiply::CGemmOption::Standard,
            matrixmultiply::CGemmOption::Standard,
            m,
            k,
            n,
            [1.0, 0.0],
            a.as_ptr() as *const [f64; 2],
            k as isize,
            1,
            b.as_ptr() as *const [f64; 2],
            n as isize,
            1,
            [0.0, 0.0],
            out.as_mut_ptr() as *mut [f64; 2],
            n as isize,
            1,
        );
    }
    out
}

/// `A^T B` where `A` is stored k×m row-major.
pub fn gemm_tn(a: &[C64], b: &[C64], m: usize, k: usize, n: usize) -> Vec<C64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![ZERO; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    // SAFETY: see `gemm`; A is read with transposed strides.
    unsafe {
        matrixmultiply::zgemm(
            matrixmultiply::CGemmOption::Standard,
            matrixmultiply::CGemmOption::Standard,
            m,
            k,
            n,
            [1.0, 0.0],
            a.as_ptr() as *const [f64; 2],
            1,
            m as isize,
            b.as_ptr() as *const [f64; 2],
            n as isize,
            1,
            [0.0, 0.0],
            out.as_mut_ptr() as *mut [f64; 2],
            n as isize,
            1,
        );
    }
    out
}

/// `⟨a|b⟩ = Σ conj(a_i) b_i`.
#[inline]
pub fn dot(a: &[C64], b: &[C64]) -> C64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

#[inline]
pub fn norm(a: &[C64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

#[inline]
pub fn axpy(alpha: C64, x: &[C64], y: &mut [C64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn scale_in_place(x: &mut [C64], s: C64) {
    for xi in x.iter_mut() {
        *xi *= s;
    }
}

pub fn normalize(x: &mut [C64]) -> f64 {
    let n = norm(x);
    if n > 0.0 {
        scale_in_place(x, re(1.0 / n));
    }
    n
}

pub fn random_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<C64> {
    (0..n).map(|_| c(rng.sample(StandardNormal), rng.sample(StandardNormal))).collect()
}

/// Permutes the axes of a row-major tensor. `perm[k]` names the source axis
/// that becomes axis `k` of the result.
pub fn permute(data: &[C64], dims: &[usize], perm: &[usize]) -> Vec<C64> {
    let rank = dims.len();
    assert_eq!(perm.len(), rank);
    let total: usize = dims.iter().product();
    assert_eq!(data.len(), total);
    let mut src_strides = vec![1usize; rank];
    for k in (0..rank.saturating_sub(1)).rev() {
        src_strides[k] = src_strides[k + 1] * dims[k + 1];
    }
    let new_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(data[offset]);
        for k in (0..rank).rev() {
            idx[k] += 1;
            offset += strides[k];
            if idx[k] < new_dims[k] {
                break;
            }
            offset -= strides[k] * new_dims[k];
            idx[k] = 0;
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct LanczosOptions {
    pub max_krylov: usize,
    pub max_restarts: usize,
    pub tol: f64,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        LanczosOptions {
            max_krylov: 60,
            max_restarts: 50,
            tol: 1e-10,
        }
    }
}

/// Lowest eigenpair of a Hermitian operator by restarted Lanczos with full
/// reorthogonalization.
///
/// `deflate` holds orthonormal vectors that the search is kept orthogonal to;
/// they should be (near-)exact eigenvectors of the operator.
pub fn lanczos_lowest<F>(apply: F, start: &[C64], deflate: &[Vec<C64>], opts: LanczosOptions) -> (f64, Vec<C64>, bool)
where
    F: Fn(&[C64], &mut [C64]),
{
    let dim = start.len();
    let mut v0 = start.to_vec();
    let project = |v: &mut [C64]| {
        for q in deflate {
            let p = dot(q, v);
            axpy(-p, q, v);
        }
    };
    project(&mut v0);
    if normalize(&mut v0) < 1e-300 {
        // degenerate start; fall back to a deterministic vector
        v0 = (0..dim).map(|i| re(1.0 + (i as f64 * 0.618_033_988_7).fract())).collect();
        project(&mut v0);
        normalize(&mut v0);
    }
    let max_k = opts.max_krylov.min(dim.saturating_sub(deflate.len())).max(1);
    let mut best = (f64::INFINITY, v0.clone());
    let mut w = vec![ZERO; dim];
    for _restart in 0..=opts.max_restarts {
        let mut basis: Vec<Vec<C64>> = vec![v0.clone()];
        let mut alpha: Vec<f64> = Vec::new();
        let mut beta: Vec<f64> = Vec::new();
        let mut converged = false;
        let mut ritz = (f64::INFINITY, vec![ONE]);
        for j in 0..max_k {
            apply(&basis[j], &mut w);
            let a = dot(&basis[j], &w).re;
            alpha.push(a);
            // full reorthogonalization, twice for stability
            for _ in 0..2 {
                project(&mut w);
                for q in &basis {
                    let p = dot(q, &w);
                    axpy(-p, q, &mut w);
                }
            }
            let b = norm(&w);
            let k = alpha.len();
            let mut t = Mat::zeros(k, k);
            for i in 0..k {
                t.set(i, i, re(alpha[i]));
                if i + 1 < k {
                    t.set(i, i + 1, re(beta[i]));
                    t.set(i + 1, i, re(beta[i]));
                }
            }
            let (vals, vecs) = t.eigh();
            let y0 = vecs.column(0);
            let resid = b * y0[k - 1].norm();
            ritz = (vals[0], y0);
            if resid < opts.tol * vals[0].abs().max(1.0) || b < 1e-14 || j + 1 == max_k {
                converged = resid < opts.tol * vals[0].abs().max(1.0) || b < 1e-14;
                break;
            }
            beta.push(b);
            let mut next = w.clone();
            scale_in_place(&mut next, re(1.0 / b));
            basis.push(next);
        }
        let mut x = vec![ZERO; dim];
        for (q, coef) in basis.iter().zip(&ritz.1) {
            axpy(*coef, q, &mut x);
        }
        project(&mut x);
        normalize(&mut x);
        best = (ritz.0, x.clone());
        if converged {
            return (best.0, best.1, true);
        }
        v0 = x;
    }
    (best.0, best.1, false)
}

/// `n` lowest eigenpairs by successive deflated Lanczos runs.
pub fn lanczos_eigenpairs<F, R>(apply: F, dim: usize, n: usize, opts: LanczosOptions, rng: &mut R) -> (Vec<f64>, Vec<Vec<C64>>, bool)
where
    F: Fn(&[C64], &mut [C64]),
    R: Rng + ?Sized,
{
    let n = n.min(dim);
    let mut vals = Vec::with_capacity(n);
    let mut vecs: Vec<Vec<C64>> = Vec::with_capacity(n);
    let mut all_converged = true;
    for _ in 0..n {
        let start = random_vector(dim, rng);
        let (e, v, ok) = lanczos_lowest(&apply, &start, &vecs, opts);
        all_converged &= ok;
        vals.push(e);
        vecs.push(v);
    }
    // deflation order is not guaranteed to be ascending for near-degenerate
    // levels; finish with a Rayleigh-Ritz pass in the found subspace
    let k = vecs.len();
    let mut hsub = Mat::zeros(k, k);
    let mut w = vec![ZERO; dim];
    for j in 0..k {
        apply(&vecs[j], &mut w);
        for i in 0..k {
            hsub.set(i, j, dot(&vecs[i], &w));
        }
    }
    let (evals, evecs) = hsub.eigh();
    let rotated: Vec<Vec<C64>> = (0..k)
        .map(|j| {
            let mut x = vec![ZERO; dim];
            for i in 0..k {
                axpy(evecs.get(i, j), &vecs[i], &mut x);
            }
            normalize(&mut x);
            x
        })
        .collect();
    (evals, rotated, all_converged)
}
