//! Matrix product states and operators.
//!
//! MPS tensors are stored row-major with index order (left bond, physical,
//! right bond); MPO tensors with (left bond, right bond, physical out,
//! physical in). Dense vectors use site 0 as the most significant digit.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, c, gemm, gemm_tn, permute, re, Mat, C64, ONE, ZERO};
use crate::model::{spin_matrix, Axis, ModelParams, Spin};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    pub dl: usize,
    pub d: usize,
    pub dr: usize,
    pub data: Vec<C64>,
}

impl Tensor3 {
    pub fn zeros(dl: usize, d: usize, dr: usize) -> Self {
        Tensor3 {
            dl,
            d,
            dr,
            data: vec![ZERO; dl * d * dr],
        }
    }

    pub fn from_vec(dl: usize, d: usize, dr: usize, data: Vec<C64>) -> Self {
        assert_eq!(data.len(), dl * d * dr);
        Tensor3 { dl, d, dr, data }
    }

    #[inline]
    pub fn get(&self, a: usize, s: usize, b: usize) -> C64 {
        self.data[(a * self.d + s) * self.dr + b]
    }

    #[inline]
    pub fn set(&mut self, a: usize, s: usize, b: usize, v: C64) {
        self.data[(a * self.d + s) * self.dr + b] = v;
    }

    /// Matrix with rows (left, physical) and columns right.
    pub fn left_matrix(&self) -> Mat {
        Mat::from_vec(self.dl * self.d, self.dr, self.data.clone())
    }

    /// Matrix with rows left and columns (physical, right).
    pub fn right_matrix(&self) -> Mat {
        Mat::from_vec(self.dl, self.d * self.dr, self.data.clone())
    }

    /// `max |Σ_{α,i} conj(A)_{αiβ} A_{αiβ'} − δ|`.
    pub fn left_residual(&self) -> f64 {
        self.left_matrix().column_isometry_residual()
    }

    /// `max |Σ_{β,i} A_{αiβ} conj(A)_{α'iβ} − δ|`.
    pub fn right_residual(&self) -> f64 {
        self.right_matrix().row_isometry_residual()
    }

    fn conj(&self) -> Tensor3 {
        Tensor3 {
            dl: self.dl,
            d: self.d,
            dr: self.dr,
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CanonicalForm {
    None,
    Left,
    Right,
    Mixed(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpsState {
    pub tensors: Vec<Tensor3>,
    pub d: usize,
    pub form: CanonicalForm,
}

impl MpsState {
    pub fn new(tensors: Vec<Tensor3>, form: CanonicalForm) -> Result<Self> {
        let first = tensors.first().ok_or_else(|| Error::ShapeMismatch("empty MPS".into()))?;
        let d = first.d;
        if first.dl != 1 || tensors.last().unwrap().dr != 1 {
            return Err(Error::ShapeMismatch("boundary bonds must have dimension 1".into()));
        }
        for (j, w) in tensors.windows(2).enumerate() {
            if w[0].dr != w[1].dl {
                return Err(Error::ShapeMismatch(format!("bond {j}: {} vs {}", w[0].dr, w[1].dl)));
            }
        }
        if tensors.iter().any(|t| t.d != d) {
            return Err(Error::ShapeMismatch("inconsistent physical dimension".into()));
        }
        Ok(MpsState { tensors, d, form })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Dimensions of the L−1 internal bonds.
    pub fn bond_dims(&self) -> Vec<usize> {
        self.tensors[..self.len() - 1].iter().map(|t| t.dr).collect()
    }

    pub fn max_bond(&self) -> usize {
        self.bond_dims().into_iter().max().unwrap_or(1)
    }

    pub fn norm_sqr(&self) -> f64 {
        overlap_unchecked(self, self).re
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().max(0.0).sqrt()
    }

    /// Largest isometry residual matching the recorded canonical form.
    pub fn canonical_residual(&self) -> f64 {
        let l = self.len();
        self.tensors
            .iter()
            .enumerate()
            .map(|(j, t)| match self.form {
                CanonicalForm::Left => t.left_residual(),
                CanonicalForm::Right => t.right_residual(),
                CanonicalForm::Mixed(cj) if j < cj => t.left_residual(),
                CanonicalForm::Mixed(cj) if j > cj => t.right_residual(),
                _ => {
                    let _ = l;
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }

    /// Dense state vector of length d^L.
    pub fn to_dense(&self) -> Vec<C64> {
        let mut v = vec![ONE];
        let mut rows = 1usize;
        for t in &self.tensors {
            // v has shape (rows, dl); result (rows·d, dr)
            v = gemm(&v, &t.data, rows, t.dl, t.d * t.dr);
            rows *= t.d;
        }
        v
    }

    /// Left-canonical MPS of a dense vector by successive SVDs, truncated to
    /// `chi_max`.
    pub fn from_dense(psi: &[C64], l: usize, d: usize, chi_max: usize) -> Result<Self> {
        if psi.len() != d.pow(l as u32) {
            return Err(Error::ShapeMismatch(format!("vector length {} is not {d}^{l}", psi.len())));
        }
        let nrm = linalg::norm(psi);
        if nrm == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let mut rest = Mat::from_vec(d, psi.len() / d, psi.iter().map(|z| z / nrm).collect());
        let mut tensors = Vec::with_capacity(l);
        let mut dl = 1;
        for j in 0..l - 1 {
            let svd = rest.svd();
            let keep = truncation_rank(&svd.s, chi_max, 1e-14);
            let u = svd.u.columns(0..keep);
            tensors.push(Tensor3::from_vec(dl, d, keep, u.data));
            let sv = Mat::from_fn(keep, rest.cols, |i, k| svd.vt.get(i, k) * svd.s[i]);
            let remaining = d.pow((l - j - 2) as u32);
            rest = Mat::from_vec(keep * d, remaining, sv.data);
            dl = keep;
        }
        let n = linalg::norm(&rest.data);
        tensors.push(Tensor3::from_vec(dl, d, 1, rest.data.iter().map(|z| z / n).collect()));
        MpsState::new(tensors, CanonicalForm::Left)
    }

    pub fn canonicalize(&self, target: CanonicalForm) -> Result<MpsState> {
        Ok(self.canonicalize_with_norm(target)?.0)
    }

    /// Canonicalizes and normalizes, also returning the input norm.
    pub fn canonicalize_with_norm(&self, target: CanonicalForm) -> Result<(MpsState, f64)> {
        let l = self.len();
        let center = match target {
            CanonicalForm::Left | CanonicalForm::None => l - 1,
            CanonicalForm::Right => 0,
            CanonicalForm::Mixed(j) => {
                if j >= l {
                    return Err(Error::IndexOutOfRange { index: j, dim: l });
                }
                j
            }
        };
        let mut ts = self.tensors.clone();
        for j in 0..center {
            let (q, r) = ts[j].left_matrix().qr();
            let k = q.cols;
            ts[j] = Tensor3::from_vec(ts[j].dl, ts[j].d, k, q.data);
            let next = &ts[j + 1];
            let merged = r.matmul(&next.right_matrix());
            ts[j + 1] = Tensor3::from_vec(k, next.d, next.dr, merged.data);
        }
        for j in (center + 1..l).rev() {
            // LQ via QR of the adjoint
            let (q, r) = ts[j].right_matrix().adjoint().qr();
            let k = q.cols;
            ts[j] = Tensor3::from_vec(k, ts[j].d, ts[j].dr, q.adjoint().data);
            let prev = &ts[j - 1];
            let merged = prev.left_matrix().matmul(&r.adjoint());
            ts[j - 1] = Tensor3::from_vec(prev.dl, prev.d, k, merged.data);
        }
        let nrm = linalg::norm(&ts[center].data);
        if nrm < 1e-300 || !nrm.is_finite() {
            return Err(Error::ZeroNorm);
        }
        linalg::scale_in_place(&mut ts[center].data, re(1.0 / nrm));
        let form = match target {
            CanonicalForm::None => CanonicalForm::Left,
            t => t,
        };
        Ok((MpsState { tensors: ts, d: self.d, form }, nrm))
    }

    pub fn to_json(&self) -> MpsJson {
        MpsJson {
            l: self.len(),
            d: self.d,
            chi_per_bond: self.bond_dims(),
            canonical_form: self.form,
            tensors: self.tensors.iter().map(|t| t.data.iter().map(|z| [z.re, z.im]).collect()).collect(),
        }
    }

    pub fn from_json(j: &MpsJson) -> Result<MpsState> {
        if j.tensors.len() != j.l || j.chi_per_bond.len() + 1 != j.l {
            return Err(Error::ShapeMismatch("MPS container length fields disagree".into()));
        }
        let mut tensors = Vec::with_capacity(j.l);
        for (k, data) in j.tensors.iter().enumerate() {
            let dl = if k == 0 { 1 } else { j.chi_per_bond[k - 1] };
            let dr = if k + 1 == j.l { 1 } else { j.chi_per_bond[k] };
            if data.len() != dl * j.d * dr {
                return Err(Error::ShapeMismatch(format!("tensor {k} has {} entries", data.len())));
            }
            tensors.push(Tensor3::from_vec(dl, j.d, dr, data.iter().map(|p| c(p[0], p[1])).collect()));
        }
        MpsState::new(tensors, j.canonical_form)
    }
}

/// JSON container for an MPS with interleaved `[re, im]` entries.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MpsJson {
    #[serde(rename = "L")]
    pub l: usize,
    pub d: usize,
    pub chi_per_bond: Vec<usize>,
    pub canonical_form: CanonicalForm,
    pub tensors: Vec<Vec<[f64; 2]>>,
}

/// Number of singular values kept: at most `chi_max`, and only those above
/// `rel_cutoff` times the largest. At least one is always kept.
pub fn truncation_rank(s: &[f64], chi_max: usize, rel_cutoff: f64) -> usize {
    if s.is_empty() {
        return 0;
    }
    let floor = s[0] * rel_cutoff;
    s.iter().take(chi_max).take_while(|&&x| x > floor).count().max(1)
}

pub fn product_mps(l: usize, d: usize, basis: &[usize]) -> Result<MpsState> {
    if basis.len() != l {
        return Err(Error::ShapeMismatch(format!("expected {l} basis indices, got {}", basis.len())));
    }
    let tensors = basis
        .iter()
        .map(|&s| {
            if s >= d {
                return Err(Error::IndexOutOfRange { index: s, dim: d });
            }
            let mut t = Tensor3::zeros(1, d, 1);
            t.data[s] = ONE;
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    MpsState::new(tensors, CanonicalForm::Left)
}

/// Random MPS with standard-normal entries (real or complex), bond dimensions
/// capped by `chi` and by the exact Schmidt-rank bound, right-canonicalized.
pub fn random_mps<R: Rng + ?Sized>(l: usize, d: usize, chi: usize, real: bool, rng: &mut R) -> MpsState {
    let dims: Vec<usize> = (0..=l)
        .map(|b| {
            let left = (d as f64).powi(b as i32);
            let right = (d as f64).powi((l - b) as i32);
            (chi as f64).min(left).min(right) as usize
        })
        .collect();
    let tensors = (0..l)
        .map(|j| {
            let n = dims[j] * d * dims[j + 1];
            let data = (0..n)
                .map(|_| {
                    let x: f64 = rng.sample(StandardNormal);
                    let y: f64 = if real { 0.0 } else { rng.sample(StandardNormal) };
                    c(x, y)
                })
                .collect();
            Tensor3::from_vec(dims[j], d, dims[j + 1], data)
        })
        .collect();
    MpsState {
        tensors,
        d,
        form: CanonicalForm::None,
    }
    .canonicalize(CanonicalForm::Right)
    .expect("random state has nonzero norm")
}

fn check_same_shape(a: &MpsState, b: &MpsState) -> Result<()> {
    if a.len() != b.len() || a.d != b.d {
        return Err(Error::ShapeMismatch(format!("L={},d={} vs L={},d={}", a.len(), a.d, b.len(), b.d)));
    }
    Ok(())
}

/// `⟨a|b⟩`.
pub fn overlap(a: &MpsState, b: &MpsState) -> Result<C64> {
    check_same_shape(a, b)?;
    Ok(overlap_unchecked(a, b))
}

fn overlap_unchecked(a: &MpsState, b: &MpsState) -> C64 {
    let mut env = vec![ONE];
    for (ta, tb) in a.tensors.iter().zip(&b.tensors) {
        env = overlap_left_step(&env, ta, tb);
    }
    env[0]
}

/// `E'[β,β'] = Σ conj(A[α,s,β]) E[α,α'] B[α',s,β']`.
pub(crate) fn overlap_left_step(env: &[C64], a: &Tensor3, b: &Tensor3) -> Vec<C64> {
    let t = gemm(env, &b.data, a.dl, b.dl, b.d * b.dr);
    let ac = a.conj();
    gemm_tn(&ac.data, &t, a.dr, a.dl * a.d, b.dr)
}

/// `E'[α,α'] = Σ conj(A[α,s,β]) B[α',s,β'] E[β,β']`.
pub(crate) fn overlap_right_step(env: &[C64], a: &Tensor3, b: &Tensor3) -> Vec<C64> {
    // t[α', s, β] = Σ_β' B[α',s,β'] E[β,β']  = B · E^T
    let et = permute(env, &[a.dr, b.dr], &[1, 0]);
    let t = gemm(&b.data, &et, b.dl * b.d, b.dr, a.dr);
    // E'[α,α'] = Σ_{s,β} conj(A)[α,(s,β)] t[α',(s,β)]
    let ac = a.conj();
    let tt = permute(&t, &[b.dl, b.d * a.dr], &[1, 0]);
    gemm(&ac.data, &tt, a.dl, a.d * a.dr, b.dl)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    pub wl: usize,
    pub wr: usize,
    pub d: usize,
    pub data: Vec<C64>,
}

impl Tensor4 {
    pub fn zeros(wl: usize, wr: usize, d: usize) -> Self {
        Tensor4 {
            wl,
            wr,
            d,
            data: vec![ZERO; wl * wr * d * d],
        }
    }

    #[inline]
    fn offset(&self, m: usize, n: usize) -> usize {
        (m * self.wr + n) * self.d * self.d
    }

    pub fn block(&self, m: usize, n: usize) -> Mat {
        let o = self.offset(m, n);
        Mat::from_vec(self.d, self.d, self.data[o..o + self.d * self.d].to_vec())
    }

    pub fn set_block(&mut self, m: usize, n: usize, op: &Mat) {
        assert_eq!((op.rows, op.cols), (self.d, self.d));
        let o = self.offset(m, n);
        self.data[o..o + self.d * self.d].copy_from_slice(&op.data);
    }

    pub fn add_block(&mut self, m: usize, n: usize, op: &Mat) {
        let o = self.offset(m, n);
        for (x, y) in self.data[o..o + self.d * self.d].iter_mut().zip(&op.data) {
            *x += y;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mpo {
    pub tensors: Vec<Tensor4>,
    pub d: usize,
}

impl Mpo {
    pub fn new(tensors: Vec<Tensor4>) -> Result<Self> {
        let d = tensors.first().ok_or_else(|| Error::ShapeMismatch("empty MPO".into()))?.d;
        if tensors[0].wl != 1 || tensors.last().unwrap().wr != 1 {
            return Err(Error::ShapeMismatch("MPO boundary bonds must have dimension 1".into()));
        }
        for w in tensors.windows(2) {
            if w[0].wr != w[1].wl || w[1].d != d {
                return Err(Error::ShapeMismatch("inconsistent MPO bonds".into()));
            }
        }
        Ok(Mpo { tensors, d })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn bond_dims(&self) -> Vec<usize> {
        self.tensors[..self.len() - 1].iter().map(|t| t.wr).collect()
    }

    pub fn max_bond(&self) -> usize {
        self.bond_dims().into_iter().max().unwrap_or(1)
    }

    pub fn identity(l: usize, d: usize) -> Mpo {
        let tensors = (0..l)
            .map(|_| {
                let mut t = Tensor4::zeros(1, 1, d);
                t.set_block(0, 0, &Mat::identity(d));
                t
            })
            .collect();
        Mpo { tensors, d }
    }

    /// Tensor product of single-site operators; sites not listed get identity.
    pub fn product(l: usize, d: usize, ops: &[(usize, Mat)]) -> Mpo {
        let mut m = Mpo::identity(l, d);
        for (site, op) in ops {
            let cur = m.tensors[*site].block(0, 0);
            m.tensors[*site].set_block(0, 0, &op.matmul(&cur));
        }
        m
    }

    /// `Σ_j O_j` with `O_j` acting on site j; bond dimension 2.
    pub fn local_sum(ops: &[Mat]) -> Mpo {
        let l = ops.len();
        let d = ops[0].rows;
        let id = Mat::identity(d);
        if l == 1 {
            let mut t = Tensor4::zeros(1, 1, d);
            t.set_block(0, 0, &ops[0]);
            return Mpo { tensors: vec![t], d };
        }
        let tensors = (0..l)
            .map(|j| {
                let (wl, wr) = (if j == 0 { 1 } else { 2 }, if j + 1 == l { 1 } else { 2 });
                let mut t = Tensor4::zeros(wl, wr, d);
                // channel 0: nothing placed yet; channel 1: operator placed
                match (j == 0, j + 1 == l) {
                    (true, _) => {
                        t.set_block(0, 0, &id);
                        t.set_block(0, 1, &ops[j]);
                    }
                    (_, true) => {
                        t.set_block(0, 0, &ops[j]);
                        t.set_block(1, 0, &id);
                    }
                    _ => {
                        t.set_block(0, 0, &id);
                        t.set_block(0, 1, &ops[j]);
                        t.set_block(1, 1, &id);
                    }
                }
                t
            })
            .collect();
        Mpo { tensors, d }
    }

    /// Dense matrix of dimension d^L, site 0 most significant.
    pub fn to_dense(&self) -> Mat {
        // acc[w] holds the partial operator for each open right bond w
        let mut acc: Vec<Mat> = vec![Mat::identity(1)];
        for t in &self.tensors {
            let mut next = Vec::with_capacity(t.wr);
            for n in 0..t.wr {
                let dim = acc[0].rows * t.d;
                let mut m = Mat::zeros(dim, dim);
                for (mi, a) in acc.iter().enumerate() {
                    let blk = t.block(mi, n);
                    if blk.max_abs() == 0.0 {
                        continue;
                    }
                    m.add_assign_scaled(&a.kron(&blk), ONE);
                }
                next.push(m);
            }
            acc = next;
        }
        acc.pop().unwrap()
    }

    /// `(self · other)` as an MPO with multiplied bond dimensions.
    pub fn multiply(&self, other: &Mpo) -> Result<Mpo> {
        if self.len() != other.len() || self.d != other.d {
            return Err(Error::ShapeMismatch("MPO product shapes differ".into()));
        }
        let d = self.d;
        let tensors = self
            .tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| {
                let mut t = Tensor4::zeros(a.wl * b.wl, a.wr * b.wr, d);
                for m1 in 0..a.wl {
                    for n1 in 0..a.wr {
                        let ba = a.block(m1, n1);
                        if ba.max_abs() == 0.0 {
                            continue;
                        }
                        for m2 in 0..b.wl {
                            for n2 in 0..b.wr {
                                let bb = b.block(m2, n2);
                                if bb.max_abs() == 0.0 {
                                    continue;
                                }
                                t.set_block(m1 * b.wl + m2, n1 * b.wr + n2, &ba.matmul(&bb));
                            }
                        }
                    }
                }
                t
            })
            .collect();
        Mpo::new(tensors)
    }

    pub fn adjoint(&self) -> Mpo {
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let mut out = Tensor4::zeros(t.wl, t.wr, t.d);
                for m in 0..t.wl {
                    for n in 0..t.wr {
                        out.set_block(m, n, &t.block(m, n).adjoint());
                    }
                }
                out
            })
            .collect();
        Mpo { tensors, d: self.d }
    }

    /// Weighted sum of MPOs by direct-sum bonds.
    pub fn sum(terms: &[(C64, &Mpo)]) -> Result<Mpo> {
        let first = terms.first().ok_or_else(|| Error::ShapeMismatch("empty MPO sum".into()))?.1;
        let l = first.len();
        let d = first.d;
        let mut tensors = Vec::with_capacity(l);
        for j in 0..l {
            let wl: usize = if j == 0 { 1 } else { terms.iter().map(|t| t.1.tensors[j].wl).sum() };
            let wr: usize = if j + 1 == l { 1 } else { terms.iter().map(|t| t.1.tensors[j].wr).sum() };
            let mut t = Tensor4::zeros(wl, wr, d);
            let (mut ol, mut or) = (0, 0);
            for (coef, mpo) in terms {
                let src = &mpo.tensors[j];
                for m in 0..src.wl {
                    for n in 0..src.wr {
                        let mut blk = src.block(m, n);
                        if j == 0 {
                            blk = blk.scale(*coef);
                        }
                        let mm = if j == 0 { 0 } else { ol + m };
                        let nn = if j + 1 == l { 0 } else { or + n };
                        t.add_block(mm, nn, &blk);
                    }
                }
                ol += src.wl;
                or += src.wr;
            }
            tensors.push(t);
        }
        Mpo::new(tensors)
    }
}

/// Left environment update for `⟨bra|O|ket⟩`.
///
/// `L'[b,n,b'] = Σ conj(A[a,s,b]) L[a,m,a'] W[m,n,s,s'] B[a',s',b']`.
pub(crate) fn mpo_left_step(env: &[C64], bra: &Tensor3, w: &Tensor4, ket: &Tensor3) -> Vec<C64> {
    let (a, m, ap) = (bra.dl, w.wl, ket.dl);
    let (d, n) = (w.d, w.wr);
    let (b, bp) = (bra.dr, ket.dr);
    let t1 = gemm(env, &ket.data, a * m, ap, d * bp); // [a,m,s',b']
    let t1p = permute(&t1, &[a, m, d, bp], &[0, 3, 1, 2]); // [a,b',m,s']
    let wp = permute(&w.data, &[m, n, d, d], &[0, 3, 1, 2]); // [m,s',n,s]
    let t2 = gemm(&t1p, &wp, a * bp, m * d, n * d); // [a,b',n,s]
    let t2p = permute(&t2, &[a, bp, n, d], &[0, 3, 2, 1]); // [a,s,n,b']
    let ac = bra.conj();
    gemm_tn(&ac.data, &t2p, b, a * d, n * bp)
}

/// Right environment update for `⟨bra|O|ket⟩`.
///
/// `R'[a,m,a'] = Σ conj(A[a,s,b]) W[m,n,s,s'] B[a',s',b'] R[b,n,b']`.
pub(crate) fn mpo_right_step(env: &[C64], bra: &Tensor3, w: &Tensor4, ket: &Tensor3) -> Vec<C64> {
    let (a, ap) = (bra.dl, ket.dl);
    let (m, n, d) = (w.wl, w.wr, w.d);
    let (b, bp) = (bra.dr, ket.dr);
    let rp = permute(env, &[b, n, bp], &[2, 0, 1]); // [b',b,n]
    let t1 = gemm(&ket.data, &rp, ap * d, bp, b * n); // [a',s',b,n]
    let t1p = permute(&t1, &[ap, d, b, n], &[0, 2, 3, 1]); // [a',b,n,s']
    let wp = permute(&w.data, &[m, n, d, d], &[1, 3, 0, 2]); // [n,s',m,s]
    let t2 = gemm(&t1p, &wp, ap * b, n * d, m * d); // [a',b,m,s]
    let t2p = permute(&t2, &[ap, b, m, d], &[3, 1, 2, 0]); // [s,b,m,a']
    let ac = bra.conj();
    gemm(&ac.data, &t2p, a, d * b, m * ap)
}

fn check_mpo(state: &MpsState, op: &Mpo) -> Result<()> {
    if state.len() != op.len() || state.d != op.d {
        return Err(Error::ShapeMismatch(format!(
            "MPS L={},d={} vs MPO L={},d={}",
            state.len(),
            state.d,
            op.len(),
            op.d
        )));
    }
    Ok(())
}

/// `⟨bra|O|ket⟩`.
pub fn mpo_matrix_element(bra: &MpsState, op: &Mpo, ket: &MpsState) -> Result<C64> {
    check_mpo(bra, op)?;
    check_mpo(ket, op)?;
    let mut env = vec![ONE];
    for ((a, w), b) in bra.tensors.iter().zip(&op.tensors).zip(&ket.tensors) {
        env = mpo_left_step(&env, a, w, b);
    }
    Ok(env[0])
}

/// `⟨ψ|O|ψ⟩`.
pub fn expectation_mpo(state: &MpsState, op: &Mpo) -> Result<C64> {
    mpo_matrix_element(state, op, state)
}

/// Result of applying an operator: a normalized state and the norm it had.
#[derive(Clone, Debug)]
pub struct Applied {
    pub state: MpsState,
    pub norm: f64,
}

/// `O|ψ⟩` compressed to `chi_max` by SVD truncation. Singular values below
/// `tol` (relative to the largest at each cut) are also discarded.
pub fn apply_mpo(op: &Mpo, state: &MpsState, chi_max: usize, tol: f64) -> Result<Applied> {
    if chi_max < 1 {
        return Err(Error::Config("chi_max must be at least 1".into()));
    }
    check_mpo(state, op)?;
    let d = state.d;
    let tensors: Vec<Tensor3> = op
        .tensors
        .iter()
        .zip(&state.tensors)
        .map(|(w, a)| {
            // C[(m,a), s, (n,b)] = Σ_s' W[m,n,s,s'] A[a,s',b]
            let mut t = Tensor3::zeros(w.wl * a.dl, d, w.wr * a.dr);
            for m in 0..w.wl {
                for n in 0..w.wr {
                    let blk = w.block(m, n);
                    if blk.max_abs() == 0.0 {
                        continue;
                    }
                    for al in 0..a.dl {
                        for s in 0..d {
                            for sp in 0..d {
                                let x = blk.get(s, sp);
                                if x == ZERO {
                                    continue;
                                }
                                for b in 0..a.dr {
                                    let idx = ((m * a.dl + al) * d + s) * t.dr + n * a.dr + b;
                                    t.data[idx] += x * a.get(al, sp, b);
                                }
                            }
                        }
                    }
                }
            }
            t
        })
        .collect();
    let raw = MpsState::new(tensors, CanonicalForm::None)?;
    match svd_truncate(&raw, chi_max, tol.max(1e-14)) {
        Ok((s, nrm)) => Ok(Applied { state: s, norm: nrm }),
        Err(Error::ZeroNorm) => Ok(Applied {
            state: state.clone(),
            norm: 0.0,
        }),
        Err(e) => Err(e),
    }
}

/// Right-canonicalize, then sweep left to right truncating each bond by SVD.
/// Returns a normalized left-canonical state and the norm of the input.
fn svd_truncate(state: &MpsState, chi_max: usize, rel_cutoff: f64) -> Result<(MpsState, f64)> {
    let (mut s, nrm) = state.canonicalize_with_norm(CanonicalForm::Right)?;
    let l = s.len();
    for j in 0..l - 1 {
        let t = &s.tensors[j];
        let svd = t.left_matrix().svd();
        let keep = truncation_rank(&svd.s, chi_max, rel_cutoff);
        let (dl, d) = (t.dl, t.d);
        s.tensors[j] = Tensor3::from_vec(dl, d, keep, svd.u.columns(0..keep).data);
        let sv = Mat::from_fn(keep, svd.vt.cols, |i, k| svd.vt.get(i, k) * svd.s[i]);
        let next = &s.tensors[j + 1];
        let merged = sv.matmul(&next.right_matrix());
        s.tensors[j + 1] = Tensor3::from_vec(keep, next.d, next.dr, merged.data);
    }
    let last = l - 1;
    let n = linalg::norm(&s.tensors[last].data);
    if n < 1e-300 {
        return Err(Error::ZeroNorm);
    }
    linalg::scale_in_place(&mut s.tensors[last].data, re(1.0 / n));
    s.form = CanonicalForm::Left;
    Ok((s, nrm))
}

/// Compresses a normalized state to bond dimension `chi_max`, failing when the
/// fidelity loss `1 − |⟨out|in⟩|²` exceeds `tol`.
pub fn compress(state: &MpsState, chi_max: usize, tol: f64) -> Result<MpsState> {
    if chi_max < 1 {
        return Err(Error::Config("chi_max must be at least 1".into()));
    }
    let (out, _) = svd_truncate(state, chi_max, 1e-14)?;
    let ov = overlap(&out, state)?;
    let loss = (1.0 - ov.norm_sqr() / state.norm_sqr()).max(0.0);
    if loss > tol {
        return Err(Error::TargetUnreachable { loss, tol, chi_max });
    }
    Ok(out)
}

/// `Σ c_k |ψ_k⟩` as a direct-sum MPS, truncated back to `chi_max` and normalized.
pub fn linear_combination(terms: &[(C64, &MpsState)], chi_max: usize) -> Result<MpsState> {
    let first = terms.first().ok_or_else(|| Error::ShapeMismatch("empty linear combination".into()))?.1;
    let (l, d) = (first.len(), first.d);
    if terms.iter().any(|(_, m)| m.len() != l || m.d != d) {
        return Err(Error::ShapeMismatch("linear combination of MPS with different shapes".into()));
    }
    let mut tensors = Vec::with_capacity(l);
    for j in 0..l {
        let dl: usize = if j == 0 { 1 } else { terms.iter().map(|(_, m)| m.tensors[j].dl).sum() };
        let dr: usize = if j == l - 1 { 1 } else { terms.iter().map(|(_, m)| m.tensors[j].dr).sum() };
        let mut t = Tensor3::zeros(dl, d, dr);
        let (mut ol, mut or) = (0, 0);
        for (c, m) in terms {
            let src = &m.tensors[j];
            let scale = if j == 0 { *c } else { ONE };
            for a in 0..src.dl {
                for s in 0..d {
                    for b in 0..src.dr {
                        let (ta, tb) = (if j == 0 { 0 } else { ol + a }, if j == l - 1 { 0 } else { or + b });
                        t.set(ta, s, tb, t.get(ta, s, tb) + scale * src.get(a, s, b));
                    }
                }
            }
            ol += src.dl;
            or += src.dr;
        }
        tensors.push(t);
    }
    let sum = MpsState::new(tensors, CanonicalForm::None)?;
    Ok(svd_truncate(&sum, chi_max, 1e-14)?.0)
}

/// Heisenberg ring MPO for `ModelParams`.
///
/// Channels: 0 = nothing placed, 1..3 = (S⁺, S⁻, S^z) waiting for the right
/// neighbour, 4 = complete, and for rings with L > 2 channels 5..7 carry the
/// site-0 operators through the chain to close the bond (L−1, 0).
pub fn heisenberg_mpo(p: &ModelParams) -> Result<Mpo> {
    p.validate()?;
    let l = p.l;
    let d = p.spin.dim();
    let [sx, sy, sz] = [spin_matrix(p.spin, Axis::X), spin_matrix(p.spin, Axis::Y), spin_matrix(p.spin, Axis::Z)];
    let sp = sx.add(&sy.scale(c(0.0, 1.0)));
    let sm = sx.sub(&sy.scale(c(0.0, 1.0)));
    let id = Mat::identity(d);
    let h1 = p.onsite();
    let open = [sp.clone(), sm.clone(), sz.clone()];
    // S⁺S⁻ and S⁻S⁺ each carry J/2
    let close = [sm.scale(re(p.j / 2.0)), sp.scale(re(p.j / 2.0)), sz.scale(re(p.j))];
    let ring = p.periodic && l > 2;
    let w = if ring { 8 } else { 5 };
    let mut bulk = Tensor4::zeros(w, w, d);
    bulk.set_block(0, 0, &id);
    bulk.set_block(0, 4, &h1);
    bulk.set_block(4, 4, &id);
    for a in 0..3 {
        bulk.set_block(0, 1 + a, &open[a]);
        bulk.set_block(1 + a, 4, &close[a]);
        if ring {
            bulk.set_block(5 + a, 5 + a, &id);
        }
    }
    let mut tensors = Vec::with_capacity(l);
    for j in 0..l {
        let t = if j == 0 {
            let mut t = Tensor4::zeros(1, w, d);
            for n in 0..w {
                t.set_block(0, n, &bulk.block(0, n));
            }
            if ring {
                for a in 0..3 {
                    t.set_block(0, 5 + a, &open[a]);
                }
            }
            t
        } else if j + 1 == l {
            let mut t = Tensor4::zeros(w, 1, d);
            for m in 0..w {
                t.set_block(m, 0, &bulk.block(m, 4));
            }
            if ring {
                for a in 0..3 {
                    t.set_block(5 + a, 0, &close[a]);
                }
            }
            t
        } else {
            bulk.clone()
        };
        tensors.push(t);
    }
    Mpo::new(tensors)
}

/// `S̃^α_k = Σ_j e^{2πi jk/L} S^α_j` as a bond-dimension-2 MPO.
pub fn fourier_spin_mpo(l: usize, spin: Spin, alpha: Axis, k: usize) -> Result<Mpo> {
    if k >= l {
        return Err(Error::IndexOutOfRange { index: k, dim: l });
    }
    let s = spin_matrix(spin, alpha);
    let ops: Vec<Mat> = (0..l).map(|j| s.scale(fourier_phase(l, j, k))).collect();
    Ok(Mpo::local_sum(&ops))
}

/// `e^{2πi jk/L}`.
pub fn fourier_phase(l: usize, j: usize, k: usize) -> C64 {
    let theta = 2.0 * PI * ((j * k) % l) as f64 / l as f64;
    C64::from_polar(1.0, theta)
}
