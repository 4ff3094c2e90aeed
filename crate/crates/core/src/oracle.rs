//! Exact diagonalization of the ring Hamiltonian.
//!
//! Basis states are indexed like dense MPS vectors: site 0 is the most
//! significant base-d digit and local index `s` labels `M = S − s`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::linalg::{self, c, dot, re, LanczosOptions, Mat, C64, ZERO};
use crate::model::{spin_matrix, Axis, ModelParams};
use crate::{Error, Result};

const MAX_DIM: usize = 1 << 20;
/// Under `Method::Auto`, blocks up to this dimension are diagonalized densely.
pub const DENSE_LIMIT: usize = 512;

/// Sparse Hermitian matrix stored as per-column scatter lists.
#[derive(Clone, Debug)]
pub struct SparseBlock {
    /// Twice the total S^z of the block, or `None` for the unblocked space.
    pub two_sz: Option<i64>,
    /// Full-space indices of the block's basis states, ascending.
    pub states: Vec<usize>,
    col_ptr: Vec<usize>,
    rows: Vec<u32>,
    vals: Vec<C64>,
}

impl SparseBlock {
    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn apply(&self, x: &[C64], y: &mut [C64]) {
        y.iter_mut().for_each(|v| *v = ZERO);
        for (col, &xc) in x.iter().enumerate() {
            if xc == ZERO {
                continue;
            }
            for k in self.col_ptr[col]..self.col_ptr[col + 1] {
                y[self.rows[k] as usize] += self.vals[k] * xc;
            }
        }
    }

    pub fn to_dense(&self) -> Mat {
        let n = self.dim();
        let mut m = Mat::zeros(n, n);
        for col in 0..n {
            for k in self.col_ptr[col]..self.col_ptr[col + 1] {
                *m.at_mut(self.rows[k] as usize, col) += self.vals[k];
            }
        }
        m
    }
}

#[derive(Clone, Debug)]
pub struct SparseHamiltonian {
    pub params: ModelParams,
    pub dim: usize,
    pub blocks: Vec<SparseBlock>,
}

impl SparseHamiltonian {
    /// Dense matrix over the full space (small systems only).
    pub fn to_dense(&self) -> Mat {
        let mut m = Mat::zeros(self.dim, self.dim);
        for b in &self.blocks {
            let bd = b.to_dense();
            for (i, &si) in b.states.iter().enumerate() {
                for (j, &sj) in b.states.iter().enumerate() {
                    m.set(si, sj, bd.get(i, j));
                }
            }
        }
        m
    }

    pub fn block_sizes(&self) -> Vec<(Option<i64>, usize)> {
        self.blocks.iter().map(|b| (b.two_sz, b.dim())).collect()
    }
}

fn digits(mut idx: usize, l: usize, d: usize) -> Vec<usize> {
    let mut out = vec![0; l];
    for k in (0..l).rev() {
        out[k] = idx % d;
        idx /= d;
    }
    out
}

/// Non-zero action of `H` on one basis state: list of (target, amplitude).
fn column(p: &ModelParams, idx: usize, ops: &LocalOps) -> Vec<(usize, C64)> {
    let l = p.l;
    let d = p.spin.dim();
    let s = digits(idx, l, d);
    let pow: Vec<usize> = (0..l).map(|k| d.pow((l - 1 - k) as u32)).collect();
    let mut out: Vec<(usize, C64)> = Vec::new();
    let mut diag = ZERO;
    for (i, j) in p.bonds() {
        let (si, sj) = (s[i], s[j]);
        diag += re(p.j) * ops.sz[si] * ops.sz[sj];
        // S⁺_i S⁻_j and S⁻_i S⁺_j, each with J/2
        if si > 0 && sj + 1 < d {
            let amp = ops.splus[si] * ops.sminus[sj] * (p.j / 2.0);
            let t = idx - pow[i] + pow[j];
            out.push((t, re(amp)));
        }
        if si + 1 < d && sj > 0 {
            let amp = ops.sminus[si] * ops.splus[sj] * (p.j / 2.0);
            let t = idx + pow[i] - pow[j];
            out.push((t, re(amp)));
        }
    }
    for i in 0..l {
        for sp in 0..d {
            let v = ops.onsite.get(sp, s[i]);
            if v == ZERO {
                continue;
            }
            if sp == s[i] {
                diag += v;
            } else {
                out.push((idx - s[i] * pow[i] + sp * pow[i], v));
            }
        }
    }
    out.push((idx, diag));
    out
}

struct LocalOps {
    sz: Vec<C64>,
    /// `⟨s−1|S⁺|s⟩`
    splus: Vec<f64>,
    /// `⟨s+1|S⁻|s⟩`
    sminus: Vec<f64>,
    onsite: Mat,
}

impl LocalOps {
    fn new(p: &ModelParams) -> Self {
        let d = p.spin.dim();
        let z = spin_matrix(p.spin, Axis::Z);
        let x = spin_matrix(p.spin, Axis::X);
        let sz = (0..d).map(|s| z.get(s, s)).collect();
        // S⁺ = 2 S^x restricted to the upper off-diagonal
        let splus = (0..d).map(|s| if s > 0 { 2.0 * x.get(s - 1, s).re } else { 0.0 }).collect();
        let sminus = (0..d).map(|s| if s + 1 < d { 2.0 * x.get(s + 1, s).re } else { 0.0 }).collect();
        LocalOps {
            sz,
            splus,
            sminus,
            onsite: p.onsite(),
        }
    }
}

/// Sparse Hamiltonian, split into total-S^z blocks when the field is axial.
pub fn build_hamiltonian(p: &ModelParams) -> Result<SparseHamiltonian> {
    p.validate()?;
    let d = p.spin.dim();
    let dim = d
        .checked_pow(p.l as u32)
        .filter(|&x| x <= MAX_DIM)
        .ok_or(Error::DimensionCap(d.pow(p.l.min(40) as u32)))?;
    let ops = LocalOps::new(p);
    let mut groups: Vec<(Option<i64>, Vec<usize>)> = if p.conserves_sz() {
        let two_s = (d - 1) as i64;
        let mut map = std::collections::BTreeMap::<i64, Vec<usize>>::new();
        for idx in 0..dim {
            let tot: i64 = digits(idx, p.l, d).iter().map(|&s| two_s - 2 * s as i64).sum();
            map.entry(tot).or_default().push(idx);
        }
        map.into_iter().rev().map(|(k, v)| (Some(k), v)).collect()
    } else {
        vec![(None, (0..dim).collect())]
    };
    let blocks = groups
        .drain(..)
        .map(|(two_sz, states)| {
            let mut col_ptr = Vec::with_capacity(states.len() + 1);
            let mut rows = Vec::new();
            let mut vals = Vec::new();
            col_ptr.push(0);
            for &st in &states {
                for (t, amp) in column(p, st, &ops) {
                    let r = states.binary_search(&t).expect("Hamiltonian leaks out of its S^z block");
                    rows.push(r as u32);
                    vals.push(amp);
                }
                col_ptr.push(rows.len());
            }
            SparseBlock {
                two_sz,
                states,
                col_ptr,
                rows,
                vals,
            }
        })
        .collect();
    Ok(SparseHamiltonian {
        params: p.clone(),
        dim,
        blocks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Auto,
    Dense,
    Lanczos,
}

/// Lowest eigenpairs with full-space eigenvectors.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseSpectrum {
    pub energies: Vec<f64>,
    pub vectors: Vec<Vec<C64>>,
    /// Twice the total S^z of each eigenvector's block, when blocked.
    pub two_sz: Vec<Option<i64>>,
    pub params: ModelParams,
    pub converged: bool,
}

impl DenseSpectrum {
    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }

    /// Largest `‖Hv − Ev‖`.
    pub fn max_residual(&self, h: &SparseHamiltonian) -> f64 {
        self.vectors
            .iter()
            .zip(&self.energies)
            .map(|(v, &e)| {
                let hv = apply_full(h, v);
                hv.iter().zip(v).map(|(a, b)| (a - b * e).norm_sqr()).sum::<f64>().sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// `H v` on a full-space vector.
pub fn apply_full(h: &SparseHamiltonian, v: &[C64]) -> Vec<C64> {
    let mut out = vec![ZERO; h.dim];
    for b in &h.blocks {
        let x: Vec<C64> = b.states.iter().map(|&s| v[s]).collect();
        let mut y = vec![ZERO; b.dim()];
        b.apply(&x, &mut y);
        for (&s, yv) in b.states.iter().zip(y) {
            out[s] = yv;
        }
    }
    out
}

/// The `n` lowest eigenpairs of `h` over all blocks.
pub fn low_eigenpairs(h: &SparseHamiltonian, n: usize, method: Method) -> Result<DenseSpectrum> {
    if n > 64 {
        return Err(Error::Config(format!("at most 64 eigenpairs supported, requested {n}")));
    }
    let mut found: Vec<(f64, Option<i64>, Vec<C64>)> = Vec::new();
    let mut converged = true;
    for (bi, b) in h.blocks.iter().enumerate() {
        let k = n.min(b.dim());
        let dense = match method {
            Method::Auto => b.dim() <= DENSE_LIMIT,
            Method::Dense => true,
            Method::Lanczos => b.dim() <= k + 2,
        };
        let (vals, vecs): (Vec<f64>, Vec<Vec<C64>>) = if dense {
            let (vals, vecs) = b.to_dense().eigh();
            (vals[..k].to_vec(), (0..k).map(|j| vecs.column(j)).collect())
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ bi as u64);
            let opts = LanczosOptions {
                max_krylov: 120,
                max_restarts: 100,
                tol: 1e-12,
            };
            let (vals, vecs, ok) = linalg::lanczos_eigenpairs(|x, y| b.apply(x, y), b.dim(), k, opts, &mut rng);
            converged &= ok;
            (vals, vecs)
        };
        for (e, v) in vals.into_iter().zip(vecs) {
            let mut full = vec![ZERO; h.dim];
            for (&s, x) in b.states.iter().zip(v) {
                full[s] = x;
            }
            fix_phase(&mut full);
            found.push((e, b.two_sz, full));
        }
    }
    // ascending energy; degenerate levels by descending S^z
    found.sort_by(|a, b| if (a.0 - b.0).abs() < 1e-8 { b.1.cmp(&a.1) } else { a.0.total_cmp(&b.0) });
    found.truncate(n);
    Ok(DenseSpectrum {
        energies: found.iter().map(|f| f.0).collect(),
        two_sz: found.iter().map(|f| f.1).collect(),
        vectors: found.into_iter().map(|f| f.2).collect(),
        params: h.params.clone(),
        converged,
    })
}

/// Makes the largest-magnitude component real and positive.
pub fn fix_phase(v: &mut [C64]) {
    if let Some(big) = v.iter().copied().max_by(|a, b| a.norm().total_cmp(&b.norm())) {
        if big.norm() > 0.0 {
            let ph = big.conj() / big.norm();
            v.iter_mut().for_each(|x| *x *= ph);
        }
    }
}

/// Applies a single-site operator to a full-space vector.
pub fn apply_site_op(v: &[C64], l: usize, d: usize, site: usize, op: &Mat) -> Vec<C64> {
    let stride = d.pow((l - 1 - site) as u32);
    let mut out = vec![ZERO; v.len()];
    for (idx, &x) in v.iter().enumerate() {
        if x == ZERO {
            continue;
        }
        let s = (idx / stride) % d;
        let base = idx - s * stride;
        for sp in 0..d {
            let m = op.get(sp, s);
            if m != ZERO {
                out[base + sp * stride] += m * x;
            }
        }
    }
    out
}

/// `O^{αβ}_{ij;p} = ⟨ψ₀|S^α_i|ψ_p⟩⟨ψ_p|S^β_j|ψ₀⟩`.
pub fn exact_dipole_elements(spec: &DenseSpectrum, p: usize, i: usize, j: usize, alpha: Axis, beta: Axis) -> Result<C64> {
    let l = spec.params.l;
    let d = spec.params.spin.dim();
    if p >= spec.len() {
        return Err(Error::IndexOutOfRange { index: p, dim: spec.len() });
    }
    for site in [i, j] {
        if site >= l {
            return Err(Error::IndexOutOfRange { index: site, dim: l });
        }
    }
    let psi0 = &spec.vectors[0];
    let psip = &spec.vectors[p];
    let a = dot(psi0, &apply_site_op(psip, l, d, i, &spin_matrix(spec.params.spin, alpha)));
    let b = dot(psip, &apply_site_op(psi0, l, d, j, &spin_matrix(spec.params.spin, beta)));
    Ok(a * b)
}

/// `⟨ψ_p|S^α_i|ψ₀⟩` for every site.
pub fn exact_site_amplitudes(spec: &DenseSpectrum, p: usize, alpha: Axis) -> Vec<C64> {
    let l = spec.params.l;
    let d = spec.params.spin.dim();
    let op = spin_matrix(spec.params.spin, alpha);
    (0..l).map(|i| dot(&spec.vectors[p], &apply_site_op(&spec.vectors[0], l, d, i, &op))).collect()
}

/// Total `⟨S^z⟩` of a full-space vector.
pub fn total_sz(v: &[C64], l: usize, d: usize) -> f64 {
    let s = (d as f64 - 1.0) / 2.0;
    v.iter()
        .enumerate()
        .map(|(idx, x)| x.norm_sqr() * digits(idx, l, d).iter().map(|&k| s - k as f64).sum::<f64>())
        .sum()
}

/// Cache key for a parameter set and eigenpair count.
pub fn cache_key(p: &ModelParams, n: usize) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(p).expect("params serialize"));
    h.update(n.to_le_bytes());
    hex::encode(&h.finalize()[..16])
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    params: ModelParams,
    energies: Vec<f64>,
    two_sz: Vec<Option<i64>>,
    dim: usize,
    converged: bool,
}

/// `low_eigenpairs` with an on-disk cache in `dir`.
pub fn cached_low_eigenpairs(p: &ModelParams, n: usize, dir: &Path) -> Result<DenseSpectrum> {
    let key = cache_key(p, n);
    let head_path = dir.join(format!("{key}.json"));
    let data_path = dir.join(format!("{key}.bin"));
    if let (Ok(head), Ok(bytes)) = (std::fs::read(&head_path), std::fs::read(&data_path)) {
        if let Ok(h) = serde_json::from_slice::<CacheHeader>(&head) {
            if h.params == *p && bytes.len() == h.energies.len() * h.dim * 16 {
                let floats: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
                let vectors = floats
                    .chunks_exact(2 * h.dim)
                    .map(|v| v.chunks_exact(2).map(|z| c(z[0], z[1])).collect())
                    .collect();
                log::debug!("oracle cache hit {key}");
                return Ok(DenseSpectrum {
                    energies: h.energies,
                    vectors,
                    two_sz: h.two_sz,
                    params: h.params,
                    converged: h.converged,
                });
            }
        }
    }
    let h = build_hamiltonian(p)?;
    let spec = low_eigenpairs(&h, n, Method::Auto)?;
    std::fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(n * h.dim * 16);
    for v in &spec.vectors {
        for z in v {
            bytes.extend_from_slice(&z.re.to_le_bytes());
            bytes.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    let header = CacheHeader {
        params: p.clone(),
        energies: spec.energies.clone(),
        two_sz: spec.two_sz.clone(),
        dim: h.dim,
        converged: spec.converged,
    };
    // write data first so a present header implies complete data
    let tmp = data_path.with_extension("bin.tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, &data_path)?;
    std::fs::write(&head_path, serde_json::to_vec(&header)?)?;
    Ok(spec)
}

/// `I(Q, ω)` from exact eigenpairs `1..n` over the requested channels.
pub fn exact_spectrum(
    spec: &DenseSpectrum,
    channels: &[(Axis, Axis)],
    geo: &crate::spectral::Geometry,
    ff: &crate::spectral::FormFactorParams,
    q_grid: &crate::spectral::QGrid,
    omega_grid: &[f64],
    opts: &crate::spectral::IntensityOptions,
) -> Result<crate::spectral::SpectrumGrid> {
    let ts = crate::spectral::TransitionSet::from_spectrum(spec, channels)?;
    crate::spectral::intensity(&ts, geo, ff, q_grid, omega_grid, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Spin;
    use crate::mps::heisenberg_mpo;

    #[test]
    fn two_site_spectrum() {
        let h = build_hamiltonian(&ModelParams::heisenberg_ring(2, Spin::Half, 1.0)).unwrap();
        let spec = low_eigenpairs(&h, 4, Method::Dense).unwrap();
        let want = [-0.75, 0.25, 0.25, 0.25];
        for (e, w) in spec.energies.iter().zip(want) {
            assert!((e - w).abs() < 1e-12);
        }
        assert_eq!(h.to_dense().hermiticity_residual(), 0.0);
    }

    #[test]
    fn sparse_matches_mpo_dense() {
        let p = ModelParams {
            l: 4,
            spin: Spin::Half,
            j: 1.0,
            d: 0.0,
            g: 1.98,
            b: [0.653 * 3.0, 0.0, 0.758 * 3.0],
            mu_b: crate::model::MU_B,
            periodic: true,
        };
        let h = build_hamiltonian(&p).unwrap();
        assert!(h.to_dense().max_abs_diff(&heisenberg_mpo(&p).unwrap().to_dense()) < 1e-12);
        let p3 = ModelParams { l: 3, ..ModelParams::cr8() }.with_field([0.0, 0.0, 2.0]);
        let h3 = build_hamiltonian(&p3).unwrap();
        assert_eq!(h3.blocks.len(), 10);
        assert!(h3.to_dense().max_abs_diff(&heisenberg_mpo(&p3).unwrap().to_dense()) < 1e-12);
    }

    #[test]
    fn dense_and_lanczos_agree_on_ring() {
        let p = ModelParams::heisenberg_ring(10, Spin::Half, 1.0);
        let h = build_hamiltonian(&p).unwrap();
        let a = low_eigenpairs(&h, 3, Method::Dense).unwrap();
        let b = low_eigenpairs(&h, 3, Method::Lanczos).unwrap();
        for (x, y) in a.energies.iter().zip(&b.energies) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(b.max_residual(&h) < 1e-8);
    }

    #[test]
    fn dipole_hermitian_pair() {
        let p = ModelParams::heisenberg_ring(6, Spin::Half, 1.0).with_field([0.4, 0.0, 1.0]);
        let h = build_hamiltonian(&p).unwrap();
        let spec = low_eigenpairs(&h, 4, Method::Auto).unwrap();
        for (a, b) in [(Axis::X, Axis::Z), (Axis::Y, Axis::X)] {
            let o1 = exact_dipole_elements(&spec, 2, 1, 3, a, b).unwrap();
            let o2 = exact_dipole_elements(&spec, 2, 3, 1, b, a).unwrap();
            assert!((o1 - o2.conj()).norm() < 1e-12);
        }
        let diag = exact_dipole_elements(&spec, 0, 2, 2, Axis::Z, Axis::Z).unwrap();
        assert!(diag.re >= 0.0 && diag.im.abs() < 1e-14);
    }

    #[test]
    fn cache_roundtrip() {
        let dir = std::env::temp_dir().join(format!("qtn-oracle-cache-{}", std::process::id()));
        let p = ModelParams::heisenberg_ring(6, Spin::Half, 1.0);
        let a = cached_low_eigenpairs(&p, 3, &dir).unwrap();
        let b = cached_low_eigenpairs(&p, 3, &dir).unwrap();
        assert_eq!(a.energies, b.energies);
        assert_eq!(a.vectors, b.vectors);
        std::fs::remove_dir_all(&dir).ok();
    }
}
