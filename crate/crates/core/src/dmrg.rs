//! Two-site DMRG with orthogonality penalties for excited states.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, dot, gemm, gemm_tn, permute, LanczosOptions, Mat, C64, ONE, ZERO};
use crate::model::{spin_matrix, Axis, Spin};
use crate::mps::{
    expectation_mpo, linear_combination, mpo_left_step, mpo_matrix_element, mpo_right_step, overlap, overlap_left_step, overlap_right_step, random_mps,
    truncation_rank, CanonicalForm, Mpo, MpsState, Tensor3, Tensor4,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub chi_max: usize,
    pub n_states: usize,
    /// Energy-variance tolerance ε_V in meV².
    pub variance_tol: f64,
    /// Penalty weight λ in meV.
    pub penalty_weight: f64,
    pub max_sweeps: usize,
    pub seed: u64,
    /// Sweeps stop early once the energy changes by less than this.
    #[serde(default = "default_energy_tol")]
    pub energy_tol: f64,
    #[serde(default = "default_krylov")]
    pub krylov_dim: usize,
}

fn default_energy_tol() -> f64 {
    1e-11
}
fn default_krylov() -> usize {
    40
}

impl SolverConfig {
    /// Defaults for a coupling `j`: λ = 100|J|.
    pub fn new(chi_max: usize, n_states: usize, j: f64, seed: u64) -> Self {
        SolverConfig {
            chi_max,
            n_states,
            variance_tol: 1e-8,
            penalty_weight: 100.0 * j.abs(),
            max_sweeps: 30,
            seed,
            energy_tol: default_energy_tol(),
            krylov_dim: default_krylov(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chi_max < 1 || self.n_states < 1 || self.max_sweeps < 1 {
            return Err(Error::Config("chi_max, n_states and max_sweeps must be positive".into()));
        }
        if !(self.variance_tol > 0.0) {
            return Err(Error::Config("variance_tol must be positive".into()));
        }
        if !(self.penalty_weight > 0.0) {
            return Err(Error::Config("penalty_weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EigenResult {
    /// Left-canonical eigenstates ordered by energy.
    pub states: Vec<MpsState>,
    pub energies: Vec<f64>,
    pub variances: Vec<f64>,
    /// `⟨S^z_total⟩` per state (zero when the spin is not recognized).
    pub total_sz: Vec<f64>,
    /// Energy after every half-sweep, per state in solve order.
    pub sweep_log: Vec<Vec<f64>>,
    /// Whether each state reached the variance tolerance.
    pub converged: Vec<bool>,
    pub mpo_bond_dim: usize,
}

impl EigenResult {
    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }

    /// Max deviation of the Gram matrix from the identity.
    pub fn orthogonality_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, a) in self.states.iter().enumerate() {
            for (j, b) in self.states.iter().enumerate() {
                let g = overlap(a, b).expect("same shape").norm();
                worst = worst.max(if i == j { (g - 1.0).abs() } else { g });
            }
        }
        worst
    }
}

/// `⟨H²⟩ − ⟨H⟩²` by an MPO-squared contraction.
pub fn energy_variance(state: &MpsState, h: &Mpo) -> Result<f64> {
    let h2 = h.multiply(h)?;
    variance_with(state, h, &h2)
}

fn variance_with(state: &MpsState, h: &Mpo, h2: &Mpo) -> Result<f64> {
    let e = expectation_mpo(state, h)?.re;
    let e2 = expectation_mpo(state, h2)?.re;
    Ok(e2 - e * e)
}

/// Rotates each group of states degenerate within 1e-8 onto eigenstates of
/// total S^z, so the descending-S^z order is well defined. Returns the indices
/// that changed.
fn rotate_degenerate(found: &mut [MpsState], h: &Mpo, chi_max: usize) -> Result<Vec<usize>> {
    let Ok(spin) = Spin::from_dim(h.d) else { return Ok(vec![]) };
    let sz = Mpo::local_sum(&vec![spin_matrix(spin, Axis::Z); h.len()]);
    let e: Vec<f64> = found.iter().map(|s| expectation_mpo(s, h).map(|x| x.re)).collect::<Result<_>>()?;
    let mut idx: Vec<usize> = (0..found.len()).collect();
    idx.sort_by(|&a, &b| e[a].total_cmp(&e[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if (e[i] - e[*g.last().unwrap()]).abs() < 1e-8 => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    let mut changed = Vec::new();
    for g in groups.into_iter().filter(|g| g.len() > 1) {
        let m = Mat::from_fn(g.len(), g.len(), |a, b| mpo_matrix_element(&found[g[a]], &sz, &found[g[b]]).unwrap_or(ZERO));
        let (_, vecs) = m.eigh();
        let old: Vec<MpsState> = g.iter().map(|&i| found[i].clone()).collect();
        for (k, &i) in g.iter().enumerate() {
            let terms: Vec<(C64, &MpsState)> = old.iter().enumerate().map(|(b, s)| (vecs.get(b, k), s)).collect();
            found[i] = linear_combination(&terms, chi_max)?;
            changed.push(i);
        }
    }
    Ok(changed)
}

fn is_real_mpo(h: &Mpo) -> bool {
    h.tensors.iter().all(|t| t.data.iter().all(|z| z.im == 0.0))
}

pub fn solve(h: &Mpo, cfg: &SolverConfig) -> Result<EigenResult> {
    cfg.validate()?;
    let l = h.len();
    if l < 2 {
        return Err(Error::Config("DMRG needs at least two sites".into()));
    }
    if l <= 4 {
        let dense = h.to_dense();
        let r = dense.hermiticity_residual();
        if r > 1e-10 {
            return Err(Error::Config(format!("Hamiltonian is not Hermitian (residual {r:.2e})")));
        }
    }
    let real = is_real_mpo(h);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h2 = h.multiply(h)?;
    let mut found: Vec<MpsState> = Vec::new();
    let mut sweep_log = Vec::new();
    let mut converged = Vec::new();
    let mut variances = Vec::new();
    for p in 0..cfg.n_states {
        let init = random_mps(l, h.d, cfg.chi_max, real, &mut rng);
        let (state, log, var) = single_state(h, &h2, init, &found, cfg)?;
        log::debug!(
            "dmrg state {p}: E={:.12} var={var:.3e} sweeps={}",
            log.last().copied().unwrap_or(f64::NAN),
            log.len() / 2
        );
        converged.push(var < cfg.variance_tol);
        variances.push(var);
        sweep_log.push(log);
        found.push(state);
    }
    let rotated = rotate_degenerate(&mut found, h, cfg.chi_max)?;
    for &i in &rotated {
        variances[i] = variance_with(&found[i], h, &h2)?;
        converged[i] = variances[i] < cfg.variance_tol;
    }
    let energies: Vec<f64> = found.iter().map(|s| expectation_mpo(s, h).map(|e| e.re)).collect::<Result<_>>()?;
    let total_sz: Vec<f64> = match Spin::from_dim(h.d) {
        Ok(spin) => {
            let sz = Mpo::local_sum(&vec![spin_matrix(spin, Axis::Z); l]);
            found.iter().map(|s| expectation_mpo(s, &sz).map(|e| e.re)).collect::<Result<_>>()?
        }
        Err(_) => vec![0.0; found.len()],
    };
    let mut order: Vec<usize> = (0..found.len()).collect();
    order.sort_by(|&a, &b| {
        if (energies[a] - energies[b]).abs() < 1e-8 {
            total_sz[b].total_cmp(&total_sz[a])
        } else {
            energies[a].total_cmp(&energies[b])
        }
    });
    Ok(EigenResult {
        states: order.iter().map(|&i| found[i].clone()).collect(),
        energies: order.iter().map(|&i| energies[i]).collect(),
        variances: order.iter().map(|&i| variances[i]).collect(),
        total_sz: order.iter().map(|&i| total_sz[i]).collect(),
        converged: order.iter().map(|&i| converged[i]).collect(),
        sweep_log,
        mpo_bond_dim: h.max_bond(),
    })
}

/// Optimizes one state; returns it left-canonical with its half-sweep energy
/// log and final variance.
fn single_state(h: &Mpo, h2: &Mpo, init: MpsState, previous: &[MpsState], cfg: &SolverConfig) -> Result<(MpsState, Vec<f64>, f64)> {
    let l = h.len();
    let d = h.d;
    let mut psi = init.tensors;
    // lenv[j]: sites 0..j; renv[j]: sites j..L
    let mut lenv: Vec<Vec<C64>> = vec![vec![]; l + 1];
    let mut renv: Vec<Vec<C64>> = vec![vec![]; l + 1];
    lenv[0] = vec![ONE];
    renv[l] = vec![ONE];
    for j in (0..l).rev() {
        renv[j] = mpo_right_step(&renv[j + 1], &psi[j], &h.tensors[j], &psi[j]);
    }
    let np = previous.len();
    let mut olenv: Vec<Vec<Vec<C64>>> = vec![vec![vec![]; l + 1]; np];
    let mut orenv: Vec<Vec<Vec<C64>>> = vec![vec![vec![]; l + 1]; np];
    for (k, phi) in previous.iter().enumerate() {
        olenv[k][0] = vec![ONE];
        orenv[k][l] = vec![ONE];
        for j in (0..l).rev() {
            orenv[k][j] = overlap_right_step(&orenv[k][j + 1], &phi.tensors[j], &psi[j]);
        }
    }
    let opts = LanczosOptions {
        max_krylov: cfg.krylov_dim,
        max_restarts: 4,
        tol: 1e-12,
    };
    let mut log = Vec::new();
    let mut last = f64::INFINITY;
    let mut var = f64::INFINITY;
    for sweep in 0..cfg.max_sweeps {
        for dir in [Dir::Right, Dir::Left] {
            let sites: Vec<usize> = match dir {
                Dir::Right => (0..l - 1).collect(),
                Dir::Left => (0..l - 1).rev().collect(),
            };
            for j in sites {
                let (a, b) = (&psi[j], &psi[j + 1]);
                let (dl, dr) = (a.dl, b.dr);
                let theta = gemm(&a.data, &b.data, dl * d, a.dr, d * dr);
                let penalties: Vec<Vec<C64>> = previous
                    .iter()
                    .enumerate()
                    .map(|(k, phi)| penalty_vector(&olenv[k][j], &phi.tensors[j], &phi.tensors[j + 1], &orenv[k][j + 2], dl, dr))
                    .collect();
                let op = TwoSite {
                    lenv: &lenv[j],
                    w1: &h.tensors[j],
                    w2: &h.tensors[j + 1],
                    renv: &renv[j + 2],
                    dl,
                    dr,
                    d,
                };
                let lambda = cfg.penalty_weight;
                let apply = |x: &[C64], y: &mut [C64]| {
                    op.apply(x, y);
                    for v in &penalties {
                        let ov = dot(v, x) * lambda;
                        linalg::axpy(ov, v, y);
                    }
                };
                let (_, x, _) = linalg::lanczos_lowest(apply, &theta, &[], opts);
                let svd = Mat::from_vec(dl * d, d * dr, x).svd();
                let keep = truncation_rank(&svd.s, cfg.chi_max, 1e-14);
                let norm: f64 = svd.s[..keep].iter().map(|s| s * s).sum::<f64>().sqrt();
                match dir {
                    Dir::Right => {
                        psi[j] = Tensor3::from_vec(dl, d, keep, svd.u.columns(0..keep).data);
                        let sv = Mat::from_fn(keep, d * dr, |i, c| svd.vt.get(i, c) * (svd.s[i] / norm));
                        psi[j + 1] = Tensor3::from_vec(keep, d, dr, sv.data);
                        lenv[j + 1] = mpo_left_step(&lenv[j], &psi[j], &h.tensors[j], &psi[j]);
                        for (k, phi) in previous.iter().enumerate() {
                            olenv[k][j + 1] = overlap_left_step(&olenv[k][j], &phi.tensors[j], &psi[j]);
                        }
                    }
                    Dir::Left => {
                        psi[j + 1] = Tensor3::from_vec(keep, d, dr, svd.vt.rows_range(0..keep).data);
                        let us = Mat::from_fn(dl * d, keep, |r, i| svd.u.get(r, i) * (svd.s[i] / norm));
                        psi[j] = Tensor3::from_vec(dl, d, keep, us.data);
                        renv[j + 1] = mpo_right_step(&renv[j + 2], &psi[j + 1], &h.tensors[j + 1], &psi[j + 1]);
                        for (k, phi) in previous.iter().enumerate() {
                            orenv[k][j + 1] = overlap_right_step(&orenv[k][j + 2], &phi.tensors[j + 1], &psi[j + 1]);
                        }
                    }
                }
            }
            let state = MpsState {
                tensors: psi.clone(),
                d,
                form: CanonicalForm::None,
            };
            log.push(expectation_mpo(&state, h)?.re / state.norm_sqr());
        }
        let e = *log.last().unwrap();
        let state = MpsState {
            tensors: psi.clone(),
            d,
            form: CanonicalForm::Mixed(0),
        };
        var = variance_with(&state, h, h2)?;
        let de = (e - last).abs();
        last = e;
        if var < cfg.variance_tol || (sweep >= 1 && de < cfg.energy_tol * e.abs().max(1.0)) {
            break;
        }
    }
    let state = MpsState {
        tensors: psi,
        d,
        form: CanonicalForm::None,
    }
    .canonicalize(CanonicalForm::Left)?;
    let var = variance_with(&state, h, h2).unwrap_or(var);
    Ok((state, log, var))
}

#[derive(Clone, Copy)]
enum Dir {
    Right,
    Left,
}

/// Effective two-site Hamiltonian on the block (j, j+1).
struct TwoSite<'a> {
    lenv: &'a [C64],
    w1: &'a Tensor4,
    w2: &'a Tensor4,
    renv: &'a [C64],
    dl: usize,
    dr: usize,
    d: usize,
}

impl TwoSite<'_> {
    /// `y[a,s1,s2,c] = Σ L[a,m,a'] W1[m,n,s1,s1'] W2[n,o,s2,s2'] R[c,o,c'] x[a',s1',s2',c']`.
    fn apply(&self, x: &[C64], y: &mut [C64]) {
        let (a, c, d) = (self.dl, self.dr, self.d);
        let (m, n, o) = (self.w1.wl, self.w1.wr, self.w2.wr);
        let t1 = gemm(self.lenv, x, a * m, a, d * d * c); // [a,m,s1',s2',c']
        let t1p = permute(&t1, &[a, m, d, d, c], &[0, 3, 4, 1, 2]); // [a,s2',c',m,s1']
        let w1p = permute(&self.w1.data, &[m, n, d, d], &[0, 3, 1, 2]); // [m,s1',n,s1]
        let t2 = gemm(&t1p, &w1p, a * d * c, m * d, n * d); // [a,s2',c',n,s1]
        let t2p = permute(&t2, &[a, d, c, n, d], &[0, 2, 4, 3, 1]); // [a,c',s1,n,s2']
        let w2p = permute(&self.w2.data, &[n, o, d, d], &[0, 3, 1, 2]); // [n,s2',o,s2]
        let t3 = gemm(&t2p, &w2p, a * c * d, n * d, o * d); // [a,c',s1,o,s2]
        let t3p = permute(&t3, &[a, c, d, o, d], &[0, 2, 4, 3, 1]); // [a,s1,s2,o,c']
        let rp = permute(self.renv, &[c, o, c], &[1, 2, 0]); // [o,c',c]
        let out = gemm(&t3p, &rp, a * d * d, o * c, c);
        y.copy_from_slice(&out);
    }
}

/// Vector `v` with `⟨v|x⟩ = ⟨φ|ψ(x)⟩` for the two-site block.
fn penalty_vector(ol: &[C64], p1: &Tensor3, p2: &Tensor3, or: &[C64], dl: usize, dr: usize) -> Vec<C64> {
    let (al, ar, d) = (p1.dl, p2.dr, p1.d);
    let phi2 = gemm(&p1.data, &p2.data, al * d, p1.dr, d * ar); // [aφ,s1,s2,cφ]
    let olc: Vec<C64> = ol.iter().map(|z| z.conj()).collect(); // [aφ,a']
    let t = gemm_tn(&olc, &phi2, dl, al, d * d * ar); // [a',s1,s2,cφ]
    let orc: Vec<C64> = or.iter().map(|z| z.conj()).collect(); // [cφ,c']
    gemm(&t, &orc, dl * d * d, ar, dr)
}

/// Embeds a dense vector as an exact MPS (for variance checks of oracle
/// eigenvectors).
pub fn dense_to_mps(v: &[C64], l: usize, d: usize) -> Result<MpsState> {
    MpsState::from_dense(v, l, d, usize::MAX)
}
