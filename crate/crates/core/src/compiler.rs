//! Unitary embedding of canonical MPS tensors and greedy variational
//! compilation of the embeddings into short gate sequences.
//!
//! Local unitaries act on `n_phys + n_bond` qubits with basis index
//! `phys · χ_pad + bond`; qubit 0 is the most significant bit.

use std::f64::consts::FRAC_1_SQRT_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{c, Mat, C64, ONE, ZERO};
use crate::mps::Tensor3;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// Target isometry: the first `k` columns of the preparation unitary.
///
/// For `Left`, column β holds `L[α,i,β]` at row `(i, α)`. For `Right` the
/// matrix describes `U_R†`: column α holds `R[α,i,β]` at row `(i, β)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Isometry {
    pub matrix: Mat,
    pub site: usize,
    pub side: Side,
    pub n_qubits: usize,
}

impl Isometry {
    pub fn from_tensor(t: &Tensor3, site: usize, side: Side, chi_pad: usize) -> Result<Isometry> {
        if !chi_pad.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(chi_pad));
        }
        if !t.d.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(t.d));
        }
        let (out_bond, in_bond) = match side {
            Side::Left => (t.dl, t.dr),
            Side::Right => (t.dr, t.dl),
        };
        if out_bond > chi_pad || in_bond > chi_pad {
            return Err(Error::ShapeMismatch(format!("bond {}x{} exceeds padded dimension {chi_pad}", t.dl, t.dr)));
        }
        let n = t.d * chi_pad;
        let mut m = Mat::zeros(n, in_bond);
        for a in 0..t.dl {
            for s in 0..t.d {
                for b in 0..t.dr {
                    let (row_bond, col) = match side {
                        Side::Left => (a, b),
                        Side::Right => (b, a),
                    };
                    m.set(s * chi_pad + row_bond, col, t.get(a, s, b));
                }
            }
        }
        let iso = Isometry {
            matrix: m,
            site,
            side,
            n_qubits: n.trailing_zeros() as usize,
        };
        let r = iso.residual();
        if r > 1e-8 {
            return Err(Error::NotIsometric(r));
        }
        Ok(iso)
    }

    pub fn residual(&self) -> f64 {
        self.matrix.column_isometry_residual()
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows
    }
}

/// Full unitary embedding of a canonical tensor.
///
/// `Left` returns `U_L` with `⟨iα|U_L|0β⟩ = L[α,i,β]`; `Right` returns `U_R`
/// with `⟨iβ|U_R†|0α⟩ = R[α,i,β]`.
pub fn embed(t: &Tensor3, side: Side, chi_pad: usize) -> Result<Mat> {
    let iso = Isometry::from_tensor(t, 0, side, chi_pad)?;
    let u = iso.matrix.complete_to_unitary();
    Ok(match side {
        Side::Left => u,
        Side::Right => u.adjoint(),
    })
}

/// Eq. cost `Σ_S |U_ab − T_ab|²` after absorbing the optimal global phase,
/// `S = {(a,b): |T_ab| > δ}`.
pub fn compilation_cost(u: &Mat, target: &Isometry, delta: f64) -> f64 {
    let t = &target.matrix;
    assert_eq!(u.rows, t.rows, "dimension mismatch");
    let mut su = 0.0;
    let mut st = 0.0;
    let mut z = ZERO;
    for a in 0..t.rows {
        for b in 0..t.cols {
            let tv = t.get(a, b);
            if tv.norm() > delta {
                let uv = u.get(a, b);
                su += uv.norm_sqr();
                st += tv.norm_sqr();
                z += tv.conj() * uv;
            }
        }
    }
    (su + st - 2.0 * z.norm()).max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    /// `Rz(a) Ry(b) Rz(c)` on one qubit.
    Su2,
    /// `(Ry(a) ⊗ Ry(b)) · CNOT(control, target)`.
    CnotRy,
    /// `M† (A ⊗ B) M` with `A, B ∈ SU(2)`.
    So4,
}

impl GateKind {
    pub fn n_params(self) -> usize {
        match self {
            GateKind::Su2 => 3,
            GateKind::CnotRy => 2,
            GateKind::So4 => 6,
        }
    }

    pub fn n_qubits(self) -> usize {
        match self {
            GateKind::Su2 => 1,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GateKind::Su2 => "su2",
            GateKind::CnotRy => "cnot_ry",
            GateKind::So4 => "so4",
        }
    }

    /// CNOTs needed for a standard decomposition (SO(4) needs two).
    pub fn cnot_cost(self) -> usize {
        match self {
            GateKind::Su2 => 0,
            GateKind::CnotRy => 1,
            GateKind::So4 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub kind: GateKind,
    pub qubits: Vec<usize>,
    pub params: Vec<f64>,
}

impl Gate {
    pub fn matrix(&self) -> Mat {
        gate_matrix(self.kind, &self.params)
    }
}

fn rz(t: f64) -> Mat {
    Mat::from_vec(2, 2, vec![C64::from_polar(1.0, -t / 2.0), ZERO, ZERO, C64::from_polar(1.0, t / 2.0)])
}

fn ry(t: f64) -> Mat {
    let (s, co) = (t / 2.0).sin_cos();
    Mat::from_real(2, 2, &[co, -s, s, co])
}

/// `Rz(a) Ry(b) Rz(c)`.
pub fn su2(p: &[f64]) -> Mat {
    rz(p[0]).matmul(&ry(p[1])).matmul(&rz(p[2]))
}

fn su2_derivs(p: &[f64]) -> [Mat; 3] {
    let (a, b, cc) = (rz(p[0]), ry(p[1]), rz(p[2]));
    let hz = Mat::from_vec(2, 2, vec![c(0.0, -0.5), ZERO, ZERO, c(0.0, 0.5)]);
    let hy = Mat::from_real(2, 2, &[0.0, -0.5, 0.5, 0.0]);
    [
        hz.matmul(&a).matmul(&b).matmul(&cc),
        a.matmul(&hy).matmul(&b).matmul(&cc),
        a.matmul(&b).matmul(&hz).matmul(&cc),
    ]
}

fn magic() -> Mat {
    let s = FRAC_1_SQRT_2;
    Mat::from_vec(
        4,
        4,
        vec![
            c(s, 0.0),
            c(0.0, s),
            ZERO,
            ZERO,
            ZERO,
            ZERO,
            c(0.0, s),
            c(s, 0.0),
            ZERO,
            ZERO,
            c(0.0, s),
            c(-s, 0.0),
            c(s, 0.0),
            c(0.0, -s),
            ZERO,
            ZERO,
        ],
    )
}

/// Real special-orthogonal 4×4 matrix `M† (A ⊗ B) M` from six angles.
pub fn so4_unitary(params: &[f64; 6]) -> Mat {
    let m = magic();
    let ab = su2(&params[0..3]).kron(&su2(&params[3..6]));
    let mut o = m.adjoint().matmul(&ab).matmul(&m);
    // exact zeros for the imaginary round-off
    o.data.iter_mut().for_each(|z| z.im = 0.0);
    o
}

fn cnot() -> Mat {
    Mat::from_real(4, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0])
}

pub fn gate_matrix(kind: GateKind, p: &[f64]) -> Mat {
    match kind {
        GateKind::Su2 => su2(p),
        GateKind::CnotRy => ry(p[0]).kron(&ry(p[1])).matmul(&cnot()),
        GateKind::So4 => so4_unitary(&[p[0], p[1], p[2], p[3], p[4], p[5]]),
    }
}

fn gate_derivs(kind: GateKind, p: &[f64]) -> Vec<Mat> {
    match kind {
        GateKind::Su2 => su2_derivs(p).to_vec(),
        GateKind::CnotRy => {
            let hy = Mat::from_real(2, 2, &[0.0, -0.5, 0.5, 0.0]);
            let (a, b) = (ry(p[0]), ry(p[1]));
            let cx = cnot();
            vec![hy.matmul(&a).kron(&b).matmul(&cx), a.kron(&hy.matmul(&b)).matmul(&cx)]
        }
        GateKind::So4 => {
            let m = magic();
            let md = m.adjoint();
            let (a, b) = (su2(&p[0..3]), su2(&p[3..6]));
            let da = su2_derivs(&p[0..3]);
            let db = su2_derivs(&p[3..6]);
            da.iter()
                .map(|x| x.kron(&b))
                .chain(db.iter().map(|x| a.kron(x)))
                .map(|x| {
                    let mut o = md.matmul(&x).matmul(&m);
                    o.data.iter_mut().for_each(|z| z.im = 0.0);
                    o
                })
                .collect()
        }
    }
}

/// Applies a 1- or 2-qubit gate in place to the columns of an `n × k`
/// row-major block.
fn apply_gate(block: &mut [C64], nq: usize, k: usize, g: &Mat, qubits: &[usize]) {
    match qubits {
        [q] => {
            let bit = 1usize << (nq - 1 - q);
            let (g00, g01, g10, g11) = (g.get(0, 0), g.get(0, 1), g.get(1, 0), g.get(1, 1));
            for r0 in 0..(1usize << nq) {
                if r0 & bit != 0 {
                    continue;
                }
                let r1 = r0 | bit;
                for col in 0..k {
                    let (x0, x1) = (block[r0 * k + col], block[r1 * k + col]);
                    block[r0 * k + col] = g00 * x0 + g01 * x1;
                    block[r1 * k + col] = g10 * x0 + g11 * x1;
                }
            }
        }
        [q1, q2] => {
            let b1 = 1usize << (nq - 1 - q1);
            let b2 = 1usize << (nq - 1 - q2);
            for base in 0..(1usize << nq) {
                if base & (b1 | b2) != 0 {
                    continue;
                }
                let rows = [base, base | b2, base | b1, base | b1 | b2];
                for col in 0..k {
                    let x = [
                        block[rows[0] * k + col],
                        block[rows[1] * k + col],
                        block[rows[2] * k + col],
                        block[rows[3] * k + col],
                    ];
                    for (i, &r) in rows.iter().enumerate() {
                        let gi = &g.data[i * 4..i * 4 + 4];
                        block[r * k + col] = gi[0] * x[0] + gi[1] * x[1] + gi[2] * x[2] + gi[3] * x[3];
                    }
                }
            }
        }
        _ => panic!("gates act on one or two qubits"),
    }
}

/// `M_ij = Σ conj(Λ[(i,rest),col]) X[(j,rest),col]` over the gate qubits.
fn reduce(lam: &[C64], x: &[C64], nq: usize, k: usize, qubits: &[usize]) -> Mat {
    match qubits {
        [q] => {
            let bit = 1usize << (nq - 1 - q);
            let mut m = Mat::zeros(2, 2);
            for r0 in 0..(1usize << nq) {
                if r0 & bit != 0 {
                    continue;
                }
                let rows = [r0, r0 | bit];
                for col in 0..k {
                    for i in 0..2 {
                        let l = lam[rows[i] * k + col].conj();
                        for j in 0..2 {
                            m.data[i * 2 + j] += l * x[rows[j] * k + col];
                        }
                    }
                }
            }
            m
        }
        [q1, q2] => {
            let b1 = 1usize << (nq - 1 - q1);
            let b2 = 1usize << (nq - 1 - q2);
            let mut m = Mat::zeros(4, 4);
            for base in 0..(1usize << nq) {
                if base & (b1 | b2) != 0 {
                    continue;
                }
                let rows = [base, base | b2, base | b1, base | b1 | b2];
                for col in 0..k {
                    for i in 0..4 {
                        let l = lam[rows[i] * k + col].conj();
                        if l == ZERO {
                            continue;
                        }
                        for j in 0..4 {
                            m.data[i * 4 + j] += l * x[rows[j] * k + col];
                        }
                    }
                }
            }
            m
        }
        _ => unreachable!(),
    }
}

/// Circuit layout plus cached target data for cost/gradient evaluation.
struct Problem<'a> {
    nq: usize,
    k: usize,
    layout: &'a [(GateKind, Vec<usize>)],
    target: &'a [C64],
    mask: &'a [bool],
    target_norm: f64,
}

impl Problem<'_> {
    fn n_params(&self) -> usize {
        self.layout.iter().map(|(k, _)| k.n_params()).sum()
    }

    fn unitary_block(&self, params: &[f64]) -> Vec<C64> {
        let n = 1usize << self.nq;
        let mut x = vec![ZERO; n * self.k];
        for col in 0..self.k {
            x[col * self.k + col] = ONE;
        }
        let mut off = 0;
        for (kind, qs) in self.layout {
            let np = kind.n_params();
            apply_gate(&mut x, self.nq, self.k, &gate_matrix(*kind, &params[off..off + np]), qs);
            off += np;
        }
        x
    }

    fn cost_of_block(&self, u: &[C64]) -> (f64, C64) {
        let mut su = 0.0;
        let mut z = ZERO;
        for ((uv, tv), &m) in u.iter().zip(self.target).zip(self.mask) {
            if m {
                su += uv.norm_sqr();
                z += tv.conj() * uv;
            }
        }
        ((su + self.target_norm - 2.0 * z.norm()).max(0.0), z)
    }

    fn cost(&self, params: &[f64]) -> f64 {
        self.cost_of_block(&self.unitary_block(params)).0
    }

    fn cost_grad(&self, params: &[f64], grad: &mut [f64]) -> f64 {
        let n = 1usize << self.nq;
        let mut xs: Vec<Vec<C64>> = Vec::with_capacity(self.layout.len() + 1);
        let mut x = vec![ZERO; n * self.k];
        for col in 0..self.k {
            x[col * self.k + col] = ONE;
        }
        let mut mats = Vec::with_capacity(self.layout.len());
        let mut off = 0;
        for (kind, qs) in self.layout {
            let np = kind.n_params();
            let g = gate_matrix(*kind, &params[off..off + np]);
            xs.push(x.clone());
            apply_gate(&mut x, self.nq, self.k, &g, qs);
            mats.push(g);
            off += np;
        }
        let (cost, z) = self.cost_of_block(&x);
        let ph = if z.norm() > 0.0 { z / z.norm() } else { ONE };
        let mut lam: Vec<C64> = x
            .iter()
            .zip(self.target)
            .zip(self.mask)
            .map(|((u, t), &m)| if m { u - ph * t } else { ZERO })
            .collect();
        let mut off = self.n_params();
        for (gi, (kind, qs)) in self.layout.iter().enumerate().rev() {
            let np = kind.n_params();
            off -= np;
            let m = reduce(&lam, &xs[gi], self.nq, self.k, qs);
            for (pi, dg) in gate_derivs(*kind, &params[off..off + np]).iter().enumerate() {
                let s: C64 = dg.data.iter().zip(&m.data).map(|(a, b)| a * b).sum();
                grad[off + pi] = 2.0 * s.re;
            }
            apply_gate(&mut lam, self.nq, self.k, &mats[gi].adjoint(), qs);
        }
        cost
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Nelder–Mead simplex.
    Simplex,
    /// L-BFGS with analytic gradients.
    Lbfgs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompilerConfig {
    pub eps_c: f64,
    pub delta: f64,
    pub beam_width: usize,
    /// Maximum number of entangling gates.
    pub max_gates: usize,
    pub optimizer: Optimizer,
    /// Random restarts per candidate in addition to the warm start.
    pub restarts: usize,
    pub seed: u64,
    /// Optimizer iteration cap for beam members.
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    /// Iteration cap when ranking the children of a beam round.
    #[serde(default = "default_screen_iters")]
    pub screen_iters: usize,
    #[serde(default = "default_kinds")]
    pub gate_kinds: Vec<GateKind>,
}

fn default_iters() -> usize {
    400
}
fn default_screen_iters() -> usize {
    20
}
fn default_kinds() -> Vec<GateKind> {
    vec![GateKind::CnotRy, GateKind::So4]
}

impl Default for CompilerConfig {
    fn default() -> Self {
        CompilerConfig {
            eps_c: 5e-4,
            delta: 1e-10,
            beam_width: 4,
            max_gates: 40,
            optimizer: Optimizer::Lbfgs,
            restarts: 0,
            seed: 0,
            max_iters: default_iters(),
            screen_iters: default_screen_iters(),
            gate_kinds: default_kinds(),
        }
    }
}

impl CompilerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_c > 0.0) {
            return Err(Error::Config("eps_C must be positive".into()));
        }
        if self.beam_width < 1 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if self.gate_kinds.contains(&GateKind::Su2) || self.gate_kinds.is_empty() {
            return Err(Error::Config("gate_kinds must list entangling gates only".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSequence {
    pub n_qubits: usize,
    pub gates: Vec<Gate>,
    pub achieved_cost: f64,
    pub cnot_count: usize,
    /// False when the gate budget ran out before reaching ε_C.
    pub converged: bool,
    /// Best cost after each beam round.
    pub round_costs: Vec<f64>,
}

impl GateSequence {
    /// Dense unitary of the sequence.
    pub fn unitary(&self) -> Mat {
        let n = 1usize << self.n_qubits;
        let mut x = Mat::identity(n).data;
        for g in &self.gates {
            apply_gate(&mut x, self.n_qubits, n, &g.matrix(), &g.qubits);
        }
        Mat::from_vec(n, n, x)
    }

    pub fn entangling_count(&self) -> usize {
        self.gates.iter().filter(|g| g.kind != GateKind::Su2).count()
    }

    pub fn to_circuit_json(&self) -> CircuitJson {
        CircuitJson {
            n_qubits: self.n_qubits,
            ops: self
                .gates
                .iter()
                .map(|g| CircuitOp {
                    name: g.kind.name().to_string(),
                    qubits: g.qubits.clone(),
                    params: g.params.clone(),
                })
                .collect(),
        }
    }

    /// One gate per line: `name q.. : params..`.
    pub fn to_text(&self) -> String {
        let mut s = format!("# qubits {} cost {:.3e} cnots {}\n", self.n_qubits, self.achieved_cost, self.cnot_count);
        for g in &self.gates {
            let qs: Vec<String> = g.qubits.iter().map(|q| format!("q{q}")).collect();
            let ps: Vec<String> = g.params.iter().map(|p| format!("{p:.12}")).collect();
            s.push_str(&format!("{} {} : {}\n", g.kind.name(), qs.join(" "), ps.join(" ")));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitOp {
    pub name: String,
    pub qubits: Vec<usize>,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircuitJson {
    pub n_qubits: usize,
    pub ops: Vec<CircuitOp>,
}

struct Candidate {
    layout: Vec<(GateKind, Vec<usize>)>,
    params: Vec<f64>,
    cost: f64,
    key: Vec<(GateKind, Vec<usize>)>,
}

/// Greedy beam-search compilation of an isometry.
pub fn compile(target: &Isometry, cfg: &CompilerConfig) -> Result<GateSequence> {
    cfg.validate()?;
    let n = target.dim();
    if !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    let nq = target.n_qubits;
    let k = target.matrix.cols;
    let mask: Vec<bool> = target.matrix.data.iter().map(|z| z.norm() > cfg.delta).collect();
    let target_norm: f64 = target.matrix.data.iter().zip(&mask).filter(|(_, &m)| m).map(|(z, _)| z.norm_sqr()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((target.site as u64) << 32) ^ matches!(target.side, Side::Right) as u64);

    let base: Vec<(GateKind, Vec<usize>)> = (0..nq).map(|q| (GateKind::Su2, vec![q])).collect();
    let mut moves: Vec<(GateKind, Vec<usize>)> = Vec::new();
    for &kind in &cfg.gate_kinds {
        for a in 0..nq {
            for b in 0..nq {
                let ok = match kind {
                    GateKind::So4 => a < b,
                    _ => a != b,
                };
                if ok {
                    moves.push((kind, vec![a, b]));
                }
            }
        }
    }
    moves.sort();

    let optimize = |layout: &[(GateKind, Vec<usize>)], warm: Option<Vec<f64>>, iters: usize, n_random: usize, rng: &mut ChaCha8Rng| -> (Vec<f64>, f64) {
        let prob = Problem {
            nq,
            k,
            layout,
            target: &target.matrix.data,
            mask: &mask,
            target_norm,
        };
        let np = prob.n_params();
        let mut starts: Vec<Vec<f64>> = Vec::new();
        if let Some(w) = warm {
            starts.push(w);
        }
        let n_random = if starts.is_empty() { n_random.max(1) } else { n_random };
        for _ in 0..n_random {
            starts.push((0..np).map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)).collect());
        }
        let stop = if iters == usize::MAX { 0.0 } else { cfg.eps_c * 0.05 };
        let iters = iters.min(cfg.max_iters.max(cfg.screen_iters) * 4);
        let mut best = (Vec::new(), f64::INFINITY);
        for x0 in starts {
            let (x, f) = match cfg.optimizer {
                Optimizer::Lbfgs => lbfgs(|x, g| prob.cost_grad(x, g), x0, iters, stop),
                Optimizer::Simplex => nelder_mead(|x| prob.cost(x), x0, iters * np.max(1), stop),
            };
            if f < best.1 {
                best = (x, f);
            }
            if best.1 < stop {
                break;
            }
        }
        best
    };

    let (p0, c0) = optimize(&base, None, cfg.max_iters, cfg.restarts, &mut rng);
    let mut beam = vec![Candidate {
        layout: base.clone(),
        params: p0,
        cost: c0,
        key: vec![],
    }];
    let mut round_costs = vec![c0];
    let finish = |cand: &Candidate, round_costs: Vec<f64>, converged: bool, rng: &mut ChaCha8Rng| -> GateSequence {
        // run the accepted layout to convergence
        let (mut params, cost) = optimize(&cand.layout, Some(cand.params.clone()), usize::MAX, 0, rng);
        let cost = if cost < cand.cost {
            cost
        } else {
            params = cand.params.clone();
            cand.cost
        };
        let cand = Candidate {
            layout: cand.layout.clone(),
            params,
            cost,
            key: vec![],
        };
        let mut gates = Vec::new();
        let mut off = 0;
        for (kind, qs) in &cand.layout {
            let np = kind.n_params();
            gates.push(Gate {
                kind: *kind,
                qubits: qs.clone(),
                params: cand.params[off..off + np].to_vec(),
            });
            off += np;
        }
        let cnot_count = gates.iter().map(|g| g.kind.cnot_cost()).sum();
        let seq = GateSequence {
            n_qubits: nq,
            gates,
            achieved_cost: cand.cost,
            cnot_count,
            converged,
            round_costs,
        };
        GateSequence {
            achieved_cost: compilation_cost(&seq.unitary(), target, cfg.delta),
            ..seq
        }
    };
    if c0 < cfg.eps_c {
        return Ok(finish(&beam[0], round_costs, true, &mut rng));
    }
    for depth in 1..=cfg.max_gates {
        let mut children: Vec<Candidate> = Vec::new();
        for parent in &beam {
            for mv in &moves {
                let mut layout = parent.layout.clone();
                layout.push(mv.clone());
                let mut warm = parent.params.clone();
                warm.extend(std::iter::repeat_n(0.0, mv.0.n_params()));
                let (params, cost) = optimize(&layout, Some(warm), cfg.screen_iters, 0, &mut rng);
                let mut key = parent.key.clone();
                key.push(mv.clone());
                children.push(Candidate { layout, params, cost, key });
            }
        }
        children.sort_by(|a, b| a.cost.total_cmp(&b.cost).then_with(|| a.key.cmp(&b.key)));
        children.truncate(cfg.beam_width);
        for ch in children.iter_mut() {
            if ch.cost >= cfg.eps_c {
                let (params, cost) = optimize(&ch.layout, Some(ch.params.clone()), cfg.max_iters, cfg.restarts, &mut rng);
                if cost < ch.cost {
                    ch.params = params;
                    ch.cost = cost;
                }
            }
        }
        children.sort_by(|a, b| a.cost.total_cmp(&b.cost).then_with(|| a.key.cmp(&b.key)));
        round_costs.push(children[0].cost);
        log::debug!(
            "compile site {} {:?}: depth {depth} best cost {:.3e}",
            target.site,
            target.side,
            children[0].cost
        );
        if children[0].cost < cfg.eps_c {
            return Ok(finish(&children[0], round_costs, true, &mut rng));
        }
        beam = children;
    }
    Ok(finish(&beam[0], round_costs, false, &mut rng))
}

/// Limited-memory BFGS with backtracking Armijo line search. Returns the best
/// point and value; stops early once the value drops below `stop`.
pub fn lbfgs<F>(mut fg: F, x0: Vec<f64>, max_iter: usize, stop: f64) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    const MEM: usize = 12;
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut f = fg(&x, &mut g);
    if n == 0 {
        return (x, f);
    }
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut xn = vec![0.0; n];
    let mut gn = vec![0.0; n];
    let mut stall = 0;
    for _ in 0..max_iter {
        if f < stop {
            break;
        }
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < 1e-12 {
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let m = s_hist.len();
        let mut alpha = vec![0.0; m];
        for i in (0..m).rev() {
            let rho = 1.0 / dotf(&y_hist[i], &s_hist[i]);
            alpha[i] = rho * dotf(&s_hist[i], &q);
            axpyf(-alpha[i], &y_hist[i], &mut q);
        }
        let gamma = if m > 0 {
            dotf(&s_hist[m - 1], &y_hist[m - 1]) / dotf(&y_hist[m - 1], &y_hist[m - 1])
        } else {
            1.0 / gnorm.max(1.0)
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for i in 0..m {
            let rho = 1.0 / dotf(&y_hist[i], &s_hist[i]);
            let beta = rho * dotf(&y_hist[i], &q);
            axpyf(alpha[i] - beta, &s_hist[i], &mut q);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dotf(&g, &dir);
        if slope >= 0.0 {
            // not a descent direction; reset to steepest descent
            s_hist.clear();
            y_hist.clear();
            dir = g.iter().map(|v| -v / gnorm.max(1.0)).collect();
            slope = dotf(&g, &dir);
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            for i in 0..n {
                xn[i] = x[i] + step * dir[i];
            }
            let fnew = fg(&xn, &mut gn);
            if fnew <= f + 1e-4 * step * slope {
                let s: Vec<f64> = (0..n).map(|i| xn[i] - x[i]).collect();
                let y: Vec<f64> = (0..n).map(|i| gn[i] - g[i]).collect();
                if dotf(&s, &y) > 1e-16 {
                    if s_hist.len() == MEM {
                        s_hist.remove(0);
                        y_hist.remove(0);
                    }
                    s_hist.push(s);
                    y_hist.push(y);
                }
                stall = if f - fnew < 1e-14 * f.abs().max(1e-300) { stall + 1 } else { 0 };
                std::mem::swap(&mut x, &mut xn);
                std::mem::swap(&mut g, &mut gn);
                f = fnew;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || stall > 5 {
            break;
        }
    }
    (x, f)
}

fn dotf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpyf(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Nelder–Mead simplex minimization.
pub fn nelder_mead<F>(mut f: F, x0: Vec<f64>, max_evals: usize, stop: f64) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    if n == 0 {
        let v = f(&x0);
        return (x0, v);
    }
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = f(&x0);
    simplex.push((x0.clone(), v0));
    for i in 0..n {
        let mut x = x0.clone();
        x[i] += 0.5;
        let v = f(&x);
        simplex.push((x, v));
    }
    let mut evals = n + 1;
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[0].1 < stop || (simplex[n].1 - simplex[0].1).abs() < 1e-15 {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|i| simplex[..n].iter().map(|p| p.0[i]).sum::<f64>() / n as f64).collect();
        let worst = simplex[n].clone();
        let point = |t: f64| -> Vec<f64> { (0..n).map(|i| centroid[i] + t * (worst.0[i] - centroid[i])).collect() };
        let xr = point(-1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < simplex[0].1 {
            let xe = point(-2.0);
            let fe = f(&xe);
            evals += 1;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let xc = if fr < worst.1 { point(-0.5) } else { point(0.5) };
            let fc = f(&xc);
            evals += 1;
            if fc < worst.1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for p in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = (0..n).map(|i| best[i] + 0.5 * (p.0[i] - best[i])).collect();
                    let v = f(&x);
                    *p = (x, v);
                }
                evals += n;
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}
