//! Measurement protocols on sequentially prepared states: static observables,
//! overlaps, and dipole transition matrix elements via the W_k (Fourier) and
//! generalized SWAP-test circuits.
//!
//! Registers are little-endian lists of global qubits. A site unitary with
//! local index `phys · χ + bond` receives its qubits most significant first,
//! so the physical register's top qubit carries the first Pauli factor.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compiler::{compile, CompilerConfig, GateSequence, Isometry, Side};
use crate::linalg::{c, Mat, C64, ONE, ZERO};
use crate::model::{pauli_string_matrix, spin_matrix, Axis, ModelParams, Pauli, Spin};
use crate::mps::{mpo_matrix_element, CanonicalForm, Mpo, MpsState, Tensor3};
use crate::sim::{self, basis_rotation, Backend, Estimate, Estimator, FactorKind, GateProgram, Role, ShotTable};
use crate::spectral::{Transition, TransitionSet};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Exact,
    Compiled,
}

/// Preparation-direction unitary of one site: `U_L` on the left side and
/// `U_R†` on the right side.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteUnitary {
    pub matrix: Mat,
    pub sequence: Option<GateSequence>,
}

impl SiteUnitary {
    pub fn cost(&self) -> f64 {
        self.sequence.as_ref().map_or(0.0, |s| s.achieved_cost)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedState {
    pub id: String,
    pub l: usize,
    pub d: usize,
    /// Padded bond dimension.
    pub chi: usize,
    pub kind: EmbeddingKind,
    /// All tensors real.
    pub real: bool,
    pub left: Vec<SiteUnitary>,
    pub right: Vec<SiteUnitary>,
}

impl PreparedState {
    /// Embeds `mps` on the requested sides. `compiler = None` keeps the exact
    /// completed unitaries.
    pub fn new(id: impl Into<String>, mps: &MpsState, chi_pad: Option<usize>, sides: &[Side], compiler: Option<&CompilerConfig>) -> Result<PreparedState> {
        let id = id.into();
        let chi = chi_pad.unwrap_or_else(|| mps.max_bond().next_power_of_two());
        if !chi.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(chi));
        }
        if !mps.d.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(mps.d));
        }
        let real = mps.tensors.iter().all(|t| t.data.iter().all(|z| z.im.abs() < 1e-14));
        let mut st = PreparedState {
            id,
            l: mps.len(),
            d: mps.d,
            chi,
            kind: if compiler.is_some() { EmbeddingKind::Compiled } else { EmbeddingKind::Exact },
            real,
            left: Vec::new(),
            right: Vec::new(),
        };
        for &side in sides {
            let form = match side {
                Side::Left => CanonicalForm::Left,
                Side::Right => CanonicalForm::Right,
            };
            let canon = mps.canonicalize(form)?;
            let mut units = Vec::with_capacity(st.l);
            for (j, t) in canon.tensors.iter().enumerate() {
                let iso = Isometry::from_tensor(t, j, side, chi)?;
                let unit = match compiler {
                    None => SiteUnitary {
                        matrix: iso.matrix.complete_to_unitary(),
                        sequence: None,
                    },
                    Some(cfg) => {
                        let seq = compile(&iso, cfg)?;
                        log::info!(
                            "{} {:?} site {j}: {} entanglers, cost {:.2e}",
                            st.id,
                            side,
                            seq.entangling_count(),
                            seq.achieved_cost
                        );
                        SiteUnitary {
                            matrix: seq.unitary(),
                            sequence: Some(seq),
                        }
                    }
                };
                units.push(unit);
            }
            match side {
                Side::Left => st.left = units,
                Side::Right => st.right = units,
            }
        }
        Ok(st)
    }

    pub fn n_phys_qubits(&self) -> usize {
        self.d.trailing_zeros() as usize
    }

    pub fn n_bond_qubits(&self) -> usize {
        self.chi.trailing_zeros() as usize
    }

    pub fn embeddings(&self, side: Side) -> Result<&[SiteUnitary]> {
        let v = match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        };
        if v.len() != self.l {
            return Err(Error::Missing(format!("{:?} embeddings of state {}", side, self.id)));
        }
        Ok(v)
    }

    pub fn max_cost(&self, side: Side) -> Result<f64> {
        Ok(self.embeddings(side)?.iter().map(SiteUnitary::cost).fold(0.0, f64::max))
    }

    /// `(entangling gates, CNOT equivalents)` summed over sites.
    pub fn gate_counts(&self, side: Side) -> Result<(usize, usize)> {
        Ok(self
            .embeddings(side)?
            .iter()
            .filter_map(|u| u.sequence.as_ref())
            .fold((0, 0), |acc, s| (acc.0 + s.entangling_count(), acc.1 + s.cnot_count)))
    }

    /// Unnormalized MPS actually produced by the circuit unitaries, with the
    /// final bond post-selected on zero. Its squared norm is the acceptance
    /// probability.
    pub fn realized(&self, side: Side) -> Result<MpsState> {
        let units = self.embeddings(side)?;
        let (l, d, chi) = (self.l, self.d, self.chi);
        let tensors = units
            .iter()
            .enumerate()
            .map(|(j, u)| {
                let dl = if j == 0 { 1 } else { chi };
                let dr = if j == l - 1 { 1 } else { chi };
                let mut t = Tensor3::zeros(dl, d, dr);
                for a in 0..dl {
                    for s in 0..d {
                        for b in 0..dr {
                            let v = match side {
                                Side::Left => u.matrix.get(s * chi + a, b),
                                Side::Right => u.matrix.get(s * chi + b, a),
                            };
                            t.set(a, s, b, v);
                        }
                    }
                }
                t
            })
            .collect();
        MpsState::new(tensors, CanonicalForm::None)
    }
}

/// Qubit allocator for protocol programs.
struct Layout {
    roles: Vec<Role>,
}

impl Layout {
    fn new() -> Self {
        Layout { roles: Vec::new() }
    }

    fn alloc(&mut self, role: Role, n: usize) -> Vec<usize> {
        let start = self.roles.len();
        self.roles.extend(std::iter::repeat_n(role, n));
        (start..start + n).collect()
    }
}

fn msb_first(regs: &[&[usize]]) -> Vec<usize> {
    regs.iter().flat_map(|r| r.iter().rev().copied()).collect()
}

/// Appends a site unitary (or its adjoint) acting on `qubits` (MSB first).
fn push_site(p: &mut GateProgram, u: &SiteUnitary, qubits: &[usize], adjoint: bool, label: &str) {
    match &u.sequence {
        None => p.unitary(if adjoint { u.matrix.adjoint() } else { u.matrix.clone() }, qubits.to_vec(), label),
        Some(seq) => {
            let gates: Box<dyn Iterator<Item = _>> = if adjoint {
                Box::new(seq.gates.iter().rev())
            } else {
                Box::new(seq.gates.iter())
            };
            for g in gates {
                let m = g.matrix();
                p.unitary(
                    if adjoint { m.adjoint() } else { m },
                    g.qubits.iter().map(|&q| qubits[q]).collect(),
                    format!("{label}/{}", g.kind.name()),
                );
            }
        }
    }
}

fn postselect_register(p: &mut GateProgram, reg: &[usize], name: &str) {
    for (t, &q) in reg.iter().enumerate() {
        p.postselect(q, 0, format!("{name}{t}"));
    }
}

/// Measurement basis per site and per Pauli factor.
pub type BasisPlan = Vec<Vec<Axis>>;

pub fn uniform_plan(l: usize, n_factors: usize, axis: Axis) -> BasisPlan {
    vec![vec![axis; n_factors]; l]
}

/// Even sites use `even`, odd sites use `odd` on every factor.
pub fn alternating_plan(l: usize, n_factors: usize, even: Axis, odd: Axis) -> BasisPlan {
    (0..l).map(|j| vec![if j % 2 == 0 { even } else { odd }; n_factors]).collect()
}

/// Record key of factor `t` at site `j` in preparation programs.
pub fn site_key(j: usize, t: usize) -> String {
    format!("s{j}f{t}")
}

/// Left-canonical sequential preparation with per-site measurement in the
/// planned bases, reset, and final bond post-selection.
pub fn sequential_prep_program(s: &PreparedState, plan: &BasisPlan) -> Result<GateProgram> {
    let units = s.embeddings(Side::Left)?;
    let nf = s.n_phys_qubits();
    if plan.len() != s.l || plan.iter().any(|p| p.len() != nf) {
        return Err(Error::ShapeMismatch(format!("basis plan must be {}x{nf}", s.l)));
    }
    let mut lay = Layout::new();
    let phys = lay.alloc(Role::Physical, nf);
    let bond = lay.alloc(Role::Bond, s.n_bond_qubits());
    let mut p = GateProgram::new(lay.roles);
    let qubits = msb_first(&[&phys, &bond]);
    for j in (0..s.l).rev() {
        push_site(&mut p, &units[j], &qubits, false, &format!("{}/L{j}", s.id));
        for t in 0..nf {
            let q = phys[nf - 1 - t];
            p.measure(q, plan[j][t], site_key(j, t));
            p.reset(q);
        }
    }
    postselect_register(&mut p, &bond, "bond");
    Ok(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanTable {
    pub plan: BasisPlan,
    pub table: ShotTable,
}

pub fn run_plan(s: &PreparedState, plan: &BasisPlan, n_shots: usize, seed: u64, backend: Backend) -> Result<PlanTable> {
    let p = sequential_prep_program(s, plan)?;
    Ok(PlanTable {
        plan: plan.clone(),
        table: sim::run_shots_with(&p, n_shots, seed, backend)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PauliTerm {
    pub coeff: C64,
    pub paulis: Vec<Pauli>,
}

/// Operator as a linear combination of Pauli strings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PauliDecomposition {
    pub terms: Vec<PauliTerm>,
}

impl PauliDecomposition {
    /// Trace projection `u_P = Tr(P O) / 2^n`; terms below 1e-14 are dropped.
    pub fn of(op: &Mat) -> Result<Self> {
        let d = op.rows;
        if !d.is_power_of_two() || op.cols != d {
            return Err(Error::NotPowerOfTwo(d));
        }
        let n = d.trailing_zeros() as usize;
        let all = [Pauli::I, Pauli::X, Pauli::Y, Pauli::Z];
        let mut terms = Vec::new();
        for code in 0..(1usize << (2 * n)) {
            let paulis: Vec<Pauli> = (0..n).map(|t| all[(code >> (2 * (n - 1 - t))) & 3]).collect();
            let pm = pauli_string_matrix(&paulis);
            let coeff = pm.matmul(op).trace() / d as f64;
            if coeff.norm() > 1e-14 {
                terms.push(PauliTerm { coeff, paulis });
            }
        }
        Ok(PauliDecomposition { terms })
    }

    pub fn matrix(&self) -> Mat {
        let n = self.terms.first().map_or(0, |t| t.paulis.len());
        let mut m = Mat::zeros(1 << n, 1 << n);
        for t in &self.terms {
            m.add_assign_scaled(&pauli_string_matrix(&t.paulis), t.coeff);
        }
        m
    }
}

/// Pauli expansion of `S^α` for spin `s` in the two-qubit encoding
/// `|3/2, 1/2, −1/2, −3/2⟩ → |00⟩, |01⟩, |10⟩, |11⟩`.
pub fn pauli_decompose_spin(alpha: Axis, s: f64) -> Result<PauliDecomposition> {
    PauliDecomposition::of(&spin_matrix(Spin::from_f64(s)?, alpha))
}

struct EnergyTerm {
    coeff: f64,
    factors: Vec<(usize, Vec<Pauli>)>,
}

/// Hamiltonian as real-weighted Pauli products. With `y_as_x` the `S^y S^y`
/// bond terms are replaced by `S^x S^x`, which is exact for states with
/// definite total `S^z`.
fn energy_terms(p: &ModelParams, y_as_x: bool) -> Result<(f64, Vec<EnergyTerm>)> {
    let s = p.spin.value();
    let decomp = |a: Axis| pauli_decompose_spin(a, s);
    let mut constant = 0.0;
    let mut terms = Vec::new();
    let mut push = |coeff: C64, factors: Vec<(usize, Vec<Pauli>)>, constant: &mut f64| {
        debug_assert!(coeff.im.abs() < 1e-12);
        let live: Vec<_> = factors.into_iter().filter(|(_, ps)| ps.iter().any(|&q| q != Pauli::I)).collect();
        if live.is_empty() {
            *constant += coeff.re;
        } else {
            terms.push(EnergyTerm {
                coeff: coeff.re,
                factors: live,
            });
        }
    };
    for (i, j) in p.bonds() {
        for a in Axis::ALL {
            let src = if y_as_x && a == Axis::Y { Axis::X } else { a };
            let da = decomp(src)?;
            for t1 in &da.terms {
                for t2 in &da.terms {
                    push(t1.coeff * t2.coeff * p.j, vec![(i, t1.paulis.clone()), (j, t2.paulis.clone())], &mut constant);
                }
            }
        }
    }
    let onsite = PauliDecomposition::of(&p.onsite())?;
    for site in 0..p.l {
        for t in &onsite.terms {
            push(t.coeff, vec![(site, t.paulis.clone())], &mut constant);
        }
    }
    Ok((constant, terms))
}

fn measurable(plan: &BasisPlan, term: &EnergyTerm) -> bool {
    term.factors.iter().all(|(site, ps)| {
        ps.iter().enumerate().all(|(t, q)| match q.axis() {
            None => true,
            Some(a) => plan[*site][t] == a,
        })
    })
}

/// Energy from basis-plan tables. Each Pauli product is read from the first
/// table that measures it; tables are independent, so their standard errors
/// add in quadrature.
pub fn estimate_energy(tables: &[PlanTable], p: &ModelParams, y_as_x: bool) -> Result<Estimate> {
    let (constant, terms) = energy_terms(p, y_as_x)?;
    let mut per_table: Vec<Estimator> = vec![Estimator::default(); tables.len()];
    for term in &terms {
        let idx = tables.iter().position(|t| measurable(&t.plan, term)).ok_or_else(|| {
            let desc: Vec<String> = term
                .factors
                .iter()
                .map(|(s, ps)| format!("{s}:{}", ps.iter().map(|q| q.symbol()).collect::<String>()))
                .collect();
            Error::Missing(format!("no basis plan measures {}", desc.join(" ")))
        })?;
        let factors = term
            .factors
            .iter()
            .flat_map(|(site, ps)| {
                ps.iter()
                    .enumerate()
                    .filter(|(_, q)| **q != Pauli::I)
                    .map(|(t, _)| (site_key(*site, t), FactorKind::Sign))
                    .collect::<Vec<_>>()
            })
            .collect();
        per_table[idx].add_term(term.coeff, factors);
    }
    let mut mean = constant;
    let mut var = 0.0;
    let mut n = usize::MAX;
    for (t, est) in tables.iter().zip(&per_table) {
        if est.terms.is_empty() {
            continue;
        }
        let e = sim::estimate(&t.table, est)?;
        mean += e.mean;
        var += e.stderr * e.stderr;
        n = n.min(e.n);
    }
    Ok(Estimate {
        mean,
        stderr: var.sqrt(),
        n: if n == usize::MAX { 0 } else { n },
    })
}

pub fn estimate_energy_spin_half(x: &PlanTable, y: &PlanTable, z: &PlanTable, p: &ModelParams) -> Result<Estimate> {
    if p.spin != Spin::Half {
        return Err(Error::UnsupportedSpin(p.spin.value()));
    }
    estimate_energy(&[x.clone(), y.clone(), z.clone()], p, false)
}

/// Plans for the spin-3/2 estimator: XX, YY, XY, YX and a Z plan for the
/// `S^z` terms.
pub fn spin_three_half_plans(l: usize) -> Vec<(&'static str, BasisPlan)> {
    vec![
        ("XX", uniform_plan(l, 2, Axis::X)),
        ("YY", uniform_plan(l, 2, Axis::Y)),
        ("XY", alternating_plan(l, 2, Axis::X, Axis::Y)),
        ("YX", alternating_plan(l, 2, Axis::Y, Axis::X)),
        ("Z", uniform_plan(l, 2, Axis::Z)),
    ]
}

/// Spin-3/2 energy; `⟨S^y S^y⟩` is taken equal to `⟨S^x S^x⟩`, which needs
/// a field along z.
pub fn estimate_energy_spin_three_half(tables: &[PlanTable], p: &ModelParams) -> Result<Estimate> {
    if p.spin != Spin::ThreeHalves {
        return Err(Error::UnsupportedSpin(p.spin.value()));
    }
    if !p.conserves_sz() {
        return Err(Error::Config("spin-3/2 estimator needs B_x = B_y = 0".into()));
    }
    estimate_energy(tables, p, true)
}

/// Exact energy of the post-selected realized state (infinite-shot limit).
pub fn realized_energy(s: &PreparedState, p: &ModelParams) -> Result<f64> {
    let r = s.realized(Side::Left)?;
    let h = crate::mps::heisenberg_mpo(p)?;
    Ok(crate::mps::expectation_mpo(&r, &h)?.re / r.norm_sqr())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub value: f64,
    pub stderr: f64,
    pub acceptance_rate: f64,
    pub qubits_used: usize,
    pub unitaries: usize,
}

/// Prepares `a` with its left unitaries and un-prepares `b` with its right
/// unitaries site by site.
pub fn adjoint_overlap_program(a: &PreparedState, b: &PreparedState) -> Result<GateProgram> {
    if a.l != b.l || a.d != b.d {
        return Err(Error::ShapeMismatch("overlap needs matching L and d".into()));
    }
    let ua = a.embeddings(Side::Left)?;
    let ub = b.embeddings(Side::Right)?;
    let mut lay = Layout::new();
    let phys = lay.alloc(Role::Physical, a.n_phys_qubits());
    let bond_a = lay.alloc(Role::Bond, a.n_bond_qubits());
    let bond_b = lay.alloc(Role::Bond, b.n_bond_qubits());
    let mut p = GateProgram::new(lay.roles);
    let qa = msb_first(&[&phys, &bond_a]);
    let qb = msb_first(&[&phys, &bond_b]);
    for j in (0..a.l).rev() {
        push_site(&mut p, &ua[j], &qa, false, &format!("{}/L{j}", a.id));
        push_site(&mut p, &ub[j], &qb, true, &format!("{}/R{j}", b.id));
        for (t, &q) in phys.iter().enumerate() {
            p.postselect(q, 0, format!("p{j}_{t}"));
            p.reset(q);
        }
    }
    postselect_register(&mut p, &bond_a, "ba");
    postselect_register(&mut p, &bond_b, "bb");
    Ok(p)
}

/// `|⟨b|a⟩|²` as the fraction of all-zero shots.
pub fn adjoint_overlap(a: &PreparedState, b: &PreparedState, n_shots: usize, seed: u64, backend: Backend) -> Result<ProtocolResult> {
    let p = adjoint_overlap_program(a, b)?;
    let t = sim::run_shots_with(&p, n_shots, seed, backend)?;
    let (rate, err) = t.acceptance_rate();
    Ok(ProtocolResult {
        value: rate,
        stderr: err,
        acceptance_rate: rate,
        qubits_used: p.n_qubits,
        unitaries: p.unitary_count(),
    })
}

/// Analytic bond-2 MPS of `(1/√L) Σ_j e^{2πijk/L} |0…1_j…0⟩`.
pub fn wk_mps(l: usize, k: usize) -> Result<MpsState> {
    if l < 2 || k >= l {
        return Err(Error::Config(format!("W_k needs L >= 2 and 0 <= k < L (got L={l}, k={k})")));
    }
    let norm = 1.0 / (l as f64).sqrt();
    let tensors = (0..l)
        .map(|j| {
            let ph = C64::from_polar(norm, 2.0 * PI * (j * k) as f64 / l as f64);
            let dl = if j == 0 { 1 } else { 2 };
            let dr = if j == l - 1 { 1 } else { 2 };
            let mut t = Tensor3::zeros(dl, 2, dr);
            // bond index counts excitations placed on sites to the left
            let out = |b: usize| if j == l - 1 { 0 } else { b };
            t.set(0, 1, out(1), ph);
            if j < l - 1 {
                t.set(0, 0, 0, ONE);
            }
            if j > 0 {
                t.set(1, 0, out(1), ONE);
            }
            t
        })
        .collect();
    MpsState::new(tensors, CanonicalForm::None)
}

/// Exact left and right embeddings of `|W_k⟩` (one W-physical and one
/// W-bond qubit).
pub fn wk_embeddings(l: usize, k: usize) -> Result<PreparedState> {
    PreparedState::new(format!("W{k}"), &wk_mps(l, k)?, Some(2), &[Side::Left, Side::Right], None)
}

fn pauli_axis_matrix(a: Axis) -> Mat {
    Pauli::from_axis(a).matrix()
}

fn controlled(u: &Mat) -> Mat {
    let n = u.rows;
    let mut m = Mat::identity(2 * n);
    for i in 0..n {
        for j in 0..n {
            m.set(n + i, n + j, u.get(i, j));
        }
    }
    m
}

/// W_k circuit for `|⟨ψ_p|S̃^α_k|ψ_0⟩|²` (spin-1/2).
pub fn fourier_program(psi0: &PreparedState, psip: &PreparedState, alpha: Axis, k: usize) -> Result<GateProgram> {
    if psi0.d != 2 || psip.d != 2 {
        return Err(Error::UnsupportedSpin((psi0.d as f64 - 1.0) / 2.0));
    }
    if psi0.l != psip.l {
        return Err(Error::ShapeMismatch("states differ in length".into()));
    }
    let l = psi0.l;
    let wk = wk_embeddings(l, k)?;
    let w0 = wk_embeddings(l, 0)?;
    let u0 = psi0.embeddings(Side::Left)?;
    let up = psip.embeddings(Side::Right)?;
    let mut lay = Layout::new();
    let phys = lay.alloc(Role::Physical, 1);
    let b0 = lay.alloc(Role::Bond, psi0.n_bond_qubits());
    let bp = lay.alloc(Role::Bond, psip.n_bond_qubits());
    let wphys = lay.alloc(Role::WPhysical, 1);
    let wbk = lay.alloc(Role::WBond, 1);
    let wb0 = lay.alloc(Role::WBond, 1);
    let mut p = GateProgram::new(lay.roles);
    let cs = controlled(&pauli_axis_matrix(alpha));
    for j in (0..l).rev() {
        push_site(&mut p, &u0[j], &msb_first(&[&phys, &b0]), false, &format!("{}/L{j}", psi0.id));
        push_site(&mut p, &wk.left[j], &msb_first(&[&wphys, &wbk]), false, &format!("W{k}/L{j}"));
        p.unitary(cs.clone(), vec![wphys[0], phys[0]], format!("c-sigma{}", alpha.label()));
        push_site(&mut p, &w0.right[j], &msb_first(&[&wphys, &wb0]), true, &format!("W0/R{j}"));
        p.postselect(wphys[0], 0, format!("w{j}"));
        p.reset(wphys[0]);
        push_site(&mut p, &up[j], &msb_first(&[&phys, &bp]), true, &format!("{}/R{j}", psip.id));
        p.postselect(phys[0], 0, format!("p{j}"));
        p.reset(phys[0]);
    }
    postselect_register(&mut p, &b0, "b0_");
    postselect_register(&mut p, &bp, "bp_");
    postselect_register(&mut p, &wbk, "wk_");
    postselect_register(&mut p, &wb0, "w0_");
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierElement {
    pub k: usize,
    /// `|⟨ψ_p|S̃^α_k|ψ_0⟩|² / L`, the input expected by
    /// [`reconstruct_dipole_fft`].
    pub value: f64,
    pub stderr: f64,
    /// `|⟨ψ_p|S̃^α_k|ψ_0⟩|²`.
    pub squared_element: f64,
    pub acceptance_rate: f64,
    pub qubits_used: usize,
}

/// The all-zero probability is `(2/L)² |⟨ψ_p|S̃^α_k|ψ_0⟩|²`; the factor 2
/// from `σ = 2S` and the `1/L` from the two W registers are undone here.
pub fn fourier_element(
    psi0: &PreparedState,
    psip: &PreparedState,
    alpha: Axis,
    k: usize,
    n_shots: usize,
    seed: u64,
    backend: Backend,
) -> Result<FourierElement> {
    let p = fourier_program(psi0, psip, alpha, k)?;
    let t = sim::run_shots_with(&p, n_shots, seed, backend)?;
    let (rate, err) = t.acceptance_rate();
    let l = psi0.l as f64;
    let scale = l * l / 4.0;
    Ok(FourierElement {
        k,
        value: rate * scale / l,
        stderr: err * scale / l,
        squared_element: rate * scale,
        acceptance_rate: rate,
        qubits_used: p.n_qubits,
    })
}

/// `O^{αα}_{0,j;p} = (1/L) Σ_k e^{−2πijk/L} v_k`.
pub fn reconstruct_dipole_fft(elements: &BTreeMap<usize, C64>, l: usize, j: usize) -> Result<C64> {
    let mut acc = ZERO;
    for k in 0..l {
        let v = elements.get(&k).ok_or_else(|| Error::Missing(format!("Fourier element k={k}")))?;
        acc += v * C64::from_polar(1.0, -2.0 * PI * (j * k) as f64 / l as f64);
    }
    Ok(acc / l as f64)
}

/// `v_k = Σ_j e^{2πijk/L} O_{0,j}`, the inverse of [`reconstruct_dipole_fft`].
pub fn forward_dipole_fft(o: &[C64]) -> Vec<C64> {
    let l = o.len();
    (0..l)
        .map(|k| (0..l).map(|j| o[j] * C64::from_polar(1.0, 2.0 * PI * (j * k) as f64 / l as f64)).sum())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Re,
    Im,
}

/// Local unitary inserted at one site.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteOp {
    pub site: usize,
    pub matrix: Mat,
}

/// `R_x(−π/2)`.
fn rx_minus_half_pi() -> Mat {
    let s = FRAC_1_SQRT_2;
    Mat::from_vec(2, 2, vec![c(s, 0.0), c(0.0, s), c(0.0, s), c(s, 0.0)])
}

fn controlled_swap(d: usize) -> Mat {
    let n = d * d;
    let mut sw = Mat::zeros(n, n);
    for a in 0..d {
        for b in 0..d {
            sw.set(b * d + a, a * d + b, ONE);
        }
    }
    controlled(&sw)
}

/// Generalized SWAP test for `⟨ψ_0|G_2|ψ_p⟩⟨ψ_p|G_1|ψ_0⟩`: `G_1` acts on the
/// ψ_0 register and `G_2` on the ψ_p register, both controlled by the ancilla.
pub fn swap_test_program(psi0: &PreparedState, psip: &PreparedState, g1: &SiteOp, g2: &SiteOp, part: Part) -> Result<GateProgram> {
    if psi0.l != psip.l || psi0.d != psip.d {
        return Err(Error::ShapeMismatch("SWAP test needs matching L and d".into()));
    }
    for g in [g1, g2] {
        if g.site >= psi0.l {
            return Err(Error::IndexOutOfRange { index: g.site, dim: psi0.l });
        }
        if g.matrix.rows != psi0.d {
            return Err(Error::ShapeMismatch("G must act on one site".into()));
        }
    }
    let u0 = psi0.embeddings(Side::Left)?;
    let up = psip.embeddings(Side::Left)?;
    let nf = psi0.n_phys_qubits();
    let mut lay = Layout::new();
    let anc = lay.alloc(Role::Ancilla, 1);
    let pa = lay.alloc(Role::Physical, nf);
    let ba = lay.alloc(Role::Bond, psi0.n_bond_qubits());
    let pb = lay.alloc(Role::Physical, nf);
    let bb = lay.alloc(Role::Bond, psip.n_bond_qubits());
    let mut p = GateProgram::new(lay.roles);
    p.unitary(basis_rotation(Axis::X), anc.clone(), "h");
    let cswap = controlled_swap(psi0.d);
    for j in (0..psi0.l).rev() {
        push_site(&mut p, &u0[j], &msb_first(&[&pa, &ba]), false, &format!("{}/L{j}", psi0.id));
        push_site(&mut p, &up[j], &msb_first(&[&pb, &bb]), false, &format!("{}/L{j}", psip.id));
        if g1.site == j {
            p.unitary(controlled(&g1.matrix), msb_first(&[&anc, &pa]), "c-G1");
        }
        if g2.site == j {
            p.unitary(controlled(&g2.matrix), msb_first(&[&anc, &pb]), "c-G2");
        }
        p.unitary(cswap.clone(), msb_first(&[&anc, &pa, &pb]), "c-swap");
        for t in 0..nf {
            p.measure(pa[t], Axis::Z, format!("a{j}_{t}"));
            p.reset(pa[t]);
            p.measure(pb[t], Axis::Z, format!("b{j}_{t}"));
            p.reset(pb[t]);
        }
    }
    let v = match part {
        Part::Re => basis_rotation(Axis::X),
        Part::Im => rx_minus_half_pi(),
    };
    p.unitary(v, anc.clone(), "v");
    p.measure(anc[0], Axis::Z, "anc");
    postselect_register(&mut p, &ba, "ba");
    postselect_register(&mut p, &bb, "bb");
    Ok(p)
}

/// Exact `⟨ψ_0|G_2|ψ_p⟩⟨ψ_p|G_1|ψ_0⟩` of the normalized realized states and
/// the joint bond acceptance probability.
pub fn swap_exact(psi0: &PreparedState, psip: &PreparedState, g1: &SiteOp, g2: &SiteOp) -> Result<(C64, f64)> {
    let a = psi0.realized(Side::Left)?;
    let b = psip.realized(Side::Left)?;
    let (na, nb) = (a.norm_sqr(), b.norm_sqr());
    let o1 = Mpo::product(a.len(), a.d, &[(g1.site, g1.matrix.clone())]);
    let o2 = Mpo::product(a.len(), a.d, &[(g2.site, g2.matrix.clone())]);
    let m = mpo_matrix_element(&a, &o2, &b)? * mpo_matrix_element(&b, &o1, &a)?;
    Ok((m / (na * nb), na * nb))
}

/// Returns `2P₀ − 1` for Re, and its negative for Im (the `R_x(−π/2)`
/// readout gives `P₀ = (1 − Im M)/2`).
#[allow(clippy::too_many_arguments)]
pub fn swap_test_element(
    psi0: &PreparedState,
    psip: &PreparedState,
    g1: &SiteOp,
    g2: &SiteOp,
    part: Part,
    n_shots: usize,
    seed: u64,
    backend: Backend,
) -> Result<ProtocolResult> {
    let nq = 1 + 2 * psi0.n_phys_qubits() + psi0.n_bond_qubits() + psip.n_bond_qubits();
    let table = match backend {
        Backend::Statevector => {
            let p = swap_test_program(psi0, psip, g1, g2, part)?;
            sim::run_shots(&p, n_shots, seed)?
        }
        Backend::ExactSampled => {
            let (m, acc) = swap_exact(psi0, psip, g1, g2)?;
            let x = match part {
                Part::Re => m.re,
                Part::Im => -m.im,
            };
            let p0 = 0.5 * (1.0 + x);
            ShotTable::sampled(vec!["anc".into(), "bonds".into()], vec![(1, 0)], n_shots, seed, |rng| {
                let rejected = rng.random::<f64>() >= acc;
                let anc = rng.random::<f64>() >= p0;
                (anc as u64) | ((rejected as u64) << 1)
            })
        }
    };
    let e = sim::estimate(&table, &Estimator::sign_product(1.0, &["anc"]))?;
    let sign = if part == Part::Im { -1.0 } else { 1.0 };
    let (rate, _) = table.acceptance_rate();
    Ok(ProtocolResult {
        value: sign * e.mean,
        stderr: e.stderr,
        acceptance_rate: rate,
        qubits_used: nq,
        unitaries: 0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DipoleEstimate {
    pub value: C64,
    pub stderr_re: f64,
    pub stderr_im: f64,
    pub circuits_run: usize,
    pub circuits_skipped: usize,
}

fn y_count(ps: &[Pauli]) -> usize {
    ps.iter().filter(|&&q| q == Pauli::Y).count()
}

/// `O^{αβ}_{ij;p} = ⟨ψ_0|S^α_i|ψ_p⟩⟨ψ_p|S^β_j|ψ_0⟩` recombined from SWAP
/// tests over the Pauli expansions. For real states a term whose Pauli
/// strings carry an even (odd) total number of Y factors is purely real
/// (imaginary), and the vanishing part is not run.
#[allow(clippy::too_many_arguments)]
pub fn dipole_element_general(
    psi0: &PreparedState,
    psip: &PreparedState,
    i: usize,
    j: usize,
    alpha: Axis,
    beta: Axis,
    n_shots: usize,
    seed: u64,
    backend: Backend,
) -> Result<DipoleEstimate> {
    let s = Spin::from_dim(psi0.d)?.value();
    let da = pauli_decompose_spin(alpha, s)?;
    let db = pauli_decompose_spin(beta, s)?;
    let real = psi0.real && psip.real;
    let mut value = ZERO;
    let (mut var_re, mut var_im) = (0.0, 0.0);
    let (mut run, mut skipped) = (0, 0);
    for (m, ta) in da.terms.iter().enumerate() {
        for (n, tb) in db.terms.iter().enumerate() {
            let coeff = ta.coeff * tb.coeff;
            let g2 = SiteOp {
                site: i,
                matrix: pauli_string_matrix(&ta.paulis),
            };
            let g1 = SiteOp {
                site: j,
                matrix: pauli_string_matrix(&tb.paulis),
            };
            let odd = (y_count(&ta.paulis) + y_count(&tb.paulis)) % 2 == 1;
            let mut mval = ZERO;
            for (pi, part) in [Part::Re, Part::Im].into_iter().enumerate() {
                if real && (odd == (part == Part::Re)) {
                    skipped += 1;
                    continue;
                }
                let circuit_seed = seed ^ ((m as u64) << 40) ^ ((n as u64) << 24) ^ ((pi as u64) << 8);
                let r = swap_test_element(psi0, psip, &g1, &g2, part, n_shots, circuit_seed, backend)?;
                run += 1;
                match part {
                    Part::Re => mval.re = r.value,
                    Part::Im => mval.im = r.value,
                }
                // coeff·M: errors on Re M and Im M map through the complex coefficient
                let e2 = r.stderr * r.stderr;
                match part {
                    Part::Re => {
                        var_re += coeff.re * coeff.re * e2;
                        var_im += coeff.im * coeff.im * e2;
                    }
                    Part::Im => {
                        var_re += coeff.im * coeff.im * e2;
                        var_im += coeff.re * coeff.re * e2;
                    }
                }
            }
            value += coeff * mval;
        }
    }
    Ok(DipoleEstimate {
        value,
        stderr_re: var_re.sqrt(),
        stderr_im: var_im.sqrt(),
        circuits_run: run,
        circuits_skipped: skipped,
    })
}

/// Classical `⟨ψ_0|S^α_i|ψ_p⟩⟨ψ_p|S^β_j|ψ_0⟩` from the realized states.
pub fn dipole_element_exact(psi0: &PreparedState, psip: &PreparedState, i: usize, j: usize, alpha: Axis, beta: Axis) -> Result<C64> {
    let a = psi0.realized(Side::Left)?;
    let b = psip.realized(Side::Left)?;
    let spin = Spin::from_dim(a.d)?;
    let oa = Mpo::product(a.len(), a.d, &[(i, spin_matrix(spin, alpha))]);
    let ob = Mpo::product(a.len(), a.d, &[(j, spin_matrix(spin, beta))]);
    Ok(mpo_matrix_element(&a, &oa, &b)? * mpo_matrix_element(&b, &ob, &a)? / (a.norm_sqr() * b.norm_sqr()))
}

/// Transition table of SWAP-test estimates for every `i ≥ j` pair and channel,
/// with `Var(Re O)` per element in a parallel table. `excited[k]` is state
/// `p = k + 1` with its excitation energy.
pub fn swap_transitions(
    psi0: &PreparedState,
    excited: &[(&PreparedState, f64)],
    channels: &[(Axis, Axis)],
    n_shots: usize,
    seed: u64,
    backend: Backend,
) -> Result<(TransitionSet, TransitionSet)> {
    let l = psi0.l;
    let mut ts = TransitionSet::new(l);
    let mut vs = TransitionSet::new(l);
    let mut task = 0u64;
    for (k, (psip, de)) in excited.iter().enumerate() {
        let mut t = Transition::new(k + 1, de.max(0.0), l);
        let mut v = Transition::new(k + 1, de.max(0.0), l);
        for &(a, b) in channels {
            for i in 0..l {
                for j in 0..=i {
                    task += 1;
                    let s = seed.wrapping_add(task.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let r = dipole_element_general(psi0, psip, i, j, a, b, n_shots, s, backend)?;
                    t.set(i, j, a, b, r.value);
                    v.set(i, j, a, b, c(r.stderr_re * r.stderr_re, 0.0));
                }
            }
        }
        ts.push(t)?;
        vs.push(v)?;
    }
    Ok((ts, vs))
}

/// Protocol run description for JSON job files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum JobSpec {
    Overlap {
        left: String,
        right: String,
        n_shots: usize,
        seed: u64,
    },
    Fourier {
        psi0: String,
        psip: String,
        alpha: Axis,
        k: usize,
        n_shots: usize,
        seed: u64,
    },
    Swap {
        psi0: String,
        psip: String,
        i: usize,
        j: usize,
        alpha: Axis,
        beta: Axis,
        n_shots: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobOutput {
    pub value: f64,
    /// Imaginary part, for SWAP jobs.
    pub value_im: f64,
    pub stderr: f64,
    pub acceptance_rate: f64,
    pub qubits_used: usize,
    /// Entangling gates and CNOT equivalents of the compiled states involved.
    pub gate_counts: (usize, usize),
}

pub fn run_job(job: &JobSpec, states: &BTreeMap<String, PreparedState>, backend: Backend) -> Result<JobOutput> {
    let get = |id: &str| states.get(id).ok_or_else(|| Error::Missing(format!("state {id}")));
    let counts = |a: &PreparedState, sa: Side, b: &PreparedState, sb: Side| -> (usize, usize) {
        let x = a.gate_counts(sa).unwrap_or((0, 0));
        let y = b.gate_counts(sb).unwrap_or((0, 0));
        (x.0 + y.0, x.1 + y.1)
    };
    match job {
        JobSpec::Overlap { left, right, n_shots, seed } => {
            let (a, b) = (get(left)?, get(right)?);
            let r = adjoint_overlap(a, b, *n_shots, *seed, backend)?;
            Ok(JobOutput {
                value: r.value,
                value_im: 0.0,
                stderr: r.stderr,
                acceptance_rate: r.acceptance_rate,
                qubits_used: r.qubits_used,
                gate_counts: counts(a, Side::Left, b, Side::Right),
            })
        }
        JobSpec::Fourier {
            psi0,
            psip,
            alpha,
            k,
            n_shots,
            seed,
        } => {
            let (a, b) = (get(psi0)?, get(psip)?);
            let r = fourier_element(a, b, *alpha, *k, *n_shots, *seed, backend)?;
            Ok(JobOutput {
                value: r.value,
                value_im: 0.0,
                stderr: r.stderr,
                acceptance_rate: r.acceptance_rate,
                qubits_used: r.qubits_used,
                gate_counts: counts(a, Side::Left, b, Side::Right),
            })
        }
        JobSpec::Swap {
            psi0,
            psip,
            i,
            j,
            alpha,
            beta,
            n_shots,
            seed,
        } => {
            let (a, b) = (get(psi0)?, get(psip)?);
            let r = dipole_element_general(a, b, *i, *j, *alpha, *beta, *n_shots, *seed, backend)?;
            Ok(JobOutput {
                value: r.value.re,
                value_im: r.value.im,
                stderr: r.stderr_re.hypot(r.stderr_im),
                acceptance_rate: 1.0,
                qubits_used: 1 + 2 * a.n_phys_qubits() + a.n_bond_qubits() + b.n_bond_qubits(),
                gate_counts: counts(a, Side::Left, b, Side::Left),
            })
        }
    }
}

/// Classical `|⟨ψ_p|S̃^α_k|ψ_0⟩|²` from the realized states.
pub fn fourier_exact(psi0: &PreparedState, psip: &PreparedState, alpha: Axis, k: usize) -> Result<f64> {
    let a = psi0.realized(Side::Left)?;
    let b = psip.realized(Side::Right)?;
    let op = crate::mps::fourier_spin_mpo(a.len(), Spin::from_dim(a.d)?, alpha, k)?;
    Ok(mpo_matrix_element(&b, &op, &a)?.norm_sqr() / (a.norm_sqr() * b.norm_sqr()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dmrg::dense_to_mps;
    use crate::linalg::re;
    use crate::mps::{overlap, product_mps};
    use crate::oracle::{build_hamiltonian, exact_dipole_elements, low_eigenpairs, Method};
    use crate::sim::{exact_distribution, exact_state};

    fn ring(l: usize) -> ModelParams {
        ModelParams::heisenberg_ring(l, Spin::Half, 1.0)
    }

    fn exact_states(p: &ModelParams, n: usize) -> (crate::oracle::DenseSpectrum, Vec<MpsState>) {
        let spec = low_eigenpairs(&build_hamiltonian(p).unwrap(), n, Method::Dense).unwrap();
        let d = p.phys_dim();
        let states = spec.vectors.iter().map(|v| dense_to_mps(v, p.l, d).unwrap()).collect();
        (spec, states)
    }

    #[test]
    fn spin_three_half_expansions() {
        let h = 0.5;
        let s3 = 3f64.sqrt() / 2.0;
        let z = pauli_decompose_spin(Axis::Z, 1.5).unwrap();
        let zt: Vec<(f64, Vec<Pauli>)> = z.terms.iter().map(|t| (t.coeff.re, t.paulis.clone())).collect();
        assert_eq!(zt.len(), 2);
        assert!(zt.iter().any(|(c, p)| (c - h).abs() < 1e-15 && *p == vec![Pauli::I, Pauli::Z]));
        assert!(zt.iter().any(|(c, p)| (c - 1.0).abs() < 1e-15 && *p == vec![Pauli::Z, Pauli::I]));
        let x = pauli_decompose_spin(Axis::X, 1.5).unwrap();
        assert_eq!(x.terms.len(), 3);
        for (c, p) in [(s3, vec![Pauli::I, Pauli::X]), (h, vec![Pauli::X, Pauli::X]), (h, vec![Pauli::Y, Pauli::Y])] {
            assert!(x.terms.iter().any(|t| (t.coeff - re(c)).norm() < 1e-15 && t.paulis == p), "{p:?}");
        }
        for a in Axis::ALL {
            for s in [0.5, 1.5] {
                let d = pauli_decompose_spin(a, s).unwrap();
                assert!(d.matrix().max_abs_diff(&spin_matrix(Spin::from_f64(s).unwrap(), a)) < 1e-12);
            }
            assert_eq!(pauli_decompose_spin(a, 0.5).unwrap().terms.len(), 1);
        }
        assert!(pauli_decompose_spin(Axis::X, 1.0).is_err());
    }

    #[test]
    fn product_state_reads_deterministically() {
        let s = PreparedState::new("prod", &product_mps(3, 2, &[0, 0, 0]).unwrap(), Some(1), &[Side::Left], None).unwrap();
        let t = run_plan(&s, &uniform_plan(3, 1, Axis::Z), 200, 1, Backend::Statevector).unwrap();
        assert_eq!(t.table.n_accepted, 200);
        assert!((0..200).all(|shot| (0..3).all(|k| t.table.bit(shot, k) == 0)));
        // |M=3/2⟩ on every site gives ⟨S^z⟩ = 3/2
        let s = PreparedState::new("up", &product_mps(2, 4, &[0, 0]).unwrap(), Some(1), &[Side::Left], None).unwrap();
        let t = run_plan(&s, &uniform_plan(2, 2, Axis::Z), 100, 2, Backend::Statevector).unwrap();
        let sz = pauli_decompose_spin(Axis::Z, 1.5).unwrap();
        let mut est = Estimator::default();
        for term in &sz.terms {
            let f = term
                .paulis
                .iter()
                .enumerate()
                .filter(|(_, q)| **q != Pauli::I)
                .map(|(t, _)| (site_key(1, t), FactorKind::Sign))
                .collect();
            est.add_term(term.coeff.re, f);
        }
        let e = sim::estimate(&t.table, &est).unwrap();
        assert_eq!((e.mean, e.stderr), (1.5, 0.0));
    }

    #[test]
    fn superposition_sx_matches_dense() {
        // (|1/2⟩ + |−1/2⟩)/√2 has ⟨S^x⟩ = 1 for spin 3/2
        let mut v = vec![ZERO; 4];
        v[1] = re(FRAC_1_SQRT_2);
        v[2] = re(FRAC_1_SQRT_2);
        let sx = spin_matrix(Spin::ThreeHalves, Axis::X);
        let dense: C64 = (0..4)
            .flat_map(|a| (0..4).map(move |b| (a, b)))
            .map(|(a, b)| v[a].conj() * sx.get(a, b) * v[b])
            .sum();
        assert!((dense - ONE).norm() < 1e-12);
        let mps = MpsState::new(vec![Tensor3::from_vec(1, 4, 1, v.clone())], CanonicalForm::None).unwrap();
        let mut two = mps.tensors.clone();
        two.push(Tensor3::from_vec(1, 4, 1, vec![ONE, ZERO, ZERO, ZERO]));
        let st = PreparedState::new("sx", &MpsState::new(two, CanonicalForm::None).unwrap(), Some(1), &[Side::Left], None).unwrap();
        let plans: Vec<PlanTable> = [Axis::X, Axis::Y]
            .iter()
            .map(|&a| PlanTable {
                plan: uniform_plan(2, 2, a),
                table: run_shots_with_exact(&st, &uniform_plan(2, 2, a)),
            })
            .collect();
        // assemble ⟨S^x_0⟩ from XX (Iσx, σxσx) and YY (σyσy) tables
        let d = pauli_decompose_spin(Axis::X, 1.5).unwrap();
        let mut total = 0.0;
        for term in &d.terms {
            let term_e = EnergyTerm {
                coeff: term.coeff.re,
                factors: vec![(0, term.paulis.clone())],
            };
            let idx = plans.iter().position(|p| measurable(&p.plan, &term_e)).unwrap();
            let f = term
                .paulis
                .iter()
                .enumerate()
                .filter(|(_, q)| **q != Pauli::I)
                .map(|(t, _)| (site_key(0, t), FactorKind::Sign))
                .collect();
            let mut est = Estimator::default();
            est.add_term(term.coeff.re, f);
            total += sim::estimate(&plans[idx].table, &est).unwrap().mean;
        }
        assert!((total - 1.0).abs() < 0.03, "{total}");
    }

    fn run_shots_with_exact(s: &PreparedState, plan: &BasisPlan) -> ShotTable {
        sim::run_shots_with(&sequential_prep_program(s, plan).unwrap(), 20_000, 11, Backend::ExactSampled).unwrap()
    }

    #[test]
    fn singlet_energy() {
        let p = ring(2);
        let (spec, states) = exact_states(&p, 1);
        assert!((spec.energies[0] + 0.75).abs() < 1e-12);
        let s = PreparedState::new("gs", &states[0], None, &[Side::Left], None).unwrap();
        let tabs: Vec<PlanTable> = Axis::ALL
            .iter()
            .map(|&a| run_plan(&s, &uniform_plan(2, 1, a), 4000, a.index() as u64, Backend::Statevector).unwrap())
            .collect();
        let e = estimate_energy_spin_half(&tabs[0], &tabs[1], &tabs[2], &p).unwrap();
        // singlet correlators are exactly −1 in every basis
        assert!((e.mean + 0.75).abs() < 1e-12 && e.stderr < 1e-12, "{e:?}");
    }

    #[test]
    fn ring_energy_with_field_and_sz_sum() {
        let p = ring(4).with_field([0.4, 0.0, 0.7]);
        let (spec, states) = exact_states(&p, 1);
        let s = PreparedState::new("gs", &states[0], None, &[Side::Left], None).unwrap();
        let tabs: Vec<PlanTable> = Axis::ALL
            .iter()
            .map(|&a| run_plan(&s, &uniform_plan(4, 1, a), 20_000, 5 + a.index() as u64, Backend::Statevector).unwrap())
            .collect();
        let e = estimate_energy_spin_half(&tabs[0], &tabs[1], &tabs[2], &p).unwrap();
        assert!((e.mean - spec.energies[0]).abs() < 4.0 * e.stderr, "{e:?} vs {}", spec.energies[0]);
        assert!((realized_energy(&s, &p).unwrap() - spec.energies[0]).abs() < 1e-10);
        // zero field: Σ⟨S^z⟩ = 0
        let p0 = ring(4);
        let (_, st0) = exact_states(&p0, 1);
        let s0 = PreparedState::new("gs0", &st0[0], None, &[Side::Left], None).unwrap();
        let t = run_plan(&s0, &uniform_plan(4, 1, Axis::Z), 10_000, 3, Backend::Statevector).unwrap();
        let mut est = Estimator::default();
        for j in 0..4 {
            est.add_term(0.5, vec![(site_key(j, 0), FactorKind::Sign)]);
        }
        let m = sim::estimate(&t.table, &est).unwrap();
        assert!(m.mean.abs() <= 3.0 * m.stderr + 1e-12, "{m:?}");
    }

    #[test]
    fn exact_embeddings_postselect_with_certainty() {
        let p = ring(6);
        let (_, states) = exact_states(&p, 2);
        let s = PreparedState::new("gs", &states[1], Some(8), &[Side::Left, Side::Right], None).unwrap();
        for side in [Side::Left, Side::Right] {
            assert!((s.realized(side).unwrap().norm_sqr() - 1.0).abs() < 1e-10);
            for u in s.embeddings(side).unwrap() {
                assert!(u.matrix.unitarity_residual() < 1e-10);
            }
        }
        let prog = sequential_prep_program(&s, &uniform_plan(6, 1, Axis::X)).unwrap();
        assert_eq!(prog.n_qubits, 1 + 3);
        let rejected: f64 = exact_distribution(&prog).unwrap().iter().filter(|l| l.bits[0] >> 6 != 0).map(|l| l.prob).sum();
        assert!(rejected < 1e-10);
        assert!((overlap(&s.realized(Side::Left).unwrap(), &states[1]).unwrap().norm() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn overlap_protocol() {
        let p = ring(4);
        let (_, st) = exact_states(&p, 3);
        let prep: Vec<PreparedState> = st
            .iter()
            .enumerate()
            .map(|(i, m)| PreparedState::new(format!("s{i}"), m, None, &[Side::Left, Side::Right], None).unwrap())
            .collect();
        let same = adjoint_overlap(&prep[0], &prep[0], 2000, 1, Backend::Statevector).unwrap();
        assert!((same.value - 1.0).abs() < 1e-12);
        assert_eq!(same.qubits_used, 1 + 2 + 2);
        let cross = adjoint_overlap(&prep[0], &prep[1], 2000, 2, Backend::Statevector).unwrap();
        assert_eq!(cross.value, 0.0);
        for x in 0..4usize {
            for y in 0..4usize {
                let bx: Vec<usize> = (0..3).map(|b| (x >> b) & 1).collect();
                let by: Vec<usize> = (0..3).map(|b| (y >> b) & 1).collect();
                let a = PreparedState::new("x", &product_mps(3, 2, &bx).unwrap(), Some(1), &[Side::Left], None).unwrap();
                let b = PreparedState::new("y", &product_mps(3, 2, &by).unwrap(), Some(1), &[Side::Right], None).unwrap();
                let r = adjoint_overlap(&a, &b, 50, 0, Backend::ExactSampled).unwrap();
                assert_eq!(r.value, if x == y { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn w_states() {
        let w = wk_embeddings(2, 0).unwrap();
        let mut wide = GateProgram::new(vec![Role::WPhysical, Role::WPhysical, Role::WBond]);
        for j in (0..2).rev() {
            push_site(&mut wide, &w.left[j], &[j, 2], false, "w");
        }
        let psi = exact_state(&wide).unwrap();
        // index bits: qubit0 = site 0, qubit1 = site 1, qubit2 = bond
        let s = FRAC_1_SQRT_2;
        assert!((psi[0b001] - re(s)).norm() < 1e-12 && (psi[0b010] - re(s)).norm() < 1e-12);
        let l = 8;
        for k in 0..l {
            let w = wk_embeddings(l, k).unwrap();
            let mut p = GateProgram::new([vec![Role::WPhysical; l], vec![Role::WBond]].concat());
            for j in (0..l).rev() {
                push_site(&mut p, &w.left[j], &[j, l], false, "w");
            }
            let psi = exact_state(&p).unwrap();
            for j in 0..l {
                let expect = C64::from_polar(1.0 / (l as f64).sqrt(), 2.0 * PI * (j * k) as f64 / l as f64);
                assert!((psi[1 << j] - expect).norm() < 1e-12, "k={k} j={j}");
            }
            let norm: f64 = (0..l).map(|j| psi[1 << j].norm_sqr()).sum();
            assert!((norm - 1.0).abs() < 1e-12);
            for k2 in [0, 3] {
                let w2 = wk_embeddings(l, k2).unwrap();
                let ex = exact_distribution(&adjoint_overlap_program(&w, &w2).unwrap()).unwrap();
                let p0: f64 = ex.iter().filter(|lf| lf.bits[0] == 0).map(|lf| lf.prob).sum();
                assert!((p0 - if k == k2 { 1.0 } else { 0.0 }).abs() < 1e-12, "{k} {k2} {p0}");
            }
        }
    }

    #[test]
    fn fft_roundtrip_and_delta() {
        let l = 8;
        let mut m = BTreeMap::new();
        for k in 0..l {
            m.insert(k, re(2.5));
        }
        for j in 0..l {
            let o = reconstruct_dipole_fft(&m, l, j).unwrap();
            assert!((o - re(if j == 0 { 2.5 } else { 0.0 })).norm() < 1e-12);
        }
        let o: Vec<C64> = (0..l).map(|j| c(j as f64 * 0.3 - 1.0, (j * j) as f64 * 0.01)).collect();
        let f: BTreeMap<usize, C64> = forward_dipole_fft(&o).into_iter().enumerate().collect();
        for j in 0..l {
            assert!((reconstruct_dipole_fft(&f, l, j).unwrap() - o[j]).norm() < 1e-12);
        }
        m.remove(&3);
        assert!(matches!(reconstruct_dipole_fft(&m, l, 0), Err(Error::Missing(_))));
    }

    #[test]
    fn fourier_protocol_matches_oracle() {
        let l = 4;
        let p = ring(l);
        let (spec, st) = exact_states(&p, 4);
        let s0 = PreparedState::new("s0", &st[0], None, &[Side::Left, Side::Right], None).unwrap();
        let prep: Vec<PreparedState> = st
            .iter()
            .map(|m| PreparedState::new("p", m, None, &[Side::Right, Side::Left], None).unwrap())
            .collect();
        for (pi, sp) in prep.iter().enumerate() {
            let amps: Vec<C64> = (0..l)
                .map(|j| {
                    let v = crate::oracle::apply_site_op(&spec.vectors[0], l, 2, j, &spin_matrix(Spin::Half, Axis::X));
                    spec.vectors[pi].iter().zip(&v).map(|(a, b)| a.conj() * b).sum()
                })
                .collect();
            let mut parseval = 0.0;
            let mut elements = BTreeMap::new();
            for k in 0..l {
                let prog = fourier_program(&s0, sp, Axis::X, k).unwrap();
                assert_eq!(prog.n_qubits, 1 + s0.n_bond_qubits() + sp.n_bond_qubits() + 3);
                let leaves = exact_distribution(&prog).unwrap();
                let acc: f64 = leaves.iter().filter(|lf| lf.bits[0] == 0).map(|lf| lf.prob).sum();
                let sq = acc * (l * l) as f64 / 4.0;
                let expect: C64 = (0..l).map(|j| amps[j] * C64::from_polar(1.0, 2.0 * PI * (j * k) as f64 / l as f64)).sum();
                assert!((sq - expect.norm_sqr()).abs() < 1e-10, "p={pi} k={k}: {sq} vs {}", expect.norm_sqr());
                assert!((fourier_exact(&s0, sp, Axis::X, k).unwrap() - sq).abs() < 1e-10);
                parseval += sq;
                elements.insert(k, re(sq / l as f64));
            }
            let direct: f64 = amps.iter().map(|a| a.norm_sqr()).sum::<f64>() * l as f64;
            assert!((parseval - direct).abs() < 1e-10);
            for d in 0..l {
                let o = exact_dipole_elements(&spec, pi, 0, d, Axis::X, Axis::X).unwrap();
                assert!((reconstruct_dipole_fft(&elements, l, d).unwrap() - o).norm() < 1e-10, "p={pi} d={d}");
            }
        }
        // singlet: total-spin annihilation for k = 0
        let r = fourier_element(&s0, &prep[0], Axis::Z, 0, 2000, 4, Backend::Statevector).unwrap();
        assert!(r.value.abs() < 1e-12);
    }

    #[test]
    fn swap_test_backends_agree_with_oracle() {
        let l = 4;
        let p = ring(l).with_field([0.3, 0.0, 0.2]);
        let (spec, st) = exact_states(&p, 3);
        let prep: Vec<PreparedState> = st.iter().map(|m| PreparedState::new("s", m, None, &[Side::Left], None).unwrap()).collect();
        for (i, j) in [(0, 0), (0, 2), (1, 3)] {
            let o = exact_dipole_elements(&spec, 2, i, j, Axis::X, Axis::Z).unwrap();
            let ex = dipole_element_exact(&prep[0], &prep[2], i, j, Axis::X, Axis::Z).unwrap();
            assert!((o - ex).norm() < 1e-10);
            let est = dipole_element_general(&prep[0], &prep[2], i, j, Axis::X, Axis::Z, 20_000, 9, Backend::ExactSampled).unwrap();
            assert!((est.value.re - o.re).abs() < 4.0 * est.stderr_re + 1e-12, "{est:?} vs {o}");
            assert!((est.value.im - o.im).abs() < 4.0 * est.stderr_im + 1e-12, "{est:?} vs {o}");
        }
        // literal circuit and exact engine agree in the infinite-shot limit
        let g1 = SiteOp {
            site: 1,
            matrix: Pauli::X.matrix(),
        };
        let g2 = SiteOp {
            site: 2,
            matrix: Pauli::Y.matrix(),
        };
        let (m, acc) = swap_exact(&prep[0], &prep[1], &g1, &g2).unwrap();
        assert!((acc - 1.0).abs() < 1e-10);
        for part in [Part::Re, Part::Im] {
            let prog = swap_test_program(&prep[0], &prep[1], &g1, &g2, part).unwrap();
            assert_eq!(prog.n_qubits, 1 + 2 + prep[0].n_bond_qubits() + prep[1].n_bond_qubits());
            let anc = prog.keys().iter().position(|k| k == "anc").unwrap();
            let leaves = exact_distribution(&prog).unwrap();
            let p0: f64 = leaves.iter().filter(|lf| (lf.bits[0] >> anc) & 1 == 0).map(|lf| lf.prob).sum();
            let x = 2.0 * p0 - 1.0;
            let expect = if part == Part::Re { m.re } else { -m.im };
            assert!((x - expect).abs() < 1e-10, "{part:?}: {x} vs {expect}");
        }
        let self_test = swap_test_element(
            &prep[0],
            &prep[0],
            &SiteOp {
                site: 0,
                matrix: Mat::identity(2),
            },
            &SiteOp {
                site: 0,
                matrix: Mat::identity(2),
            },
            Part::Re,
            500,
            1,
            Backend::Statevector,
        )
        .unwrap();
        assert_eq!(self_test.value, 1.0);
    }

    #[test]
    fn diagonal_elements_real_and_hermitian_pairs() {
        let l = 4;
        let p = ring(l);
        let (_, st) = exact_states(&p, 4);
        let prep: Vec<PreparedState> = st.iter().map(|m| PreparedState::new("s", m, None, &[Side::Left], None).unwrap()).collect();
        let d = dipole_element_general(&prep[0], &prep[1], 2, 2, Axis::Y, Axis::Y, 2000, 3, Backend::ExactSampled).unwrap();
        assert_eq!(d.value.im, 0.0);
        assert!(d.value.re >= -3.0 * d.stderr_re);
        assert!(d.circuits_skipped > 0);
        let a = dipole_element_exact(&prep[0], &prep[1], 0, 1, Axis::X, Axis::Y).unwrap();
        let b = dipole_element_exact(&prep[0], &prep[1], 1, 0, Axis::Y, Axis::X).unwrap();
        assert!((a - b.conj()).norm() < 1e-12);
    }

    #[test]
    fn job_spec_json() {
        let job = JobSpec::Fourier {
            psi0: "gs".into(),
            psip: "p3".into(),
            alpha: Axis::X,
            k: 2,
            n_shots: 100,
            seed: 4,
        };
        let s = serde_json::to_string(&job).unwrap();
        assert!(s.contains("\"protocol\":\"fourier\""));
        assert_eq!(serde_json::from_str::<JobSpec>(&s).unwrap(), job);
        let p = ring(4);
        let (_, st) = exact_states(&p, 1);
        let mut states = BTreeMap::new();
        states.insert(
            "gs".to_string(),
            PreparedState::new("gs", &st[0], None, &[Side::Left, Side::Right], None).unwrap(),
        );
        let out = run_job(
            &JobSpec::Overlap {
                left: "gs".into(),
                right: "gs".into(),
                n_shots: 100,
                seed: 1,
            },
            &states,
            Backend::Statevector,
        )
        .unwrap();
        assert!((out.value - 1.0).abs() < 1e-12);
        assert!(run_job(&job, &states, Backend::Statevector).is_err());
    }
}
