//! Shot-based statevector simulation with mid-circuit measurement, reset and
//! post-selection.
//!
//! Global qubit `q` is bit `q` of the statevector index. A unitary acting on
//! `qubits = [q0, q1, ..]` uses a local index where `q0` is the most
//! significant bit.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{c, Mat, C64, ONE, ZERO};
use crate::model::Axis;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Physical,
    Bond,
    WPhysical,
    WBond,
    Ancilla,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Unitary {
        matrix: Mat,
        qubits: Vec<usize>,
        label: String,
    },
    Measure {
        qubit: usize,
        basis: Axis,
        key: String,
    },
    Reset {
        qubit: usize,
    },
    /// Z measurement recorded under `key`; the shot is accepted only if every
    /// tag reads `outcome`.
    PostSelect {
        qubit: usize,
        outcome: u8,
        key: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateProgram {
    pub n_qubits: usize,
    pub roles: Vec<Role>,
    pub ops: Vec<Op>,
}

impl GateProgram {
    pub fn new(roles: Vec<Role>) -> Self {
        GateProgram {
            n_qubits: roles.len(),
            roles,
            ops: Vec::new(),
        }
    }

    pub fn unitary(&mut self, matrix: Mat, qubits: Vec<usize>, label: impl Into<String>) {
        self.ops.push(Op::Unitary {
            matrix,
            qubits,
            label: label.into(),
        });
    }

    pub fn measure(&mut self, qubit: usize, basis: Axis, key: impl Into<String>) {
        self.ops.push(Op::Measure { qubit, basis, key: key.into() });
    }

    pub fn reset(&mut self, qubit: usize) {
        self.ops.push(Op::Reset { qubit });
    }

    pub fn postselect(&mut self, qubit: usize, outcome: u8, key: impl Into<String>) {
        self.ops.push(Op::PostSelect {
            qubit,
            outcome,
            key: key.into(),
        });
    }

    /// Record keys in program order.
    pub fn keys(&self) -> Vec<String> {
        self.ops
            .iter()
            .filter_map(|op| match op {
                Op::Measure { key, .. } | Op::PostSelect { key, .. } => Some(key.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn unitary_count(&self) -> usize {
        self.ops.iter().filter(|op| matches!(op, Op::Unitary { .. })).count()
    }

    pub fn qubits_with_role(&self, role: Role) -> usize {
        self.roles.iter().filter(|r| **r == role).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.roles.len() != self.n_qubits {
            return Err(Error::Program("one role per qubit required".into()));
        }
        if self.n_qubits > 26 {
            return Err(Error::DimensionCap(self.n_qubits));
        }
        let mut seen = HashSet::new();
        for (i, op) in self.ops.iter().enumerate() {
            let check_q = |q: usize| -> Result<()> {
                if q >= self.n_qubits {
                    return Err(Error::Program(format!("op {i}: qubit {q} out of range")));
                }
                Ok(())
            };
            match op {
                Op::Unitary { matrix, qubits, label } => {
                    qubits.iter().try_for_each(|&q| check_q(q))?;
                    let uniq: HashSet<_> = qubits.iter().collect();
                    if uniq.len() != qubits.len() || qubits.is_empty() {
                        return Err(Error::Program(format!("op {i} ({label}): repeated or empty qubit list")));
                    }
                    let dim = 1usize << qubits.len();
                    if matrix.rows != dim || matrix.cols != dim {
                        return Err(Error::Program(format!("op {i} ({label}): matrix is not {dim}x{dim}")));
                    }
                    let r = matrix.unitarity_residual();
                    if r > 1e-10 {
                        return Err(Error::Program(format!("op {i} ({label}): not unitary (residual {r:.2e})")));
                    }
                }
                Op::Measure { qubit, key, .. } | Op::PostSelect { qubit, key, .. } => {
                    check_q(*qubit)?;
                    if !seen.insert(key.clone()) {
                        return Err(Error::Program(format!("duplicate record key {key}")));
                    }
                }
                Op::Reset { qubit } => check_q(*qubit)?,
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> ProgramJson {
        ProgramJson {
            n_qubits: self.n_qubits,
            roles: self.roles.clone(),
            ops: self
                .ops
                .iter()
                .map(|op| match op {
                    Op::Unitary { matrix, qubits, label } => OpJson::Unitary {
                        name: label.clone(),
                        qubits: qubits.clone(),
                        matrix: matrix.data.iter().map(|z| [z.re, z.im]).collect(),
                    },
                    Op::Measure { qubit, basis, key } => OpJson::Measure {
                        qubit: *qubit,
                        basis: *basis,
                        key: key.clone(),
                    },
                    Op::Reset { qubit } => OpJson::Reset { qubit: *qubit },
                    Op::PostSelect { qubit, outcome, key } => OpJson::PostSelect {
                        qubit: *qubit,
                        outcome: *outcome,
                        key: key.clone(),
                    },
                })
                .collect(),
        }
    }

    pub fn from_json(j: &ProgramJson) -> Result<Self> {
        let ops = j
            .ops
            .iter()
            .map(|op| -> Result<Op> {
                Ok(match op {
                    OpJson::Unitary { name, qubits, matrix } => {
                        let dim = 1usize << qubits.len();
                        if matrix.len() != dim * dim {
                            return Err(Error::Program(format!("{name}: expected {} matrix entries", dim * dim)));
                        }
                        Op::Unitary {
                            matrix: Mat::from_vec(dim, dim, matrix.iter().map(|p| c(p[0], p[1])).collect()),
                            qubits: qubits.clone(),
                            label: name.clone(),
                        }
                    }
                    OpJson::Measure { qubit, basis, key } => Op::Measure {
                        qubit: *qubit,
                        basis: *basis,
                        key: key.clone(),
                    },
                    OpJson::Reset { qubit } => Op::Reset { qubit: *qubit },
                    OpJson::PostSelect { qubit, outcome, key } => Op::PostSelect {
                        qubit: *qubit,
                        outcome: *outcome,
                        key: key.clone(),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let p = GateProgram {
            n_qubits: j.n_qubits,
            roles: j.roles.clone(),
            ops,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramJson {
    pub n_qubits: usize,
    pub roles: Vec<Role>,
    pub ops: Vec<OpJson>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpJson {
    Unitary { name: String, qubits: Vec<usize>, matrix: Vec<[f64; 2]> },
    Measure { qubit: usize, basis: Axis, key: String },
    Reset { qubit: usize },
    PostSelect { qubit: usize, outcome: u8, key: String },
}

/// Dense statevector over `n` qubits.
#[derive(Clone, Debug, PartialEq)]
pub struct Statevector {
    pub n: usize,
    pub amps: Vec<C64>,
}

impl Statevector {
    pub fn zero(n: usize) -> Self {
        let mut amps = vec![ZERO; 1 << n];
        amps[0] = ONE;
        Statevector { n, amps }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn apply(&mut self, m: &Mat, qubits: &[usize]) {
        let block = Block::new(m, qubits);
        let mut scratch = Scratch::new(qubits.len());
        block.apply(&mut self.amps, &mut scratch);
    }

    /// Probability of reading 1 on `qubit` in the Z basis.
    pub fn prob_one(&self, qubit: usize) -> f64 {
        let bit = 1usize << qubit;
        self.amps.iter().enumerate().filter(|(i, _)| i & bit != 0).map(|(_, z)| z.norm_sqr()).sum()
    }

    /// Projects `qubit` onto `outcome` and renormalizes; returns the branch
    /// probability before renormalization.
    pub fn collapse(&mut self, qubit: usize, outcome: u8) -> Result<f64> {
        let bit = 1usize << qubit;
        let mut p = 0.0;
        for (i, z) in self.amps.iter_mut().enumerate() {
            if ((i & bit != 0) as u8) == outcome {
                p += z.norm_sqr();
            } else {
                *z = ZERO;
            }
        }
        if p <= 0.0 {
            return Err(Error::ZeroNorm);
        }
        let s = 1.0 / p.sqrt();
        self.amps.iter_mut().for_each(|z| *z *= s);
        Ok(p)
    }

    pub fn flip(&mut self, qubit: usize) {
        let bit = 1usize << qubit;
        for i in 0..self.amps.len() {
            if i & bit == 0 {
                self.amps.swap(i, i | bit);
            }
        }
    }

    /// Rotates `qubit` so that a Z readout measures `basis`.
    pub fn rotate_to(&mut self, qubit: usize, basis: Axis, inverse: bool) {
        if basis == Axis::Z {
            return;
        }
        let r = basis_rotation(basis);
        self.apply(&if inverse { r.adjoint() } else { r }, &[qubit]);
    }
}

/// `H` for X and `H S†` for Y.
pub fn basis_rotation(basis: Axis) -> Mat {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    match basis {
        Axis::X => Mat::from_real(2, 2, &[s, s, s, -s]),
        Axis::Y => Mat::from_vec(2, 2, vec![c(s, 0.0), c(0.0, -s), c(s, 0.0), c(0.0, s)]),
        Axis::Z => Mat::identity(2),
    }
}

/// Dense gate with precomputed scatter offsets.
#[derive(Clone, Debug)]
struct Block {
    /// Column-major copy of the local matrix.
    cols: Vec<C64>,
    dim: usize,
    offsets: Vec<usize>,
    mask: usize,
}

struct Scratch {
    x: Vec<C64>,
    nz: Vec<usize>,
}

impl Scratch {
    fn new(k: usize) -> Self {
        Scratch {
            x: vec![ZERO; 1 << k],
            nz: Vec::with_capacity(1 << k),
        }
    }
}

impl Block {
    fn new(m: &Mat, qubits: &[usize]) -> Self {
        let k = qubits.len();
        let dim = 1usize << k;
        let offsets = (0..dim)
            .map(|l| (0..k).filter(|t| l >> (k - 1 - t) & 1 == 1).map(|t| 1usize << qubits[t]).sum())
            .collect();
        let mask = qubits.iter().map(|q| 1usize << q).sum();
        let mut cols = vec![ZERO; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                cols[j * dim + i] = m.data[i * dim + j];
            }
        }
        Block { cols, dim, offsets, mask }
    }

    fn apply(&self, amps: &mut [C64], s: &mut Scratch) {
        for base in 0..amps.len() {
            if base & self.mask != 0 {
                continue;
            }
            s.nz.clear();
            for (l, &off) in self.offsets.iter().enumerate() {
                let v = amps[base + off];
                s.x[l] = v;
                if v != ZERO {
                    s.nz.push(l);
                }
            }
            if s.nz.is_empty() {
                continue;
            }
            for &off in &self.offsets {
                amps[base + off] = ZERO;
            }
            for &l in &s.nz {
                let xl = s.x[l];
                let col = &self.cols[l * self.dim..(l + 1) * self.dim];
                for (i, &off) in self.offsets.iter().enumerate() {
                    amps[base + off] += col[i] * xl;
                }
            }
        }
    }
}

/// Program with consecutive unitaries fused into dense blocks.
enum Step {
    Apply(Block),
    Measure { qubit: usize, basis: Axis, slot: usize },
    Reset { qubit: usize },
    PostSelect { qubit: usize, outcome: u8, slot: usize },
}

const FUSE_MAX: usize = 7;

fn fuse(p: &GateProgram) -> Vec<Step> {
    let mut steps = Vec::new();
    let mut cur: Option<(Vec<usize>, Mat)> = None;
    let mut slot = 0;
    let flush = |cur: &mut Option<(Vec<usize>, Mat)>, steps: &mut Vec<Step>| {
        if let Some((qs, m)) = cur.take() {
            steps.push(Step::Apply(Block::new(&m, &qs)));
        }
    };
    for op in &p.ops {
        match op {
            Op::Unitary { matrix, qubits, .. } => {
                let (mut qs, mut m) = match cur.take() {
                    Some(x) => x,
                    None => (qubits.clone(), Mat::identity(matrix.rows)),
                };
                let new: Vec<usize> = qubits.iter().copied().filter(|q| !qs.contains(q)).collect();
                if qs.len() + new.len() > FUSE_MAX {
                    steps.push(Step::Apply(Block::new(&m, &qs)));
                    qs = qubits.clone();
                    m = Mat::identity(matrix.rows);
                } else if !new.is_empty() {
                    m = m.kron(&Mat::identity(1 << new.len()));
                    qs.extend(new);
                }
                // left-multiply the block by the gate acting on its local positions
                let k = qs.len();
                let local: Vec<usize> = qubits.iter().map(|q| k - 1 - qs.iter().position(|x| x == q).unwrap()).collect();
                let g = Block::new(matrix, &local);
                let mut scratch = Scratch::new(qubits.len());
                let dim = 1usize << k;
                // columns of m as statevectors in local little-endian order
                let mut col = vec![ZERO; dim];
                for j in 0..dim {
                    for i in 0..dim {
                        col[i] = m.data[i * dim + j];
                    }
                    g.apply(&mut col, &mut scratch);
                    for i in 0..dim {
                        m.data[i * dim + j] = col[i];
                    }
                }
                cur = Some((qs, m));
            }
            Op::Measure { qubit, basis, .. } => {
                flush(&mut cur, &mut steps);
                steps.push(Step::Measure {
                    qubit: *qubit,
                    basis: *basis,
                    slot,
                });
                slot += 1;
            }
            Op::Reset { qubit } => {
                flush(&mut cur, &mut steps);
                steps.push(Step::Reset { qubit: *qubit });
            }
            Op::PostSelect { qubit, outcome, .. } => {
                flush(&mut cur, &mut steps);
                steps.push(Step::PostSelect {
                    qubit: *qubit,
                    outcome: *outcome,
                    slot,
                });
                slot += 1;
            }
        }
    }
    flush(&mut cur, &mut steps);
    steps
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    /// Literal per-shot statevector evolution.
    Statevector,
    /// Exact outcome distribution by branch enumeration, then sampled.
    ExactSampled,
}

/// One row per shot of recorded bits plus the acceptance flag.
#[derive(Clone, Debug, PartialEq)]
pub struct ShotTable {
    pub keys: Vec<String>,
    /// `(slot, required outcome)` for every post-selection tag.
    pub tags: Vec<(usize, u8)>,
    words: usize,
    bits: Vec<u64>,
    pub accepted: Vec<bool>,
    pub seed: u64,
    pub n_requested: usize,
    pub n_accepted: usize,
}

impl ShotTable {
    fn new(p: &GateProgram, n_shots: usize, seed: u64) -> Self {
        let keys = p.keys();
        let mut tags = Vec::new();
        let mut slot = 0;
        for op in &p.ops {
            match op {
                Op::Measure { .. } => slot += 1,
                Op::PostSelect { outcome, .. } => {
                    tags.push((slot, *outcome));
                    slot += 1;
                }
                _ => {}
            }
        }
        let words = keys.len().div_ceil(64).max(1);
        ShotTable {
            keys,
            tags,
            words,
            bits: vec![0; words * n_shots],
            accepted: vec![false; n_shots],
            seed,
            n_requested: n_shots,
            n_accepted: 0,
        }
    }

    /// Table filled by a per-shot sampler drawing from the shot's own
    /// stream; used by backends that sample from exact probabilities.
    pub fn sampled(keys: Vec<String>, tags: Vec<(usize, u8)>, n_shots: usize, seed: u64, mut sample: impl FnMut(&mut ChaCha8Rng) -> u64) -> Self {
        assert!(keys.len() <= 64, "sampled tables hold at most 64 keys");
        let mut t = ShotTable {
            keys,
            tags,
            words: 1,
            bits: vec![0; n_shots],
            accepted: vec![false; n_shots],
            seed,
            n_requested: n_shots,
            n_accepted: 0,
        };
        for shot in 0..n_shots {
            t.bits[shot] = sample(&mut shot_rng(seed, shot));
        }
        t.finish();
        t
    }

    fn row_mut(&mut self, shot: usize) -> &mut [u64] {
        &mut self.bits[shot * self.words..(shot + 1) * self.words]
    }

    fn finish(&mut self) {
        for s in 0..self.n_requested {
            let row = &self.bits[s * self.words..(s + 1) * self.words];
            self.accepted[s] = self.tags.iter().all(|&(slot, o)| ((row[slot / 64] >> (slot % 64)) & 1) as u8 == o);
        }
        self.n_accepted = self.accepted.iter().filter(|a| **a).count();
    }

    pub fn key_index(&self, key: &str) -> Result<usize> {
        self.keys
            .iter()
            .position(|k| k == key)
            .ok_or_else(|| Error::Missing(format!("record key {key}")))
    }

    pub fn bit(&self, shot: usize, slot: usize) -> u8 {
        ((self.bits[shot * self.words + slot / 64] >> (slot % 64)) & 1) as u8
    }

    /// Fraction of requested shots that were accepted, with binomial stderr.
    pub fn acceptance_rate(&self) -> (f64, f64) {
        let n = self.n_requested.max(1) as f64;
        let p = self.n_accepted as f64 / n;
        (p, (p * (1.0 - p) / n).sqrt())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["shot".to_string()];
        header.extend(self.keys.iter().cloned());
        header.push("accepted".into());
        w.write_record(&header).map_err(csv_err)?;
        for s in 0..self.n_requested {
            let mut row = vec![s.to_string()];
            row.extend((0..self.keys.len()).map(|k| self.bit(s, k).to_string()));
            row.push((self.accepted[s] as u8).to_string());
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let shots: Vec<Vec<u8>> = (0..self.n_requested).map(|s| (0..self.keys.len()).map(|k| self.bit(s, k)).collect()).collect();
        serde_json::json!({
            "keys": self.keys,
            "seed": self.seed,
            "n_requested": self.n_requested,
            "n_accepted": self.n_accepted,
            "accepted": self.accepted,
            "shots": shots,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn shot_rng(seed: u64, shot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(shot as u64);
    rng
}

/// Runs `n_shots` literal statevector shots. Shot `i` draws from ChaCha
/// stream `i` of `seed`.
pub fn run_shots(p: &GateProgram, n_shots: usize, seed: u64) -> Result<ShotTable> {
    run_shots_with(p, n_shots, seed, Backend::Statevector)
}

pub fn run_shots_with(p: &GateProgram, n_shots: usize, seed: u64, backend: Backend) -> Result<ShotTable> {
    p.validate()?;
    let mut table = ShotTable::new(p, n_shots, seed);
    match backend {
        Backend::Statevector => {
            let steps = fuse(p);
            let max_k = steps.iter().map(|s| if let Step::Apply(b) = s { b.dim } else { 1 }).max().unwrap_or(1);
            let mut scratch = Scratch {
                x: vec![ZERO; max_k],
                nz: Vec::with_capacity(max_k),
            };
            let mut sv = Statevector::zero(p.n_qubits);
            for shot in 0..n_shots {
                let mut rng = shot_rng(seed, shot);
                sv.amps.iter_mut().for_each(|z| *z = ZERO);
                sv.amps[0] = ONE;
                let row = table.row_mut(shot);
                for step in &steps {
                    match step {
                        Step::Apply(b) => b.apply(&mut sv.amps, &mut scratch),
                        Step::Measure { qubit, basis, slot } => {
                            sv.rotate_to(*qubit, *basis, false);
                            let bit = sample_z(&mut sv, *qubit, &mut rng)?;
                            sv.rotate_to(*qubit, *basis, true);
                            row[slot / 64] |= (bit as u64) << (slot % 64);
                        }
                        Step::PostSelect { qubit, slot, .. } => {
                            let bit = sample_z(&mut sv, *qubit, &mut rng)?;
                            row[slot / 64] |= (bit as u64) << (slot % 64);
                        }
                        Step::Reset { qubit } => {
                            if sample_z(&mut sv, *qubit, &mut rng)? == 1 {
                                sv.flip(*qubit);
                            }
                        }
                    }
                }
            }
        }
        Backend::ExactSampled => {
            let leaves = exact_distribution(p)?;
            let mut cdf = Vec::with_capacity(leaves.len());
            let mut acc = 0.0;
            for l in &leaves {
                acc += l.prob;
                cdf.push(acc);
            }
            for shot in 0..n_shots {
                let mut rng = shot_rng(seed, shot);
                let u: f64 = rng.random::<f64>() * acc;
                let idx = cdf.partition_point(|&c| c <= u).min(leaves.len() - 1);
                let w = table.words;
                table.row_mut(shot).copy_from_slice(&leaves[idx].bits[..w]);
            }
        }
    }
    table.finish();
    Ok(table)
}

fn sample_z(sv: &mut Statevector, qubit: usize, rng: &mut ChaCha8Rng) -> Result<u8> {
    let p1 = sv.prob_one(qubit);
    let total = sv.norm_sqr();
    if total <= 0.0 {
        return Err(Error::ZeroNorm);
    }
    let u: f64 = rng.random();
    let bit = if u * total < p1 { 1 } else { 0 };
    sv.collapse(qubit, bit)?;
    Ok(bit)
}

/// One outcome branch of a program.
#[derive(Clone, Debug, PartialEq)]
pub struct Leaf {
    pub bits: Vec<u64>,
    pub prob: f64,
}

const MAX_LEAVES: usize = 1 << 22;
const BRANCH_CUTOFF: f64 = 1e-15;

/// Enumerates every measurement branch with its Born probability.
///
/// A branch that fails a post-selection tag stops there and records zeros for
/// the remaining keys; branches below `1e-15` probability are dropped.
pub fn exact_distribution(p: &GateProgram) -> Result<Vec<Leaf>> {
    p.validate()?;
    let steps = fuse(p);
    let words = p.keys().len().div_ceil(64).max(1);
    let mut scratch = Scratch::new(FUSE_MAX);
    let mut leaves = Vec::new();
    let mut stack = vec![(0usize, Statevector::zero(p.n_qubits), vec![0u64; words], 1.0f64)];
    'branch: while let Some((mut pc, mut sv, mut bits, prob)) = stack.pop() {
        while pc < steps.len() {
            match &steps[pc] {
                Step::Apply(b) => b.apply(&mut sv.amps, &mut scratch),
                Step::Measure { qubit, basis, slot } => {
                    sv.rotate_to(*qubit, *basis, false);
                    let p1 = sv.prob_one(*qubit);
                    // a reset right after the measurement leaves |0> whatever the outcome
                    let then_reset = matches!(steps.get(pc + 1), Some(Step::Reset { qubit: r }) if r == qubit);
                    for (bit, pb) in [(1u8, p1), (0u8, 1.0 - p1)] {
                        if pb * prob > BRANCH_CUTOFF {
                            let mut child = sv.clone();
                            child.collapse(*qubit, bit)?;
                            let next = if then_reset {
                                if bit == 1 {
                                    child.flip(*qubit);
                                }
                                pc + 2
                            } else {
                                child.rotate_to(*qubit, *basis, true);
                                pc + 1
                            };
                            let mut cb = bits.clone();
                            cb[slot / 64] |= (bit as u64) << (slot % 64);
                            stack.push((next, child, cb, prob * pb));
                        }
                    }
                    continue 'branch;
                }
                Step::PostSelect { qubit, outcome, slot } => {
                    let p1 = sv.prob_one(*qubit);
                    let p_bad = if *outcome == 1 { 1.0 - p1 } else { p1 };
                    if p_bad * prob > BRANCH_CUTOFF {
                        let mut rb = bits.clone();
                        rb[slot / 64] |= ((1 - outcome) as u64) << (slot % 64);
                        leaves.push(Leaf { bits: rb, prob: prob * p_bad });
                    }
                    if (1.0 - p_bad) * prob <= BRANCH_CUTOFF {
                        continue 'branch;
                    }
                    sv.collapse(*qubit, *outcome)?;
                    bits[slot / 64] |= (*outcome as u64) << (slot % 64);
                    stack.push((pc + 1, sv, bits, prob * (1.0 - p_bad)));
                    continue 'branch;
                }
                Step::Reset { qubit } => {
                    let p1 = sv.prob_one(*qubit);
                    for (bit, pb) in [(1u8, p1), (0u8, 1.0 - p1)] {
                        if pb * prob > BRANCH_CUTOFF {
                            let mut child = sv.clone();
                            child.collapse(*qubit, bit)?;
                            if bit == 1 {
                                child.flip(*qubit);
                            }
                            stack.push((pc + 1, child, bits.clone(), prob * pb));
                        }
                    }
                    continue 'branch;
                }
            }
            pc += 1;
        }
        leaves.push(Leaf { bits, prob });
        if leaves.len() > MAX_LEAVES {
            return Err(Error::DimensionCap(leaves.len()));
        }
    }
    Ok(leaves)
}

/// Dense state after a purely unitary program.
pub fn exact_state(p: &GateProgram) -> Result<Vec<C64>> {
    p.validate()?;
    let mut sv = Statevector::zero(p.n_qubits);
    for op in &p.ops {
        match op {
            Op::Unitary { matrix, qubits, .. } => sv.apply(matrix, qubits),
            _ => return Err(Error::Program("exact_state needs a program without measurement or reset".into())),
        }
    }
    Ok(sv.amps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorKind {
    /// `1 − 2b`.
    Sign,
    /// `1 − b`.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub coeff: f64,
    pub factors: Vec<(String, FactorKind)>,
}

/// Sum of coefficient-weighted products of per-bit factors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Estimator {
    pub terms: Vec<Term>,
}

impl Estimator {
    pub fn constant(c: f64) -> Self {
        Estimator {
            terms: vec![Term { coeff: c, factors: vec![] }],
        }
    }

    pub fn sign_product(coeff: f64, keys: &[&str]) -> Self {
        Estimator {
            terms: vec![Term {
                coeff,
                factors: keys.iter().map(|k| (k.to_string(), FactorKind::Sign)).collect(),
            }],
        }
    }

    pub fn add_term(&mut self, coeff: f64, factors: Vec<(String, FactorKind)>) {
        self.terms.push(Term { coeff, factors });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Sample mean and standard error of `est` over accepted shots.
pub fn estimate(t: &ShotTable, est: &Estimator) -> Result<Estimate> {
    if t.n_accepted == 0 {
        return Err(Error::NoAcceptedShots);
    }
    let terms: Vec<(f64, Vec<(usize, FactorKind)>)> = est
        .terms
        .iter()
        .map(|term| -> Result<_> {
            let f = term.factors.iter().map(|(k, kind)| Ok((t.key_index(k)?, *kind))).collect::<Result<Vec<_>>>()?;
            Ok((term.coeff, f))
        })
        .collect::<Result<_>>()?;
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for s in (0..t.n_requested).filter(|&s| t.accepted[s]) {
        let v: f64 = terms
            .iter()
            .map(|(cf, fs)| {
                cf * fs
                    .iter()
                    .map(|&(slot, kind)| {
                        let b = t.bit(s, slot) as f64;
                        match kind {
                            FactorKind::Sign => 1.0 - 2.0 * b,
                            FactorKind::Zero => 1.0 - b,
                        }
                    })
                    .product::<f64>()
            })
            .sum();
        sum += v;
        sum2 += v * v;
    }
    let n = t.n_accepted as f64;
    let mean = sum / n;
    let var = if t.n_accepted > 1 {
        ((sum2 - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(Estimate {
        mean,
        stderr: (var / n).sqrt(),
        n: t.n_accepted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn hadamard() -> Mat {
        basis_rotation(Axis::X)
    }

    #[test]
    fn fair_coin() {
        let mut p = GateProgram::new(vec![Role::Ancilla]);
        p.unitary(hadamard(), vec![0], "h");
        p.measure(0, Axis::Z, "m");
        let t = run_shots(&p, 10_000, 7).unwrap();
        let e = estimate(
            &t,
            &Estimator {
                terms: vec![Term {
                    coeff: 1.0,
                    factors: vec![("m".into(), FactorKind::Zero)],
                }],
            },
        )
        .unwrap();
        let mean_bit = 1.0 - e.mean;
        assert!((mean_bit - 0.5).abs() < 5.0 * 0.005, "{mean_bit}");
        assert!((e.stderr - 0.005).abs() < 1e-4);
        let c = estimate(&t, &Estimator::constant(2.5)).unwrap();
        assert_eq!((c.mean, c.stderr), (2.5, 0.0));
        assert_eq!(t, run_shots(&p, 10_000, 7).unwrap());
    }

    #[test]
    fn measurement_bases() {
        for (basis, prep) in [(Axis::X, hadamard()), (Axis::Y, basis_rotation(Axis::Y).adjoint()), (Axis::Z, Mat::identity(2))] {
            let mut p = GateProgram::new(vec![Role::Physical]);
            p.unitary(prep, vec![0], "prep");
            p.measure(0, basis, "m");
            let t = run_shots(&p, 500, 1).unwrap();
            assert!((0..500).all(|s| t.bit(s, 0) == 0), "{basis:?}");
        }
    }

    #[test]
    fn qubit_order_and_gate_convention() {
        // X on qubit 1 sets bit 1 of the index
        let x = Mat::from_real(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let mut p = GateProgram::new(vec![Role::Physical; 3]);
        p.unitary(x.clone(), vec![1], "x");
        let psi = exact_state(&p).unwrap();
        assert_eq!(psi[2], ONE);
        // the first listed qubit is the control of a CNOT matrix
        let cnot = Mat::from_real(4, 4, &[1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 0., 1., 0., 0., 1., 0.]);
        p.unitary(cnot, vec![1, 2], "cx");
        let psi = exact_state(&p).unwrap();
        assert_eq!(psi[0b110], ONE);
        assert_eq!(exact_state(&GateProgram::new(vec![Role::Bond; 2])).unwrap(), vec![ONE, ZERO, ZERO, ZERO]);
    }

    #[test]
    fn reset_and_postselect() {
        let mut p = GateProgram::new(vec![Role::Physical, Role::Bond]);
        p.unitary(hadamard(), vec![0], "h");
        let cnot = Mat::from_real(4, 4, &[1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 0., 1., 0., 0., 1., 0.]);
        p.unitary(cnot, vec![0, 1], "cx");
        p.measure(0, Axis::Z, "a");
        p.reset(0);
        p.measure(0, Axis::Z, "after_reset");
        p.postselect(1, 0, "bond");
        let t = run_shots(&p, 2000, 3).unwrap();
        for s in 0..2000 {
            assert_eq!(t.bit(s, 1), 0);
            assert_eq!(t.bit(s, 0), t.bit(s, 2));
            assert_eq!(t.accepted[s], t.bit(s, 2) == 0);
        }
        let (rate, err) = t.acceptance_rate();
        assert!((rate - 0.5).abs() < 5.0 * err);
        let ex = run_shots_with(&p, 2000, 3, Backend::ExactSampled).unwrap();
        assert!((ex.acceptance_rate().0 - 0.5).abs() < 0.05);
        assert!(matches!(
            estimate(&ShotTable::new(&p, 0, 0), &Estimator::constant(1.0)),
            Err(Error::NoAcceptedShots)
        ));
    }

    #[test]
    fn reset_keeps_other_reduced_state() {
        // entangled pair plus a spectator in |+⟩
        let mut sv = Statevector::zero(3);
        sv.apply(&hadamard(), &[0]);
        sv.apply(&hadamard(), &[2]);
        let before = sv.prob_one(2);
        for outcome in [0u8, 1] {
            let mut b = sv.clone();
            b.collapse(0, outcome).unwrap();
            if outcome == 1 {
                b.flip(0);
            }
            assert_eq!(b.prob_one(0), 0.0);
            assert!((b.prob_one(2) - before).abs() < 1e-15);
        }
    }

    #[test]
    fn validation_errors() {
        let mut p = GateProgram::new(vec![Role::Physical]);
        p.measure(0, Axis::Z, "k");
        p.measure(0, Axis::Z, "k");
        assert!(matches!(p.validate(), Err(Error::Program(_))));
        let mut q = GateProgram::new(vec![Role::Physical]);
        q.unitary(Mat::from_real(2, 2, &[1.0, 1.0, 0.0, 1.0]), vec![0], "bad");
        assert!(q.validate().is_err());
        let mut r = GateProgram::new(vec![Role::Physical]);
        r.measure(0, Axis::Z, "k");
        assert!(exact_state(&r).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let mut p = GateProgram::new(vec![Role::Physical, Role::Ancilla]);
        p.unitary(basis_rotation(Axis::Y), vec![1], "v");
        p.measure(1, Axis::X, "m");
        p.reset(1);
        p.postselect(0, 0, "t");
        let s = serde_json::to_string(&p.to_json()).unwrap();
        let back = GateProgram::from_json(&serde_json::from_str(&s).unwrap()).unwrap();
        assert_eq!(p, back);
    }

    fn random_unitary(n: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::random_normal(n, n, rng).qr().0
    }

    #[test]
    fn fusion_matches_unfused_evolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = GateProgram::new(vec![Role::Physical; 9]);
        for i in 0..30 {
            let a = rng.random_range(0..9);
            let b = (a + rng.random_range(1..9)) % 9;
            p.unitary(random_unitary(4, &mut rng), vec![a, b], format!("g{i}"));
        }
        let direct = exact_state(&p).unwrap();
        let mut sv = Statevector::zero(9);
        let mut s = Scratch::new(FUSE_MAX);
        for st in fuse(&p) {
            if let Step::Apply(b) = st {
                b.apply(&mut sv.amps, &mut s);
            }
        }
        let diff: f64 = direct.iter().zip(&sv.amps).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    /// Total-variation distance between empirical and exact outcome
    /// distributions on a 4-qubit register.
    fn tv_distance(p: &GateProgram, shots: usize, seed: u64, backend: Backend) -> f64 {
        let leaves = exact_distribution(p).unwrap();
        let t = run_shots_with(p, shots, seed, backend).unwrap();
        let mut exact = [0.0; 16];
        for l in &leaves {
            exact[l.bits[0] as usize] += l.prob;
        }
        let mut emp = [0.0; 16];
        for s in 0..shots {
            let idx: usize = (0..4).map(|k| (t.bit(s, k) as usize) << k).sum();
            emp[idx] += 1.0 / shots as f64;
        }
        0.5 * exact.iter().zip(&emp).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    fn random_program(seed: u64) -> GateProgram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = GateProgram::new(vec![Role::Physical; 4]);
        p.unitary(random_unitary(16, &mut rng), vec![0, 1, 2, 3], "u");
        let bases = [Axis::X, Axis::Y, Axis::Z];
        for q in 0..4 {
            p.measure(q, bases[rng.random_range(0..3)], format!("m{q}"));
        }
        p
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn born_rule_convergence(seed in 0u64..1000) {
            let p = random_program(seed);
            let total: f64 = exact_distribution(&p).unwrap().iter().map(|l| l.prob).sum();
            prop_assert!((total - 1.0).abs() < 1e-10);
            let n = 20_000;
            for backend in [Backend::Statevector, Backend::ExactSampled] {
                let tv = tv_distance(&p, n, seed, backend);
                prop_assert!(tv < 4.0 / (n as f64).sqrt(), "{backend:?}: {tv}");
            }
        }

        #[test]
        fn single_qubit_unitaries_preserve_norm(a in -6.0f64..6.0, b in -6.0f64..6.0) {
            let g = crate::compiler::su2(&[a, b, 0.3]);
            let mut sv = Statevector::zero(3);
            sv.apply(&hadamard(), &[1]);
            sv.apply(&g, &[2]);
            sv.apply(&g.kron(&g), &[0, 2]);
            prop_assert!((sv.norm_sqr() - 1.0).abs() < 1e-12);
        }
    }
}
