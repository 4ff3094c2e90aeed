use serde::{Deserialize, Serialize};

use crate::linalg::{c, re, Mat, ZERO};
use crate::{Error, Result};

/// Bohr magneton in meV/T.
pub const MU_B: f64 = 5.7883818060e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Spin {
    #[serde(rename = "1/2")]
    Half,
    #[serde(rename = "3/2")]
    ThreeHalves,
}

impl Spin {
    pub fn from_f64(s: f64) -> Result<Spin> {
        if (s - 0.5).abs() < 1e-12 {
            Ok(Spin::Half)
        } else if (s - 1.5).abs() < 1e-12 {
            Ok(Spin::ThreeHalves)
        } else {
            Err(Error::UnsupportedSpin(s))
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Spin::Half => 0.5,
            Spin::ThreeHalves => 1.5,
        }
    }

    /// Local Hilbert-space dimension 2S+1.
    pub fn dim(self) -> usize {
        match self {
            Spin::Half => 2,
            Spin::ThreeHalves => 4,
        }
    }

    /// Number of qubits encoding one site.
    pub fn qubits(self) -> usize {
        match self {
            Spin::Half => 1,
            Spin::ThreeHalves => 2,
        }
    }

    pub fn from_dim(d: usize) -> Result<Spin> {
        match d {
            2 => Ok(Spin::Half),
            4 => Ok(Spin::ThreeHalves),
            _ => Err(Error::UnsupportedSpin((d as f64 - 1.0) / 2.0)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Axis> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(Error::Config(format!("unknown axis {other:?}"))),
        }
    }
}

/// Parameters of the ring Hamiltonian
/// `H = J Σ S_i·S_{i+1} + D Σ (S^z_i)² + g μ_B Σ B·S_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    #[serde(rename = "L")]
    pub l: usize,
    pub spin: Spin,
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "D", default)]
    pub d: f64,
    #[serde(default = "default_g")]
    pub g: f64,
    #[serde(rename = "B", default)]
    pub b: [f64; 3],
    #[serde(default = "default_mu_b")]
    pub mu_b: f64,
    #[serde(default = "default_true")]
    pub periodic: bool,
}

fn default_g() -> f64 {
    2.0
}
fn default_mu_b() -> f64 {
    MU_B
}
fn default_true() -> bool {
    true
}

impl ModelParams {
    pub fn heisenberg_ring(l: usize, spin: Spin, j: f64) -> Self {
        ModelParams {
            l,
            spin,
            j,
            d: 0.0,
            g: 2.0,
            b: [0.0; 3],
            mu_b: MU_B,
            periodic: true,
        }
    }

    /// Cr₈ ring parameters: spin 3/2, J=1.46 meV, D=−0.038 meV, g=1.98.
    pub fn cr8() -> Self {
        ModelParams {
            l: 8,
            spin: Spin::ThreeHalves,
            j: 1.46,
            d: -0.038,
            g: 1.98,
            b: [0.0; 3],
            mu_b: MU_B,
            periodic: true,
        }
    }

    pub fn with_field(mut self, b: [f64; 3]) -> Self {
        self.b = b;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.l < 2 {
            return Err(Error::InvalidModel(format!("L must be at least 2, got {}", self.l)));
        }
        for (name, v) in [("J", self.j), ("D", self.d), ("g", self.g), ("mu_B", self.mu_b)] {
            if !v.is_finite() {
                return Err(Error::InvalidModel(format!("{name} is not finite")));
            }
        }
        if self.b.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidModel("B is not finite".into()));
        }
        Ok(())
    }

    pub fn phys_dim(&self) -> usize {
        self.spin.dim()
    }

    /// Zeeman vector `g μ_B B` in meV.
    pub fn zeeman(&self) -> [f64; 3] {
        let s = self.g * self.mu_b;
        [s * self.b[0], s * self.b[1], s * self.b[2]]
    }

    /// Nearest-neighbour bonds. A two-site ring has a single bond.
    pub fn bonds(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<(usize, usize)> = (0..self.l - 1).map(|i| (i, i + 1)).collect();
        if self.periodic && self.l > 2 {
            v.push((self.l - 1, 0));
        }
        v
    }

    /// True when the Hamiltonian commutes with total S^z.
    pub fn conserves_sz(&self) -> bool {
        self.b[0] == 0.0 && self.b[1] == 0.0
    }

    /// True when all matrix elements are real in the S^z basis.
    pub fn is_real(&self) -> bool {
        self.b[1] == 0.0
    }

    /// Single-site Hamiltonian `D (S^z)² + g μ_B B·S`.
    pub fn onsite(&self) -> Mat {
        let [sx, sy, sz] = spin_matrices(self.spin);
        let h = self.zeeman();
        let mut m = sz.matmul(&sz).scale(re(self.d));
        m.add_assign_scaled(&sx, re(h[0]));
        m.add_assign_scaled(&sy, re(h[1]));
        m.add_assign_scaled(&sz, re(h[2]));
        m
    }
}

/// Spin operators in the basis `M = S, S−1, …, −S` (index 0 is the highest M).
pub fn spin_matrices(spin: Spin) -> [Mat; 3] {
    let s = spin.value();
    let d = spin.dim();
    let m = |i: usize| s - i as f64;
    // S^+ |m⟩ = sqrt(s(s+1) − m(m+1)) |m+1⟩, and |m+1⟩ has index i−1
    let splus = Mat::from_fn(d, d, |r, col| {
        if col >= 1 && r == col - 1 {
            let mm = m(col);
            re((s * (s + 1.0) - mm * (mm + 1.0)).sqrt())
        } else {
            ZERO
        }
    });
    let sminus = splus.adjoint();
    let sx = splus.add(&sminus).scale(re(0.5));
    let sy = splus.sub(&sminus).scale(c(0.0, -0.5));
    let sz = Mat::diag_real(&(0..d).map(m).collect::<Vec<_>>());
    [sx, sy, sz]
}

pub fn spin_matrix(spin: Spin, axis: Axis) -> Mat {
    let [x, y, z] = spin_matrices(spin);
    match axis {
        Axis::X => x,
        Axis::Y => y,
        Axis::Z => z,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

impl Pauli {
    pub fn matrix(self) -> Mat {
        match self {
            Pauli::I => Mat::identity(2),
            Pauli::X => Mat::from_real(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            Pauli::Y => Mat::from_vec(2, 2, vec![ZERO, c(0.0, -1.0), c(0.0, 1.0), ZERO]),
            Pauli::Z => Mat::from_real(2, 2, &[1.0, 0.0, 0.0, -1.0]),
        }
    }

    pub fn from_axis(a: Axis) -> Pauli {
        match a {
            Axis::X => Pauli::X,
            Axis::Y => Pauli::Y,
            Axis::Z => Pauli::Z,
        }
    }

    pub fn axis(self) -> Option<Axis> {
        match self {
            Pauli::I => None,
            Pauli::X => Some(Axis::X),
            Pauli::Y => Some(Axis::Y),
            Pauli::Z => Some(Axis::Z),
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Pauli::I => 'I',
            Pauli::X => 'X',
            Pauli::Y => 'Y',
            Pauli::Z => 'Z',
        }
    }
}

/// Kronecker product of a Pauli string, first factor acting on the most
/// significant qubit.
pub fn pauli_string_matrix(ps: &[Pauli]) -> Mat {
    ps.iter().fold(Mat::identity(1), |acc, p| acc.kron(&p.matrix()))
}
