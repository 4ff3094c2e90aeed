//! Neutron-scattering response `S_{αβ}(Q, ω)` and intensity `I(Q, ω)` from
//! transition energies and dipole matrix elements.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::linalg::{C64, ZERO};
use crate::model::Axis;
use crate::oracle::{exact_site_amplitudes, DenseSpectrum};
use crate::{Error, Result};

/// Neutron magnetic moment in nuclear magnetons.
pub const GAMMA_N: f64 = -1.913;
/// Classical electron radius in fm.
pub const R0_FM: f64 = 2.818;

/// `A e^{−a s²} + B e^{−b s²} + C e^{−c s²} + D`; `e` is kept as metadata.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialFit {
    #[serde(rename = "A")]
    pub a_amp: f64,
    pub a: f64,
    #[serde(rename = "B")]
    pub b_amp: f64,
    pub b: f64,
    #[serde(rename = "C")]
    pub c_amp: f64,
    pub c: f64,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(default)]
    pub e: f64,
}

impl RadialFit {
    pub fn eval(&self, s: f64) -> f64 {
        let s2 = s * s;
        self.a_amp * (-self.a * s2).exp() + self.b_amp * (-self.b * s2).exp() + self.c_amp * (-self.c * s2).exp() + self.d
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormFactorParams {
    pub j0: RadialFit,
    pub j2: RadialFit,
    pub g: f64,
}

impl FormFactorParams {
    /// Cr³⁺ constants.
    pub fn cr3(g: f64) -> Self {
        FormFactorParams {
            j0: RadialFit {
                a_amp: -0.3094,
                a: 0.0274,
                b_amp: 0.3680,
                b: 17.0355,
                c_amp: 0.6559,
                c: 6.5236,
                d: 0.2856,
                e: 0.0436,
            },
            j2: RadialFit {
                a_amp: 1.6262,
                a: 15.0656,
                b_amp: 2.0618,
                b: 6.2842,
                c_amp: 0.5281,
                c: 2.3680,
                d: 0.0023,
                e: 0.0263,
            },
            g,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let j00 = self.j0.eval(0.0);
        if (j00 - 1.0).abs() > 2e-3 {
            return Err(Error::Config(format!("<j0>(0) = {j00}, expected 1 within 2e-3")));
        }
        if !(self.g.is_finite() && self.g != 0.0) {
            return Err(Error::Config("form factor g must be finite and nonzero".into()));
        }
        Ok(())
    }

    pub fn j0(&self, s: f64) -> f64 {
        self.j0.eval(s)
    }

    pub fn j2(&self, s: f64) -> f64 {
        s * s * self.j2.eval(s)
    }
}

/// `F = ⟨j₀⟩ + (2−g)/g ⟨j₂⟩` at `s = Q/4π`, `Q` in Å⁻¹.
pub fn form_factor(q_mag: f64, params: &FormFactorParams) -> f64 {
    let s = q_mag / (4.0 * PI);
    params.j0(s) + (2.0 - params.g) / params.g * params.j2(s)
}

pub type Vec3 = [f64; 3];
pub type Rot3 = [[f64; 3]; 3];

pub const IDENTITY: Rot3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn rotation_z(theta: f64) -> Rot3 {
    let (s, c) = theta.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn rotate(r: &Rot3, v: &Vec3) -> Vec3 {
    [0, 1, 2].map(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2])
}

fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn det3(r: &Rot3) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0]) + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

/// Ion positions (Å) and the orientations the intensity is averaged over.
/// An orientation rotates the positions; spin components stay in the lab
/// frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub positions: Vec<Vec3>,
    pub orientations: Vec<Rot3>,
}

impl Geometry {
    /// Regular `l`-gon of the given radius in the x–y plane, ion 0 on +x.
    pub fn ring(l: usize, radius: f64) -> Self {
        let positions = (0..l)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / l as f64;
                [radius * t.cos(), radius * t.sin(), 0.0]
            })
            .collect();
        Geometry {
            positions,
            orientations: vec![IDENTITY],
        }
    }

    /// Octagon of radius 2.95 Å with a second orientation rotated by π/8
    /// about z.
    pub fn cr8_default() -> Self {
        Geometry::ring(8, 2.95).with_orientations(vec![IDENTITY, rotation_z(PI / 8.0)])
    }

    pub fn with_orientations(mut self, o: Vec<Rot3>) -> Self {
        self.orientations = o;
        self
    }

    pub fn translated(&self, t: Vec3) -> Self {
        let positions = self.positions.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect();
        Geometry {
            positions,
            orientations: self.orientations.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.orientations.is_empty() {
            return Err(Error::Config("geometry needs at least one orientation".into()));
        }
        for r in &self.orientations {
            let mut err = (det3(r) - 1.0).abs();
            for i in 0..3 {
                for j in 0..3 {
                    let g: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                    err = err.max((g - if i == j { 1.0 } else { 0.0 }).abs());
                }
            }
            if err > 1e-9 {
                return Err(Error::Config(format!("orientation is not a proper rotation (error {err:.1e})")));
            }
        }
        Ok(())
    }

    fn oriented(&self, r: &Rot3) -> Vec<Vec3> {
        self.positions.iter().map(|p| rotate(r, p)).collect()
    }
}

/// One excitation `|ψ_p⟩` with `O^{αβ}_{ij;p} = ⟨ψ_0|S^α_i|ψ_p⟩⟨ψ_p|S^β_j|ψ_0⟩`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub p: usize,
    pub delta_e: f64,
    /// Indexed `((α·3 + β)·L + i)·L + j`; `None` where not measured.
    pub elements: Vec<Option<C64>>,
}

impl Transition {
    pub fn new(p: usize, delta_e: f64, l: usize) -> Self {
        Transition {
            p,
            delta_e,
            elements: vec![None; 9 * l * l],
        }
    }

    fn l(&self) -> usize {
        ((self.elements.len() / 9) as f64).sqrt().round() as usize
    }

    fn idx(&self, i: usize, j: usize, a: Axis, b: Axis) -> usize {
        let l = self.l();
        ((a.index() * 3 + b.index()) * l + i) * l + j
    }

    pub fn set(&mut self, i: usize, j: usize, a: Axis, b: Axis, v: C64) {
        let k = self.idx(i, j, a, b);
        self.elements[k] = Some(v);
    }

    pub fn get(&self, i: usize, j: usize, a: Axis, b: Axis) -> Option<C64> {
        self.elements[self.idx(i, j, a, b)]
    }

    fn require(&self, i: usize, j: usize, a: Axis, b: Axis) -> Result<C64> {
        self.get(i, j, a, b)
            .ok_or_else(|| Error::Missing(format!("O^{}{}_{{{i},{j};{}}}", a.label(), b.label(), self.p)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionSet {
    pub l: usize,
    pub transitions: Vec<Transition>,
}

impl TransitionSet {
    pub fn new(l: usize) -> Self {
        TransitionSet { l, transitions: Vec::new() }
    }

    /// Keeps transitions sorted by energy.
    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.elements.len() != 9 * self.l * self.l {
            return Err(Error::ShapeMismatch(format!("transition table for L={} expected", self.l)));
        }
        if t.delta_e < 0.0 {
            return Err(Error::Config(format!("negative excitation energy {}", t.delta_e)));
        }
        let at = self.transitions.partition_point(|x| x.delta_e <= t.delta_e);
        self.transitions.insert(at, t);
        Ok(())
    }

    /// Exact elements for eigenstates `1..n` and the requested channels.
    pub fn from_spectrum(spec: &DenseSpectrum, channels: &[(Axis, Axis)]) -> Result<Self> {
        let l = spec.params.l;
        let mut set = TransitionSet::new(l);
        for p in 1..spec.len() {
            // ⟨ψ_p|S^α_i|ψ_0⟩ per axis
            let amps: Vec<Vec<C64>> = Axis::ALL.iter().map(|&a| exact_site_amplitudes(spec, p, a)).collect();
            let mut t = Transition::new(p, (spec.energies[p] - spec.energies[0]).max(0.0), l);
            for &(a, b) in channels {
                for i in 0..l {
                    for j in 0..l {
                        t.set(i, j, a, b, amps[a.index()][i].conj() * amps[b.index()][j]);
                    }
                }
            }
            set.push(t)?;
        }
        Ok(set)
    }

    /// Channels with every `i ≥ j` element present in every transition.
    pub fn channels(&self) -> Vec<(Axis, Axis)> {
        let mut out = Vec::new();
        for a in Axis::ALL {
            for b in Axis::ALL {
                let full = self
                    .transitions
                    .iter()
                    .all(|t| (0..self.l).all(|i| (0..=i).all(|j| t.get(i, j, a, b).is_some())));
                if full && !self.transitions.is_empty() {
                    out.push((a, b));
                }
            }
        }
        out
    }
}

/// Unit-area Gaussian of the given FWHM (meV) standing in for `δ(ΔE − ħω)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Broadening {
    pub fwhm: f64,
}

impl Default for Broadening {
    fn default() -> Self {
        Broadening { fwhm: 0.05 }
    }
}

impl Broadening {
    pub fn sigma(&self) -> f64 {
        self.fwhm / (8.0 * 2f64.ln()).sqrt()
    }

    pub fn kernel(&self, x: f64) -> f64 {
        let s = self.sigma();
        (-(x * x) / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt())
    }
}

pub type Tensor33 = [[C64; 3]; 3];

/// `Σ_{i≥j} cos(Q·r_ij) O^{αβ}_{ij;p}` for each transition and requested
/// channel; unrequested channels are zero.
pub fn line_weights(ts: &TransitionSet, positions: &[Vec3], q: Vec3, channels: &[(Axis, Axis)]) -> Result<Vec<Tensor33>> {
    if positions.len() != ts.l {
        return Err(Error::ShapeMismatch(format!("{} ion positions for L={}", positions.len(), ts.l)));
    }
    let l = ts.l;
    let mut cosines = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..=i {
            let r = [0, 1, 2].map(|k| positions[i][k] - positions[j][k]);
            cosines[i * l + j] = dot3(&q, &r).cos();
        }
    }
    ts.transitions
        .iter()
        .map(|t| {
            let mut w = [[ZERO; 3]; 3];
            for &(a, b) in channels {
                let mut acc = ZERO;
                for i in 0..l {
                    for j in 0..=i {
                        acc += t.require(i, j, a, b)? * cosines[i * l + j];
                    }
                }
                w[a.index()][b.index()] = acc;
            }
            Ok(w)
        })
        .collect()
}

/// `S_{αβ}(Q, ω)` on `omega_grid`.
pub fn response(
    ts: &TransitionSet,
    positions: &[Vec3],
    q: Vec3,
    omega_grid: &[f64],
    broadening: Broadening,
    channels: &[(Axis, Axis)],
) -> Result<Vec<Tensor33>> {
    let weights = line_weights(ts, positions, q, channels)?;
    Ok(omega_grid
        .iter()
        .map(|&w| {
            let mut s = [[ZERO; 3]; 3];
            for (t, wt) in ts.transitions.iter().zip(&weights) {
                let k = broadening.kernel(t.delta_e - w);
                for a in 0..3 {
                    for b in 0..3 {
                        s[a][b] += wt[a][b] * k;
                    }
                }
            }
            s
        })
        .collect())
}

/// `δ_{αβ} − Q̂_α Q̂_β`, or its isotropic average `(2/3) δ_{αβ}` at Q = 0.
pub fn polarization(q: Vec3) -> [[f64; 3]; 3] {
    let n = dot3(&q, &q).sqrt();
    let mut p = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            p[a][b] = if n < 1e-12 {
                if a == b {
                    2.0 / 3.0
                } else {
                    0.0
                }
            } else {
                (if a == b { 1.0 } else { 0.0 }) - q[a] * q[b] / (n * n)
            };
        }
    }
    p
}

/// Neutron energy (meV) to wavevector (Å⁻¹).
pub fn neutron_k(e_mev: f64) -> f64 {
    (e_mev / 2.0721246).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityOptions {
    pub broadening: Broadening,
    /// Multiply by `(γ r₀)² k_f/k_i` (fm²).
    pub include_prefactor: bool,
    /// Incident energy for `k_f/k_i`; treated as 1 when absent.
    pub incident_energy: Option<f64>,
}

impl Default for IntensityOptions {
    fn default() -> Self {
        IntensityOptions {
            broadening: Broadening::default(),
            include_prefactor: false,
            incident_energy: None,
        }
    }
}

impl IntensityOptions {
    fn prefactor(&self, omega: f64) -> f64 {
        if !self.include_prefactor {
            return 1.0;
        }
        let ratio = match self.incident_energy {
            Some(ei) if omega < ei => neutron_k(ei - omega) / neutron_k(ei),
            Some(_) => 0.0,
            None => 1.0,
        };
        (GAMMA_N * R0_FM).powi(2) * ratio
    }
}

/// Momentum transfers at which the intensity is evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QGrid {
    Vectors(Vec<Vec3>),
    /// Average over `directions` Fibonacci-sphere directions per magnitude.
    Powder {
        magnitudes: Vec<f64>,
        directions: usize,
    },
}

fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            [r * t.cos(), r * t.sin(), z]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralLine {
    pub p: usize,
    pub delta_e: f64,
    /// ω-integrated intensity at each Q point.
    pub weight: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumGrid {
    pub q_mag: Vec<f64>,
    /// Direction-resolved points; `None` for powder averages.
    pub q_vec: Vec<Option<Vec3>>,
    pub omega: Vec<f64>,
    /// Row per Q point.
    pub intensity: Vec<Vec<f64>>,
    pub lines: Vec<SpectralLine>,
}

impl SpectrumGrid {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["q", "qx", "qy", "qz", "omega", "intensity"]).map_err(csv_err)?;
        for (iq, row) in self.intensity.iter().enumerate() {
            let v = self.q_vec[iq]
                .map(|v| v.map(|x| x.to_string()))
                .unwrap_or_else(|| [String::new(), String::new(), String::new()]);
            for (iw, x) in row.iter().enumerate() {
                w.write_record([
                    self.q_mag[iq].to_string(),
                    v[0].clone(),
                    v[1].clone(),
                    v[2].clone(),
                    self.omega[iw].to_string(),
                    x.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).map_err(|e| Error::Io(std::io::Error::other(e)))
    }

    pub fn lines_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.lines)?)
    }

    /// Trapezoid ω-integral per Q point.
    pub fn integrated(&self) -> Vec<f64> {
        self.intensity.iter().map(|row| trapezoid(&self.omega, row)).collect()
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.into())
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1])).sum()
}

/// Uniform grid of `n` points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Coefficients `c` with line weight `Σ c · Re O^{αβ}_{ij;p}`, averaged over
/// orientations and the given Q vectors; indexed `(channel, i, j ≤ i)`.
fn element_coefficients(l: usize, geo: &Geometry, ff: &FormFactorParams, qs: &[Vec3], channels: &[(Axis, Axis)]) -> Vec<f64> {
    let pairs = l * (l + 1) / 2;
    let mut c = vec![0.0; channels.len() * pairs];
    let norm = (qs.len() * geo.orientations.len()) as f64;
    for q in qs {
        let f = form_factor(dot3(q, q).sqrt(), ff);
        let scale = (ff.g * f / 2.0).powi(2) / norm;
        let pol = polarization(*q);
        for r in &geo.orientations {
            let pos = geo.oriented(r);
            let mut k = 0;
            let mut cosines = vec![0.0; pairs];
            for i in 0..l {
                for j in 0..=i {
                    let rij = [0, 1, 2].map(|m| pos[i][m] - pos[j][m]);
                    cosines[k] = dot3(q, &rij).cos();
                    k += 1;
                }
            }
            for (ch, &(a, b)) in channels.iter().enumerate() {
                let w = scale * pol[a.index()][b.index()];
                for (x, cs) in c[ch * pairs..(ch + 1) * pairs].iter_mut().zip(&cosines) {
                    *x += w * cs;
                }
            }
        }
    }
    c
}

/// `I(Q, ω)` over all channels present in `ts`. Only the real part of the
/// contracted response is kept.
pub fn intensity(
    ts: &TransitionSet,
    geo: &Geometry,
    ff: &FormFactorParams,
    q_grid: &QGrid,
    omega_grid: &[f64],
    opts: &IntensityOptions,
) -> Result<SpectrumGrid> {
    Ok(intensity_with_errors(ts, None, geo, ff, q_grid, omega_grid, opts)?.0)
}

/// As [`intensity`], also propagating independent element errors:
/// `variances` holds `Var(Re O)` in the real part of each element.
pub fn intensity_with_errors(
    ts: &TransitionSet,
    variances: Option<&TransitionSet>,
    geo: &Geometry,
    ff: &FormFactorParams,
    q_grid: &QGrid,
    omega_grid: &[f64],
    opts: &IntensityOptions,
) -> Result<(SpectrumGrid, Option<Vec<Vec<f64>>>)> {
    geo.validate()?;
    if geo.positions.len() != ts.l {
        return Err(Error::ShapeMismatch(format!("{} ion positions for L={}", geo.positions.len(), ts.l)));
    }
    let channels = ts.channels();
    if channels.is_empty() && !ts.transitions.is_empty() {
        return Err(Error::Missing("no complete (α, β) channel in transition set".into()));
    }
    if let Some(v) = variances {
        if v.transitions.len() != ts.transitions.len() || v.l != ts.l {
            return Err(Error::ShapeMismatch("variance table does not match transitions".into()));
        }
    }
    let points: Vec<(f64, Option<Vec3>, Vec<Vec3>)> = match q_grid {
        QGrid::Vectors(v) => v.iter().map(|q| (dot3(q, q).sqrt(), Some(*q), vec![*q])).collect(),
        QGrid::Powder { magnitudes, directions } => {
            let dirs = fibonacci_sphere((*directions).max(1));
            magnitudes.iter().map(|&m| (m, None, dirs.iter().map(|d| d.map(|x| x * m)).collect())).collect()
        }
    };
    if points.iter().any(|(m, _, _)| *m < 1e-12) {
        log::info!("Q = 0 in grid: using the isotropic polarization average 2/3");
    }
    let l = ts.l;
    // (line weight, line variance) per Q point and transition
    let mut per_q: Vec<Vec<(f64, f64)>> = Vec::with_capacity(points.len());
    for (_, _, qs) in &points {
        let coef = element_coefficients(l, geo, ff, qs, &channels);
        let mut row = Vec::with_capacity(ts.transitions.len());
        for (tk, t) in ts.transitions.iter().enumerate() {
            let (mut w, mut var) = (0.0, 0.0);
            let mut k = 0;
            for &(a, b) in &channels {
                for i in 0..l {
                    for j in 0..=i {
                        w += coef[k] * t.require(i, j, a, b)?.re;
                        if let Some(v) = variances {
                            var += coef[k] * coef[k] * v.transitions[tk].require(i, j, a, b)?.re;
                        }
                        k += 1;
                    }
                }
            }
            row.push((w, var));
        }
        per_q.push(row);
    }
    let intensity = per_q
        .iter()
        .map(|ws| {
            omega_grid
                .iter()
                .map(|&w| {
                    let s: f64 = ts.transitions.iter().zip(ws).map(|(t, x)| x.0 * opts.broadening.kernel(t.delta_e - w)).sum();
                    s * opts.prefactor(w)
                })
                .collect()
        })
        .collect();
    let errors = variances.map(|_| {
        per_q
            .iter()
            .map(|ws| {
                omega_grid
                    .iter()
                    .map(|&w| {
                        // scaled quadrature
                        let terms: Vec<f64> = ts
                            .transitions
                            .iter()
                            .zip(ws)
                            .map(|(t, x)| x.1.max(0.0).sqrt() * opts.broadening.kernel(t.delta_e - w))
                            .collect();
                        let m = terms.iter().cloned().fold(0.0, f64::max);
                        if m == 0.0 {
                            return 0.0;
                        }
                        m * terms.iter().map(|x| (x / m).powi(2)).sum::<f64>().sqrt() * opts.prefactor(w)
                    })
                    .collect()
            })
            .collect()
    });
    let lines = ts
        .transitions
        .iter()
        .enumerate()
        .map(|(k, t)| SpectralLine {
            p: t.p,
            delta_e: t.delta_e,
            weight: per_q.iter().map(|ws| ws[k].0 * opts.prefactor(t.delta_e)).collect(),
        })
        .collect();
    let grid = SpectrumGrid {
        q_mag: points.iter().map(|p| p.0).collect(),
        q_vec: points.iter().map(|p| p.1).collect(),
        omega: omega_grid.to_vec(),
        intensity,
        lines,
    };
    Ok((grid, errors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::re;
    use crate::model::{ModelParams, Spin};
    use crate::oracle::{build_hamiltonian, exact_dipole_elements, low_eigenpairs, Method};
    use proptest::prelude::*;

    const DIAG: [(Axis, Axis); 3] = [(Axis::X, Axis::X), (Axis::Y, Axis::Y), (Axis::Z, Axis::Z)];

    fn all_channels() -> Vec<(Axis, Axis)> {
        Axis::ALL.iter().flat_map(|&a| Axis::ALL.iter().map(move |&b| (a, b))).collect()
    }

    fn spectrum(p: &ModelParams, n: usize) -> DenseSpectrum {
        low_eigenpairs(&build_hamiltonian(p).unwrap(), n, Method::Dense).unwrap()
    }

    #[test]
    fn form_factor_values() {
        let ff = FormFactorParams::cr3(1.98);
        ff.validate().unwrap();
        assert!((form_factor(0.0, &ff) - 1.0001).abs() < 1e-12);
        assert_eq!(ff.j2(0.0), 0.0);
        let g2 = FormFactorParams::cr3(2.0);
        for q in [0.3, 1.7, 4.0] {
            assert_eq!(form_factor(q, &g2), g2.j0(q / (4.0 * PI)));
        }
        let s = linspace(0.0, 0.5, 101);
        assert!(s.windows(2).all(|w| ff.j0(w[1]) < ff.j0(w[0])));
        let mut bad = ff;
        bad.j0.d = 0.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn broadening_is_normalized() {
        for fwhm in [0.05, 0.1] {
            let b = Broadening { fwhm };
            let x = linspace(-2.0, 2.0, 8001);
            let y: Vec<f64> = x.iter().map(|&v| b.kernel(v)).collect();
            assert!((trapezoid(&x, &y) - 1.0).abs() < 1e-10);
            // half maximum at ±FWHM/2
            assert!((b.kernel(fwhm / 2.0) / b.kernel(0.0) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn polarization_projector() {
        let p = polarization([0.0, 0.0, 2.0]);
        assert_eq!(p[2][2], 0.0);
        assert_eq!(p[0][0], 1.0);
        let p0 = polarization([0.0; 3]);
        assert_eq!(p0, [[2.0 / 3.0, 0.0, 0.0], [0.0, 2.0 / 3.0, 0.0], [0.0, 0.0, 2.0 / 3.0]]);
        let q = [0.3, -1.2, 0.7];
        let p = polarization(q);
        let tr: f64 = (0..3).map(|a| p[a][a]).sum();
        assert!((tr - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_transition_at_zero_q_resums() {
        let p = ModelParams::heisenberg_ring(4, Spin::Half, 1.0).with_field([0.0, 0.0, 0.5]);
        let spec = spectrum(&p, 6);
        let ts = TransitionSet::from_spectrum(&spec, &DIAG).unwrap();
        let geo = Geometry::ring(4, 3.0);
        let w = line_weights(&ts, &geo.positions, [0.0; 3], &DIAG).unwrap();
        for (t, wt) in ts.transitions.iter().zip(&w) {
            for a in Axis::ALL {
                let amps = exact_site_amplitudes(&spec, t.p, a);
                let total: C64 = amps.iter().sum();
                let full = total.norm_sqr();
                // i≥j keeps the diagonal and one copy of each off-diagonal pair
                let diag: f64 = amps.iter().map(|z| z.norm_sqr()).sum();
                let half = 0.5 * (full + diag);
                assert!((wt[a.index()][a.index()].re - half).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sum_rule_and_translation() {
        let p = ModelParams::heisenberg_ring(6, Spin::Half, 1.0);
        let spec = spectrum(&p, 10);
        let ts = TransitionSet::from_spectrum(&spec, &DIAG).unwrap();
        let geo = Geometry::ring(6, 2.5).with_orientations(vec![IDENTITY, rotation_z(0.4)]);
        let ff = FormFactorParams::cr3(2.0);
        let omega = linspace(-1.0, 5.0, 6001);
        let qs = vec![[0.4, 0.1, 0.0], [1.3, -0.6, 0.2]];
        let grid = intensity(&ts, &geo, &ff, &QGrid::Vectors(qs.clone()), &omega, &IntensityOptions::default()).unwrap();
        let integrated = grid.integrated();
        for (iq, q) in qs.iter().enumerate() {
            let stat: f64 = grid.lines.iter().map(|l| l.weight[iq]).sum();
            assert!((integrated[iq] - stat).abs() <= 1e-6 * stat.abs(), "{} vs {stat}", integrated[iq]);
            // independent static sum from the oracle elements
            let pol = polarization(*q);
            let f = form_factor(dot3(q, q).sqrt(), &ff);
            let mut direct = 0.0;
            for r in &geo.orientations {
                let pos = geo.oriented(r);
                for t in 1..spec.len() {
                    for a in Axis::ALL {
                        for i in 0..6 {
                            for j in 0..=i {
                                let rij = [0, 1, 2].map(|k| pos[i][k] - pos[j][k]);
                                let o = exact_dipole_elements(&spec, t, i, j, a, a).unwrap();
                                direct += pol[a.index()][a.index()] * dot3(q, &rij).cos() * o.re;
                            }
                        }
                    }
                }
            }
            direct *= (ff.g * f / 2.0).powi(2) / 2.0;
            assert!((stat - direct).abs() < 1e-10 * direct.abs().max(1.0));
        }
        let moved = intensity(
            &ts,
            &geo.translated([1.0, -7.0, 0.3]),
            &ff,
            &QGrid::Vectors(qs),
            &omega,
            &IntensityOptions::default(),
        )
        .unwrap();
        for (a, b) in grid.intensity.iter().flatten().zip(moved.intensity.iter().flatten()) {
            assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
        }
        let wide = IntensityOptions {
            broadening: Broadening { fwhm: 0.1 },
            ..Default::default()
        };
        let g2 = intensity(&ts, &geo, &ff, &QGrid::Vectors(vec![[0.4, 0.1, 0.0]]), &omega, &wide).unwrap();
        assert!((g2.integrated()[0] - integrated[0]).abs() < 1e-6 * integrated[0]);
    }

    #[test]
    fn zero_field_off_diagonal_channels_vanish() {
        let p = ModelParams::heisenberg_ring(4, Spin::Half, 1.0);
        let spec = spectrum(&p, 16);
        let all = all_channels();
        let ts = TransitionSet::from_spectrum(&spec, &all).unwrap();
        let geo = Geometry::ring(4, 3.0);
        for q in [[0.3, 0.9, 0.0], [1.1, 0.2, -0.5]] {
            let w = line_weights(&ts, &geo.positions, q, &all).unwrap();
            // degenerate multiplets: sum the channel over each energy level
            let mut levels: Vec<(f64, Tensor33)> = Vec::new();
            for (t, wt) in ts.transitions.iter().zip(&w) {
                match levels.last_mut() {
                    Some((e, acc)) if (t.delta_e - *e).abs() < 1e-8 => {
                        for a in 0..3 {
                            for b in 0..3 {
                                acc[a][b] += wt[a][b];
                            }
                        }
                    }
                    _ => levels.push((t.delta_e, *wt)),
                }
            }
            for (_, acc) in levels {
                for a in 0..3 {
                    for b in 0..3 {
                        if a != b {
                            assert!(acc[a][b].norm() < 1e-9, "{a}{b}: {}", acc[a][b]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn identity_orientation_averaging_is_idempotent() {
        let p = ModelParams::heisenberg_ring(4, Spin::Half, 1.0);
        let ts = TransitionSet::from_spectrum(&spectrum(&p, 5), &DIAG).unwrap();
        let ff = FormFactorParams::cr3(2.0);
        let omega = linspace(0.0, 3.0, 61);
        let q = QGrid::Vectors(vec![[0.7, 0.2, 0.0]]);
        let one = intensity(&ts, &Geometry::ring(4, 2.0), &ff, &q, &omega, &IntensityOptions::default()).unwrap();
        let three = intensity(
            &ts,
            &Geometry::ring(4, 2.0).with_orientations(vec![IDENTITY; 3]),
            &ff,
            &q,
            &omega,
            &IntensityOptions::default(),
        )
        .unwrap();
        for (a, b) in one.intensity[0].iter().zip(&three.intensity[0]) {
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn missing_elements_and_bad_geometry() {
        let mut ts = TransitionSet::new(2);
        let mut t = Transition::new(1, 1.0, 2);
        t.set(0, 0, Axis::X, Axis::X, re(0.25));
        ts.push(t).unwrap();
        let err = line_weights(&ts, &Geometry::ring(2, 1.0).positions, [1.0, 0.0, 0.0], &[(Axis::X, Axis::X)]);
        assert!(matches!(err, Err(Error::Missing(_))));
        let geo = Geometry::ring(2, 1.0).with_orientations(vec![[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]]]);
        assert!(geo.validate().is_err());
        assert!(ts.push(Transition::new(2, -0.1, 2)).is_err());
    }

    #[test]
    fn csv_and_lines_output() {
        let p = ModelParams::heisenberg_ring(4, Spin::Half, 1.0);
        let ts = TransitionSet::from_spectrum(&spectrum(&p, 4), &DIAG).unwrap();
        let grid = intensity(
            &ts,
            &Geometry::ring(4, 2.0),
            &FormFactorParams::cr3(2.0),
            &QGrid::Powder {
                magnitudes: vec![0.0, 1.0],
                directions: 20,
            },
            &linspace(0.0, 2.0, 5),
            &IntensityOptions {
                include_prefactor: true,
                incident_energy: Some(10.0),
                ..Default::default()
            },
        )
        .unwrap();
        let csv = grid.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 5);
        assert!(csv.starts_with("q,qx,qy,qz,omega,intensity"));
        let lines: Vec<SpectralLine> = serde_json::from_str(&grid.lines_json().unwrap()).unwrap();
        assert_eq!(lines.len(), 3);
        assert!(lines.windows(2).all(|w| w[0].delta_e <= w[1].delta_e));
    }

    #[test]
    fn propagated_errors_match_perturbation() {
        let p = ModelParams::heisenberg_ring(4, Spin::Half, 1.0);
        let ts = TransitionSet::from_spectrum(&spectrum(&p, 4), &DIAG).unwrap();
        let mut var = ts.clone();
        for t in &mut var.transitions {
            for e in t.elements.iter_mut().flatten() {
                *e = re(0.0);
            }
        }
        // unit variance on one element: stderr equals |∂I/∂ReO|
        var.transitions[0].set(2, 1, Axis::Y, Axis::Y, re(1.0));
        let geo = Geometry::ring(4, 2.0).with_orientations(vec![IDENTITY, rotation_z(0.3)]);
        let ff = FormFactorParams::cr3(1.98);
        let q = QGrid::Vectors(vec![[0.8, 0.3, 0.1]]);
        let omega = linspace(0.0, 3.0, 31);
        let opts = IntensityOptions::default();
        let (g0, err) = intensity_with_errors(&ts, Some(&var), &geo, &ff, &q, &omega, &opts).unwrap();
        let mut bumped = ts.clone();
        let o = bumped.transitions[0].get(2, 1, Axis::Y, Axis::Y).unwrap();
        bumped.transitions[0].set(2, 1, Axis::Y, Axis::Y, o + re(1.0));
        let g1 = intensity(&bumped, &geo, &ff, &q, &omega, &opts).unwrap();
        let err = err.unwrap();
        for k in 0..omega.len() {
            let d = (g1.intensity[0][k] - g0.intensity[0][k]).abs();
            assert!((d - err[0][k]).abs() < 1e-10 * d.max(1.0), "{d} vs {}", err[0][k]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn diagonal_response_nonnegative_and_translation_invariant(
            qx in -3.0f64..3.0, qy in -3.0f64..3.0, tx in -5.0f64..5.0, ty in -5.0f64..5.0
        ) {
            let p = ModelParams::heisenberg_ring(4, Spin::Half, 1.0).with_field([0.2, 0.0, 0.3]);
            let ts = TransitionSet::from_spectrum(&spectrum(&p, 6), &DIAG).unwrap();
            let geo = Geometry::ring(4, 2.0);
            let omega = linspace(0.0, 3.0, 31);
            let s1 = response(&ts, &geo.positions, [qx, qy, 0.0], &omega, Broadening::default(), &DIAG).unwrap();
            let s2 = response(&ts, &geo.translated([tx, ty, 1.0]).positions, [qx, qy, 0.0], &omega, Broadening::default(), &DIAG).unwrap();
            for (a, b) in s1.iter().zip(&s2) {
                for k in 0..3 {
                    prop_assert!(a[k][k].re >= -1e-9);
                    prop_assert!((a[k][k] - b[k][k]).norm() < 1e-9);
                }
            }
        }
    }
}
