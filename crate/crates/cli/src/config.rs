//! Experiment configuration: TOML schema, defaults and validation.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qtn_core::compiler::{CompilerConfig, GateKind, Optimizer};
use qtn_core::dmrg::SolverConfig;
use qtn_core::protocols::JobSpec;
use qtn_core::sim::Backend;
use qtn_core::{Axis, ModelParams, Spin};

pub const BUNDLED: [(&str, &str); 3] = [
    ("spin_half_zero_field", include_str!("../configs/spin_half_zero_field.toml")),
    ("spin_half_field_B3", include_str!("../configs/spin_half_field_B3.toml")),
    ("cr8", include_str!("../configs/cr8.toml")),
];

/// Upper bound on the oracle Hilbert-space dimension.
pub const ORACLE_CAP: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    /// Global seed; every stage seed is derived from it unless set explicitly.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub model: ModelParams,
    pub solver: SolverSection,
    #[serde(default)]
    pub embedding: EmbeddingSection,
    #[serde(default)]
    pub shots: ShotsSection,
    #[serde(default)]
    pub jobs: Vec<JobSpec>,
    #[serde(default)]
    pub dipole: Option<DipoleSection>,
    #[serde(default)]
    pub spectrum: Option<SpectrumSection>,
    #[serde(default)]
    pub field_scan: Option<FieldScanSection>,
    #[serde(default)]
    pub oracle: OracleSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub chi_max: usize,
    pub n_states: usize,
    pub variance_tol: Option<f64>,
    pub penalty_weight: Option<f64>,
    pub max_sweeps: Option<usize>,
    pub energy_tol: Option<f64>,
    pub krylov_dim: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSection {
    /// Compile the embeddings into gates; exact completed unitaries otherwise.
    #[serde(default)]
    pub compile: bool,
    pub eps_c: Option<f64>,
    pub delta: Option<f64>,
    pub beam_width: Option<usize>,
    pub max_gates: Option<usize>,
    pub optimizer: Option<Optimizer>,
    pub restarts: Option<usize>,
    pub max_iters: Option<usize>,
    pub screen_iters: Option<usize>,
    pub gate_kinds: Option<Vec<GateKind>>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShotsSection {
    #[serde(default = "default_backend")]
    pub backend: Backend,
    /// Shots per basis-plan circuit of the ground-state energy estimate.
    #[serde(default = "default_energy_shots")]
    pub energy_shots: usize,
    /// Shot counts for the energy error-vs-shots curve.
    #[serde(default)]
    pub energy_curve: Vec<usize>,
}

fn default_backend() -> Backend {
    Backend::ExactSampled
}
fn default_energy_shots() -> usize {
    10_000
}

impl Default for ShotsSection {
    fn default() -> Self {
        ShotsSection {
            backend: default_backend(),
            energy_shots: default_energy_shots(),
            energy_curve: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DipoleMethod {
    Fourier,
    Swap,
}

/// `O^{αα}_{i,d;p}` for `d = 0..L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DipoleSection {
    pub p: usize,
    pub alpha: Axis,
    #[serde(default)]
    pub i: usize,
    pub methods: Vec<DipoleMethod>,
    pub n_shots: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectrumSource {
    Oracle,
    Swap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelSet {
    Diagonal,
    All,
}

impl ChannelSet {
    pub fn pairs(self) -> Vec<(Axis, Axis)> {
        match self {
            ChannelSet::Diagonal => Axis::ALL.iter().map(|&a| (a, a)).collect(),
            ChannelSet::All => Axis::ALL.iter().flat_map(|&a| Axis::ALL.iter().map(move |&b| (a, b))).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSection {
    pub sources: Vec<SpectrumSource>,
    /// Excited states `1..n_states` enter the spectrum.
    pub n_states: usize,
    #[serde(default = "default_channels")]
    pub channels: ChannelSet,
    #[serde(default = "default_fwhm")]
    pub fwhm: f64,
    /// `[min, max, points]` in meV.
    pub omega: (f64, f64, usize),
    /// `[min, max, points]` in 1/Å.
    pub q: (f64, f64, usize),
    /// Powder-average directions per |Q|; 0 keeps Q along x.
    #[serde(default)]
    pub q_directions: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Orientation angles about z, degrees.
    #[serde(default = "default_orientations")]
    pub orientations_deg: Vec<f64>,
    #[serde(default)]
    pub include_prefactor: bool,
    #[serde(default)]
    pub incident_energy: Option<f64>,
    /// Shots per SWAP circuit for the quantum-estimated spectrum.
    #[serde(default = "default_swap_shots")]
    pub swap_shots: usize,
}

fn default_channels() -> ChannelSet {
    ChannelSet::Diagonal
}
fn default_fwhm() -> f64 {
    0.05
}
fn default_radius() -> f64 {
    2.95
}
fn default_orientations() -> Vec<f64> {
    vec![0.0, 22.5]
}
fn default_swap_shots() -> usize {
    5000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldScanSection {
    /// Field direction; normalized before use.
    pub direction: [f64; 3],
    pub b_max: f64,
    pub points: usize,
    pub n_levels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    /// Compare against exact diagonalization when the dimension allows it.
    #[serde(default = "default_true")]
    pub enabled: bool,
}

fn default_true() -> bool {
    true
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection { enabled: true }
    }
}

/// One validation finding, keyed by its config path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug)]
pub struct ConfigError(pub Vec<Issue>);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, i) in self.0.iter().enumerate() {
            if k > 0 {
                writeln!(f)?;
            }
            write!(f, "{i}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

fn issue(path: &str, message: impl Into<String>) -> Issue {
    Issue {
        path: path.to_string(),
        message: message.into(),
    }
}

/// Reads a config file, or a bundled config by name.
pub fn load_text(spec: &str) -> Result<(String, String), ConfigError> {
    if let Some((_, text)) = BUNDLED.iter().find(|(n, _)| *n == spec) {
        return Ok((format!("bundled:{spec}"), text.to_string()));
    }
    let path = Path::new(spec);
    std::fs::read_to_string(path)
        .map(|t| (path.display().to_string(), t))
        .map_err(|e| ConfigError(vec![issue("config", format!("cannot read {spec}: {e}"))]))
}

pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
    toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        let at = e.span().map(|s| line_of(text, s.start)).map(|l| format!(" (line {l})")).unwrap_or_default();
        ConfigError(vec![issue("config", format!("{msg}{at}"))])
    })
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

impl ExperimentConfig {
    /// Schema and cross-reference checks; an empty list means valid.
    pub fn validate(&self) -> Vec<Issue> {
        let mut out = Vec::new();
        if self.seed.is_none() {
            out.push(issue("seed", "missing; a global seed is required for reproducible runs"));
        }
        if let Err(e) = self.model.validate() {
            out.push(issue("model", e.to_string()));
        }
        let l = self.model.l;
        let chi = self.solver.chi_max;
        if chi == 0 || !chi.is_power_of_two() {
            out.push(issue(
                "solver.chi_max",
                format!("{chi} is not a power of two; the bond register needs N_chi = log2(chi) qubits"),
            ));
        }
        if self.solver.n_states == 0 {
            out.push(issue("solver.n_states", "must be at least 1"));
        }
        if let Err(e) = self.solver_config().validate() {
            out.push(issue("solver", e.to_string()));
        }
        if let Some(c) = self.compiler_config() {
            if let Err(e) = c.validate() {
                out.push(issue("embedding", e.to_string()));
            }
        }
        let ids = self.state_ids();
        let known = |id: &str| ids.iter().any(|s| s == id);
        for (k, job) in self.jobs.iter().enumerate() {
            let path = format!("jobs[{k}]");
            let refs: Vec<&String> = match job {
                JobSpec::Overlap { left, right, .. } => vec![left, right],
                JobSpec::Fourier { psi0, psip, .. } | JobSpec::Swap { psi0, psip, .. } => vec![psi0, psip],
            };
            for r in refs {
                if !known(r) {
                    out.push(issue(
                        &path,
                        format!(
                            "state id {r:?} does not resolve (solver provides s0..s{})",
                            self.solver.n_states.saturating_sub(1)
                        ),
                    ));
                }
            }
            match job {
                JobSpec::Fourier { k: kk, .. } => {
                    if self.model.spin != Spin::Half {
                        out.push(issue(&path, "the Fourier protocol is implemented for spin 1/2"));
                    }
                    if *kk >= l {
                        out.push(issue(&format!("{path}.k"), format!("{kk} is out of range 0..{l}")));
                    }
                }
                JobSpec::Swap { i, j, .. } => {
                    for (name, v) in [("i", i), ("j", j)] {
                        if *v >= l {
                            out.push(issue(&format!("{path}.{name}"), format!("site {v} is out of range 0..{l}")));
                        }
                    }
                }
                JobSpec::Overlap { .. } => {}
            }
        }
        if let Some(d) = &self.dipole {
            if d.p >= self.solver.n_states {
                out.push(issue("dipole.p", format!("state {} not among the {} solved states", d.p, self.solver.n_states)));
            }
            if d.i >= l {
                out.push(issue("dipole.i", format!("site {} is out of range 0..{l}", d.i)));
            }
            if d.methods.contains(&DipoleMethod::Fourier) {
                if self.model.spin != Spin::Half {
                    out.push(issue("dipole.methods", "the Fourier protocol is implemented for spin 1/2"));
                }
                if d.i != 0 {
                    out.push(issue("dipole.i", "the Fourier protocol reconstructs O_{0,d}; set i = 0"));
                }
            }
            if d.n_shots == 0 {
                out.push(issue("dipole.n_shots", "must be positive"));
            }
        }
        if let Some(s) = &self.spectrum {
            if s.n_states < 2 {
                out.push(issue("spectrum.n_states", "needs at least the ground state and one excitation"));
            }
            if s.sources.contains(&SpectrumSource::Swap) && s.n_states > self.solver.n_states {
                out.push(issue("spectrum.n_states", format!("exceeds the {} solved states", self.solver.n_states)));
            }
            if s.sources.contains(&SpectrumSource::Oracle) && self.oracle_dim().is_none() {
                out.push(issue("spectrum.sources", "oracle spectrum requested but the Hilbert space exceeds 2^20"));
            }
            if !(s.fwhm > 0.0) {
                out.push(issue("spectrum.fwhm", "must be positive"));
            }
            if s.omega.2 < 2 || s.q.2 < 1 || s.omega.1 <= s.omega.0 || s.q.1 < s.q.0 {
                out.push(issue("spectrum", "omega and q ranges must be [min, max, points] with max > min"));
            }
            if s.orientations_deg.is_empty() {
                out.push(issue("spectrum.orientations_deg", "needs at least one orientation"));
            }
        }
        if let Some(f) = &self.field_scan {
            if f.direction.iter().map(|x| x * x).sum::<f64>() == 0.0 {
                out.push(issue("field_scan.direction", "must be nonzero"));
            }
            if f.points < 2 {
                out.push(issue("field_scan.points", "needs at least 2 points"));
            }
            if self.oracle_dim().is_none() {
                out.push(issue("field_scan", "field scan uses the oracle, whose dimension cap is 2^20"));
            }
        }
        for (k, n) in self.shots.energy_curve.iter().enumerate() {
            if *n == 0 {
                out.push(issue(&format!("shots.energy_curve[{k}]"), "must be positive"));
            }
        }
        out
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn state_ids(&self) -> Vec<String> {
        (0..self.solver.n_states).map(|i| format!("s{i}")).collect()
    }

    pub fn oracle_dim(&self) -> Option<usize> {
        let d = self.model.spin.dim();
        let mut dim: usize = 1;
        for _ in 0..self.model.l {
            dim = dim.checked_mul(d)?;
        }
        (dim <= ORACLE_CAP).then_some(dim)
    }

    pub fn solver_config(&self) -> SolverConfig {
        let s = &self.solver;
        let mut c = SolverConfig::new(s.chi_max, s.n_states, self.model.j, s.seed.unwrap_or(self.seed()));
        if let Some(v) = s.variance_tol {
            c.variance_tol = v;
        }
        if let Some(v) = s.penalty_weight {
            c.penalty_weight = v;
        }
        if let Some(v) = s.max_sweeps {
            c.max_sweeps = v;
        }
        if let Some(v) = s.energy_tol {
            c.energy_tol = v;
        }
        if let Some(v) = s.krylov_dim {
            c.krylov_dim = v;
        }
        c
    }

    pub fn compiler_config(&self) -> Option<CompilerConfig> {
        let e = &self.embedding;
        if !e.compile {
            return None;
        }
        let mut c = CompilerConfig {
            seed: e.seed.unwrap_or(self.seed().wrapping_add(1)),
            ..CompilerConfig::default()
        };
        if let Some(v) = e.eps_c {
            c.eps_c = v;
        }
        if let Some(v) = e.delta {
            c.delta = v;
        }
        if let Some(v) = e.beam_width {
            c.beam_width = v;
        }
        if let Some(v) = e.max_gates {
            c.max_gates = v;
        }
        if let Some(v) = e.optimizer {
            c.optimizer = v;
        }
        if let Some(v) = e.restarts {
            c.restarts = v;
        }
        if let Some(v) = e.max_iters {
            c.max_iters = v;
        }
        if let Some(v) = e.screen_iters {
            c.screen_iters = v;
        }
        if let Some(v) = &e.gate_kinds {
            c.gate_kinds = v.clone();
        }
        Some(c)
    }

    /// The configuration with every default written out.
    pub fn reference(&self) -> ExperimentConfig {
        let mut r = self.clone();
        let s = self.solver_config();
        r.seed = Some(self.seed());
        r.solver = SolverSection {
            chi_max: s.chi_max,
            n_states: s.n_states,
            variance_tol: Some(s.variance_tol),
            penalty_weight: Some(s.penalty_weight),
            max_sweeps: Some(s.max_sweeps),
            energy_tol: Some(s.energy_tol),
            krylov_dim: Some(s.krylov_dim),
            seed: Some(s.seed),
        };
        let c = CompilerConfig {
            seed: self.embedding.seed.unwrap_or(self.seed().wrapping_add(1)),
            ..self.compiler_config().unwrap_or_default()
        };
        r.embedding = EmbeddingSection {
            compile: self.embedding.compile,
            eps_c: Some(c.eps_c),
            delta: Some(c.delta),
            beam_width: Some(c.beam_width),
            max_gates: Some(c.max_gates),
            optimizer: Some(c.optimizer),
            restarts: Some(c.restarts),
            max_iters: Some(c.max_iters),
            screen_iters: Some(c.screen_iters),
            gate_kinds: Some(c.gate_kinds),
            seed: Some(c.seed),
        };
        r
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_default()
    }
}

/// Loads, parses and validates.
pub fn load(spec: &str) -> Result<(String, ExperimentConfig), ConfigError> {
    let (src, text) = load_text(spec)?;
    let cfg = parse(&text)?;
    let issues = cfg.validate();
    if issues.is_empty() {
        Ok((src, cfg))
    } else {
        Err(ConfigError(issues))
    }
}
