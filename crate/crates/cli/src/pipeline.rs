//! Pipeline stages: solve, embed/compile, shot protocols, spectra, oracle scans.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use qtn_core::compiler::Side;
use qtn_core::dmrg::{solve, EigenResult};
use qtn_core::mps::heisenberg_mpo;
use qtn_core::oracle::{build_hamiltonian, cached_low_eigenpairs, exact_dipole_elements, low_eigenpairs, DenseSpectrum, Method};
use qtn_core::protocols::{
    dipole_element_exact, dipole_element_general, estimate_energy, fourier_element, realized_energy, reconstruct_dipole_fft, run_job, run_plan,
    spin_three_half_plans, swap_transitions, uniform_plan, JobOutput, JobSpec, PlanTable, PreparedState,
};
use qtn_core::spectral::{intensity_with_errors, linspace, rotation_z, FormFactorParams, Geometry, IntensityOptions, QGrid, SpectrumGrid, TransitionSet};
use qtn_core::{Axis, ModelParams, Spin, C64};

use crate::config::{DipoleMethod, ExperimentConfig, SpectrumSource};
use crate::output::{num, opt_num, sha256_hex, Artifacts, Manifest, Result};
use crate::plots::{heatmap, xy_plot, Axes, Scale, Series};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Run,
    Solve,
    Compile,
    Shots,
    Spectrum,
    Oracle,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Run => "run",
            Stage::Solve => "solve",
            Stage::Compile => "compile",
            Stage::Shots => "shots",
            Stage::Spectrum => "spectrum",
            Stage::Oracle => "oracle",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Options {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub plots: bool,
}

/// Seed for a named sub-task, derived from the global seed.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let h = Sha256::digest(format!("{base}:{tag}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

struct Ctx {
    cfg: ExperimentConfig,
    arts: Artifacts,
    manifest: Manifest,
    plots: bool,
    oracle: Option<DenseSpectrum>,
}

impl Ctx {
    fn record_seed(&mut self, tag: &str) -> u64 {
        let s = derive_seed(self.cfg.seed(), tag);
        self.manifest.seeds.push((tag.to_string(), s));
        s
    }

    fn plot(&mut self, name: &str, svg: String) -> Result<()> {
        if self.plots {
            self.arts.write(name, svg.as_bytes())?;
        }
        Ok(())
    }

    /// Lowest `n` exact eigenpairs, cached on disk under the output directory.
    fn oracle(&mut self, n: usize) -> Result<Option<DenseSpectrum>> {
        if !self.cfg.oracle.enabled || self.cfg.oracle_dim().is_none() {
            return Ok(None);
        }
        if let Some(s) = &self.oracle {
            if s.len() >= n {
                return Ok(Some(s.clone()));
            }
        }
        let dir = self.arts.dir.join("oracle_cache");
        let spec = cached_low_eigenpairs(&self.cfg.model, n, &dir)?;
        self.oracle = Some(spec.clone());
        Ok(Some(spec))
    }
}

pub fn execute(stage: Stage, source: &str, text: &str, mut cfg: ExperimentConfig, opts: &Options) -> Result<PathBuf> {
    if let Some(s) = opts.seed {
        cfg.seed = Some(s);
    }
    let dir = opts
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("out/{}", cfg.name.clone().unwrap_or_else(|| "experiment".into()))));
    let arts = Artifacts::create(&dir)?;
    let manifest = Manifest {
        tool: "qtn".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: stage.name().into(),
        config_source: source.into(),
        config_sha256: sha256_hex(text.as_bytes()),
        seeds: vec![("global".into(), cfg.seed())],
        ..Manifest::default()
    };
    let mut ctx = Ctx {
        cfg,
        arts,
        manifest,
        plots: opts.plots,
        oracle: None,
    };
    let reference = ctx.cfg.reference().to_toml();
    ctx.arts.write("config.resolved.toml", reference.as_bytes())?;

    match stage {
        Stage::Oracle => {
            oracle_energies(&mut ctx)?;
            field_scan(&mut ctx)?;
        }
        Stage::Solve => {
            solve_stage(&mut ctx)?;
        }
        Stage::Compile => {
            let eig = solve_stage(&mut ctx)?;
            let states = prepare(&mut ctx, &eig, true)?;
            gate_counts(&mut ctx, &states)?;
        }
        Stage::Shots => {
            let eig = solve_stage(&mut ctx)?;
            let states = prepare(&mut ctx, &eig, false)?;
            shots_stage(&mut ctx, &eig, &states)?;
        }
        Stage::Spectrum => {
            let swap = ctx.cfg.spectrum.as_ref().is_some_and(|s| s.sources.contains(&SpectrumSource::Swap));
            if swap {
                let eig = solve_stage(&mut ctx)?;
                let states = prepare(&mut ctx, &eig, false)?;
                spectrum_stage(&mut ctx, Some((&eig, &states)))?;
            } else {
                spectrum_stage(&mut ctx, None)?;
            }
        }
        Stage::Run => {
            let eig = solve_stage(&mut ctx)?;
            let states = prepare(&mut ctx, &eig, true)?;
            gate_counts(&mut ctx, &states)?;
            shots_stage(&mut ctx, &eig, &states)?;
            spectrum_stage(&mut ctx, Some((&eig, &states)))?;
            field_scan(&mut ctx)?;
        }
    }

    ctx.manifest.files = ctx.arts.written.clone();
    ctx.manifest.files.push("manifest.json".into());
    let manifest = std::mem::take(&mut ctx.manifest);
    ctx.arts.write_json("manifest.json", &manifest)?;
    Ok(ctx.arts.dir)
}

fn solve_stage(ctx: &mut Ctx) -> Result<EigenResult> {
    let solver = ctx.cfg.solver_config();
    ctx.manifest.seeds.push(("solver".into(), solver.seed));
    let mpo = heisenberg_mpo(&ctx.cfg.model)?;
    log::info!("DMRG: L={} chi={} n_states={}", ctx.cfg.model.l, solver.chi_max, solver.n_states);
    let eig = solve(&mpo, &solver)?;
    let oracle = ctx.oracle(solver.n_states)?;
    let rows: Vec<Vec<String>> = (0..eig.energies.len())
        .map(|k| {
            let exact = oracle.as_ref().and_then(|o| o.energies.get(k).copied());
            vec![
                k.to_string(),
                num(eig.energies[k]),
                num(eig.variances[k]),
                num(eig.total_sz[k]),
                eig.converged[k].to_string(),
                opt_num(exact),
                opt_num(exact.map(|e| (eig.energies[k] - e).abs())),
            ]
        })
        .collect();
    ctx.arts.write_csv(
        "energies.csv",
        &["state", "energy", "variance", "total_sz", "converged", "oracle_energy", "abs_error"],
        &rows,
    )?;
    if !eig.all_converged() {
        ctx.manifest.notes.push("some DMRG states did not reach the variance tolerance".into());
    }
    Ok(eig)
}

/// Sides each state needs for the configured protocols.
fn required_sides(cfg: &ExperimentConfig, compile_all: bool) -> BTreeMap<String, Vec<Side>> {
    let mut need: BTreeMap<String, Vec<Side>> = BTreeMap::new();
    let mut add = |id: &str, s: Side| {
        let v = need.entry(id.to_string()).or_default();
        if !v.contains(&s) {
            v.push(s);
        }
    };
    add("s0", Side::Left);
    if compile_all {
        for id in cfg.state_ids() {
            add(&id, Side::Left);
        }
    }
    for job in &cfg.jobs {
        match job {
            JobSpec::Overlap { left, right, .. } => {
                add(left, Side::Left);
                add(right, Side::Right);
            }
            JobSpec::Fourier { psi0, psip, .. } => {
                add(psi0, Side::Left);
                add(psip, Side::Right);
            }
            JobSpec::Swap { psi0, psip, .. } => {
                add(psi0, Side::Left);
                add(psip, Side::Left);
            }
        }
    }
    if let Some(d) = &cfg.dipole {
        let p = format!("s{}", d.p);
        add(&p, Side::Left);
        if d.methods.contains(&DipoleMethod::Fourier) {
            add(&p, Side::Right);
        }
    }
    if let Some(s) = &cfg.spectrum {
        if s.sources.contains(&SpectrumSource::Swap) {
            for k in 0..s.n_states.min(cfg.solver.n_states) {
                add(&format!("s{k}"), Side::Left);
            }
        }
    }
    need
}

fn prepare(ctx: &mut Ctx, eig: &EigenResult, compile_all: bool) -> Result<BTreeMap<String, PreparedState>> {
    let compiler = ctx.cfg.compiler_config();
    if let Some(c) = &compiler {
        ctx.manifest.seeds.push(("compiler".into(), c.seed));
    }
    let chi = ctx.cfg.solver.chi_max.next_power_of_two();
    let need: Vec<(String, Vec<Side>)> = required_sides(&ctx.cfg, compile_all).into_iter().collect();
    let prepared: Vec<qtn_core::Result<PreparedState>> = need
        .par_iter()
        .map(|(id, sides)| {
            let k: usize = id[1..].parse().expect("state ids are s<k>");
            PreparedState::new(id.clone(), &eig.states[k], Some(chi), sides, compiler.as_ref())
        })
        .collect();
    let mut out = BTreeMap::new();
    for p in prepared {
        let p = p?;
        out.insert(p.id.clone(), p);
    }
    Ok(out)
}

fn gate_counts(ctx: &mut Ctx, states: &BTreeMap<String, PreparedState>) -> Result<()> {
    let mut rows = Vec::new();
    for (id, s) in states {
        for side in [Side::Left, Side::Right] {
            let Ok(units) = s.embeddings(side) else { continue };
            for (site, u) in units.iter().enumerate() {
                let side_name = match side {
                    Side::Left => "left",
                    Side::Right => "right",
                };
                let (kind, ent, cx, cost, gates) = match &u.sequence {
                    Some(seq) => (
                        "compiled",
                        seq.entangling_count().to_string(),
                        seq.cnot_count.to_string(),
                        num(seq.achieved_cost),
                        seq.gates.len().to_string(),
                    ),
                    None => ("exact", String::new(), String::new(), num(0.0), String::new()),
                };
                rows.push(vec![
                    id.clone(),
                    side_name.into(),
                    site.to_string(),
                    kind.into(),
                    gates,
                    ent,
                    cx,
                    cost,
                    u.matrix.rows.to_string(),
                ]);
                if let Some(seq) = &u.sequence {
                    ctx.arts.write_json(&format!("circuits/{id}_{side_name}_{site}.json"), &seq.to_circuit_json())?;
                }
            }
        }
    }
    ctx.arts.write_csv(
        "gate_counts.csv",
        &[
            "state",
            "side",
            "site",
            "embedding",
            "gates",
            "entangling",
            "cnot_equivalent",
            "cost",
            "unitary_dim",
        ],
        &rows,
    )
}

fn energy_plans(p: &ModelParams) -> Vec<(String, Vec<Vec<Axis>>)> {
    match p.spin {
        Spin::Half => Axis::ALL.iter().map(|&a| (a.label().to_uppercase(), uniform_plan(p.l, 1, a))).collect(),
        Spin::ThreeHalves => spin_three_half_plans(p.l).into_iter().map(|(n, pl)| (n.to_string(), pl)).collect(),
    }
}

#[derive(Serialize)]
struct EnergyPoint {
    n_shots: usize,
    estimate: f64,
    stderr: f64,
    acceptance_rate: f64,
}

fn estimate_ground_energy(ctx: &mut Ctx, s0: &PreparedState, n_shots: usize, tag: &str) -> Result<EnergyPoint> {
    let backend = ctx.cfg.shots.backend;
    let model = ctx.cfg.model.clone();
    let plans = energy_plans(&model);
    let seeds: Vec<u64> = plans.iter().map(|(name, _)| ctx.record_seed(&format!("{tag}/{name}"))).collect();
    let tables: Vec<qtn_core::Result<PlanTable>> = plans
        .par_iter()
        .zip(&seeds)
        .map(|((_, plan), &seed)| run_plan(s0, plan, n_shots, seed, backend))
        .collect();
    let tables: Vec<PlanTable> = tables.into_iter().collect::<qtn_core::Result<_>>()?;
    let acc = tables.iter().map(|t| t.table.acceptance_rate().0).fold(1.0, f64::min);
    let y_as_x = model.spin == Spin::ThreeHalves;
    if y_as_x && !model.conserves_sz() {
        return Err("spin-3/2 energy estimation needs a field along z".into());
    }
    let e = estimate_energy(&tables, &model, y_as_x)?;
    Ok(EnergyPoint {
        n_shots,
        estimate: e.mean,
        stderr: e.stderr,
        acceptance_rate: acc,
    })
}

fn shots_stage(ctx: &mut Ctx, eig: &EigenResult, states: &BTreeMap<String, PreparedState>) -> Result<()> {
    let s0 = states.get("s0").ok_or("ground state not prepared")?;
    let realized = realized_energy(s0, &ctx.cfg.model)?;
    let exact = ctx.oracle(1)?.map(|o| o.energies[0]);
    let reference = exact.unwrap_or(eig.energies[0]);
    let mut counts = vec![ctx.cfg.shots.energy_shots];
    counts.extend(ctx.cfg.shots.energy_curve.iter().copied());
    let mut rows = Vec::new();
    let mut curve = Vec::new();
    for (k, &n) in counts.iter().enumerate() {
        let tag = if k == 0 { "energy".to_string() } else { format!("energy_curve/{n}") };
        let pt = estimate_ground_energy(ctx, s0, n, &tag)?;
        ctx.manifest.acceptance_rates.push((tag.clone(), pt.acceptance_rate));
        let rel = ((pt.estimate - reference) / reference).abs();
        rows.push(vec![
            tag.clone(),
            n.to_string(),
            num(pt.estimate),
            num(pt.stderr),
            num(pt.acceptance_rate),
            num(realized),
            num(reference),
            num(rel),
        ]);
        if k > 0 {
            curve.push((n as f64, rel, pt.stderr / reference.abs()));
        }
    }
    ctx.arts.write_csv(
        "energy_estimates.csv",
        &[
            "run",
            "n_shots",
            "estimate",
            "stderr",
            "acceptance_rate",
            "realized_energy",
            "reference_energy",
            "relative_error",
        ],
        &rows,
    )?;
    if !curve.is_empty() {
        let axes = Axes {
            title: "Ground-state energy error vs shots".into(),
            x_label: "n_shots".into(),
            y_label: "relative error".into(),
            x_scale: Scale::Log,
            y_scale: Scale::Log,
        };
        let floor = ((realized - reference) / reference).abs();
        let series = vec![
            Series::markers("|E_est - E_ref| / |E_ref|", curve.iter().map(|c| (c.0, c.1)).collect(), None),
            Series::line("stderr / |E_ref|", curve.iter().map(|c| (c.0, c.2)).collect()),
            Series::line("circuit floor", curve.iter().map(|c| (c.0, floor.max(1e-16))).collect()),
        ];
        ctx.plot("energy_error_vs_shots.svg", xy_plot(&axes, &series))?;
    }

    // protocol jobs
    let backend = ctx.cfg.shots.backend;
    let outputs: Vec<qtn_core::Result<JobOutput>> = ctx.cfg.jobs.par_iter().map(|j| run_job(j, states, backend)).collect();
    #[derive(Serialize)]
    struct JobRecord<'a> {
        job: &'a JobSpec,
        output: JobOutput,
    }
    let mut records = Vec::new();
    for (k, (job, out)) in ctx.cfg.jobs.iter().zip(outputs).enumerate() {
        let out = out?;
        ctx.manifest.acceptance_rates.push((format!("jobs[{k}]"), out.acceptance_rate));
        records.push(JobRecord { job, output: out });
    }
    ctx.arts.write_json("overlaps.json", &records)?;

    dipole_stage(ctx, states)
}

fn dipole_stage(ctx: &mut Ctx, states: &BTreeMap<String, PreparedState>) -> Result<()> {
    let Some(d) = ctx.cfg.dipole.clone() else { return Ok(()) };
    let l = ctx.cfg.model.l;
    let backend = ctx.cfg.shots.backend;
    let s0 = &states["s0"];
    let sp = &states[&format!("s{}", d.p)];
    let oracle = ctx.oracle(d.p + 1)?;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    let exact: Vec<C64> = (0..l)
        .map(|j| dipole_element_exact(s0, sp, d.i, j, d.alpha, d.alpha))
        .collect::<qtn_core::Result<_>>()?;
    let oracle_vals: Option<Vec<C64>> = oracle
        .as_ref()
        .map(|o| {
            (0..l)
                .map(|j| exact_dipole_elements(o, d.p, d.i, j, d.alpha, d.alpha))
                .collect::<qtn_core::Result<_>>()
        })
        .transpose()?;
    for method in &d.methods {
        let (vals, errs): (Vec<C64>, Vec<(f64, f64)>) = match method {
            DipoleMethod::Fourier => {
                let seeds: Vec<u64> = (0..l).map(|k| ctx.record_seed(&format!("dipole/fourier/k{k}"))).collect();
                let elems: Vec<qtn_core::Result<_>> = (0..l)
                    .into_par_iter()
                    .map(|k| fourier_element(s0, sp, d.alpha, k, d.n_shots, seeds[k], backend))
                    .collect();
                let elems: Vec<_> = elems.into_iter().collect::<qtn_core::Result<_>>()?;
                for (k, e) in elems.iter().enumerate() {
                    ctx.manifest.acceptance_rates.push((format!("dipole/fourier/k{k}"), e.acceptance_rate));
                }
                let map: BTreeMap<usize, C64> = elems.iter().map(|e| (e.k, C64::new(e.value, 0.0))).collect();
                let vals: Vec<C64> = (0..l).map(|j| reconstruct_dipole_fft(&map, l, j)).collect::<qtn_core::Result<_>>()?;
                let errs = (0..l)
                    .map(|j| {
                        let (mut vr, mut vi) = (0.0, 0.0);
                        for e in &elems {
                            let ph = -2.0 * std::f64::consts::PI * (j * e.k) as f64 / l as f64;
                            vr += (ph.cos() * e.stderr).powi(2);
                            vi += (ph.sin() * e.stderr).powi(2);
                        }
                        (vr.sqrt() / l as f64, vi.sqrt() / l as f64)
                    })
                    .collect();
                (vals, errs)
            }
            DipoleMethod::Swap => {
                let seeds: Vec<u64> = (0..l).map(|j| ctx.record_seed(&format!("dipole/swap/d{j}"))).collect();
                let ests: Vec<qtn_core::Result<_>> = (0..l)
                    .into_par_iter()
                    .map(|j| dipole_element_general(s0, sp, d.i, j, d.alpha, d.alpha, d.n_shots, seeds[j], backend))
                    .collect();
                let ests: Vec<_> = ests.into_iter().collect::<qtn_core::Result<_>>()?;
                (
                    ests.iter().map(|e| e.value).collect(),
                    ests.iter().map(|e| (e.stderr_re, e.stderr_im)).collect(),
                )
            }
        };
        let name = match method {
            DipoleMethod::Fourier => "fourier",
            DipoleMethod::Swap => "swap",
        };
        for j in 0..l {
            rows.push(vec![
                name.to_string(),
                d.p.to_string(),
                d.i.to_string(),
                j.to_string(),
                d.alpha.label().into(),
                num(vals[j].re),
                num(vals[j].im),
                num(errs[j].0),
                num(errs[j].1),
                num(vals[j].norm()),
                num(exact[j].re),
                num(exact[j].im),
                opt_num(oracle_vals.as_ref().map(|o| o[j].re)),
                opt_num(oracle_vals.as_ref().map(|o| o[j].im)),
            ]);
        }
        series.push(Series::markers(
            name,
            (0..l).map(|j| (j as f64, vals[j].re)).collect(),
            Some(errs.iter().map(|e| e.0).collect()),
        ));
    }
    ctx.arts.write_csv(
        "dipole_elements.csv",
        &[
            "method",
            "p",
            "i",
            "d",
            "alpha",
            "re",
            "im",
            "stderr_re",
            "stderr_im",
            "abs",
            "circuit_re",
            "circuit_im",
            "oracle_re",
            "oracle_im",
        ],
        &rows,
    )?;
    if let Some(o) = &oracle_vals {
        series.push(Series::line("oracle", (0..l).map(|j| (j as f64, o[j].re)).collect()));
    }
    let axes = Axes {
        title: format!("O^{a}{a}_(0,d;{}) ", d.p, a = d.alpha.label()),
        x_label: "d".into(),
        y_label: "Re O".into(),
        x_scale: Scale::Linear,
        y_scale: Scale::Linear,
    };
    ctx.plot("dipole_elements.svg", xy_plot(&axes, &series))
}

pub fn spectrum_inputs(cfg: &ExperimentConfig) -> Option<(Geometry, FormFactorParams, QGrid, Vec<f64>, IntensityOptions)> {
    let s = cfg.spectrum.as_ref()?;
    let geo = Geometry::ring(cfg.model.l, s.radius).with_orientations(s.orientations_deg.iter().map(|d| rotation_z(d.to_radians())).collect());
    let ff = FormFactorParams::cr3(cfg.model.g);
    let mags = linspace(s.q.0, s.q.1, s.q.2);
    let q = if s.q_directions == 0 {
        QGrid::Vectors(mags.iter().map(|&m| [m, 0.0, 0.0]).collect())
    } else {
        QGrid::Powder {
            magnitudes: mags,
            directions: s.q_directions,
        }
    };
    let omega = linspace(s.omega.0, s.omega.1, s.omega.2);
    let opts = IntensityOptions {
        broadening: qtn_core::spectral::Broadening { fwhm: s.fwhm },
        include_prefactor: s.include_prefactor,
        incident_energy: s.incident_energy,
    };
    Some((geo, ff, q, omega, opts))
}

fn spectrum_stage(ctx: &mut Ctx, solved: Option<(&EigenResult, &BTreeMap<String, PreparedState>)>) -> Result<()> {
    let Some(s) = ctx.cfg.spectrum.clone() else { return Ok(()) };
    let (geo, ff, q, omega, opts) = spectrum_inputs(&ctx.cfg).expect("spectrum section present");
    let channels = s.channels.pairs();
    let mut first = true;
    for source in &s.sources {
        let (grid, errors, name): (SpectrumGrid, Option<Vec<Vec<f64>>>, &str) = match source {
            SpectrumSource::Oracle => {
                let spec = ctx.oracle(s.n_states)?.ok_or("oracle disabled or dimension too large")?;
                let ts = TransitionSet::from_spectrum(&spec, &channels)?;
                let (g, _) = intensity_with_errors(&ts, None, &geo, &ff, &q, &omega, &opts)?;
                (g, None, "oracle")
            }
            SpectrumSource::Swap => {
                let (eig, states) = solved.ok_or("SWAP spectrum needs solved states")?;
                let seed = ctx.record_seed("spectrum/swap");
                let s0 = states.get("s0").ok_or("ground state not prepared")?;
                let excited: Vec<(&PreparedState, f64)> = (1..s.n_states.min(eig.energies.len()))
                    .map(|p| (&states[&format!("s{p}")], eig.energies[p] - eig.energies[0]))
                    .collect();
                let (ts, vs) = swap_transitions(s0, &excited, &channels, s.swap_shots, seed, ctx.cfg.shots.backend)?;
                let (g, e) = intensity_with_errors(&ts, Some(&vs), &geo, &ff, &q, &omega, &opts)?;
                (g, e, "swap")
            }
        };
        let csv = grid.to_csv()?;
        if first {
            ctx.arts.write("spectrum.csv", csv.as_bytes())?;
            ctx.arts.write("spectrum_lines.json", grid.lines_json()?.as_bytes())?;
        }
        ctx.arts.write(&format!("spectrum_{name}.csv"), csv.as_bytes())?;
        if let Some(e) = errors {
            let mut rows = Vec::new();
            for (iq, row) in e.iter().enumerate() {
                for (iw, x) in row.iter().enumerate() {
                    rows.push(vec![num(grid.q_mag[iq]), num(grid.omega[iw]), num(grid.intensity[iq][iw]), num(*x)]);
                }
            }
            ctx.arts
                .write_csv(&format!("spectrum_{name}_stderr.csv"), &["q", "omega", "intensity", "stderr"], &rows)?;
        }
        // rows are ω, columns are |Q|
        let z: Vec<Vec<f64>> = (0..grid.omega.len()).map(|iw| grid.intensity.iter().map(|r| r[iw]).collect()).collect();
        let axes = Axes {
            title: format!("I(Q, ω) [{name}]"),
            x_label: "|Q| (1/Å)".into(),
            y_label: "ħω (meV)".into(),
            x_scale: Scale::Linear,
            y_scale: Scale::Linear,
        };
        let svg = heatmap(&axes, &grid.q_mag, &grid.omega, &z);
        if first {
            ctx.plot("intensity.svg", svg.clone())?;
        }
        ctx.plot(&format!("intensity_{name}.svg"), svg)?;
        first = false;
    }
    Ok(())
}

fn oracle_energies(ctx: &mut Ctx) -> Result<()> {
    let n = ctx.cfg.solver.n_states;
    let spec = ctx.oracle(n)?.ok_or("oracle disabled or dimension exceeds 2^20")?;
    let rows: Vec<Vec<String>> = spec
        .energies
        .iter()
        .enumerate()
        .map(|(k, e)| vec![k.to_string(), num(*e), spec.two_sz[k].map(|x| num(x as f64 / 2.0)).unwrap_or_default()])
        .collect();
    ctx.arts.write_csv("oracle_energies.csv", &["state", "energy", "total_sz"], &rows)
}

/// Lowest levels over a field sweep.
pub fn field_levels(model: &ModelParams, direction: [f64; 3], fields: &[f64], n_levels: usize) -> qtn_core::Result<Vec<Vec<f64>>> {
    let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
    fields
        .par_iter()
        .map(|&b| {
            let p = model.clone().with_field(direction.map(|x| x / norm * b));
            Ok(low_eigenpairs(&build_hamiltonian(&p)?, n_levels, Method::Auto)?.energies)
        })
        .collect()
}

fn field_scan(ctx: &mut Ctx) -> Result<()> {
    let Some(f) = ctx.cfg.field_scan.clone() else { return Ok(()) };
    let fields = linspace(0.0, f.b_max, f.points);
    let levels = field_levels(&ctx.cfg.model, f.direction, &fields, f.n_levels)?;
    let mut rows = Vec::new();
    for (b, es) in fields.iter().zip(&levels) {
        for (k, e) in es.iter().enumerate() {
            rows.push(vec![num(*b), k.to_string(), num(*e), num(e - es[0])]);
        }
    }
    ctx.arts.write_csv("levels.csv", &["B", "level", "energy", "excitation"], &rows)?;
    let series: Vec<Series> = (0..f.n_levels)
        .map(|k| {
            Series::line(
                format!("E{k}"),
                fields.iter().zip(&levels).filter_map(|(b, es)| es.get(k).map(|e| (*b, *e))).collect(),
            )
        })
        .collect();
    let axes = Axes {
        title: "Energy levels vs field".into(),
        x_label: "B (T)".into(),
        y_label: "E (meV)".into(),
        x_scale: Scale::Linear,
        y_scale: Scale::Linear,
    };
    ctx.plot("levels_vs_B.svg", xy_plot(&axes, &series))
}
