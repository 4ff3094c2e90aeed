use qtn_core::compiler::{CompilerConfig, Side};
use qtn_core::dmrg::{solve, SolverConfig};
use qtn_core::mps::{heisenberg_mpo, overlap};
use qtn_core::oracle::{build_hamiltonian, exact_spectrum, low_eigenpairs, DenseSpectrum, Method};
use qtn_core::protocols::{
    adjoint_overlap, estimate_energy, estimate_energy_spin_three_half, realized_energy, run_plan, spin_three_half_plans, swap_transitions, uniform_plan,
    PlanTable, PreparedState,
};
use qtn_core::sim::Backend;
use qtn_core::spectral::{intensity_with_errors, linspace, FormFactorParams, Geometry, IntensityOptions, QGrid};
use qtn_core::{Axis, ModelParams, Spin};

fn oracle(p: &ModelParams, n: usize) -> DenseSpectrum {
    low_eigenpairs(&build_hamiltonian(p).unwrap(), n, Method::Auto).unwrap()
}

#[test]
fn spin_half_ring_energy_from_shots() {
    let p = ModelParams::heisenberg_ring(6, Spin::Half, 1.0).with_field([0.0, 0.0, 0.4]);
    let exact = oracle(&p, 1).energies[0];
    let r = solve(&heisenberg_mpo(&p).unwrap(), &SolverConfig::new(8, 1, p.j, 3)).unwrap();
    assert!((r.energies[0] - exact).abs() < 1e-8);
    let s = PreparedState::new("g", &r.states[0], None, &[Side::Left], None).unwrap();
    assert!((realized_energy(&s, &p).unwrap() - exact).abs() < 1e-8);
    let tables: Vec<PlanTable> = Axis::ALL
        .iter()
        .enumerate()
        .map(|(k, &a)| run_plan(&s, &uniform_plan(6, 1, a), 20_000, 40 + k as u64, Backend::ExactSampled).unwrap())
        .collect();
    let e = estimate_energy(&tables, &p, false).unwrap();
    assert!((e.mean - exact).abs() < 4.0 * e.stderr, "{e:?} vs {exact}");
}

#[test]
fn spin_three_half_energy_from_shots() {
    let p = ModelParams { l: 4, ..ModelParams::cr8() };
    let exact = oracle(&p, 1).energies[0];
    let r = solve(&heisenberg_mpo(&p).unwrap(), &SolverConfig::new(16, 1, p.j, 5)).unwrap();
    assert!((r.energies[0] - exact).abs() < 1e-8);
    let s = PreparedState::new("g", &r.states[0], None, &[Side::Left], None).unwrap();
    let tables: Vec<PlanTable> = spin_three_half_plans(4)
        .iter()
        .enumerate()
        .map(|(k, (_, plan))| run_plan(&s, plan, 50_000, 70 + k as u64, Backend::ExactSampled).unwrap())
        .collect();
    let e = estimate_energy_spin_three_half(&tables, &p).unwrap();
    assert!((e.mean - exact).abs() < 4.0 * e.stderr, "{e:?} vs {exact}");
}

#[test]
fn compiled_states_overlap() {
    let p = ModelParams::heisenberg_ring(4, Spin::Half, 1.0);
    let r = solve(&heisenberg_mpo(&p).unwrap(), &SolverConfig::new(4, 2, p.j, 1)).unwrap();
    let cfg = CompilerConfig {
        seed: 9,
        ..CompilerConfig::default()
    };
    let both = [Side::Left, Side::Right];
    let a = PreparedState::new("a", &r.states[0], None, &both, Some(&cfg)).unwrap();
    let b = PreparedState::new("b", &r.states[1], None, &both, Some(&cfg)).unwrap();
    assert!(a.max_cost(Side::Left).unwrap() < cfg.eps_c && a.max_cost(Side::Right).unwrap() < cfg.eps_c);
    let exact = |x: &PreparedState, y: &PreparedState| {
        let l = x.realized(Side::Left).unwrap();
        let r = y.realized(Side::Right).unwrap();
        overlap(&r, &l).unwrap().norm_sqr() / (l.norm_sqr() * r.norm_sqr())
    };
    let own = adjoint_overlap(&a, &a, 4000, 1, Backend::ExactSampled).unwrap();
    let cross = adjoint_overlap(&a, &b, 4000, 2, Backend::ExactSampled).unwrap();
    assert!((own.value - exact(&a, &a)).abs() < 4.0 * own.stderr.max(1e-3), "{own:?}");
    assert!(own.value > 0.9, "{own:?}");
    assert!(cross.value < 0.01, "{cross:?}");
}

#[test]
fn swap_spectrum_matches_oracle_surface() {
    let p = ModelParams::heisenberg_ring(4, Spin::Half, 1.0);
    let spec = oracle(&p, 4);
    let r = solve(&heisenberg_mpo(&p).unwrap(), &SolverConfig::new(4, 4, p.j, 1)).unwrap();
    let prepared: Vec<PreparedState> = r
        .states
        .iter()
        .enumerate()
        .map(|(k, m)| PreparedState::new(format!("s{k}"), m, None, &[Side::Left], None).unwrap())
        .collect();
    let excited: Vec<(&PreparedState, f64)> = (1..4).map(|k| (&prepared[k], r.energies[k] - r.energies[0])).collect();
    let channels: Vec<(Axis, Axis)> = Axis::ALL.iter().map(|&a| (a, a)).collect();
    let (ts, vs) = swap_transitions(&prepared[0], &excited, &channels, 4000, 11, Backend::ExactSampled).unwrap();
    let geo = Geometry::ring(4, 2.0);
    let ff = FormFactorParams::cr3(2.0);
    let q = QGrid::Vectors(linspace(0.3, 2.0, 5).into_iter().map(|m| [m, 0.0, 0.0]).collect());
    let omega = linspace(0.0, 3.0, 61);
    let opts = IntensityOptions::default();
    let (qtn, err) = intensity_with_errors(&ts, Some(&vs), &geo, &ff, &q, &omega, &opts).unwrap();
    let err = err.unwrap();
    let exact = exact_spectrum(&spec, &channels, &geo, &ff, &q, &omega, &opts).unwrap();
    for (iq, row) in qtn.intensity.iter().enumerate() {
        for (iw, x) in row.iter().enumerate() {
            let d = (x - exact.intensity[iq][iw]).abs();
            assert!(
                d <= 4.0 * err[iq][iw] + 1e-9,
                "q {iq} w {iw}: {x} vs {} ± {}",
                exact.intensity[iq][iw],
                err[iq][iw]
            );
        }
    }
}
