use std::path::Path;
use std::process::Command;

use qtn_cli::config::{load, load_text, parse, BUNDLED};

const SMALL: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/small.toml");

fn qtn(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_qtn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("qtn runs")
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn run_is_byte_identical_under_fixed_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = qtn(&["run", "--config", SMALL, "--out", dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in [
        "energies.csv",
        "gate_counts.csv",
        "overlaps.json",
        "energy_estimates.csv",
        "dipole_elements.csv",
        "spectrum.csv",
        "spectrum_swap.csv",
        "levels.csv",
        "manifest.json",
    ] {
        assert_eq!(read(&a, f), read(&b, f), "{f} differs between runs");
    }
    for f in ["energy_error_vs_shots.svg", "intensity.svg", "levels_vs_B.svg", "dipole_elements.svg"] {
        assert!(a.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&read(&a, "manifest.json")).unwrap();
    assert_eq!(manifest["seeds"][0][1], 7);
    assert!(!manifest["acceptance_rates"].as_array().unwrap().is_empty());
}

#[test]
fn seed_override_changes_shots_only() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(qtn(&["shots", "-c", SMALL, "-o", a.to_str().unwrap(), "--no-plots"]).status.success());
    assert!(qtn(&["shots", "-c", SMALL, "-o", b.to_str().unwrap(), "--no-plots", "--seed", "8"])
        .status
        .success());
    assert_ne!(read(&a, "energy_estimates.csv"), read(&b, "energy_estimates.csv"));
    assert!(!a.join("energy_error_vs_shots.svg").exists());
}

#[test]
fn validate_reports_missing_seed_and_bad_chi() {
    let text = std::fs::read_to_string(SMALL)
        .unwrap()
        .replace("seed = 7\n", "")
        .replace("chi_max = 4", "chi_max = 6");
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, text).unwrap();
    let out = qtn(&["validate", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("seed: missing"), "{err}");
    assert!(err.contains("solver.chi_max: 6 is not a power of two"), "{err}");

    let ok = qtn(&["validate", "--config", path.to_str().unwrap(), "--seed", "1"]);
    assert!(!ok.status.success());
    assert!(!String::from_utf8_lossy(&ok.stderr).contains("seed"));
}

#[test]
fn validate_reference_prints_resolved_defaults() {
    let out = qtn(&["validate", "--config", SMALL, "--reference"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg = parse(&text).unwrap();
    assert!(cfg.validate().is_empty());
    assert!(cfg.solver.variance_tol.is_some());
    assert_eq!(cfg.reference(), cfg);
}

#[test]
fn bundled_configs_resolve_by_name() {
    for (name, _) in BUNDLED {
        let (src, _) = load_text(name).unwrap();
        assert_eq!(src, format!("bundled:{name}"));
        load(name).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(qtn(&["validate", "--config", name]).status.success());
    }
    let out = qtn(&["configs"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), BUNDLED.len());
}

#[test]
fn oracle_stage_writes_levels() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qtn(&["oracle", "-c", SMALL, "-o", tmp.path().to_str().unwrap(), "--no-plots"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(read(tmp.path(), "levels.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 3);
    let oracle = String::from_utf8(read(tmp.path(), "oracle_energies.csv")).unwrap();
    assert!(oracle.starts_with("state,energy,total_sz"));
}
