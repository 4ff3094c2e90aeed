use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qtn_cli::config::{load_text, parse, ExperimentConfig, BUNDLED};
use qtn_cli::pipeline::{execute, Options, Stage};

#[derive(Parser)]
#[command(name = "qtn", version, about = "Tensor-network state preparation and quantum protocol experiments")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file, or a bundled config name.
    #[arg(long, short)]
    config: String,
    /// Output directory (overrides `output_dir`).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Global seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Skip SVG plots.
    #[arg(long)]
    no_plots: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full pipeline: solve, compile, shots, spectrum, field scan.
    Run(Common),
    /// Check a config without running it.
    Validate {
        #[arg(long, short)]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Print the config with every default filled in.
        #[arg(long)]
        reference: bool,
    },
    /// DMRG eigenstates only.
    Solve(Common),
    /// Solve and compile site unitaries.
    Compile(Common),
    /// Solve, embed and run the shot-based protocols.
    Shots(Common),
    /// Neutron spectrum from the configured sources.
    Spectrum(Common),
    /// Exact diagonalization energies and the field scan.
    Oracle(Common),
    /// List bundled configs.
    Configs,
}

fn load(config: &str, seed: Option<u64>) -> Result<(String, String, ExperimentConfig), String> {
    let (src, text) = load_text(config).map_err(|e| e.to_string())?;
    let mut cfg = parse(&text).map_err(|e| e.to_string())?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    let issues = cfg.validate();
    if !issues.is_empty() {
        return Err(issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("\n"));
    }
    Ok((src, text, cfg))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let (stage, common) = match cli.cmd {
        Cmd::Configs => {
            for (name, _) in BUNDLED {
                println!("{name}");
            }
            return ExitCode::SUCCESS;
        }
        Cmd::Validate { config, seed, reference } => {
            return match load(&config, seed) {
                Ok((_, _, cfg)) => {
                    if reference {
                        print!("{}", cfg.reference().to_toml());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::FAILURE
                }
            };
        }
        Cmd::Run(c) => (Stage::Run, c),
        Cmd::Solve(c) => (Stage::Solve, c),
        Cmd::Compile(c) => (Stage::Compile, c),
        Cmd::Shots(c) => (Stage::Shots, c),
        Cmd::Spectrum(c) => (Stage::Spectrum, c),
        Cmd::Oracle(c) => (Stage::Oracle, c),
    };
    let (src, text, cfg) = match load(&common.config, common.seed) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::FAILURE;
        }
    };
    let opts = Options {
        out: common.out,
        seed: common.seed,
        plots: !common.no_plots,
    };
    match execute(stage, &src, &text, cfg, &opts) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
