use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowbound::experiments::{run, Command, ExperimentConfig};

/// Numerical verification of Wasserstein error bounds for deterministic flow matching.
#[derive(Parser)]
#[command(name = "flowbound", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full bound suite: λ, R, Lipschitz profiles, ε, flows, W2, every bound.
    Bounds(Common),
    /// Total-error scaling in ε with γ_min set by the scaling rule.
    Scaling(Common),
    /// PF-ODE (VP or VE) bound suite.
    Pfode(Common),
    /// λ profile and the high-probability covariance check.
    Regularity(Common),
    /// Closed-form Jacobians against finite differences.
    Gradcheck(Common),
    /// Flow-pushed marginals against direct interpolant samples.
    W2(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("FLOWBOUND_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // ignore failure: the pool may already be initialised
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let (command, args) = match cli.command {
        Cmd::Bounds(a) => (Command::Bounds, a),
        Cmd::Scaling(a) => (Command::Scaling, a),
        Cmd::Pfode(a) => (Command::Pfode, a),
        Cmd::Regularity(a) => (Command::Regularity, a),
        Cmd::Gradcheck(a) => (Command::Gradcheck, a),
        Cmd::W2(a) => (Command::W2, a),
    };
    let mut cfg = match ExperimentConfig::from_path(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    let report = match run(command, &cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(if e.is_config() { 2 } else { 1 });
        }
    };
    if let Err(e) = report.audit() {
        eprintln!("audit failed: {e}");
        return ExitCode::from(1);
    }
    if let Err(e) = report.write(&cfg.out_dir) {
        eprintln!("error writing reports: {e}");
        return ExitCode::from(1);
    }
    for b in &report.bounds {
        println!(
            "{:<8} {:<24} lhs {:.6e}  rhs {:.6e}  {}",
            b.theorem.to_string(),
            b.instance,
            b.lhs_measured,
            b.rhs_computed,
            if b.pass { "pass" } else { "FAIL" }
        );
    }
    println!(
        "{} {}: {} in {:.1}s, reports in {}",
        report.command,
        report.instance,
        if report.pass { "pass" } else { "FAIL" },
        report.wall_clock_seconds,
        cfg.out_dir.display()
    );
    ExitCode::from(if report.pass { 0 } else { 1 })
}
