//! Configuration, orchestration and reporting of the verification experiments.
//!
//! Every command reads an [`ExperimentConfig`], derives all randomness from
//! its seed, and produces a [`RunReport`] whose bound reports can be audited
//! against the measurements stored alongside them.

mod config;
mod gradcheck;
mod report;
mod suites;

pub use config::{
    ExperimentConfig, Grids, Instance, PerturbationSpec, Probes, RadiusSpec, RegularitySpec, ScalingSpec,
    ScheduleSpec,
};
pub use gradcheck::{fd_jacobian, gradient_check, relative_error, GradCheck, FD_TOLERANCE, PFODE_TOLERANCE};
pub use report::*;
pub use suites::{
    graded_rule, rate_check, run_bound_suite, run_gradcheck, run_pfode_suite, run_regularity, run_scaling_study,
    run_w2, GRADCHECK_PROBES, MAX_SCALING_SLOPE, RATE_FACTOR,
};

/// CLI subcommand names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Bounds,
    Scaling,
    Pfode,
    Regularity,
    Gradcheck,
    W2,
}

/// Runs one command.
pub fn run(command: Command, cfg: &ExperimentConfig) -> crate::Result<RunReport> {
    match command {
        Command::Bounds => run_bound_suite(cfg),
        Command::Scaling => run_scaling_study(cfg),
        Command::Pfode => run_pfode_suite(cfg),
        Command::Regularity => run_regularity(cfg),
        Command::Gradcheck => run_gradcheck(cfg),
        Command::W2 => run_w2(cfg),
    }
}
