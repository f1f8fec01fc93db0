//! Run reports, the constituent audit, and CSV/JSON output.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bounds::{BoundReport, KtForm};
use crate::error::{Error, Result};
use crate::flow::MarginalCheck;
use crate::mixtures::SupportRadius;
use crate::regularity::{HighProbabilityCheck, RegularityEstimate};
use crate::schedules::ScheduleKind;
use crate::velocity::EpsilonEstimate;

use super::config::ExperimentConfig;
use super::gradcheck::GradCheck;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSummary {
    pub kind: ScheduleKind,
    pub alpha_0: f64,
    pub beta_1: f64,
    pub gamma_0: f64,
    pub gamma_1: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub concave_gamma: bool,
    pub i_gamma: f64,
    pub i_alpha: f64,
    pub i_beta: f64,
    /// `exp(R (i_alpha + i_beta))`
    #[serde(rename = "C")]
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusSummary {
    /// Larger of the two endpoint radii.
    #[serde(rename = "R")]
    pub radius: f64,
    pub tail_mass_excluded: f64,
    pub pi0: Option<SupportRadius>,
    pub pi1: SupportRadius,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub t: f64,
    pub tau_star: f64,
    pub x_star_norm: f64,
    pub lambda_hat: f64,
    pub lambda_cert: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaProfile {
    pub rows: Vec<LambdaRow>,
    pub max_lambda_hat: f64,
    pub max_lambda_cert: Option<f64>,
    /// Value fed to every bound: the certificate when one exists, else the
    /// probe-sup clamped to 1.
    pub lambda: f64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzRow {
    pub t: f64,
    pub l_hat: f64,
    pub k_t: f64,
    pub slack: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzSummary {
    pub form: KtForm,
    pub rows: Vec<LipschitzRow>,
    /// `∫ L_hat dt` of the exact field on the graded rule.
    pub integral_exact: f64,
    /// `∫ ‖ω‖ h(t) dt`; the perturbed field adds `c` times this.
    pub increment_per_amplitude: f64,
    pub integral_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonRecord {
    pub amplitude: f64,
    pub target: Option<f64>,
    pub estimate: EpsilonEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct W2Record {
    pub amplitude: f64,
    pub epsilon: f64,
    /// `∫ L_hat dt` of the perturbed field.
    pub lipschitz_integral: f64,
    pub coupled_w2: f64,
    pub empirical_w2: f64,
    pub method: String,
    /// Perturbed field stays below `K_t` at every profile node.
    pub conforming: bool,
    /// Empirical W2 from the flow output to fresh draws of the unrelaxed target.
    pub total_w2: Option<f64>,
    /// Empirical W2 between two fresh target samples of the same size.
    pub w2_calibration: Option<f64>,
    /// `√d γ_min`
    pub relaxation_term: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCheck {
    pub epsilon: f64,
    pub lambda: f64,
    pub d: f64,
    pub gamma_rule: f64,
    pub gamma_star: f64,
    /// Largest ratio tolerated between the grid minimiser and the rule.
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularitySummary {
    pub pi0: Option<RegularityEstimate>,
    pub pi1: RegularityEstimate,
    pub high_probability: Vec<HighProbabilityCheck>,
    /// Every certificate dominates its probe-sup (within 1e-6).
    pub certificates_hold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub epsilon: f64,
    pub gamma_min: f64,
    pub delta: f64,
    pub amplitude: f64,
    pub coupled_w2: f64,
    pub total_w2: f64,
    pub rhs_3_9: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSummary {
    pub lambda: f64,
    pub rows: Vec<ScalingRow>,
    pub slope_w2_vs_eps: Option<f64>,
    pub slope_coupled_vs_eps: Option<f64>,
    pub slope_theory: f64,
    /// Measured over theoretical slope.
    pub slope_vs_theory: Option<f64>,
    pub fit_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub instance: String,
    pub seed: u64,
    pub dim: usize,
    pub config: ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<RadiusSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_profile: Option<LambdaProfile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<LipschitzSummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub epsilons: Vec<EpsilonRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub w2: Vec<W2Record>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub marginal_checks: Vec<MarginalCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regularity: Option<RegularitySummary>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub rate_checks: Vec<RateCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingSummary>,
    pub bounds: Vec<BoundReport>,
    pub notes: Vec<String>,
    pub pass: bool,
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub(crate) fn new(command: &str, cfg: &ExperimentConfig, dim: usize) -> Self {
        Self {
            command: command.to_string(),
            instance: cfg.name.clone(),
            seed: cfg.seed,
            dim,
            config: cfg.clone(),
            schedule: None,
            radius: None,
            lambda_profile: None,
            lipschitz: None,
            epsilons: Vec::new(),
            w2: Vec::new(),
            marginal_checks: Vec::new(),
            gradcheck: None,
            regularity: None,
            rate_checks: Vec::new(),
            scaling: None,
            bounds: Vec::new(),
            notes: Vec::new(),
            pass: false,
            wall_clock_seconds: 0.0,
        }
    }

    /// Report as JSON with the wall-clock field zeroed, for rerun comparisons.
    pub fn to_json_without_clock(&self) -> Result<String> {
        let mut r = self.clone();
        r.wall_clock_seconds = 0.0;
        Ok(serde_json::to_string_pretty(&r)?)
    }

    /// Checks that every bound can be recomputed from its constituents
    /// (relative 1e-12) and that every constituent value also appears
    /// somewhere in the report body outside the bound list.
    pub fn audit(&self) -> Result<()> {
        let mut body = serde_json::to_value(self)?;
        if let Value::Object(map) = &mut body {
            map.remove("bounds");
        }
        let mut seen = BTreeSet::new();
        collect_numbers(&body, &mut seen);
        for b in &self.bounds {
            let rhs = b.recompute_rhs()?;
            if (rhs - b.rhs_computed).abs() > 1e-12 * b.rhs_computed.abs().max(1.0) {
                return Err(Error::InvalidInput(format!(
                    "{} on {}: recomputed rhs {rhs} differs from stored {}",
                    b.theorem, b.instance, b.rhs_computed
                )));
            }
            for (k, v) in &b.constituents {
                if !seen.contains(&v.to_bits()) {
                    return Err(Error::InvalidInput(format!(
                        "{} constituent `{k}` = {v} does not appear in the report body",
                        b.theorem
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes `report.json`, `bounds.csv`, the profile CSVs that apply, and `schema.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        let mut w = csv::Writer::from_path(dir.join("bounds.csv"))?;
        w.write_record(["theorem", "instance", "lhs_measured", "rhs_computed", "slack", "pass"])?;
        for b in &self.bounds {
            w.write_record([
                b.theorem.to_string(),
                b.instance.clone(),
                fmt(b.lhs_measured),
                fmt(b.rhs_computed),
                fmt(b.slack),
                b.pass.to_string(),
            ])?;
        }
        w.flush()?;
        let mut tables = vec!["bounds.csv"];
        if let Some(p) = &self.lambda_profile {
            let mut w = csv::Writer::from_path(dir.join("lambda_profile.csv"))?;
            w.write_record(["t", "tau_star", "x_star_norm", "lambda_hat", "lambda_cert"])?;
            for r in &p.rows {
                w.write_record([
                    fmt(r.t),
                    fmt(r.tau_star),
                    fmt(r.x_star_norm),
                    fmt(r.lambda_hat),
                    r.lambda_cert.map(fmt).unwrap_or_default(),
                ])?;
            }
            w.flush()?;
            tables.push("lambda_profile.csv");
        }
        if let Some(l) = &self.lipschitz {
            let mut w = csv::Writer::from_path(dir.join("lipschitz_profile.csv"))?;
            w.write_record(["t", "l_hat", "k_t", "slack", "pass"])?;
            for r in &l.rows {
                w.write_record([fmt(r.t), fmt(r.l_hat), fmt(r.k_t), fmt(r.slack), r.pass.to_string()])?;
            }
            w.flush()?;
            tables.push("lipschitz_profile.csv");
        }
        if !self.w2.is_empty() {
            let mut w = csv::Writer::from_path(dir.join("w2.csv"))?;
            w.write_record(["amplitude", "epsilon", "lipschitz_integral", "coupled_w2", "empirical_w2", "total_w2"])?;
            for r in &self.w2 {
                w.write_record([
                    fmt(r.amplitude),
                    fmt(r.epsilon),
                    fmt(r.lipschitz_integral),
                    fmt(r.coupled_w2),
                    fmt(r.empirical_w2),
                    r.total_w2.map(fmt).unwrap_or_default(),
                ])?;
            }
            w.flush()?;
            tables.push("w2.csv");
        }
        if !self.marginal_checks.is_empty() {
            let mut w = csv::Writer::from_path(dir.join("marginals.csv"))?;
            w.write_record(["t", "w2_flow_vs_interpolant", "w2_calibration", "ratio", "pass"])?;
            for m in &self.marginal_checks {
                w.write_record([
                    fmt(m.t),
                    fmt(m.w2_flow_vs_interpolant),
                    fmt(m.w2_calibration),
                    fmt(m.ratio),
                    m.pass.to_string(),
                ])?;
            }
            w.flush()?;
            tables.push("marginals.csv");
        }
        if let Some(s) = &self.scaling {
            let mut w = csv::Writer::from_path(dir.join("scaling.csv"))?;
            w.write_record(["epsilon", "gamma_min", "delta", "amplitude", "coupled_w2", "total_w2", "rhs_3_9"])?;
            for r in &s.rows {
                w.write_record([
                    fmt(r.epsilon),
                    fmt(r.gamma_min),
                    fmt(r.delta),
                    fmt(r.amplitude),
                    fmt(r.coupled_w2),
                    fmt(r.total_w2),
                    fmt(r.rhs_3_9),
                ])?;
            }
            w.flush()?;
            tables.push("scaling.csv");
        }
        std::fs::write(dir.join("schema.json"), serde_json::to_string_pretty(&schema(&tables))?)?;
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

fn collect_numbers(v: &Value, out: &mut BTreeSet<u64>) {
    match v {
        Value::Number(n) => {
            if let Some(f) = n.as_f64() {
                out.insert(f.to_bits());
            }
        }
        Value::Array(a) => a.iter().for_each(|x| collect_numbers(x, out)),
        Value::Object(m) => m.values().for_each(|x| collect_numbers(x, out)),
        _ => {}
    }
}

/// Column documentation for every CSV written by [`RunReport::write`].
pub fn schema(tables: &[&str]) -> Value {
    let all = serde_json::json!({
        "bounds.csv": {
            "theorem": "bound identifier (T3_1, T3_2, T3_8, T3_9, C3_10, C4_3_VP, C4_3_VE, T4_4_VP, T4_4_VE)",
            "instance": "instance name from the config",
            "lhs_measured": "measured left-hand side",
            "rhs_computed": "bound evaluated from the constituents stored in report.json",
            "slack": "declared tolerance max(1e-6, 1e-3 rhs)",
            "pass": "lhs_measured <= rhs_computed + slack"
        },
        "lambda_profile.csv": {
            "t": "interpolant time",
            "tau_star": "noise scale attaining the probe-sup",
            "x_star_norm": "norm of the probe attaining the probe-sup",
            "lambda_hat": "probe-sup of ||cov(xi | W')||_op / tau^2 (lower bound on lambda)",
            "lambda_cert": "analytic certificate; empty when none applies"
        },
        "lipschitz_profile.csv": {
            "t": "interpolant time",
            "l_hat": "probe-sup of the Jacobian operator norm of the exact field",
            "k_t": "Lipschitz envelope evaluated with the run's lambda and R",
            "slack": "max(1e-6, 1e-3 k_t)",
            "pass": "l_hat <= k_t + slack"
        },
        "w2.csv": {
            "amplitude": "perturbation amplitude c",
            "epsilon": "L2 distance between perturbed and exact fields along the interpolant",
            "lipschitz_integral": "integral of the perturbed field's Lipschitz profile",
            "coupled_w2": "sqrt(mean ||Y_1 - Z_1||^2) over shared starts",
            "empirical_w2": "optimal-transport W2 between the two endpoint clouds",
            "total_w2": "W2 from the perturbed flow output to fresh target draws; empty when not measured"
        },
        "marginals.csv": {
            "t": "check time",
            "w2_flow_vs_interpolant": "W2 between flow-pushed and directly sampled marginals",
            "w2_calibration": "W2 between two direct samples of the same size",
            "ratio": "w2_flow_vs_interpolant / w2_calibration",
            "pass": "ratio <= 2"
        },
        "scaling.csv": {
            "epsilon": "target L2 error",
            "gamma_min": "boundary noise level from the scaling rule",
            "delta": "concave-schedule offset giving gamma_min",
            "amplitude": "perturbation amplitude achieving epsilon",
            "coupled_w2": "coupled W2 to the exact flow",
            "total_w2": "empirical W2 to the unrelaxed target",
            "rhs_3_9": "total-error bound"
        }
    });
    let mut out = serde_json::Map::new();
    for t in tables {
        if let Some(v) = all.get(*t) {
            out.insert((*t).to_string(), v.clone());
        }
    }
    Value::Object(out)
}
