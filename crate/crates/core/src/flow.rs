//! Integration of the flow ODE `dZ/dt = v(Z, t)`, its variational equation,
//! and the Alekseev–Gröbner identity comparing two flows.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{w2_empirical, TransportMethod};
use crate::quadrature::GaussLegendre;
use crate::rng::Stream;
use crate::velocity::{ExactVelocityField, VelocityField};

/// Smallest step the adaptive solver accepts before reporting stiffness.
pub const MIN_STEP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Solver {
    /// Classical fourth-order Runge–Kutta with step at most `h`.
    Rk4 { h: f64 },
    /// Dormand–Prince 5(4) with error control.
    Dopri5 { rtol: f64, atol: f64 },
}

impl Default for Solver {
    fn default() -> Self {
        Solver::Dopri5 {
            rtol: 1e-8,
            atol: 1e-8,
        }
    }
}

impl Solver {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Solver::Rk4 { h } if h > 0.0 && h.is_finite() => Ok(()),
            Solver::Dopri5 { rtol, atol } if rtol > 0.0 && atol > 0.0 => Ok(()),
            other => Err(Error::InvalidInput(format!("invalid solver settings {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub steps: usize,
    pub rejected: usize,
    pub evaluations: usize,
    /// Largest accepted scaled local error estimate (0 for RK4).
    pub max_error_estimate: f64,
}

impl SolverStats {
    fn absorb(&mut self, other: &SolverStats) {
        self.steps += other.steps;
        self.rejected += other.rejected;
        self.evaluations += other.evaluations;
        self.max_error_estimate = self.max_error_estimate.max(other.max_error_estimate);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct FlowResult {
    pub s: f64,
    pub t_end: f64,
    /// Accepted-step trajectories, when recording was requested.
    pub trajectories: Option<Vec<Trajectory>>,
    pub endpoints: Vec<DVector<f64>>,
    /// `∇_x Y_{s,t_end}` per particle.
    pub jacobian_flow: Option<Vec<DMatrix<f64>>>,
    /// Aggregated over particles.
    pub stats: SolverStats,
}

/// Solves `y' = f(t, y)` from `s` to `t_end`.
pub fn solve_ode<F>(
    f: F,
    y0: DVector<f64>,
    s: f64,
    t_end: f64,
    solver: &Solver,
    record: bool,
) -> Result<(DVector<f64>, SolverStats, Option<Trajectory>)>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    solver.validate()?;
    if !(s < t_end) {
        return Err(Error::InvalidInput(format!("need s < t_end, got [{s}, {t_end}]")));
    }
    match *solver {
        Solver::Rk4 { h } => rk4(&f, y0, s, t_end, h, record),
        Solver::Dopri5 { rtol, atol } => dopri5(&f, y0, s, t_end, rtol, atol, record),
    }
}

fn rk4<F>(
    f: &F,
    mut y: DVector<f64>,
    s: f64,
    t_end: f64,
    h_max: f64,
    record: bool,
) -> Result<(DVector<f64>, SolverStats, Option<Trajectory>)>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let n = ((t_end - s) / h_max).ceil().max(1.0) as usize;
    let h = (t_end - s) / n as f64;
    let mut traj = record.then(|| Trajectory {
        times: vec![s],
        states: vec![y.clone()],
    });
    for k in 0..n {
        let t = s + k as f64 * h;
        let k1 = f(t, &y)?;
        let k2 = f(t + 0.5 * h, &(&y + &k1 * (0.5 * h)))?;
        let k3 = f(t + 0.5 * h, &(&y + &k2 * (0.5 * h)))?;
        let t4 = if k + 1 == n { t_end } else { t + h };
        let k4 = f(t4, &(&y + &k3 * h))?;
        y += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        if let Some(tr) = traj.as_mut() {
            tr.times.push(t4);
            tr.states.push(y.clone());
        }
    }
    let stats = SolverStats {
        steps: n,
        rejected: 0,
        evaluations: 4 * n,
        max_error_estimate: 0.0,
    };
    Ok((y, stats, traj))
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn dopri5<F>(
    f: &F,
    mut y: DVector<f64>,
    s: f64,
    t_end: f64,
    rtol: f64,
    atol: f64,
    record: bool,
) -> Result<(DVector<f64>, SolverStats, Option<Trajectory>)>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let mut stats = SolverStats::default();
    let mut traj = record.then(|| Trajectory {
        times: vec![s],
        states: vec![y.clone()],
    });
    let n = y.len() as f64;
    let scaled_norm = |e: &DVector<f64>, a: &DVector<f64>, b: &DVector<f64>| -> f64 {
        let mut acc = 0.0;
        for i in 0..e.len() {
            let sc = atol + rtol * a[i].abs().max(b[i].abs());
            acc += (e[i] / sc).powi(2);
        }
        (acc / n).sqrt()
    };
    let mut t = s;
    let mut k1 = f(t, &y)?;
    stats.evaluations += 1;
    // starting step (Hairer, Nørsett & Wanner)
    let zero = DVector::zeros(y.len());
    let d0 = scaled_norm(&y, &y, &zero);
    let d1 = scaled_norm(&k1, &y, &zero);
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(t_end - s);
    loop {
        let last = t + h >= t_end;
        if last {
            h = t_end - t;
        }
        let k2 = f(t + C2 * h, &(&y + &k1 * (h * A21)))?;
        let k3 = f(t + C3 * h, &(&y + (&k1 * A31 + &k2 * A32) * h))?;
        let k4 = f(t + C4 * h, &(&y + (&k1 * A41 + &k2 * A42 + &k3 * A43) * h))?;
        let k5 = f(
            t + C5 * h,
            &(&y + (&k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * h),
        )?;
        let t_next = if last { t_end } else { t + h };
        let k6 = f(
            t_next,
            &(&y + (&k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * h),
        )?;
        let y_new = &y + (&k1 * B1 + &k3 * B3 + &k4 * B4 + &k5 * B5 + &k6 * B6) * h;
        let k7 = f(t_next, &y_new)?;
        stats.evaluations += 6;
        let err_vec = (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h;
        let err = scaled_norm(&err_vec, &y, &y_new);
        if !err.is_finite() {
            return Err(Error::Domain(format!("non-finite state near t = {t}")));
        }
        if err <= 1.0 {
            t = t_next;
            y = y_new;
            k1 = k7;
            stats.steps += 1;
            stats.max_error_estimate = stats.max_error_estimate.max(err);
            if let Some(tr) = traj.as_mut() {
                tr.times.push(t);
                tr.states.push(y.clone());
            }
            if last {
                return Ok((y, stats, traj));
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h *= factor;
        } else {
            stats.rejected += 1;
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
        }
        if h < MIN_STEP {
            return Err(Error::Stiff { t, h });
        }
    }
}

/// Pushes each start through the flow of `v` from `s` to `t_end`.
pub fn integrate(
    v: &dyn VelocityField,
    starts: &[DVector<f64>],
    s: f64,
    t_end: f64,
    solver: &Solver,
    record: bool,
) -> Result<FlowResult> {
    check_starts(v, starts)?;
    let runs: Vec<(DVector<f64>, SolverStats, Option<Trajectory>)> = starts
        .par_iter()
        .map(|x| solve_ode(|t, y| v.velocity(y, t), x.clone(), s, t_end, solver, record))
        .collect::<Result<_>>()?;
    let mut stats = SolverStats::default();
    let mut endpoints = Vec::with_capacity(runs.len());
    let mut trajectories = record.then(Vec::new);
    for (y, st, tr) in runs {
        stats.absorb(&st);
        endpoints.push(y);
        if let (Some(all), Some(tr)) = (trajectories.as_mut(), tr) {
            all.push(tr);
        }
    }
    Ok(FlowResult {
        s,
        t_end,
        trajectories,
        endpoints,
        jacobian_flow: None,
        stats,
    })
}

fn check_starts(v: &dyn VelocityField, starts: &[DVector<f64>]) -> Result<()> {
    if starts.iter().any(|x| x.len() != v.dim()) {
        return Err(Error::InvalidInput(format!(
            "start points must have dimension {}",
            v.dim()
        )));
    }
    Ok(())
}

/// States of every particle at each of the increasing `times` (the first is the start time).
pub fn integrate_through(
    v: &dyn VelocityField,
    starts: &[DVector<f64>],
    times: &[f64],
    solver: &Solver,
) -> Result<Vec<Vec<DVector<f64>>>> {
    check_starts(v, starts)?;
    if times.windows(2).any(|w| !(w[0] < w[1])) || times.is_empty() {
        return Err(Error::InvalidInput("times must be strictly increasing".into()));
    }
    let per_particle: Vec<Vec<DVector<f64>>> = starts
        .par_iter()
        .map(|x| {
            let mut states = vec![x.clone()];
            for w in times.windows(2) {
                let prev = states.last().expect("non-empty").clone();
                let (y, _, _) = solve_ode(|t, y| v.velocity(y, t), prev, w[0], w[1], solver, false)?;
                states.push(y);
            }
            Ok(states)
        })
        .collect::<Result<_>>()?;
    Ok((0..times.len())
        .map(|k| per_particle.iter().map(|p| p[k].clone()).collect())
        .collect())
}

fn flow_with_jacobian(
    v: &dyn VelocityField,
    start: &DVector<f64>,
    s: f64,
    t_end: f64,
    solver: &Solver,
) -> Result<(DVector<f64>, DMatrix<f64>, SolverStats)> {
    let d = v.dim();
    let mut y0 = DVector::zeros(d + d * d);
    y0.rows_mut(0, d).copy_from(start);
    for k in 0..d {
        y0[d + k * d + k] = 1.0;
    }
    let rhs = |t: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let x = y.rows(0, d).into_owned();
        let j = DMatrix::from_column_slice(d, d, &y.as_slice()[d..]);
        let vel = v.velocity(&x, t)?;
        let dj = v.jacobian(&x, t)? * j;
        let mut out = DVector::zeros(d + d * d);
        out.rows_mut(0, d).copy_from(&vel);
        out.rows_mut(d, d * d).copy_from_slice(dj.as_slice());
        Ok(out)
    };
    let (y, stats, _) = solve_ode(rhs, y0, s, t_end, solver, false)?;
    let x = y.rows(0, d).into_owned();
    let j = DMatrix::from_column_slice(d, d, &y.as_slice()[d..]);
    Ok((x, j, stats))
}

/// Flow with the variational matrix `∇_x Y_{s,t}` integrated alongside.
pub fn integrate_with_jacobian(
    v: &dyn VelocityField,
    starts: &[DVector<f64>],
    s: f64,
    t_end: f64,
    solver: &Solver,
) -> Result<FlowResult> {
    check_starts(v, starts)?;
    let runs: Vec<(DVector<f64>, DMatrix<f64>, SolverStats)> = starts
        .par_iter()
        .map(|x| flow_with_jacobian(v, x, s, t_end, solver))
        .collect::<Result<_>>()?;
    let mut stats = SolverStats::default();
    let mut endpoints = Vec::with_capacity(runs.len());
    let mut jac = Vec::with_capacity(runs.len());
    for (y, j, st) in runs {
        stats.absorb(&st);
        endpoints.push(y);
        jac.push(j);
    }
    Ok(FlowResult {
        s,
        t_end,
        trajectories: None,
        endpoints,
        jacobian_flow: Some(jac),
        stats,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlekseevGroebner {
    /// `Y_1 − Z_1`: approximate-field endpoint minus true-field endpoint.
    pub lhs: Vec<f64>,
    /// `∫ ∇Y_{r,1}(Z_r) (v_approx − v_true)(Z_r, r) dr`
    pub rhs: Vec<f64>,
    pub residual: f64,
    pub lhs_norm: f64,
    pub nodes: usize,
}

/// Alekseev–Gröbner check on `[0, 1]` with 64 Gauss–Legendre nodes.
pub fn alekseev_grobner_residual(
    v_true: &dyn VelocityField,
    v_approx: &dyn VelocityField,
    start: &DVector<f64>,
    solver: &Solver,
) -> Result<AlekseevGroebner> {
    alekseev_grobner_on(v_true, v_approx, start, 0.0, 1.0, 64, solver)
}

/// Alekseev–Gröbner check on `[s, t_end]`: `Z` follows `v_true`, `Y`
/// follows `v_approx`, both from `start`. Each node needs one variational
/// solve of the approximate flow from the node to `t_end`.
pub fn alekseev_grobner_on(
    v_true: &dyn VelocityField,
    v_approx: &dyn VelocityField,
    start: &DVector<f64>,
    s: f64,
    t_end: f64,
    nodes: usize,
    solver: &Solver,
) -> Result<AlekseevGroebner> {
    check_starts(v_true, std::slice::from_ref(start))?;
    check_starts(v_approx, std::slice::from_ref(start))?;
    let rule = GaussLegendre::new(nodes).on_interval(s, t_end);
    let mut times = vec![s];
    times.extend(rule.iter().map(|p| p.0));
    // the true path at every node
    let path = integrate_through(v_true, std::slice::from_ref(start), &times, solver)?;
    let (z_end, _, _) = solve_ode(|t, y| v_true.velocity(y, t), start.clone(), s, t_end, solver, false)?;
    let (y_end, _, _) = solve_ode(|t, y| v_approx.velocity(y, t), start.clone(), s, t_end, solver, false)?;
    let contributions: Vec<DVector<f64>> = rule
        .par_iter()
        .enumerate()
        .map(|(k, &(r, w))| {
            let z_r = &path[k + 1][0];
            let (_, jac, _) = flow_with_jacobian(v_approx, z_r, r, t_end, solver)?;
            let defect = v_approx.velocity(z_r, r)? - v_true.velocity(z_r, r)?;
            Ok(jac * defect * w)
        })
        .collect::<Result<_>>()?;
    let mut rhs = DVector::zeros(start.len());
    for c in contributions {
        rhs += c;
    }
    let lhs = y_end - z_end;
    Ok(AlekseevGroebner {
        residual: (&lhs - &rhs).norm(),
        lhs_norm: lhs.norm(),
        lhs: lhs.iter().copied().collect(),
        rhs: rhs.iter().copied().collect(),
        nodes,
    })
}

/// Flow-pushed versus directly sampled marginals at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalCheck {
    pub t: f64,
    pub w2_flow_vs_interpolant: f64,
    pub w2_calibration: f64,
    pub ratio: f64,
    pub pass: bool,
}

/// Starts `n` particles from the exact law of `X_s`, pushes them with the
/// exact field and compares with direct interpolant draws at each check time.
pub fn marginal_law_check(
    f: &ExactVelocityField,
    n: usize,
    s: f64,
    t_checks: &[f64],
    solver: &Solver,
    rng: &mut Stream,
) -> Result<Vec<MarginalCheck>> {
    if n < 2 {
        return Err(Error::InvalidInput("need at least two particles".into()));
    }
    let mut times = vec![s];
    times.extend(t_checks.iter().copied().filter(|&t| t > s));
    let starts: Vec<DVector<f64>> = f.sample_interpolant(s, n, rng)?.into_iter().map(|p| p.xt).collect();
    let states = integrate_through(f, &starts, &times, solver)?;
    let mut out = Vec::with_capacity(t_checks.len());
    for &t in t_checks {
        let pushed = match times.iter().position(|&u| u == t) {
            Some(k) => &states[k],
            None => {
                return Err(Error::InvalidInput(format!("check time {t} precedes start {s}")));
            }
        };
        let direct: Vec<_> = f.sample_interpolant(t, n, rng)?.into_iter().map(|p| p.xt).collect();
        let calib: Vec<_> = f.sample_interpolant(t, n, rng)?.into_iter().map(|p| p.xt).collect();
        let a = w2_empirical(pushed, &direct, TransportMethod::Auto)?.w2;
        let b = w2_empirical(&calib, &direct, TransportMethod::Auto)?.w2;
        let ratio = a / b;
        out.push(MarginalCheck {
            t,
            w2_flow_vs_interpolant: a,
            w2_calibration: b,
            ratio,
            pass: ratio <= 2.0,
        });
    }
    Ok(out)
}

/// `v(x, t) = rate · x`.
#[derive(Debug, Clone, Copy)]
pub struct LinearField {
    pub rate: f64,
    pub dim: usize,
}

impl VelocityField for LinearField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &DVector<f64>, _t: f64) -> Result<DVector<f64>> {
        Ok(x * self.rate)
    }

    fn jacobian(&self, _x: &DVector<f64>, _t: f64) -> Result<DMatrix<f64>> {
        Ok(DMatrix::identity(self.dim, self.dim) * self.rate)
    }
}

/// Time-reflected reversal `w(x, τ) = −v(x, s + t_end − τ)`: integrating `w`
/// over `[s, t_end]` runs the flow of `v` backwards.
pub struct Reflected<'a> {
    pub inner: &'a dyn VelocityField,
    pub s: f64,
    pub t_end: f64,
}

impl VelocityField for Reflected<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn velocity(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        Ok(-self.inner.velocity(x, self.s + self.t_end - t)?)
    }

    fn jacobian(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        Ok(-self.inner.jacobian(x, self.s + self.t_end - t)?)
    }
}

/// Writes recorded trajectories as CSV rows `particle, t, x_1, …, x_d`.
pub fn write_trajectories_csv(path: &Path, result: &FlowResult) -> Result<()> {
    let trajs = result
        .trajectories
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("flow was run without trajectory recording".into()))?;
    let d = result.endpoints.first().map_or(0, |e| e.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["particle".to_string(), "t".to_string()];
    header.extend((1..=d).map(|k| format!("x_{k}")));
    w.write_record(&header)?;
    for (p, tr) in trajs.iter().enumerate() {
        for (t, x) in tr.times.iter().zip(&tr.states) {
            let mut row = vec![p.to_string(), format!("{t:.17e}")];
            row.extend(x.iter().map(|v| format!("{v:.17e}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
