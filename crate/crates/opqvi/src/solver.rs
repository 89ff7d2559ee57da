//! Globalized semismooth Newton method on the stacked system.
//!
//! Each iteration factors one generalized-Jacobian element with dense
//! partial-pivoting LU; the Newton direction is accepted when the solve
//! succeeds and the direction passes the descent test
//! `grad^T d <= -rho |d|^t`, otherwise the method falls back to the negative
//! merit gradient. Steps come from an Armijo backtracking search whose trial
//! exponents start below zero, so the first trial step is `rho^{-1} = 2`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::jacobian::{assemble_w_from, DegenRule};
use crate::problem::{Iterate, ProblemDef};
use crate::residual::{evaluate, residual_from, Evals};
use crate::{Error, Result};

/// All algorithm parameters. Defaults follow the reference experiment setup.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Penalty parameter; fixed for the whole solve.
    pub lambda: f64,
    /// Residual tolerance.
    pub eps: f64,
    /// Backtracking factor, also the descent-test coefficient.
    pub rho: f64,
    /// Armijo constant (the acceptance test uses `2 sigma`).
    pub sigma: f64,
    /// Descent-test exponent, must exceed 2.
    pub t_exp: f64,
    /// Iteration cap.
    pub max_iter: usize,
    /// Smallest line-search exponent; `-1` makes the first trial step 2.
    pub s_min: i32,
    /// Largest line-search exponent before the search gives up.
    pub s_max: i32,
    /// Trailing window for the stagnation stop.
    pub stagnation_window: usize,
    /// Population-variance threshold of the trailing residual norms.
    pub stagnation_var_tol: f64,
    /// Degeneracy threshold on `r = sqrt(c^2 + d^2)`.
    pub tau_deg: f64,
    /// Activity tolerance for classification and diagnostics.
    pub tau_act: f64,
    pub degen_rule: DegenRule,
    /// Accepted for compatibility with the reference parameter list; unused.
    pub beta: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda: 1.0,
            eps: 1e-6,
            rho: 0.5,
            sigma: 1e-4,
            t_exp: 2.1,
            max_iter: 1000,
            s_min: -1,
            s_max: 60,
            stagnation_window: 100,
            stagnation_var_tol: 1e-6,
            tau_deg: 1e-10,
            tau_act: 1e-6,
            degen_rule: DegenRule::DirectionalOnes,
            beta: 1e-8,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config("lambda must be positive".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config("rho must lie in (0, 1)".into()));
        }
        if !(self.sigma > 0.0 && self.sigma < 0.5) {
            return Err(Error::Config("sigma must lie in (0, 1/2)".into()));
        }
        if !(self.t_exp > 2.0) {
            return Err(Error::Config("t must exceed 2".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Newton,
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    /// `|Phi| < eps`.
    Converged,
    /// Residual norm flat over the trailing window, or line-search failure.
    Stagnated,
    MaxIter,
    /// Zero merit gradient with nonzero residual.
    Stationary,
    /// Non-finite oracle output at the recorded iteration.
    Aborted { iteration: usize },
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Status::Converged => write!(f, "converged"),
            Status::Stagnated => write!(f, "stagnated"),
            Status::MaxIter => write!(f, "max_iter"),
            Status::Stationary => write!(f, "stationary"),
            Status::Aborted { iteration } => write!(f, "aborted@{iteration}"),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HistoryEntry {
    /// `|Phi|` at the iterate the step started from.
    pub phi_norm: f64,
    pub alpha: f64,
    pub kind: StepKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: Status,
    #[serde(skip)]
    pub final_iterate: Option<Iterate>,
    /// Upper objective at the final point.
    pub f_hat: f64,
    /// Final residual norm.
    pub phi_norm: f64,
    pub iterations: usize,
    pub wall_time: f64,
    pub history: Vec<HistoryEntry>,
    pub varsigma_gap: f64,
    pub newton_steps: usize,
    pub gradient_steps: usize,
    /// Step length of the last accepted step, 0 when no step was taken.
    pub final_alpha: f64,
}

impl SolveReport {
    /// Residual-norm series including the terminal iterate.
    pub fn norm_series(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.history.iter().map(|h| h.phi_norm).collect();
        s.push(self.phi_norm);
        s
    }

    /// Counts as solved for exit-code purposes: converged, or stagnated with
    /// the inner copy still tracking `y`.
    pub fn is_acceptable(&self) -> bool {
        matches!(self.status, Status::Converged)
            || (matches!(self.status, Status::Stagnated) && self.varsigma_gap < 0.05)
    }
}

/// Starting iterate: `(x0, y0)` as given (zeros otherwise), the inner copy
/// equal to `y0`, and multipliers `u = |G(z0)|`, `v = |g(z0)|`, `w = v`.
pub fn default_start(
    problem: &ProblemDef,
    xy: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Iterate {
    let dims = problem.dims;
    let (x, y) = match xy {
        Some((x0, y0)) => (x0.clone(), y0.clone()),
        None => (DVector::zeros(dims.n), DVector::zeros(dims.m)),
    };
    let mut it = Iterate::zeros(dims);
    it.x = x;
    it.y = y;
    it.varsigma = it.y.clone();
    let z = it.z();
    it.u = problem.g_upper(&z).map(f64::abs);
    it.v = crate::problem::eval_g(problem, &z)
        .map(|g| g.map(f64::abs))
        .unwrap_or_else(|_| DVector::zeros(dims.q));
    it.w = it.v.clone();
    it
}

fn norm_inf(m: &DMatrix<f64>) -> f64 {
    let mut best = 0.0f64;
    for r in 0..m.nrows() {
        let s: f64 = m.row(r).iter().map(|x| x.abs()).sum();
        best = best.max(s);
    }
    best
}

/// Direction from an assembled Jacobian element: dense LU with partial
/// pivoting, accepted only when the factorization is numerically nonsingular
/// (pivot magnitude above `1e-12 |W|_inf`) and the descent test holds.
fn direction_from(
    w: &DMatrix<f64>,
    r: &DVector<f64>,
    grad: &DVector<f64>,
    config: &SolverConfig,
) -> (DVector<f64>, StepKind) {
    let pivot_floor = 1e-12 * norm_inf(w);
    let lu = w.clone().lu();
    let u = lu.u();
    let k = u.nrows().min(u.ncols());
    let solvable = k == 0
        || (0..k).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min) > pivot_floor;
    if solvable {
        if let Some(d) = lu.solve(&(-r)) {
            let finite = d.iter().all(|x| x.is_finite());
            let descent = grad.dot(&d) <= -config.beta * d.norm().powf(config.t_exp);
            if finite && descent {
                return (d, StepKind::Newton);
            }
        }
    }
    (-grad, StepKind::Gradient)
}

/// Direction choice of one iteration (standalone entry point).
pub fn newton_step(
    problem: &ProblemDef,
    it: &Iterate,
    config: &SolverConfig,
) -> Result<(DVector<f64>, StepKind)> {
    config.validate()?;
    let ev = evaluate(problem, it)?;
    let r = residual_from(&ev, it, config.lambda, problem.dims);
    let w = assemble_w_from(problem, &ev, it, config.lambda, config.tau_deg, config.degen_rule);
    let grad = w.transpose() * &r;
    Ok(direction_from(&w, &r, &grad, config))
}

/// Armijo backtracking from exponent `s_min`: the smallest `s` with
/// `Psi(it + rho^s d) <= Psi(it) + 2 sigma rho^s grad^T d`.
/// Returns `None` when `s_max` is exceeded.
pub fn line_search(
    problem: &ProblemDef,
    it: &Iterate,
    d: &DVector<f64>,
    psi0: f64,
    slope: f64,
    config: &SolverConfig,
) -> Option<(f64, Iterate, f64)> {
    let dims = problem.dims;
    for s in config.s_min..=config.s_max {
        let alpha = config.rho.powi(s);
        let Ok(trial) = it.step(dims, d, alpha) else {
            continue;
        };
        let Ok(ev) = evaluate(problem, &trial) else {
            continue; // non-finite trial point, shrink further
        };
        let r = residual_from(&ev, &trial, config.lambda, dims);
        let psi = 0.5 * r.norm_squared();
        if psi.is_finite() && psi <= psi0 + 2.0 * config.sigma * alpha * slope {
            return Some((alpha, trial, psi));
        }
    }
    None
}

fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

struct RunState {
    history: Vec<HistoryEntry>,
    newton_steps: usize,
    gradient_steps: usize,
    final_alpha: f64,
    t0: Instant,
}

impl RunState {
    fn finish(self, status: Status, problem: &ProblemDef, it: &Iterate, phi_norm: f64) -> SolveReport {
        SolveReport {
            status,
            f_hat: problem.f(&it.z()),
            phi_norm,
            iterations: self.history.len(),
            wall_time: self.t0.elapsed().as_secs_f64(),
            varsigma_gap: it.varsigma_gap(),
            history: self.history,
            newton_steps: self.newton_steps,
            gradient_steps: self.gradient_steps,
            final_alpha: self.final_alpha,
            final_iterate: Some(it.clone()),
        }
    }
}

/// Run the Newton iteration from `start` (or the default start rule).
pub fn solve(
    problem: &ProblemDef,
    config: &SolverConfig,
    start: Option<&Iterate>,
) -> Result<SolveReport> {
    config.validate()?;
    let dims = problem.dims;
    let mut it = match start {
        Some(s) => {
            if !s.dims_match(dims) {
                return Err(Error::Dim("start iterate does not match problem dims".into()));
            }
            s.clone()
        }
        None => default_start(problem, None),
    };

    let mut state = RunState {
        history: Vec::new(),
        newton_steps: 0,
        gradient_steps: 0,
        final_alpha: 0.0,
        t0: Instant::now(),
    };
    let mut norms: Vec<f64> = Vec::new();

    loop {
        let k = state.history.len();
        let ev: Evals = match evaluate(problem, &it) {
            Ok(ev) => ev,
            Err(_) => {
                return Ok(state.finish(Status::Aborted { iteration: k }, problem, &it, f64::NAN))
            }
        };
        let r = residual_from(&ev, &it, config.lambda, dims);
        let phi_norm = r.norm();
        norms.push(phi_norm);

        if phi_norm < config.eps {
            return Ok(state.finish(Status::Converged, problem, &it, phi_norm));
        }
        if k >= config.max_iter {
            return Ok(state.finish(Status::MaxIter, problem, &it, phi_norm));
        }
        // first checked once `stagnation_window` full steps have completed
        if norms.len() > config.stagnation_window {
            let tail = &norms[norms.len() - config.stagnation_window..];
            if population_variance(tail) < config.stagnation_var_tol {
                return Ok(state.finish(Status::Stagnated, problem, &it, phi_norm));
            }
        }

        let w = assemble_w_from(problem, &ev, &it, config.lambda, config.tau_deg, config.degen_rule);
        let grad = w.transpose() * &r;
        if grad.amax() < 1e-14 {
            return Ok(state.finish(Status::Stationary, problem, &it, phi_norm));
        }

        let (d, kind) = direction_from(&w, &r, &grad, config);
        let slope = grad.dot(&d);
        let psi0 = 0.5 * phi_norm * phi_norm;
        match line_search(problem, &it, &d, psi0, slope, config) {
            Some((alpha, next, _)) => {
                state.history.push(HistoryEntry { phi_norm, alpha, kind });
                match kind {
                    StepKind::Newton => state.newton_steps += 1,
                    StepKind::Gradient => state.gradient_steps += 1,
                }
                state.final_alpha = alpha;
                it = next;
            }
            None => {
                return Ok(state.finish(Status::Stagnated, problem, &it, phi_norm));
            }
        }
    }
}

/// One sweep cell: a single `(lambda, start)` solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub lambda: f64,
    pub start_index: usize,
    pub report: Option<SolveReport>,
    pub error: Option<String>,
}

/// Independent solves over a penalty list; cells run in parallel and errors
/// are recorded per cell without stopping the sweep.
pub fn lambda_sweep(
    problem: &ProblemDef,
    lambdas: &[f64],
    config: &SolverConfig,
    starts: &[Iterate],
) -> Vec<SweepCell> {
    let default_starts;
    let starts: &[Iterate] = if starts.is_empty() {
        default_starts = vec![default_start(problem, None)];
        &default_starts
    } else {
        starts
    };
    let mut cells: Vec<(f64, usize)> = Vec::new();
    for &l in lambdas {
        for si in 0..starts.len() {
            cells.push((l, si));
        }
    }
    cells
        .into_par_iter()
        .map(|(lambda, start_index)| {
            let mut cfg = config.clone();
            cfg.lambda = lambda;
            match solve(problem, &cfg, Some(&starts[start_index])) {
                Ok(report) => SweepCell { lambda, start_index, report: Some(report), error: None },
                Err(e) => SweepCell { lambda, start_index, report: None, error: Some(e.to_string()) },
            }
        })
        .collect()
}

/// The reference penalty grid `{3^-2, 3^-1, 1, 3, 9}`.
pub fn default_lambda_grid() -> Vec<f64> {
    vec![1.0 / 9.0, 1.0 / 3.0, 1.0, 3.0, 9.0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library;
    use crate::problem::{zero, Dims, Oracles};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    #[test]
    fn default_start_rule_on_mo63() {
        let e = library::ex_mo63();
        let it = default_start(&e.def, Some((&e.starts[0].0, &e.starts[0].1)));
        assert_eq!(it.u.as_slice(), &[1.0, 1.0]);
        assert_eq!(it.v.as_slice(), &[15.0, 15.0]);
        assert_eq!(it.w.as_slice(), &[15.0, 15.0]);
        assert_eq!(it.varsigma, it.y);
    }

    #[test]
    fn default_start_empty_u_when_no_upper_constraints() {
        let e = library::ex_mo64();
        let it = default_start(&e.def, None);
        assert_eq!(it.u.len(), 0);
    }

    #[test]
    fn config_invariants() {
        let c = SolverConfig::default();
        assert!(c.validate().is_ok());
        assert!(SolverConfig { rho: 1.0, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { sigma: 0.5, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { t_exp: 2.0, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { max_iter: 0, ..Default::default() }.validate().is_err());
    }

    /// One free variable, `f0 = y`: the stacked system is affine with an
    /// invertible Jacobian.
    fn tiny_affine_problem(g_rows: usize) -> crate::problem::ProblemDef {
        let dims = Dims::new(0, 1, g_rows, 0).unwrap();
        crate::problem::ProblemDef::new(
            dims,
            "tiny",
            "",
            Oracles {
                f_val: Arc::new(|z: &DVector<f64>| 0.5 * (z[0] - 3.0) * (z[0] - 3.0)),
                f_grad: Arc::new(|z: &DVector<f64>| DVector::from_vec(vec![z[0] - 3.0])),
                f_hess: Arc::new(|_| DMatrix::from_element(1, 1, 1.0)),
                g_upper_val: Arc::new(move |z: &DVector<f64>| {
                    DVector::from_element(g_rows, z[0] - 1.0)
                }),
                g_upper_jac: Arc::new(move |_| DMatrix::from_element(g_rows, 1, 1.0)),
                g_upper_hess_comb: zero::weighted_matrix(1, 1),
                f0_val: Arc::new(|z: &DVector<f64>| DVector::from_vec(vec![z[0]])),
                f0_jac: Arc::new(|_| DMatrix::from_element(1, 1, 1.0)),
                f0_hess_comb: zero::weighted_matrix(1, 1),
                g0_val: Arc::new(|_, _| DVector::zeros(0)),
                g0_jac_z: Arc::new(|_, _| DMatrix::zeros(0, 1)),
                g0_jac_s: Arc::new(|_, _| DMatrix::zeros(0, 1)),
                g0_hess_comb: zero::weighted_matrix2(2, 2),
            },
        )
    }

    #[test]
    fn affine_system_takes_newton_steps_only() {
        let p = tiny_affine_problem(0);
        let cfg = SolverConfig { lambda: 1.0, ..Default::default() };
        let rep = solve(&p, &cfg, None).unwrap();
        assert!(matches!(rep.status, Status::Converged));
        assert!(rep.iterations <= 5, "iterations: {}", rep.iterations);
        assert_eq!(rep.gradient_steps, 0);
        assert!(rep.history.iter().all(|h| h.kind == StepKind::Newton));
    }

    #[test]
    fn singular_w_falls_back_to_gradient() {
        // two duplicated upper constraints, both strictly active with equal
        // positive multipliers: their complementarity rows coincide, so W is
        // singular and the gradient branch must fire
        let p = tiny_affine_problem(2);
        let cfg = SolverConfig { lambda: 1.0, ..Default::default() };
        let mut it = Iterate::zeros(p.dims);
        it.y[0] = 1.0; // G = (0, 0) active
        it.u = DVector::from_vec(vec![2.0, 2.0]);
        let (d, kind) = newton_step(&p, &it, &cfg).unwrap();
        assert_eq!(kind, StepKind::Gradient);
        assert!(d.norm() > 0.0);
    }

    #[test]
    fn descent_test_uses_rho_and_t() {
        let g: DVector<f64> = DVector::from_vec(vec![1.0, 0.0]);
        let d: DVector<f64> = DVector::from_vec(vec![-1.0, 0.0]);
        // g.d = -1 <= -0.5 * 1^2.1 = -0.5 holds
        assert!(g.dot(&d) <= -0.5 * d.norm().powf(2.1));
        let d_shallow: DVector<f64> = DVector::from_vec(vec![-0.3, 1.0]);
        // g.d = -0.3 > -0.5 * |d|^2.1: rejected
        assert!(g.dot(&d_shallow) > -0.5 * d_shallow.norm().powf(2.1));
    }

    #[test]
    fn first_trial_step_is_two() {
        let cfg = SolverConfig::default();
        assert_relative_eq!(cfg.rho.powi(cfg.s_min), 2.0);
    }

    #[test]
    fn monotone_merit_along_history() {
        let e = library::ex_mo64();
        let cfg = SolverConfig { lambda: 0.001, ..Default::default() };
        let start = default_start(&e.def, Some((&e.starts[0].0, &e.starts[0].1)));
        let rep = solve(&e.def, &cfg, Some(&start)).unwrap();
        let series = rep.norm_series();
        for win in series.windows(2) {
            assert!(win[1] < win[0] + 1e-15, "norms must not increase: {win:?}");
        }
    }

    #[test]
    fn deterministic_histories() {
        let e = library::ex_mo64();
        let cfg = SolverConfig { lambda: 0.001, ..Default::default() };
        let r1 = solve(&e.def, &cfg, None).unwrap();
        let r2 = solve(&e.def, &cfg, None).unwrap();
        assert_eq!(r1.iterations, r2.iterations);
        for (a, b) in r1.history.iter().zip(r2.history.iter()) {
            assert_eq!(a.phi_norm.to_bits(), b.phi_norm.to_bits());
            assert_eq!(a.alpha.to_bits(), b.alpha.to_bits());
            assert_eq!(a.kind, b.kind);
        }
    }

    #[test]
    fn sweep_single_lambda_matches_solve() {
        let e = library::ex_mo63();
        let cfg = SolverConfig::default();
        let cells = lambda_sweep(&e.def, &[1.0], &cfg, &[]);
        assert_eq!(cells.len(), 1);
        let mut cfg1 = cfg.clone();
        cfg1.lambda = 1.0;
        let direct = solve(&e.def, &cfg1, None).unwrap();
        let cell = cells[0].report.as_ref().unwrap();
        assert_eq!(cell.iterations, direct.iterations);
        assert_eq!(cell.phi_norm.to_bits(), direct.phi_norm.to_bits());
    }

    #[test]
    fn aborts_on_nan_start() {
        let e = library::ex_mo63();
        let mut it = Iterate::zeros(e.def.dims);
        it.x[0] = f64::NAN;
        let cfg = SolverConfig::default();
        let rep = solve(&e.def, &cfg, Some(&it)).unwrap();
        assert!(matches!(rep.status, Status::Aborted { iteration: 0 }));
    }

    #[test]
    fn history_length_equals_iterations() {
        let e = library::ex_mo63();
        let cfg = SolverConfig { lambda: 1.0 / 3.0, ..Default::default() };
        let rep = solve(&e.def, &cfg, None).unwrap();
        assert_eq!(rep.history.len(), rep.iterations);
        if matches!(rep.status, Status::Converged) {
            assert!(rep.phi_norm < cfg.eps);
        }
    }
}
