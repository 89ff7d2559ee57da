//! The square semismooth stationarity system and its smooth merit function.
//!
//! The residual stacks the gradient of the penalized Lagrangian over
//! `(z, varsigma)` with one complementarity equation per constraint/multiplier
//! pair, encoded through `phi_c(a, b) = sqrt(a^2 + b^2) + a - b`, which
//! vanishes exactly when `a <= 0`, `b >= 0` and `a b = 0`.

use nalgebra::{DMatrix, DVector};

use crate::problem::{eval_g, jac_g, Iterate, ProblemDef};
use crate::{Error, Result};

/// Complementarity component map. Total, zero iff `a <= 0, b >= 0, ab = 0`.
pub fn phi_c(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt() + a - b
}

/// First-order oracle bundle at one iterate; weight-independent, so it can be
/// cached per point and reused by the residual, Jacobian and merit gradient.
#[derive(Debug, Clone)]
pub struct Evals {
    pub g_upper: DVector<f64>,
    pub g_upper_jac: DMatrix<f64>,
    pub g: DVector<f64>,
    pub g_jac: DMatrix<f64>,
    pub g0: DVector<f64>,
    pub g0_jac_z: DMatrix<f64>,
    pub g0_jac_s: DMatrix<f64>,
    pub f0: DVector<f64>,
    pub f0_jac: DMatrix<f64>,
    pub f_grad: DVector<f64>,
    pub f_lower_grad: DVector<f64>,
}

fn ensure_finite(name: &'static str, vals: impl Iterator<Item = f64>) -> Result<()> {
    for v in vals {
        if !v.is_finite() {
            return Err(Error::NonFinite { block: name });
        }
    }
    Ok(())
}

/// Evaluate every first-order oracle at `(z, varsigma)` with NaN screening.
pub fn evaluate(problem: &ProblemDef, it: &Iterate) -> Result<Evals> {
    if !it.dims_match(problem.dims) {
        return Err(Error::Dim("iterate does not match problem dims".into()));
    }
    let z = it.z();
    let ev = Evals {
        g_upper: problem.g_upper(&z),
        g_upper_jac: problem.jac_g_upper(&z),
        g: eval_g(problem, &z)?,
        g_jac: jac_g(problem, &z)?,
        g0: problem.g0(&z, &it.varsigma),
        g0_jac_z: problem.jac_g0_z(&z, &it.varsigma),
        g0_jac_s: problem.jac_g0_s(&z, &it.varsigma),
        f0: problem.f0(&z),
        f0_jac: problem.jac_f0(&z),
        f_grad: problem.grad_f(&z),
        f_lower_grad: problem.grad_f_lower(&z),
    };
    let d = problem.dims;
    if ev.g_upper.len() != d.p
        || ev.g.len() != d.q
        || ev.g0.len() != d.q
        || ev.f0.len() != d.m
        || ev.g_upper_jac.shape() != (d.p, d.nz())
        || ev.g_jac.shape() != (d.q, d.nz())
        || ev.g0_jac_z.shape() != (d.q, d.nz())
        || ev.g0_jac_s.shape() != (d.q, d.m)
        || ev.f0_jac.shape() != (d.m, d.nz())
        || ev.f_grad.len() != d.nz()
    {
        return Err(Error::Dim("oracle output shape mismatch".into()));
    }
    ensure_finite("G", ev.g_upper.iter().copied())?;
    ensure_finite("G jacobian", ev.g_upper_jac.iter().copied())?;
    ensure_finite("g", ev.g.iter().copied())?;
    ensure_finite("g jacobian", ev.g_jac.iter().copied())?;
    ensure_finite("g0", ev.g0.iter().copied())?;
    ensure_finite("g0 jacobian", ev.g0_jac_z.iter().chain(ev.g0_jac_s.iter()).copied())?;
    ensure_finite("f0", ev.f0.iter().chain(ev.f0_jac.iter()).copied())?;
    ensure_finite("F gradient", ev.f_grad.iter().copied())?;
    ensure_finite("f gradient", ev.f_lower_grad.iter().copied())?;
    Ok(ev)
}

/// Gradient of the penalized Lagrangian w.r.t. `(z, varsigma)`, length `n+2m`.
///
/// z-block: `grad F + G'^T u + g'^T v + lambda grad f
///           - lambda (f0'^T varsigma + g0_z'^T w)`;
/// varsigma-block: `-lambda (f0 + g0_s'^T w)`.
pub fn grad_l_from(ev: &Evals, it: &Iterate, lambda: f64, dims: crate::Dims) -> DVector<f64> {
    let nz = dims.nz();
    let mut out = DVector::zeros(nz + dims.m);
    let mut zb = ev.f_grad.clone();
    if dims.p > 0 {
        zb += ev.g_upper_jac.transpose() * &it.u;
    }
    if dims.q > 0 {
        zb += ev.g_jac.transpose() * &it.v;
        zb -= (ev.g0_jac_z.transpose() * &it.w) * lambda;
    }
    zb += &ev.f_lower_grad * lambda;
    zb -= (ev.f0_jac.transpose() * &it.varsigma) * lambda;
    out.rows_mut(0, nz).copy_from(&zb);

    let mut sb = ev.f0.clone();
    if dims.q > 0 {
        sb += ev.g0_jac_s.transpose() * &it.w;
    }
    out.rows_mut(nz, dims.m).copy_from(&(sb * -lambda));
    out
}

pub fn grad_l(problem: &ProblemDef, it: &Iterate, lambda: f64) -> Result<DVector<f64>> {
    check_lambda(lambda)?;
    let ev = evaluate(problem, it)?;
    Ok(grad_l_from(&ev, it, lambda, problem.dims))
}

/// Scalar value of the penalized Lagrangian `L = F + u.G + v.g + lambda f
/// - lambda (varsigma.f0 + w.g0)`; only used by tests and finite differences.
pub fn l_value(problem: &ProblemDef, it: &Iterate, lambda: f64) -> f64 {
    let z = it.z();
    let y = problem.y_of(&z);
    let g = problem.g0(&z, &y);
    let f0 = problem.f0(&z);
    let ell = it.varsigma.dot(&f0) + it.w.dot(&problem.g0(&z, &it.varsigma));
    problem.f(&z)
        + it.u.dot(&problem.g_upper(&z))
        + it.v.dot(&g)
        + lambda * y.dot(&f0)
        - lambda * ell
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

/// Stacked residual, blocks in order: `grad L`; `phi_c(G_i, u_i)`;
/// `phi_c(g_j, v_j)`; `phi_c(g0_j(z, varsigma), w_j)`.
pub fn residual_from(ev: &Evals, it: &Iterate, lambda: f64, dims: crate::Dims) -> DVector<f64> {
    let mut out = DVector::zeros(dims.total());
    let head = grad_l_from(ev, it, lambda, dims);
    out.rows_mut(0, head.len()).copy_from(&head);
    let mut at = head.len();
    for i in 0..dims.p {
        out[at] = phi_c(ev.g_upper[i], it.u[i]);
        at += 1;
    }
    for j in 0..dims.q {
        out[at] = phi_c(ev.g[j], it.v[j]);
        at += 1;
    }
    for j in 0..dims.q {
        out[at] = phi_c(ev.g0[j], it.w[j]);
        at += 1;
    }
    out
}

pub fn residual(problem: &ProblemDef, it: &Iterate, lambda: f64) -> Result<DVector<f64>> {
    check_lambda(lambda)?;
    let ev = evaluate(problem, it)?;
    Ok(residual_from(&ev, it, lambda, problem.dims))
}

/// Merit function `Psi = 0.5 |Phi|^2`.
pub fn merit(problem: &ProblemDef, it: &Iterate, lambda: f64) -> Result<f64> {
    let r = residual(problem, it, lambda)?;
    Ok(0.5 * r.norm_squared())
}

/// Per-solve workspace: fixed penalty plus a first-order cache keyed on the
/// iterate. Distinct solves never share a workspace.
pub struct ResidualWorkspace {
    pub lambda: f64,
    cache: Option<(DVector<f64>, Evals)>,
}

impl ResidualWorkspace {
    pub fn new(lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(ResidualWorkspace { lambda, cache: None })
    }

    /// Cached oracle bundle for `it`; re-evaluates when the iterate moved.
    pub fn evals(&mut self, problem: &ProblemDef, it: &Iterate) -> Result<&Evals> {
        let key = it.flatten();
        let stale = match &self.cache {
            Some((k, _)) => k != &key,
            None => true,
        };
        if stale {
            let ev = evaluate(problem, it)?;
            self.cache = Some((key, ev));
        }
        Ok(&self.cache.as_ref().unwrap().1)
    }

    pub fn residual(&mut self, problem: &ProblemDef, it: &Iterate) -> Result<DVector<f64>> {
        let lambda = self.lambda;
        let dims = problem.dims;
        let ev = self.evals(problem, it)?;
        Ok(residual_from(ev, it, lambda, dims))
    }

    pub fn merit(&mut self, problem: &ProblemDef, it: &Iterate) -> Result<f64> {
        Ok(0.5 * self.residual(problem, it)?.norm_squared())
    }
}
