//! Assembly of a generalized-Jacobian element `W` of the stacked system and
//! the merit gradient `W^T Phi`.
//!
//! Away from degenerate pairs the complementarity rows differentiate
//! smoothly: the pair `(c, d)` with `r = sqrt(c^2 + d^2) > 0` contributes the
//! coefficients `a = c/r + 1` on the constraint gradient and `b = d/r - 1` on
//! the multiplier. At `r = 0` any point of the disk
//! `(a-1)^2 + (b+1)^2 <= 1` is a valid selection; the rule used there is
//! configurable.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::problem::{hess_g_comb, Iterate, ProblemDef};
use crate::residual::{evaluate, grad_l_from, residual_from, Evals};
use crate::{Error, Result};

/// Selection rule for degenerate complementarity pairs (`r <= tau_deg`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "rule", content = "direction")]
pub enum DegenRule {
    /// Limit of the smooth partials along the direction `(1, 1)`:
    /// `(1 + 1/sqrt(2), -1 + 1/sqrt(2))`.
    #[default]
    DirectionalOnes,
    /// Center of the admissible disk, `(1, -1)`.
    DiskCenter,
    /// Limit of the smooth partials along a user-chosen direction.
    Directional((f64, f64)),
}

/// Row coefficients for one complementarity pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairCoeff {
    pub a: f64,
    pub b: f64,
    pub degenerate: bool,
}

/// Coefficients of one complementarity row.
pub fn pair_coeff(c: f64, d: f64, tau_deg: f64, rule: DegenRule) -> PairCoeff {
    let r = (c * c + d * d).sqrt();
    if r > tau_deg {
        PairCoeff {
            a: c / r + 1.0,
            b: d / r - 1.0,
            degenerate: false,
        }
    } else {
        let (a, b) = match rule {
            DegenRule::DirectionalOnes => {
                let s = 1.0 / std::f64::consts::SQRT_2;
                (1.0 + s, -1.0 + s)
            }
            DegenRule::DiskCenter => (1.0, -1.0),
            DegenRule::Directional((dc, dd)) => {
                let rr = (dc * dc + dd * dd).sqrt();
                if rr < 1e-14 {
                    (1.0, -1.0)
                } else {
                    (dc / rr + 1.0, dd / rr - 1.0)
                }
            }
        };
        PairCoeff { a, b, degenerate: true }
    }
}

/// Index partition of a (constraint value, multiplier) family:
/// `eta` inactive with zero multiplier, `nu` strictly active, `theta` both
/// zero. Pairs that fit no pattern are assigned to the nearest one and
/// listed in `flagged`; values inside the gray band around the tolerance are
/// listed in `gray`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IndexPartition {
    pub eta: Vec<usize>,
    pub theta: Vec<usize>,
    pub nu: Vec<usize>,
    pub flagged: Vec<usize>,
    pub gray: Vec<usize>,
}

impl IndexPartition {
    /// Active set `I = theta U nu`.
    pub fn active(&self) -> Vec<usize> {
        let mut a: Vec<usize> = self.theta.iter().chain(self.nu.iter()).copied().collect();
        a.sort_unstable();
        a
    }
}

/// Classify constraint/multiplier pairs with activity tolerance `tau_act`.
pub fn classify(values: &DVector<f64>, multipliers: &DVector<f64>, tau_act: f64) -> IndexPartition {
    assert_eq!(values.len(), multipliers.len(), "classify: length mismatch");
    let mut part = IndexPartition::default();
    let gray_band = |t: f64| t > 0.1 * tau_act && t < 10.0 * tau_act;
    for j in 0..values.len() {
        let c = values[j];
        let d = multipliers[j];
        let active = c.abs() <= tau_act;
        let zero_mult = d.abs() <= tau_act;
        let pos_mult = d > tau_act;
        if zero_mult && c < -tau_act {
            part.eta.push(j);
        } else if zero_mult && active {
            part.theta.push(j);
        } else if pos_mult && active {
            part.nu.push(j);
        } else {
            // outside every pattern: assign by distance
            let score_eta = d.abs() + f64::max(0.0, c);
            let score_nu = c.abs() + f64::max(0.0, -d);
            let score_theta = c.abs() + d.abs();
            if score_eta <= score_nu && score_eta <= score_theta {
                part.eta.push(j);
            } else if score_nu <= score_theta {
                part.nu.push(j);
            } else {
                part.theta.push(j);
            }
            part.flagged.push(j);
        }
        if gray_band(c.abs()) || gray_band(d.abs()) {
            part.gray.push(j);
        }
    }
    part
}

fn pair_row(values: &DVector<f64>, mults: &DVector<f64>, tau_deg: f64, rule: DegenRule) -> Vec<PairCoeff> {
    (0..values.len())
        .map(|j| pair_coeff(values[j], mults[j], tau_deg, rule))
        .collect()
}

/// Assemble the dense block matrix `W` from cached first-order data plus the
/// Hessian combinations at the iterate.
pub fn assemble_w_from(
    problem: &ProblemDef,
    ev: &Evals,
    it: &Iterate,
    lambda: f64,
    tau_deg: f64,
    rule: DegenRule,
) -> DMatrix<f64> {
    let d = problem.dims;
    let (n, m, p, q) = (d.n, d.m, d.p, d.q);
    let nz = n + m;
    let total = d.total();
    let z = it.z();

    let mut w_mat = DMatrix::zeros(total, total);

    // top-left (n+m)^2: hess_zz of the penalized Lagrangian
    let mut a_zz = problem.hess_f(&z);
    if p > 0 {
        a_zz += problem.hess_g_upper(&z, &it.u);
    }
    let h_g0 = if q > 0 {
        problem.hess_g0(&z, &it.varsigma, &it.w)
    } else {
        DMatrix::zeros(nz + m, nz + m)
    };
    if q > 0 {
        a_zz += hess_g_comb(problem, &z, &it.v);
        // minus lambda * zz-part of hess(w . g0)
        for r in 0..nz {
            for c in 0..nz {
                a_zz[(r, c)] -= lambda * h_g0[(r, c)];
            }
        }
    }
    a_zz += problem.hess_f_lower(&z) * lambda;
    a_zz -= problem.hess_f0(&z, &it.varsigma) * lambda;
    w_mat.view_mut((0, 0), (nz, nz)).copy_from(&a_zz);

    // cross blocks: -lambda * d^2 l / dz dvarsigma = -lambda (f0_jac^T + H_zs)
    let mut cross = ev.f0_jac.transpose(); // (n+m) x m
    if q > 0 {
        for r in 0..nz {
            for c in 0..m {
                cross[(r, c)] += h_g0[(r, nz + c)];
            }
        }
    }
    cross *= -lambda;
    w_mat.view_mut((0, nz), (nz, m)).copy_from(&cross);
    w_mat.view_mut((nz, 0), (m, nz)).copy_from(&cross.transpose());

    // varsigma block: -lambda * H_ss
    if q > 0 {
        for r in 0..m {
            for c in 0..m {
                w_mat[(nz + r, nz + c)] = -lambda * h_g0[(nz + r, nz + c)];
            }
        }
    }

    // multiplier columns of the gradient rows
    let col_u = nz + m;
    let col_v = col_u + p;
    let col_w = col_v + q;
    for i in 0..p {
        for r in 0..nz {
            w_mat[(r, col_u + i)] = ev.g_upper_jac[(i, r)];
        }
    }
    for j in 0..q {
        for r in 0..nz {
            w_mat[(r, col_v + j)] = ev.g_jac[(j, r)];
            w_mat[(r, col_w + j)] = -lambda * ev.g0_jac_z[(j, r)];
        }
        for r in 0..m {
            w_mat[(nz + r, col_w + j)] = -lambda * ev.g0_jac_s[(j, r)];
        }
    }

    // complementarity rows
    let coeff_u = pair_row(&ev.g_upper, &it.u, tau_deg, rule);
    let coeff_v = pair_row(&ev.g, &it.v, tau_deg, rule);
    let coeff_w = pair_row(&ev.g0, &it.w, tau_deg, rule);
    let row_u = nz + m;
    for i in 0..p {
        for c in 0..nz {
            w_mat[(row_u + i, c)] = coeff_u[i].a * ev.g_upper_jac[(i, c)];
        }
        w_mat[(row_u + i, col_u + i)] = coeff_u[i].b;
    }
    let row_v = row_u + p;
    for j in 0..q {
        for c in 0..nz {
            w_mat[(row_v + j, c)] = coeff_v[j].a * ev.g_jac[(j, c)];
        }
        w_mat[(row_v + j, col_v + j)] = coeff_v[j].b;
    }
    let row_w = row_v + q;
    for j in 0..q {
        for c in 0..nz {
            w_mat[(row_w + j, c)] = coeff_w[j].a * ev.g0_jac_z[(j, c)];
        }
        for c in 0..m {
            w_mat[(row_w + j, nz + c)] = coeff_w[j].a * ev.g0_jac_s[(j, c)];
        }
        w_mat[(row_w + j, col_w + j)] = coeff_w[j].b;
    }
    w_mat
}

/// One element of the generalized Jacobian of the stacked system.
pub fn assemble_w(
    problem: &ProblemDef,
    it: &Iterate,
    lambda: f64,
    tau_deg: f64,
    rule: DegenRule,
) -> Result<DMatrix<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    let ev = evaluate(problem, it)?;
    Ok(assemble_w_from(problem, &ev, it, lambda, tau_deg, rule))
}

/// Gradient of the merit function, `W^T Phi`. The value does not depend on
/// the degenerate-rule choice because degenerate rows multiply zero residual
/// components.
pub fn merit_gradient(
    problem: &ProblemDef,
    it: &Iterate,
    lambda: f64,
    tau_deg: f64,
    rule: DegenRule,
) -> Result<DVector<f64>> {
    let ev = evaluate(problem, it)?;
    let r = residual_from(&ev, it, lambda, problem.dims);
    let w = assemble_w_from(problem, &ev, it, lambda, tau_deg, rule);
    Ok(w.transpose() * r)
}

/// Variant reusing a cached evaluation bundle (solver hot path).
pub fn merit_gradient_from(
    problem: &ProblemDef,
    ev: &Evals,
    it: &Iterate,
    lambda: f64,
    tau_deg: f64,
    rule: DegenRule,
) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
    let r = residual_from(ev, it, lambda, problem.dims);
    let w = assemble_w_from(problem, ev, it, lambda, tau_deg, rule);
    let g = w.transpose() * &r;
    (g, w, r)
}

/// Convenience wrapper exposing grad L from a cached bundle.
pub fn grad_l_cached(ev: &Evals, it: &Iterate, lambda: f64, dims: crate::Dims) -> DVector<f64> {
    grad_l_from(ev, it, lambda, dims)
}
