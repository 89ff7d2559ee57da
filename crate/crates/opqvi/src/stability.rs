//! Stability analysis of the inner solution map: the optimal value function
//! of the inner problem, membership tests for the associated multiplier
//! cone, the qualification condition guaranteeing the Lipschitz-like
//! property, and a sampled estimate of the Lipschitz-modulus bound.
//!
//! The inner solver covers objectives linear in the inner variable with
//! constraints affine in it, which is the class every shipped example lives
//! in; general nonlinear inner problems are rejected rather than
//! approximated.
//!
//! The multiplier cone couples a scalar `lambda_m` multiplicatively with the
//! inner multiplier `w`. Substituting `W := lambda_m * w` turns every
//! defining relation into a linear equality or sign constraint, so cone
//! searches become linear programs; the substitution closes the cone with
//! recession directions of the inner multiplier set, which can only make
//! the qualification check more conservative.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::diagnostics::Verdict;
use crate::lp::{solve_free, solve_nonneg, Lp, LpError, LpOutcome};
use crate::problem::ProblemDef;

const AFFINE_TOL: f64 = 1e-8;
const TAU_ACT: f64 = 1e-6;
const CQ_TOL: f64 = 1e-8;
const SPHERE_SEED: u64 = 0x51ab1e;

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("inner problem is infeasible")]
    Infeasible,
    #[error("inner problem is unbounded below")]
    Unbounded,
    #[error("inner constraints are not affine in the inner variable")]
    Unsupported,
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error(transparent)]
    Lp(#[from] LpError),
}

#[derive(Debug, Clone, Serialize)]
pub struct ValueFunction {
    pub phi: f64,
    /// Inner minimizer.
    pub minimizer: DVector<f64>,
    /// Inner multipliers, nonnegative and complementary with the active rows.
    pub multipliers: DVector<f64>,
}

/// Multiplier triple of the stability cone; `lambda_m` is the scalar
/// multiplier of the value-function constraint, unrelated to the solver
/// penalty.
#[derive(Debug, Clone)]
pub struct MultiplierTriple {
    pub v: DVector<f64>,
    pub w: DVector<f64>,
    pub lambda_m: f64,
}

fn stack_z(x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(x.len() + y.len());
    z.rows_mut(0, x.len()).copy_from(x);
    z.rows_mut(x.len(), y.len()).copy_from(y);
    z
}

/// Affine model of the inner constraints at `z`: `g0(z, s) = j s + g0(z, 0)`.
/// Errors with `Unsupported` when the model does not reproduce the oracle.
fn affine_inner_model(
    problem: &ProblemDef,
    z: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>), StabilityError> {
    let m = problem.dims.m;
    let zero = DVector::zeros(m);
    let j = problem.jac_g0_s(z, &zero);
    let g00 = problem.g0(z, &zero);
    // probe a fixed nontrivial point
    let probe = DVector::from_fn(m, |i, _| 0.7 + 0.1 * i as f64);
    let predicted = &j * &probe + &g00;
    let actual = problem.g0(z, &probe);
    let scale = f64::max(1.0, actual.amax());
    if (&predicted - &actual).amax() > AFFINE_TOL * scale {
        return Err(StabilityError::Unsupported);
    }
    let j_probe = problem.jac_g0_s(z, &probe);
    if (&j_probe - &j).amax() > AFFINE_TOL * f64::max(1.0, j.amax()) {
        return Err(StabilityError::Unsupported);
    }
    Ok((j, g00))
}

/// Optimal value of the inner problem `min_s  s . f0(x, y)` over
/// `g0(x, y, s) <= 0`, solved as a dense LP; returns the value, a minimizer
/// and inner multipliers.
pub fn value_function(
    problem: &ProblemDef,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<ValueFunction, StabilityError> {
    let d = problem.dims;
    if x.len() != d.n || y.len() != d.m {
        return Err(StabilityError::Dim(format!(
            "point ({}, {}) does not match dims ({}, {})",
            x.len(),
            y.len(),
            d.n,
            d.m
        )));
    }
    let z = stack_z(x, y);
    let (j, g00) = affine_inner_model(problem, &z)?;
    let lp = Lp {
        c: problem.f0(&z),
        a_eq: DMatrix::zeros(0, d.m),
        b_eq: DVector::zeros(0),
        a_ub: j,
        b_ub: -g00,
    };
    match solve_free(&lp)? {
        LpOutcome::Optimal(sol) => Ok(ValueFunction {
            phi: sol.value,
            minimizer: sol.x,
            multipliers: sol.dual_ub,
        }),
        LpOutcome::Infeasible => Err(StabilityError::Infeasible),
        LpOutcome::Unbounded => Err(StabilityError::Unbounded),
    }
}

/// y-columns of a `q x (n+m)` Jacobian.
fn y_cols(problem: &ProblemDef, jac_z: &DMatrix<f64>) -> DMatrix<f64> {
    let d = problem.dims;
    jac_z.columns(d.n, d.m).into_owned()
}

/// x-columns of a `q x (n+m)` Jacobian.
fn x_cols(problem: &ProblemDef, jac_z: &DMatrix<f64>) -> DMatrix<f64> {
    let d = problem.dims;
    jac_z.columns(0, d.n).into_owned()
}

/// Verify the defining relations of the multiplier cone at
/// `(x, y, varsigma)` with dual target `sig_star`, within `tol`. The inner
/// stationarity of `w` is only binding when `lambda_m` is positive, since
/// `w` enters every other relation scaled by `lambda_m`.
pub fn lambda0_member(
    problem: &ProblemDef,
    x: &DVector<f64>,
    y: &DVector<f64>,
    varsigma: &DVector<f64>,
    sig_star: &DVector<f64>,
    triple: &MultiplierTriple,
    tol: f64,
) -> bool {
    let d = problem.dims;
    let z = stack_z(x, y);
    if triple.lambda_m < -tol {
        return false;
    }
    if triple.v.iter().any(|&vi| vi < -tol) || triple.w.iter().any(|&wi| wi < -tol) {
        return false;
    }
    let g0_at_y = problem.g0(&z, y);
    if g0_at_y.iter().any(|&gi| gi > tol) {
        return false;
    }
    if triple.v.dot(&g0_at_y).abs() > tol {
        return false;
    }
    let f0 = problem.f0(&z);
    if triple.lambda_m > tol {
        // w must belong to the inner multiplier set at (z, varsigma)
        let g0_at_s = problem.g0(&z, varsigma);
        if g0_at_s.iter().any(|&gi| gi > tol) {
            return false;
        }
        if triple.w.dot(&g0_at_s).abs() > tol {
            return false;
        }
        let mut stat = f0.clone();
        if d.q > 0 {
            stat += problem.jac_g0_s(&z, varsigma).transpose() * &triple.w;
        }
        if stat.amax() > tol {
            return false;
        }
    }
    // displayed stationarity relation in the y-slot
    let jac_f0_y = y_cols(problem, &problem.jac_f0(&z));
    let diff = y - varsigma;
    let mut eq = sig_star.clone();
    eq += (&f0 + jac_f0_y.transpose() * &diff) * triple.lambda_m;
    if d.q > 0 {
        let g0y_jac_y = y_cols(problem, &problem.jac_g0_z(&z, y));
        let g0s_jac_y = y_cols(problem, &problem.jac_g0_z(&z, varsigma));
        eq -= (g0s_jac_y.transpose() * &triple.w) * triple.lambda_m;
        eq += g0y_jac_y.transpose() * &triple.v;
    }
    eq.amax() <= tol
}

/// Linear description of the homogenized cone in variables
/// `(v on I2, W on I3, lambda_m)`, all nonnegative.
struct ConeSystem {
    act_v: Vec<usize>,
    act_w: Vec<usize>,
    /// rows: inner stationarity (m) then the y-slot equation (m)
    a_eq: DMatrix<f64>,
    /// x-expression coefficients, one row per x-coordinate
    obj_rows: DMatrix<f64>,
    nvar: usize,
}

fn cone_system(
    problem: &ProblemDef,
    x: &DVector<f64>,
    y: &DVector<f64>,
    varsigma: &DVector<f64>,
) -> ConeSystem {
    let d = problem.dims;
    let z = stack_z(x, y);
    let g0_at_y = problem.g0(&z, y);
    let g0_at_s = problem.g0(&z, varsigma);
    let act_v: Vec<usize> = (0..d.q).filter(|&j| g0_at_y[j].abs() <= TAU_ACT).collect();
    let act_w: Vec<usize> = (0..d.q).filter(|&j| g0_at_s[j].abs() <= TAU_ACT).collect();
    let nvar = act_v.len() + act_w.len() + 1;
    let f0 = problem.f0(&z);
    let jac_f0 = problem.jac_f0(&z);
    let diff = y - varsigma;

    let js_at_s = problem.jac_g0_s(&z, varsigma);
    let jz_at_y = problem.jac_g0_z(&z, y);
    let jz_at_s = problem.jac_g0_z(&z, varsigma);
    let gy_y = y_cols(problem, &jz_at_y);
    let gy_s = y_cols(problem, &jz_at_s);
    let gx_y = x_cols(problem, &jz_at_y);
    let gx_s = x_cols(problem, &jz_at_s);
    let fx = x_cols(problem, &jac_f0);

    let col_w0 = act_v.len();
    let col_l = nvar - 1;
    let mut a_eq = DMatrix::zeros(2 * d.m, nvar);
    // rows 0..m: lambda_m f0 + jac_g0_s(varsigma)^T W = 0
    for r in 0..d.m {
        a_eq[(r, col_l)] = f0[r];
        for (k, &jw) in act_w.iter().enumerate() {
            a_eq[(r, col_w0 + k)] = js_at_s[(jw, r)];
        }
    }
    // rows m..2m: lambda_m (f0 + jac_f0_y^T (y - varsigma))
    //             - grad2 g0(varsigma)^T W + grad2 g0(y)^T v = 0
    let jac_f0_y = y_cols(problem, &jac_f0);
    let lam_coeff = &f0 + jac_f0_y.transpose() * &diff;
    for r in 0..d.m {
        a_eq[(d.m + r, col_l)] = lam_coeff[r];
        for (k, &jw) in act_w.iter().enumerate() {
            a_eq[(d.m + r, col_w0 + k)] = -gy_s[(jw, r)];
        }
        for (k, &jv) in act_v.iter().enumerate() {
            a_eq[(d.m + r, k)] = gy_y[(jv, r)];
        }
    }
    // x-expression: grad1 g0(y)^T v + lambda_m (grad1 f0^T (y - varsigma))
    //               - grad1 g0(varsigma)^T W
    let lam_x = fx.transpose() * &diff;
    let mut obj_rows = DMatrix::zeros(d.n, nvar);
    for i in 0..d.n {
        obj_rows[(i, col_l)] = lam_x[i];
        for (k, &jv) in act_v.iter().enumerate() {
            obj_rows[(i, k)] = gx_y[(jv, i)];
        }
        for (k, &jw) in act_w.iter().enumerate() {
            obj_rows[(i, col_w0 + k)] = -gx_s[(jw, i)];
        }
    }
    ConeSystem { act_v, act_w, a_eq, obj_rows, nvar }
}

/// Qualification check: every member of the zero-dual multiplier cone must
/// map to a zero x-expression. The cone is searched through its unit
/// l1-slice, one LP per signed x-coordinate.
pub fn check_stab_cq(
    problem: &ProblemDef,
    x: &DVector<f64>,
    y: &DVector<f64>,
    varsigma: &DVector<f64>,
    max_patterns: usize,
) -> Result<Verdict, StabilityError> {
    let sys = cone_system(problem, x, y, varsigma);
    let n_active = sys.act_v.len() + sys.act_w.len();
    let patterns = 3usize.checked_pow(n_active as u32).unwrap_or(usize::MAX);
    if patterns > max_patterns {
        return Ok(Verdict::Undecidable);
    }
    if problem.dims.n == 0 {
        return Ok(Verdict::Holds);
    }
    // normalization row: sum of all (nonnegative) variables = 1
    let mut a_eq = DMatrix::zeros(sys.a_eq.nrows() + 1, sys.nvar);
    a_eq.view_mut((0, 0), (sys.a_eq.nrows(), sys.nvar)).copy_from(&sys.a_eq);
    for c in 0..sys.nvar {
        a_eq[(sys.a_eq.nrows(), c)] = 1.0;
    }
    let mut b_eq = DVector::zeros(a_eq.nrows());
    b_eq[a_eq.nrows() - 1] = 1.0;

    for i in 0..problem.dims.n {
        for sign in [1.0, -1.0] {
            let c = DVector::from_fn(sys.nvar, |k, _| -sign * sys.obj_rows[(i, k)]);
            let lp = Lp {
                c,
                a_eq: a_eq.clone(),
                b_eq: b_eq.clone(),
                a_ub: DMatrix::zeros(0, sys.nvar),
                b_ub: DVector::zeros(0),
            };
            match solve_nonneg(&lp)? {
                LpOutcome::Optimal(sol) => {
                    if -sol.value > CQ_TOL {
                        return Ok(Verdict::Fails);
                    }
                }
                LpOutcome::Infeasible => {} // empty slice: cone is {0}
                LpOutcome::Unbounded => unreachable!("l1 slice is compact"),
            }
        }
    }
    Ok(Verdict::Holds)
}

/// Deterministic stream of unit vectors; prefixes are nested, so growing the
/// sample count only ever adds points.
pub fn sphere_points(dim: usize, count: usize) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(SPHERE_SEED);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        // Box-Muller pairs
        let v = DVector::from_fn(dim, |_, _| {
            let u1: f64 = rng.random_range(1e-12..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        let norm = v.norm();
        if norm > 1e-9 {
            out.push(v / norm);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum LipBound {
    /// Max of the sampled dual programs; a lower estimate of the true
    /// supremum.
    Estimate(f64),
    /// Some sampled program was unbounded, which signals a violated
    /// qualification condition.
    Unbounded,
}

/// Sampled estimate of the Lipschitz-modulus upper bound.
///
/// The dual target vector is a free LP variable confined to the unit
/// l1-ball (a subset of the 2-norm ball, keeping the lower-estimate
/// contract); the multiplier polyhedron would otherwise be hit on a
/// measure-zero set only, since dual feasibility is an equality system.
/// The norm of the x-expression is probed along the coordinate axes plus
/// `sphere_samples` deterministic unit directions; prefixes of the
/// direction stream are nested, so the estimate is monotone in the budget.
pub fn lip_bound_estimate(
    problem: &ProblemDef,
    x: &DVector<f64>,
    y: &DVector<f64>,
    varsigma: &DVector<f64>,
    sphere_samples: usize,
) -> Result<LipBound, StabilityError> {
    if sphere_samples == 0 {
        return Ok(LipBound::Estimate(0.0));
    }
    let d = problem.dims;
    if d.n == 0 {
        return Ok(LipBound::Estimate(0.0));
    }
    let sys = cone_system(problem, x, y, varsigma);
    // variables: (v_act, W_act, lambda_m, yp, ym), all nonnegative, with
    // y_star = yp - ym and sum(yp + ym) <= 1
    let nv = sys.nvar + 2 * d.m;
    let mut a_eq = DMatrix::zeros(2 * d.m, nv);
    a_eq.view_mut((0, 0), (2 * d.m, sys.nvar)).copy_from(&sys.a_eq);
    for r in 0..d.m {
        a_eq[(d.m + r, sys.nvar + r)] = 1.0;
        a_eq[(d.m + r, sys.nvar + d.m + r)] = -1.0;
    }
    let b_eq = DVector::zeros(2 * d.m);
    let mut a_ub = DMatrix::zeros(1, nv);
    for k in 0..2 * d.m {
        a_ub[(0, sys.nvar + k)] = 1.0;
    }
    let b_ub = DVector::from_element(1, 1.0);

    let mut directions: Vec<DVector<f64>> = Vec::new();
    for i in 0..d.n {
        for sign in [1.0, -1.0] {
            let mut e = DVector::zeros(d.n);
            e[i] = sign;
            directions.push(e);
        }
    }
    directions.extend(sphere_points(d.n, sphere_samples));

    let solve_along = |dir: &DVector<f64>| -> Result<Option<DVector<f64>>, StabilityError> {
        let mut c = DVector::zeros(nv);
        for k in 0..sys.nvar {
            let mut coeff = 0.0;
            for i in 0..d.n {
                coeff += dir[i] * sys.obj_rows[(i, k)];
            }
            c[k] = -coeff; // maximize
        }
        let lp = Lp {
            c,
            a_eq: a_eq.clone(),
            b_eq: b_eq.clone(),
            a_ub: a_ub.clone(),
            b_ub: b_ub.clone(),
        };
        match solve_nonneg(&lp)? {
            LpOutcome::Optimal(sol) => Ok(Some(sol.x)),
            LpOutcome::Infeasible => Ok(None),
            LpOutcome::Unbounded => Err(StabilityError::Unbounded),
        }
    };
    let expr_of = |vars: &DVector<f64>| -> DVector<f64> {
        DVector::from_fn(d.n, |i, _| {
            (0..sys.nvar).map(|k| sys.obj_rows[(i, k)] * vars[k]).sum()
        })
    };

    let mut best = 0.0f64;
    for dir in &directions {
        // linearize-and-climb: re-solving along the achieved expression's
        // own direction converges to a local norm maximizer, so even small
        // direction budgets land on vertex values
        let mut dir = dir.clone();
        let mut local = 0.0f64;
        for _ in 0..20 {
            let Some(vars) = (match solve_along(&dir) {
                Ok(v) => v,
                Err(StabilityError::Unbounded) => return Ok(LipBound::Unbounded),
                Err(e) => return Err(e),
            }) else {
                break;
            };
            let expr = expr_of(&vars);
            let norm = expr.norm();
            if norm <= local * (1.0 + 1e-10) + 1e-14 {
                break;
            }
            local = norm;
            dir = expr / norm;
        }
        best = best.max(local);
    }
    Ok(LipBound::Estimate(best))
}
