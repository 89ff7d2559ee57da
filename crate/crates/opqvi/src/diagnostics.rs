//! Optimality and regularity diagnostics at a candidate solution.
//!
//! Verifies the first-order stationarity system (with the inner copy
//! substituted by `y`), the two LICQ conditions, strict complementarity of
//! the inner pairs, and positivity of the reduced second-order form on the
//! critical subspace. Verdicts are tri-state: activity values inside the
//! gray band around the tolerance make a check `Undecidable` instead of
//! forcing a hard call.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::jacobian::{classify, IndexPartition};
use crate::problem::{eval_g, hess_g_comb, jac_g, Iterate, ProblemDef};
use crate::residual::evaluate;
use crate::{Error, Result};

pub const RANK_TOL: f64 = 1e-8;
pub const EIG_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Holds,
    Fails,
    Undecidable,
}

impl Verdict {
    pub fn and(self, other: Verdict) -> Verdict {
        use Verdict::*;
        match (self, other) {
            (Fails, _) | (_, Fails) => Fails,
            (Undecidable, _) | (_, Undecidable) => Undecidable,
            _ => Holds,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankCheck {
    pub verdict: Verdict,
    pub active_rows: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SosscCheck {
    pub verdict: Verdict,
    /// Minimum eigenvalue of the reduced form; `None` when the critical
    /// subspace is trivial.
    pub min_eigenvalue: Option<f64>,
    pub subspace_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegularityReport {
    pub kkt_residual_norm: f64,
    pub licq_upper: RankCheck,
    pub licq_lower: RankCheck,
    pub scc: Verdict,
    pub sossc: SosscCheck,
    pub partition_upper: IndexPartition,
    pub partition_g: IndexPartition,
    pub partition_g0: IndexPartition,
    pub varsigma_gap: f64,
    pub cd_regular: Verdict,
}

/// Max-norm violation of the stationarity system at `(z, y, u, v, w)` with
/// the inner copy replaced by `y`: stationarity in `z`, inner stationarity,
/// complementarity and sign violations of all three pair families.
pub fn kkt_residual(problem: &ProblemDef, it: &Iterate, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Config("lambda must be positive".into()));
    }
    if !it.dims_match(problem.dims) {
        return Err(Error::Dim("iterate does not match problem dims".into()));
    }
    let z = it.z();
    let y = problem.y_of(&z);
    let g_up = problem.g_upper(&z);
    let g = eval_g(problem, &z)?;
    let g0y = problem.g0(&z, &y);
    let f0 = problem.f0(&z);

    // (KS-r1) with varsigma = y
    let mut r1 = problem.grad_f(&z);
    if problem.dims.p > 0 {
        r1 += problem.jac_g_upper(&z).transpose() * &it.u;
    }
    if problem.dims.q > 0 {
        r1 += jac_g(problem, &z)?.transpose() * &it.v;
        r1 -= (problem.jac_g0_z(&z, &y).transpose() * &it.w) * lambda;
    }
    r1 += problem.grad_f_lower(&z) * lambda;
    r1 -= (problem.jac_f0(&z).transpose() * &y) * lambda;

    // (KS-r2)
    let mut r2 = f0;
    if problem.dims.q > 0 {
        r2 += problem.jac_g0_s(&z, &y).transpose() * &it.w;
    }

    let mut worst = r1.amax().max(if !r2.is_empty() { r2.amax() } else { 0.0 });
    let mut pair_violation = |c: f64, d: f64| {
        let comp = c.abs().min(d.abs());
        let sign = f64::max(0.0, -d).max(f64::max(0.0, c));
        worst = worst.max(comp).max(sign);
    };
    for i in 0..problem.dims.p {
        pair_violation(g_up[i], it.u[i]);
    }
    for j in 0..problem.dims.q {
        pair_violation(g[j], it.v[j]);
        pair_violation(g0y[j], it.w[j]);
    }
    Ok(worst)
}

/// Lawson-Hanson nonnegative least squares, `min |a x - b|` s.t. `x >= 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> DVector<f64> {
    let nvar = a.ncols();
    let mut x = DVector::zeros(nvar);
    if nvar == 0 {
        return x;
    }
    let mut passive = vec![false; nvar];
    let max_outer = 3 * nvar + 10;
    for _ in 0..max_outer {
        let w = a.transpose() * (b - a * &x);
        let mut best: Option<(usize, f64)> = None;
        for j in 0..nvar {
            if !passive[j] && w[j] > tol
                && best.is_none_or(|(_, bw)| w[j] > bw) {
                    best = Some((j, w[j]));
                }
        }
        let Some((j_new, _)) = best else {
            break;
        };
        passive[j_new] = true;

        loop {
            let idx: Vec<usize> = (0..nvar).filter(|&j| passive[j]).collect();
            let sub = a.select_columns(idx.iter());
            let svd = sub.svd(true, true);
            let z_sub = svd.solve(b, 1e-12).expect("svd solve");
            if z_sub.iter().all(|&v| v > tol) {
                x.fill(0.0);
                for (k, &j) in idx.iter().enumerate() {
                    x[j] = z_sub[k];
                }
                break;
            }
            // step toward z, dropping the first variable that hits zero
            let mut alpha = 1.0f64;
            let mut drop_j = None;
            for (k, &j) in idx.iter().enumerate() {
                if z_sub[k] <= tol {
                    let denom = x[j] - z_sub[k];
                    if denom > 0.0 {
                        let a_k = x[j] / denom;
                        if a_k < alpha {
                            alpha = a_k;
                            drop_j = Some(j);
                        }
                    } else {
                        alpha = 0.0;
                        drop_j = Some(j);
                    }
                }
            }
            for (k, &j) in idx.iter().enumerate() {
                x[j] += alpha * (z_sub[k] - x[j]);
            }
            if let Some(j) = drop_j {
                x[j] = 0.0;
                passive[j] = false;
            } else {
                break;
            }
        }
    }
    x
}

/// Fit `(u, v, w)` at an externally supplied primal point: `w` from inner
/// stationarity, then `(u, v)` from upper stationarity, both by nonnegative
/// least squares restricted to active rows.
pub fn fit_multipliers(
    problem: &ProblemDef,
    z: &DVector<f64>,
    lambda: f64,
    tau_act: f64,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let d = problem.dims;
    let y = problem.y_of(z);
    let g_up = problem.g_upper(z);
    let g = eval_g(problem, z)?;
    let g0y = problem.g0(z, &y);
    let f0 = problem.f0(z);

    // inner stationarity: f0 + jac_g0_s^T w = 0 on active rows
    let mut w = DVector::zeros(d.q);
    if d.q > 0 {
        let js_t = problem.jac_g0_s(z, &y).transpose();
        let act: Vec<usize> = (0..d.q).filter(|&j| g0y[j].abs() <= tau_act).collect();
        if !act.is_empty() {
            let a = js_t.select_columns(act.iter());
            let sol = nnls(&a, &(-&f0), 1e-12);
            for (k, &j) in act.iter().enumerate() {
                w[j] = sol[k];
            }
        }
    }

    // upper stationarity for (u, v) given w
    let mut rhs = problem.grad_f(z) + problem.grad_f_lower(z) * lambda;
    rhs -= (problem.jac_f0(z).transpose() * &y) * lambda;
    if d.q > 0 {
        rhs -= (problem.jac_g0_z(z, &y).transpose() * &w) * lambda;
    }
    let act_u: Vec<usize> = (0..d.p).filter(|&i| g_up[i].abs() <= tau_act).collect();
    let act_v: Vec<usize> = (0..d.q).filter(|&j| g[j].abs() <= tau_act).collect();
    let mut cols = DMatrix::zeros(d.nz(), act_u.len() + act_v.len());
    if d.p > 0 {
        let jg_up = problem.jac_g_upper(z);
        for (k, &i) in act_u.iter().enumerate() {
            cols.set_column(k, &jg_up.row(i).transpose());
        }
    }
    if d.q > 0 {
        let jg = jac_g(problem, z)?;
        for (k, &j) in act_v.iter().enumerate() {
            cols.set_column(act_u.len() + k, &jg.row(j).transpose());
        }
    }
    let mut u = DVector::zeros(d.p);
    let mut v = DVector::zeros(d.q);
    if cols.ncols() > 0 {
        let sol = nnls(&cols, &(-rhs), 1e-12);
        for (k, &i) in act_u.iter().enumerate() {
            u[i] = sol[k];
        }
        for (k, &j) in act_v.iter().enumerate() {
            v[j] = sol[act_u.len() + k];
        }
    }
    Ok((u, v, w))
}

/// Stationarity violation at an externally supplied primal point: fits
/// `(u, v, w)` by nonnegative least squares on the active gradients first,
/// then evaluates [`kkt_residual`] with the inner copy set to `y`.
pub fn kkt_residual_at_primal(
    problem: &ProblemDef,
    z: &DVector<f64>,
    lambda: f64,
    tau_act: f64,
) -> Result<f64> {
    let (u, v, w) = fit_multipliers(problem, z, lambda, tau_act)?;
    let d = problem.dims;
    let y = problem.y_of(z);
    let it = Iterate {
        x: z.rows(0, d.n).into_owned(),
        varsigma: y.clone(),
        y,
        u,
        v,
        w,
    };
    kkt_residual(problem, &it, lambda)
}

fn gray(t: f64, tau: f64) -> bool {
    t > 0.1 * tau && t < 10.0 * tau
}

fn rank_of(rows: &DMatrix<f64>) -> usize {
    if rows.nrows() == 0 {
        return 0;
    }
    let svd = rows.clone().svd(false, false);
    let smax = svd.singular_values.max();
    if smax <= 0.0 {
        return 0;
    }
    svd.singular_values.iter().filter(|&&s| s > RANK_TOL * smax).count()
}

fn rank_check(rows: DMatrix<f64>, any_gray: bool) -> RankCheck {
    let active_rows = rows.nrows();
    if active_rows == 0 {
        return RankCheck { verdict: Verdict::Holds, active_rows, rank: 0 };
    }
    let rank = rank_of(&rows);
    let verdict = if any_gray {
        Verdict::Undecidable
    } else if rank == active_rows {
        Verdict::Holds
    } else {
        Verdict::Fails
    };
    RankCheck { verdict, active_rows, rank }
}

/// Linear independence of the active upper-level family
/// (`G` rows together with `g` rows).
pub fn check_licq_upper(problem: &ProblemDef, z: &DVector<f64>, tau_act: f64) -> Result<RankCheck> {
    let d = problem.dims;
    let g_up = problem.g_upper(z);
    let g = eval_g(problem, z)?;
    let mut any_gray = false;
    let mut rows: Vec<DVector<f64>> = Vec::new();
    if d.p > 0 {
        let jg_up = problem.jac_g_upper(z);
        for i in 0..d.p {
            any_gray |= gray(g_up[i].abs(), tau_act);
            if g_up[i].abs() <= tau_act {
                rows.push(jg_up.row(i).transpose());
            }
        }
    }
    if d.q > 0 {
        let jg = jac_g(problem, z)?;
        for j in 0..d.q {
            any_gray |= gray(g[j].abs(), tau_act);
            if g[j].abs() <= tau_act {
                rows.push(jg.row(j).transpose());
            }
        }
    }
    let mat = DMatrix::from_fn(rows.len(), d.nz(), |r, c| rows[r][c]);
    Ok(rank_check(mat, any_gray))
}

/// Linear independence of the active inner-gradient family
/// (`jac_g0_s` rows at `(z, varsigma)`).
pub fn check_licq_lower(
    problem: &ProblemDef,
    z: &DVector<f64>,
    varsigma: &DVector<f64>,
    tau_act: f64,
) -> Result<RankCheck> {
    let d = problem.dims;
    if d.q == 0 {
        return Ok(RankCheck { verdict: Verdict::Holds, active_rows: 0, rank: 0 });
    }
    let g0 = problem.g0(z, varsigma);
    let js = problem.jac_g0_s(z, varsigma);
    let mut any_gray = false;
    let mut rows: Vec<DVector<f64>> = Vec::new();
    for j in 0..d.q {
        any_gray |= gray(g0[j].abs(), tau_act);
        if g0[j].abs() <= tau_act {
            rows.push(js.row(j).transpose());
        }
    }
    let mat = DMatrix::from_fn(rows.len(), d.m, |r, c| rows[r][c]);
    Ok(rank_check(mat, any_gray))
}

/// Strict complementarity of the inner pair family: the degenerate set of
/// the partition must be empty.
pub fn check_scc(partition_g0: &IndexPartition) -> Verdict {
    let decisive_theta = partition_g0
        .theta
        .iter()
        .any(|j| !partition_g0.gray.contains(j));
    if decisive_theta {
        return Verdict::Fails;
    }
    if !partition_g0.theta.is_empty() || !partition_g0.gray.is_empty() {
        return Verdict::Undecidable;
    }
    Verdict::Holds
}

/// The `(n+2m)^2` second-order form `blockdiag(H_L, 0) - lambda box(l)`,
/// which coincides with the top-left block of the Newton matrix.
fn second_order_form(problem: &ProblemDef, it: &Iterate, lambda: f64) -> DMatrix<f64> {
    let d = problem.dims;
    let (n, m) = (d.n, d.m);
    let nz = n + m;
    let z = it.z();
    let mut h_l = problem.hess_f(&z);
    if d.p > 0 {
        h_l += problem.hess_g_upper(&z, &it.u);
    }
    if d.q > 0 {
        h_l += hess_g_comb(problem, &z, &it.v);
    }
    h_l += problem.hess_f_lower(&z) * lambda;

    let h_g0 = if d.q > 0 {
        problem.hess_g0(&z, &it.varsigma, &it.w)
    } else {
        DMatrix::zeros(nz + m, nz + m)
    };
    let f0_jac = problem.jac_f0(&z);
    let hess_f0_s = problem.hess_f0(&z, &it.varsigma);

    let mut mmat = DMatrix::zeros(nz + m, nz + m);
    for r in 0..nz {
        for c in 0..nz {
            mmat[(r, c)] = h_l[(r, c)] - lambda * (hess_f0_s[(r, c)] + h_g0[(r, c)]);
        }
    }
    for r in 0..nz {
        for c in 0..m {
            let cross = f0_jac[(c, r)] + h_g0[(r, nz + c)];
            mmat[(r, nz + c)] = -lambda * cross;
            mmat[(nz + c, r)] = -lambda * cross;
        }
    }
    for r in 0..m {
        for c in 0..m {
            mmat[(nz + r, nz + c)] = -lambda * h_g0[(nz + r, nz + c)];
        }
    }
    mmat
}

/// Positivity of the reduced second-order form on the critical subspace cut
/// out by the strictly-active (`nu`) gradients.
pub fn check_sossc(
    problem: &ProblemDef,
    it: &Iterate,
    lambda: f64,
    tau_act: f64,
) -> Result<SosscCheck> {
    let d = problem.dims;
    let ev = evaluate(problem, it)?;
    let part_u = classify(&ev.g_upper, &it.u, tau_act);
    let part_g = classify(&ev.g, &it.v, tau_act);
    let part_g0 = classify(&ev.g0, &it.w, tau_act);
    let any_gray = !(part_u.gray.is_empty() && part_g.gray.is_empty() && part_g0.gray.is_empty());

    let nz = d.nz();
    let dim = nz + d.m;
    let mut rows: Vec<DVector<f64>> = Vec::new();
    for &i in &part_u.nu {
        let mut r = DVector::zeros(dim);
        r.rows_mut(0, nz).copy_from(&ev.g_upper_jac.row(i).transpose());
        rows.push(r);
    }
    for &j in &part_g.nu {
        let mut r = DVector::zeros(dim);
        r.rows_mut(0, nz).copy_from(&ev.g_jac.row(j).transpose());
        rows.push(r);
    }
    for &j in &part_g0.nu {
        let mut r = DVector::zeros(dim);
        r.rows_mut(0, nz).copy_from(&ev.g0_jac_z.row(j).transpose());
        r.rows_mut(nz, d.m).copy_from(&ev.g0_jac_s.row(j).transpose());
        rows.push(r);
    }

    let basis = if rows.is_empty() {
        DMatrix::identity(dim, dim)
    } else {
        // full orthonormal eigenbasis of N^T N; the null space of N is the
        // span of eigenvectors with (relatively) vanishing eigenvalue
        let stacked = DMatrix::from_fn(rows.len(), dim, |r, c| rows[r][c]);
        let gram = stacked.transpose() * &stacked;
        let eig = nalgebra::SymmetricEigen::new(gram);
        let emax = eig.eigenvalues.max().max(0.0);
        // the Gram spectrum squares the singular values, so the zero
        // cluster sits near eps * emax; 1e-12 separates it safely
        let floor = 1e-12 * emax;
        let null_idx: Vec<usize> = (0..dim)
            .filter(|&k| eig.eigenvalues[k].max(0.0) <= floor)
            .collect();
        let mut b = DMatrix::zeros(dim, null_idx.len());
        for (c, &k) in null_idx.iter().enumerate() {
            b.set_column(c, &eig.eigenvectors.column(k));
        }
        b
    };

    if basis.ncols() == 0 {
        let verdict = if any_gray { Verdict::Undecidable } else { Verdict::Holds };
        return Ok(SosscCheck { verdict, min_eigenvalue: None, subspace_dim: 0 });
    }

    let mmat = second_order_form(problem, it, lambda);
    let reduced = basis.transpose() * &mmat * &basis;
    let sym = (&reduced + reduced.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let min_eig = eig.eigenvalues.min();
    let verdict = if any_gray {
        Verdict::Undecidable
    } else if min_eig > EIG_TOL {
        Verdict::Holds
    } else {
        Verdict::Fails
    };
    Ok(SosscCheck {
        verdict,
        min_eigenvalue: Some(min_eig),
        subspace_dim: basis.ncols(),
    })
}

/// Bundle of all regularity checks; the overall verdict is the conjunction
/// of both LICQ checks, strict complementarity and the second-order test.
pub fn cd_regularity_report(
    problem: &ProblemDef,
    it: &Iterate,
    lambda: f64,
    tau_act: f64,
) -> Result<RegularityReport> {
    let z = it.z();
    let ev = evaluate(problem, it)?;
    let partition_upper = classify(&ev.g_upper, &it.u, tau_act);
    let partition_g = classify(&ev.g, &it.v, tau_act);
    let partition_g0 = classify(&ev.g0, &it.w, tau_act);
    let licq_upper = check_licq_upper(problem, &z, tau_act)?;
    let licq_lower = check_licq_lower(problem, &z, &it.varsigma, tau_act)?;
    let scc = check_scc(&partition_g0);
    let sossc = check_sossc(problem, it, lambda, tau_act)?;
    let cd_regular = licq_upper
        .verdict
        .and(licq_lower.verdict)
        .and(scc)
        .and(sossc.verdict);
    Ok(RegularityReport {
        kkt_residual_norm: kkt_residual(problem, it, lambda)?,
        licq_upper,
        licq_lower,
        scc,
        sossc,
        partition_upper,
        partition_g,
        partition_g0,
        varsigma_gap: it.varsigma_gap(),
        cd_regular,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FdCheckReport {
    pub checked_points: usize,
    pub skipped_points: usize,
    pub max_rel_jacobian_err: f64,
    pub max_rel_merit_grad_err: f64,
    pub pass: bool,
}

/// Derivative-oracle validation harness: analytic Jacobian of the stacked
/// residual and the merit gradient against central differences at the given
/// sample points. Points with a nearly-degenerate pair are skipped.
pub fn finite_diff_check(
    problem: &ProblemDef,
    lambda: f64,
    points: &[Iterate],
) -> Result<FdCheckReport> {
    use crate::jacobian::{assemble_w_from, DegenRule};
    use crate::residual::{merit, residual};

    let mut max_jac = 0.0f64;
    let mut max_grad = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for it in points {
        let ev = evaluate(problem, it)?;
        let d = problem.dims;
        let nondeg = (0..d.p)
            .map(|i| (ev.g_upper[i], it.u[i]))
            .chain((0..d.q).map(|j| (ev.g[j], it.v[j])))
            .chain((0..d.q).map(|j| (ev.g0[j], it.w[j])))
            .all(|(c, dd)| (c * c + dd * dd).sqrt() > 1e-3);
        if !nondeg {
            skipped += 1;
            continue;
        }
        checked += 1;
        let flat = it.flatten();
        let w = assemble_w_from(problem, &ev, it, lambda, 1e-10, DegenRule::DirectionalOnes);
        let fd_jac = crate::fd::jacobian(
            |f: &DVector<f64>| {
                let probe = Iterate::unflatten(d, f).unwrap();
                residual(problem, &probe, lambda).unwrap()
            },
            &flat,
            d.total(),
        );
        max_jac = max_jac.max(crate::fd::rel_err_mat(&w, &fd_jac));

        let grad = w.transpose() * crate::residual::residual_from(&ev, it, lambda, d);
        let fd_grad = crate::fd::grad(
            |f: &DVector<f64>| {
                let probe = Iterate::unflatten(d, f).unwrap();
                merit(problem, &probe, lambda).unwrap()
            },
            &flat,
        );
        max_grad = max_grad.max(crate::fd::rel_err_vec(&grad, &fd_grad));
    }
    Ok(FdCheckReport {
        checked_points: checked,
        skipped_points: skipped,
        max_rel_jacobian_err: max_jac,
        max_rel_merit_grad_err: max_grad,
        pass: max_jac < 1e-5 && max_grad < 1e-5,
    })
}
