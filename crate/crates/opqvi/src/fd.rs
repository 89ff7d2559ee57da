//! Central finite differences.
//!
//! Used as the independent oracle in the derivative test harness and as an
//! authoring fallback when a problem definition lacks analytic derivatives.
//! Step size is `1e-6 * max(1, |coordinate|)` throughout.

use nalgebra::{DMatrix, DVector};

/// Per-coordinate central-difference step.
pub fn step(coord: f64) -> f64 {
    1e-6 * f64::max(1.0, coord.abs())
}

/// Central-difference gradient of a scalar function.
pub fn grad<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = step(x[i]);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Central-difference Jacobian of a vector function (rows = outputs).
pub fn jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(
    f: F,
    x: &DVector<f64>,
    out_len: usize,
) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(out_len, x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = step(x[i]);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        for r in 0..out_len {
            jac[(r, i)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    jac
}

/// Max abs entry difference scaled by `max(1, |reference|_inf)`.
pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = f64::max(1.0, a.amax());
    (a - b).amax() / scale
}

/// Authoring fallback: a full oracle bundle built from value oracles alone.
///
/// First derivatives come from central differences; the Hessian
/// combinations use direct 4-point second differences at `1e-4` step
/// scale. Intended for prototyping problem definitions; the shipped
/// problems use analytic derivatives.
pub mod fallback {
    use super::*;
    use crate::problem::{Dims, Oracles};
    use std::sync::Arc;

    type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
    type VecFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
    type Vec2Fn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;

    fn hess_step(coord: f64) -> f64 {
        1e-4 * f64::max(1.0, coord.abs())
    }

    /// Direct 4-point second differences of a scalar map; symmetric by
    /// construction.
    fn hess_direct<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>) -> DMatrix<f64> {
        let k = x.len();
        let mut h_mat = DMatrix::zeros(k, k);
        let f0 = f(x);
        let mut xp = x.clone();
        for i in 0..k {
            let hi = hess_step(x[i]);
            xp[i] = x[i] + hi;
            let fp = f(&xp);
            xp[i] = x[i] - hi;
            let fm = f(&xp);
            xp[i] = x[i];
            h_mat[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
            for j in i + 1..k {
                let hj = hess_step(x[j]);
                xp[i] = x[i] + hi;
                xp[j] = x[j] + hj;
                let fpp = f(&xp);
                xp[j] = x[j] - hj;
                let fpm = f(&xp);
                xp[i] = x[i] - hi;
                xp[j] = x[j] + hj;
                let fmp = f(&xp);
                xp[j] = x[j] - hj;
                let fmm = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                let v = (fpp - fpm - fmp + fmm) / (4.0 * hi * hj);
                h_mat[(i, j)] = v;
                h_mat[(j, i)] = v;
            }
        }
        h_mat
    }

    /// Build every derivative oracle from the four value maps.
    pub fn oracles_from_values(
        dims: Dims,
        f_val: ScalarFn,
        g_upper_val: VecFn,
        f0_val: VecFn,
        g0_val: Vec2Fn,
    ) -> Oracles {
        let nz = dims.nz();
        let (m, p, q) = (dims.m, dims.p, dims.q);

        let f_grad: VecFn = {
            let f = f_val.clone();
            Arc::new(move |z| grad(|z| f(z), z))
        };
        let f_hess = {
            let f = f_val.clone();
            Arc::new(move |z: &DVector<f64>| hess_direct(|z| f(z), z))
        };
        let g_upper_jac = {
            let g = g_upper_val.clone();
            Arc::new(move |z: &DVector<f64>| jacobian(|z| g(z), z, p))
        };
        let g_upper_hess_comb = {
            let g = g_upper_val.clone();
            Arc::new(move |z: &DVector<f64>, u: &DVector<f64>| {
                hess_direct(|z| u.dot(&g(z)), z)
            })
        };
        let f0_jac = {
            let f0 = f0_val.clone();
            Arc::new(move |z: &DVector<f64>| jacobian(|z| f0(z), z, m))
        };
        let f0_hess_comb = {
            let f0 = f0_val.clone();
            Arc::new(move |z: &DVector<f64>, a: &DVector<f64>| {
                hess_direct(|z| a.dot(&f0(z)), z)
            })
        };
        let g0_jac_z = {
            let g0 = g0_val.clone();
            Arc::new(move |z: &DVector<f64>, s: &DVector<f64>| {
                jacobian(|z| g0(z, s), z, q)
            })
        };
        let g0_jac_s = {
            let g0 = g0_val.clone();
            Arc::new(move |z: &DVector<f64>, s: &DVector<f64>| {
                jacobian(|s| g0(z, s), s, q)
            })
        };
        let g0_hess_comb = {
            let g0 = g0_val.clone();
            Arc::new(move |z: &DVector<f64>, s: &DVector<f64>, w: &DVector<f64>| {
                let joint = {
                    let mut j = DVector::zeros(nz + m);
                    j.rows_mut(0, nz).copy_from(z);
                    j.rows_mut(nz, m).copy_from(s);
                    j
                };
                let weighted = |j: &DVector<f64>| {
                    let z = j.rows(0, nz).into_owned();
                    let s = j.rows(nz, m).into_owned();
                    w.dot(&g0(&z, &s))
                };
                hess_direct(weighted, &joint)
            })
        };
        Oracles {
            f_val,
            f_grad,
            f_hess,
            g_upper_val,
            g_upper_jac,
            g_upper_hess_comb,
            f0_val,
            f0_jac,
            f0_hess_comb,
            g0_val,
            g0_jac_z,
            g0_jac_s,
            g0_hess_comb,
        }
    }
}

/// Max abs entry difference scaled by `max(1, |reference|_inf)`.
pub fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = f64::max(1.0, a.amax());
    (a - b).amax() / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gradient_of_quadratic() {
        let f = |x: &DVector<f64>| x[0] * x[0] + 3.0 * x[0] * x[1];
        let x = DVector::from_vec(vec![2.0, -1.0]);
        let g = grad(f, &x);
        assert_relative_eq!(g[0], 2.0 * 2.0 + -3.0, max_relative = 1e-8);
        assert_relative_eq!(g[1], 3.0 * 2.0, max_relative = 1e-8);
    }

    #[test]
    fn jacobian_of_affine_is_exact() {
        let f = |x: &DVector<f64>| {
            DVector::from_vec(vec![x[0] - 2.0 * x[1] + 1.0, 4.0 * x[1]])
        };
        let x = DVector::from_vec(vec![0.3, 0.7]);
        let j = jacobian(f, &x, 2);
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.0, 4.0]);
        assert!(rel_err_mat(&expect, &j) < 1e-9);
    }

    #[test]
    fn fallback_oracles_match_analytic_ones() {
        use std::sync::Arc;
        let analytic = crate::library::ex_mo63();
        let p = &analytic.def;
        let dims = p.dims;
        let (a, b, c, d) = (
            analytic.def.clone(),
            analytic.def.clone(),
            analytic.def.clone(),
            analytic.def.clone(),
        );
        let oracles = fallback::oracles_from_values(
            dims,
            Arc::new(move |z| a.f(z)),
            Arc::new(move |z| b.g_upper(z)),
            Arc::new(move |z| c.f0(z)),
            Arc::new(move |z, s| d.g0(z, s)),
        );
        let fd_def = crate::problem::ProblemDef::new(dims, "mo63_fd", "", oracles);
        let z = DVector::from_vec(vec![0.3, 1.2, -0.4]);
        let s = DVector::from_vec(vec![0.5, 0.8]);
        let w = DVector::from_vec(vec![1.5, -0.7]);
        assert!(rel_err_vec(&p.grad_f(&z), &fd_def.grad_f(&z)) < 1e-6);
        assert!(rel_err_mat(&p.hess_f(&z), &fd_def.hess_f(&z)) < 1e-5);
        assert!(rel_err_mat(&p.jac_g0_z(&z, &s), &fd_def.jac_g0_z(&z, &s)) < 1e-6);
        assert!(rel_err_mat(&p.hess_g0(&z, &s, &w), &fd_def.hess_g0(&z, &s, &w)) < 1e-5);

        // the solver still reaches the optimum on the value-only definition
        let cfg = crate::solver::SolverConfig { lambda: 1.0, eps: 1e-5, ..Default::default() };
        let start = crate::solver::default_start(
            &fd_def,
            Some((&analytic.starts[0].0, &analytic.starts[0].1)),
        );
        let rep = crate::solver::solve(&fd_def, &cfg, Some(&start)).unwrap();
        assert!(
            matches!(rep.status, crate::solver::Status::Converged),
            "{:?}",
            rep.status
        );
        assert!((rep.f_hat + 49.0).abs() < 1e-3, "F = {}", rep.f_hat);
    }
}
