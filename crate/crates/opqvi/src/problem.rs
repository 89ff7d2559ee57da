//! Problem model: dimensions, derivative oracles and the stacked iterate.
//!
//! An OPQVI instance is described entirely through callable oracles for the
//! upper objective `F`, upper constraints `G`, the inner map `f0` and the
//! parametrized inner constraints `g0(z, s)` where `z = (x, y)` and `s` is
//! the inner decision variable. Hessians are exposed only as
//! multiplier-weighted combinations, which is exactly what the Newton matrix
//! needs; third-order tensors never appear.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Problem dimensions.
///
/// `n` upper variables, `m` lower variables (and inner copies), `p` upper
/// constraints, `q` inner constraints. The stacked Newton system has size
/// `n + 2m + p + 2q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
}

impl Dims {
    pub fn new(n: usize, m: usize, p: usize, q: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Dim("m must be at least 1".into()));
        }
        Ok(Dims { n, m, p, q })
    }

    /// Length of `z = (x, y)`.
    pub fn nz(&self) -> usize {
        self.n + self.m
    }

    /// Total size of the stacked system.
    pub fn total(&self) -> usize {
        self.n + 2 * self.m + self.p + 2 * self.q
    }
}

type ScalarOracle = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type VecOracle = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type MatOracle = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type WeightedMatOracle = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type Vec2Oracle = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
type Mat2Oracle = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
type WeightedMat2Oracle =
    Arc<dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Oracle bundle for one problem. All closures must be deterministic and
/// free of hidden mutable state so independent solves can run concurrently.
#[derive(Clone)]
pub struct ProblemDef {
    pub dims: Dims,
    pub name: String,
    pub notes: String,
    f_val: ScalarOracle,
    f_grad: VecOracle,
    f_hess: MatOracle,
    g_upper_val: VecOracle,
    g_upper_jac: MatOracle,
    g_upper_hess_comb: WeightedMatOracle,
    f0_val: VecOracle,
    f0_jac: MatOracle,
    f0_hess_comb: WeightedMatOracle,
    g0_val: Vec2Oracle,
    g0_jac_z: Mat2Oracle,
    g0_jac_s: Mat2Oracle,
    g0_hess_comb: WeightedMat2Oracle,
}

/// Builder-style constructor arguments for [`ProblemDef`].
pub struct Oracles {
    pub f_val: ScalarOracle,
    pub f_grad: VecOracle,
    pub f_hess: MatOracle,
    pub g_upper_val: VecOracle,
    pub g_upper_jac: MatOracle,
    pub g_upper_hess_comb: WeightedMatOracle,
    pub f0_val: VecOracle,
    pub f0_jac: MatOracle,
    pub f0_hess_comb: WeightedMatOracle,
    pub g0_val: Vec2Oracle,
    pub g0_jac_z: Mat2Oracle,
    pub g0_jac_s: Mat2Oracle,
    pub g0_hess_comb: WeightedMat2Oracle,
}

impl ProblemDef {
    pub fn new(dims: Dims, name: impl Into<String>, notes: impl Into<String>, o: Oracles) -> Self {
        ProblemDef {
            dims,
            name: name.into(),
            notes: notes.into(),
            f_val: o.f_val,
            f_grad: o.f_grad,
            f_hess: o.f_hess,
            g_upper_val: o.g_upper_val,
            g_upper_jac: o.g_upper_jac,
            g_upper_hess_comb: o.g_upper_hess_comb,
            f0_val: o.f0_val,
            f0_jac: o.f0_jac,
            f0_hess_comb: o.f0_hess_comb,
            g0_val: o.g0_val,
            g0_jac_z: o.g0_jac_z,
            g0_jac_s: o.g0_jac_s,
            g0_hess_comb: o.g0_hess_comb,
        }
    }

    fn check_z(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.dims.nz() {
            return Err(Error::Dim(format!(
                "point has length {}, expected n+m = {}",
                z.len(),
                self.dims.nz()
            )));
        }
        Ok(())
    }

    pub fn f(&self, z: &DVector<f64>) -> f64 {
        (self.f_val)(z)
    }

    pub fn grad_f(&self, z: &DVector<f64>) -> DVector<f64> {
        (self.f_grad)(z)
    }

    pub fn hess_f(&self, z: &DVector<f64>) -> DMatrix<f64> {
        (self.f_hess)(z)
    }

    pub fn g_upper(&self, z: &DVector<f64>) -> DVector<f64> {
        (self.g_upper_val)(z)
    }

    pub fn jac_g_upper(&self, z: &DVector<f64>) -> DMatrix<f64> {
        (self.g_upper_jac)(z)
    }

    /// Hessian of `u . G` at `z`.
    pub fn hess_g_upper(&self, z: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        (self.g_upper_hess_comb)(z, u)
    }

    pub fn f0(&self, z: &DVector<f64>) -> DVector<f64> {
        (self.f0_val)(z)
    }

    /// Jacobian of `f0` in the joint variable `z = (x, y)`, shape `m x (n+m)`.
    pub fn jac_f0(&self, z: &DVector<f64>) -> DMatrix<f64> {
        (self.f0_jac)(z)
    }

    /// Hessian of `a . f0` at `z` for a weight `a` of length `m`.
    pub fn hess_f0(&self, z: &DVector<f64>, a: &DVector<f64>) -> DMatrix<f64> {
        (self.f0_hess_comb)(z, a)
    }

    pub fn g0(&self, z: &DVector<f64>, s: &DVector<f64>) -> DVector<f64> {
        (self.g0_val)(z, s)
    }

    /// Jacobian of `g0(., s)` w.r.t. `z`, shape `q x (n+m)`.
    pub fn jac_g0_z(&self, z: &DVector<f64>, s: &DVector<f64>) -> DMatrix<f64> {
        (self.g0_jac_z)(z, s)
    }

    /// Jacobian of `g0(z, .)` w.r.t. the inner variable, shape `q x m`.
    pub fn jac_g0_s(&self, z: &DVector<f64>, s: &DVector<f64>) -> DMatrix<f64> {
        (self.g0_jac_s)(z, s)
    }

    /// Hessian of `w . g0` in the joint variable `(z, s)`, shape `(n+2m)^2`.
    pub fn hess_g0(&self, z: &DVector<f64>, s: &DVector<f64>, w: &DVector<f64>) -> DMatrix<f64> {
        (self.g0_hess_comb)(z, s, w)
    }

    /// The y-part of a point `z = (x, y)`.
    pub fn y_of(&self, z: &DVector<f64>) -> DVector<f64> {
        z.rows(self.dims.n, self.dims.m).into_owned()
    }

    /// Lower-level aggregate `f(z) = y . f0(z)`.
    pub fn f_lower(&self, z: &DVector<f64>) -> f64 {
        self.y_of(z).dot(&self.f0(z))
    }

    /// Gradient of `f(z) = y . f0(z)`: `f0` padded into the y-slot plus
    /// `jac_f0^T y`.
    pub fn grad_f_lower(&self, z: &DVector<f64>) -> DVector<f64> {
        let y = self.y_of(z);
        let mut g = self.jac_f0(z).transpose() * &y;
        let f0 = self.f0(z);
        for j in 0..self.dims.m {
            g[self.dims.n + j] += f0[j];
        }
        g
    }

    /// Hessian of `f(z) = y . f0(z)`:
    /// `P^T jac_f0 + jac_f0^T P + hess_f0(z, y)` with `P` the y-selection.
    pub fn hess_f_lower(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let (n, m) = (self.dims.n, self.dims.m);
        let jf0 = self.jac_f0(z);
        let y = self.y_of(z);
        let mut h = self.hess_f0(z, &y);
        for j in 0..m {
            for c in 0..n + m {
                h[(n + j, c)] += jf0[(j, c)];
                h[(c, n + j)] += jf0[(j, c)];
            }
        }
        h
    }
}

/// `g(z) = g0(x, y, y)`.
pub fn eval_g(problem: &ProblemDef, z: &DVector<f64>) -> Result<DVector<f64>> {
    problem.check_z(z)?;
    let y = problem.y_of(z);
    Ok(problem.g0(z, &y))
}

/// Jacobian of `g(z) = g0(x, y, y)`: the chain rule folds the inner Jacobian
/// into the y-columns.
pub fn jac_g(problem: &ProblemDef, z: &DVector<f64>) -> Result<DMatrix<f64>> {
    problem.check_z(z)?;
    let (n, m, q) = (problem.dims.n, problem.dims.m, problem.dims.q);
    let y = problem.y_of(z);
    let mut jac = problem.jac_g0_z(z, &y);
    let js = problem.jac_g0_s(z, &y);
    for r in 0..q {
        for c in 0..m {
            jac[(r, n + c)] += js[(r, c)];
        }
    }
    Ok(jac)
}

/// Hessian of `v . g` with `g(z) = g0(x, y, y)`; the inner argument is
/// eliminated through the selection `P = [0 I]`.
pub fn hess_g_comb(problem: &ProblemDef, z: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let (n, m) = (problem.dims.n, problem.dims.m);
    let nz = n + m;
    let y = problem.y_of(z);
    let h = problem.hess_g0(z, &y, v); // (n+2m)^2 over (z, s)
    let mut out = DMatrix::zeros(nz, nz);
    for r in 0..nz {
        for c in 0..nz {
            out[(r, c)] = h[(r, c)];
        }
    }
    // cross blocks H_zs P and (H_zs P)^T land on the y-columns/rows
    for r in 0..nz {
        for j in 0..m {
            out[(r, n + j)] += h[(r, nz + j)];
            out[(n + j, r)] += h[(nz + j, r)];
        }
    }
    // P^T H_ss P
    for i in 0..m {
        for j in 0..m {
            out[(n + i, n + j)] += h[(nz + i, nz + j)];
        }
    }
    out
}

/// Full unknown of the stacked system, flattening order `(x, y, s, u, v, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    /// Inner decision variable, the relaxed copy of `y`.
    pub varsigma: DVector<f64>,
    /// Multipliers for the upper constraints `G`.
    pub u: DVector<f64>,
    /// Multipliers for `g(z) = g0(x, y, y)`.
    pub v: DVector<f64>,
    /// Multipliers for `g0(z, varsigma)`.
    pub w: DVector<f64>,
}

impl Iterate {
    pub fn zeros(dims: Dims) -> Self {
        Iterate {
            x: DVector::zeros(dims.n),
            y: DVector::zeros(dims.m),
            varsigma: DVector::zeros(dims.m),
            u: DVector::zeros(dims.p),
            v: DVector::zeros(dims.q),
            w: DVector::zeros(dims.q),
        }
    }

    pub fn dims_match(&self, dims: Dims) -> bool {
        self.x.len() == dims.n
            && self.y.len() == dims.m
            && self.varsigma.len() == dims.m
            && self.u.len() == dims.p
            && self.v.len() == dims.q
            && self.w.len() == dims.q
    }

    /// Stacked point `z = (x, y)`.
    pub fn z(&self) -> DVector<f64> {
        let mut z = DVector::zeros(self.x.len() + self.y.len());
        z.rows_mut(0, self.x.len()).copy_from(&self.x);
        z.rows_mut(self.x.len(), self.y.len()).copy_from(&self.y);
        z
    }

    pub fn flatten(&self) -> DVector<f64> {
        let total =
            self.x.len() + 2 * self.y.len() + self.u.len() + self.v.len() + self.w.len();
        let mut out = DVector::zeros(total);
        let mut at = 0;
        for block in [&self.x, &self.y, &self.varsigma, &self.u, &self.v, &self.w] {
            out.rows_mut(at, block.len()).copy_from(block);
            at += block.len();
        }
        out
    }

    pub fn unflatten(dims: Dims, flat: &DVector<f64>) -> Result<Self> {
        if flat.len() != dims.total() {
            return Err(Error::Dim(format!(
                "flat iterate has length {}, expected {}",
                flat.len(),
                dims.total()
            )));
        }
        let mut at = 0;
        let mut take = |len: usize| {
            let v = flat.rows(at, len).into_owned();
            at += len;
            v
        };
        Ok(Iterate {
            x: take(dims.n),
            y: take(dims.m),
            varsigma: take(dims.m),
            u: take(dims.p),
            v: take(dims.q),
            w: take(dims.q),
        })
    }

    /// Relative distance between `y` and the inner copy,
    /// `|y - varsigma| / max(1, |y| + |varsigma|)`.
    pub fn varsigma_gap(&self) -> f64 {
        let diff = (&self.y - &self.varsigma).norm();
        diff / f64::max(1.0, self.y.norm() + self.varsigma.norm())
    }

    /// In-place `self += alpha * d` where `d` is a flat direction.
    pub fn step(&self, dims: Dims, d: &DVector<f64>, alpha: f64) -> Result<Self> {
        let flat = self.flatten() + d * alpha;
        Iterate::unflatten(dims, &flat)
    }
}

/// Shared helpers for zero-valued oracles of the right shape.
pub mod zero {
    use super::*;

    pub fn scalar() -> ScalarOracle {
        Arc::new(|_| 0.0)
    }

    pub fn vector(len: usize) -> VecOracle {
        Arc::new(move |_| DVector::zeros(len))
    }

    pub fn matrix(r: usize, c: usize) -> MatOracle {
        Arc::new(move |_| DMatrix::zeros(r, c))
    }

    pub fn weighted_matrix(r: usize, c: usize) -> WeightedMatOracle {
        Arc::new(move |_, _| DMatrix::zeros(r, c))
    }

    pub fn weighted_matrix2(r: usize, c: usize) -> WeightedMat2Oracle {
        Arc::new(move |_, _, _| DMatrix::zeros(r, c))
    }
}
