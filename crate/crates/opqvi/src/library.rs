//! Built-in problem instances, the seeded quadratic generator and the
//! bilevel-to-OPQVI adapter, plus a registry keyed by name so the CLI can
//! select problems from a JSON descriptor.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::problem::{zero, Dims, Oracles, ProblemDef};
use crate::{Error, Result};

/// A registered problem: oracles plus starting points and reference data.
#[derive(Clone)]
pub struct ProblemEntry {
    pub name: String,
    pub def: ProblemDef,
    /// Registered starting points `(x0, y0)`.
    pub starts: Vec<(DVector<f64>, DVector<f64>)>,
    /// Known best objective value, present only with a provenance note.
    pub best_f: Option<f64>,
    pub provenance: String,
}

/// Generator parameters carried by the run descriptor.
#[derive(Debug, Clone, Default)]
pub struct GeneratorParams {
    pub t: Option<usize>,
    pub seed: u64,
}

type EntryBuilder = Arc<dyn Fn(&GeneratorParams) -> Result<ProblemEntry> + Send + Sync>;

/// Immutable-after-startup name -> builder map.
pub struct Registry {
    builders: BTreeMap<String, EntryBuilder>,
}

impl Registry {
    pub fn new() -> Self {
        Registry { builders: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, builder: EntryBuilder) {
        self.builders.insert(name.to_string(), builder);
    }

    pub fn names(&self) -> Vec<String> {
        self.builders.keys().cloned().collect()
    }

    pub fn instantiate(&self, name: &str, params: &GeneratorParams) -> Result<ProblemEntry> {
        let b = self
            .builders
            .get(name)
            .ok_or_else(|| Error::UnknownProblem(name.to_string()))?;
        b(params)
    }
}

impl Default for Registry {
    fn default() -> Self {
        Self::new()
    }
}

/// Registry with every shipped problem.
pub fn builtin_registry() -> Registry {
    let mut r = Registry::new();
    r.register("mo63", Arc::new(|_| Ok(ex_mo63())));
    r.register("mo64", Arc::new(|_| Ok(ex_mo64())));
    r.register("qvi_worked", Arc::new(|_| Ok(qvi_worked_example())));
    r.register(
        "boc",
        Arc::new(|p: &GeneratorParams| {
            let t = p.t.ok_or_else(|| Error::Config("boc requires `t`".into()))?;
            boc_generator(t, p.seed)
        }),
    );
    r
}

/// Two-player Nash-game instance, `n=1, m=2, p=2, q=2`. Known local optimum
/// `x = 0, y = (9, 6)` with objective `-49`.
pub fn ex_mo63() -> ProblemEntry {
    let dims = Dims::new(1, 2, 2, 2).unwrap();
    let def = ProblemDef::new(
        dims,
        "mo63",
        "Nash-game constrained instance; duplicated aggregate constraint rows \
         make LICQ fail at the optimum.",
        Oracles {
            f_val: Arc::new(|z: &DVector<f64>| {
                let (x, y1, y2) = (z[0], z[1], z[2]);
                x - 3.0 * y1 - 11.0 * y2 / 3.0 + (y1 - 9.0) * (y1 - 9.0) / 2.0
            }),
            f_grad: Arc::new(|z: &DVector<f64>| {
                DVector::from_vec(vec![1.0, -3.0 + (z[1] - 9.0), -11.0 / 3.0])
            }),
            f_hess: Arc::new(|_| {
                DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0, 0.0]))
            }),
            g_upper_val: Arc::new(|z: &DVector<f64>| {
                DVector::from_vec(vec![-1.0 - z[0], -1.0 + z[0]])
            }),
            g_upper_jac: Arc::new(|_| {
                DMatrix::from_row_slice(2, 3, &[-1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
            }),
            g_upper_hess_comb: zero::weighted_matrix(3, 3),
            f0_val: Arc::new(|z: &DVector<f64>| {
                let (y1, y2) = (z[1], z[2]);
                DVector::from_vec(vec![
                    -34.0 + 2.0 * y1 + 8.0 * y2 / 3.0,
                    -97.0 / 4.0 + 5.0 * y1 / 4.0 + 2.0 * y2,
                ])
            }),
            f0_jac: Arc::new(|_| {
                DMatrix::from_row_slice(2, 3, &[0.0, 2.0, 8.0 / 3.0, 0.0, 5.0 / 4.0, 2.0])
            }),
            f0_hess_comb: zero::weighted_matrix(3, 3),
            g0_val: Arc::new(|z: &DVector<f64>, s: &DVector<f64>| {
                let (x, y1, y2) = (z[0], z[1], z[2]);
                DVector::from_vec(vec![y1 + s[1] - 15.0 - x, y2 + s[0] - 15.0 - x])
            }),
            g0_jac_z: Arc::new(|_, _| {
                DMatrix::from_row_slice(2, 3, &[-1.0, 1.0, 0.0, -1.0, 0.0, 1.0])
            }),
            g0_jac_s: Arc::new(|_, _| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])),
            g0_hess_comb: zero::weighted_matrix2(5, 5),
        },
    );
    ProblemEntry {
        name: "mo63".into(),
        def,
        starts: vec![(DVector::from_vec(vec![0.0]), DVector::from_vec(vec![0.0, 0.0]))],
        best_f: Some(-49.0),
        provenance: "known local optimum x=0, y=(9,6), F=-49".into(),
    }
}

fn hinge(t: f64) -> f64 {
    t.max(0.0)
}

/// Oligopolistic market-equilibrium instance, `n=1, m=2, p=0, q=3`. Known
/// solution `x = 135.488, y = (31.56, 13.56)` with objective `7.39`. The
/// objective is C^1 but not C^2 at `x = 135`; the one-sided Hessian uses the
/// convention `max'(0) = 0`.
pub fn ex_mo64() -> ProblemEntry {
    let dims = Dims::new(1, 2, 0, 3).unwrap();
    let def = ProblemDef::new(
        dims,
        "mo64",
        "Market-equilibrium instance without upper constraints.",
        Oracles {
            f_val: Arc::new(|z: &DVector<f64>| {
                let (x, y1, y2) = (z[0], z[1], z[2]);
                hinge(x - 135.0).powi(2)
                    + 0.6 * (y1 - 34.0) * (y1 - 34.0)
                    + 0.6 * (y2 - 16.0) * (y2 - 16.0)
            }),
            f_grad: Arc::new(|z: &DVector<f64>| {
                DVector::from_vec(vec![
                    2.0 * hinge(z[0] - 135.0),
                    1.2 * (z[1] - 34.0),
                    1.2 * (z[2] - 16.0),
                ])
            }),
            f_hess: Arc::new(|z: &DVector<f64>| {
                let hxx = if z[0] > 135.0 { 2.0 } else { 0.0 };
                DMatrix::from_diagonal(&DVector::from_vec(vec![hxx, 1.2, 1.2]))
            }),
            g_upper_val: zero::vector(0),
            g_upper_jac: zero::matrix(0, 3),
            g_upper_hess_comb: zero::weighted_matrix(3, 3),
            f0_val: Arc::new(|z: &DVector<f64>| {
                let (y1, y2) = (z[1], z[2]);
                DVector::from_vec(vec![-76.0 + 2.0 * y1 + y2, -72.0 + y1 + 2.0 * y2])
            }),
            f0_jac: Arc::new(|_| {
                DMatrix::from_row_slice(2, 3, &[0.0, 2.0, 1.0, 0.0, 1.0, 2.0])
            }),
            f0_hess_comb: zero::weighted_matrix(3, 3),
            g0_val: Arc::new(|z: &DVector<f64>, s: &DVector<f64>| {
                DVector::from_vec(vec![-0.333 * z[0] + s[0] + s[1], -s[0], -s[1]])
            }),
            g0_jac_z: Arc::new(|_, _| {
                DMatrix::from_row_slice(3, 3, &[-0.333, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
            }),
            g0_jac_s: Arc::new(|_, _| {
                DMatrix::from_row_slice(3, 2, &[1.0, 1.0, -1.0, 0.0, 0.0, -1.0])
            }),
            g0_hess_comb: zero::weighted_matrix2(5, 5),
        },
    );
    ProblemEntry {
        name: "mo64".into(),
        def,
        starts: vec![(DVector::from_vec(vec![0.0]), DVector::from_vec(vec![0.0, 0.0]))],
        best_f: Some(7.39),
        provenance: "known solution x=135.488, y=(31.56,13.56), F=7.39".into(),
    }
}

/// Linear QVI used by the stability module: `f0(x, y) = C y` and inner
/// constraints `A(x, y) s >= b(x, y)` with `A = diag(y1, 3 y2)` and
/// `b = (x1^2, x2^2)`, encoded as `g0 = b - A s <= 0`.
///
/// With that orientation the inner problem has the closed-form value
/// `phi(x, y) = x1^2 + (2/3) x2^2` for `y > 0`, attained at
/// `s = (x1^2/y1, x2^2/(3 y2))` with multipliers `(1, 2/3)`. The upper
/// objective is identically zero; the entry exists for stability analysis.
pub fn qvi_worked_example() -> ProblemEntry {
    let dims = Dims::new(2, 2, 0, 2).unwrap();
    let def = ProblemDef::new(
        dims,
        "qvi_worked",
        "Linear QVI with closed-form value function; no upper objective.",
        Oracles {
            f_val: zero::scalar(),
            f_grad: zero::vector(4),
            f_hess: zero::matrix(4, 4),
            g_upper_val: zero::vector(0),
            g_upper_jac: zero::matrix(0, 4),
            g_upper_hess_comb: zero::weighted_matrix(4, 4),
            f0_val: Arc::new(|z: &DVector<f64>| DVector::from_vec(vec![z[2], 2.0 * z[3]])),
            f0_jac: Arc::new(|_| {
                DMatrix::from_row_slice(2, 4, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0])
            }),
            f0_hess_comb: zero::weighted_matrix(4, 4),
            g0_val: Arc::new(|z: &DVector<f64>, s: &DVector<f64>| {
                let (x1, x2, y1, y2) = (z[0], z[1], z[2], z[3]);
                DVector::from_vec(vec![x1 * x1 - y1 * s[0], x2 * x2 - 3.0 * y2 * s[1]])
            }),
            g0_jac_z: Arc::new(|z: &DVector<f64>, s: &DVector<f64>| {
                DMatrix::from_row_slice(
                    2,
                    4,
                    &[
                        2.0 * z[0], 0.0, -s[0], 0.0,
                        0.0, 2.0 * z[1], 0.0, -3.0 * s[1],
                    ],
                )
            }),
            g0_jac_s: Arc::new(|z: &DVector<f64>, _| {
                DMatrix::from_row_slice(2, 2, &[-z[2], 0.0, 0.0, -3.0 * z[3]])
            }),
            g0_hess_comb: Arc::new(|_, _, w: &DVector<f64>| {
                // variables (x1, x2, y1, y2, s1, s2)
                let mut h = DMatrix::zeros(6, 6);
                h[(0, 0)] = 2.0 * w[0];
                h[(1, 1)] = 2.0 * w[1];
                h[(2, 4)] = -w[0];
                h[(4, 2)] = -w[0];
                h[(3, 5)] = -3.0 * w[1];
                h[(5, 3)] = -3.0 * w[1];
                h
            }),
        },
    );
    ProblemEntry {
        name: "qvi_worked".into(),
        def,
        starts: vec![(
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![1.0, 2.0 / 3f64.sqrt()]),
        )],
        best_f: None,
        provenance: "stability worked example; phi(x,y) = x1^2 + (2/3) x2^2 for y > 0".into(),
    }
}

/// Closed-form value function of the worked example, valid for `y > 0`.
pub fn worked_phi_closed_form(x: &DVector<f64>) -> f64 {
    x[0] * x[0] + 2.0 / 3.0 * x[1] * x[1]
}

/// The inner solution map of the worked example is the singleton
/// `y = (x1, x2 / sqrt(3))` for `x > 0`.
pub fn worked_solution_y(x: &DVector<f64>) -> DVector<f64> {
    DVector::from_vec(vec![x[0], x[1] / 3f64.sqrt()])
}

/// Adapter input: second-order data of the lower-level objective, i.e. the
/// oracles needed for `f0 = grad_y fhat`.
pub struct BilevelLower {
    /// `grad_y fhat(z)`, length m.
    pub grad_y: Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
    /// Jacobian of `grad_y fhat` in `z`, shape m x (n+m).
    pub jac_grad_y: Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    /// Hessian of `a . grad_y fhat` in `z` (third derivatives of fhat),
    /// shape (n+m)^2.
    pub hess_comb_grad_y:
        Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>,
}

/// Adapter input: lower-level constraints `ghat(x, s)`.
pub struct BilevelConstraints {
    pub val: Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>,
    /// q x n
    pub jac_x: Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    /// q x m
    pub jac_s: Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    /// Hessian of `w . ghat` over `(x, s)`, shape (n+m)^2.
    pub hess_comb:
        Arc<dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>,
}

/// Upper-level data for the adapter.
pub struct BilevelUpper {
    pub f_val: Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>,
    pub f_grad: Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
    pub f_hess: Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    pub g_val: Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
    pub g_jac: Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>,
    pub g_hess_comb:
        Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>,
}

/// Cast a convex-lower-level bilevel program as an OPQVI instance:
/// `f0 := grad_y fhat` and `g0(x, y, s) := ghat(x, s)`.
pub fn bilevel_adapter(
    dims: Dims,
    name: impl Into<String>,
    upper: BilevelUpper,
    lower: BilevelLower,
    cons: BilevelConstraints,
) -> ProblemDef {
    let (n, m) = (dims.n, dims.m);
    let x_of = move |z: &DVector<f64>| z.rows(0, n).into_owned();
    let val = cons.val.clone();
    let jac_x = cons.jac_x.clone();
    let jac_s = cons.jac_s.clone();
    let hess = cons.hess_comb.clone();
    ProblemDef::new(
        dims,
        name,
        "bilevel program cast through the value-function adapter",
        Oracles {
            f_val: upper.f_val,
            f_grad: upper.f_grad,
            f_hess: upper.f_hess,
            g_upper_val: upper.g_val,
            g_upper_jac: upper.g_jac,
            g_upper_hess_comb: upper.g_hess_comb,
            f0_val: lower.grad_y,
            f0_jac: lower.jac_grad_y,
            f0_hess_comb: lower.hess_comb_grad_y,
            g0_val: Arc::new(move |z, s| val(&x_of(z), s)),
            g0_jac_z: {
                let jac_x = jac_x.clone();
                Arc::new(move |z, s| {
                    let jx = jac_x(&x_of(z), s);
                    let q = jx.nrows();
                    let mut out = DMatrix::zeros(q, n + m);
                    out.view_mut((0, 0), (q, n)).copy_from(&jx);
                    out
                })
            },
            g0_jac_s: Arc::new(move |z, s| jac_s(&x_of(z), s)),
            g0_hess_comb: Arc::new(move |z, s, w| {
                // embed the (x, s) Hessian into (z, s) with zero y rows/cols
                let hxs = hess(&x_of(z), s, w);
                let mut out = DMatrix::zeros(n + 2 * m, n + 2 * m);
                for r in 0..n + m {
                    let rr = if r < n { r } else { r + m };
                    for c in 0..n + m {
                        let cc = if c < n { c } else { c + m };
                        out[(rr, cc)] = hxs[(r, c)];
                    }
                }
                out
            }),
        },
    )
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn random_spd(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
    let b = random_matrix(rng, k, k);
    &b * b.transpose() / (k as f64).sqrt() + DMatrix::identity(k, k) * 0.5
}

/// Seeded discretized bilevel optimal-control family: a quadratic bilevel
/// program with `(n, m, p, q) = (2, 2t, 3, 4t)`. Data matrices are generated
/// deterministically from the seed with the weight matrices symmetric
/// positive definite and box bounds `l < u`.
pub fn boc_generator(t: usize, seed: u64) -> Result<ProblemEntry> {
    if t == 0 {
        return Err(Error::Dim("boc generator requires t >= 1".into()));
    }
    let n = 2;
    let m = 2 * t;
    let q = 4 * t;
    let dims = Dims::new(n, m, 3, q)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_mat = random_spd(&mut rng, m);
    let d_vec = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let c_vec = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
    let c_mat = random_matrix(&mut rng, t, t);
    let p_mat = random_matrix(&mut rng, t, n);
    let u_mat = random_spd(&mut rng, t);
    let q_mat = random_matrix(&mut rng, t, n);
    let v_mat = random_spd(&mut rng, t);
    let upper_b = DVector::from_fn(t, |_, _| rng.random_range(0.5..1.5));
    let lower_b = DVector::from_fn(t, |_, _| rng.random_range(-1.5..-0.5));
    let a_mat = random_matrix(&mut rng, t, m);
    let sigma = 1.0;

    // embedding (y1; 0) - c and its y-selection
    let sel = {
        let mut s = DMatrix::zeros(m, m);
        for i in 0..t {
            s[(i, i)] = 1.0;
        }
        s
    };

    let upper = {
        let d_mat = d_mat.clone();
        let d_vec = d_vec.clone();
        let c_vec = c_vec.clone();
        let sel = sel.clone();
        let e_of = move |z: &DVector<f64>| {
            let mut e = -c_vec.clone();
            for i in 0..t {
                e[i] += z[n + i];
            }
            e
        };
        BilevelUpper {
            f_val: {
                let d_mat = d_mat.clone();
                let d_vec = d_vec.clone();
                let e_of = e_of.clone();
                Arc::new(move |z: &DVector<f64>| {
                    let e = e_of(z);
                    0.5 * e.dot(&(&d_mat * &e)) - d_vec[0] * z[0] - d_vec[1] * z[1]
                })
            },
            f_grad: {
                let d_mat = d_mat.clone();
                let d_vec = d_vec.clone();
                let sel = sel.clone();
                let e_of = e_of.clone();
                Arc::new(move |z: &DVector<f64>| {
                    let e = e_of(z);
                    let gy = &sel * (&d_mat * &e);
                    let mut g = DVector::zeros(n + m);
                    g[0] = -d_vec[0];
                    g[1] = -d_vec[1];
                    for i in 0..m {
                        g[n + i] = gy[i];
                    }
                    g
                })
            },
            f_hess: {
                let d_mat = d_mat.clone();
                let sel = sel.clone();
                Arc::new(move |_| {
                    let hyy = &sel * &d_mat * &sel;
                    let mut h = DMatrix::zeros(n + m, n + m);
                    h.view_mut((n, n), (m, m)).copy_from(&hyy);
                    h
                })
            },
            g_val: Arc::new(move |z: &DVector<f64>| {
                DVector::from_vec(vec![-z[0] + z[1] - 1.0, -z[0], -z[1]])
            }),
            g_jac: Arc::new(move |_| {
                let mut j = DMatrix::zeros(3, n + m);
                j[(0, 0)] = -1.0;
                j[(0, 1)] = 1.0;
                j[(1, 0)] = -1.0;
                j[(2, 1)] = -1.0;
                j
            }),
            g_hess_comb: zero::weighted_matrix(n + m, n + m),
        }
    };

    // f0 = grad_y fhat = (C^T U (C y1 - P x); sigma V (y2 - Q x))
    let lower = {
        let c_mat = c_mat.clone();
        let p_mat = p_mat.clone();
        let u_mat = u_mat.clone();
        let q_mat = q_mat.clone();
        let v_mat = v_mat.clone();
        let grad_y = {
            let (c_mat, p_mat, u_mat, q_mat, v_mat) = (
                c_mat.clone(),
                p_mat.clone(),
                u_mat.clone(),
                q_mat.clone(),
                v_mat.clone(),
            );
            Arc::new(move |z: &DVector<f64>| {
                let x = z.rows(0, n).into_owned();
                let y1 = z.rows(n, t).into_owned();
                let y2 = z.rows(n + t, t).into_owned();
                let r1 = &c_mat * &y1 - &p_mat * &x;
                let top = c_mat.transpose() * (&u_mat * r1);
                let bot = (&v_mat * (&y2 - &q_mat * &x)) * sigma;
                let mut out = DVector::zeros(m);
                out.rows_mut(0, t).copy_from(&top);
                out.rows_mut(t, t).copy_from(&bot);
                out
            })
        };
        let jac = {
            let ctu = c_mat.transpose() * &u_mat;
            let top_x = -(&ctu * &p_mat);
            let top_y1 = &ctu * &c_mat;
            let bot_x = -(&v_mat * &q_mat) * sigma;
            let bot_y2 = &v_mat * sigma;
            let mut j = DMatrix::zeros(m, n + m);
            j.view_mut((0, 0), (t, n)).copy_from(&top_x);
            j.view_mut((0, n), (t, t)).copy_from(&top_y1);
            j.view_mut((t, 0), (t, n)).copy_from(&bot_x);
            j.view_mut((t, n + t), (t, t)).copy_from(&bot_y2);
            j
        };
        BilevelLower {
            grad_y,
            jac_grad_y: Arc::new(move |_| jac.clone()),
            hess_comb_grad_y: zero::weighted_matrix(n + m, n + m),
        }
    };

    // ghat(s) = (s2 - u; -s2 + l; A s; -A s)
    let cons = {
        let a_mat = a_mat.clone();
        let upper_b = upper_b.clone();
        let lower_b = lower_b.clone();
        let jac = {
            let mut j = DMatrix::zeros(q, m);
            for i in 0..t {
                j[(i, t + i)] = 1.0;
                j[(t + i, t + i)] = -1.0;
            }
            j.view_mut((2 * t, 0), (t, m)).copy_from(&a_mat);
            j.view_mut((3 * t, 0), (t, m)).copy_from(&(-&a_mat));
            j
        };
        BilevelConstraints {
            val: Arc::new(move |_x: &DVector<f64>, s: &DVector<f64>| {
                let s2 = s.rows(t, t).into_owned();
                let asv = &a_mat * s;
                let mut g = DVector::zeros(q);
                for i in 0..t {
                    g[i] = s2[i] - upper_b[i];
                    g[t + i] = -s2[i] + lower_b[i];
                    g[2 * t + i] = asv[i];
                    g[3 * t + i] = -asv[i];
                }
                g
            }),
            jac_x: Arc::new(move |_, _| DMatrix::zeros(q, n)),
            jac_s: Arc::new(move |_, _| jac.clone()),
            hess_comb: Arc::new(move |_, _, _| DMatrix::zeros(n + m, n + m)),
        }
    };

    let def = bilevel_adapter(dims, format!("boc_t{t}_seed{seed}"), upper, lower, cons);
    Ok(ProblemEntry {
        name: format!("boc_t{t}_seed{seed}"),
        def,
        starts: vec![(DVector::zeros(n), DVector::zeros(m))],
        best_f: None,
        provenance: format!("seeded quadratic bilevel optimal-control family, t={t}, seed={seed}"),
    })
}

/// Test helper: permute the inner-constraint rows of a problem together with
/// their multiplier slots.
#[cfg(test)]
pub fn permute_g0_rows(p: &ProblemDef, perm: &[usize]) -> ProblemDef {
    let q = p.dims.q;
    assert_eq!(perm.len(), q);
    let perm: Vec<usize> = perm.to_vec();
    let base = p.clone();
    let permute_vec = {
        let perm = perm.clone();
        move |v: &DVector<f64>| DVector::from_fn(v.len(), |i, _| v[perm[i]])
    };
    let permute_rows = {
        let perm = perm.clone();
        move |m: &DMatrix<f64>| {
            let mut out = m.clone_owned();
            for (new_r, &old_r) in perm.iter().enumerate() {
                out.set_row(new_r, &m.row(old_r));
            }
            out
        }
    };
    let scatter_weight = {
        let perm = perm.clone();
        move |w: &DVector<f64>| {
            let mut out = DVector::zeros(w.len());
            for (new_r, &old_r) in perm.iter().enumerate() {
                out[old_r] = w[new_r];
            }
            out
        }
    };
    let b0 = base.clone();
    let b1 = base.clone();
    let b2 = base.clone();
    let b3 = base.clone();
    let pv = permute_vec;
    let pr1 = permute_rows.clone();
    let pr2 = permute_rows;
    ProblemDef::new(
        p.dims,
        format!("{}_permuted", p.name),
        p.notes.clone(),
        Oracles {
            f_val: {
                let b = base.clone();
                Arc::new(move |z| b.f(z))
            },
            f_grad: {
                let b = base.clone();
                Arc::new(move |z| b.grad_f(z))
            },
            f_hess: {
                let b = base.clone();
                Arc::new(move |z| b.hess_f(z))
            },
            g_upper_val: {
                let b = base.clone();
                Arc::new(move |z| b.g_upper(z))
            },
            g_upper_jac: {
                let b = base.clone();
                Arc::new(move |z| b.jac_g_upper(z))
            },
            g_upper_hess_comb: {
                let b = base.clone();
                Arc::new(move |z, u| b.hess_g_upper(z, u))
            },
            f0_val: {
                let b = base.clone();
                Arc::new(move |z| b.f0(z))
            },
            f0_jac: {
                let b = base.clone();
                Arc::new(move |z| b.jac_f0(z))
            },
            f0_hess_comb: {
                let b = base.clone();
                Arc::new(move |z, a| b.hess_f0(z, a))
            },
            g0_val: Arc::new(move |z, s| pv(&b0.g0(z, s))),
            g0_jac_z: Arc::new(move |z, s| pr1(&b1.jac_g0_z(z, s))),
            g0_jac_s: Arc::new(move |z, s| pr2(&b2.jac_g0_s(z, s))),
            g0_hess_comb: Arc::new(move |z, s, w| b3.hess_g0(z, s, &scatter_weight(w))),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{eval_g, jac_g};
    use approx::assert_relative_eq;

    #[test]
    fn mo63_reference_values() {
        let e = ex_mo63();
        let z = DVector::from_vec(vec![0.0, 9.0, 6.0]);
        assert_relative_eq!(e.def.f(&z), -49.0, epsilon = 1e-12);
        let g0 = e.def.g0(&z, &DVector::from_vec(vec![9.0, 6.0]));
        assert!(g0.amax() < 1e-12);
        let g_up = e.def.g_upper(&z);
        assert_relative_eq!(g_up[0], -1.0);
        assert_relative_eq!(g_up[1], -1.0);
        assert_eq!(e.best_f, Some(-49.0));
    }

    #[test]
    fn mo63_eval_g_and_jacobian() {
        let e = ex_mo63();
        let z = DVector::from_vec(vec![0.0, 9.0, 6.0]);
        let g = eval_g(&e.def, &z).unwrap();
        assert!(g.amax() < 1e-12); // (9+6-15, 6+9-15)
        let j = jac_g(&e.def, &z).unwrap();
        assert_eq!(j.row(0).iter().copied().collect::<Vec<_>>(), vec![-1.0, 1.0, 1.0]);
        assert_eq!(j.row(1).iter().copied().collect::<Vec<_>>(), vec![-1.0, 1.0, 1.0]);
    }

    #[test]
    fn mo64_reference_values() {
        let e = ex_mo64();
        let sol = DVector::from_vec(vec![135.488, 31.56, 13.56]);
        let f = e.def.f(&sol);
        assert!((f - 7.39).abs() < 0.01, "F at the known solution: {f}");
        assert_eq!(e.def.f(&DVector::from_vec(vec![100.0, 34.0, 16.0])), 0.0);
        let f0 = e.def.f0(&DVector::from_vec(vec![0.0, 34.0, 16.0]));
        assert_relative_eq!(f0[0], 8.0);
        assert_relative_eq!(f0[1], -6.0);
    }

    #[test]
    fn mo64_g_at_reference_solution() {
        // g(z) = (-0.333 x + y1 + y2, -y1, -y2)
        let e = ex_mo64();
        let z = DVector::from_vec(vec![135.488, 31.56, 13.56]);
        let g = eval_g(&e.def, &z).unwrap();
        assert!(g[0].abs() < 5e-3, "aggregate row nearly active: {}", g[0]);
        assert_relative_eq!(g[1], -31.56);
        assert_relative_eq!(g[2], -13.56);
    }

    #[test]
    fn worked_example_data() {
        let e = qvi_worked_example();
        // A(., (2,3)) = diag(2, 9) shows up in jac_g0_s with a sign
        let z = DVector::from_vec(vec![0.5, 0.5, 2.0, 3.0]);
        let js = e.def.jac_g0_s(&z, &DVector::zeros(2));
        assert_relative_eq!(js[(0, 0)], -2.0);
        assert_relative_eq!(js[(1, 1)], -9.0);
        // b((1,2), .) = (1, 4): g0 at s = 0 equals b
        let z = DVector::from_vec(vec![1.0, 2.0, 1.0, 1.0]);
        let b = e.def.g0(&z, &DVector::zeros(2));
        assert_relative_eq!(b[0], 1.0);
        assert_relative_eq!(b[1], 4.0);
        // closed form at x = (1, 2)
        let x = DVector::from_vec(vec![1.0, 2.0]);
        assert_relative_eq!(worked_phi_closed_form(&x), 1.0 + 8.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn boc_dims_and_determinism() {
        let e = boc_generator(100, 42).unwrap();
        assert_eq!(
            (e.def.dims.n, e.def.dims.m, e.def.dims.p, e.def.dims.q),
            (2, 200, 3, 400)
        );
        let e2 = boc_generator(100, 42).unwrap();
        let z = DVector::from_fn(202, |i, _| (i as f64) * 0.01 - 1.0);
        let s = DVector::from_fn(200, |i, _| (i as f64) * -0.01 + 0.5);
        assert_eq!(e.def.f(&z).to_bits(), e2.def.f(&z).to_bits());
        let g1 = e.def.g0(&z, &s);
        let g2 = e2.def.g0(&z, &s);
        for i in 0..g1.len() {
            assert_eq!(g1[i].to_bits(), g2[i].to_bits());
        }
        assert!(boc_generator(0, 1).is_err());
    }

    #[test]
    fn boc_weight_matrices_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in [3usize, 7, 12] {
            let m = random_spd(&mut rng, k);
            let eig = nalgebra::SymmetricEigen::new(m);
            assert!(eig.eigenvalues.min() > 0.0);
        }
    }

    #[test]
    fn adapter_identity_lower_objective() {
        // fhat = 0.5 |y|^2 gives f0 = y, f0_jac = [0 | I]
        let dims = Dims::new(1, 2, 0, 1).unwrap();
        let upper = BilevelUpper {
            f_val: zero::scalar(),
            f_grad: zero::vector(3),
            f_hess: zero::matrix(3, 3),
            g_val: zero::vector(0),
            g_jac: zero::matrix(0, 3),
            g_hess_comb: zero::weighted_matrix(3, 3),
        };
        let lower = BilevelLower {
            grad_y: Arc::new(|z: &DVector<f64>| DVector::from_vec(vec![z[1], z[2]])),
            jac_grad_y: Arc::new(|_| {
                DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            }),
            hess_comb_grad_y: zero::weighted_matrix(3, 3),
        };
        let cons = BilevelConstraints {
            val: Arc::new(|_x: &DVector<f64>, s: &DVector<f64>| {
                DVector::from_vec(vec![s[0] + s[1] - 1.0])
            }),
            jac_x: Arc::new(|_, _| DMatrix::zeros(1, 1)),
            jac_s: Arc::new(|_, _| DMatrix::from_row_slice(1, 2, &[1.0, 1.0])),
            hess_comb: Arc::new(|_, _, _| DMatrix::zeros(3, 3)),
        };
        let def = bilevel_adapter(dims, "toy", upper, lower, cons);
        let z = DVector::from_vec(vec![0.3, 1.5, -2.0]);
        let f0 = def.f0(&z);
        assert_relative_eq!(f0[0], 1.5);
        assert_relative_eq!(f0[1], -2.0);
        let j = def.jac_f0(&z);
        assert_relative_eq!(j[(0, 1)], 1.0);
        assert_relative_eq!(j[(1, 2)], 1.0);
        assert_relative_eq!(j[(0, 0)], 0.0);
    }

    #[test]
    fn registry_lookup() {
        let r = builtin_registry();
        assert_eq!(r.names(), vec!["boc", "mo63", "mo64", "qvi_worked"]);
        let p = GeneratorParams { t: Some(2), seed: 1 };
        assert!(r.instantiate("boc", &p).is_ok());
        assert!(r.instantiate("nope", &p).is_err());
        assert!(r.instantiate("boc", &GeneratorParams::default()).is_err());
        let _ = r.instantiate("mo63", &GeneratorParams::default()).unwrap();
    }

    #[test]
    fn worked_example_membership() {
        use rand::Rng;
        let e = qvi_worked_example();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(0.2..3.0));
            let y = worked_solution_y(&x);
            let mut z = DVector::zeros(4);
            z.rows_mut(0, 2).copy_from(&x);
            z.rows_mut(2, 2).copy_from(&y);
            let g = eval_g(&e.def, &z).unwrap();
            assert!(g.amax() < 1e-10, "y stays feasible for K(x, y)");
            let f_inner = y.dot(&e.def.f0(&z));
            let phi = worked_phi_closed_form(&x);
            assert!(f_inner - phi <= 1e-8, "value-function membership");
        }
    }

    #[test]
    fn all_problems_pass_fd_derivative_suite() {
        use rand::Rng;
        let entries = vec![
            ex_mo63(),
            ex_mo64(),
            qvi_worked_example(),
            boc_generator(2, 7).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for e in &entries {
            let p = &e.def;
            let d = p.dims;
            for _ in 0..100 {
                let z = DVector::from_fn(d.nz(), |_, _| rng.random_range(-1.0..1.0));
                let s = DVector::from_fn(d.m, |_, _| rng.random_range(-1.0..1.0));
                // first derivatives vs central differences
                let jf = crate::fd::jacobian(|z| p.f0(z), &z, d.m);
                assert!(
                    crate::fd::rel_err_mat(&p.jac_f0(&z), &jf) < 1e-6,
                    "{}: f0 jacobian",
                    p.name
                );
                let gf = crate::fd::grad(|z| p.f(z), &z);
                assert!(
                    crate::fd::rel_err_vec(&p.grad_f(&z), &gf) < 1e-6,
                    "{}: F gradient",
                    p.name
                );
                if d.p > 0 {
                    let jg = crate::fd::jacobian(|z| p.g_upper(z), &z, d.p);
                    assert!(
                        crate::fd::rel_err_mat(&p.jac_g_upper(&z), &jg) < 1e-6,
                        "{}: G jacobian",
                        p.name
                    );
                }
                let jz = crate::fd::jacobian(|z| p.g0(z, &s), &z, d.q);
                assert!(
                    crate::fd::rel_err_mat(&p.jac_g0_z(&z, &s), &jz) < 1e-6,
                    "{}: g0 z-jacobian",
                    p.name
                );
                let js = crate::fd::jacobian(|s| p.g0(&z, s), &s, d.q);
                assert!(
                    crate::fd::rel_err_mat(&p.jac_g0_s(&z, &s), &js) < 1e-6,
                    "{}: g0 s-jacobian",
                    p.name
                );
            }
            // Hessian combinations vs differences of the weighted gradients
            for _ in 0..10 {
                let z = DVector::from_fn(d.nz(), |_, _| rng.random_range(-1.0..1.0));
                let s = DVector::from_fn(d.m, |_, _| rng.random_range(-1.0..1.0));
                let a = DVector::from_fn(d.m, |_, _| rng.random_range(-1.0..1.0));
                let hf0 = p.hess_f0(&z, &a);
                let fd_h = crate::fd::jacobian(
                    |z| p.jac_f0(z).transpose() * &a,
                    &z,
                    d.nz(),
                );
                assert!(
                    crate::fd::rel_err_mat(&hf0, &fd_h) < 1e-5,
                    "{}: f0 hessian comb",
                    p.name
                );
                let w = DVector::from_fn(d.q, |_, _| rng.random_range(-1.0..1.0));
                let hg0 = p.hess_g0(&z, &s, &w);
                let fd_hg = crate::fd::jacobian(
                    |zs: &DVector<f64>| {
                        let z = zs.rows(0, d.nz()).into_owned();
                        let s = zs.rows(d.nz(), d.m).into_owned();
                        let gz = p.jac_g0_z(&z, &s).transpose() * &w;
                        let gs = p.jac_g0_s(&z, &s).transpose() * &w;
                        let mut out = DVector::zeros(d.nz() + d.m);
                        out.rows_mut(0, d.nz()).copy_from(&gz);
                        out.rows_mut(d.nz(), d.m).copy_from(&gs);
                        out
                    },
                    &{
                        let mut zs = DVector::zeros(d.nz() + d.m);
                        zs.rows_mut(0, d.nz()).copy_from(&z);
                        zs.rows_mut(d.nz(), d.m).copy_from(&s);
                        zs
                    },
                    d.nz() + d.m,
                );
                assert!(
                    crate::fd::rel_err_mat(&hg0, &fd_hg) < 1e-5,
                    "{}: g0 hessian comb",
                    p.name
                );
                // hessian outputs symmetric
                assert!((&hg0 - hg0.transpose()).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn oracles_are_deterministic() {
        let e = boc_generator(3, 5).unwrap();
        let z = DVector::from_fn(8, |i, _| 0.1 * i as f64);
        let s = DVector::from_fn(6, |i, _| -0.2 * i as f64);
        let a = e.def.g0(&z, &s);
        let b = e.def.g0(&z, &s);
        for i in 0..a.len() {
            assert_eq!(a[i].to_bits(), b[i].to_bits());
        }
    }
}
