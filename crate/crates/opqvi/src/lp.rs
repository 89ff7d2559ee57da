//! Dense two-phase simplex for the small linear programs that show up in the
//! stability analysis (inner value-function problems, multiplier-cone
//! searches). Bland's rule keeps the pivoting deterministic and cycle-free;
//! every row carries an artificial column so dual values can be read off the
//! final reduced costs.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

const PIVOT_TOL: f64 = 1e-11;
const COST_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LpError {
    #[error("inconsistent LP shapes: {0}")]
    Shape(String),
    #[error("simplex iteration limit reached")]
    IterationLimit,
}

/// `min c.x  s.t.  a_eq x = b_eq,  a_ub x <= b_ub`, with variable sign
/// handled by the entry points below.
#[derive(Debug, Clone)]
pub struct Lp {
    pub c: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_ub: DMatrix<f64>,
    pub b_ub: DVector<f64>,
}

impl Lp {
    pub fn shape_ok(&self) -> Result<(), LpError> {
        let nv = self.c.len();
        if self.a_eq.ncols() != nv && self.a_eq.nrows() > 0 {
            return Err(LpError::Shape("a_eq column count".into()));
        }
        if self.a_ub.ncols() != nv && self.a_ub.nrows() > 0 {
            return Err(LpError::Shape("a_ub column count".into()));
        }
        if self.a_eq.nrows() != self.b_eq.len() {
            return Err(LpError::Shape("b_eq length".into()));
        }
        if self.a_ub.nrows() != self.b_ub.len() {
            return Err(LpError::Shape("b_ub length".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: DVector<f64>,
    pub value: f64,
    /// Duals of the equality rows (free sign).
    pub dual_eq: DVector<f64>,
    /// Duals of the inequality rows, nonnegative, complementary with slack.
    pub dual_ub: DVector<f64>,
}

#[derive(Debug, Clone)]
pub enum LpOutcome {
    Optimal(LpSolution),
    Infeasible,
    Unbounded,
}

struct Tableau {
    /// rows x (ncols + 1); last column is the rhs.
    t: DMatrix<f64>,
    /// reduced-cost row, length ncols + 1 (last entry = -objective).
    cost: DVector<f64>,
    basis: Vec<usize>,
    nv: usize,
    n_slack: usize,
    rows: usize,
}

impl Tableau {
    fn col_count(&self) -> usize {
        self.nv + self.n_slack + self.rows
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let piv = self.t[(row, col)];
        let ncols = self.col_count() + 1;
        for c in 0..ncols {
            self.t[(row, c)] /= piv;
        }
        for r in 0..self.rows {
            if r == row {
                continue;
            }
            let factor = self.t[(r, col)];
            if factor != 0.0 {
                for c in 0..ncols {
                    self.t[(r, c)] -= factor * self.t[(row, c)];
                }
            }
        }
        let factor = self.cost[col];
        if factor != 0.0 {
            for c in 0..ncols {
                self.cost[c] -= factor * self.t[(row, c)];
            }
        }
        self.basis[row] = col;
    }

    /// Bland's rule: smallest-index entering column among `allowed`,
    /// smallest-basis-index tie-break on the ratio test.
    fn run(&mut self, allowed: impl Fn(usize) -> bool) -> Result<bool, LpError> {
        let max_iter = 200 + 50 * (self.rows + self.col_count());
        for _ in 0..max_iter {
            let mut entering = None;
            for j in 0..self.col_count() {
                if allowed(j) && self.cost[j] < -COST_TOL {
                    entering = Some(j);
                    break;
                }
            }
            let Some(j) = entering else {
                return Ok(true); // optimal
            };
            let rhs_col = self.col_count();
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.rows {
                let a = self.t[(r, j)];
                if a > PIVOT_TOL {
                    let ratio = self.t[(r, rhs_col)] / a;
                    match leave {
                        None => leave = Some((r, ratio)),
                        Some((br, brat)) => {
                            if ratio < brat - PIVOT_TOL
                                || ((ratio - brat).abs() <= PIVOT_TOL
                                    && self.basis[r] < self.basis[br])
                            {
                                leave = Some((r, ratio));
                            }
                        }
                    }
                }
            }
            let Some((r, _)) = leave else {
                return Ok(false); // unbounded in this column
            };
            self.pivot(r, j);
        }
        Err(LpError::IterationLimit)
    }
}

/// Solve with all variables constrained to `x >= 0`.
pub fn solve_nonneg(lp: &Lp) -> Result<LpOutcome, LpError> {
    lp.shape_ok()?;
    let nv = lp.c.len();
    let me = lp.a_eq.nrows();
    let mu = lp.a_ub.nrows();
    let rows = me + mu;
    let n_slack = mu;
    let art_start = nv + n_slack;
    let ncols = nv + n_slack + rows;

    if rows == 0 {
        // feasible iff c >= 0 gives bounded trivial optimum at x = 0
        if lp.c.iter().any(|&cj| cj < -COST_TOL) {
            return Ok(LpOutcome::Unbounded);
        }
        return Ok(LpOutcome::Optimal(LpSolution {
            x: DVector::zeros(nv),
            value: 0.0,
            dual_eq: DVector::zeros(0),
            dual_ub: DVector::zeros(0),
        }));
    }

    // assemble equation system, flipping rows to make the rhs nonnegative
    let mut t = DMatrix::zeros(rows, ncols + 1);
    let mut flip = vec![1.0f64; rows];
    for r in 0..me {
        let f = if lp.b_eq[r] < 0.0 { -1.0 } else { 1.0 };
        flip[r] = f;
        for c in 0..nv {
            t[(r, c)] = f * lp.a_eq[(r, c)];
        }
        t[(r, ncols)] = f * lp.b_eq[r];
    }
    for i in 0..mu {
        let r = me + i;
        let f = if lp.b_ub[i] < 0.0 { -1.0 } else { 1.0 };
        flip[r] = f;
        for c in 0..nv {
            t[(r, c)] = f * lp.a_ub[(i, c)];
        }
        t[(r, nv + i)] = f; // slack
        t[(r, ncols)] = f * lp.b_ub[i];
    }
    for r in 0..rows {
        t[(r, art_start + r)] = 1.0;
    }

    // phase 1: minimize the artificial sum
    let mut cost = DVector::zeros(ncols + 1);
    for r in 0..rows {
        cost[art_start + r] = 1.0;
    }
    let mut tab = Tableau {
        t,
        cost,
        basis: (0..rows).map(|r| art_start + r).collect(),
        nv,
        n_slack,
        rows,
    };
    for r in 0..rows {
        let row = tab.t.row(r).into_owned();
        for c in 0..=ncols {
            tab.cost[c] -= row[c];
        }
    }
    tab.run(|_| true)?;
    let phase1_obj = -tab.cost[ncols];
    if phase1_obj > FEAS_TOL {
        return Ok(LpOutcome::Infeasible);
    }
    // force remaining artificials out of the basis where possible
    for r in 0..rows {
        if tab.basis[r] >= art_start {
            if let Some(j) = (0..art_start).find(|&j| tab.t[(r, j)].abs() > 1e-8) {
                tab.pivot(r, j);
            }
        }
    }

    // phase 2 with the real costs; artificial columns may not re-enter
    let mut cost = DVector::zeros(ncols + 1);
    for c in 0..nv {
        cost[c] = lp.c[c];
    }
    tab.cost = cost;
    for r in 0..rows {
        let b = tab.basis[r];
        let factor = tab.cost[b];
        if factor != 0.0 {
            let row = tab.t.row(r).into_owned();
            for c in 0..=ncols {
                tab.cost[c] -= factor * row[c];
            }
        }
    }
    let art = art_start;
    let optimal = tab.run(|j| j < art)?;
    if !optimal {
        return Ok(LpOutcome::Unbounded);
    }

    let mut x = DVector::zeros(nv);
    for r in 0..rows {
        if tab.basis[r] < nv {
            x[tab.basis[r]] = tab.t[(r, ncols)];
        }
    }
    // equation-system duals from the artificial reduced costs
    let ybar: Vec<f64> = (0..rows).map(|r| -tab.cost[art_start + r]).collect();
    let dual_eq = DVector::from_fn(me, |r, _| flip[r] * ybar[r]);
    let dual_ub = DVector::from_fn(mu, |i, _| {
        let w = -flip[me + i] * ybar[me + i];
        if w.abs() < 1e-12 {
            0.0
        } else {
            w
        }
    });
    Ok(LpOutcome::Optimal(LpSolution {
        value: lp.c.dot(&x),
        x,
        dual_eq,
        dual_ub,
    }))
}

/// Solve with all variables free: internally splits `x = xp - xm`.
pub fn solve_free(lp: &Lp) -> Result<LpOutcome, LpError> {
    lp.shape_ok()?;
    let nv = lp.c.len();
    let split_cols = |a: &DMatrix<f64>| {
        if a.nrows() == 0 {
            return DMatrix::zeros(0, 2 * nv);
        }
        let mut out = DMatrix::zeros(a.nrows(), 2 * nv);
        for r in 0..a.nrows() {
            for c in 0..nv {
                out[(r, c)] = a[(r, c)];
                out[(r, nv + c)] = -a[(r, c)];
            }
        }
        out
    };
    let mut c2 = DVector::zeros(2 * nv);
    for j in 0..nv {
        c2[j] = lp.c[j];
        c2[nv + j] = -lp.c[j];
    }
    let lp2 = Lp {
        c: c2,
        a_eq: split_cols(&lp.a_eq),
        b_eq: lp.b_eq.clone(),
        a_ub: split_cols(&lp.a_ub),
        b_ub: lp.b_ub.clone(),
    };
    match solve_nonneg(&lp2)? {
        LpOutcome::Optimal(sol) => {
            let x = DVector::from_fn(nv, |j, _| sol.x[j] - sol.x[nv + j]);
            Ok(LpOutcome::Optimal(LpSolution {
                value: sol.value,
                x,
                dual_eq: sol.dual_eq,
                dual_ub: sol.dual_ub,
            }))
        }
        other => Ok(other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn empty_eq(nv: usize) -> (DMatrix<f64>, DVector<f64>) {
        (DMatrix::zeros(0, nv), DVector::zeros(0))
    }

    #[test]
    fn bounded_box_problem() {
        // min -x1 - 2 x2 s.t. x1 <= 3, x2 <= 4, x1 + x2 <= 5, x >= 0
        let (a_eq, b_eq) = empty_eq(2);
        let lp = Lp {
            c: DVector::from_vec(vec![-1.0, -2.0]),
            a_eq,
            b_eq,
            a_ub: DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
            b_ub: DVector::from_vec(vec![3.0, 4.0, 5.0]),
        };
        let LpOutcome::Optimal(sol) = solve_nonneg(&lp).unwrap() else {
            panic!("expected optimum");
        };
        assert_relative_eq!(sol.value, -9.0, epsilon = 1e-9);
        assert_relative_eq!(sol.x[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.x[1], 4.0, epsilon = 1e-9);
        // stationarity c + A^T w = 0 on the positive part
        let s = &lp.c + lp.a_ub.transpose() * &sol.dual_ub;
        assert!(s.amax() < 1e-8);
        assert!(sol.dual_ub.iter().all(|&w| w >= -1e-10));
    }

    #[test]
    fn detects_infeasible() {
        let lp = Lp {
            c: DVector::from_vec(vec![1.0]),
            a_eq: DMatrix::from_row_slice(1, 1, &[1.0]),
            b_eq: DVector::from_vec(vec![-2.0]),
            a_ub: DMatrix::zeros(0, 1),
            b_ub: DVector::zeros(0),
        };
        // x = -2 with x >= 0 is impossible
        assert!(matches!(solve_nonneg(&lp).unwrap(), LpOutcome::Infeasible));
    }

    #[test]
    fn detects_unbounded_free_problem() {
        // min x with only an upper bound and x free
        let lp = Lp {
            c: DVector::from_vec(vec![1.0]),
            a_eq: DMatrix::zeros(0, 1),
            b_eq: DVector::zeros(0),
            a_ub: DMatrix::from_row_slice(1, 1, &[1.0]),
            b_ub: DVector::from_vec(vec![5.0]),
        };
        assert!(matches!(solve_free(&lp).unwrap(), LpOutcome::Unbounded));
    }

    #[test]
    fn free_variables_reach_negative_optimum() {
        // min x1 + x2 s.t. x1 >= -1 (as -x1 <= 1), x2 >= -2, x free
        let lp = Lp {
            c: DVector::from_vec(vec![1.0, 1.0]),
            a_eq: DMatrix::zeros(0, 2),
            b_eq: DVector::zeros(0),
            a_ub: DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]),
            b_ub: DVector::from_vec(vec![1.0, 2.0]),
        };
        let LpOutcome::Optimal(sol) = solve_free(&lp).unwrap() else {
            panic!("expected optimum");
        };
        assert_relative_eq!(sol.value, -3.0, epsilon = 1e-9);
        assert_relative_eq!(sol.x[0], -1.0, epsilon = 1e-9);
        assert_relative_eq!(sol.x[1], -2.0, epsilon = 1e-9);
    }

    #[test]
    fn equality_duals_satisfy_stationarity() {
        // min x1 + 2 x2 + 3 x3 s.t. x1 + x2 + x3 = 1, x >= 0
        let lp = Lp {
            c: DVector::from_vec(vec![1.0, 2.0, 3.0]),
            a_eq: DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]),
            b_eq: DVector::from_vec(vec![1.0]),
            a_ub: DMatrix::zeros(0, 3),
            b_ub: DVector::zeros(0),
        };
        let LpOutcome::Optimal(sol) = solve_nonneg(&lp).unwrap() else {
            panic!("expected optimum");
        };
        assert_relative_eq!(sol.value, 1.0, epsilon = 1e-9);
        // reduced costs c - A^T y_eq nonnegative, zero on the support
        let red = &lp.c - lp.a_eq.transpose() * &sol.dual_eq;
        assert!(red.iter().all(|&r| r > -1e-9));
        assert!(red[0].abs() < 1e-9);
    }

    #[test]
    fn flipped_row_duals_keep_sign_convention() {
        // negative rhs forces an internal row flip; the reported dual must
        // still satisfy c + A^T w = 0 with w >= 0
        let lp = Lp {
            c: DVector::from_vec(vec![1.0]),
            a_eq: DMatrix::zeros(0, 1),
            b_eq: DVector::zeros(0),
            a_ub: DMatrix::from_row_slice(1, 1, &[-1.0]), // x >= 2
            b_ub: DVector::from_vec(vec![-2.0]),
        };
        let LpOutcome::Optimal(sol) = solve_nonneg(&lp).unwrap() else {
            panic!("expected optimum");
        };
        assert_relative_eq!(sol.x[0], 2.0, epsilon = 1e-9);
        assert_relative_eq!(sol.dual_ub[0], 1.0, epsilon = 1e-9);
    }

    /// Brute-force oracle: enumerate all candidate vertices (intersections
    /// of `nv` active constraints drawn from the rows and the axes) and
    /// minimize over the feasible ones. The polyhedron `{x >= 0, Ax <= b}`
    /// is pointed, so it is nonempty iff it has a feasible vertex.
    fn enumerate_optimum(lp: &Lp) -> Option<f64> {
        let nv = lp.c.len();
        let mu = lp.a_ub.nrows();
        let total = mu + nv;
        let mut best: Option<f64> = None;
        let mut combo = vec![0usize; nv];
        fn rec(
            combo: &mut Vec<usize>,
            depth: usize,
            start: usize,
            total: usize,
            lp: &Lp,
            best: &mut Option<f64>,
        ) {
            let nv = lp.c.len();
            if depth == nv {
                let mu = lp.a_ub.nrows();
                let mut a = DMatrix::zeros(nv, nv);
                let mut b = DVector::zeros(nv);
                for (r, &k) in combo.iter().enumerate() {
                    if k < mu {
                        for c in 0..nv {
                            a[(r, c)] = lp.a_ub[(k, c)];
                        }
                        b[r] = lp.b_ub[k];
                    } else {
                        a[(r, k - mu)] = 1.0; // x_j = 0
                    }
                }
                let Some(x) = a.lu().solve(&b) else {
                    return;
                };
                let feasible = x.iter().all(|&xi| xi >= -1e-7)
                    && (0..mu).all(|i| {
                        let row: f64 = (0..nv).map(|c| lp.a_ub[(i, c)] * x[c]).sum();
                        row <= lp.b_ub[i] + 1e-7
                    });
                if feasible {
                    let v = lp.c.dot(&x);
                    *best = Some(best.map_or(v, |b: f64| b.min(v)));
                }
                return;
            }
            for k in start..total {
                combo[depth] = k;
                rec(combo, depth + 1, k + 1, total, lp, best);
            }
        }
        rec(&mut combo, 0, 0, total, lp, &mut best);
        best
    }

    proptest::proptest! {
        #[test]
        fn simplex_matches_vertex_enumeration(
            nv in 1usize..4,
            mu in 0usize..4,
            data in proptest::collection::vec(-6i32..7, 0..28),
        ) {
            let mut it = data.into_iter().map(|v| v as f64 * 0.5).chain(std::iter::repeat(1.0));
            let c = DVector::from_fn(nv, |_, _| it.next().unwrap());
            let a_ub = DMatrix::from_fn(mu, nv, |_, _| it.next().unwrap());
            // keep the origin feasible so the region is nonempty
            let b_ub = DVector::from_fn(mu, |_, _| it.next().unwrap().abs());
            let lp = Lp { c, a_eq: DMatrix::zeros(0, nv), b_eq: DVector::zeros(0), a_ub, b_ub };
            match solve_nonneg(&lp).unwrap() {
                LpOutcome::Optimal(sol) => {
                    let oracle = enumerate_optimum(&lp).expect("feasible region has a vertex");
                    proptest::prop_assert!(
                        (sol.value - oracle).abs() <= 1e-6 * (1.0 + oracle.abs()),
                        "simplex {} vs enumeration {}", sol.value, oracle
                    );
                    // full first-order conditions at the reported optimum
                    let residual = &lp.c + lp.a_ub.transpose() * &sol.dual_ub;
                    for j in 0..nv {
                        proptest::prop_assert!(residual[j] >= -1e-7); // reduced costs
                        proptest::prop_assert!(residual[j] * sol.x[j] <= 1e-6);
                    }
                    for i in 0..mu {
                        proptest::prop_assert!(sol.dual_ub[i] >= -1e-9);
                        let slack = lp.b_ub[i]
                            - (0..nv).map(|c| lp.a_ub[(i, c)] * sol.x[c]).sum::<f64>();
                        proptest::prop_assert!(slack >= -1e-7);
                        proptest::prop_assert!(sol.dual_ub[i] * slack <= 1e-6);
                    }
                }
                LpOutcome::Unbounded => {
                    // certify an improving ray: boxing the variables must
                    // give optima that keep falling as the box grows
                    let boxed = |m: f64| {
                        let mut a = DMatrix::zeros(mu + nv, nv);
                        a.view_mut((0, 0), (mu, nv)).copy_from(&lp.a_ub);
                        for j in 0..nv {
                            a[(mu + j, j)] = 1.0;
                        }
                        let mut b = DVector::from_element(mu + nv, m);
                        b.rows_mut(0, mu).copy_from(&lp.b_ub);
                        Lp {
                            c: lp.c.clone(),
                            a_eq: DMatrix::zeros(0, nv),
                            b_eq: DVector::zeros(0),
                            a_ub: a,
                            b_ub: b,
                        }
                    };
                    let v1 = enumerate_optimum(&boxed(1e3)).unwrap();
                    let v2 = enumerate_optimum(&boxed(2e3)).unwrap();
                    proptest::prop_assert!(v2 < v1 - 1.0, "no improving ray: {v1} vs {v2}");
                }
                LpOutcome::Infeasible => {
                    // origin is always feasible here
                    proptest::prop_assert!(false, "spurious infeasibility");
                }
            }
        }
    }

    #[test]
    fn degenerate_rhs_terminates() {
        // redundant + degenerate rows; Bland must still terminate
        let lp = Lp {
            c: DVector::from_vec(vec![-1.0, -1.0]),
            a_eq: DMatrix::zeros(0, 2),
            b_eq: DVector::zeros(0),
            a_ub: DMatrix::from_row_slice(
                4,
                2,
                &[1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0],
            ),
            b_ub: DVector::from_vec(vec![1.0, 1.0, 0.0, 1.0]),
        };
        let LpOutcome::Optimal(sol) = solve_nonneg(&lp).unwrap() else {
            panic!("expected optimum");
        };
        assert_relative_eq!(sol.value, -1.0, epsilon = 1e-9);
        assert!(sol.x[0].abs() < 1e-9);
    }
}
