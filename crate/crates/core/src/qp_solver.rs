//! Dense strictly convex QP:
//!
//! ```text
//!     minimize    U' H U + c' U
//!     subject to  lower <= A U <= upper      (element-wise)
//! ```
//!
//! Solved with the Goldfarb-Idnani dual active-set method. The iteration
//! starts from the unconstrained minimizer and adds violated rows one at a
//! time, so no feasible starting point is needed and infeasibility is
//! detected rather than assumed away. The factorization `J = L^-T Q` and the
//! triangular `R` are updated with Givens rotations on every add/drop.
//!
//! Each row is two-sided; at most one side of a row is in the active set.
//! Infinite bounds switch that side off. All-zero rows (horizon blocks with
//! no constraint) are checked once for consistency and then ignored.

use nalgebra::{DMatrix, DVector};

use crate::error::QpError;

pub const DEFAULT_TOLERANCE: f64 = 1e-9;

/// Which bound of a two-sided row is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveConstraint {
    pub row: usize,
    pub side: Side,
}

/// Non-negative multipliers for the lower and upper side of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Multipliers {
    pub fn zeros(rows: usize) -> Self {
        Self {
            lower: DVector::zeros(rows),
            upper: DVector::zeros(rows),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub minimizer: DVector<f64>,
    pub objective: f64,
    pub active_set: Vec<ActiveConstraint>,
    pub multipliers: Multipliers,
    pub kkt_residual: f64,
    pub iterations: usize,
}

fn check_dims(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> Result<(), QpError> {
    let m = h.nrows();
    if h.ncols() != m || c.len() != m {
        return Err(QpError::Dimension(format!(
            "H is {}x{}, c has {} entries",
            h.nrows(),
            h.ncols(),
            c.len()
        )));
    }
    if a.ncols() != m && a.nrows() > 0 {
        return Err(QpError::Dimension(format!("A has {} columns, expected {m}", a.ncols())));
    }
    if lower.len() != a.nrows() || upper.len() != a.nrows() {
        return Err(QpError::Dimension(format!(
            "A has {} rows but bounds have {} and {} entries",
            a.nrows(),
            lower.len(),
            upper.len()
        )));
    }
    Ok(())
}

/// Objective value `U' H U + c' U`.
pub fn objective(h: &DMatrix<f64>, c: &DVector<f64>, u: &DVector<f64>) -> f64 {
    (h * u).dot(u) + c.dot(u)
}

/// Max-norm of the KKT violations at `u` with the given multipliers:
/// stationarity `2 H U + c + A'(lambda_upper - lambda_lower)`, primal
/// infeasibility, negative multipliers, and complementarity products.
pub fn kkt_residual(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    u: &DVector<f64>,
    multipliers: &Multipliers,
) -> f64 {
    let mut grad = 2.0 * (h * u) + c;
    if a.nrows() > 0 {
        grad += a.transpose() * (&multipliers.upper - &multipliers.lower);
    }
    let mut worst = grad.amax();
    let au = if a.nrows() > 0 { a * u } else { DVector::zeros(0) };
    for i in 0..a.nrows() {
        let (ll, lu) = (multipliers.lower[i], multipliers.upper[i]);
        worst = worst.max(-ll).max(-lu);
        if lower[i].is_finite() {
            let slack = au[i] - lower[i];
            worst = worst.max(-slack);
            if ll != 0.0 {
                worst = worst.max((ll * slack).abs());
            }
        }
        if upper[i].is_finite() {
            let slack = upper[i] - au[i];
            worst = worst.max(-slack);
            if lu != 0.0 {
                worst = worst.max((lu * slack).abs());
            }
        }
    }
    worst
}

/// Plane rotation `(c, s)` with `c*x + s*y = hypot(x, y)` and `-s*x + c*y = 0`.
fn givens(x: f64, y: f64) -> (f64, f64) {
    let r = x.hypot(y);
    if r == 0.0 {
        (1.0, 0.0)
    } else {
        (x / r, y / r)
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    for row in 0..m.nrows() {
        let (x, y) = (m[(row, i)], m[(row, j)]);
        m[(row, i)] = c * x + s * y;
        m[(row, j)] = -s * x + c * y;
    }
}

struct ActiveEntry {
    row: usize,
    side: Side,
    multiplier: f64,
}

/// Working factorization of the dual active-set iteration.
struct Workspace {
    /// `J = L^-T Q`; the first `q` columns span the active normals.
    j: DMatrix<f64>,
    /// Upper-triangular `q x q` block in the top-left corner.
    r: DMatrix<f64>,
    active: Vec<ActiveEntry>,
}

impl Workspace {
    fn q(&self) -> usize {
        self.active.len()
    }

    /// Step direction `z` in primal space and `r = R^-1 d_1` in dual space.
    fn directions(&self, normal: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let dim = self.j.nrows();
        let q = self.q();
        let d = self.j.tr_mul(normal);
        let mut z = DVector::zeros(dim);
        for col in q..dim {
            z.axpy(d[col], &self.j.column(col), 1.0);
        }
        let mut r = DVector::zeros(q);
        for i in (0..q).rev() {
            let mut acc = d[i];
            for k in i + 1..q {
                acc -= self.r[(i, k)] * r[k];
            }
            r[i] = acc / self.r[(i, i)];
        }
        (d, z, r)
    }

    /// Appends a constraint whose transformed normal is `d = J' n`.
    fn add(&mut self, mut d: DVector<f64>, row: usize, side: Side, multiplier: f64) {
        let dim = self.j.nrows();
        let q = self.q();
        for col in (q + 1..dim).rev() {
            if d[col] == 0.0 {
                continue;
            }
            let (c, s) = givens(d[col - 1], d[col]);
            d[col - 1] = c * d[col - 1] + s * d[col];
            d[col] = 0.0;
            rotate_columns(&mut self.j, col - 1, col, c, s);
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        self.active.push(ActiveEntry { row, side, multiplier });
    }

    /// Removes the `l`-th active constraint and restores triangularity.
    fn drop(&mut self, l: usize) {
        let q = self.q();
        self.active.remove(l);
        for col in l..q - 1 {
            for i in 0..q {
                self.r[(i, col)] = self.r[(i, col + 1)];
            }
        }
        for i in 0..q {
            self.r[(i, q - 1)] = 0.0;
        }
        // R is now upper Hessenberg from column l on
        for k in l..q - 1 {
            let (x, y) = (self.r[(k, k)], self.r[(k + 1, k)]);
            if y == 0.0 {
                continue;
            }
            let (c, s) = givens(x, y);
            for col in k..q - 1 {
                let (a, b) = (self.r[(k, col)], self.r[(k + 1, col)]);
                self.r[(k, col)] = c * a + s * b;
                self.r[(k + 1, col)] = -s * a + c * b;
            }
            self.r[(k + 1, k)] = 0.0;
            rotate_columns(&mut self.j, k, k + 1, c, s);
        }
    }
}

/// Solves the QP to tolerance `tol` (stationarity, feasibility and
/// complementarity all within `tol` in max-norm).
///
/// Fails with [`QpError::Infeasible`] when no point satisfies every row and
/// with [`QpError::IterationLimit`] after `50 (M + K)` add/drop steps.
pub fn solve(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    tol: f64,
) -> Result<QpSolution, QpError> {
    check_dims(h, c, a, lower, upper)?;
    let dim = h.nrows();
    let rows = a.nrows();

    let asym = (h - h.transpose()).amax();
    if asym > 1e-10 * h.amax().max(1.0) {
        return Err(QpError::NotPositiveDefinite);
    }

    // rows that take part in the iteration
    let mut live = vec![false; rows];
    for i in 0..rows {
        if lower[i].is_nan() || upper[i].is_nan() || lower[i] > upper[i] {
            return Err(QpError::Infeasible { row: i });
        }
        let empty = a.row(i).iter().all(|x| *x == 0.0);
        if empty {
            if lower[i] > tol || upper[i] < -tol {
                return Err(QpError::Infeasible { row: i });
            }
        } else if lower[i].is_finite() || upper[i].is_finite() {
            live[i] = true;
        }
    }

    // G = 2H = L L'
    let g = h * 2.0;
    let chol = g.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let l = chol.l();
    if (0..dim).any(|i| !(l[(i, i)] > 0.0) || !l[(i, i)].is_finite()) {
        return Err(QpError::NotPositiveDefinite);
    }
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(dim, dim))
        .ok_or(QpError::NotPositiveDefinite)?;

    let mut ws = Workspace {
        j: l_inv.transpose(),
        r: DMatrix::zeros(dim, dim),
        active: Vec::new(),
    };
    let mut x = -chol.solve(c);

    let limit = 50 * (dim + rows);
    let mut iterations = 0;
    let normal_of = |row: usize, side: Side| -> (DVector<f64>, f64) {
        let n = a.row(row).transpose();
        match side {
            Side::Lower => (n, lower[row]),
            Side::Upper => (-n, -upper[row]),
        }
    };

    loop {
        // most violated inactive side; ties go to the lowest row, lower side first
        let ax = a * &x;
        let mut pick: Option<(usize, Side, f64)> = None;
        for i in 0..rows {
            if !live[i] || ws.active.iter().any(|e| e.row == i) {
                continue;
            }
            let scale = 1e-12 * (1.0 + a.row(i).amax() * x.amax());
            for (side, slack) in [
                (Side::Lower, if lower[i].is_finite() { ax[i] - lower[i] } else { f64::INFINITY }),
                (Side::Upper, if upper[i].is_finite() { upper[i] - ax[i] } else { f64::INFINITY }),
            ] {
                let bound = match side {
                    Side::Lower => lower[i],
                    Side::Upper => upper[i],
                };
                if slack < -(scale + 1e-12 * bound.abs()) && pick.is_none_or(|(_, _, s)| slack < s) {
                    pick = Some((i, side, slack));
                }
            }
        }
        let Some((row, side, _)) = pick else {
            break;
        };
        let (normal, bound) = normal_of(row, side);
        let mut new_multiplier = 0.0;

        loop {
            iterations += 1;
            if iterations > limit {
                return Err(QpError::IterationLimit { limit });
            }
            let (d, z, r) = ws.directions(&normal);
            let q = ws.q();

            // largest dual step before an active multiplier hits zero
            let mut partial: Option<(usize, f64)> = None;
            for k in 0..q {
                if r[k] > 0.0 {
                    let ratio = ws.active[k].multiplier / r[k];
                    if partial.is_none_or(|(_, t)| ratio < t) {
                        partial = Some((k, ratio));
                    }
                }
            }
            let z_norm2 = d.rows(q, dim - q).norm_squared();
            let slack = normal.dot(&x) - bound;
            let full = if z_norm2 > 1e-20 * d.norm_squared() {
                Some(-slack / normal.dot(&z))
            } else {
                None
            };

            match (full, partial) {
                (None, None) => return Err(QpError::Infeasible { row }),
                (None, Some((k, t1))) => {
                    for (e, rk) in ws.active.iter_mut().zip(r.iter()) {
                        e.multiplier -= t1 * rk;
                    }
                    new_multiplier += t1;
                    ws.drop(k);
                }
                (Some(t2), partial) => {
                    let (t, drop_at) = match partial {
                        Some((k, t1)) if t1 < t2 => (t1, Some(k)),
                        _ => (t2, None),
                    };
                    x.axpy(t, &z, 1.0);
                    for (e, rk) in ws.active.iter_mut().zip(r.iter()) {
                        e.multiplier -= t * rk;
                    }
                    new_multiplier += t;
                    match drop_at {
                        Some(k) => ws.drop(k),
                        None => {
                            ws.add(d, row, side, new_multiplier);
                            break;
                        }
                    }
                }
            }
        }
    }

    let mut multipliers = Multipliers::zeros(rows);
    let mut active_set: Vec<ActiveConstraint> = ws
        .active
        .iter()
        .map(|e| {
            let lambda = e.multiplier.max(0.0);
            match e.side {
                Side::Lower => multipliers.lower[e.row] = lambda,
                Side::Upper => multipliers.upper[e.row] = lambda,
            }
            ActiveConstraint { row: e.row, side: e.side }
        })
        .collect();
    active_set.sort_by_key(|e| (e.row, e.side));

    let residual = kkt_residual(h, c, a, lower, upper, &x, &multipliers);
    Ok(QpSolution {
        objective: objective(h, c, &x),
        minimizer: x,
        active_set,
        multipliers,
        kkt_residual: residual,
        iterations,
    })
}
