//! Constrained quadratic least-squares engine.
//!
//! Minimizes `||y - K x||^2` over the constraint set, and over its intersection
//! with the slice `h' x = mu`. This is the inner machinery of every
//! likelihood-ratio and interval evaluation, so two paths are provided:
//!
//! * a projection fast path when `K` is the identity and the constraints are an
//!   orthant or box (clamping, plus a scalar multiplier bisection for slices);
//! * a primal active-set method for general `K` and linear inequalities, with
//!   the slice equality removed up front by a null-space change of variables.
//!
//! A brute-force grid search over a user-supplied box serves as an independent
//! oracle for testing. Solutions report a KKT residual so callers can audit
//! optimality; the problems are convex, so any KKT point is a global minimum.
//! When the minimizer is non-unique (rank-deficient `K`), the point reached by
//! the active-set path is returned; any minimizer is acceptable.

use nalgebra::{DMatrix, DVector};

use crate::model::{ConstraintSet, ProblemInstance};
use crate::{Error, Result};

/// Absolute feasibility / KKT tolerance.
pub const KKT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

/// Outcome of a constrained least-squares solve.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x_hat: DVector<f64>,
    /// `||y - K x_hat||^2`; `+inf` when infeasible.
    pub objective: f64,
    pub status: SolveStatus,
    pub kkt_residual: f64,
}

impl QpSolution {
    fn infeasible(p: usize) -> Self {
        Self {
            x_hat: DVector::zeros(p),
            objective: f64::INFINITY,
            status: SolveStatus::Infeasible,
            kkt_residual: 0.0,
        }
    }
}

/// Global minimizer of `||y - K x||^2` over the constraint set.
pub fn min_residual(inst: &ProblemInstance, y: &DVector<f64>) -> Result<QpSolution> {
    check_obs(inst, y)?;
    let cs = inst.constraints();
    if is_identity(inst) {
        if let Some((lower, upper)) = box_bounds(cs) {
            let x = clamp(y, &lower, &upper);
            let objective = (y - &x).norm_squared();
            let kkt = box_kkt(y, &x, 0.0, None, &lower, &upper);
            return Ok(QpSolution {
                x_hat: x,
                objective,
                status: SolveStatus::Optimal,
                kkt_residual: kkt,
            });
        }
    }
    let (a, b) = cs.as_linear_inequalities();
    let Some(x0) = feasible_point(cs, &a, &b) else {
        return Ok(QpSolution::infeasible(inst.p()));
    };
    Ok(active_set_ls(inst.k(), y, &a, &b, x0))
}

/// Global minimizer of `||y - K x||^2` over the constraint set intersected
/// with the slice `h' x = mu`. Reports `Infeasible` when the slice misses the
/// constraint set.
pub fn min_residual_on_slice(
    inst: &ProblemInstance,
    y: &DVector<f64>,
    mu: f64,
) -> Result<QpSolution> {
    check_obs(inst, y)?;
    let h = inst.h();
    let h_norm2 = h.norm_squared();
    if h_norm2 == 0.0 {
        return Err(Error::InvalidInput("functional weights are all zero".into()));
    }
    let cs = inst.constraints();
    let (range_lo, range_hi) = cs.functional_range(h);
    if mu < range_lo || mu > range_hi {
        return Ok(QpSolution::infeasible(inst.p()));
    }

    if is_identity(inst) {
        if let Some((lower, upper)) = box_bounds(cs) {
            let Some((x, nu)) = slice_projection(y, h, mu, &lower, &upper) else {
                return Ok(QpSolution::infeasible(inst.p()));
            };
            let objective = (y - &x).norm_squared();
            let kkt = box_kkt(y, &x, nu, Some(h), &lower, &upper)
                .max((h.dot(&x) - mu).abs());
            return Ok(QpSolution {
                x_hat: x,
                objective,
                status: SolveStatus::Optimal,
                kkt_residual: kkt,
            });
        }
    }

    // Null-space elimination of the equality: x = x0 + Z s with Z an
    // orthonormal basis of the hyperplane through the origin orthogonal to h.
    let p = inst.p();
    let x0 = h * (mu / h_norm2);
    let z_basis = orthonormal_complement(&DMatrix::from_rows(&[h.transpose()]));
    if z_basis.ncols() == 0 {
        // p = 1: the slice is the single point x0.
        let feasible = cs.contains(&x0, KKT_TOL)?;
        if !feasible {
            return Ok(QpSolution::infeasible(p));
        }
        let objective = (y - inst.k() * &x0).norm_squared();
        return Ok(QpSolution {
            x_hat: x0,
            objective,
            status: SolveStatus::Optimal,
            kkt_residual: 0.0,
        });
    }

    let (a, b) = cs.as_linear_inequalities();
    let a_red = &a * &z_basis;
    let b_red = &b - &a * &x0;

    // Feasible start in the reduced coordinates.
    let s0 = match box_bounds(cs) {
        Some((lower, upper)) => {
            // Project the origin onto the slice inside the box; K plays no role.
            let anchor = DVector::zeros(p);
            let Some((x_feas, _)) = slice_projection(&anchor, h, mu, &lower, &upper) else {
                return Ok(QpSolution::infeasible(p));
            };
            z_basis.transpose() * (x_feas - &x0)
        }
        None => match phase1(&a_red, &b_red) {
            Some(s) => s,
            None => return Ok(QpSolution::infeasible(p)),
        },
    };

    let k_red = inst.k() * &z_basis;
    let c_red = y - inst.k() * &x0;
    let sol = active_set_ls(&k_red, &c_red, &a_red, &b_red, s0);
    let x_hat = &x0 + &z_basis * &sol.x_hat;
    let objective = (y - inst.k() * &x_hat).norm_squared();
    Ok(QpSolution {
        x_hat,
        objective,
        status: sol.status,
        kkt_residual: sol.kkt_residual,
    })
}

/// Grid box and resolution for the brute-force oracle.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub step: f64,
}

/// Exhaustive search over grid points inside the constraint set (and within
/// `step * ||h||_1` of the slice when `mu` is given). Independent oracle for
/// the optimizing solvers; only sensible for `p <= 4`.
pub fn brute_force_min(
    inst: &ProblemInstance,
    y: &DVector<f64>,
    mu: Option<f64>,
    grid: &GridSpec,
) -> Result<QpSolution> {
    check_obs(inst, y)?;
    let p = inst.p();
    if p > 4 {
        return Err(Error::InvalidInput("brute_force_min: p > 4".into()));
    }
    if grid.lower.len() != p || grid.upper.len() != p || grid.step <= 0.0 {
        return Err(Error::InvalidInput("brute_force_min: bad grid".into()));
    }
    let counts: Vec<usize> = (0..p)
        .map(|j| ((grid.upper[j] - grid.lower[j]) / grid.step).floor() as usize + 1)
        .collect();
    let q = inst.k().transpose() * inst.k();
    let lin = inst.k().transpose() * y;
    let yy = y.norm_squared();
    let slice_tol = mu.map(|_| grid.step * inst.h().iter().map(|v| v.abs()).sum::<f64>());

    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut idx = vec![0usize; p];
    let mut x = DVector::zeros(p);
    'outer: loop {
        for j in 0..p {
            x[j] = grid.lower[j] + idx[j] as f64 * grid.step;
        }
        let ok_slice = match (mu, slice_tol) {
            (Some(m), Some(tol)) => (inst.h().dot(&x) - m).abs() <= tol,
            _ => true,
        };
        if ok_slice && inst.constraints().contains(&x, 1e-9)? {
            let f = (x.transpose() * &q * &x)[(0, 0)] - 2.0 * lin.dot(&x) + yy;
            if best.as_ref().map_or(true, |(bf, _)| f < *bf) {
                best = Some((f, x.clone()));
            }
        }
        // Odometer increment.
        for j in 0..p {
            idx[j] += 1;
            if idx[j] < counts[j] {
                continue 'outer;
            }
            idx[j] = 0;
        }
        break;
    }
    match best {
        Some((objective, x_hat)) => Ok(QpSolution {
            x_hat,
            objective: objective.max(0.0),
            status: SolveStatus::Optimal,
            kkt_residual: 0.0,
        }),
        None => Ok(QpSolution::infeasible(p)),
    }
}

// ---------------------------------------------------------------------------
// Identity / box fast path
// ---------------------------------------------------------------------------

fn check_obs(inst: &ProblemInstance, y: &DVector<f64>) -> Result<()> {
    if y.len() != inst.m() {
        return Err(Error::DimensionMismatch(format!(
            "observation has length {}, expected {}",
            y.len(),
            inst.m()
        )));
    }
    Ok(())
}

fn is_identity(inst: &ProblemInstance) -> bool {
    inst.m() == inst.p() && inst.k().is_identity(0.0)
}

/// Bounds when the set is an orthant (`upper = +inf`) or a box.
fn box_bounds(cs: &ConstraintSet) -> Option<(DVector<f64>, DVector<f64>)> {
    match cs {
        ConstraintSet::NonNegativeOrthant { dim } => Some((
            DVector::zeros(*dim),
            DVector::from_element(*dim, f64::INFINITY),
        )),
        ConstraintSet::Box { lower, upper } => Some((lower.clone(), upper.clone())),
        ConstraintSet::LinearInequalities { .. } => None,
    }
}

fn clamp(v: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |j, _| v[j].max(lower[j]).min(upper[j]))
}

/// Projection of `y` onto the box intersected with `h' x = mu`.
///
/// The minimizer is `x(nu) = clamp(y - nu h)` where the scalar multiplier `nu`
/// solves `h' x(nu) = mu`; that map is continuous and nonincreasing, so `nu` is
/// found by bisection.
pub(crate) fn slice_projection(
    y: &DVector<f64>,
    h: &DVector<f64>,
    mu: f64,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> Option<(DVector<f64>, f64)> {
    let value = |nu: f64| -> f64 {
        let mut acc = 0.0;
        for j in 0..y.len() {
            acc += h[j] * (y[j] - nu * h[j]).max(lower[j]).min(upper[j]);
        }
        acc
    };
    let scale = 1.0 + y.amax() + mu.abs();
    let mut t = scale;
    let mut lo = -t;
    let mut hi = t;
    for _ in 0..200 {
        if value(lo) >= mu && value(hi) <= mu {
            break;
        }
        t *= 2.0;
        lo = -t;
        hi = t;
        if !t.is_finite() {
            return None;
        }
    }
    if !(value(lo) >= mu && value(hi) <= mu) {
        return None;
    }
    for _ in 0..120 {
        let mid = 0.5 * (lo + hi);
        if value(mid) >= mu {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let nu = 0.5 * (lo + hi);
    let mut x = DVector::from_fn(y.len(), |j, _| (y[j] - nu * h[j]).max(lower[j]).min(upper[j]));
    // Polish the equality by shifting along h over the unsaturated coordinates.
    let mut free_norm2 = 0.0;
    for j in 0..x.len() {
        if x[j] > lower[j] && x[j] < upper[j] {
            free_norm2 += h[j] * h[j];
        }
    }
    if free_norm2 > 0.0 {
        let delta = mu - h.dot(&x);
        for j in 0..x.len() {
            if x[j] > lower[j] && x[j] < upper[j] {
                x[j] += delta * h[j] / free_norm2;
            }
        }
    }
    Some((x, nu))
}

/// KKT residual of a clamped point for `min ||y - x||^2 + 2 nu (h'x - mu)`.
fn box_kkt(
    y: &DVector<f64>,
    x: &DVector<f64>,
    nu: f64,
    h: Option<&DVector<f64>>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..x.len() {
        let hj = h.map_or(0.0, |h| h[j]);
        let r = 2.0 * (x[j] - y[j]) + 2.0 * nu * hj;
        let at_lower = x[j] <= lower[j] + KKT_TOL;
        let at_upper = x[j] >= upper[j] - KKT_TOL;
        let v = if at_lower && at_upper {
            0.0
        } else if at_lower {
            (-r).max(0.0) // multiplier r must be nonnegative
        } else if at_upper {
            r.max(0.0) // multiplier -r must be nonnegative
        } else {
            r.abs()
        };
        worst = worst.max(v);
    }
    worst
}

// ---------------------------------------------------------------------------
// Active-set method for min ||c - G z||^2 s.t. A z <= b
// ---------------------------------------------------------------------------

fn svd_lstsq(m: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let svd = nalgebra::SVD::new(m.clone(), true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = (1e-12 * smax).max(1e-300);
    svd.solve(rhs, eps)
        .unwrap_or_else(|_| DVector::zeros(m.ncols()))
}

/// Orthonormal basis (as columns) of the orthogonal complement of the row
/// space of `rows`, built by modified Gram-Schmidt against the standard basis.
fn orthonormal_complement(rows: &DMatrix<f64>) -> DMatrix<f64> {
    let n = rows.ncols();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for i in 0..rows.nrows() {
        let mut v: DVector<f64> = rows.row(i).transpose();
        for u in &basis {
            let proj = u.dot(&v);
            v -= u * proj;
        }
        let nv = v.norm();
        if nv > 1e-12 {
            basis.push(v / nv);
        }
    }
    let mut complement: Vec<DVector<f64>> = Vec::new();
    for j in 0..n {
        if basis.len() == n {
            break;
        }
        let mut v = DVector::zeros(n);
        v[j] = 1.0;
        for u in &basis {
            let proj = u.dot(&v);
            v -= u * proj;
        }
        let nv = v.norm();
        if nv > 1e-10 {
            let v = v / nv;
            basis.push(v.clone());
            complement.push(v);
        }
    }
    if complement.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&complement.iter().map(|v| v.column(0).into_owned()).collect::<Vec<_>>())
    }
}

/// Minimizer of `||c - G z||^2` subject to the working-set equalities
/// `A_W z = b_W` (rows assumed linearly independent).
fn eq_constrained_min(
    g: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    w: &[usize],
) -> DVector<f64> {
    if w.is_empty() {
        return svd_lstsq(g, c);
    }
    let a_w = DMatrix::from_rows(&w.iter().map(|&i| a.row(i)).collect::<Vec<_>>());
    let b_w = DVector::from_iterator(w.len(), w.iter().map(|&i| b[i]));
    // Particular solution: z_hat = A_W' (A_W A_W')^{-1} b_W.
    let gram = &a_w * a_w.transpose();
    let t = gram
        .clone()
        .lu()
        .solve(&b_w)
        .unwrap_or_else(|| svd_lstsq(&gram, &b_w));
    let z_hat = a_w.transpose() * t;
    let null = orthonormal_complement(&a_w);
    if null.ncols() == 0 {
        return z_hat;
    }
    let gn = g * &null;
    let rhs = c - g * &z_hat;
    let v = svd_lstsq(&gn, &rhs);
    z_hat + null * v
}

/// Primal active-set method for `min ||c - G z||^2  s.t.  A z <= b`, starting
/// from the feasible point `z0`.
fn active_set_ls(
    g: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    z0: DVector<f64>,
) -> QpSolution {
    let n = z0.len();
    let q = a.nrows();
    let max_iter = 100 * (n + q).max(1);
    let mut z = z0;

    // Initial working set: active constraints, added only while their rows
    // stay linearly independent.
    let mut w: Vec<usize> = Vec::new();
    {
        let mut basis: Vec<DVector<f64>> = Vec::new();
        for i in 0..q {
            let row: DVector<f64> = a.row(i).transpose();
            let resid = row.dot(&z) - b[i];
            if resid >= -KKT_TOL {
                let mut v = row.clone();
                for u in &basis {
                    let proj = u.dot(&v);
                    v -= u * proj;
                }
                if v.norm() > 1e-8 * row.norm().max(1e-300) {
                    basis.push(v.normalize());
                    w.push(i);
                }
            }
        }
    }

    let grad = |z: &DVector<f64>| -> DVector<f64> { g.transpose() * (g * z - c) * 2.0 };
    let mut status = SolveStatus::IterationLimit;

    for _ in 0..max_iter {
        let z_eq = eq_constrained_min(g, c, a, b, &w);
        let d = &z_eq - &z;
        let step_scale = 1.0 + z.amax();
        if d.amax() <= 1e-10 * step_scale {
            // Candidate optimum on the current working set: check multipliers.
            let gr = grad(&z);
            if w.is_empty() {
                status = SolveStatus::Optimal;
                break;
            }
            let a_w = DMatrix::from_rows(&w.iter().map(|&i| a.row(i)).collect::<Vec<_>>());
            let lambda = svd_lstsq(&a_w.transpose(), &(-&gr));
            let tol_mult = 1e-8 * (1.0 + gr.amax());
            let (min_idx, min_val) = lambda
                .iter()
                .enumerate()
                .fold((0usize, f64::INFINITY), |acc, (i, &v)| {
                    if v < acc.1 { (i, v) } else { acc }
                });
            if min_val >= -tol_mult {
                status = SolveStatus::Optimal;
                break;
            }
            w.remove(min_idx);
            continue;
        }
        // Ratio test against constraints outside the working set.
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..q {
            if w.contains(&i) {
                continue;
            }
            let row = a.row(i);
            let ad = row.transpose().dot(&d);
            if ad > 1e-12 * (1.0 + row.amax()) * (1.0 + d.amax()) {
                let slack = b[i] - row.transpose().dot(&z);
                let limit = (slack / ad).max(0.0);
                if limit < alpha {
                    alpha = limit;
                    blocking = Some(i);
                }
            }
        }
        z += d * alpha;
        if let Some(i) = blocking {
            w.push(i);
        }
    }

    // Report the KKT residual at the final point.
    let gr = grad(&z);
    let stat_res = if w.is_empty() {
        gr.amax()
    } else {
        let a_w = DMatrix::from_rows(&w.iter().map(|&i| a.row(i)).collect::<Vec<_>>());
        let lambda = svd_lstsq(&a_w.transpose(), &(-&gr));
        let lambda_pos = lambda.map(|v| v.max(0.0));
        (a_w.transpose() * lambda_pos + &gr).amax()
    };
    let feas_res = (0..q)
        .map(|i| (a.row(i).transpose().dot(&z) - b[i]).max(0.0))
        .fold(0.0, f64::max);
    QpSolution {
        objective: (c - g * &z).norm_squared(),
        x_hat: z,
        status,
        kkt_residual: stat_res.max(feas_res),
    }
}

/// Feasible point of `A x <= b` for the supported constraint variants.
fn feasible_point(cs: &ConstraintSet, a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    match cs {
        ConstraintSet::NonNegativeOrthant { dim } => Some(DVector::zeros(*dim)),
        ConstraintSet::Box { lower, upper } => {
            Some(DVector::from_fn(lower.len(), |j, _| 0.0f64.max(lower[j]).min(upper[j])))
        }
        ConstraintSet::LinearInequalities { .. } => phase1(a, b),
    }
}

/// Phase-1 feasibility: minimizes `||w||^2` subject to `A s - w <= b, w >= 0`.
/// Returns a feasible `s` when the optimum is (numerically) zero.
fn phase1(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let q = a.nrows();
    let n = a.ncols();
    if q == 0 {
        return Some(DVector::zeros(n));
    }
    if b.iter().all(|&v| v >= 0.0) {
        return Some(DVector::zeros(n));
    }
    // Variables z = (s, w).
    let mut g = DMatrix::zeros(q, n + q);
    for i in 0..q {
        g[(i, n + i)] = 1.0;
    }
    let c = DVector::zeros(q);
    let mut a_big = DMatrix::zeros(2 * q, n + q);
    let mut b_big = DVector::zeros(2 * q);
    for i in 0..q {
        for j in 0..n {
            a_big[(i, j)] = a[(i, j)];
        }
        a_big[(i, n + i)] = -1.0;
        b_big[i] = b[i];
        a_big[(q + i, n + i)] = -1.0;
        b_big[q + i] = 0.0;
    }
    let mut z0 = DVector::zeros(n + q);
    for i in 0..q {
        z0[n + i] = (-b[i]).max(0.0);
    }
    let sol = active_set_ls(&g, &c, &a_big, &b_big, z0);
    if sol.objective <= 1e-14 {
        Some(sol.x_hat.rows(0, n).into_owned())
    } else {
        None
    }
}
