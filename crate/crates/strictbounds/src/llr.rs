//! The constrained likelihood-ratio statistic
//!
//! `lambda(mu, y) = min { ||y - K x||^2 : h'x = mu, x in X }
//!                  - min { ||y - K x||^2 : x in X }`.
//!
//! For identity noise this is minus twice the log likelihood ratio of the
//! hypothesis `h'x = mu`, and inverting the test `lambda(mu, y) <= q(mu)`
//! produces the confidence intervals in [`crate::intervals`].
//!
//! The generic evaluation performs two constrained solves. Exact closed forms
//! are installed automatically for four special instances that the experiments
//! hammer with millions of draws: the 1D nonnegative model, unconstrained
//! full-column-rank models, and the 2D / 3D counterexample geometries.

use nalgebra::{DMatrix, DVector};

use crate::model::{ConstraintSet, ProblemInstance};
use crate::solver::{self, SolveStatus};
use crate::{Error, Result};

/// Closed-form evaluation routes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FastPath {
    None,
    /// `K = I_1`, `h = (1)`, nonnegative orthant.
    OneDimConstrained,
    /// Unconstrained (free) parameter with `K` of full column rank.
    UnconstrainedFullRank,
    /// `K = I_2`, `h = (1, -1)`, orthant; applies at `mu = 0` only.
    TwoDimCounterexample,
    /// `K = I_3`, `h = (1, 1, -1)`, orthant; applies at `mu = -1` only.
    ThreeDimCounterexample,
}

/// Value of the statistic at one `(mu, y)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LlrOutcome {
    Finite(f64),
    /// The slice `h'x = mu` misses the constraint set.
    InfeasibleSlice,
}

impl LlrOutcome {
    /// The value used in threshold comparisons: an infeasible slice compares
    /// as `+inf` and is therefore never accepted, but it is never silently
    /// replaced by a finite number.
    pub fn threshold_value(&self) -> f64 {
        match self {
            LlrOutcome::Finite(v) => *v,
            LlrOutcome::InfeasibleSlice => f64::INFINITY,
        }
    }

    pub fn finite(&self) -> Option<f64> {
        match self {
            LlrOutcome::Finite(v) => Some(*v),
            LlrOutcome::InfeasibleSlice => None,
        }
    }
}

/// Evaluator of `lambda(mu, y)` for one problem instance.
#[derive(Debug, Clone)]
pub struct LlrStatistic {
    inst: ProblemInstance,
    fast_path: FastPath,
}

impl LlrStatistic {
    /// Builds the evaluator, auto-detecting an applicable fast path.
    pub fn new(inst: ProblemInstance) -> Self {
        let fast_path = detect_fast_path(&inst);
        Self { inst, fast_path }
    }

    /// Builds with an explicit route, validating its preconditions.
    pub fn with_fast_path(inst: ProblemInstance, fast_path: FastPath) -> Result<Self> {
        if fast_path != FastPath::None && detect_fast_path(&inst) != fast_path {
            return Err(Error::InvalidInput(format!(
                "instance does not satisfy the preconditions of {fast_path:?}"
            )));
        }
        Ok(Self { inst, fast_path })
    }

    pub fn instance(&self) -> &ProblemInstance {
        &self.inst
    }

    pub fn fast_path(&self) -> FastPath {
        self.fast_path
    }

    /// The subtrahend `s^2(y) = min ||y - K x||^2` over the constraint set.
    pub fn subtrahend(&self, y: &DVector<f64>) -> Result<f64> {
        match self.fast_path {
            FastPath::OneDimConstrained => Ok(y[0].min(0.0).powi(2)),
            FastPath::UnconstrainedFullRank => {
                let sol = solver::min_residual(&self.inst, y)?;
                Ok(sol.objective)
            }
            FastPath::TwoDimCounterexample | FastPath::ThreeDimCounterexample => {
                Ok(y.iter().map(|&v| v.min(0.0).powi(2)).sum())
            }
            FastPath::None => {
                let sol = solver::min_residual(&self.inst, y)?;
                match sol.status {
                    SolveStatus::Infeasible => Err(Error::Infeasible(
                        "constraint set is empty".into(),
                    )),
                    _ => Ok(sol.objective),
                }
            }
        }
    }

    /// `lambda(mu, y)`; `InfeasibleSlice` when `mu` is not attained on X.
    pub fn evaluate(&self, mu: f64, y: &DVector<f64>) -> Result<LlrOutcome> {
        let s2 = self.subtrahend(y)?;
        self.evaluate_with_subtrahend(mu, y, s2)
    }

    /// Same as [`evaluate`](Self::evaluate) with `s^2(y)` precomputed, so
    /// interval search can reuse one subtrahend across many `mu`.
    pub fn evaluate_with_subtrahend(
        &self,
        mu: f64,
        y: &DVector<f64>,
        s2: f64,
    ) -> Result<LlrOutcome> {
        match self.fast_path {
            FastPath::OneDimConstrained => {
                if mu < 0.0 {
                    return Ok(LlrOutcome::InfeasibleSlice);
                }
                Ok(LlrOutcome::Finite((y[0] - mu).powi(2) - y[0].min(0.0).powi(2)))
            }
            FastPath::UnconstrainedFullRank => Ok(LlrOutcome::Finite(
                evaluate_unconstrained_closed_form(&self.inst, mu, y)?,
            )),
            FastPath::TwoDimCounterexample if mu == 0.0 => {
                Ok(LlrOutcome::Finite(evaluate_2d_counterexample([y[0], y[1]])))
            }
            FastPath::ThreeDimCounterexample if mu == -1.0 => Ok(LlrOutcome::Finite(
                evaluate_3d_counterexample([y[0], y[1], y[2]]),
            )),
            _ => {
                let slice = solver::min_residual_on_slice(&self.inst, y, mu)?;
                match slice.status {
                    SolveStatus::Infeasible => Ok(LlrOutcome::InfeasibleSlice),
                    _ => Ok(LlrOutcome::Finite(slice.objective - s2)),
                }
            }
        }
    }

    /// The slice objective alone: `min ||y - Kx||^2` over `X ∩ {h'x = mu}`.
    pub fn slice_objective(&self, mu: f64, y: &DVector<f64>) -> Result<Option<f64>> {
        match self.fast_path {
            FastPath::OneDimConstrained => {
                Ok((mu >= 0.0).then(|| (y[0] - mu).powi(2)))
            }
            FastPath::TwoDimCounterexample if mu == 0.0 => {
                let y2 = [y[0], y[1]];
                Ok(Some(slice_min_2d(y2)))
            }
            FastPath::ThreeDimCounterexample if mu == -1.0 => {
                let y3 = [y[0], y[1], y[2]];
                Ok(Some(slice_min_3d(y3)))
            }
            _ => {
                let slice = solver::min_residual_on_slice(&self.inst, y, mu)?;
                Ok(match slice.status {
                    SolveStatus::Infeasible => None,
                    _ => Some(slice.objective),
                })
            }
        }
    }
}

fn detect_fast_path(inst: &ProblemInstance) -> FastPath {
    let is_orthant = matches!(
        inst.constraints(),
        ConstraintSet::NonNegativeOrthant { .. }
    );
    let identity = inst.m() == inst.p() && inst.k().is_identity(0.0);
    if is_orthant && identity {
        let h: Vec<f64> = inst.h().iter().copied().collect();
        match h.as_slice() {
            [1.0] => return FastPath::OneDimConstrained,
            [1.0, -1.0] => return FastPath::TwoDimCounterexample,
            [1.0, 1.0, -1.0] => return FastPath::ThreeDimCounterexample,
            _ => {}
        }
    }
    if inst.constraints().is_free() {
        let ktk = inst.k().transpose() * inst.k();
        if ktk.clone().cholesky().is_some() {
            return FastPath::UnconstrainedFullRank;
        }
    }
    FastPath::None
}

/// Closed form for the unconstrained full-column-rank model:
/// `lambda = (h'(K'K)^{-1}K'y - mu)^2 / h'(K'K)^{-1}h`.
pub fn evaluate_unconstrained_closed_form(
    inst: &ProblemInstance,
    mu: f64,
    y: &DVector<f64>,
) -> Result<f64> {
    let ktk = inst.k().transpose() * inst.k();
    let chol = ktk
        .cholesky()
        .ok_or_else(|| Error::Numerical("K'K is singular".into()))?;
    let x_ls = chol.solve(&(inst.k().transpose() * y));
    let ktk_inv_h = chol.solve(inst.h());
    let denom = inst.h().dot(&ktk_inv_h);
    Ok((inst.h().dot(&x_ls) - mu).powi(2) / denom)
}

// Slice minimum of the 2D counterexample (K = I_2, h = (1,-1)) at mu = 0:
// the projection of y onto the diagonal ray {x1 = x2 >= 0}.
fn slice_min_2d(y: [f64; 2]) -> f64 {
    let s = y[0] + y[1];
    if s < 0.0 {
        y[0] * y[0] + y[1] * y[1]
    } else {
        0.5 * (y[0] - y[1]).powi(2)
    }
}

/// Closed form for `lambda(0, y)` in the 2D counterexample.
pub fn evaluate_2d_counterexample(y: [f64; 2]) -> f64 {
    slice_min_2d(y) - y[0].min(0.0).powi(2) - y[1].min(0.0).powi(2)
}

// Slice minimum of the 3D counterexample (K = I_3, h = (1,1,-1)) at mu = -1.
//
// Substituting x = (u, v, 1 + u + v) with u, v >= 0 and z = (y1, y2, y3 - 1)
// gives min_{u,v >= 0} (z1-u)^2 + (z2-v)^2 + (-z3'-u-v)^2 with z3' = 1 - y3,
// a four-case piecewise quadratic indexed by which of u, v are active.
fn slice_min_3d(y: [f64; 3]) -> f64 {
    let a = y[0];
    let b = y[1];
    let c = 1.0 - y[2];
    if a - c <= 0.0 && b - c <= 0.0 {
        // Corner u = v = 0.
        a * a + b * b + c * c
    } else if a - c >= 0.0 && a - 2.0 * b + c >= 0.0 {
        // Edge v = 0, u = (a - c)/2.
        0.5 * (a * a + 2.0 * a * c + 2.0 * b * b + c * c)
    } else if b - c >= 0.0 && 2.0 * a - b - c <= 0.0 {
        // Edge u = 0, v = (b - c)/2.
        0.5 * (2.0 * a * a + b * b + 2.0 * b * c + c * c)
    } else {
        // Interior stationary point.
        (a + b + c).powi(2) / 3.0
    }
}

/// Closed form for `lambda(-1, y)` in the 3D counterexample.
pub fn evaluate_3d_counterexample(y: [f64; 3]) -> f64 {
    let s2: f64 = y.iter().map(|&v| v.min(0.0).powi(2)).sum();
    slice_min_3d(y) - s2
}

/// Independent oracle for the 3D slice minimum: enumerate the four active-set
/// candidates of the reduced problem and take the best feasible one.
#[doc(hidden)]
pub fn slice_min_3d_candidates(y: [f64; 3]) -> f64 {
    let a = y[0];
    let b = y[1];
    let c = 1.0 - y[2];
    let f = |u: f64, v: f64| (a - u).powi(2) + (b - v).powi(2) + (c + u + v).powi(2);
    let mut best = f64::INFINITY;
    let candidates = [
        ((2.0 * a - b - c) / 3.0, (2.0 * b - a - c) / 3.0), // interior
        (0.0, 0.5 * (b - c)),                               // u = 0
        (0.5 * (a - c), 0.0),                               // v = 0
        (0.0, 0.0),                                         // corner
    ];
    for (u, v) in candidates {
        let (u, v) = (u.max(0.0), v.max(0.0));
        best = best.min(f(u, v));
    }
    best
}

/// Constructs the instance used by both counterexample fast paths.
pub fn counterexample_instance(p: usize) -> ProblemInstance {
    assert!(p >= 2);
    let mut h = vec![1.0; p];
    h[p - 1] = -1.0;
    ProblemInstance::new(
        DMatrix::identity(p, p),
        DVector::from_vec(h),
        ConstraintSet::nonneg(p),
    )
    .expect("valid by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn one_d() -> LlrStatistic {
        LlrStatistic::new(
            ProblemInstance::new(
                DMatrix::identity(1, 1),
                DVector::from_vec(vec![1.0]),
                ConstraintSet::nonneg(1),
            )
            .unwrap(),
        )
    }

    #[test]
    fn fast_path_detection() {
        assert_eq!(one_d().fast_path(), FastPath::OneDimConstrained);
        assert_eq!(
            LlrStatistic::new(counterexample_instance(2)).fast_path(),
            FastPath::TwoDimCounterexample
        );
        assert_eq!(
            LlrStatistic::new(counterexample_instance(3)).fast_path(),
            FastPath::ThreeDimCounterexample
        );
        let free = ProblemInstance::new(
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
            DVector::from_vec(vec![1.0, -1.0]),
            ConstraintSet::free(2),
        )
        .unwrap();
        assert_eq!(
            LlrStatistic::new(free).fast_path(),
            FastPath::UnconstrainedFullRank
        );
        let generic = ProblemInstance::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            DVector::from_vec(vec![1.0, -1.0]),
            ConstraintSet::nonneg(2),
        )
        .unwrap();
        assert_eq!(LlrStatistic::new(generic).fast_path(), FastPath::None);
        assert!(LlrStatistic::with_fast_path(
            counterexample_instance(2),
            FastPath::ThreeDimCounterexample
        )
        .is_err());
    }

    #[test]
    fn one_d_branches() {
        let stat = one_d();
        let v = |mu: f64, y: f64| {
            stat.evaluate(mu, &DVector::from_vec(vec![y]))
                .unwrap()
                .finite()
                .unwrap()
        };
        assert_abs_diff_eq!(v(1.0, 2.0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v(1.0, -1.0), 3.0, epsilon = 1e-12);
        assert_eq!(
            stat.evaluate(-0.5, &DVector::from_vec(vec![1.0])).unwrap(),
            LlrOutcome::InfeasibleSlice
        );
    }

    #[test]
    fn two_d_closed_form_values() {
        assert_abs_diff_eq!(evaluate_2d_counterexample([-1.0, -2.0]), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(evaluate_2d_counterexample([1.0, 1.0]), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(evaluate_2d_counterexample([1.0, -2.0]), 1.0, epsilon = 1e-12);
        let stat = LlrStatistic::new(counterexample_instance(2));
        let v = stat
            .evaluate(0.0, &DVector::from_vec(vec![1.0, -2.0]))
            .unwrap()
            .finite()
            .unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn three_d_closed_form_values() {
        // numerator 3, subtrahend 2.
        assert_abs_diff_eq!(evaluate_3d_counterexample([-1.0, -1.0, 2.0]), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(evaluate_3d_counterexample([0.0, 0.0, 1.0]), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn three_d_piecewise_matches_candidate_enumeration() {
        let mut rng = crate::rng::substream(53, 0);
        for _ in 0..100_000 {
            let y = [
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..4.0),
            ];
            let piecewise = slice_min_3d(y);
            let oracle = slice_min_3d_candidates(y);
            assert!(
                (piecewise - oracle).abs() <= 1e-10 * (1.0 + oracle),
                "mismatch at {y:?}: {piecewise} vs {oracle}"
            );
        }
    }

    #[test]
    fn closed_forms_match_generic_solver() {
        // Force the generic route by wrapping the same geometry as explicit
        // linear inequalities, which no fast path matches.
        let mut rng = crate::rng::substream(59, 0);
        for p in [2usize, 3] {
            let reference = LlrStatistic::new(counterexample_instance(p));
            let (a, b) = ConstraintSet::nonneg(p).as_linear_inequalities();
            let generic = LlrStatistic::new(
                ProblemInstance::new(
                    DMatrix::identity(p, p),
                    reference.instance().h().clone(),
                    ConstraintSet::linear(a, b).unwrap(),
                )
                .unwrap(),
            );
            assert_eq!(generic.fast_path(), FastPath::None);
            let mu = if p == 2 { 0.0 } else { -1.0 };
            for _ in 0..500 {
                let y = DVector::from_fn(p, |_, _| rng.random_range(-3.0..3.0));
                let fast = reference.evaluate(mu, &y).unwrap().finite().unwrap();
                let slow = generic.evaluate(mu, &y).unwrap().finite().unwrap();
                assert!(
                    (fast - slow).abs() <= 1e-6,
                    "p={p}, y={y:?}: {fast} vs {slow}"
                );
            }
        }
    }

    #[test]
    fn unconstrained_closed_form_identities() {
        let inst = ProblemInstance::new(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 0.0]),
            ConstraintSet::free(2),
        )
        .unwrap();
        let y = DVector::from_vec(vec![0.7, -0.3]);
        assert_abs_diff_eq!(
            evaluate_unconstrained_closed_form(&inst, 0.2, &y).unwrap(),
            (0.7f64 - 0.2).powi(2),
            epsilon = 1e-12
        );
        let inst2 = ProblemInstance::new(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, -1.0]),
            ConstraintSet::free(2),
        )
        .unwrap();
        assert_abs_diff_eq!(
            evaluate_unconstrained_closed_form(&inst2, 0.0, &DVector::from_vec(vec![2.0, 0.0]))
                .unwrap(),
            2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn unconstrained_closed_form_matches_solver() {
        let mut rng = crate::rng::substream(61, 0);
        for _ in 0..100 {
            let k = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
            let h = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let inst = ProblemInstance::new(k, h, ConstraintSet::free(3)).unwrap();
            if LlrStatistic::new(inst.clone()).fast_path() != FastPath::UnconstrainedFullRank {
                continue;
            }
            let y = DVector::from_fn(5, |_, _| rng.random_range(-2.0..2.0));
            let mu = rng.random_range(-1.0..1.0);
            let closed = evaluate_unconstrained_closed_form(&inst, mu, &y).unwrap();
            let slice = solver::min_residual_on_slice(&inst, &y, mu).unwrap();
            let base = solver::min_residual(&inst, &y).unwrap();
            assert_abs_diff_eq!(closed, slice.objective - base.objective, epsilon = 1e-8);
        }
    }

    #[test]
    fn nonnegativity_and_zero_at_mle_image() {
        let mut rng = crate::rng::substream(67, 0);
        let stat = LlrStatistic::new(counterexample_instance(3));
        for _ in 0..1000 {
            let y = DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
            let base = solver::min_residual(stat.instance(), &y).unwrap();
            let mu_hat = stat.instance().functional(&base.x_hat);
            let at_mle = stat.evaluate(mu_hat, &y).unwrap().finite().unwrap();
            assert!(at_mle.abs() <= 1e-9, "lambda at MLE image = {at_mle}");
            let mu = rng.random_range(-2.0..2.0);
            if let Some(v) = stat.evaluate(mu, &y).unwrap().finite() {
                assert!(v >= -1e-10);
            }
        }
    }

    #[test]
    fn two_d_coupling_bound() {
        // Deterministic bound lambda(0, y) <= (y1 - y2)^2 / 2.
        let mut rng = crate::rng::substream(71, 0);
        for _ in 0..100_000 {
            let y = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            let lam = evaluate_2d_counterexample(y);
            assert!(lam <= 0.5 * (y[0] - y[1]).powi(2) + 1e-10);
        }
    }
}
