//! The Gaussian linear forward model `y = K x + noise` with `noise ~ N(0, I_m)`,
//! a convex constraint set for `x`, and the linear functional `h' x` whose value
//! the intervals target.
//!
//! Noise covariance is fixed to the identity. Problems with a general
//! positive-definite covariance must be whitened first; [`whiten`] does the
//! basis change with the Cholesky factor and returns an equivalent
//! identity-noise instance.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::standard_normal_vector;
use crate::{Error, Result};

/// Default absolute tolerance for constraint membership, matching the solver's
/// KKT tolerance.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

/// A parameter vector of length `p`.
pub type ParameterPoint = DVector<f64>;

/// Convex polyhedral constraint set for the parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSet {
    /// `x >= 0` componentwise.
    NonNegativeOrthant { dim: usize },
    /// `lower <= x <= upper` componentwise.
    Box { lower: DVector<f64>, upper: DVector<f64> },
    /// `A x <= b`. An empty `A` (zero rows) represents all of R^p.
    LinearInequalities { a: DMatrix<f64>, b: DVector<f64> },
}

impl ConstraintSet {
    /// Nonnegative orthant in `dim` dimensions.
    pub fn nonneg(dim: usize) -> Self {
        ConstraintSet::NonNegativeOrthant { dim }
    }

    /// Axis-aligned box; requires `lower <= upper` componentwise.
    pub fn boxed(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch(
                "box bounds have different lengths".into(),
            ));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(Error::InvalidInput("box has lower > upper".into()));
        }
        Ok(ConstraintSet::Box { lower, upper })
    }

    /// General linear inequalities `A x <= b`.
    pub fn linear(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::DimensionMismatch(
                "A row count does not match b length".into(),
            ));
        }
        Ok(ConstraintSet::LinearInequalities { a, b })
    }

    /// Unconstrained: all of R^p, as a zero-row inequality system.
    pub fn free(dim: usize) -> Self {
        ConstraintSet::LinearInequalities {
            a: DMatrix::zeros(0, dim),
            b: DVector::zeros(0),
        }
    }

    /// Parameter dimension `p`.
    pub fn dim(&self) -> usize {
        match self {
            ConstraintSet::NonNegativeOrthant { dim } => *dim,
            ConstraintSet::Box { lower, .. } => lower.len(),
            ConstraintSet::LinearInequalities { a, .. } => a.ncols(),
        }
    }

    /// True when all constraint residuals are within `tol`.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> Result<bool> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "point has length {}, constraints expect {}",
                x.len(),
                self.dim()
            )));
        }
        if tol < 0.0 {
            return Err(Error::InvalidInput("negative tolerance".into()));
        }
        Ok(match self {
            ConstraintSet::NonNegativeOrthant { .. } => x.iter().all(|&v| v >= -tol),
            ConstraintSet::Box { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper.iter()))
                .all(|(&v, (&l, &u))| v >= l - tol && v <= u + tol),
            ConstraintSet::LinearInequalities { a, b } => {
                let r = a * x - b;
                r.iter().all(|&v| v <= tol)
            }
        })
    }

    /// Exact representation as `A x <= b`.
    pub fn as_linear_inequalities(&self) -> (DMatrix<f64>, DVector<f64>) {
        match self {
            ConstraintSet::NonNegativeOrthant { dim } => {
                (-DMatrix::identity(*dim, *dim), DVector::zeros(*dim))
            }
            ConstraintSet::Box { lower, upper } => {
                let p = lower.len();
                let mut a = DMatrix::zeros(2 * p, p);
                let mut b = DVector::zeros(2 * p);
                for i in 0..p {
                    a[(i, i)] = -1.0;
                    b[i] = -lower[i];
                    a[(p + i, i)] = 1.0;
                    b[p + i] = upper[i];
                }
                (a, b)
            }
            ConstraintSet::LinearInequalities { a, b } => (a.clone(), b.clone()),
        }
    }

    /// True when the set places no restriction on `x`.
    pub fn is_free(&self) -> bool {
        matches!(self, ConstraintSet::LinearInequalities { a, .. } if a.nrows() == 0)
    }

    /// Range of `h' x` over the set: `(inf, sup)`, possibly infinite.
    ///
    /// Exact for the orthant and boxes. For general linear inequalities the
    /// range is not computed here and `(-inf, +inf)` is returned; slice
    /// feasibility is then decided by the solver's phase-1 problem.
    pub fn functional_range(&self, h: &DVector<f64>) -> (f64, f64) {
        match self {
            ConstraintSet::NonNegativeOrthant { .. } => {
                let lo = if h.iter().any(|&v| v < 0.0) { f64::NEG_INFINITY } else { 0.0 };
                let hi = if h.iter().any(|&v| v > 0.0) { f64::INFINITY } else { 0.0 };
                (lo, hi)
            }
            ConstraintSet::Box { lower, upper } => {
                let mut lo = 0.0;
                let mut hi = 0.0;
                for i in 0..h.len() {
                    if h[i] >= 0.0 {
                        lo += h[i] * lower[i];
                        hi += h[i] * upper[i];
                    } else {
                        lo += h[i] * upper[i];
                        hi += h[i] * lower[i];
                    }
                }
                (lo, hi)
            }
            ConstraintSet::LinearInequalities { .. } => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }
}

/// A constrained Gaussian linear inverse problem: forward matrix `K` (m x p),
/// functional weights `h` (length p), constraint set, identity noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    k: DMatrix<f64>,
    h: DVector<f64>,
    constraints: ConstraintSet,
}

impl ProblemInstance {
    pub fn new(k: DMatrix<f64>, h: DVector<f64>, constraints: ConstraintSet) -> Result<Self> {
        if k.nrows() == 0 || k.ncols() == 0 {
            return Err(Error::InvalidInput("K must be at least 1x1".into()));
        }
        if h.len() != k.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "h has length {}, K has {} columns",
                h.len(),
                k.ncols()
            )));
        }
        if constraints.dim() != k.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "constraints are {}-dimensional, K has {} columns",
                constraints.dim(),
                k.ncols()
            )));
        }
        Ok(Self { k, h, constraints })
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn h(&self) -> &DVector<f64> {
        &self.h
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    /// Observation dimension `m`.
    pub fn m(&self) -> usize {
        self.k.nrows()
    }

    /// Parameter dimension `p`.
    pub fn p(&self) -> usize {
        self.k.ncols()
    }

    /// The functional value `h' x`.
    pub fn functional(&self, x: &DVector<f64>) -> f64 {
        self.h.dot(x)
    }

    /// Noise-free forward map `K x`.
    pub fn forward_mean(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.p() {
            return Err(Error::DimensionMismatch(format!(
                "x has length {}, expected {}",
                x.len(),
                self.p()
            )));
        }
        Ok(&self.k * x)
    }

    /// One observation `K x + eps` with `eps ~ N(0, I_m)` from `rng`.
    pub fn simulate(&self, x: &DVector<f64>, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
        let mean = self.forward_mean(x)?;
        Ok(mean + standard_normal_vector(rng, self.m()))
    }
}

/// Whitens a problem with noise covariance `cov`: returns the equivalent
/// identity-noise instance with `K_w = L^{-1} K` where `cov = L L'`, plus the
/// lower Cholesky factor `L` for transforming observations via
/// [`whiten_observation`].
pub fn whiten(
    k: DMatrix<f64>,
    h: DVector<f64>,
    constraints: ConstraintSet,
    cov: DMatrix<f64>,
) -> Result<(ProblemInstance, DMatrix<f64>)> {
    if cov.nrows() != k.nrows() || cov.ncols() != k.nrows() {
        return Err(Error::DimensionMismatch(
            "covariance must be m x m".into(),
        ));
    }
    let chol = nalgebra::Cholesky::new(cov)
        .ok_or_else(|| Error::InvalidInput("covariance is not positive definite".into()))?;
    let l = chol.l();
    let mut k_white = k;
    l.solve_lower_triangular_mut(&mut k_white);
    let inst = ProblemInstance::new(k_white, h, constraints)?;
    Ok((inst, l))
}

/// Transforms an observation into the whitened coordinates: solves `L y_w = y`.
pub fn whiten_observation(l: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let mut y_w = y.clone();
    if !l.solve_lower_triangular_mut(&mut y_w) {
        return Err(Error::Numerical("singular Cholesky factor".into()));
    }
    Ok(y_w)
}

// ---------------------------------------------------------------------------
// JSON schema: {"K": [[..],..], "h": [..], "constraints": {"type": ...}}
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ModelJson {
    #[serde(rename = "K")]
    k: Vec<Vec<f64>>,
    h: Vec<f64>,
    constraints: ConstraintsJson,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum ConstraintsJson {
    Nonneg,
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Linear {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
    },
}

impl ProblemInstance {
    /// Parses the model JSON schema.
    pub fn from_json(text: &str) -> Result<Self> {
        let parsed: ModelJson = serde_json::from_str(text)
            .map_err(|e| Error::InvalidInput(format!("model JSON: {e}")))?;
        let m = parsed.k.len();
        if m == 0 {
            return Err(Error::InvalidInput("model JSON: key \"K\" is empty".into()));
        }
        let p = parsed.k[0].len();
        if parsed.k.iter().any(|row| row.len() != p) {
            return Err(Error::InvalidInput(
                "model JSON: key \"K\" has ragged rows".into(),
            ));
        }
        let k = DMatrix::from_row_iterator(m, p, parsed.k.iter().flatten().copied());
        let h = DVector::from_vec(parsed.h);
        let constraints = match parsed.constraints {
            ConstraintsJson::Nonneg => ConstraintSet::nonneg(p),
            ConstraintsJson::Box { lower, upper } => {
                ConstraintSet::boxed(DVector::from_vec(lower), DVector::from_vec(upper))?
            }
            ConstraintsJson::Linear { a, b } => {
                let rows = a.len();
                if a.iter().any(|row| row.len() != p) {
                    return Err(Error::InvalidInput(
                        "model JSON: key \"A\" must have p columns".into(),
                    ));
                }
                ConstraintSet::linear(
                    DMatrix::from_row_iterator(rows, p, a.iter().flatten().copied()),
                    DVector::from_vec(b),
                )?
            }
        };
        Self::new(k, h, constraints)
    }

    /// Serializes to the model JSON schema.
    pub fn to_json(&self) -> String {
        let k = (0..self.m())
            .map(|i| self.k.row(i).iter().copied().collect())
            .collect();
        let constraints = match &self.constraints {
            ConstraintSet::NonNegativeOrthant { .. } => ConstraintsJson::Nonneg,
            ConstraintSet::Box { lower, upper } => ConstraintsJson::Box {
                lower: lower.iter().copied().collect(),
                upper: upper.iter().copied().collect(),
            },
            ConstraintSet::LinearInequalities { a, b } => ConstraintsJson::Linear {
                a: (0..a.nrows())
                    .map(|i| a.row(i).iter().copied().collect())
                    .collect(),
                b: b.iter().copied().collect(),
            },
        };
        serde_json::to_string_pretty(&ModelJson {
            k,
            h: self.h.iter().copied().collect(),
            constraints,
        })
        .expect("model serialization cannot fail")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn identity_instance(p: usize, h: Vec<f64>) -> ProblemInstance {
        ProblemInstance::new(
            DMatrix::identity(p, p),
            DVector::from_vec(h),
            ConstraintSet::nonneg(p),
        )
        .unwrap()
    }

    #[test]
    fn forward_mean_identity_and_general() {
        let inst = identity_instance(2, vec![1.0, -1.0]);
        let y = inst.forward_mean(&DVector::from_vec(vec![1.0, 2.0])).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 2.0]);

        let inst3 = identity_instance(3, vec![1.0, 1.0, -1.0]);
        let y3 = inst3.forward_mean(&DVector::from_vec(vec![0.0, 0.0, 1.0])).unwrap();
        assert_eq!(y3.as_slice(), &[0.0, 0.0, 1.0]);

        let k = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let inst = ProblemInstance::new(k, DVector::from_vec(vec![1.0, 0.0]), ConstraintSet::nonneg(2)).unwrap();
        let y = inst.forward_mean(&DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(y.as_slice(), &[2.0, 1.0]);
    }

    #[test]
    fn simulate_moments_and_determinism() {
        let inst = identity_instance(1, vec![1.0]);
        let x = DVector::zeros(1);
        let n = 100_000;
        let mut rng = crate::rng::substream(5, 0);
        let mean: f64 = (0..n)
            .map(|_| inst.simulate(&x, &mut rng).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());

        let inst3 = identity_instance(3, vec![1.0, 1.0, -1.0]);
        let x3 = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        let mut rng = crate::rng::substream(5, 1);
        let draws: Vec<DVector<f64>> = (0..n).map(|_| inst3.simulate(&x3, &mut rng).unwrap()).collect();
        for c in 0..3 {
            let mu: f64 = draws.iter().map(|d| d[c]).sum::<f64>() / n as f64;
            let var: f64 = draws.iter().map(|d| (d[c] - mu).powi(2)).sum::<f64>() / n as f64;
            assert!(var > 0.95 && var < 1.05, "variance {var} out of range");
        }

        let mut r1 = crate::rng::substream(9, 3);
        let mut r2 = crate::rng::substream(9, 3);
        assert_eq!(
            inst3.simulate(&x3, &mut r1).unwrap(),
            inst3.simulate(&x3, &mut r2).unwrap()
        );
    }

    #[test]
    fn simulate_noise_is_standard_normal() {
        let inst = identity_instance(2, vec![1.0, -1.0]);
        let x = DVector::from_vec(vec![0.5, 0.25]);
        let n = 100_000;
        let mut rng = crate::rng::substream(7, 0);
        let mut per_coord: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 2];
        for _ in 0..n {
            let y = inst.simulate(&x, &mut rng).unwrap();
            let mean = inst.forward_mean(&x).unwrap();
            for c in 0..2 {
                per_coord[c].push(y[c] - mean[c]);
            }
        }
        for coord in per_coord {
            let s = crate::stats::EmpiricalSample::new(coord).unwrap();
            let d = crate::stats::ks_statistic(&s, crate::stats::normal_cdf);
            assert!(crate::stats::ks_pvalue(d, n) > 1e-4);
        }
    }

    #[test]
    fn membership_checks() {
        let orthant = ConstraintSet::nonneg(2);
        assert!(orthant.contains(&DVector::from_vec(vec![0.0, 0.0]), 0.0).unwrap());
        let bx = ConstraintSet::boxed(
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap();
        assert!(!bx.contains(&DVector::from_vec(vec![1.5, 0.5]), 1e-9).unwrap());
        let lin = ConstraintSet::linear(
            DMatrix::from_row_slice(1, 1, &[-1.0]),
            DVector::from_vec(vec![0.0]),
        )
        .unwrap();
        assert!(lin.contains(&DVector::from_vec(vec![2.0]), 0.0).unwrap());
    }

    #[test]
    fn linear_conversion_agrees_with_membership() {
        let mut rng = crate::rng::substream(13, 0);
        for set in [
            ConstraintSet::nonneg(3),
            ConstraintSet::boxed(
                DVector::from_vec(vec![-1.0, 0.0, 0.5]),
                DVector::from_vec(vec![1.0, 2.0, 0.5]),
            )
            .unwrap(),
        ] {
            let (a, b) = set.as_linear_inequalities();
            let lin = ConstraintSet::linear(a, b).unwrap();
            for _ in 0..10_000 {
                let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..3.0));
                assert_eq!(
                    set.contains(&x, 0.0).unwrap(),
                    lin.contains(&x, 0.0).unwrap()
                );
            }
        }
    }

    #[test]
    fn functional_range_box_and_orthant() {
        let h = DVector::from_vec(vec![1.0, -1.0]);
        let orthant = ConstraintSet::nonneg(2);
        assert_eq!(orthant.functional_range(&h), (f64::NEG_INFINITY, f64::INFINITY));
        let bx = ConstraintSet::boxed(
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        )
        .unwrap();
        assert_eq!(bx.functional_range(&h), (-1.0, 1.0));
        let h_pos = DVector::from_vec(vec![1.0, 1.0]);
        assert_eq!(orthant.functional_range(&h_pos), (0.0, f64::INFINITY));
    }

    #[test]
    fn json_round_trip() {
        let inst = ProblemInstance::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            DVector::from_vec(vec![1.0, -1.0]),
            ConstraintSet::boxed(DVector::zeros(2), DVector::from_vec(vec![1.0, 1.0])).unwrap(),
        )
        .unwrap();
        let text = inst.to_json();
        let back = ProblemInstance::from_json(&text).unwrap();
        assert_eq!(inst, back);

        let nn = r#"{"K": [[1.0]], "h": [1.0], "constraints": {"type": "nonneg"}}"#;
        let parsed = ProblemInstance::from_json(nn).unwrap();
        assert_eq!(parsed.constraints(), &ConstraintSet::nonneg(1));

        assert!(ProblemInstance::from_json("{\"K\": []}").is_err());
    }

    #[test]
    fn whitening_reduces_to_identity_noise() {
        // cov = L L' with a known L; whitened K must equal L^{-1} K.
        let l_true = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 1.0]);
        let cov = &l_true * l_true.transpose();
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let (inst, l) = whiten(
            k.clone(),
            DVector::from_vec(vec![1.0, 0.0]),
            ConstraintSet::nonneg(2),
            cov,
        )
        .unwrap();
        let mut expect = k;
        l_true.solve_lower_triangular_mut(&mut expect);
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(inst.k()[(i, j)], expect[(i, j)], epsilon = 1e-12);
            }
        }
        let y = DVector::from_vec(vec![3.0, 1.0]);
        let yw = whiten_observation(&l, &y).unwrap();
        assert_abs_diff_eq!((&l * &yw - &y).norm(), 0.0, epsilon = 1e-12);
    }
}
