//! Python bindings for the interval library: model construction, the
//! likelihood-ratio statistic, interval methods, quantile calibration, and
//! the closed-form 1D null distribution.
//!
//! Build the importable module with
//! `cargo build -p strictbounds-py --features extension-module` and rename
//! the produced `libstrictbounds.so` to `strictbounds.so` on the Python path.

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sb::experiments;
use sb::llr;
use sb::maxquantile;
use sb::nulldist;
use sb::stats;
use sb::{intervals, ConstraintSet, Error, ProblemInstance};

fn err(e: Error) -> PyErr {
    match e {
        Error::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let m = rows.len();
    if m == 0 {
        return Err(PyValueError::new_err("matrix has no rows"));
    }
    let p = rows[0].len();
    if rows.iter().any(|r| r.len() != p) {
        return Err(PyValueError::new_err("matrix has ragged rows"));
    }
    Ok(DMatrix::from_row_iterator(m, p, rows.into_iter().flatten()))
}

/// A Gaussian linear model `y = K x + noise` with a constrained parameter
/// and the linear functional `h'x` under study.
#[pyclass(name = "ProblemInstance", from_py_object)]
#[derive(Clone)]
struct PyProblemInstance {
    inner: ProblemInstance,
}

#[pymethods]
impl PyProblemInstance {
    /// Model with `x` constrained to the nonnegative orthant.
    #[staticmethod]
    fn nonneg(k: Vec<Vec<f64>>, h: Vec<f64>) -> PyResult<Self> {
        let k = to_matrix(k)?;
        let p = k.ncols();
        let inner =
            ProblemInstance::new(k, DVector::from_vec(h), ConstraintSet::nonneg(p)).map_err(err)?;
        Ok(Self { inner })
    }

    /// Model with `x` constrained to the box `[lower, upper]`.
    #[staticmethod]
    fn boxed(k: Vec<Vec<f64>>, h: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> PyResult<Self> {
        let constraints =
            ConstraintSet::boxed(DVector::from_vec(lower), DVector::from_vec(upper))
                .map_err(err)?;
        let inner =
            ProblemInstance::new(to_matrix(k)?, DVector::from_vec(h), constraints).map_err(err)?;
        Ok(Self { inner })
    }

    /// Unconstrained model.
    #[staticmethod]
    fn free(k: Vec<Vec<f64>>, h: Vec<f64>) -> PyResult<Self> {
        let k = to_matrix(k)?;
        let p = k.ncols();
        let inner =
            ProblemInstance::new(k, DVector::from_vec(h), ConstraintSet::free(p)).map_err(err)?;
        Ok(Self { inner })
    }

    /// Parses the JSON schema {"K", "h", "constraints"}.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: ProblemInstance::from_json(text).map_err(err)? })
    }

    /// One of the built-in scenario models: oneD, twoD, threeD, threeD95, box.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self { inner: experiments::preset(name).map_err(err)?.inst })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Value of the functional `h'x`.
    fn functional(&self, x: Vec<f64>) -> f64 {
        self.inner.functional(&DVector::from_vec(x))
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }
}

/// The constrained likelihood-ratio statistic of the model.
#[pyclass(name = "LlrStatistic")]
struct PyLlrStatistic {
    inner: llr::LlrStatistic,
}

#[pymethods]
impl PyLlrStatistic {
    #[new]
    fn new(inst: PyProblemInstance) -> Self {
        Self { inner: llr::LlrStatistic::new(inst.inner) }
    }

    /// Statistic value at `(mu, y)`; None when the slice `h'x = mu` misses
    /// the constraint set.
    fn evaluate(&self, mu: f64, y: Vec<f64>) -> PyResult<Option<f64>> {
        Ok(self
            .inner
            .evaluate(mu, &DVector::from_vec(y))
            .map_err(err)?
            .finite())
    }

    /// Slack term `s^2(y)`: the minimal squared residual over the set.
    fn subtrahend(&self, y: Vec<f64>) -> PyResult<f64> {
        self.inner.subtrahend(&DVector::from_vec(y)).map_err(err)
    }
}

/// A decision threshold rule `mu -> q(mu)`.
#[pyclass(name = "DecisionRule", from_py_object)]
#[derive(Clone)]
struct PyDecisionRule {
    inner: maxquantile::DecisionRule,
}

#[pymethods]
impl PyDecisionRule {
    /// Constant-threshold rule.
    #[staticmethod]
    fn scalar(q: f64, level: f64) -> PyResult<Self> {
        Ok(Self {
            inner: maxquantile::DecisionRule::scalar(q, level, "python scalar rule")
                .map_err(err)?,
        })
    }

    /// The chi-square(1) quantile rule.
    #[staticmethod]
    fn chi2_one(level: f64) -> PyResult<Self> {
        Ok(Self { inner: maxquantile::DecisionRule::chi2_one(level).map_err(err)? })
    }

    /// Per-mu rule on a grid (conservative interpolation between points).
    #[staticmethod]
    fn per_mu(mu_grid: Vec<f64>, q_values: Vec<f64>, level: f64) -> PyResult<Self> {
        Ok(Self {
            inner: maxquantile::DecisionRule::per_mu(mu_grid, q_values, level, "python per-mu rule")
                .map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: maxquantile::DecisionRule::from_json(text).map_err(err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn q_at(&self, mu: f64) -> PyResult<f64> {
        self.inner.q_at(mu).map_err(err)
    }

    #[getter]
    fn level(&self) -> f64 {
        self.inner.level()
    }
}

/// A confidence interval with its diagnostics.
#[pyclass(name = "IntervalResult", from_py_object)]
#[derive(Clone)]
struct PyIntervalResult {
    inner: intervals::IntervalResult,
}

#[pymethods]
impl PyIntervalResult {
    #[getter]
    fn lower(&self) -> f64 {
        self.inner.lower
    }

    #[getter]
    fn upper(&self) -> f64 {
        self.inner.upper
    }

    #[getter]
    fn empty(&self) -> bool {
        self.inner.empty
    }

    #[getter]
    fn method(&self) -> String {
        self.inner.method.clone()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn q_used(&self) -> f64 {
        self.inner.q_used
    }

    #[getter]
    fn s2(&self) -> f64 {
        self.inner.s2
    }

    fn contains(&self, mu: f64) -> bool {
        self.inner.contains(mu)
    }

    fn length(&self) -> Option<f64> {
        self.inner.length()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn __repr__(&self) -> String {
        if self.inner.empty {
            format!("IntervalResult(method='{}', empty)", self.inner.method)
        } else {
            format!(
                "IntervalResult(method='{}', [{}, {}])",
                self.inner.method, self.inner.lower, self.inner.upper
            )
        }
    }
}

/// Simultaneous strict bounds at miscoverage `alpha`.
#[pyfunction]
fn interval_ssb(inst: &PyProblemInstance, y: Vec<f64>, alpha: f64) -> PyResult<PyIntervalResult> {
    Ok(PyIntervalResult {
        inner: intervals::interval_ssb(&inst.inner, &DVector::from_vec(y), alpha).map_err(err)?,
    })
}

/// One-at-a-time strict bounds (classical chi-square(1) threshold).
#[pyfunction]
fn interval_osb(inst: &PyProblemInstance, y: Vec<f64>, alpha: f64) -> PyResult<PyIntervalResult> {
    Ok(PyIntervalResult {
        inner: intervals::interval_osb(&inst.inner, &DVector::from_vec(y), alpha).map_err(err)?,
    })
}

/// Interval from a calibrated scalar rule.
#[pyfunction]
fn interval_mq(
    inst: &PyProblemInstance,
    y: Vec<f64>,
    alpha: f64,
    rule: &PyDecisionRule,
) -> PyResult<PyIntervalResult> {
    Ok(PyIntervalResult {
        inner: intervals::interval_mq(&inst.inner, &DVector::from_vec(y), alpha, &rule.inner)
            .map_err(err)?,
    })
}

/// Interval from a calibrated per-mu rule.
#[pyfunction]
fn interval_mqmu(
    inst: &PyProblemInstance,
    y: Vec<f64>,
    alpha: f64,
    rule: &PyDecisionRule,
) -> PyResult<PyIntervalResult> {
    Ok(PyIntervalResult {
        inner: intervals::interval_mqmu(&inst.inner, &DVector::from_vec(y), alpha, &rule.inner)
            .map_err(err)?,
    })
}

/// Draws `n` values of the statistic under its null at `x`; returns the
/// sorted draws.
#[pyfunction]
fn sample_null(inst: &PyProblemInstance, x: Vec<f64>, n: usize, seed: u64) -> PyResult<Vec<f64>> {
    let stat = llr::LlrStatistic::new(inst.inner.clone());
    let sample = nulldist::sample_null(&stat, &DVector::from_vec(x), n, seed).map_err(err)?;
    Ok(sample.draws.values().to_vec())
}

/// Scalar maximum-quantile search over an axis-aligned box; returns
/// `(q, ci_lo, ci_hi, argmax_x)`.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn max_quantile(
    inst: &PyProblemInstance,
    level: f64,
    box_lower: Vec<f64>,
    box_upper: Vec<f64>,
    budget: usize,
    n_per_eval: usize,
    seed: u64,
) -> PyResult<(f64, f64, f64, Vec<f64>)> {
    let stat = llr::LlrStatistic::new(inst.inner.clone());
    let search_box =
        maxquantile::SearchBox::new(DVector::from_vec(box_lower), DVector::from_vec(box_upper))
            .map_err(err)?;
    let res = maxquantile::max_quantile(&stat, level, &search_box, budget, n_per_eval, seed)
        .map_err(err)?;
    Ok((res.q, res.ci.0, res.ci.1, res.argmax_x.iter().copied().collect()))
}

/// Closed-form null CDF of the 1D nonnegative model.
#[pyfunction]
fn cdf_1d_constrained(mu: f64, c: f64) -> PyResult<f64> {
    nulldist::cdf_1d_constrained(mu, c).map_err(err)
}

/// Closed-form null quantile of the 1D nonnegative model.
#[pyfunction]
fn quantile_1d_constrained(mu: f64, level: f64) -> PyResult<f64> {
    nulldist::quantile_1d_constrained(mu, level).map_err(err)
}

/// Chi-square quantile with `k` degrees of freedom.
#[pyfunction]
fn chi2_quantile(p: f64, k: usize) -> PyResult<f64> {
    stats::chi2_quantile(p, k).map_err(err)
}

/// Standard normal CDF.
#[pyfunction]
fn normal_cdf(z: f64) -> f64 {
    stats::normal_cdf(z)
}

/// Standard normal quantile.
#[pyfunction]
fn normal_quantile(p: f64) -> PyResult<f64> {
    stats::normal_quantile(p).map_err(err)
}

#[pymodule]
fn strictbounds(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProblemInstance>()?;
    m.add_class::<PyLlrStatistic>()?;
    m.add_class::<PyDecisionRule>()?;
    m.add_class::<PyIntervalResult>()?;
    m.add_function(wrap_pyfunction!(interval_ssb, m)?)?;
    m.add_function(wrap_pyfunction!(interval_osb, m)?)?;
    m.add_function(wrap_pyfunction!(interval_mq, m)?)?;
    m.add_function(wrap_pyfunction!(interval_mqmu, m)?)?;
    m.add_function(wrap_pyfunction!(sample_null, m)?)?;
    m.add_function(wrap_pyfunction!(max_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(cdf_1d_constrained, m)?)?;
    m.add_function(wrap_pyfunction!(quantile_1d_constrained, m)?)?;
    m.add_function(wrap_pyfunction!(chi2_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(normal_cdf, m)?)?;
    m.add_function(wrap_pyfunction!(normal_quantile, m)?)?;
    Ok(())
}
