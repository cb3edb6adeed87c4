//! Confidence intervals by test inversion in functional space.
//!
//! Every method reduces to the same one-dimensional search: the interval is
//! `{mu : g(mu) <= q(mu)}` where `g(mu)` is the extra squared residual paid
//! for forcing `h'x = mu` (the slice objective minus the slack `s^2(y)`) and
//! `q` is a decision rule. Because the slice objective is convex in `mu` (the
//! constraint set is convex and the functional linear), `g` is convex with
//! its minimum `g(mu_hat) = 0` at the functional value of the unconstrained-
//! slice fit, so each endpoint is a single sign change found by geometric
//! bracket expansion and bisection.
//!
//! Rules supplied by the four methods:
//!
//! * `interval_ssb`: the simultaneous chi-square(m) budget, applied as the
//!   absolute constraint `||y - Kx||^2 <= Q_{chi2_m}(1-alpha)` (no slack
//!   subtraction), i.e. the engine runs with `q = cutoff - s^2(y)`;
//! * `interval_osb`: the classical per-functional threshold `z_{alpha/2}^2`.
//!   Note this rule lacks general coverage: for some constrained problems the
//!   statistic's null quantile exceeds the chi-square(1) quantile near the
//!   boundary, and the resulting intervals undercover;
//! * `interval_mq` / `interval_mqmu`: calibrated scalar or per-`mu` rules
//!   from the maximum-quantile search.
//!
//! Convexity of the slice objective is what the box/orthant/linear constraint
//! sets guarantee; cone structure is only needed for the converse statement
//! (every valid interval arises this way), not for validity of the search.

use nalgebra::DVector;
use serde_json::{json, Value};

use crate::llr::LlrStatistic;
use crate::maxquantile::DecisionRule;
use crate::stats::{chi2_quantile, normal_quantile};
use crate::{Error, ProblemInstance, Result};

/// Maximum bracket doublings before a side is declared unbounded.
const MAX_DOUBLINGS: u32 = 60;
/// Slack allowed when testing `g(mu_hat) <= q(mu_hat)` for emptiness.
const EMPTY_TOL: f64 = 1e-10;

/// A confidence interval for `h'x`, possibly empty or unbounded on a side.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalResult {
    /// Method tag: "ssb", "osb", "mq", "mqmu", "functional_space", or
    /// "unconstrained_closed_form".
    pub method: String,
    pub alpha: f64,
    /// Lower endpoint; `-inf` for an unbounded side, NaN when empty.
    pub lower: f64,
    /// Upper endpoint; `+inf` for an unbounded side, NaN when empty.
    pub upper: f64,
    pub empty: bool,
    /// The threshold the engine compared against, evaluated at `mu_hat`
    /// (equal to the scalar for constant rules).
    pub q_used: f64,
    /// The slack term `s^2(y)` subtracted inside the statistic.
    pub s2: f64,
    /// Number of constrained least-squares solves spent.
    pub n_solves: usize,
}

impl IntervalResult {
    fn empty(method: &str, alpha: f64, q_used: f64, s2: f64, n_solves: usize) -> Self {
        Self {
            method: method.into(),
            alpha,
            lower: f64::NAN,
            upper: f64::NAN,
            empty: true,
            q_used,
            s2,
            n_solves,
        }
    }

    /// Whether `mu` lies inside the interval.
    pub fn contains(&self, mu: f64) -> bool {
        !self.empty && self.lower <= mu && mu <= self.upper
    }

    /// Finite length, `None` when empty or unbounded.
    pub fn length(&self) -> Option<f64> {
        if self.empty || self.lower.is_infinite() || self.upper.is_infinite() {
            None
        } else {
            Some(self.upper - self.lower)
        }
    }

    /// Serializes to JSON; infinite endpoints become the strings
    /// "inf" / "-inf" so the document stays valid JSON.
    pub fn to_json(&self) -> String {
        let endpoint = |v: f64| -> Value {
            if v.is_nan() {
                Value::Null
            } else if v == f64::INFINITY {
                json!("inf")
            } else if v == f64::NEG_INFINITY {
                json!("-inf")
            } else {
                json!(v)
            }
        };
        let doc = json!({
            "method": self.method,
            "alpha": self.alpha,
            "lower": endpoint(self.lower),
            "upper": endpoint(self.upper),
            "empty": self.empty,
            "q_used": self.q_used,
            "s2": self.s2,
            "n_solves": self.n_solves,
        });
        serde_json::to_string_pretty(&doc).expect("interval serialization cannot fail")
    }

    /// Parses the JSON form produced by [`IntervalResult::to_json`].
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text)
            .map_err(|e| Error::InvalidInput(format!("interval JSON: {e}")))?;
        let get = |k: &str| -> Result<&Value> {
            doc.get(k)
                .ok_or_else(|| Error::InvalidInput(format!("interval JSON missing key \"{k}\"")))
        };
        let endpoint = |v: &Value| -> Result<f64> {
            match v {
                Value::Null => Ok(f64::NAN),
                Value::String(s) if s == "inf" => Ok(f64::INFINITY),
                Value::String(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
                Value::Number(n) => n
                    .as_f64()
                    .ok_or_else(|| Error::InvalidInput("bad endpoint number".into())),
                other => Err(Error::InvalidInput(format!("bad endpoint {other}"))),
            }
        };
        let num = |v: &Value| -> Result<f64> {
            v.as_f64()
                .ok_or_else(|| Error::InvalidInput("expected a number".into()))
        };
        Ok(Self {
            method: get("method")?
                .as_str()
                .ok_or_else(|| Error::InvalidInput("method must be a string".into()))?
                .to_string(),
            alpha: num(get("alpha")?)?,
            lower: endpoint(get("lower")?)?,
            upper: endpoint(get("upper")?)?,
            empty: get("empty")?
                .as_bool()
                .ok_or_else(|| Error::InvalidInput("empty must be a boolean".into()))?,
            q_used: num(get("q_used")?)?,
            s2: num(get("s2")?)?,
            n_solves: get("n_solves")?
                .as_u64()
                .ok_or_else(|| Error::InvalidInput("n_solves must be an integer".into()))?
                as usize,
        })
    }
}

/// Slice excess cost above the slack, `None` when the slice misses X.
struct Engine<'a> {
    stat: &'a LlrStatistic,
    y: &'a DVector<f64>,
    s2: f64,
    n_solves: usize,
}

impl<'a> Engine<'a> {
    fn g(&mut self, mu: f64) -> Result<Option<f64>> {
        self.n_solves += 1;
        Ok(self
            .stat
            .slice_objective(mu, self.y)?
            .map(|obj| obj - self.s2))
    }

    /// `g(mu) - q(mu)`, with infeasible slices counting as +infinity.
    fn excess<Q: Fn(f64) -> Result<f64>>(&mut self, mu: f64, q: &Q) -> Result<f64> {
        match self.g(mu)? {
            Some(g) => Ok(g - q(mu)?),
            None => Ok(f64::INFINITY),
        }
    }
}

/// Core search shared by all methods: given the threshold function `q`,
/// returns the interval `{mu : g(mu) <= q(mu)}`.
fn run_engine<Q: Fn(f64) -> Result<f64>>(
    stat: &LlrStatistic,
    y: &DVector<f64>,
    alpha: f64,
    method: &str,
    q: Q,
) -> Result<IntervalResult> {
    let fit = crate::solver::min_residual(stat.instance(), y)?;
    if fit.status == crate::solver::SolveStatus::Infeasible {
        return Err(Error::Infeasible("constraint set is empty".into()));
    }
    let mu_hat = stat.instance().functional(&fit.x_hat);
    let s2 = fit.objective;
    let mut eng = Engine { stat, y, s2, n_solves: 1 };

    let q_at_hat = q(mu_hat)?;
    // g(mu_hat) is zero up to solver noise; a genuinely positive excess means
    // no mu passes the test (possible only when the rule dips below zero,
    // e.g. a simultaneous budget already spent by the slack term).
    if eng.excess(mu_hat, &q)? > EMPTY_TOL {
        return Ok(IntervalResult::empty(method, alpha, q_at_hat, s2, eng.n_solves));
    }

    let tol = 1e-8 * (1.0 + mu_hat.abs());
    let range = stat.instance().constraints().functional_range(stat.instance().h());
    let upper = search_side(&mut eng, &q, mu_hat, 1.0, tol, range)?;
    let lower = search_side(&mut eng, &q, mu_hat, -1.0, tol, range)?;
    let n_solves = eng.n_solves;
    Ok(IntervalResult {
        method: method.into(),
        alpha,
        lower,
        upper,
        empty: false,
        q_used: q_at_hat,
        s2,
        n_solves,
    })
}

/// Finds the boundary of the acceptance region on one side of `mu_hat`.
///
/// Expands the bracket geometrically until the excess turns positive (or the
/// doubling cap declares the side unbounded), then bisects, returning the
/// inner (accepted) end of the final bracket.
fn search_side<Q: Fn(f64) -> Result<f64>>(
    eng: &mut Engine,
    q: &Q,
    mu_hat: f64,
    direction: f64,
    tol: f64,
    range: (f64, f64),
) -> Result<f64> {
    let mut inner = mu_hat;
    let mut step = 1.0;
    let mut outer = None;
    for _ in 0..=MAX_DOUBLINGS {
        let cand = mu_hat + direction * step;
        if eng.excess(cand, q)? > 0.0 {
            outer = Some(cand);
            break;
        }
        inner = cand;
        step *= 2.0;
    }
    let Some(mut outer) = outer else {
        return Ok(direction * f64::INFINITY);
    };
    while (outer - inner).abs() > tol {
        let mid = 0.5 * (inner + outer);
        if eng.excess(mid, q)? > 0.0 {
            outer = mid;
        } else {
            inner = mid;
        }
    }
    // When the sign change is caused by leaving the (closed, hence feasible)
    // range of the functional rather than by a genuine threshold crossing,
    // the exact endpoint is the range bound itself; snap to it so points
    // exactly on the boundary test as members.
    let bound = if direction > 0.0 { range.1 } else { range.0 };
    if bound.is_finite() && (outer - bound) * direction > 0.0 && eng.excess(bound, q)? <= 0.0 {
        return Ok(bound);
    }
    Ok(inner)
}

/// Inverts the test with an arbitrary decision rule.
pub fn interval_functional_space(
    stat: &LlrStatistic,
    y: &DVector<f64>,
    rule: &DecisionRule,
) -> Result<IntervalResult> {
    let alpha = 1.0 - rule.level();
    run_engine(stat, y, alpha, "functional_space", |mu| rule.q_at(mu))
}

/// Simultaneous strict bounds: the whole residual budget `Q_{chi2_m}(1-alpha)`
/// is spent at once, valid for every functional simultaneously. Empty when
/// the best achievable residual already exceeds the budget.
pub fn interval_ssb(inst: &ProblemInstance, y: &DVector<f64>, alpha: f64) -> Result<IntervalResult> {
    check_alpha(alpha)?;
    let cutoff = chi2_quantile(1.0 - alpha, inst.m())?;
    let stat = LlrStatistic::new(inst.clone());
    let s2 = stat.subtrahend(y)?;
    if s2 > cutoff {
        return Ok(IntervalResult::empty("ssb", alpha, cutoff - s2, s2, 1));
    }
    let q_eff = cutoff - s2;
    run_engine(&stat, y, alpha, "ssb", |_| Ok(q_eff))
}

/// One-at-a-time strict bounds with the classical threshold
/// `z_{alpha/2}^2 = Q_{chi2_1}(1-alpha)`. Not generally valid: near active
/// constraints the statistic's quantile can exceed this threshold and the
/// interval undercovers (see the three-dimensional counterexample).
pub fn interval_osb(inst: &ProblemInstance, y: &DVector<f64>, alpha: f64) -> Result<IntervalResult> {
    check_alpha(alpha)?;
    let q = chi2_quantile(1.0 - alpha, 1)?;
    let stat = LlrStatistic::new(inst.clone());
    run_engine(&stat, y, alpha, "osb", |_| Ok(q))
}

/// Interval from a calibrated scalar maximum-quantile rule.
pub fn interval_mq(
    inst: &ProblemInstance,
    y: &DVector<f64>,
    alpha: f64,
    rule: &DecisionRule,
) -> Result<IntervalResult> {
    check_rule_level(alpha, rule)?;
    let stat = LlrStatistic::new(inst.clone());
    run_engine(&stat, y, alpha, "mq", |mu| rule.q_at(mu))
}

/// Interval from a calibrated per-`mu` maximum-quantile rule.
pub fn interval_mqmu(
    inst: &ProblemInstance,
    y: &DVector<f64>,
    alpha: f64,
    rule: &DecisionRule,
) -> Result<IntervalResult> {
    check_rule_level(alpha, rule)?;
    let stat = LlrStatistic::new(inst.clone());
    run_engine(&stat, y, alpha, "mqmu", |mu| rule.q_at(mu))
}

/// Closed-form interval for a full-column-rank model without constraints:
/// `h'x_ls +/- z_{alpha/2} * sqrt(h'(K'K)^{-1}h)`.
pub fn interval_unconstrained_closed_form(
    inst: &ProblemInstance,
    y: &DVector<f64>,
    alpha: f64,
) -> Result<IntervalResult> {
    check_alpha(alpha)?;
    if y.len() != inst.m() {
        return Err(Error::DimensionMismatch("observation length != K rows".into()));
    }
    let ktk = inst.k().transpose() * inst.k();
    let chol = ktk
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("K'K is singular: K lacks full column rank".into()))?;
    let x_ls = chol.solve(&(inst.k().transpose() * y));
    let hinvh = inst.h().dot(&chol.solve(inst.h()));
    let z = normal_quantile(1.0 - alpha / 2.0)?;
    let center = inst.h().dot(&x_ls);
    let half = z * hinvh.sqrt();
    Ok(IntervalResult {
        method: "unconstrained_closed_form".into(),
        alpha,
        lower: center - half,
        upper: center + half,
        empty: false,
        q_used: z * z,
        s2: (y - inst.k() * &x_ls).norm_squared(),
        n_solves: 0,
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha {alpha} outside (0, 1)")));
    }
    Ok(())
}

fn check_rule_level(alpha: f64, rule: &DecisionRule) -> Result<()> {
    check_alpha(alpha)?;
    if (rule.level() - (1.0 - alpha)).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "rule level {} does not match 1 - alpha = {}",
            rule.level(),
            1.0 - alpha
        )));
    }
    Ok(())
}
