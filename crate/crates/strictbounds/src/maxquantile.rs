//! Calibration of decision thresholds by maximum-quantile search.
//!
//! The scalar rule solves `sup over x in X of Q_{F_x}(level)` restricted to a
//! user-supplied bounded search box; the per-value rule solves the same
//! problem restricted to each slice `h'x = mu`. Both are noisy black-box
//! problems: every evaluation draws `n_per_eval` Monte Carlo replicates of the
//! statistic with common random numbers across candidate points (the same
//! noise substreams are reused at every `x`), so comparisons between nearby
//! candidates are low-variance and the search is deterministic given its seed.
//!
//! The search itself is a multi-start coordinate pattern search: from each
//! start, probe every coordinate in both directions, move to the best
//! improving candidate, and halve the step when no probe improves, stopping
//! once the step falls below 1e-3 of the box width or the evaluation budget
//! runs out.
//!
//! An equivalent chance-constrained reading is also exposed: `cco_certify`
//! Monte Carlo checks the feasibility predicate `P(lambda <= q) <= level` at
//! a given parameter point. (The joint formulation that searches over `x` and
//! `q` simultaneously is documented here for completeness but not implemented
//! as a separate solver path; the max-quantile search plays that role.)

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::llr::LlrStatistic;
use crate::model::ParameterPoint;
use crate::nulldist::sample_null;
use crate::rng::substream;
use crate::solver::slice_projection;
use crate::stats::{chi2_quantile, clopper_pearson, empirical_quantile, quantile_order_stat_ci};
use crate::{Error, Result};

/// Relative step size (fraction of box width) below which the search stops.
const STEP_FLOOR: f64 = 1e-3;
/// Initial pattern-search step as a fraction of the box width.
const INITIAL_STEP: f64 = 0.25;
/// Confidence level of the order-statistic CIs attached to evaluations.
const EVAL_CI_CONF: f64 = 0.95;

/// Threshold rule `mu -> q(mu)` used when inverting the test.
#[derive(Debug, Clone, PartialEq)]
pub enum RuleKind {
    /// One threshold for every `mu`.
    Scalar { q: f64 },
    /// Per-`mu` thresholds cached on a grid; between grid points the larger
    /// neighbour is used, outside the grid the cache maximum (both choices
    /// are conservative for a valid cache).
    PerMu { mu_grid: Vec<f64>, q_values: Vec<f64> },
    /// The chi-square quantile with one degree of freedom.
    Chi2One,
    /// The chi-square quantile with `m` degrees of freedom.
    Chi2M { m: usize },
}

/// A calibrated decision rule: threshold kind, confidence level, and a note
/// recording where the thresholds came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRule {
    kind: RuleKind,
    level: f64,
    provenance: String,
    seed: Option<u64>,
}

impl DecisionRule {
    /// A constant-threshold rule.
    pub fn scalar(q: f64, level: f64, provenance: impl Into<String>) -> Result<Self> {
        if !(q >= 0.0) {
            return Err(Error::InvalidInput(format!("rule threshold {q} is negative")));
        }
        check_level(level)?;
        Ok(Self { kind: RuleKind::Scalar { q }, level, provenance: provenance.into(), seed: None })
    }

    /// A per-`mu` rule cached on a strictly increasing grid.
    pub fn per_mu(
        mu_grid: Vec<f64>,
        q_values: Vec<f64>,
        level: f64,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        check_level(level)?;
        if mu_grid.is_empty() || mu_grid.len() != q_values.len() {
            return Err(Error::InvalidInput(
                "per-mu rule needs equal-length nonempty grids".into(),
            ));
        }
        if mu_grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidInput("mu grid must be strictly increasing".into()));
        }
        if q_values.iter().any(|q| !(*q >= 0.0)) {
            return Err(Error::InvalidInput("per-mu thresholds must be nonnegative".into()));
        }
        Ok(Self {
            kind: RuleKind::PerMu { mu_grid, q_values },
            level,
            provenance: provenance.into(),
            seed: None,
        })
    }

    /// The chi-square(1) quantile rule (the classical one-at-a-time choice).
    pub fn chi2_one(level: f64) -> Result<Self> {
        check_level(level)?;
        Ok(Self {
            kind: RuleKind::Chi2One,
            level,
            provenance: "chi-square quantile, 1 degree of freedom".into(),
            seed: None,
        })
    }

    /// The chi-square(`m`) quantile rule used by simultaneous bounds.
    pub fn chi2_m(m: usize, level: f64) -> Result<Self> {
        check_level(level)?;
        if m == 0 {
            return Err(Error::InvalidInput("chi2_m rule needs m >= 1".into()));
        }
        Ok(Self {
            kind: RuleKind::Chi2M { m },
            level,
            provenance: format!("chi-square quantile, {m} degrees of freedom"),
            seed: None,
        })
    }

    /// Promotes a scalar search result, storing the conservative CI upper
    /// endpoint rather than the point estimate.
    pub fn from_max_quantile(res: &MaxQuantileResult, provenance: impl Into<String>) -> Self {
        Self {
            kind: RuleKind::Scalar { q: res.ci.1 },
            level: res.level,
            provenance: provenance.into(),
            seed: Some(res.seed),
        }
    }

    /// Attaches the seed that produced Monte Carlo thresholds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn kind(&self) -> &RuleKind {
        &self.kind
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Threshold at a given functional value.
    pub fn q_at(&self, mu: f64) -> Result<f64> {
        match &self.kind {
            RuleKind::Scalar { q } => Ok(*q),
            RuleKind::Chi2One => chi2_quantile(self.level, 1),
            RuleKind::Chi2M { m } => chi2_quantile(self.level, *m),
            RuleKind::PerMu { mu_grid, q_values } => {
                let first = mu_grid[0];
                let last = *mu_grid.last().unwrap();
                if mu < first || mu > last {
                    // Conservative extrapolation: the cache maximum.
                    return Ok(q_values.iter().cloned().fold(0.0, f64::max));
                }
                let j = mu_grid.partition_point(|g| *g < mu);
                if j == 0 {
                    return Ok(q_values[0]);
                }
                if (mu_grid[j - 1] - mu).abs() == 0.0 {
                    return Ok(q_values[j - 1]);
                }
                // Between grid points: the larger neighbour.
                Ok(q_values[j - 1].max(q_values[j]))
            }
        }
    }

    /// Serializes to the JSON interchange form.
    pub fn to_json(&self) -> String {
        let json = RuleJson::from_rule(self);
        serde_json::to_string_pretty(&json).expect("rule serialization cannot fail")
    }

    /// Parses the JSON interchange form.
    pub fn from_json(text: &str) -> Result<Self> {
        let json: RuleJson = serde_json::from_str(text)
            .map_err(|e| Error::InvalidInput(format!("rule JSON: {e}")))?;
        json.into_rule()
    }
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("level {level} outside (0, 1)")));
    }
    Ok(())
}

/// JSON wire form of a decision rule.
#[derive(Serialize, Deserialize)]
struct RuleJson {
    kind: String,
    level: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mu_grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    q_values: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    provenance: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

impl RuleJson {
    fn from_rule(rule: &DecisionRule) -> Self {
        let mut json = RuleJson {
            kind: String::new(),
            level: rule.level,
            q: None,
            mu_grid: None,
            q_values: None,
            m: None,
            provenance: rule.provenance.clone(),
            seed: rule.seed,
        };
        match &rule.kind {
            RuleKind::Scalar { q } => {
                json.kind = "scalar".into();
                json.q = Some(*q);
            }
            RuleKind::PerMu { mu_grid, q_values } => {
                json.kind = "per_mu".into();
                json.mu_grid = Some(mu_grid.clone());
                json.q_values = Some(q_values.clone());
            }
            RuleKind::Chi2One => json.kind = "chi2_1".into(),
            RuleKind::Chi2M { m } => {
                json.kind = "chi2_m".into();
                json.m = Some(*m);
            }
        }
        json
    }

    fn into_rule(self) -> Result<DecisionRule> {
        let missing = |k: &str| Error::InvalidInput(format!("rule JSON missing key \"{k}\""));
        let mut rule = match self.kind.as_str() {
            "scalar" => DecisionRule::scalar(self.q.ok_or_else(|| missing("q"))?, self.level, self.provenance)?,
            "per_mu" => DecisionRule::per_mu(
                self.mu_grid.ok_or_else(|| missing("mu_grid"))?,
                self.q_values.ok_or_else(|| missing("q_values"))?,
                self.level,
                self.provenance,
            )?,
            "chi2_1" => {
                let mut r = DecisionRule::chi2_one(self.level)?;
                r.provenance = self.provenance;
                r
            }
            "chi2_m" => {
                let mut r = DecisionRule::chi2_m(self.m.ok_or_else(|| missing("m"))?, self.level)?;
                r.provenance = self.provenance;
                r
            }
            other => {
                return Err(Error::InvalidInput(format!("unknown rule kind \"{other}\"")));
            }
        };
        rule.seed = self.seed;
        Ok(rule)
    }
}

/// One quantile evaluation during the search.
#[derive(Debug, Clone)]
pub struct EvalDiagnostic {
    pub x: ParameterPoint,
    /// Point estimate of the level-quantile at `x`.
    pub q: f64,
    /// Order-statistic confidence interval for that quantile.
    pub ci: (f64, f64),
}

/// Result of a scalar maximum-quantile search.
#[derive(Debug, Clone)]
pub struct MaxQuantileResult {
    /// Largest estimated quantile found (point estimate).
    pub q: f64,
    /// Where it was found.
    pub argmax_x: ParameterPoint,
    /// Order-statistic CI of the quantile at `argmax_x`.
    pub ci: (f64, f64),
    pub level: f64,
    pub seed: u64,
    /// Every evaluation performed, with its CI.
    pub evaluations: Vec<EvalDiagnostic>,
}

/// Axis-aligned search box for the quantile optimization.
#[derive(Debug, Clone)]
pub struct SearchBox {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl SearchBox {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::DimensionMismatch("search box bounds disagree".into()));
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| l > u) {
            return Err(Error::InvalidInput("search box is empty".into()));
        }
        Ok(Self { lower, upper })
    }

    fn dim(&self) -> usize {
        self.lower.len()
    }

    fn center(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    fn width(&self) -> f64 {
        self.lower
            .iter()
            .zip(self.upper.iter())
            .map(|(l, u)| u - l)
            .fold(0.0, f64::max)
    }

    fn clamp(&self, x: &mut DVector<f64>) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| {
            let (l, u) = (self.lower[i], self.upper[i]);
            if u > l { rng.random_range(l..u) } else { l }
        })
    }
}

/// Evaluates the level-quantile of the statistic's null distribution at `x`.
fn eval_quantile(
    stat: &LlrStatistic,
    x: &ParameterPoint,
    level: f64,
    n: usize,
    seed: u64,
) -> Result<EvalDiagnostic> {
    let sample = sample_null(stat, x, n, seed)?;
    let q = empirical_quantile(&sample.draws, level)?;
    let ci = quantile_order_stat_ci(&sample.draws, level, EVAL_CI_CONF)?;
    Ok(EvalDiagnostic { x: x.clone(), q, ci })
}

/// Searches `sup over x in search_box of Q_{F_x}(level)` by multi-start
/// coordinate pattern search with common random numbers.
///
/// `budget` bounds the total number of quantile evaluations. The returned `q`
/// is an estimate of the supremum *restricted to the box*: over an unbounded
/// constraint set the true supremum may only be approached as `x` leaves any
/// bounded region (for the 1D/2D nonnegative models it is the chi-square(1)
/// quantile, attained in the limit far from the boundary), so `q` must be
/// read as a lower estimate of the unrestricted supremum.
pub fn max_quantile(
    stat: &LlrStatistic,
    level: f64,
    search_box: &SearchBox,
    budget: usize,
    n_per_eval: usize,
    seed: u64,
) -> Result<MaxQuantileResult> {
    check_level(level)?;
    if budget == 0 {
        return Err(Error::InvalidInput("evaluation budget must be >= 1".into()));
    }
    let inst = stat.instance();
    if search_box.dim() != inst.p() {
        return Err(Error::DimensionMismatch(
            "search box dimension differs from parameter dimension".into(),
        ));
    }
    if !inst.constraints().contains(&search_box.lower, 1e-9)?
        || !inst.constraints().contains(&search_box.upper, 1e-9)?
    {
        return Err(Error::InvalidInput(
            "search box corners lie outside the constraint set".into(),
        ));
    }

    let restarts = (budget / 25).max(8).min(budget);
    let per_restart = (budget / restarts).max(1);

    let mut runs: Vec<(usize, Vec<EvalDiagnostic>)> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let start = if r == 0 {
                search_box.center()
            } else {
                let mut rng = substream(seed, u64::MAX - r as u64);
                search_box.sample(&mut rng)
            };
            let evals = pattern_search(search_box, per_restart, start, |x| {
                eval_quantile(stat, x, level, n_per_eval, seed)
            })?;
            Ok((r, evals))
        })
        .collect::<Result<Vec<_>>>()?;
    runs.sort_by_key(|(r, _)| *r);

    let mut evaluations = Vec::new();
    for (_, evals) in runs {
        evaluations.extend(evals);
    }
    let best = evaluations
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.q.partial_cmp(&b.q).unwrap().then(j.cmp(i)))
        .map(|(_, e)| e.clone())
        .ok_or_else(|| Error::Numerical("quantile search made no evaluations".into()))?;

    Ok(MaxQuantileResult {
        q: best.q,
        argmax_x: best.x,
        ci: best.ci,
        level,
        seed,
        evaluations,
    })
}

/// Coordinate pattern search maximizing `f` over the box, spending at most
/// `budget` evaluations. Candidate points outside the box are clamped to it.
fn pattern_search<F>(
    search_box: &SearchBox,
    budget: usize,
    start: DVector<f64>,
    f: F,
) -> Result<Vec<EvalDiagnostic>>
where
    F: Fn(&DVector<f64>) -> Result<EvalDiagnostic>,
{
    let width = search_box.width().max(f64::MIN_POSITIVE);
    let mut step = INITIAL_STEP * width;
    let mut evals = Vec::new();
    let spend = |x: &DVector<f64>, evals: &mut Vec<EvalDiagnostic>| -> Result<f64> {
        let e = f(x)?;
        let q = e.q;
        evals.push(e);
        Ok(q)
    };

    let mut current = start;
    let mut current_q = spend(&current, &mut evals)?;
    while evals.len() < budget && step >= STEP_FLOOR * width {
        let mut best_move: Option<(DVector<f64>, f64)> = None;
        'probes: for i in 0..current.len() {
            for sign in [1.0, -1.0] {
                if evals.len() >= budget {
                    break 'probes;
                }
                let mut cand = current.clone();
                cand[i] += sign * step;
                search_box.clamp(&mut cand);
                if (&cand - &current).amax() == 0.0 {
                    continue;
                }
                let q = spend(&cand, &mut evals)?;
                if q > current_q && best_move.as_ref().map_or(true, |(_, bq)| q > *bq) {
                    best_move = Some((cand, q));
                }
            }
        }
        match best_move {
            Some((x, q)) => {
                current = x;
                current_q = q;
            }
            None => step *= 0.5,
        }
    }
    Ok(evals)
}

/// Per-`mu` maximum-quantile calibration: for each grid value, maximizes the
/// quantile over the slice `h'x = mu` inside the search box and returns a
/// per-`mu` rule storing the conservative CI upper endpoints. Grid entries
/// whose slice misses the box are dropped and reported in the second return.
///
/// `budget` is the evaluation budget per grid entry. The slice is searched by
/// eliminating the coordinate with the largest functional weight: the
/// remaining coordinates move freely in the box and the pivot is solved from
/// `h'x = mu`, with moves that push the pivot outside the box rejected.
pub fn max_quantile_per_mu(
    stat: &LlrStatistic,
    level: f64,
    mu_grid: &[f64],
    search_box: &SearchBox,
    budget: usize,
    n_per_eval: usize,
    seed: u64,
) -> Result<(DecisionRule, Vec<f64>)> {
    check_level(level)?;
    if budget == 0 {
        return Err(Error::InvalidInput("evaluation budget must be >= 1".into()));
    }
    if mu_grid.is_empty() {
        return Err(Error::InvalidInput("mu grid is empty".into()));
    }
    if mu_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput("mu grid must be strictly increasing".into()));
    }
    let inst = stat.instance();
    let p = inst.p();
    if search_box.dim() != p {
        return Err(Error::DimensionMismatch(
            "search box dimension differs from parameter dimension".into(),
        ));
    }
    let h = inst.h();

    // Pivot coordinate eliminated through the slice equation.
    let pivot = (0..p)
        .max_by(|a, b| h[*a].abs().partial_cmp(&h[*b].abs()).unwrap())
        .unwrap();
    if h[pivot] == 0.0 {
        return Err(Error::InvalidInput("functional weights are all zero".into()));
    }

    let results: Vec<(f64, Option<f64>)> = mu_grid
        .par_iter()
        .map(|&mu| {
            let q = slice_max_quantile(
                stat, level, mu, search_box, pivot, budget, n_per_eval, seed,
            )?;
            Ok((mu, q))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grid = Vec::new();
    let mut values = Vec::new();
    let mut dropped = Vec::new();
    for (mu, q) in results {
        match q {
            Some(q) => {
                grid.push(mu);
                values.push(q);
            }
            None => dropped.push(mu),
        }
    }
    if grid.is_empty() {
        return Err(Error::Infeasible(
            "every mu grid entry misses the search box".into(),
        ));
    }
    let rule = DecisionRule::per_mu(
        grid,
        values,
        level,
        "per-mu maximum-quantile search (CI upper endpoints)",
    )?
    .with_seed(seed);
    Ok((rule, dropped))
}

/// Maximizes the quantile over one slice; `None` when the slice misses the box.
#[allow(clippy::too_many_arguments)]
fn slice_max_quantile(
    stat: &LlrStatistic,
    level: f64,
    mu: f64,
    search_box: &SearchBox,
    pivot: usize,
    budget: usize,
    n_per_eval: usize,
    seed: u64,
) -> Result<Option<f64>> {
    let inst = stat.instance();
    let h = inst.h();
    let p = inst.p();

    // Feasible anchor on the slice inside the box (projection of the center).
    let Some((anchor, _)) = slice_projection(
        &search_box.center(),
        h,
        mu,
        &search_box.lower,
        &search_box.upper,
    ) else {
        return Ok(None);
    };

    if p == 1 {
        // The slice is a single point.
        let e = eval_quantile(stat, &anchor, level, n_per_eval, seed)?;
        return Ok(Some(e.ci.1));
    }

    // Free coordinates are everything but the pivot; the pivot is recovered
    // from the slice equation. Infeasible pivot values are rejected by
    // returning None from the embedding.
    let free: Vec<usize> = (0..p).filter(|i| *i != pivot).collect();
    let embed = |z: &DVector<f64>| -> Option<DVector<f64>> {
        let mut x = DVector::zeros(p);
        let mut partial = 0.0;
        for (j, &i) in free.iter().enumerate() {
            x[i] = z[j];
            partial += h[i] * z[j];
        }
        let xp = (mu - partial) / h[pivot];
        if xp < search_box.lower[pivot] - 1e-12 || xp > search_box.upper[pivot] + 1e-12 {
            return None;
        }
        x[pivot] = xp.clamp(search_box.lower[pivot], search_box.upper[pivot]);
        Some(x)
    };

    let reduced_box = SearchBox::new(
        DVector::from_iterator(p - 1, free.iter().map(|&i| search_box.lower[i])),
        DVector::from_iterator(p - 1, free.iter().map(|&i| search_box.upper[i])),
    )?;
    let start = DVector::from_iterator(p - 1, free.iter().map(|&i| anchor[i]));

    let restarts = (budget / 25).max(4).min(budget);
    let per_restart = (budget / restarts).max(1);
    let mut best: Option<EvalDiagnostic> = None;
    for r in 0..restarts {
        let z0 = if r == 0 {
            start.clone()
        } else {
            // Random starts are projected back onto the slice through the
            // anchor direction by simply rejecting infeasible pivots below.
            let mut rng = substream(seed ^ 0x9e37_79b9_7f4a_7c15, u64::MAX - r as u64);
            reduced_box.sample(&mut rng)
        };
        if embed(&z0).is_none() {
            continue;
        }
        let evals = pattern_search(&reduced_box, per_restart, z0, |z| match embed(z) {
            Some(x) => eval_quantile(stat, &x, level, n_per_eval, seed),
            // Off-slice probes score worst-possible so the search stays on it.
            None => Ok(EvalDiagnostic {
                x: DVector::zeros(p),
                q: f64::NEG_INFINITY,
                ci: (f64::NEG_INFINITY, f64::NEG_INFINITY),
            }),
        })?;
        for e in evals {
            if e.q.is_finite() && best.as_ref().map_or(true, |b| e.q > b.q) {
                best = Some(e);
            }
        }
    }
    match best {
        Some(e) => Ok(Some(e.ci.1)),
        // Only the anchor was feasible (degenerate slice); evaluate it.
        None => {
            let e = eval_quantile(stat, &anchor, level, n_per_eval, seed)?;
            Ok(Some(e.ci.1))
        }
    }
}

/// Outcome of a Monte Carlo chance-constraint check at one parameter point.
#[derive(Debug, Clone)]
pub struct CcoCertificate {
    /// Whether `P(lambda <= q) <= level` held empirically.
    pub feasible: bool,
    /// Empirical `P(lambda <= q)`.
    pub p_hat: f64,
    /// Exact binomial (Clopper-Pearson) 95% bounds on that probability.
    pub cp_lo: f64,
    pub cp_hi: f64,
    /// Binomial standard error of `p_hat`.
    pub sigma: f64,
    pub n: usize,
}

/// Monte Carlo check of the chance-constraint feasibility predicate
/// `P(lambda(h'x, y) <= q) <= level` under `y ~ P_x`.
pub fn cco_certify(
    stat: &LlrStatistic,
    x: &ParameterPoint,
    q: f64,
    level: f64,
    n: usize,
    seed: u64,
) -> Result<CcoCertificate> {
    check_level(level)?;
    let sample = sample_null(stat, x, n, seed)?;
    let p_hat = sample.draws.cdf(q);
    let k = (p_hat * n as f64).round() as usize;
    let (cp_lo, cp_hi) = clopper_pearson(k, n, 0.05)?;
    let sigma = (p_hat * (1.0 - p_hat) / n as f64).sqrt();
    Ok(CcoCertificate { feasible: p_hat <= level, p_hat, cp_lo, cp_hi, sigma, n })
}
