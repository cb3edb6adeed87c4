//! Scalar distribution primitives: normal and chi-square CDFs and quantiles,
//! empirical quantiles, exact Clopper-Pearson binomial intervals, and
//! distribution-free order-statistic confidence intervals for quantiles.
//!
//! Everything here is hand-rolled on top of the regularized incomplete gamma
//! function so the numerical behaviour is fully under our control and testable
//! against independent oracles. Quantile subscripts follow the lower-tail
//! convention: `chi2_quantile(p, k)` is the value `c` with `chi2_cdf(c, k) = p`.
//! Upper-tail cutoffs like `z_{alpha/2}` are obtained as
//! `normal_quantile(1 - alpha/2)`.

use crate::{Error, Result};

const SQRT_2PI: f64 = 2.5066282746310002;

// Lanczos approximation, g = 7, n = 9 (Godfrey coefficients).
const LANCZOS: [f64; 9] = [
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
];

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x).
        return std::f64::consts::PI.ln() - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    SQRT_2PI.ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma P(a, x) by series expansion (x < a + 1).
fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..500 {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * 1e-16 {
            break;
        }
    }
    sum * (a * x.ln() - x - ln_gamma(a)).exp()
}

/// Regularized upper incomplete gamma Q(a, x) by continued fraction (x >= a + 1).
fn gamma_q_cf(a: f64, x: f64) -> f64 {
    // Modified Lentz algorithm.
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (a * x.ln() - x - ln_gamma(a)).exp() * h
}

/// Regularized lower incomplete gamma function P(a, x).
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        gamma_p_series(a, x)
    } else {
        1.0 - gamma_q_cf(a, x)
    }
}

/// Regularized upper incomplete gamma function Q(a, x) = 1 - P(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_cf(a, x)
    }
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / SQRT_2PI
}

/// Standard normal CDF, accurate to ~1e-15 including the tails.
pub fn normal_cdf(z: f64) -> f64 {
    if z == 0.0 {
        return 0.5;
    }
    // Phi(-|z|) = Q(1/2, z^2/2) / 2; the upper gamma is computed directly so
    // tail values do not suffer cancellation.
    let half_tail = 0.5 * gamma_q(0.5, 0.5 * z * z);
    if z < 0.0 {
        half_tail
    } else {
        1.0 - half_tail
    }
}

// Acklam's rational approximation to the normal quantile (initial guess).
fn normal_quantile_guess(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile_guess(1.0 - p)
    }
}

/// Standard normal quantile (inverse CDF) for `p` in (0, 1).
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(0.0 < p && p < 1.0) {
        return Err(Error::InvalidInput(format!(
            "normal_quantile: p={p} outside (0,1)"
        )));
    }
    let mut x = normal_quantile_guess(p);
    // Two Halley refinements push the rational guess to machine precision.
    for _ in 0..2 {
        let e = normal_cdf(x) - p;
        let u = e * SQRT_2PI * (0.5 * x * x).exp();
        x -= u / (1.0 + 0.5 * x * u);
    }
    Ok(x)
}

/// Chi-square CDF with `k` degrees of freedom.
pub fn chi2_cdf(c: f64, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidInput("chi2_cdf: k must be >= 1".into()));
    }
    if c < 0.0 {
        return Err(Error::InvalidInput(format!("chi2_cdf: c={c} < 0")));
    }
    Ok(gamma_p(0.5 * k as f64, 0.5 * c))
}

fn chi2_pdf(c: f64, k: usize) -> f64 {
    if c <= 0.0 {
        return 0.0;
    }
    let a = 0.5 * k as f64;
    ((a - 1.0) * c.ln() - 0.5 * c - a * 2.0_f64.ln() - ln_gamma(a)).exp()
}

/// Chi-square quantile: the `c` with `chi2_cdf(c, k) = p`.
///
/// Newton from a Wilson-Hilferty start, safeguarded by a bisection bracket.
pub fn chi2_quantile(p: f64, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidInput("chi2_quantile: k must be >= 1".into()));
    }
    if !(0.0 < p && p < 1.0) {
        return Err(Error::InvalidInput(format!(
            "chi2_quantile: p={p} outside (0,1)"
        )));
    }
    let kf = k as f64;
    let z = normal_quantile(p)?;
    let wh = 1.0 - 2.0 / (9.0 * kf) + z * (2.0 / (9.0 * kf)).sqrt();
    let mut x = if wh > 0.0 { kf * wh * wh * wh } else { 1e-8 };

    // Establish a bracket [lo, hi] around the root.
    let mut lo = 0.0;
    let mut hi = kf.max(1.0);
    while chi2_cdf(hi, k)? < p {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::Numerical("chi2_quantile: bracket blew up".into()));
        }
    }
    if !(lo < x && x < hi) {
        x = 0.5 * (lo + hi);
    }
    for _ in 0..200 {
        let f = gamma_p(0.5 * kf, 0.5 * x) - p;
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let dfdx = chi2_pdf(x, k);
        let mut next = if dfdx > 0.0 { x - f / dfdx } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-13 * (1.0 + x.abs()) {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// Sorted Monte Carlo sample; the carrier for empirical quantile queries.
#[derive(Debug, Clone)]
pub struct EmpiricalSample {
    values: Vec<f64>,
}

impl EmpiricalSample {
    /// Builds a sample, sorting the draws. Errors on empty input or NaNs.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("EmpiricalSample: empty sample".into()));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput("EmpiricalSample: NaN draw".into()));
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(Self { values })
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().unwrap()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.n() as f64
    }

    /// Standard error of the sample mean.
    pub fn mean_se(&self) -> f64 {
        let n = self.n() as f64;
        let mean = self.mean();
        let var = self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        (var / n).sqrt()
    }

    /// Fraction of draws `<= c` (empirical CDF).
    pub fn cdf(&self, c: f64) -> f64 {
        self.values.partition_point(|&v| v <= c) as f64 / self.n() as f64
    }
}

/// Empirical quantile: the order statistic at 1-based index `ceil(p * n)`.
///
/// This upper-order-statistic convention biases quantile estimates slightly
/// upward, which is the conservative direction for decision-rule calibration.
pub fn empirical_quantile(s: &EmpiricalSample, p: f64) -> Result<f64> {
    if !(0.0 < p && p < 1.0) {
        return Err(Error::InvalidInput(format!(
            "empirical_quantile: p={p} outside (0,1)"
        )));
    }
    let n = s.n();
    let idx = (p * n as f64).ceil() as usize;
    let idx = idx.clamp(1, n);
    Ok(s.values[idx - 1])
}

/// Binomial CDF P(Bin(n, p) <= k), summed term by term in log space.
fn binom_cdf(k: usize, n: usize, p: f64) -> f64 {
    if p <= 0.0 {
        return 1.0;
    }
    if p >= 1.0 {
        return if k >= n { 1.0 } else { 0.0 };
    }
    if k >= n {
        return 1.0;
    }
    let lp = p.ln();
    let lq = (-p).ln_1p();
    let mut log_term = n as f64 * lq; // log P(X = 0)
    let mut sum = log_term.exp();
    for i in 0..k {
        log_term += ((n - i) as f64).ln() - ((i + 1) as f64).ln() + lp - lq;
        sum += log_term.exp();
    }
    sum.min(1.0)
}

/// Exact equal-tailed Clopper-Pearson interval for a binomial proportion.
///
/// Returns `(lo, hi)` with confidence `1 - alpha`; `lo = 0` when `k = 0` and
/// `hi = 1` when `k = n`. Endpoints are found by bisection on the exact
/// binomial tail sum.
pub fn clopper_pearson(k: usize, n: usize, alpha: f64) -> Result<(f64, f64)> {
    if n == 0 || k > n {
        return Err(Error::InvalidInput(format!(
            "clopper_pearson: invalid k={k}, n={n}"
        )));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidInput(format!(
            "clopper_pearson: alpha={alpha} outside (0,1)"
        )));
    }
    let tail = 0.5 * alpha;
    let lo = if k == 0 {
        0.0
    } else {
        // Largest p with P(Bin(n,p) >= k) <= tail, i.e. binom_cdf(k-1) = 1 - tail.
        bisect_binom(k - 1, n, 1.0 - tail)
    };
    let hi = if k == n {
        1.0
    } else {
        // Smallest p with P(Bin(n,p) <= k) <= tail.
        bisect_binom(k, n, tail)
    };
    Ok((lo, hi))
}

// Solves binom_cdf(k, n, p) = target for p; the CDF is decreasing in p.
fn bisect_binom(k: usize, n: usize, target: f64) -> f64 {
    let mut lo = 0.0;
    let mut hi = 1.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if binom_cdf(k, n, mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Distribution-free confidence interval for the `p`-quantile from order
/// statistics: returns sample values `(x_(l), x_(u))` whose exact binomial
/// coverage is at least `conf`.
pub fn quantile_order_stat_ci(s: &EmpiricalSample, p: f64, conf: f64) -> Result<(f64, f64)> {
    if !(0.0 < p && p < 1.0) || !(0.0 < conf && conf < 1.0) {
        return Err(Error::InvalidInput(
            "quantile_order_stat_ci: p and conf must be in (0,1)".into(),
        ));
    }
    let n = s.n();
    // Exact binomial CDF at every count 0..n-1; cdf[i] = P(Bin(n,p) <= i).
    let lp = p.ln();
    let lq = (-p).ln_1p();
    let mut cdf = Vec::with_capacity(n);
    let mut log_term = n as f64 * lq;
    let mut acc = log_term.exp();
    cdf.push(acc);
    for i in 0..n - 1 {
        log_term += ((n - i) as f64).ln() - ((i + 1) as f64).ln() + lp - lq;
        acc = (acc + log_term.exp()).min(1.0);
        cdf.push(acc);
    }
    let tail = 0.5 * (1.0 - conf);
    // l-1 = largest index with cdf <= tail (fall back to 0); u-1 = smallest
    // index with cdf >= 1 - tail (fall back to n-1). Coverage of (x_(l), x_(u))
    // is cdf[u-1] - cdf[l-1]; widen greedily if the equal-tail pick falls short.
    let mut l1 = cdf.partition_point(|&v| v <= tail).saturating_sub(1);
    let mut u1 = cdf.partition_point(|&v| v < 1.0 - tail).min(n - 1);
    loop {
        let coverage = cdf[u1] - cdf[l1];
        if coverage >= conf {
            break;
        }
        if l1 > 0 {
            l1 -= 1;
        } else if u1 < n - 1 {
            u1 += 1;
        } else {
            return Err(Error::SampleTooSmall(format!(
                "order-statistic CI: n={n} cannot reach confidence {conf} at p={p} \
                 (max attainable {:.6})",
                cdf[n - 1] - cdf[0]
            )));
        }
    }
    Ok((s.values[l1], s.values[u1]))
}

/// Kolmogorov-Smirnov statistic of a sample against a continuous CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(s: &EmpiricalSample, cdf: F) -> f64 {
    ks_statistic_mixed(s, &cdf, &cdf)
}

/// Kolmogorov-Smirnov statistic against a possibly discontinuous reference:
/// `cdf_left` must return the left limit `F(c-)`, which differs from `F(c)`
/// at atoms.
pub fn ks_statistic_mixed<F, G>(s: &EmpiricalSample, cdf: F, cdf_left: G) -> f64
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let n = s.n() as f64;
    let mut d: f64 = 0.0;
    let values = s.values();
    let mut i = 0;
    while i < values.len() {
        let v = values[i];
        let mut j = i;
        while j + 1 < values.len() && values[j + 1] == v {
            j += 1;
        }
        // Empirical CDF just below v and at v, vs the reference's limits.
        d = d.max((cdf_left(v) - i as f64 / n).abs());
        d = d.max((cdf(v) - (j + 1) as f64 / n).abs());
        i = j + 1;
    }
    d
}

/// Asymptotic Kolmogorov-Smirnov p-value for statistic `d` at sample size `n`.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let lambda = (n as f64).sqrt() * d;
    let mut p = 0.0;
    for k in 1..101 {
        let kf = k as f64;
        let term = 2.0 * (-1.0f64).powi(k + 1) * (-2.0 * kf * kf * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}
