//! Acceptance suite: one test per release criterion, each printing a single
//! `criterion N: PASS/FAIL` line (visible with `--nocapture`) before asserting.
//!
//! These are end-to-end statistical checks with fixed seeds, so they are
//! deterministic; the Monte Carlo tolerances (4 standard errors, 95%
//! Clopper-Pearson bands, order-statistic quantile CIs) leave them robust to
//! reasonable implementation changes.

use std::time::Instant;

use nalgebra::{dvector, DMatrix, DVector};
use rand::Rng;

use strictbounds::experiments::{self, Method};
use strictbounds::llr::{
    counterexample_instance, evaluate_2d_counterexample, FastPath, LlrStatistic,
};
use strictbounds::maxquantile::max_quantile;
use strictbounds::nulldist::{dominance_diagnostic, sample_null, DominanceVerdict};
use strictbounds::rng::substream;
use strictbounds::solver::{brute_force_min, min_residual, GridSpec};
use strictbounds::stats;
use strictbounds::{
    interval_osb, interval_unconstrained_closed_form, ConstraintSet, ProblemInstance, SearchBox,
};

/// Prints the verdict line and then asserts it.
fn verdict(criterion: usize, ok: bool, detail: String) {
    let word = if ok { "PASS" } else { "FAIL" };
    println!("criterion {criterion}: {word} - {detail}");
    assert!(ok, "criterion {criterion}: {detail}");
}

fn find_row<'a>(
    report: &'a experiments::CoverageReport,
    truth: &[f64],
    method: Method,
) -> &'a experiments::CoverageRow {
    report
        .rows
        .iter()
        .find(|r| {
            r.method == method
                && r.truth.len() == truth.len()
                && r.truth.iter().zip(truth).all(|(a, b)| (a - b).abs() < 1e-12)
        })
        .expect("coverage row present")
}

/// Criterion 1: at the 3D counterexample parameter (0,0,1) with n = 10^6,
/// the slice objective averages to 13/6, the orthant projection objective to
/// 1 + 2*Phi(-1) - phi(-1), and the statistic's mean exceeds the chi-square(1)
/// mean of 1 by at least 4 standard errors. Budget: 60 s.
#[test]
fn c01_counterexample_mean_identities() {
    let t0 = Instant::now();
    let rep = experiments::run_counterexample_mean(1_000_000, 2).unwrap();
    let slice_target = 13.0 / 6.0;
    let orthant_target = 1.0 + 2.0 * stats::normal_cdf(-1.0) - stats::normal_pdf(-1.0);
    let ok_slice = (rep.slice_mean - slice_target).abs() <= 4.0 * rep.slice_se;
    let ok_orthant = (rep.orthant_mean - orthant_target).abs() <= 4.0 * rep.orthant_se;
    let elapsed = t0.elapsed().as_secs_f64();
    let ok_time = elapsed < 60.0;
    verdict(
        1,
        ok_slice && ok_orthant && rep.exceeds_chi2_mean && ok_time,
        format!(
            "slice {:.4}+-{:.4} (target {:.4}), orthant {:.4}+-{:.4} (target {:.4}), \
             lambda mean {:.4}+-{:.4} > 1: {}, {:.1}s",
            rep.slice_mean,
            rep.slice_se,
            slice_target,
            rep.orthant_mean,
            rep.orthant_se,
            orthant_target,
            rep.lambda_mean,
            rep.lambda_se,
            rep.exceeds_chi2_mean,
            elapsed
        ),
    );
}

/// Criterion 2: dominance diagnostics at n = 10^6 against the chi-square(1)
/// reference: the 2D counterexample is dominated at both (0,0) and
/// (0.33,0.33); the 3D counterexample at (0,0,1) is not, with at least one
/// flagged grid point. Budget: 5 min.
#[test]
fn c02_dominance_verdicts() {
    let t0 = Instant::now();
    let stat2 = LlrStatistic::new(counterexample_instance(2));
    let mut ok = true;
    let mut detail = String::new();
    for x in [dvector![0.0, 0.0], dvector![0.33, 0.33]] {
        let s = sample_null(&stat2, &x, 1_000_000, 5).unwrap();
        let rep = dominance_diagnostic(&s, 1).unwrap();
        ok &= rep.verdict == DominanceVerdict::Dominated;
        detail.push_str(&format!(
            "2D at ({},{}): {:?}; ",
            x[0], x[1], rep.verdict
        ));
    }
    let stat3 = LlrStatistic::new(counterexample_instance(3));
    let s3 = sample_null(&stat3, &dvector![0.0, 0.0, 1.0], 1_000_000, 5).unwrap();
    let rep3 = dominance_diagnostic(&s3, 1).unwrap();
    ok &= rep3.verdict == DominanceVerdict::NotDominated && !rep3.violations.is_empty();
    let elapsed = t0.elapsed().as_secs_f64();
    ok &= elapsed < 300.0;
    detail.push_str(&format!(
        "3D at (0,0,1): {:?} with {} violations; {:.1}s",
        rep3.verdict,
        rep3.violations.len(),
        elapsed
    ));
    verdict(2, ok, detail);
}

/// Criterion 3: the 2D counterexample statistic at mu = 0 never exceeds the
/// unconstrained value (y1 - y2)^2 / 2, checked pointwise on 10^6 draws with
/// zero violations beyond 1e-10. Budget: 30 s.
#[test]
fn c03_two_d_statistic_bounded_by_unconstrained() {
    let t0 = Instant::now();
    let mut rng = substream(21, 0);
    let mut violations = 0usize;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1_000_000 {
        let y0: f64 = rng.random_range(-5.0..5.0);
        let y1: f64 = rng.random_range(-5.0..5.0);
        let lam = evaluate_2d_counterexample([y0, y1]);
        let gap = lam - 0.5 * (y0 - y1).powi(2);
        worst = worst.max(gap);
        if gap > 1e-10 {
            violations += 1;
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    verdict(
        3,
        violations == 0 && elapsed < 30.0,
        format!("{violations} violations, worst gap {worst:.2e}, {elapsed:.1}s"),
    );
}

/// Criterion 4: exact 1D calibration at the boundary truth x* = 0 with 10^5
/// replicates: the classical per-functional rule covers with probability
/// exactly 0.975 and the per-value calibrated rule with exactly 0.95, both
/// within their 95% Clopper-Pearson bands. Budget: 2 min.
#[test]
fn c04_one_d_exact_coverage() {
    let t0 = Instant::now();
    let mut sc = experiments::preset("oneD").unwrap();
    sc.truth_points = vec![dvector![0.0]];
    sc.methods = vec![Method::Osb, Method::Mqmu];
    let rep = experiments::run_coverage(&sc, 2024).unwrap();
    let osb = find_row(&rep, &[0.0], Method::Osb);
    let mqmu = find_row(&rep, &[0.0], Method::Mqmu);
    let ok_osb = osb.cov_lo <= 0.975 && 0.975 <= osb.cov_hi;
    let ok_mqmu = mqmu.cov_lo <= 0.95 && 0.95 <= mqmu.cov_hi;
    let elapsed = t0.elapsed().as_secs_f64();
    verdict(
        4,
        ok_osb && ok_mqmu && elapsed < 120.0,
        format!(
            "classical rule coverage {:.4} in [{:.4},{:.4}] (target 0.975), \
             per-value rule coverage {:.4} in [{:.4},{:.4}] (target 0.95), {:.1}s",
            osb.coverage, osb.cov_lo, osb.cov_hi, mqmu.coverage, mqmu.cov_lo, mqmu.cov_hi, elapsed
        ),
    );
}

/// Criterion 5: in the 3D counterexample at truth (0,0,1) and level 68%, the
/// classical per-functional rule undercovers (its 95% CP upper bound falls
/// below 0.68) while the simultaneous and both calibrated rules remain valid
/// (their CP intervals do not exclude 0.68 from below). 5*10^4 replicates,
/// budget 15 min.
#[test]
fn c05_three_d_undercoverage() {
    let t0 = Instant::now();
    let mut sc = experiments::preset("threeD").unwrap();
    sc.truth_points = vec![dvector![0.0, 0.0, 1.0]];
    let rep = experiments::run_coverage(&sc, 7).unwrap();
    let truth = [0.0, 0.0, 1.0];
    let osb = find_row(&rep, &truth, Method::Osb);
    let ok_osb = osb.cov_hi < 0.68;
    let mut ok_valid = true;
    let mut detail = format!(
        "classical rule coverage {:.4} (CP upper {:.4} < 0.68: {}); ",
        osb.coverage, osb.cov_hi, ok_osb
    );
    for m in [Method::Ssb, Method::Mq, Method::Mqmu] {
        let row = find_row(&rep, &truth, m);
        let ok = row.cov_hi >= 0.68;
        ok_valid &= ok;
        detail.push_str(&format!("{} coverage {:.4}; ", m.as_str(), row.coverage));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    detail.push_str(&format!("{elapsed:.1}s"));
    verdict(5, ok_osb && ok_valid && elapsed < 900.0, detail);
}

/// Criterion 6: the scalar max-quantile search on the 2D counterexample at
/// level 0.95 brackets the chi-square(1) quantile 3.8415 within its
/// order-statistic CI. The quantile surface only approaches that supremum far
/// from the boundary, so the search box is [0,6]^2 (a box hugging the origin
/// tops out near 3.39).
#[test]
fn c06_max_quantile_brackets_chi2() {
    let t0 = Instant::now();
    let stat = LlrStatistic::new(counterexample_instance(2));
    let search_box = SearchBox::new(dvector![0.0, 0.0], dvector![6.0, 6.0]).unwrap();
    let res = max_quantile(&stat, 0.95, &search_box, 200, 10_000, 17).unwrap();
    let target = stats::chi2_quantile(0.95, 1).unwrap();
    let ok = res.ci.0 <= target && target <= res.ci.1;
    let elapsed = t0.elapsed().as_secs_f64();
    verdict(
        6,
        ok && elapsed < 300.0,
        format!(
            "q = {:.4}, CI [{:.4},{:.4}] vs chi-square(1) quantile {:.4}, argmax ({:.2},{:.2}), {:.1}s",
            res.q, res.ci.0, res.ci.1, target, res.argmax_x[0], res.argmax_x[1], elapsed
        ),
    );
}

/// Criterion 7: on the box-constrained model X = [0,1]^2 the per-value
/// calibrated rule yields strictly shorter intervals than the classical rule
/// (by more than 4 combined standard errors at every truth point) without
/// sacrificing 95% coverage. 5*10^4 replicates, budget 15 min.
#[test]
fn c07_box_model_shorter_and_valid() {
    let t0 = Instant::now();
    let sc = experiments::preset("box").unwrap();
    let rep = experiments::run_coverage(&sc, 11).unwrap();
    let mut ok = true;
    let mut detail = String::new();
    for truth in &sc.truth_points {
        let t: Vec<f64> = truth.iter().copied().collect();
        let osb = find_row(&rep, &t, Method::Osb);
        let mqmu = find_row(&rep, &t, Method::Mqmu);
        let margin = 4.0 * (osb.len_se.powi(2) + mqmu.len_se.powi(2)).sqrt();
        let shorter = osb.mean_len - mqmu.mean_len > margin;
        let valid = mqmu.cov_hi >= 0.95;
        ok &= shorter && valid;
        detail.push_str(&format!(
            "({},{}): lengths {:.3} vs {:.3}, coverage {:.4}; ",
            t[0], t[1], osb.mean_len, mqmu.mean_len, mqmu.coverage
        ));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    detail.push_str(&format!("{elapsed:.1}s"));
    verdict(7, ok && elapsed < 900.0, detail);
}

/// Criterion 8: the constrained least-squares solver agrees with a
/// brute-force grid oracle on 100 random 2D/3D orthant instances within 1e-3,
/// and the closed-form counterexample statistics agree with the generic
/// two-solve route within 1e-6 on 10^4 draws each. Budget: 5 min.
#[test]
fn c08_solver_against_oracles() {
    let t0 = Instant::now();
    let mut rng = substream(41, 1);
    let mut worst_grid = 0.0f64;
    for dim in [2usize, 3] {
        let trials = if dim == 2 { 70 } else { 30 };
        let step = if dim == 2 { 0.004 } else { 0.01 };
        for trial in 0..trials {
            let k = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.5..1.5));
            let mut h = vec![1.0; dim];
            h[dim - 1] = -1.0;
            let inst = ProblemInstance::new(
                k,
                DVector::from_vec(h),
                ConstraintSet::nonneg(dim),
            )
            .unwrap();
            let y = DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0));
            let sol = min_residual(&inst, &y).unwrap();
            let center = sol.x_hat.map(|v| v.max(0.0));
            let grid = GridSpec {
                lower: center.map(|v| (v - 0.3).max(0.0)),
                upper: center.map(|v| v + 0.3),
                step,
            };
            let oracle = brute_force_min(&inst, &y, None, &grid).unwrap();
            let gap = (sol.objective - oracle.objective).abs();
            worst_grid = worst_grid.max(gap);
            assert!(
                gap <= 1e-3 && sol.objective <= oracle.objective + 1e-9,
                "{dim}D trial {trial}: solver {} vs oracle {}",
                sol.objective,
                oracle.objective
            );
        }
    }

    // Closed-form fast paths against the generic two-solve route.
    let mut worst_closed = 0.0f64;
    for dim in [2usize, 3] {
        let inst = counterexample_instance(dim);
        let fast = LlrStatistic::new(inst.clone());
        let slow = LlrStatistic::with_fast_path(inst, FastPath::None);
        // The counterexample geometry always auto-detects its fast path, so
        // the generic route must be forced through the solver-backed model.
        let slow = match slow {
            Ok(s) => s,
            Err(_) => unreachable!("FastPath::None is always permitted"),
        };
        let mu = if dim == 2 { 0.0 } else { -1.0 };
        for _ in 0..10_000 {
            let y = DVector::from_fn(dim, |_, _| rng.random_range(-3.0..3.0));
            let a = fast.evaluate(mu, &y).unwrap().finite().unwrap();
            let b = slow.evaluate(mu, &y).unwrap().finite().unwrap();
            worst_closed = worst_closed.max((a - b).abs());
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    verdict(
        8,
        worst_closed <= 1e-6 && elapsed < 300.0,
        format!(
            "worst grid-oracle gap {worst_grid:.2e} (<= 1e-3), \
             worst closed-form gap {worst_closed:.2e} (<= 1e-6), {elapsed:.1}s"
        ),
    );
}

/// Criterion 9: with no constraints the interval engine reproduces the
/// closed-form Gaussian interval within 1e-6 on 100 random full-column-rank
/// instances, and the statistic's null distribution passes a chi-square(1)
/// KS check at N = 10^5. Budget: 1 min (KS part).
#[test]
fn c09_unconstrained_consistency() {
    let t0 = Instant::now();
    let mut rng = substream(55, 0);
    let mut accepted = 0usize;
    let mut attempts = 0usize;
    let mut worst = 0.0f64;
    while accepted < 100 && attempts < 1000 {
        attempts += 1;
        let m = rng.random_range(2..5usize);
        let p = rng.random_range(1..=m);
        let k = DMatrix::from_fn(m, p, |_, _| rng.random_range(-1.5..1.5));
        if (k.transpose() * &k).cholesky().is_none() {
            continue;
        }
        let h = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0f64));
        if h.amax() < 0.2 {
            continue;
        }
        let inst = ProblemInstance::new(k, h, ConstraintSet::free(p)).unwrap();
        let y = DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
        let closed = interval_unconstrained_closed_form(&inst, &y, 0.05).unwrap();
        if closed.length().unwrap() > 20.0 {
            // Nearly singular design: endpoints in the thousands make the
            // absolute 1e-6 comparison meaningless.
            continue;
        }
        let engine = interval_osb(&inst, &y, 0.05).unwrap();
        worst = worst
            .max((engine.lower - closed.lower).abs())
            .max((engine.upper - closed.upper).abs());
        accepted += 1;
    }

    // Null distribution of the statistic without constraints is chi-square(1).
    let inst = ProblemInstance::new(
        DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.5, -0.5]),
        dvector![1.0, 1.0],
        ConstraintSet::free(2),
    )
    .unwrap();
    let stat = LlrStatistic::new(inst);
    let s = sample_null(&stat, &dvector![0.3, -0.2], 100_000, 19).unwrap();
    let d = stats::ks_statistic(&s.draws, |c| {
        if c <= 0.0 {
            0.0
        } else {
            stats::chi2_cdf(c, 1).unwrap()
        }
    });
    let p_value = stats::ks_pvalue(d, s.n);
    let elapsed = t0.elapsed().as_secs_f64();
    verdict(
        9,
        accepted == 100 && worst <= 1e-6 && p_value > 1e-4 && elapsed < 60.0,
        format!(
            "{accepted}/100 instances, worst endpoint gap {worst:.2e} (<= 1e-6), \
             KS distance {d:.4} with p = {p_value:.3}, {elapsed:.1}s"
        ),
    );
}

/// Criterion 10: the statistic's null mean at x* = (0,...,0,1) grows strictly
/// with dimension for p in {3, 6, 12, 24}, each consecutive gap exceeding 4
/// combined standard errors, so no fixed chi-square reference calibrates the
/// family. n = 10^6 draws per dimension.
#[test]
fn c10_mean_diverges_with_dimension() {
    let t0 = Instant::now();
    let rep = experiments::run_dimension_divergence(&[3, 6, 12, 24], 1_000_000, 13).unwrap();
    let mut ok = rep.diverging;
    let mut detail = String::new();
    for w in rep.rows.windows(2) {
        let margin = 4.0 * (w[0].se.powi(2) + w[1].se.powi(2)).sqrt();
        ok &= w[1].mean - w[0].mean > margin;
    }
    for r in &rep.rows {
        detail.push_str(&format!("p={}: {:.4}+-{:.4}; ", r.p, r.mean, r.se));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    detail.push_str(&format!("{elapsed:.1}s"));
    verdict(10, ok && elapsed < 600.0, detail);
}
