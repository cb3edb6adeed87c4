//! Command-line surface for constrained likelihood-ratio confidence
//! intervals: single-interval construction, coverage studies, maximum-
//! quantile calibration, stochastic-dominance diagnostics, counterexample
//! checks, and per-point quantile curves.
//!
//! Exit codes: 0 success, 1 usage/input error, 2 empty interval or infeasible
//! problem, 3 numerical failure.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde_json::{json, Value};

use strictbounds::experiments::{
    preset, run_counterexample_mean, run_coverage, run_dimension_divergence, run_quantile_curve,
    Method,
};
use strictbounds::llr::LlrStatistic;
use strictbounds::maxquantile::{max_quantile, max_quantile_per_mu, DecisionRule, SearchBox};
use strictbounds::nulldist::{dominance_diagnostic, sample_null, DominanceVerdict};
use strictbounds::rng::substream;
use strictbounds::{
    interval_mq, interval_mqmu, interval_osb, interval_ssb, Error, IntervalResult,
    ProblemInstance,
};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "strictbounds",
    version,
    about = "Confidence intervals for linear functionals under convex constraints"
)]
struct Cli {
    /// RNG seed; defaults to the CI_SEED environment variable, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: logical cores). Output is identical for any
    /// thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Construct one confidence interval from an observation.
    Interval(IntervalArgs),
    /// Monte Carlo coverage/length study over a scenario preset.
    Coverage(CoverageArgs),
    /// Maximum-quantile threshold calibration (scalar or per-mu).
    Maxq(MaxqArgs),
    /// Stochastic-dominance diagnostic of the statistic's null distribution.
    Dominance(DominanceArgs),
    /// Counterexample checks: mean identities or growth with dimension.
    Counterexample(CounterexampleArgs),
    /// Null-quantile curve along the path (t, t, 1) of the 3D instance.
    QuantileCurve(QuantileCurveArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ssb,
    Osb,
    Mq,
    Mqmu,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Args)]
struct IntervalArgs {
    /// Scenario preset supplying the model: oneD, twoD, threeD, threeD95, box.
    #[arg(long, conflicts_with = "model")]
    preset: Option<String>,
    /// Path to a model JSON file ({"K", "h", "constraints"}).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Observation as comma-separated values.
    #[arg(long, conflicts_with = "truth", allow_hyphen_values = true)]
    y: Option<String>,
    /// Simulate the observation from this true parameter (comma-separated).
    #[arg(long, allow_hyphen_values = true)]
    truth: Option<String>,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long)]
    alpha: f64,
    /// Decision-rule JSON file (required for mq / mqmu).
    #[arg(long)]
    rule: Option<PathBuf>,
}

#[derive(Args)]
struct CoverageArgs {
    #[arg(long)]
    preset: String,
    /// Override the preset's replicate count.
    #[arg(long)]
    reps: Option<usize>,
    /// Override the preset's miscoverage level.
    #[arg(long)]
    alpha: Option<f64>,
    /// Override the preset's method list (comma-separated).
    #[arg(long)]
    methods: Option<String>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
}

#[derive(Args)]
struct MaxqArgs {
    #[arg(long, conflicts_with = "model")]
    preset: Option<String>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Confidence level (1 - alpha) of the quantile being maximized.
    #[arg(long)]
    level: f64,
    /// Search-box lower corner, comma-separated (preset default when absent).
    #[arg(long, allow_hyphen_values = true)]
    box_lower: Option<String>,
    /// Search-box upper corner, comma-separated (preset default when absent).
    #[arg(long)]
    box_upper: Option<String>,
    #[arg(long, default_value_t = 120)]
    budget: usize,
    #[arg(long, default_value_t = 10_000)]
    n_per_eval: usize,
    /// Calibrate a per-mu rule instead of the scalar rule.
    #[arg(long)]
    per_mu: bool,
    /// mu grid for --per-mu, comma-separated (preset default when absent).
    #[arg(long, allow_hyphen_values = true)]
    mu_grid: Option<String>,
}

#[derive(Args)]
struct DominanceArgs {
    #[arg(long, conflicts_with = "model")]
    preset: Option<String>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Parameter point whose null distribution is sampled (comma-separated).
    #[arg(long, allow_hyphen_values = true)]
    xstar: String,
    #[arg(long, default_value_t = 1_000_000)]
    n: usize,
    /// Degrees of freedom of the chi-square reference.
    #[arg(long, default_value_t = 1)]
    ref_df: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckArg {
    Mean,
    Divergence,
}

#[derive(Args)]
struct CounterexampleArgs {
    #[arg(long, value_enum)]
    check: CheckArg,
    #[arg(long, default_value_t = 1_000_000)]
    n: usize,
    /// Dimensions for --check divergence (comma-separated).
    #[arg(long, default_value = "3,6,12,24")]
    p_list: String,
}

#[derive(Args)]
struct QuantileCurveArgs {
    #[arg(long)]
    level: f64,
    /// Path parameters, comma-separated; default covers (0, 2.65].
    #[arg(long)]
    t_grid: Option<String>,
    #[arg(long, default_value_t = 20_000)]
    n: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own exit code differs from the contract; keep its
            // message (usage/help text) but always exit 1 on usage errors
            // and 0 on --help/--version.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e.downcast_ref::<Error>() {
                Some(Error::Infeasible(_)) => 2,
                Some(Error::Numerical(_)) => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .ok();
    }
    let seed = cli.seed.unwrap_or_else(|| {
        std::env::var("CI_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or(0)
    });
    let out = cli.output;
    match cli.cmd {
        Cmd::Interval(args) => cmd_interval(args, seed, out),
        Cmd::Coverage(args) => cmd_coverage(args, seed, out),
        Cmd::Maxq(args) => cmd_maxq(args, seed, out),
        Cmd::Dominance(args) => cmd_dominance(args, seed, out),
        Cmd::Counterexample(args) => cmd_counterexample(args, seed, out),
        Cmd::QuantileCurve(args) => cmd_quantile_curve(args, seed, out),
    }
}

fn emit(out: Option<PathBuf>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
        }
    }
    Ok(())
}

fn parse_floats(s: &str) -> anyhow::Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| anyhow::anyhow!(Error::InvalidInput(format!("bad number \"{v}\""))))
        })
        .collect()
}

fn load_model(
    preset_name: &Option<String>,
    model: &Option<PathBuf>,
) -> anyhow::Result<(ProblemInstance, Value)> {
    match (preset_name, model) {
        (Some(name), None) => {
            let sc = preset(name)?;
            Ok((sc.inst, json!({ "preset": name })))
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)?;
            let inst = ProblemInstance::from_json(&text)?;
            Ok((inst, json!({ "model": path.display().to_string() })))
        }
        _ => Err(anyhow::anyhow!(Error::InvalidInput(
            "exactly one of --preset / --model is required".into()
        ))),
    }
}

/// Wraps a result document with the metadata every emission carries.
fn envelope(seed: u64, config: Value, result: Value) -> String {
    let doc = json!({
        "version": VERSION,
        "seed": seed,
        "config": config,
        "result": result,
    });
    let mut text = serde_json::to_string_pretty(&doc).expect("serialization cannot fail");
    text.push('\n');
    text
}

/// Config comment lines prepended to CSV emissions.
fn csv_header(seed: u64, config: &Value) -> String {
    format!("# version: {VERSION}\n# seed: {seed}\n# config: {config}\n")
}

fn cmd_interval(args: IntervalArgs, seed: u64, out: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let (inst, model_cfg) = load_model(&args.preset, &args.model)?;
    let y = match (&args.y, &args.truth) {
        (Some(text), None) => DVector::from_vec(parse_floats(text)?),
        (None, Some(text)) => {
            let x = DVector::from_vec(parse_floats(text)?);
            let mut rng = substream(seed, 0);
            inst.simulate(&x, &mut rng)?
        }
        _ => {
            return Err(anyhow::anyhow!(Error::InvalidInput(
                "exactly one of --y / --truth is required".into()
            )))
        }
    };
    let rule = match &args.rule {
        Some(path) => Some(DecisionRule::from_json(&std::fs::read_to_string(path)?)?),
        None => None,
    };
    let need_rule = || {
        rule.clone().ok_or_else(|| {
            anyhow::anyhow!(Error::InvalidInput(
                "--rule is required for this method".into()
            ))
        })
    };
    let result: IntervalResult = match args.method {
        MethodArg::Ssb => interval_ssb(&inst, &y, args.alpha)?,
        MethodArg::Osb => interval_osb(&inst, &y, args.alpha)?,
        MethodArg::Mq => interval_mq(&inst, &y, args.alpha, &need_rule()?)?,
        MethodArg::Mqmu => interval_mqmu(&inst, &y, args.alpha, &need_rule()?)?,
    };
    let config = json!({
        "subcommand": "interval",
        "source": model_cfg,
        "y": y.iter().copied().collect::<Vec<f64>>(),
        "method": result.method,
        "alpha": args.alpha,
        "rule": args.rule.as_ref().map(|p| p.display().to_string()),
    });
    let empty = result.empty;
    let result_doc: Value = serde_json::from_str(&result.to_json())?;
    emit(out, &envelope(seed, config, result_doc))?;
    Ok(if empty { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn cmd_coverage(args: CoverageArgs, seed: u64, out: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let mut sc = preset(&args.preset)?;
    if let Some(reps) = args.reps {
        sc.reps = reps;
    }
    if let Some(alpha) = args.alpha {
        sc.alpha = alpha;
    }
    if let Some(methods) = &args.methods {
        sc.methods = methods
            .split(',')
            .map(|m| Method::parse(m.trim()))
            .collect::<strictbounds::Result<Vec<_>>>()?;
    }
    let config = json!({
        "subcommand": "coverage",
        "preset": args.preset,
        "reps": sc.reps,
        "alpha": sc.alpha,
        "methods": sc.methods.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
    });
    let report = run_coverage(&sc, seed)?;
    let text = match args.format {
        FormatArg::Csv => format!("{}{}", csv_header(seed, &config), report.to_csv()),
        FormatArg::Json => {
            let rows: Vec<Value> = report
                .rows
                .iter()
                .map(|r| {
                    json!({
                        "truth": r.truth.iter().copied().collect::<Vec<f64>>(),
                        "method": r.method.as_str(),
                        "alpha": r.alpha,
                        "covered": r.covered,
                        "reps": r.reps,
                        "coverage": r.coverage,
                        "cov_lo": r.cov_lo,
                        "cov_hi": r.cov_hi,
                        "mean_len": r.mean_len,
                        "len_se": r.len_se,
                        "empty_count": r.empty_count,
                        "unbounded_count": r.unbounded_count,
                        "seed": r.seed,
                    })
                })
                .collect();
            envelope(seed, config, json!({ "scenario": report.scenario, "rows": rows }))
        }
    };
    emit(out, &text)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_maxq(args: MaxqArgs, seed: u64, out: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let (inst, model_cfg) = load_model(&args.preset, &args.model)?;
    // Preset defaults for box and grid when flags are absent.
    let preset_sc = args.preset.as_ref().map(|n| preset(n)).transpose()?;
    let search_box = match (&args.box_lower, &args.box_upper) {
        (Some(lo), Some(hi)) => SearchBox::new(
            DVector::from_vec(parse_floats(lo)?),
            DVector::from_vec(parse_floats(hi)?),
        )?,
        (None, None) => preset_sc
            .as_ref()
            .and_then(|sc| sc.mq_config.as_ref())
            .map(|c| c.search_box.clone())
            .ok_or_else(|| {
                anyhow::anyhow!(Error::InvalidInput(
                    "--box-lower/--box-upper required (no preset default)".into()
                ))
            })?,
        _ => {
            return Err(anyhow::anyhow!(Error::InvalidInput(
                "--box-lower and --box-upper must be given together".into()
            )))
        }
    };
    let stat = LlrStatistic::new(inst);
    let config = json!({
        "subcommand": "maxq",
        "source": model_cfg,
        "level": args.level,
        "box_lower": search_box.lower.iter().copied().collect::<Vec<f64>>(),
        "box_upper": search_box.upper.iter().copied().collect::<Vec<f64>>(),
        "budget": args.budget,
        "n_per_eval": args.n_per_eval,
        "per_mu": args.per_mu,
    });
    let result = if args.per_mu {
        let mu_grid = match &args.mu_grid {
            Some(text) => parse_floats(text)?,
            None => match preset_sc.as_ref().and_then(|sc| sc.mqmu_source.as_ref()) {
                Some(strictbounds::experiments::MqMuSource::Search { mu_grid, .. }) => {
                    mu_grid.clone()
                }
                _ => {
                    return Err(anyhow::anyhow!(Error::InvalidInput(
                        "--mu-grid required (no preset default)".into()
                    )))
                }
            },
        };
        let (rule, dropped) = max_quantile_per_mu(
            &stat,
            args.level,
            &mu_grid,
            &search_box,
            args.budget,
            args.n_per_eval,
            seed,
        )?;
        json!({
            "rule": serde_json::from_str::<Value>(&rule.to_json())?,
            "dropped_mu": dropped,
        })
    } else {
        let res = max_quantile(
            &stat,
            args.level,
            &search_box,
            args.budget,
            args.n_per_eval,
            seed,
        )?;
        let rule = DecisionRule::from_max_quantile(&res, "scalar max-quantile search via CLI");
        json!({
            "q": res.q,
            "ci": [res.ci.0, res.ci.1],
            "argmax_x": res.argmax_x.iter().copied().collect::<Vec<f64>>(),
            "n_evaluations": res.evaluations.len(),
            "rule": serde_json::from_str::<Value>(&rule.to_json())?,
        })
    };
    emit(out, &envelope(seed, config, result))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_dominance(args: DominanceArgs, seed: u64, out: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let (inst, model_cfg) = load_model(&args.preset, &args.model)?;
    let x = DVector::from_vec(parse_floats(&args.xstar)?);
    let stat = LlrStatistic::new(inst);
    let sample = sample_null(&stat, &x, args.n, seed)?;
    let report = dominance_diagnostic(&sample, args.ref_df)?;
    let verdict = match report.verdict {
        DominanceVerdict::Dominated => "Dominated",
        DominanceVerdict::NotDominated => "NotDominated",
    };
    let config = json!({
        "subcommand": "dominance",
        "source": model_cfg,
        "xstar": x.iter().copied().collect::<Vec<f64>>(),
        "n": args.n,
        "ref_df": args.ref_df,
    });
    let text = format!(
        "{}# verdict: {}\n# violations: {}\n{}",
        csv_header(seed, &config),
        verdict,
        report.violations.len(),
        report.to_csv()
    );
    emit(out, &text)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_counterexample(
    args: CounterexampleArgs,
    seed: u64,
    out: Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    match args.check {
        CheckArg::Mean => {
            let report = run_counterexample_mean(args.n, seed)?;
            let config = json!({
                "subcommand": "counterexample",
                "check": "mean",
                "n": args.n,
            });
            let result = json!({
                "slice_mean": report.slice_mean,
                "slice_se": report.slice_se,
                "orthant_mean": report.orthant_mean,
                "orthant_se": report.orthant_se,
                "lambda_mean": report.lambda_mean,
                "lambda_se": report.lambda_se,
                "exceeds_chi2_mean": report.exceeds_chi2_mean,
                "targets": { "slice": 13.0 / 6.0, "orthant": 1.0753, "lambda": 1.0914 },
            });
            emit(out, &envelope(seed, config, result))?;
        }
        CheckArg::Divergence => {
            let p_list: Vec<usize> = args
                .p_list
                .split(',')
                .map(|v| {
                    v.trim().parse::<usize>().map_err(|_| {
                        anyhow::anyhow!(Error::InvalidInput(format!("bad dimension \"{v}\"")))
                    })
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let report = run_dimension_divergence(&p_list, args.n, seed)?;
            let config = json!({
                "subcommand": "counterexample",
                "check": "divergence",
                "n": args.n,
                "p_list": p_list,
            });
            let text = format!(
                "{}# diverging: {}\n{}",
                csv_header(seed, &config),
                report.diverging,
                report.to_csv()
            );
            emit(out, &text)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_quantile_curve(
    args: QuantileCurveArgs,
    seed: u64,
    out: Option<PathBuf>,
) -> anyhow::Result<ExitCode> {
    let t_grid = match &args.t_grid {
        Some(text) => parse_floats(text)?,
        None => (0..=13).map(|i| 0.05 + 0.2 * i as f64).collect(),
    };
    let report = run_quantile_curve(args.level, &t_grid, args.n, seed)?;
    let config = json!({
        "subcommand": "quantile-curve",
        "level": args.level,
        "t_grid": t_grid,
        "n": args.n,
    });
    let text = format!("{}{}", csv_header(seed, &config), report.to_csv());
    emit(out, &text)?;
    Ok(ExitCode::SUCCESS)
}
