//! Command-line front end. Indices are 0-based in files, flags and reports.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::baselines::{Metric, StrategySpec};
use crate::bench::{gamma_sweep, run_experiment, summary_csv, sweep_csv, BenchReport, ExperimentConfig, StrategySummary};
use crate::error::Error;
use crate::objectives::{
    gamma_tilde, kernel_logdet, logdet_surrogate, validate_subset, ObjectiveKind, ObjectiveSpec, SubsetEvaluator,
    DEFAULT_GAMMA,
};
use crate::oracle::{binomial, exhaustive_eval, monte_carlo_eval, OracleReport, DEFAULT_EXHAUSTIVE_CAP};
use crate::selector::SelectionResult;
use crate::tokenio::{load_matrix, normalize_unit_variance, MatrixFormat, TokenMatrix, DEFAULT_EPSILON};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CAP: i32 = 4;

const ABOUT: &str = "Subset selection for token matrices by optimal-transport alignment.\n\n\
Rows are tokens. All indices (files, flags, reports) are 0-based.";

#[derive(Debug, Parser)]
#[command(name = "otprune", version, about = ABOUT, long_about = ABOUT)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Matrix file format. Guessed from the extension when omitted (.otp1 or .bin is binary).
    #[arg(long, global = true, value_enum)]
    pub format: Option<FormatArg>,

    /// Rescale each column to unit second moment before use. Default: on.
    #[arg(long, global = true, value_enum)]
    pub normalize: Option<OnOff>,

    /// Seed for random strategies and Monte Carlo sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Write the full JSON report to this path. For bench, a CSV summary is
    /// written next to it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Print the JSON report on stdout.
    #[arg(long, global = true, conflicts_with = "csv")]
    pub json: bool,

    /// Print the CSV summary on stdout (bench only).
    #[arg(long, global = true)]
    pub csv: bool,

    /// Worker threads. Output does not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Record zero wall-clock times so bench reports are reproducible byte for byte.
    #[arg(long, global = true)]
    pub no_timings: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Otp1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Otprune,
    Divprune,
    Dpp,
    Random,
    FirstK,
    LastK,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    W2,
    TraceF,
    Logdet,
    KernelLogdet,
}

impl ObjectiveArg {
    pub fn kind(self) -> ObjectiveKind {
        match self {
            ObjectiveArg::W2 => ObjectiveKind::Wasserstein2Sq,
            ObjectiveArg::TraceF => ObjectiveKind::TraceF,
            ObjectiveArg::Logdet => ObjectiveKind::LogdetSurrogate,
            ObjectiveArg::KernelLogdet => ObjectiveKind::KernelLogdet,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Exhaustive,
    Mc,
}

#[derive(Debug, Args)]
pub struct MethodArgs {
    /// Selection strategy.
    #[arg(long, value_enum, default_value = "otprune")]
    pub method: MethodArg,

    /// Log-det scale for otprune and the log-det objectives.
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,

    /// Distance used by divprune.
    #[arg(long, value_enum, default_value = "euclidean")]
    pub metric: MetricArg,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select k rows and print their 0-based indices.
    Select {
        /// Matrix file: headerless CSV or OTP1.
        input: PathBuf,
        /// Number of rows to keep, 1 <= k <= m.
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        method: MethodArgs,
    },
    /// Evaluate an objective on a given subset.
    Eval {
        /// Matrix file: headerless CSV or OTP1.
        input: PathBuf,
        /// Comma-separated 0-based row indices, e.g. "0,4,7".
        #[arg(long, allow_hyphen_values = true)]
        subset: String,
        #[arg(long, value_enum)]
        objective: ObjectiveArg,
        /// Log-det scale for logdet and kernel-logdet.
        #[arg(long, default_value_t = DEFAULT_GAMMA)]
        gamma: f64,
    },
    /// Rank a strategy's subset against all (or sampled) k-subsets.
    Oracle {
        /// Matrix file: headerless CSV or OTP1.
        input: PathBuf,
        /// Subset size, 1 <= k <= m.
        #[arg(long)]
        k: usize,
        /// Ranking objective; w2 is not accepted.
        #[arg(long, value_enum, default_value = "trace-f")]
        objective: ObjectiveArg,
        /// Enumerate every k-subset, or sample them (needs --seed).
        #[arg(long, value_enum, default_value = "exhaustive")]
        mode: ModeArg,
        /// Monte Carlo sample count.
        #[arg(long, default_value_t = 100_000)]
        samples: u64,
        /// Largest number of subsets exhaustive mode may enumerate.
        #[arg(long, default_value_t = DEFAULT_EXHAUSTIVE_CAP)]
        cap: u64,
        #[command(flatten)]
        method: MethodArgs,
    },
    /// Run a benchmark described by a JSON config.
    Bench {
        /// JSON experiment config.
        config: PathBuf,
    },
}

/// An error carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::CapExceeded { .. } => EXIT_CAP,
        Error::Config { .. }
        | Error::KOutOfRange { .. }
        | Error::InvalidGamma(_)
        | Error::MissingSeed
        | Error::UnsupportedObjective(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        let message = match &err {
            Error::CapExceeded { .. } => format!("{err}; rerun with --mode mc"),
            Error::MissingSeed => format!("{err}; pass --seed"),
            _ => err.to_string(),
        };
        Self {
            code: exit_code(&err),
            message,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Formats like C's `%.12g`.
pub fn fmt_g(x: f64) -> String {
    const DIGITS: i32 = 12;
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent");
    if (-4..DIGITS).contains(&exp) {
        let fixed = format!("{:.*}", (DIGITS - 1 - exp) as usize, x);
        trim_zeros(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim_zeros(mantissa), sign, exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn join_indices(xs: &[usize]) -> String {
    xs.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn load_input(path: &Path, global: &GlobalArgs) -> CliResult<TokenMatrix> {
    let format = match global.format {
        Some(FormatArg::Csv) => MatrixFormat::Csv,
        Some(FormatArg::Otp1) => MatrixFormat::Otp1,
        None => MatrixFormat::from_path(path),
    };
    let v = load_matrix(path, format).map_err(|e| match e {
        Error::Io { .. } => CliError::from(e),
        other => CliError {
            code: exit_code(&other),
            message: format!("{}: {other}", path.display()),
        },
    })?;
    Ok(if global.normalize != Some(OnOff::Off) {
        normalize_unit_variance(&v, DEFAULT_EPSILON).0
    } else {
        v
    })
}

fn check_k_flag(k: usize, m: usize) -> CliResult<()> {
    if k == 0 || k > m {
        return Err(CliError::usage(format!("--k must satisfy 1 <= k <= m (m = {m}), got {k}")));
    }
    Ok(())
}

fn strategy(args: &MethodArgs, seed: Option<u64>) -> StrategySpec {
    match args.method {
        MethodArg::Otprune => StrategySpec::Otprune {
            gamma: Some(args.gamma),
        },
        MethodArg::Divprune => StrategySpec::Divprune {
            metric: match args.metric {
                MetricArg::Euclidean => Metric::Euclidean,
                MetricArg::Cosine => Metric::Cosine,
            },
        },
        MethodArg::Dpp => StrategySpec::Dpp,
        MethodArg::Random => StrategySpec::Random { seed },
        MethodArg::FirstK => StrategySpec::FirstK,
        MethodArg::LastK => StrategySpec::LastK,
        MethodArg::Uniform => StrategySpec::UniformIndex,
    }
}

fn objective_label(method: MethodArg) -> Option<&'static str> {
    match method {
        MethodArg::Otprune => Some("kernel_logdet"),
        MethodArg::Divprune => Some("min_pairwise_distance"),
        MethodArg::Dpp => Some("dpp_logdet"),
        _ => None,
    }
}

#[derive(Debug, Serialize)]
struct SelectReport {
    method: String,
    m: usize,
    k: usize,
    normalize: bool,
    /// Ascending.
    indices: Vec<usize>,
    selection_order: Vec<usize>,
    gains: Vec<f64>,
    objective_kind: Option<&'static str>,
    objective: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma_tilde: Option<f64>,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    objective: &'static str,
    subset: Vec<usize>,
    value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma_tilde: Option<f64>,
}

#[derive(Debug, Serialize)]
struct OracleOutput {
    method: String,
    m: usize,
    k: usize,
    selected: Vec<usize>,
    report: OracleReport,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|source| {
        CliError::from(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn emit<T: Serialize>(out: &mut dyn Write, global: &GlobalArgs, report: &T, human: &str) -> CliResult<()> {
    if let Some(path) = &global.out {
        write_json(path, report)?;
    }
    let text = if global.json {
        serde_json::to_string_pretty(report).expect("report serializes") + "\n"
    } else {
        human.to_string()
    };
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::usage(format!("cannot write output: {e}")))
}

fn reject_csv(global: &GlobalArgs) -> CliResult<()> {
    if global.csv {
        return Err(CliError::usage("--csv applies to the bench command only"));
    }
    Ok(())
}

fn cmd_select(global: &GlobalArgs, input: &Path, k: usize, args: &MethodArgs, out: &mut dyn Write) -> CliResult<()> {
    reject_csv(global)?;
    let v = load_input(input, global)?;
    check_k_flag(k, v.rows())?;
    let sel: SelectionResult = strategy(args, global.seed).select(&v, k, Some(args.gamma), global.seed)?;
    let otprune = args.method == MethodArg::Otprune;
    let report = SelectReport {
        method: strategy(args, global.seed).name().to_string(),
        m: v.rows(),
        k,
        normalize: global.normalize != Some(OnOff::Off),
        indices: sel.sorted_indices(),
        selection_order: sel.indices.clone(),
        gains: sel.gains.clone(),
        objective_kind: objective_label(args.method),
        objective: sel.objective,
        gamma: otprune.then_some(args.gamma),
        gamma_tilde: sel.gamma_tilde,
    };
    let mut human = format!("indices: {}\n", join_indices(&report.indices));
    if objective_label(args.method).is_some() {
        human.push_str(&format!("order: {}\n", join_indices(&report.selection_order)));
        human.push_str(&format!(
            "objective ({}): {}\n",
            report.objective_kind.unwrap_or_default(),
            fmt_g(report.objective)
        ));
    }
    emit(out, global, &report, &human)
}

fn parse_subset(text: &str) -> CliResult<Vec<usize>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<i64>()
                .map_err(|_| CliError::usage(format!("--subset: `{s}` is not an integer")))
                .and_then(|i| {
                    usize::try_from(i).map_err(|_| CliError {
                        code: EXIT_DATA,
                        message: format!("invalid subset: index {i} is negative"),
                    })
                })
        })
        .collect()
}

fn cmd_eval(
    global: &GlobalArgs,
    input: &Path,
    subset: &str,
    objective: ObjectiveArg,
    gamma: f64,
    out: &mut dyn Write,
) -> CliResult<()> {
    reject_csv(global)?;
    let v = load_input(input, global)?;
    let subset = parse_subset(subset)?;
    validate_subset(v.rows(), &subset)?;
    let mut report = EvalReport {
        objective: objective.kind().as_str(),
        subset: subset.clone(),
        value: 0.0,
        gamma: None,
        gamma_tilde: None,
    };
    report.value = match objective {
        ObjectiveArg::W2 => SubsetEvaluator::new(&v, ObjectiveSpec::trace_f())?.wasserstein2(&subset),
        ObjectiveArg::TraceF => crate::objectives::trace_objective(&v, &subset)?,
        ObjectiveArg::Logdet => {
            report.gamma = Some(gamma);
            logdet_surrogate(&v, &subset, gamma)?
        }
        ObjectiveArg::KernelLogdet => {
            crate::objectives::check_gamma(gamma)?;
            report.gamma = Some(gamma);
            if subset.is_empty() {
                0.0
            } else {
                let gt = gamma_tilde(gamma, v.rows(), subset.len());
                report.gamma_tilde = Some(gt);
                kernel_logdet(&v, &subset, gt)?
            }
        }
    };
    let human = format!("{}\n", fmt_g(report.value));
    emit(out, global, &report, &human)
}

#[allow(clippy::too_many_arguments)]
fn cmd_oracle(
    global: &GlobalArgs,
    input: &Path,
    k: usize,
    objective: ObjectiveArg,
    mode: ModeArg,
    samples: u64,
    cap: u64,
    args: &MethodArgs,
    out: &mut dyn Write,
) -> CliResult<()> {
    reject_csv(global)?;
    if objective == ObjectiveArg::W2 {
        return Err(CliError::usage(
            "--objective w2 cannot rank subsets; use trace-f, logdet or kernel-logdet",
        ));
    }
    let v = load_input(input, global)?;
    let m = v.rows();
    check_k_flag(k, m)?;
    let spec = ObjectiveSpec {
        kind: objective.kind(),
        gamma: Some(args.gamma),
    };
    let strat = strategy(args, global.seed);
    let sel = strat.select(&v, k, Some(args.gamma), global.seed)?;
    let subset = sel.sorted_indices();
    let report = match mode {
        ModeArg::Exhaustive => {
            let count = binomial(m, k);
            eprintln!("exhaustive: C({m}, {k}) = {count} subsets to evaluate");
            exhaustive_eval(&v, k, spec, &subset, cap)?
        }
        ModeArg::Mc => {
            let seed = global
                .seed
                .ok_or_else(|| CliError::usage("--mode mc requires --seed"))?;
            monte_carlo_eval(&v, k, spec, &subset, samples, seed)?
        }
    };
    let output = OracleOutput {
        method: strat.name().to_string(),
        m,
        k,
        selected: subset,
        report,
    };
    let r = &output.report;
    let human = format!(
        "method: {}\nselected: {}\nobjective: {}\nevaluated: {}\nmethod_value: {}\nbest_value: {}\nbest_subset: {}\nmean_value: {}\nwin_rate: {}\noptimality_ratio: {}\n",
        output.method,
        join_indices(&output.selected),
        r.objective_kind.as_str(),
        r.n_evaluated,
        fmt_g(r.method_value),
        fmt_g(r.best_value),
        join_indices(&r.best_subset),
        fmt_g(r.mean_value),
        fmt_g(r.win_rate),
        fmt_g(r.optimality_ratio),
    );
    emit(out, global, &output, &human)
}

fn summary_table(summaries: &[StrategySummary]) -> String {
    let mut s = format!(
        "{:<14} {:>16} {:>16} {:>16} {:>16} {:>14}\n",
        "strategy", "win_rate", "win_rate_std", "opt_ratio", "opt_ratio_std", "wall_ms"
    );
    for r in summaries {
        s.push_str(&format!(
            "{:<14} {:>16} {:>16} {:>16} {:>16} {:>14}\n",
            r.strategy,
            fmt_g(r.mean_win_rate),
            fmt_g(r.std_win_rate),
            fmt_g(r.mean_opt_ratio),
            fmt_g(r.std_opt_ratio),
            fmt_g(r.mean_wall_ms)
        ));
    }
    s
}

fn skipped_note(reports: &[BenchReport]) -> String {
    let skipped: usize = reports.iter().flat_map(|r| &r.trials).filter(|t| t.skipped).count();
    if skipped == 0 {
        String::new()
    } else {
        format!("{skipped} trial(s) skipped: exhaustive cap exceeded\n")
    }
}

fn cmd_bench(global: &GlobalArgs, path: &Path, out: &mut dyn Write) -> CliResult<()> {
    let text = std::fs::read_to_string(path).map_err(|source| {
        CliError::usage(
            Error::Io {
                path: path.to_path_buf(),
                source,
            }
            .to_string(),
        )
    })?;
    let mut config = ExperimentConfig::from_json(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    if global.no_timings {
        config.timings = false;
    }
    if let Some(seed) = global.seed {
        config.base_seed = seed;
    }
    if let Some(n) = global.normalize {
        config.normalize = n == OnOff::On;
    }
    let (json, csv, human) = match config.gammas.clone() {
        Some(gammas) => {
            let sweep = gamma_sweep(&config, &gammas)?;
            let mut human = String::new();
            for r in &sweep.reports {
                human.push_str(&format!("gamma = {}\n", fmt_g(r.gamma)));
                human.push_str(&summary_table(&r.summaries));
            }
            human.push_str(&skipped_note(&sweep.reports));
            (serde_json::to_string_pretty(&sweep), sweep_csv(&sweep), human)
        }
        None => {
            let report = run_experiment(&config)?;
            let mut human = summary_table(&report.summaries);
            if let Some(rho) = report.w2_coverage_spearman {
                human.push_str(&format!("spearman(W2, coverage) = {}\n", fmt_g(rho)));
            }
            human.push_str(&skipped_note(std::slice::from_ref(&report)));
            (serde_json::to_string_pretty(&report), summary_csv(&report), human)
        }
    };
    let json = json.expect("report serializes") + "\n";
    if let Some(p) = &global.out {
        let write = |p: &Path, s: &str| {
            std::fs::write(p, s).map_err(|source| {
                CliError::from(Error::Io {
                    path: p.to_path_buf(),
                    source,
                })
            })
        };
        write(p, &json)?;
        write(&p.with_extension("csv"), &csv)?;
    }
    let text = if global.json {
        json
    } else if global.csv {
        csv
    } else {
        human
    };
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::usage(format!("cannot write output: {e}")))
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Select { input, k, method } => cmd_select(g, input, *k, method, out),
        Command::Eval {
            input,
            subset,
            objective,
            gamma,
        } => cmd_eval(g, input, subset, *objective, *gamma, out),
        Command::Oracle {
            input,
            k,
            objective,
            mode,
            samples,
            cap,
            method,
        } => cmd_oracle(g, input, *k, *objective, *mode, *samples, *cap, method, out),
        Command::Bench { config } => cmd_bench(g, config, out),
    }
}

/// Runs a parsed invocation, writing the primary output to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.global.threads {
        Some(0) => Err(CliError::usage("--threads must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::usage(format!("cannot start thread pool: {e}")))?;
            let mut buf = Vec::new();
            pool.install(|| dispatch(cli, &mut buf))?;
            out.write_all(&buf)
                .map_err(|e| CliError::usage(format!("cannot write output: {e}")))
        }
        None => dispatch(cli, out),
    }
}
