//! Command-line front end: parses inputs, runs a subcommand, and writes a
//! versioned JSON report.

pub mod input;
pub mod report;
pub mod scaling;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use stratperm::bounds::{kolmogorov_from_wasserstein, rate, wasserstein_bound, RateMethod};
use stratperm::designs::{
    build_design_matrix, design_variance, estimate, rate_design, simulate_post_stratified,
    DEFAULT_RETRY_CAP,
};
use stratperm::inference::{iv_confidence_interval, iv_test, Alternative, TestMethod};
use stratperm::matrix::MatrixJson;
use stratperm::montecarlo::{
    ecdf_kolmogorov_vs_normal, empirical_wasserstein_vs_normal, simulate_statistic, with_workers,
    EntryDistribution,
};
use stratperm::oracle::{
    enumerate_distribution, exact_distance, verify_pi_dagger, verify_stein_pair, verify_zero_bias,
    DistanceKind, IdentityReport,
};
use stratperm::rng::DEFAULT_SEED;
use stratperm::{moments, StratifiedMatrix};

use report::{Envelope, Outcome};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_REPS: usize = 10_000;
pub const DEFAULT_BUDGET: u64 = 10_000_000;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flag, unreadable file, or other usage problem.
    #[error("{0}")]
    Input(String),
    /// Malformed JSON or CSV, with its location.
    #[error("{0}")]
    Parse(String),
    /// Well-formed input that violates a domain invariant.
    #[error("{0}")]
    Invariant(String),
    #[error("{0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) | CliError::Parse(_) | CliError::Invariant(_) => 1,
            CliError::Verification(_) => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Input(_) => "input_error",
            CliError::Parse(_) => "parse_error",
            CliError::Invariant(_) => "invariant_violation",
            CliError::Verification(_) => "verification_failure",
        }
    }
}

impl From<stratperm::Error> for CliError {
    fn from(e: stratperm::Error) -> Self {
        CliError::Invariant(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "stratperm",
    version,
    about = "Normal approximation diagnostics for stratified permutation statistics"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_seed(s: &str) -> Result<u64, String> {
    let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    parsed.map_err(|e| format!("invalid seed '{s}': {e}"))
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Master seed, decimal or 0x-prefixed hex [default: 0xDEC0DE].
    #[arg(long, global = true, value_parser = parse_seed)]
    pub seed: Option<u64>,
    /// Monte Carlo replications [default: 10000].
    #[arg(long, global = true)]
    pub reps: Option<usize>,
    /// Worker threads [default: available parallelism].
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Report path [default: stdout].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Cap on enumerated outcomes [default: 10000000].
    #[arg(long, global = true)]
    pub budget: Option<u64>,
    /// JSON file with defaults for the flags above; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    Exact,
    #[value(alias = "monte-carlo", alias = "monte_carlo")]
    Mc,
    #[value(alias = "normal-approx", alias = "normal_approx")]
    Normal,
}

impl From<MethodArg> for TestMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Exact => TestMethod::Exact,
            MethodArg::Mc => TestMethod::MonteCarlo,
            MethodArg::Normal => TestMethod::NormalApprox,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlternativeArg {
    Greater,
    Less,
    #[value(alias = "two_sided")]
    TwoSided,
}

impl From<AlternativeArg> for Alternative {
    fn from(a: AlternativeArg) -> Self {
        match a {
            AlternativeArg::Greater => Alternative::Greater,
            AlternativeArg::Less => Alternative::Less,
            AlternativeArg::TwoSided => Alternative::TwoSided,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistArg {
    Normal,
    Uniform,
    Exponential,
}

impl From<DistArg> for EntryDistribution {
    fn from(d: DistArg) -> Self {
        match d {
            DistArg::Normal => EntryDistribution::Normal,
            DistArg::Uniform => EntryDistribution::Uniform,
            DistArg::Exponential => EntryDistribution::Exponential,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Moments and every applicable rate quantity for a matrix or design.
    Bound {
        /// Matrix JSON, or design CSV with --design.
        input: PathBuf,
        /// Read the input as a design CSV.
        #[arg(long)]
        design: bool,
        /// Constant used for the convenience bound of uncertified rates.
        #[arg(long)]
        constant: Option<f64>,
    },
    /// Monte Carlo law of the standardized statistic against N(0, 1).
    Simulate {
        input: PathBuf,
        /// Write the sorted draws as a one-column CSV.
        #[arg(long)]
        dump_draws: Option<PathBuf>,
    },
    /// Exhaustive verification of the coupling identities.
    Oracle { input: PathBuf },
    /// Compile a design CSV and report variance, rate, and estimate.
    Design { input: PathBuf },
    /// Post-stratified sampling or experiment by rejection sampling.
    Poststrat {
        input: PathBuf,
        /// Global number of sampled or treated units.
        #[arg(long)]
        n1: usize,
    },
    /// Stratified permutation or instrumental-variable test.
    Test {
        input: PathBuf,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long, value_enum, default_value = "two-sided")]
        alternative: AlternativeArg,
        /// Hypothesized effect; scores become y - beta0 * d.
        #[arg(long, allow_hyphen_values = true)]
        beta0: Option<f64>,
        /// Invert two-sided tests over --grid into a confidence set.
        #[arg(long)]
        invert: bool,
        #[arg(long)]
        alpha: Option<f64>,
        /// `lo:hi:step` or a comma-separated list.
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
    },
    /// Convergence-order table for random matrix families.
    Scaling {
        /// Stratum counts.
        #[arg(long, value_delimiter = ',', default_value = "1,4,16")]
        ks: Vec<usize>,
        /// Total sizes; each must be a multiple of every K.
        #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
        ns: Vec<usize>,
        #[arg(long, value_enum, default_value = "normal")]
        dist: DistArg,
    },
}

/// Optional defaults read from `--config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub reps: Option<usize>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub budget: Option<u64>,
    pub method: Option<MethodArg>,
    pub alpha: Option<f64>,
    pub grid: Option<String>,
}

/// Flags merged over the config file over built-in defaults.
#[derive(Debug, Clone)]
pub struct Settings {
    pub seed: u64,
    pub reps: usize,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub budget: u128,
    pub config: RunConfig,
}

impl Settings {
    pub fn resolve(common: &CommonArgs) -> CliResult<Self> {
        let config = match &common.config {
            Some(path) => {
                let text = read_file(path)?;
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        let reps = common.reps.or(config.reps).unwrap_or(DEFAULT_REPS);
        if reps == 0 {
            return Err(CliError::Input("reps must be at least 1".into()));
        }
        Ok(Self {
            seed: common.seed.or(config.seed).unwrap_or(DEFAULT_SEED),
            reps,
            workers: common.workers.or(config.workers),
            out: common.out.clone().or(config.out.clone()),
            budget: common.budget.or(config.budget).unwrap_or(DEFAULT_BUDGET) as u128,
            config,
        })
    }
}

pub fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn read_matrix(path: &Path) -> CliResult<StratifiedMatrix> {
    let text = read_file(path)?;
    serde_json::from_str(&text).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => {
            CliError::Invariant(format!("{}: {e}", path.display()))
        }
        _ => CliError::Parse(format!("{}: {e}", path.display())),
    })
}

/// Result of a run: the serialized report and whether verification failed.
pub struct RunOutput {
    pub json: String,
    pub failure: Option<String>,
    pub warnings: Vec<String>,
}

/// Parses arguments, runs, writes the report, and returns the exit code.
/// Errors go to stderr as JSON.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            emit_error("input_error", &e.to_string());
            return 1;
        }
    };
    let settings = match Settings::resolve(&cli.common) {
        Ok(s) => s,
        Err(e) => {
            emit_error(e.kind(), &e.to_string());
            return e.exit_code();
        }
    };
    let out = settings.out.clone();
    let result = with_workers(settings.workers, || run(&cli.command, &settings));
    match result {
        Ok(output) => {
            for w in &output.warnings {
                eprintln!("{}", serde_json::json!({ "warning": w }));
            }
            if let Err(e) = write_report(out.as_deref(), &output.json) {
                emit_error(e.kind(), &e.to_string());
                return e.exit_code();
            }
            match output.failure {
                Some(msg) => {
                    emit_error("verification_failure", &msg);
                    2
                }
                None => 0,
            }
        }
        Err(e) => {
            emit_error(e.kind(), &e.to_string());
            e.exit_code()
        }
    }
}

fn emit_error(kind: &str, message: &str) {
    eprintln!(
        "{}",
        serde_json::json!({ "error": kind, "message": message.trim_end() })
    );
}

fn write_report(out: Option<&Path>, json: &str) -> CliResult<()> {
    match out {
        Some(path) => std::fs::write(path, json)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display()))),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn finish<T: Serialize>(
    command: &'static str,
    settings: &Settings,
    randomized: bool,
    warnings: Vec<String>,
    body: T,
) -> CliResult<RunOutput> {
    let env = Envelope {
        schema_version: SCHEMA_VERSION,
        command,
        seed: randomized.then_some(settings.seed),
        reps: randomized.then_some(settings.reps),
        warnings: warnings.clone(),
        report: body,
    };
    let mut json =
        serde_json::to_string_pretty(&env).map_err(|e| CliError::Input(e.to_string()))?;
    json.push('\n');
    Ok(RunOutput {
        json,
        failure: None,
        warnings,
    })
}

pub fn run(command: &Command, settings: &Settings) -> CliResult<RunOutput> {
    match command {
        Command::Bound {
            input,
            design,
            constant,
        } => run_bound(input, *design, *constant, settings),
        Command::Simulate { input, dump_draws } => {
            run_simulate(input, dump_draws.as_deref(), settings)
        }
        Command::Oracle { input } => run_oracle(input, settings),
        Command::Design { input } => run_design(input, settings),
        Command::Poststrat { input, n1 } => {
            let parsed = input::read_poststrat_csv(input, *n1)?;
            let report = simulate_post_stratified(
                &parsed.spec,
                &parsed.population,
                settings.reps,
                settings.seed,
                DEFAULT_RETRY_CAP,
            )?;
            finish("poststrat", settings, true, parsed.warnings, report)
        }
        Command::Test {
            input,
            method,
            alternative,
            beta0,
            invert,
            alpha,
            grid,
        } => run_test(
            input,
            method
                .or(settings.config.method)
                .unwrap_or(MethodArg::Exact),
            *alternative,
            *beta0,
            *invert,
            alpha.or(settings.config.alpha).unwrap_or(DEFAULT_ALPHA),
            grid.clone().or(settings.config.grid.clone()),
            settings,
        ),
        Command::Scaling { ks, ns, dist } => {
            let rows =
                scaling::scaling_table(ks, ns, (*dist).into(), settings.reps, settings.seed)?;
            finish(
                "scaling",
                settings,
                true,
                Vec::new(),
                scaling::ScalingReport { rows },
            )
        }
    }
}

#[derive(Serialize)]
struct BoundBody {
    moments: stratperm::MomentReport,
    stratified: Outcome<stratperm::BoundReport>,
    independent: Outcome<stratperm::BoundReport>,
    wasserstein_combine: Outcome<stratperm::BoundReport>,
    columnwise: Outcome<stratperm::BoundReport>,
    wasserstein: Outcome<stratperm::BoundReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    design: Option<Outcome<stratperm::BoundReport>>,
}

fn run_bound(
    input: &Path,
    design: bool,
    constant: Option<f64>,
    settings: &Settings,
) -> CliResult<RunOutput> {
    if let Some(c) = constant {
        if !(c.is_finite() && c > 0.0) {
            return Err(CliError::Input(format!(
                "constant must be positive, got {c}"
            )));
        }
    }
    let (matrix, design_report, warnings) = if design {
        let parsed = input::read_design_csv(input)?;
        let m = build_design_matrix(&parsed.design);
        (m, Some(rate_design(&parsed.design).into()), parsed.warnings)
    } else {
        (read_matrix(input)?, None, Vec::new())
    };
    let with_c = |r: stratperm::Result<stratperm::BoundReport>| -> Outcome<stratperm::BoundReport> {
        match constant {
            Some(c) => r.map(|b| b.with_constant(c)).into(),
            None => r.into(),
        }
    };
    let design_report =
        design_report.map(|o: Outcome<stratperm::BoundReport>| match (o, constant) {
            (Outcome::Ok(b), Some(c)) => Outcome::Ok(b.with_constant(c)),
            (o, _) => o,
        });
    let body = BoundBody {
        moments: moments(&matrix),
        stratified: with_c(rate(&matrix, RateMethod::Stratified)),
        independent: with_c(rate(&matrix, RateMethod::Independent)),
        wasserstein_combine: with_c(rate(&matrix, RateMethod::WassersteinCombine)),
        columnwise: with_c(rate(&matrix, RateMethod::Columnwise)),
        wasserstein: wasserstein_bound(&matrix).into(),
        design: design_report,
    };
    finish("bound", settings, false, warnings, body)
}

#[derive(Serialize)]
struct SimulateBody {
    count: usize,
    empirical_mean: f64,
    empirical_variance: f64,
    kolmogorov: f64,
    wasserstein: f64,
    wasserstein_standard_error: Option<f64>,
    kolmogorov_from_wasserstein: f64,
    wasserstein_bound: stratperm::BoundReport,
    within_wasserstein_bound: bool,
}

fn run_simulate(input: &Path, dump: Option<&Path>, settings: &Settings) -> CliResult<RunOutput> {
    let matrix = read_matrix(input)?;
    let summary = simulate_statistic(&matrix, settings.reps, settings.seed)?;
    let bound = wasserstein_bound(&matrix)?;
    let dw = empirical_wasserstein_vs_normal(&summary);
    let se = summary.wasserstein_standard_error.unwrap_or(0.0);
    if let Some(path) = dump {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let io = |e: csv::Error| CliError::Input(format!("{}: {e}", path.display()));
        w.write_record(["w"]).map_err(io)?;
        for x in &summary.draws {
            w.write_record([format!("{x:?}")]).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::Input(e.to_string()))?;
    }
    let body = SimulateBody {
        count: summary.count,
        empirical_mean: summary.empirical_mean,
        empirical_variance: summary.empirical_variance,
        kolmogorov: ecdf_kolmogorov_vs_normal(&summary),
        wasserstein: dw,
        wasserstein_standard_error: summary.wasserstein_standard_error,
        kolmogorov_from_wasserstein: kolmogorov_from_wasserstein(dw),
        within_wasserstein_bound: dw <= bound.certified_bound.unwrap_or(f64::INFINITY) + 3.0 * se,
        wasserstein_bound: bound,
    };
    finish("simulate", settings, true, Vec::new(), body)
}

#[derive(Serialize)]
struct OracleBody {
    atoms: usize,
    mean: f64,
    variance: f64,
    moment_mean: f64,
    moment_variance: f64,
    exact_kolmogorov: Option<f64>,
    exact_wasserstein: Option<f64>,
    stein_pair: Outcome<Vec<IdentityReport>>,
    zero_bias: Vec<Outcome<IdentityReport>>,
    pi_dagger: Outcome<Vec<IdentityReport>>,
    pass: bool,
}

fn run_oracle(input: &Path, settings: &Settings) -> CliResult<RunOutput> {
    let matrix = read_matrix(input)?;
    let budget = settings.budget;
    let law = enumerate_distribution(&matrix, budget)?;
    let m = moments(&matrix);
    let standardized = (!m.is_degenerate()).then(|| law.affine(m.mean, m.std_dev()));
    let stein: Outcome<Vec<IdentityReport>> = verify_stein_pair(&matrix, budget).into();
    let zero_bias: Vec<Outcome<IdentityReport>> = (1..=3)
        .map(|d| verify_zero_bias(&matrix, d, budget).into())
        .collect();
    let dagger: Outcome<Vec<IdentityReport>> = verify_pi_dagger(&matrix, budget).into();

    let mut failed: Vec<String> = Vec::new();
    let mut collect = |r: &IdentityReport| {
        if !r.pass {
            failed.push(format!("{} (violation {:e})", r.identity, r.max_violation));
        }
    };
    if let Outcome::Ok(v) = &stein {
        v.iter().for_each(&mut collect);
    }
    for z in &zero_bias {
        if let Outcome::Ok(r) = z {
            collect(r);
        }
    }
    if let Outcome::Ok(v) = &dagger {
        v.iter().for_each(&mut collect);
    }
    let moment_gap = (law.mean() - m.mean)
        .abs()
        .max((law.variance() - m.variance).abs());
    if moment_gap > 1e-10 * m.variance.max(1.0) {
        failed.push(format!("moments (gap {moment_gap:e})"));
    }
    let body = OracleBody {
        atoms: law.atoms.len(),
        mean: law.mean(),
        variance: law.variance(),
        moment_mean: m.mean,
        moment_variance: m.variance,
        exact_kolmogorov: standardized
            .as_ref()
            .map(|d| exact_distance(d, DistanceKind::Kolmogorov)),
        exact_wasserstein: standardized
            .as_ref()
            .map(|d| exact_distance(d, DistanceKind::Wasserstein)),
        stein_pair: stein,
        zero_bias,
        pi_dagger: dagger,
        pass: failed.is_empty(),
    };
    let mut out = finish("oracle", settings, false, Vec::new(), body)?;
    if !failed.is_empty() {
        out.failure = Some(format!("identities failed: {}", failed.join(", ")));
    }
    Ok(out)
}

#[derive(Serialize)]
struct DesignBody {
    kind: stratperm::designs::DesignKind,
    strata_sizes: Vec<usize>,
    selected_counts: Vec<usize>,
    weights: Vec<f64>,
    target: f64,
    variance: f64,
    matrix_variance: f64,
    rate: Outcome<stratperm::BoundReport>,
    estimate: Option<f64>,
    matrix: MatrixJson,
}

fn run_design(input: &Path, settings: &Settings) -> CliResult<RunOutput> {
    let parsed = input::read_design_csv(input)?;
    let d = &parsed.design;
    let matrix = build_design_matrix(d);
    let est = match &parsed.selected {
        Some(sel) => Some(estimate(d, sel)?),
        None => None,
    };
    let weights = match d {
        stratperm::designs::Design::Sampling(s) => s.weights().to_vec(),
        stratperm::designs::Design::Experiment(e) => e.weights().to_vec(),
    };
    let body = DesignBody {
        kind: d.kind(),
        strata_sizes: d.layout().sizes().to_vec(),
        selected_counts: d.selected_counts().to_vec(),
        weights,
        target: d.target(),
        variance: design_variance(d),
        matrix_variance: moments(&matrix).variance,
        rate: rate_design(d).into(),
        estimate: est,
        matrix: matrix.into(),
    };
    finish("design", settings, false, parsed.warnings, body)
}

/// `lo:hi:step` or `a,b,c`.
pub fn parse_grid(s: &str) -> CliResult<Vec<f64>> {
    let bad = |what: &str| CliError::Input(format!("invalid grid '{s}': {what}"));
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| bad(&format!("'{t}' is not a number")))
    };
    let grid: Vec<f64> = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(bad("expected lo:hi:step"));
        }
        let (lo, hi, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if step.is_nan() || step <= 0.0 || hi < lo {
            return Err(bad("need step > 0 and hi >= lo"));
        }
        let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| lo + i as f64 * step).collect()
    } else {
        s.split(',').map(num).collect::<CliResult<_>>()?
    };
    if grid.is_empty() || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(bad("must be nonempty and sorted"));
    }
    Ok(grid)
}

#[allow(clippy::too_many_arguments)]
fn run_test(
    input: &Path,
    method: MethodArg,
    alternative: AlternativeArg,
    beta0: Option<f64>,
    invert: bool,
    alpha: f64,
    grid: Option<String>,
    settings: &Settings,
) -> CliResult<RunOutput> {
    let data = input::read_test_csv(input)?;
    let randomized = method == MethodArg::Mc;
    let ones = vec![0.0; data.y.len()];
    let d = data.d.as_ref().unwrap_or(&ones);
    if invert {
        let grid = parse_grid(
            grid.as_deref()
                .ok_or_else(|| CliError::Input("--invert needs --grid".into()))?,
        )?;
        if data.d.is_none() {
            return Err(CliError::Input("--invert needs a dose column 'd'".into()));
        }
        let set = iv_confidence_interval(
            &data.y,
            d,
            &data.z,
            &data.layout,
            alpha,
            &grid,
            method.into(),
            settings.reps,
            settings.seed,
        )?;
        return finish("test", settings, randomized, data.warnings, set);
    }
    let result = iv_test(
        &data.y,
        d,
        &data.z,
        &data.layout,
        beta0.unwrap_or(0.0),
        alternative.into(),
        method.into(),
        settings.reps,
        settings.seed,
    )?;
    finish("test", settings, randomized, data.warnings, result)
}
