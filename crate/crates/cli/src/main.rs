//! Command line front end binding the analysis pipeline: score fitting,
//! balance diagnostics, estimation, sensitivity grids, simulation studies,
//! and the exact identification check.
//!
//! Exit codes: 0 success, 1 validation error (bad input, configuration, or
//! preconditions), 2 numerical failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use pstrat::dataset::{self, CsvSchema, ExperimentData};
use pstrat::diagnostics::{balance_check_opt, er_gpi_test, BalanceSpec};
use pstrat::estimators::{
    estimate_with_bootstrap, estimates_to_json, BootstrapConfig, Pipeline, SensitivityParams,
    VariantSel,
};
use pstrat::pscore::{self, xi_upper_bound, Regime, ScoreConfig};
use pstrat::sensitivity::{default_eps_grid, default_xi_grid, grid_eps_mono, grid_eps_strong, grid_xi};
use pstrat::simkit::{
    exact_balance_check, exact_check, metrics_to_csv, random_population, run_study, OutcomeFamily,
    ScenarioSpec, SimRegime, StudyConfig,
};
use pstrat::ErrorClass;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; usage problems are
            // validation failures.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(jobs) = cli.jobs {
        if rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().is_err() {
            eprintln!("pstrat: could not configure the worker pool");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pstrat: {}", e.message);
            match e.class {
                ErrorClass::Validation => ExitCode::from(1),
                ErrorClass::Numerical => ExitCode::from(2),
            }
        }
    }
}

struct CliError {
    class: ErrorClass,
    message: String,
}

impl CliError {
    fn validation(message: impl Into<String>) -> CliError {
        CliError { class: ErrorClass::Validation, message: message.into() }
    }

    fn numerical(message: impl Into<String>) -> CliError {
        CliError { class: ErrorClass::Numerical, message: message.into() }
    }
}

impl<E: Into<pstrat::Error>> From<E> for CliError {
    fn from(e: E) -> CliError {
        let e: pstrat::Error = e.into();
        CliError { class: e.class(), message: e.to_string() }
    }
}

#[derive(Parser)]
#[command(
    name = "pstrat",
    version,
    about = "Principal stratification analysis of randomized experiments using principal scores"
)]
struct Cli {
    /// Worker threads for bootstrap/simulation loops (default: all cores;
    /// results do not depend on this).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a principal-score model and serialize it (never reads outcomes).
    Scores(ScoresArgs),
    /// Covariate balance diagnostics for a fitted score model.
    Balance(BalanceArgs),
    /// Weighting and covariate-adjusted effect estimates with bootstrap CIs.
    Estimate(EstimateArgs),
    /// Sensitivity grids over eps, (eps1, eps0), or xi.
    Sensitivity(SensitivityArgs),
    /// Repeated-sampling simulation studies (bias and coverage).
    Simulate(SimulateArgs),
    /// Exact identification check on randomized discrete populations.
    Check(CheckArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    input: PathBuf,
    /// Plain-text key=value config file; command line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Column holding the binary treatment.
    #[arg(long)]
    z: Option<String>,
    /// Column holding the binary intermediate.
    #[arg(long)]
    s: Option<String>,
    /// Column holding the outcome.
    #[arg(long)]
    y: Option<String>,
    /// Comma-separated covariate columns (default: every remaining column).
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// The first covariate column is already a constant-one intercept.
    #[arg(long)]
    has_intercept: bool,
}

#[derive(Args)]
struct OutArgs {
    /// Output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Emit CSV instead of JSON for tabular reports.
    #[arg(long)]
    csv: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RegimeOpt {
    StrongMono,
    Mono,
    NoMono,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantOpt {
    Weighting,
    Adjusted,
    Both,
}

impl VariantOpt {
    fn sel(self) -> VariantSel {
        match self {
            VariantOpt::Weighting => VariantSel::Weighting,
            VariantOpt::Adjusted => VariantSel::Adjusted,
            VariantOpt::Both => VariantSel::Both,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OutcomeOpt {
    Normal,
    Bernoulli,
    QuadraticNormal,
}

#[derive(Args)]
struct ScoresArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    regime: Option<RegimeOpt>,
    /// Deviation from monotonicity (no-mono regime only).
    #[arg(long)]
    xi: Option<f64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct BalanceArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    regime: Option<RegimeOpt>,
    #[arg(long)]
    xi: Option<f64>,
    /// Also balance the squares of every covariate.
    #[arg(long)]
    squares: bool,
    /// Also balance every pairwise covariate product.
    #[arg(long)]
    products: bool,
    /// Bootstrap replicates behind the standardized statistics.
    #[arg(long, default_value_t = 500)]
    bootstrap: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    normalize_weights: bool,
    /// Also run the exclusion-restriction / ignorability compatibility test
    /// (mono regime; needs the outcome column mapped).
    #[arg(long)]
    er_test: bool,
    /// Control-side sensitivity value for the compatibility test.
    #[arg(long, default_value_t = 1.0)]
    eps0: f64,
    /// Treated-side sensitivity value for the compatibility test.
    #[arg(long, default_value_t = 1.0)]
    eps1: f64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    regime: Option<RegimeOpt>,
    #[arg(long)]
    xi: Option<f64>,
    /// Sensitivity value under strong monotonicity.
    #[arg(long)]
    eps: Option<f64>,
    /// Treated-side sensitivity value under (no-)monotonicity.
    #[arg(long)]
    eps1: Option<f64>,
    /// Control-side sensitivity value under (no-)monotonicity.
    #[arg(long)]
    eps0: Option<f64>,
    #[arg(long, default_value_t = 500)]
    bootstrap: usize,
    /// Confidence level of the percentile intervals.
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    normalize_weights: bool,
    #[arg(long, value_enum, default_value = "both")]
    variant: VariantOpt,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct SensitivityArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    regime: Option<RegimeOpt>,
    /// Scalar or lo:hi:k grid over eps (strong-mono; log-spaced).
    #[arg(long)]
    eps: Option<String>,
    /// Scalar or lo:hi:k grid over eps1 (mono; log-spaced).
    #[arg(long)]
    eps1: Option<String>,
    /// Scalar or lo:hi:k grid over eps0 (mono; log-spaced).
    #[arg(long)]
    eps0: Option<String>,
    /// Scalar or lo:hi:k grid over xi (no-mono; linear; default spans the
    /// admissible range).
    #[arg(long)]
    xi: Option<String>,
    #[arg(long, default_value_t = 500)]
    bootstrap: usize,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    normalize_weights: bool,
    #[arg(long, value_enum, default_value = "both")]
    variant: VariantOpt,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario regime.
    #[arg(long, value_enum, default_value = "strong-mono")]
    regime: RegimeOpt,
    #[arg(long, value_enum, default_value = "normal")]
    outcome: OutcomeOpt,
    /// Comma-separated theta values.
    #[arg(long, value_delimiter = ',', default_values_t = [-1.0, -0.5, 0.0, 0.5, 1.0])]
    theta: Vec<f64>,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 300)]
    reps: usize,
    /// Bootstrap replicates per repetition (0 skips interval metrics).
    #[arg(long, default_value_t = 300)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    seed: u64,
    /// Hide the binary covariate from the analysis.
    #[arg(long)]
    obs: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct CheckArgs {
    /// Randomized populations per regime/sensitivity case.
    #[arg(long, default_value_t = 100)]
    populations: usize,
    #[arg(long)]
    seed: u64,
    /// Maximum tolerated identification discrepancy.
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
    #[command(flatten)]
    out: OutArgs,
}

/// Plain-text key=value configuration, merged under command line flags.
#[derive(Default)]
struct FileConfig(BTreeMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig, CliError> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let raw = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {path:?}: {e}")))?;
        let mut map = BTreeMap::new();
        for (lineno, line) in raw.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::validation(format!(
                    "config line {} is not key=value: '{line}'",
                    lineno + 1
                ))
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FileConfig(map))
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(|s| s.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| CliError::validation(format!("config {key}='{raw}' is invalid"))),
        }
    }
}

struct LoadedData {
    data: ExperimentData,
    schema: CsvSchema,
}

fn load_data(args: &DataArgs, want_outcome: bool) -> Result<LoadedData, CliError> {
    let cfg = FileConfig::load(args.config.as_deref())?;
    let z = args
        .z
        .clone()
        .or_else(|| cfg.get("z").map(String::from))
        .ok_or_else(|| CliError::validation("the z column must be named (--z or config)"))?;
    let s = args
        .s
        .clone()
        .or_else(|| cfg.get("s").map(String::from))
        .ok_or_else(|| CliError::validation("the s column must be named (--s or config)"))?;
    let y = if want_outcome {
        args.y.clone().or_else(|| cfg.get("y").map(String::from))
    } else {
        None
    };
    let covariates = if args.covariates.is_empty() {
        cfg.get("covariates")
            .map(|raw| raw.split(',').map(|c| c.trim().to_string()).collect())
            .unwrap_or_default()
    } else {
        args.covariates.clone()
    };
    let has_intercept =
        args.has_intercept || cfg.parse::<bool>("has_intercept")?.unwrap_or(false);
    let schema = CsvSchema { z, s, y, covariates, has_intercept };
    let data = dataset::load_csv(&args.input, &schema)?;
    Ok(LoadedData { data, schema })
}

fn resolve_regime(
    flag: Option<RegimeOpt>,
    xi: Option<f64>,
    cfg_path: Option<&Path>,
) -> Result<Regime, CliError> {
    let cfg = FileConfig::load(cfg_path)?;
    let opt = match flag {
        Some(o) => o,
        None => match cfg.get("regime") {
            Some("strong-mono") => RegimeOpt::StrongMono,
            Some("mono") => RegimeOpt::Mono,
            Some("no-mono") => RegimeOpt::NoMono,
            Some(other) => {
                return Err(CliError::validation(format!("config regime '{other}' is invalid")))
            }
            None => return Err(CliError::validation("a regime is required (--regime or config)")),
        },
    };
    let xi = match xi {
        Some(v) => Some(v),
        None => cfg.parse::<f64>("xi")?,
    };
    match opt {
        RegimeOpt::StrongMono => Ok(Regime::StrongMonotonicity),
        RegimeOpt::Mono => Ok(Regime::Monotonicity),
        RegimeOpt::NoMono => {
            let xi = xi.ok_or_else(|| {
                CliError::validation("the no-mono regime needs --xi (or xi= in the config)")
            })?;
            Ok(Regime::NoMonotonicity { xi })
        }
    }
}

fn require_seed(flag: Option<u64>, cfg_path: Option<&Path>) -> Result<u64, CliError> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    if let Some(seed) = FileConfig::load(cfg_path)?.parse::<u64>("seed")? {
        return Ok(seed);
    }
    Err(CliError::validation("--seed is required for stochastic subcommands"))
}

fn write_output(out: &OutArgs, content: &str) -> Result<(), CliError> {
    match &out.out {
        Some(path) => std::fs::write(path, content)
            .map_err(|e| CliError::validation(format!("cannot write {path:?}: {e}"))),
        None => {
            println!("{content}");
            Ok(())
        }
    }
}

fn config_echo(pairs: &[(&str, serde_json::Value)]) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for (k, v) in pairs {
        map.insert((*k).to_string(), v.clone());
    }
    serde_json::Value::Object(map)
}

fn csv_with_echo(echo: &serde_json::Value, body: &str) -> String {
    format!("# config: {echo}\n{body}")
}

/// Parses a scalar or `lo:hi:k` grid. `log_spaced` matches the default grid
/// construction for the given parameter family.
fn parse_grid(raw: &str, name: &str, log_spaced: bool) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = raw.split(':').collect();
    let bad = || CliError::validation(format!("--{name} must be a number or lo:hi:k, got '{raw}'"));
    match parts.len() {
        1 => Ok(vec![parts[0].trim().parse::<f64>().map_err(|_| bad())?]),
        3 => {
            let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
            let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
            let k: usize = parts[2].trim().parse().map_err(|_| bad())?;
            if k < 2 || hi <= lo {
                return Err(bad());
            }
            Ok((0..k)
                .map(|i| {
                    let t = i as f64 / (k - 1) as f64;
                    if log_spaced && lo > 0.0 {
                        (lo.ln() + (hi.ln() - lo.ln()) * t).exp()
                    } else {
                        lo + (hi - lo) * t
                    }
                })
                .collect())
        }
        _ => Err(bad()),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Scores(args) => cmd_scores(args),
        Command::Balance(args) => cmd_balance(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Sensitivity(args) => cmd_sensitivity(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Check(args) => cmd_check(args),
    }
}

fn cmd_scores(args: ScoresArgs) -> Result<(), CliError> {
    if args.out.csv {
        return Err(CliError::validation("scores output is a JSON model document; drop --csv"));
    }
    // Outcome-free by construction: the y mapping is never applied.
    let loaded = load_data(&args.data, false)?;
    let regime = resolve_regime(args.regime, args.xi, args.data.config.as_deref())?;
    let model = pscore::fit(&loaded.data, regime, &ScoreConfig::default())?;
    let echo = config_echo(&[
        ("subcommand", json!("scores")),
        ("input", json!(args.data.input.display().to_string())),
        ("schema", json!(loaded.schema)),
        ("regime", json!(regime.label())),
        ("xi", json!(regime.xi())),
    ]);
    let doc = json!({ "config": echo, "model": model.to_json() });
    write_output(&args.out, &serde_json::to_string_pretty(&doc).unwrap())
}

fn cmd_balance(args: BalanceArgs) -> Result<(), CliError> {
    let loaded = load_data(&args.data, args.er_test)?;
    let regime = resolve_regime(args.regime, args.xi, args.data.config.as_deref())?;
    let seed = require_seed(args.seed, args.data.config.as_deref())?;
    let model = pscore::fit(&loaded.data, regime, &ScoreConfig::default())?;
    let mut spec = BalanceSpec::default_for(&loaded.data);
    if args.squares {
        spec = spec.with_squares(&loaded.data);
    }
    if args.products {
        spec = spec.with_products(&loaded.data);
    }
    let report = balance_check_opt(
        &loaded.data,
        &model,
        &spec,
        args.bootstrap,
        seed,
        true,
        args.normalize_weights,
    )?;
    let echo = config_echo(&[
        ("subcommand", json!("balance")),
        ("input", json!(args.data.input.display().to_string())),
        ("schema", json!(loaded.schema)),
        ("regime", json!(regime.label())),
        ("xi", json!(regime.xi())),
        ("bootstrap", json!(args.bootstrap)),
        ("seed", json!(seed)),
        ("normalize_weights", json!(args.normalize_weights)),
    ]);
    let er = if args.er_test {
        Some(er_gpi_test(&loaded.data, &model, args.eps0, args.eps1, args.bootstrap, seed, true)?)
    } else {
        None
    };
    if args.out.csv {
        if er.is_some() {
            return Err(CliError::validation(
                "the compatibility test report is JSON only; drop --csv or --er-test",
            ));
        }
        write_output(&args.out, &csv_with_echo(&echo, &report.to_csv_string()))
    } else {
        let mut doc = json!({ "config": echo, "balance": report.to_json() });
        if let Some(er) = er {
            doc["er_gpi_test"] = er.to_json();
        }
        write_output(&args.out, &serde_json::to_string_pretty(&doc).unwrap())
    }
}

fn cmd_estimate(args: EstimateArgs) -> Result<(), CliError> {
    let loaded = load_data(&args.data, true)?;
    if loaded.data.y().is_none() {
        return Err(CliError::validation(
            "outcome column required: map it with --y (or y= in the config)",
        ));
    }
    let regime = resolve_regime(args.regime, args.xi, args.data.config.as_deref())?;
    let seed = require_seed(args.seed, args.data.config.as_deref())?;
    let cfg = FileConfig::load(args.data.config.as_deref())?;
    let level = match args.level {
        Some(l) => l,
        None => cfg.parse::<f64>("level")?.unwrap_or(0.95),
    };
    let sens = SensitivityParams {
        eps: args.eps.or(cfg.parse("eps")?).unwrap_or(1.0),
        eps1: args.eps1.or(cfg.parse("eps1")?).unwrap_or(1.0),
        eps0: args.eps0.or(cfg.parse("eps0")?).unwrap_or(1.0),
    };
    let pipeline = Pipeline {
        sens,
        variant: args.variant.sel(),
        normalize_weights: args.normalize_weights,
        ..Pipeline::new(regime)
    };
    let bcfg = BootstrapConfig::new(args.bootstrap, level, seed);
    let estimates = estimate_with_bootstrap(&loaded.data, &pipeline, &bcfg)?;
    let echo = config_echo(&[
        ("subcommand", json!("estimate")),
        ("input", json!(args.data.input.display().to_string())),
        ("schema", json!(loaded.schema)),
        ("regime", json!(regime.label())),
        ("xi", json!(regime.xi())),
        ("sensitivity", json!(sens)),
        ("bootstrap", json!(args.bootstrap)),
        ("level", json!(level)),
        ("seed", json!(seed)),
        ("normalize_weights", json!(args.normalize_weights)),
        ("variant", json!(args.variant.sel())),
    ]);
    if args.out.csv {
        let mut body = String::from("stratum,variant,point,se,ci_low,ci_high,B,failed\n");
        for e in &estimates {
            let (lo, hi) = e.ci.unwrap_or((f64::NAN, f64::NAN));
            body.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.stratum.label(),
                e.variant.label(),
                e.point,
                e.se.unwrap_or(f64::NAN),
                lo,
                hi,
                e.replicates,
                e.failed_replicates
            ));
        }
        write_output(&args.out, &csv_with_echo(&echo, &body))
    } else {
        let doc = json!({
            "config": echo,
            "estimates": estimates_to_json(&estimates, regime, &sens),
        });
        write_output(&args.out, &serde_json::to_string_pretty(&doc).unwrap())
    }
}

fn cmd_sensitivity(args: SensitivityArgs) -> Result<(), CliError> {
    let loaded = load_data(&args.data, true)?;
    let seed = require_seed(args.seed, args.data.config.as_deref())?;
    let cfg = FileConfig::load(args.data.config.as_deref())?;
    let level = match args.level {
        Some(l) => l,
        None => cfg.parse::<f64>("level")?.unwrap_or(0.95),
    };
    // The regime drives which grid runs; xi grids resolve the regime without
    // a fixed xi value.
    let regime_opt = match (args.regime, cfg.get("regime")) {
        (Some(o), _) => o,
        (None, Some("strong-mono")) => RegimeOpt::StrongMono,
        (None, Some("mono")) => RegimeOpt::Mono,
        (None, Some("no-mono")) => RegimeOpt::NoMono,
        (None, Some(other)) => {
            return Err(CliError::validation(format!("config regime '{other}' is invalid")))
        }
        (None, None) => {
            return Err(CliError::validation("a regime is required (--regime or config)"))
        }
    };
    let bcfg = BootstrapConfig::new(args.bootstrap, level, seed);
    let base = |regime: Regime| Pipeline {
        variant: args.variant.sel(),
        normalize_weights: args.normalize_weights,
        ..Pipeline::new(regime)
    };
    let grid = match regime_opt {
        RegimeOpt::StrongMono => {
            let eps = match &args.eps {
                Some(raw) => parse_grid(raw, "eps", true)?,
                None => default_eps_grid(),
            };
            grid_eps_strong(&loaded.data, &base(Regime::StrongMonotonicity), &eps, &bcfg)?
        }
        RegimeOpt::Mono => {
            let e1 = match &args.eps1 {
                Some(raw) => parse_grid(raw, "eps1", true)?,
                None => default_eps_grid(),
            };
            let e0 = match &args.eps0 {
                Some(raw) => parse_grid(raw, "eps0", true)?,
                None => default_eps_grid(),
            };
            grid_eps_mono(&loaded.data, &base(Regime::Monotonicity), &e1, &e0, &bcfg)?
        }
        RegimeOpt::NoMono => {
            let xi = match &args.xi {
                Some(raw) => parse_grid(raw, "xi", false)?,
                None => {
                    let bound = xi_upper_bound(&loaded.data.summarize())?;
                    default_xi_grid(bound)
                }
            };
            grid_xi(&loaded.data, &base(Regime::NoMonotonicity { xi: 0.0 }), &xi, &bcfg)?
        }
    };
    let echo = config_echo(&[
        ("subcommand", json!("sensitivity")),
        ("input", json!(args.data.input.display().to_string())),
        ("schema", json!(loaded.schema)),
        ("regime", json!(grid.regime)),
        ("bootstrap", json!(args.bootstrap)),
        ("level", json!(level)),
        ("seed", json!(seed)),
        ("normalize_weights", json!(args.normalize_weights)),
    ]);
    if args.out.csv {
        write_output(&args.out, &csv_with_echo(&echo, &grid.to_csv_string()))
    } else {
        let doc = json!({ "config": echo, "grid": grid.to_json() });
        write_output(&args.out, &serde_json::to_string_pretty(&doc).unwrap())
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let regime = match args.regime {
        RegimeOpt::StrongMono => SimRegime::StrongMono,
        RegimeOpt::Mono => SimRegime::Mono,
        RegimeOpt::NoMono => {
            return Err(CliError::validation(
                "simulation scenarios cover the strong-mono and mono regimes",
            ))
        }
    };
    let outcome = match args.outcome {
        OutcomeOpt::Normal => OutcomeFamily::Normal,
        OutcomeOpt::Bernoulli => OutcomeFamily::Bernoulli,
        OutcomeOpt::QuadraticNormal => OutcomeFamily::QuadraticNormal,
    };
    let mut all = Vec::new();
    for (i, &theta) in args.theta.iter().enumerate() {
        let spec = ScenarioSpec {
            regime,
            theta,
            outcome,
            n: args.n,
            oracle: !args.obs,
        };
        let cfg = StudyConfig {
            reps: args.reps,
            bootstrap: args.bootstrap,
            level: args.level,
            seed: args.seed.wrapping_add(i as u64),
            parallel: true,
        };
        all.push(run_study(&spec, &cfg).map_err(pstrat::Error::from)?);
    }
    let echo = config_echo(&[
        ("subcommand", json!("simulate")),
        ("regime", json!(regime)),
        ("outcome", json!(outcome)),
        ("theta", json!(args.theta)),
        ("n", json!(args.n)),
        ("reps", json!(args.reps)),
        ("bootstrap", json!(args.bootstrap)),
        ("level", json!(args.level)),
        ("seed", json!(args.seed)),
        ("visibility", json!(if args.obs { "obs" } else { "oracle" })),
    ]);
    if args.out.csv {
        write_output(&args.out, &csv_with_echo(&echo, &metrics_to_csv(&all)))
    } else {
        let doc = json!({ "config": echo, "metrics": all });
        write_output(&args.out, &serde_json::to_string_pretty(&doc).unwrap())
    }
}

fn cmd_check(args: CheckArgs) -> Result<(), CliError> {
    let cases: Vec<(&str, Regime, SensitivityParams)> = vec![
        ("strong-mono", Regime::StrongMonotonicity, SensitivityParams::default()),
        (
            "strong-mono eps=1.6",
            Regime::StrongMonotonicity,
            SensitivityParams { eps: 1.6, ..Default::default() },
        ),
        ("mono", Regime::Monotonicity, SensitivityParams::default()),
        (
            "mono eps1=0.7 eps0=1.5",
            Regime::Monotonicity,
            SensitivityParams { eps1: 0.7, eps0: 1.5, ..Default::default() },
        ),
        ("no-mono xi=0.3", Regime::NoMonotonicity { xi: 0.3 }, SensitivityParams::default()),
    ];
    let mut rows = Vec::new();
    let mut worst_overall: f64 = 0.0;
    for (label, regime, sens) in &cases {
        let mut worst: f64 = 0.0;
        let mut worst_balance: f64 = 0.0;
        for i in 0..args.populations {
            let pop = random_population(*regime, sens, args.seed.wrapping_add(i as u64));
            worst = worst.max(exact_check(&pop, sens).map_err(pstrat::Error::from)?);
            worst_balance =
                worst_balance.max(exact_balance_check(&pop).map_err(pstrat::Error::from)?);
        }
        worst_overall = worst_overall.max(worst).max(worst_balance);
        rows.push(json!({
            "case": label,
            "populations": args.populations,
            "max_identification_discrepancy": worst,
            "max_balance_discrepancy": worst_balance,
        }));
    }
    let echo = config_echo(&[
        ("subcommand", json!("check")),
        ("populations", json!(args.populations)),
        ("seed", json!(args.seed)),
        ("tolerance", json!(args.tolerance)),
    ]);
    let doc = json!({
        "config": echo,
        "cases": rows,
        "max_discrepancy": worst_overall,
        "tolerance": args.tolerance,
        "pass": worst_overall <= args.tolerance,
    });
    if args.out.csv {
        let mut body =
            String::from("case,populations,max_identification_discrepancy,max_balance_discrepancy\n");
        for r in doc["cases"].as_array().unwrap() {
            body.push_str(&format!(
                "{},{},{},{}\n",
                r["case"].as_str().unwrap(),
                r["populations"],
                r["max_identification_discrepancy"],
                r["max_balance_discrepancy"]
            ));
        }
        write_output(&args.out, &csv_with_echo(&echo, &body))?;
    } else {
        write_output(&args.out, &serde_json::to_string_pretty(&doc).unwrap())?;
    }
    if worst_overall <= args.tolerance {
        Ok(())
    } else {
        Err(CliError::numerical(format!(
            "identification discrepancy {worst_overall:.3e} exceeds tolerance {:.1e}",
            args.tolerance
        )))
    }
}
