//! `msbif`: mean-square stability and stochastic bifurcation analysis from the
//! command line. Subcommands write CSV/JSON/SVG files; see `msbif --help`.

pub mod csvio;
pub mod svg;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use msbif_core::dissipativity::{
    check_dissipative, dissipativity_constants, remainder_bounds, DissipativityCertificate, RemainderBound,
    DEFAULT_RADIUS, DEFAULT_SAMPLES,
};
use msbif_core::equilibria::{det_classify, find_equilibria};
use msbif_core::moments::{analyze, StabilityReport, DEFAULT_DELTA};
use msbif_core::simulate::{tamed_em, write_paths_csv, SimConfig};
use msbif_core::sweep::{detect_crossings, run_sweep, write_sweep_csv, CrossingField};
use msbif_core::validate::{run_validation, Check, ValidateOptions};
use msbif_core::{ModelConfig, ModelSpec};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("analysis failed: {0}")]
    Analysis(String),
    #[error("{0}")]
    Validation(String),
    #[error("CSV schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::SchemaMismatch(_) | CliError::Io { .. } => 1,
            CliError::Analysis(_) => 2,
            CliError::Validation(_) => 3,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "msbif", version, about = "Mean-square stability of SDE equilibria and stochastic bifurcation diagrams")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Equilibria, moment stability, beta, mu and dissipativity at fixed parameters.
    Analyze(AnalyzeArgs),
    /// Continue equilibria over a parameter range and write sweep.csv.
    Sweep(SweepArgs),
    /// Tamed Euler-Maruyama sample paths from a ball around an equilibrium.
    Simulate(SimulateArgs),
    /// Run the oracle checks; exits 3 if any fails.
    Validate(ValidateArgs),
    /// Render a sweep.csv or paths.csv as SVG.
    Render(RenderArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Model name: pitchfork, fold, transcritical, cir, bistable2d, lorenz, allen_cahn
    #[arg(long)]
    pub model: Option<String>,
    /// Model variant (noise structure); the model's default when omitted
    #[arg(long)]
    pub variant: Option<String>,
    /// Parameter override, repeatable: --param gamma=0.25
    #[arg(long = "param", value_name = "K=V", value_parser = parse_kv)]
    pub params: Vec<(String, f64)>,
    /// State dimension for allen_cahn [default: 50]
    #[arg(long)]
    pub dim: Option<usize>,
    /// JSON configuration file; command-line flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Linearization-validity margin delta1 [default: 0.001]
    #[arg(long)]
    pub delta1: Option<f64>,
    /// Linearization-validity margin delta2 [default: 0.001]
    #[arg(long)]
    pub delta2: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Equilibrium label (e.g. plus, +, zero) or comma-separated coordinates; all when omitted
    #[arg(long, allow_hyphen_values = true)]
    pub equilibrium: Option<String>,
    /// Output JSON path; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Parameter to vary
    #[arg(long = "sweep-param")]
    pub sweep_param: Option<String>,
    /// Start of the parameter range
    #[arg(long, allow_hyphen_values = true)]
    pub from: Option<f64>,
    /// End of the parameter range
    #[arg(long, allow_hyphen_values = true)]
    pub to: Option<f64>,
    /// Number of grid values, endpoints included [default: 96]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output CSV path [default: sweep.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also render the diagram to this SVG path
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Start equilibrium: label (plus, +, minus, -, zero, 0, ...) or coordinates; first deterministically stable one when omitted
    #[arg(long, allow_hyphen_values = true)]
    pub equilibrium: Option<String>,
    /// Number of sample paths [default: 5]
    #[arg(long)]
    pub paths: Option<usize>,
    /// Time horizon [default: 100]
    #[arg(long = "T")]
    pub t_end: Option<f64>,
    /// Time step [default: 0.01]
    #[arg(long)]
    pub dt: Option<f64>,
    /// Master seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Radius of the initial ball around the equilibrium [default: 1e-6]
    #[arg(long)]
    pub radius: Option<f64>,
    /// Output CSV path [default: paths.csv]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also render the paths to this SVG path
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    /// Analytic checks only (skips the 10^4-path Monte Carlo suites)
    #[arg(long)]
    pub quick: bool,
    /// Master seed for the Monte Carlo suites [default: 2024]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replace the closed-form beta^2 oracle (negative control)
    #[arg(long, hide = true)]
    pub force_beta_sq: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FigureKind {
    Bifurcation,
    Paths,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    /// sweep.csv or paths.csv
    #[arg(long)]
    pub input: PathBuf,
    /// Figure kind; inferred from the CSV header when omitted
    #[arg(long, value_enum)]
    pub kind: Option<FigureKind>,
    /// Output SVG path [default: input with .svg extension]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_kv(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected K=V, got `{s}`"))?;
    let v: f64 = v.trim().parse().map_err(|_| format!("`{v}` is not a number"))?;
    Ok((k.trim().to_string(), v))
}

/// Values accepted in a `--config` file; each is overridden by its flag.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<String>,
    pub variant: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub d: Option<usize>,
    pub delta1: Option<f64>,
    pub delta2: Option<f64>,
    pub sweep_param: Option<String>,
    pub from: Option<f64>,
    pub to: Option<f64>,
    pub steps: Option<usize>,
    pub equilibrium: Option<String>,
    pub paths: Option<usize>,
    #[serde(rename = "T")]
    pub t_end: Option<f64>,
    pub dt: Option<f64>,
    pub seed: Option<u64>,
    pub radius: Option<f64>,
}

fn load_config(args: &ModelArgs) -> Result<FileConfig, CliError> {
    match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        }
        None => Ok(FileConfig::default()),
    }
}

/// Model and the two δ margins after merging file values and flags.
fn resolve_model(args: &ModelArgs, file: &FileConfig) -> Result<(ModelSpec, f64, f64), CliError> {
    let name = args
        .model
        .clone()
        .or_else(|| file.model.clone())
        .ok_or_else(|| CliError::Config("no model given (use --model or a config file)".into()))?;
    let mut params = file.params.clone();
    params.extend(args.params.iter().cloned());
    let cfg = ModelConfig {
        model: name,
        variant: args.variant.clone().or_else(|| file.variant.clone()),
        params,
        d: args.dim.or(file.d),
    };
    let model = cfg.build().map_err(config_err)?;
    let delta1 = args.delta1.or(file.delta1).unwrap_or(DEFAULT_DELTA);
    let delta2 = args.delta2.or(file.delta2).unwrap_or(DEFAULT_DELTA);
    if !(delta1 > 0.0 && delta2 > 0.0) {
        return Err(CliError::Config("delta1 and delta2 must be positive".into()));
    }
    Ok((model, delta1, delta2))
}

/// Worker count from `MSBIF_THREADS`; 0 or unset lets rayon decide.
pub fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var("MSBIF_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("MSBIF_THREADS must be a non-negative integer, got `{v}`"))),
        _ => Ok(0),
    }
}

/// Runs a command on a dedicated pool of `threads` workers (0 = automatic)
/// and returns the text to print on success.
pub fn run_with_threads(cli: Cli, threads: usize) -> Result<String, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(config_err)?;
    pool.install(|| run_command(cli.command))
}

pub fn run(cli: Cli) -> Result<String, CliError> {
    run_with_threads(cli, threads_from_env()?)
}

fn run_command(cmd: Command) -> Result<String, CliError> {
    match cmd {
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Validate(a) => cmd_validate(&a),
        Command::Render(a) => cmd_render(&a),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Picks equilibria by label (with `+`, `-`, `0` shorthands) or coordinates.
fn select_equilibria(model: &ModelSpec, spec: Option<&str>) -> Result<Vec<(String, Vec<f64>)>, CliError> {
    let all = find_equilibria(model);
    let Some(spec) = spec else {
        return Ok(all);
    };
    let label = match spec.trim() {
        "+" => "plus",
        "-" => "minus",
        "0" => "zero",
        other => other,
    };
    if let Some(found) = all.iter().find(|(l, _)| l == label) {
        return Ok(vec![found.clone()]);
    }
    let coords: Result<Vec<f64>, _> = spec.split(',').map(|s| s.trim().parse::<f64>()).collect();
    match coords {
        Ok(x) if x.len() == msbif_core::Sde::dim(model) => {
            let x = msbif_core::equilibria::solve_equilibrium(
                model,
                &x,
                msbif_core::equilibria::NEWTON_TOL,
                msbif_core::equilibria::NEWTON_MAX_ITER,
            )
            .map_err(|e| CliError::Analysis(format!("no equilibrium near {spec}: {e}")))?;
            Ok(vec![(spec.to_string(), x)])
        }
        _ => {
            let labels: Vec<&str> = all.iter().map(|(l, _)| l.as_str()).collect();
            Err(CliError::Config(format!(
                "unknown equilibrium `{spec}`; available: {}",
                labels.join(", ")
            )))
        }
    }
}

#[derive(Debug, Serialize)]
struct EquilibriumReport {
    label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    stability: Option<StabilityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    remainder: Option<RemainderBound>,
}

#[derive(Debug, Serialize)]
struct AnalyzeReport {
    model: String,
    variant: String,
    params: BTreeMap<String, f64>,
    dissipativity: Option<DissipativityCertificate>,
    equilibria: Vec<EquilibriumReport>,
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<String, CliError> {
    let file = load_config(&args.model)?;
    let (model, d1, d2) = resolve_model(&args.model, &file)?;
    let eqs = select_equilibria(&model, args.equilibrium.as_deref().or(file.equilibrium.as_deref()))?;
    if eqs.is_empty() {
        return Err(CliError::Analysis("no equilibria found".into()));
    }
    let dissipativity = dissipativity_constants(&model, 2.0).and_then(|m| {
        check_dissipative(&model, 2.0, m.alpha2, m.alpha3, m.alpha1, DEFAULT_RADIUS, DEFAULT_SAMPLES, 0).ok()
    });
    let reports: Vec<EquilibriumReport> = eqs
        .into_iter()
        .map(|(label, x)| match analyze(&model, &x, d1, d2) {
            Ok(r) => EquilibriumReport {
                label,
                remainder: remainder_bounds(&model, &x, x.iter().map(|v| v * v).sum::<f64>().sqrt()).ok(),
                stability: Some(r),
                error: None,
            },
            Err(e) => EquilibriumReport {
                label,
                stability: None,
                error: Some(e.to_string()),
                remainder: None,
            },
        })
        .collect();
    if reports.iter().all(|r| r.stability.is_none()) {
        let msgs: Vec<String> = reports.iter().filter_map(|r| r.error.clone()).collect();
        return Err(CliError::Analysis(msgs.join("; ")));
    }
    let report = AnalyzeReport {
        model: model.name().to_string(),
        variant: model.variant().to_string(),
        params: model.params().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        dissipativity,
        equilibria: reports,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match &args.out {
        Some(path) => {
            write_file(path, json.as_bytes())?;
            Ok(format!("wrote {}\n", path.display()))
        }
        None => Ok(json),
    }
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<String, CliError> {
    let file = load_config(&args.model)?;
    let (model, d1, d2) = resolve_model(&args.model, &file)?;
    let param = args
        .sweep_param
        .clone()
        .or(file.sweep_param)
        .ok_or_else(|| CliError::Config("--sweep-param is required".into()))?;
    let from = args.from.or(file.from).ok_or_else(|| CliError::Config("--from is required".into()))?;
    let to = args.to.or(file.to).ok_or_else(|| CliError::Config("--to is required".into()))?;
    let steps = args.steps.or(file.steps).unwrap_or(96);
    let rows = run_sweep(&model, &param, (from, to), steps, d1, d2).map_err(config_err)?;
    let mut csv = Vec::new();
    write_sweep_csv(&rows, &model, d1, d2, &mut csv).expect("write to memory");
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("sweep.csv"));
    write_file(&out, &csv)?;
    let mut msg = format!("wrote {} ({} rows)\n", out.display(), rows.len());
    for field in [CrossingField::LambdaMaxA, CrossingField::Mu] {
        for ev in detect_crossings(&model, &rows, field, d1, d2) {
            msg.push_str(&format!(
                "{} = 0 on branch {} at {} = {}{}\n",
                field.name(),
                ev.branch_id,
                param,
                ev.param_value,
                if ev.refined { "" } else { " (unrefined)" }
            ));
        }
    }
    if let Some(svg_path) = &args.svg {
        let table = csvio::parse_sweep(std::str::from_utf8(&csv).expect("utf8"))?;
        write_file(svg_path, svg::bifurcation_svg(&table).as_bytes())?;
        msg.push_str(&format!("wrote {}\n", svg_path.display()));
    }
    Ok(msg)
}

/// The paths CSV for `args`, without touching the filesystem.
pub fn simulate_csv(args: &SimulateArgs) -> Result<(Vec<u8>, Vec<svg::Level>), CliError> {
    let file = load_config(&args.model)?;
    let (model, d1, d2) = resolve_model(&args.model, &file)?;
    let eqs = select_equilibria(&model, args.equilibrium.as_deref().or(file.equilibrium.as_deref()))?;
    let chosen = if args.equilibrium.is_some() || file.equilibrium.is_some() {
        eqs.first().cloned()
    } else {
        eqs.iter()
            .find(|(_, x)| det_classify(&model, x).is_ok_and(|(_, stable)| stable))
            .or(eqs.first())
            .cloned()
    };
    let (_, x_star) = chosen.ok_or_else(|| CliError::Analysis("no equilibrium to start from".into()))?;
    let mut cfg = SimConfig::new(x_star.clone(), args.t_end.or(file.t_end).unwrap_or(100.0));
    cfg.dt = args.dt.or(file.dt).unwrap_or(0.01);
    cfg.n_paths = args.paths.or(file.paths).unwrap_or(5);
    cfg.seed = args.seed.or(file.seed).unwrap_or(0);
    cfg.radius = args.radius.or(file.radius).unwrap_or(1e-6);
    let ens = tamed_em(&model, &cfg).map_err(config_err)?;
    let mut csv = Vec::new();
    write_paths_csv(&ens, &mut csv).expect("write to memory");
    let beta = analyze(&model, &x_star, d1, d2).ok().and_then(|r| r.beta());
    Ok((csv, vec![svg::Level { value: x_star[0], beta }]))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<String, CliError> {
    let (csv, levels) = simulate_csv(args)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("paths.csv"));
    write_file(&out, &csv)?;
    let mut msg = format!("wrote {}\n", out.display());
    if let Some(svg_path) = &args.svg {
        let table = csvio::parse_paths(std::str::from_utf8(&csv).expect("utf8"))?;
        write_file(svg_path, svg::paths_svg(&table, &levels).as_bytes())?;
        msg.push_str(&format!("wrote {}\n", svg_path.display()));
    }
    Ok(msg)
}

pub fn format_check(c: &Check) -> String {
    let verdict = if c.passed { "PASS" } else { "FAIL" };
    let numbers = if c.measured.is_nan() && c.expected.is_nan() {
        String::new()
    } else {
        format!(": measured {:.10e}, expected {:.10e}, tolerance {:.3e}", c.measured, c.expected, c.tolerance)
    };
    let detail = if c.detail.is_empty() { String::new() } else { format!(" ({})", c.detail) };
    format!("{verdict} [{}] {}{numbers}{detail}", c.criterion, c.name)
}

/// Fixed-seed simulation rendered on 1 and on 8 workers.
pub fn determinism_check() -> Check {
    let args = SimulateArgs {
        model: ModelArgs {
            model: Some("pitchfork".into()),
            variant: Some("additive".into()),
            ..ModelArgs::default()
        },
        equilibrium: Some("plus".into()),
        paths: Some(64),
        t_end: Some(2.0),
        dt: None,
        seed: Some(42),
        radius: None,
        out: None,
        svg: None,
    };
    let run_on = |n: usize| -> Result<Vec<u8>, CliError> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(config_err)?;
        pool.install(|| simulate_csv(&args)).map(|(csv, _)| csv)
    };
    let (passed, detail) = match (run_on(1), run_on(8)) {
        (Ok(a), Ok(b)) => (a == b, format!("{} vs {} bytes", a.len(), b.len())),
        (Err(e), _) | (_, Err(e)) => (false, format!("error: {e}")),
    };
    Check {
        criterion: 12,
        name: "paths.csv byte-identical on 1 and 8 workers".into(),
        measured: f64::NAN,
        expected: f64::NAN,
        tolerance: f64::NAN,
        passed,
        detail,
    }
}

pub fn cmd_validate(args: &ValidateArgs) -> Result<String, CliError> {
    let opts = ValidateOptions {
        quick: args.quick,
        seed: args.seed.unwrap_or(ValidateOptions::default().seed),
        beta_sq_oracle: args.force_beta_sq,
        ..ValidateOptions::default()
    };
    let mut checks = run_validation(&opts);
    checks.push(determinism_check());
    checks.sort_by_key(|c| c.criterion);
    let failed = checks.iter().filter(|c| !c.passed).count();
    let mut text: String = checks.iter().map(|c| format_check(c) + "\n").collect();
    text.push_str(&format!("{} checks, {} failed\n", checks.len(), failed));
    if failed > 0 {
        Err(CliError::Validation(text))
    } else {
        Ok(text)
    }
}

pub fn cmd_render(args: &RenderArgs) -> Result<String, CliError> {
    let text = fs::read_to_string(&args.input).map_err(io_err(&args.input))?;
    let kind = match args.kind {
        Some(k) => k,
        None => match csvio::detect_kind(&text) {
            Some("bifurcation") => FigureKind::Bifurcation,
            Some(_) => FigureKind::Paths,
            None => return Err(CliError::SchemaMismatch("cannot tell the CSV layout from its header".into())),
        },
    };
    let svg = match kind {
        FigureKind::Bifurcation => svg::bifurcation_svg(&csvio::parse_sweep(&text)?),
        FigureKind::Paths => svg::paths_svg(&csvio::parse_paths(&text)?, &[]),
    };
    let out = args.out.clone().unwrap_or_else(|| args.input.with_extension("svg"));
    write_file(&out, svg.as_bytes())?;
    Ok(format!("wrote {}\n", out.display()))
}
