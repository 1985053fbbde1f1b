//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 bad input data, 3 numerical
//! failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::areas::{compute_areas_with, split_areas, AreaOptions, DEFAULT_LAMBDA};
use crate::error::{Error, Result};
use crate::fit::{fit, Dataset, FitConfig, FitResult, FitTarget, GradientMode};
use crate::hpopt::{optimize_knob, BalanceWeights, DeltaReference, Knob, KnobSpace, ScheduleTemplate};
use crate::io::{
    from_json, read_json, read_loss_log, read_manifest, read_schedule, write_curve_csv, write_json,
    write_loss_log, write_run, SynthDoc,
};
use crate::law::{predict_curve_with, Domain, EvalContext, LawParams, PredictOptions};
use crate::ood::{fit_ood_with, OodConstraint};
use crate::plot::{line_chart, Line};
use crate::synth::generate;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Seed used when `--seed` is not given.
pub const DEFAULT_SEED: u64 = 20_240_607;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandOutcome {
    pub exit_code: i32,
    pub report_paths: Vec<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(name = "cptlaw", version, about = "Continual pre-training loss law toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Forward and annealing areas of a schedule, per step.
    Areas(AreasArgs),
    /// Fit law parameters to one or more runs.
    Fit(FitArgs),
    /// Predict a loss curve for a schedule.
    Predict(PredictArgs),
    /// Generate synthetic runs from known parameters.
    Simulate(SimulateArgs),
    /// Search one schedule knob for the best PT/CPT balance.
    Optimize(OptimizeArgs),
    /// Fit out-of-domain loss as a combination of the two domain losses.
    Ood(OodArgs),
    /// Evaluate the law at one area point.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct AreasArgs {
    #[arg(long)]
    schedule: PathBuf,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Weight momentum contributions by eta^EPS.
    #[arg(long, value_name = "EPS")]
    lr_weight: Option<f64>,
    #[arg(long)]
    reset_momentum: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TargetArg {
    Pt,
    Cpt,
    Joint,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DomainArg {
    Pt,
    Cpt,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Pt => Domain::Pt,
            DomainArg::Cpt => Domain::Cpt,
        }
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Run manifest; repeat for several runs.
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long, value_enum)]
    target: Option<TargetArg>,
    #[arg(long)]
    analytic_gradient: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Law parameters, or a fit result.
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    schedule: PathBuf,
    #[arg(long, value_enum, default_value = "pt")]
    domain: DomainArg,
    #[arg(long, default_value_t = 1.0)]
    r_cpt: f64,
    #[arg(long = "model-size", value_name = "N")]
    n: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Include PT steps.
    #[arg(long)]
    track_pt: bool,
    /// PT forward area to use instead of the schedule's.
    #[arg(long)]
    s1_pt: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Overrides the seed stored in the synthetic-run file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KnobArg {
    LossPotential,
    PeakLr,
    ReplayRatio,
    CptSteps,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReferenceArg {
    CptStart,
    PreAnneal,
}

#[derive(Debug, Args)]
struct OptimizeArgs {
    #[arg(long, value_enum)]
    knob: KnobArg,
    #[arg(long)]
    lambda1: f64,
    /// Second weight; defaults to 1 - lambda1.
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    params_pt: PathBuf,
    #[arg(long)]
    params_cpt: PathBuf,
    #[arg(long)]
    template: Option<PathBuf>,
    /// Train both domains from scratch (no PT phase).
    #[arg(long)]
    from_scratch: bool,
    #[arg(long, value_enum)]
    reference: Option<ReferenceArg>,
    #[arg(long)]
    lo: Option<f64>,
    #[arg(long)]
    hi: Option<f64>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// CSV of the scanned (knob, objective) curve.
    #[arg(long)]
    curve: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ConstraintArg {
    None,
    Nonnegative,
    SumToOne,
}

#[derive(Debug, Args)]
struct OodArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    pt_col: String,
    #[arg(long)]
    cpt_col: String,
    #[arg(long)]
    ood_col: String,
    #[arg(long, value_enum, default_value = "none")]
    constraint: ConstraintArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    params: PathBuf,
    /// s1pt=..,s2pt=..,s1cpt=..,s2cpt=..
    #[arg(long)]
    at: String,
    #[arg(long, value_enum, default_value = "pt")]
    domain: DomainArg,
    #[arg(long, default_value_t = 1.0)]
    r_cpt: f64,
    #[arg(long = "model-size", value_name = "N")]
    n: Option<f64>,
}

/// Runs the CLI on `argv` (including the program name), printing to
/// stdout and stderr.
pub fn run<I, T>(argv: I) -> CommandOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    run_with_output(argv, &mut lock)
}

pub fn run_with_output<I, T>(argv: I, out: &mut dyn Write) -> CommandOutcome
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return CommandOutcome {
                exit_code: code,
                report_paths: Vec::new(),
            };
        }
    };
    let result = match thread_pool() {
        Ok(Some(pool)) => pool.install(|| dispatch(cli.command)),
        Ok(None) => dispatch(cli.command),
        Err(e) => Err(e),
    };
    let result = result.and_then(|(paths, text)| {
        out.write_all(text.as_bytes())?;
        Ok(paths)
    });
    match result {
        Ok(report_paths) => CommandOutcome {
            exit_code: EXIT_OK,
            report_paths,
        },
        Err(e) => {
            eprintln!("error: {e}");
            CommandOutcome {
                exit_code: exit_code(&e),
                report_paths: Vec::new(),
            }
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_DATA
    }
}

/// A pool capped by `CPTLAW_THREADS`, when set.
fn thread_pool() -> Result<Option<rayon::ThreadPool>> {
    let Ok(raw) = std::env::var("CPTLAW_THREADS") else {
        return Ok(None);
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("CPTLAW_THREADS={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map(Some)
        .map_err(|e| Error::InvalidArgument(format!("cannot start {n} threads: {e}")))
}

/// Written files and text for stdout.
fn dispatch(command: Command) -> Result<(Vec<PathBuf>, String)> {
    let paths = match command {
        Command::Areas(a) => cmd_areas(a)?,
        Command::Fit(a) => cmd_fit(a)?,
        Command::Predict(a) => cmd_predict(a)?,
        Command::Simulate(a) => cmd_simulate(a)?,
        Command::Optimize(a) => cmd_optimize(a)?,
        Command::Ood(a) => cmd_ood(a)?,
        Command::Eval(a) => return Ok((Vec::new(), cmd_eval(a)?)),
    };
    Ok((paths, String::new()))
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    Ok(std::io::BufWriter::new(fs::File::create(path)?))
}

fn write_svg(path: &Path, svg: &str) -> Result<()> {
    fs::write(path, svg)?;
    Ok(())
}

fn cmd_areas(a: AreasArgs) -> Result<Vec<PathBuf>> {
    let schedule = read_schedule(&a.schedule)?;
    let mut opts = AreaOptions::new(a.lambda);
    opts.lr_weight_exponent = a.lr_weight;
    opts.reset_momentum_at_boundary = a.reset_momentum;
    let trace = compute_areas_with(&schedule, &opts)?;
    let split = split_areas(&trace)?;
    let steps: Vec<usize> = (1..=trace.len()).collect();
    let (mut s1c, mut s2c) = (Vec::with_capacity(steps.len()), Vec::with_capacity(steps.len()));
    for &t in &steps {
        let p = split.point_at(&trace, t);
        s1c.push(p.s1_cpt);
        s2c.push(p.s2_cpt);
    }
    write_loss_log(
        create(&a.out)?,
        &steps,
        &[
            ("eta", &trace.eta),
            ("m", &trace.m),
            ("s1", &trace.s1),
            ("s2", &trace.s2),
            ("s1_cpt", &s1c),
            ("s2_cpt", &s2c),
        ],
    )?;
    let mut paths = vec![a.out];
    if let Some(svg) = a.svg {
        let pts = |v: &[f64]| steps.iter().zip(v).map(|(t, y)| (*t as f64, *y)).collect();
        write_svg(
            &svg,
            &line_chart("annealing area", "step", "S2", &[Line::new("S2", pts(&trace.s2))]),
        )?;
        paths.push(svg);
    }
    Ok(paths)
}

fn cmd_fit(a: FitArgs) -> Result<Vec<PathBuf>> {
    let mut config = match &a.config {
        Some(p) => read_json::<FitConfig>(p)?,
        None => FitConfig {
            seed: DEFAULT_SEED,
            ..FitConfig::default()
        },
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(n) = a.starts {
        config.n_starts = n;
    }
    if let Some(t) = a.target {
        config.target = match t {
            TargetArg::Pt => FitTarget::Pt,
            TargetArg::Cpt => FitTarget::Cpt,
            TargetArg::Joint => FitTarget::Joint,
        };
    }
    if a.analytic_gradient {
        config.gradient = GradientMode::Analytic;
    }
    let mut runs = Vec::new();
    let mut lambda = None;
    for path in &a.manifest {
        let loaded = read_manifest(path)?;
        if *lambda.get_or_insert(loaded.lambda) != loaded.lambda {
            return Err(Error::Data(format!(
                "{} uses lambda {}, other manifests use {}",
                path.display(),
                loaded.lambda,
                lambda.unwrap_or_default()
            )));
        }
        runs.push(loaded.run);
    }
    match (lambda, &a.config) {
        (Some(l), None) => config.lambda = l,
        (Some(l), Some(_)) if l != config.lambda => {
            return Err(Error::Data(format!(
                "manifests use lambda {l} but the fit config says {}",
                config.lambda
            )))
        }
        _ => {}
    }
    let result = fit(&Dataset::new(runs), &config)?;
    write_json(&a.out, &result)?;
    Ok(vec![a.out])
}

/// Parameters from a law-params file or from a fit result.
fn read_params(path: &Path) -> Result<(LawParams, Option<f64>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    if let Ok(fit) = from_json::<FitResult>(&text) {
        return Ok((fit.params, fit.fitted_s1_pt));
    }
    from_json::<LawParams>(&text)
        .map(|p| (p, None))
        .map_err(|e| match e {
            Error::Json(j) => Error::Data(format!("{}: {j}", path.display())),
            other => other,
        })
}

fn cmd_predict(a: PredictArgs) -> Result<Vec<PathBuf>> {
    let (params, fitted_s1) = read_params(&a.params)?;
    let schedule = read_schedule(&a.schedule)?;
    let ctx = EvalContext {
        r_cpt: a.r_cpt,
        n: a.n.unwrap_or(1.0),
        domain: a.domain.into(),
    };
    let opts = PredictOptions {
        lambda: a.lambda,
        track_pt: a.track_pt,
        stride: a.stride,
        s1_pt_override: a.s1_pt.or(fitted_s1),
        ..PredictOptions::default()
    };
    let curve = predict_curve_with(&params, &schedule, &opts, &ctx)?;
    let column = format!("loss_{}", ctx.domain);
    write_loss_log(create(&a.out)?, &curve.steps, &[(&column, &curve.values)])?;
    let mut paths = vec![a.out];
    if let Some(svg) = a.svg {
        let pts = curve.iter().map(|(t, v)| (t as f64, v)).collect();
        write_svg(
            &svg,
            &line_chart("predicted loss", "step", "loss", &[Line::new(column, pts)]),
        )?;
        paths.push(svg);
    }
    Ok(paths)
}

fn cmd_simulate(a: SimulateArgs) -> Result<Vec<PathBuf>> {
    let doc: SynthDoc = read_json(&a.spec)?;
    let mut spec = doc.to_spec()?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let dataset = generate(&spec)?;
    fs::create_dir_all(&a.out)?;
    let mut paths = Vec::new();
    for (i, run) in dataset.runs.iter().enumerate() {
        paths.extend(write_run(&a.out, &format!("run{i:03}"), run, spec.lambda)?);
    }
    Ok(paths)
}

fn cmd_optimize(a: OptimizeArgs) -> Result<Vec<PathBuf>> {
    let (params_pt, _) = read_params(&a.params_pt)?;
    let (params_cpt, _) = read_params(&a.params_cpt)?;
    let mut template = match &a.template {
        Some(p) => read_json::<ScheduleTemplate>(p)?,
        None => ScheduleTemplate::default(),
    };
    if a.from_scratch {
        template.from_scratch = true;
    }
    if let Some(r) = a.reference {
        template.reference = match r {
            ReferenceArg::CptStart => DeltaReference::CptStart,
            ReferenceArg::PreAnneal => DeltaReference::PreAnneal,
        };
    }
    let knob = match a.knob {
        KnobArg::LossPotential => Knob::LossPotential,
        KnobArg::PeakLr => Knob::PeakLr,
        KnobArg::ReplayRatio => Knob::ReplayRatio,
        KnobArg::CptSteps => Knob::CptSteps,
    };
    let weights = match a.lambda2 {
        Some(l2) => BalanceWeights::unnormalized(a.lambda1, l2)?,
        None => BalanceWeights::new(a.lambda1)?,
    };
    let mut space = KnobSpace::default_for(knob, template);
    if let Some(lo) = a.lo {
        space.lo = lo;
    }
    if let Some(hi) = a.hi {
        space.hi = hi;
    }
    if let Some(g) = a.grid {
        space.grid = g;
    }
    // The search has no randomness; --seed is accepted for symmetry with fit.
    let _ = a.seed;
    let report = optimize_knob(&space, &weights, &params_pt, &params_cpt)?;
    write_json(&a.out, &report)?;
    let mut paths = vec![a.out];
    if let Some(curve) = a.curve {
        write_curve_csv(create(&curve)?, &report)?;
        paths.push(curve);
    }
    if let Some(svg) = a.svg {
        let pts = report.curve.iter().map(|p| (p.knob, p.objective)).collect();
        write_svg(
            &svg,
            &line_chart("balance objective", &format!("{knob:?}"), "objective", &[Line::new("objective", pts)]),
        )?;
        paths.push(svg);
    }
    Ok(paths)
}

fn cmd_ood(a: OodArgs) -> Result<Vec<PathBuf>> {
    let log = read_loss_log(&a.log)?;
    let constraint = match a.constraint {
        ConstraintArg::None => OodConstraint::None,
        ConstraintArg::Nonnegative => OodConstraint::Nonnegative,
        ConstraintArg::SumToOne => OodConstraint::SumToOne,
    };
    let coeffs = fit_ood_with(
        &log.series(&a.pt_col)?,
        &log.series(&a.cpt_col)?,
        &log.series(&a.ood_col)?,
        constraint,
    )?;
    write_json(&a.out, &coeffs)?;
    Ok(vec![a.out])
}

fn cmd_eval(a: EvalArgs) -> Result<String> {
    let (params, _) = read_params(&a.params)?;
    let point = crate::io::parse_area_point(&a.at)?;
    let ctx = EvalContext {
        r_cpt: a.r_cpt,
        n: a.n.unwrap_or(1.0),
        domain: a.domain.into(),
    };
    ctx.validate()?;
    let breakdown = params.eval(&point, &ctx)?;
    Ok(serde_json::to_string_pretty(&breakdown)? + "\n")
}
