//! `lcd`: fit, evaluate, sample and summarise log-concave density
//! estimates from CSV data.
//!
//! Exit codes: 0 ok, 1 I/O or malformed input file, 2 invalid input,
//! 3 not converged (outputs still written), 4 degenerate.

pub mod io;
pub mod simulate;

use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use logconcave::functionals::{bootstrap, entropy, hdr, PlugInEntropy, SampleMean, DEFAULT_HDR_DRAWS};
use logconcave::geometry::DataSet;
use logconcave::mixture::{cluster_assign, e_step_with, em_fit, gaussian_em, misclassified, EmOptions, OrphanPolicy};
use logconcave::mle::{fit, LogConcaveDensity};
use logconcave::sampler::sample_sharded;
use logconcave::solver::SolverOptions;
use logconcave::Error;

use crate::io::{finish, read_points, write_row, writer};
use crate::simulate::{mean_se, simulate, ScenarioKind, SimulationConfig};

#[derive(Debug)]
pub enum CliError {
    Io(String),
    Invalid(String),
    NotConverged(String),
    Degenerate(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io(_) => 1,
            Self::Invalid(_) => 2,
            Self::NotConverged(_) => 3,
            Self::Degenerate(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(m) | Self::Invalid(m) | Self::Degenerate(m) => f.write_str(m),
            Self::NotConverged(m) => write!(f, "not converged: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Io(_) | Error::Format { .. } => Self::Io(m),
            // unusable point sets are bad input rather than a degenerate fit
            Error::DegenerateInput(_)
            | Error::InvalidInput(_)
            | Error::UnsupportedDim(_)
            | Error::Integrand { .. }
            | Error::OrphanPoint(_) => Self::Invalid(m),
            Error::DegenerateComponent { .. }
            | Error::AllRestartsDegenerate(_)
            | Error::BootstrapFailures { .. }
            | Error::Overflow { .. }
            | Error::CallbackFailure(_) => Self::Degenerate(m),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "lcd", version, about = "Log-concave density estimation")]
pub struct Cli {
    /// Worker threads for parallel stages (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the maximum likelihood estimate and write a model file.
    Fit(FitArgs),
    /// Evaluate a fitted density at points from a CSV.
    Eval(EvalArgs),
    /// Draw exact samples from a fitted density.
    Sample(SampleArgs),
    /// Plug-in differential entropy by Monte Carlo.
    Entropy(EntropyArgs),
    /// Highest-density-region thresholds and their coverage.
    Hdr(HdrArgs),
    /// Parametric bootstrap of a statistic.
    Boot(BootArgs),
    /// Mixture clustering by EM.
    Em(EmArgs),
    /// Density on a regular grid (d ≤ 3).
    Grid(GridArgs),
    /// Simulation study against a known density. The kernel baseline uses
    /// the bandwidth given with --bandwidth; no bandwidth selector is
    /// provided.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SolverArgs {
    /// Relative objective-change tolerance.
    #[arg(long, default_value_t = 1e-8)]
    pub delta: f64,
    /// Argument-change tolerance.
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    /// Integral tolerance `|∫f̂ − 1|`.
    #[arg(long, default_value_t = 1e-4)]
    pub eta: f64,
    /// Space dilation coefficient.
    #[arg(long, default_value_t = 2.0)]
    pub dilation: f64,
    #[arg(long, default_value_t = 20_000)]
    pub max_iter: usize,
    /// Plain subgradient iterations after the r-algorithm.
    #[arg(long, default_value_t = 0)]
    pub polish: usize,
}

impl SolverArgs {
    pub fn options(&self) -> Result<SolverOptions, CliError> {
        let opts = SolverOptions {
            delta: self.delta,
            eps: self.eps,
            eta: self.eta,
            dilation: self.dilation,
            max_iter: self.max_iter,
            polish_iterations: self.polish,
            ..SolverOptions::default()
        };
        opts.validate()?;
        Ok(opts)
    }
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Data CSV.
    #[arg(long)]
    pub input: PathBuf,
    /// Model file to write.
    #[arg(long)]
    pub output: PathBuf,
    /// Write the "iter,objective" trace here.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Query points CSV.
    #[arg(long)]
    pub points: PathBuf,
    /// Output CSV (stdout when absent).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub seed: u64,
    /// Independent streams; output is shard-major.
    #[arg(long, default_value_t = 1)]
    pub shards: usize,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EntropyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub draws: usize,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct HdrArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated levels in (0, 1).
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub alpha: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_HDR_DRAWS)]
    pub draws: usize,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct BootArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// `entropy` or `mean:<coordinate>`.
    #[arg(long, default_value = "entropy")]
    pub statistic: String,
    #[arg(long, default_value_t = 200)]
    pub replicates: usize,
    /// Resample size (default: the model's n).
    #[arg(long)]
    pub m: Option<usize>,
    /// Draws for Monte Carlo statistics.
    #[arg(long, default_value_t = 2000)]
    pub draws: usize,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug)]
pub struct EmArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub components: usize,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub max_em_iter: usize,
    /// Fit Gaussian components instead (baseline).
    #[arg(long, default_value_t = false)]
    pub gaussian: bool,
    /// Labels CSV: row, label, max responsibility (stdout when absent).
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Points per axis.
    #[arg(long, default_value_t = 100)]
    pub resolution: usize,
    /// Per-axis `lo:hi`, comma-separated (default: the data's bounding box).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub bounds: Vec<String>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// One of std_normal, dep_normal_02, gamma21_indep, mix1, mix2, mix3.
    #[arg(long)]
    pub scenario: String,
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 20)]
    pub replications: usize,
    #[arg(long)]
    pub seed: u64,
    /// Kernel bandwidths, one value or one per coordinate.
    #[arg(long, value_delimiter = ',')]
    pub bandwidth: Vec<f64>,
    /// Truth draws for ISE and HDR errors.
    #[arg(long, default_value_t = 2000)]
    pub ise_draws: usize,
    #[arg(long, default_value_t = 10_000)]
    pub entropy_draws: usize,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Refuse runs projected to take longer than this.
    #[arg(long, default_value_t = 3600.0)]
    pub budget_secs: f64,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if cli.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
            .map_err(|e| CliError::Invalid(e.to_string()))?;
    }
    let jobs = rayon::current_num_threads();
    match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Entropy(a) => cmd_entropy(&a),
        Command::Hdr(a) => cmd_hdr(&a),
        Command::Boot(a) => cmd_boot(&a),
        Command::Em(a) => cmd_em(&a),
        Command::Grid(a) => cmd_grid(&a),
        Command::Simulate(a) => cmd_simulate(&a, jobs),
    }
}

fn load_model(path: &Path) -> Result<LogConcaveDensity, CliError> {
    let file = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    LogConcaveDensity::load(std::io::BufReader::new(file)).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn load_data(path: &Path) -> Result<(DataSet, Option<Vec<String>>), CliError> {
    let table = read_points(path)?;
    Ok((DataSet::new(&table.points)?, table.labels))
}

fn num(v: f64) -> String {
    v.to_string()
}

/// A `name,value,se` record on stdout.
fn record(name: &str, value: f64, se: Option<f64>) {
    println!("{name},{value},{}", se.map(num).unwrap_or_default());
}

pub fn cmd_fit(a: &FitArgs) -> Result<(), CliError> {
    let (data, _) = load_data(&a.input)?;
    let mut opts = a.solver.options()?;
    opts.trace = a.trace.is_some();
    let start = Instant::now();
    let fitted = fit(&data, &opts)?;
    let secs = start.elapsed().as_secs_f64();
    let file = File::create(&a.output).map_err(|e| CliError::Io(format!("{}: {e}", a.output.display())))?;
    fitted.model.save(std::io::BufWriter::new(file))?;
    if let (Some(path), Some(trace)) = (&a.trace, &fitted.report.trace) {
        let mut out = std::io::BufWriter::new(File::create(path).map_err(|e| CliError::Io(e.to_string()))?);
        for (i, v) in trace {
            std::io::Write::write_fmt(&mut out, format_args!("{i},{v}\n")).map_err(|e| CliError::Io(e.to_string()))?;
        }
    }
    let r = &fitted.report;
    println!(
        "n={} d={} iterations={} sigma={} integral={} seconds={:.3}",
        data.len(),
        data.dim(),
        r.iterations,
        r.sigma,
        fitted.model.total_integral(),
        secs
    );
    if !r.converged {
        return Err(CliError::NotConverged(format!("{:?} after {} iterations; model written", r.termination, r.iterations)));
    }
    Ok(())
}

fn check_dim(model: &LogConcaveDensity, d: usize) -> Result<(), CliError> {
    if d != model.dim() {
        return Err(CliError::Invalid(format!("points have {d} columns, model has d = {}", model.dim())));
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let table = read_points(&a.points)?;
    check_dim(&model, table.points[0].len())?;
    let mut w = writer(a.output.as_deref())?;
    let header = (0..model.dim()).map(|c| format!("x{}", c + 1)).chain(["density".into(), "log_density".into()]);
    write_row(&mut w, header)?;
    for x in &table.points {
        let l = model.log_density(x);
        write_row(&mut w, x.iter().map(|v| num(*v)).chain([num(l.exp()), num(l)]))?;
    }
    finish(w)
}

pub fn cmd_sample(a: &SampleArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let batch = sample_sharded(&model, a.count, a.seed, a.shards)?;
    let mut w = writer(a.output.as_deref())?;
    write_row(&mut w, (0..model.dim()).map(|c| format!("x{}", c + 1)))?;
    for p in &batch.points {
        write_row(&mut w, p.iter().map(|v| num(*v)))?;
    }
    finish(w)?;
    eprintln!("acceptance_rate={}", batch.acceptance_rate);
    Ok(())
}

pub fn cmd_entropy(a: &EntropyArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let e = entropy(&model, a.draws, a.seed)?;
    record("entropy", e.estimate, Some(e.standard_error));
    Ok(())
}

pub fn cmd_hdr(a: &HdrArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    for &alpha in &a.alpha {
        let h = hdr(&model, alpha, a.draws, a.seed)?;
        record(&format!("f_alpha[{alpha}]"), h.f_alpha, None);
        record(&format!("coverage[{alpha}]"), h.coverage_est, Some(h.coverage_se));
    }
    Ok(())
}

pub fn cmd_boot(a: &BootArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let opts = a.solver.options()?;
    let m = a.m.unwrap_or(model.data().len());
    let summary = if a.statistic == "entropy" {
        bootstrap(&model, &PlugInEntropy { draws: a.draws }, a.replicates, m, a.seed, &opts)?
    } else if let Some(c) = a.statistic.strip_prefix("mean:") {
        let coordinate = c
            .parse()
            .map_err(|_| CliError::Invalid(format!("bad coordinate in `{}`", a.statistic)))?;
        bootstrap(&model, &SampleMean { coordinate }, a.replicates, m, a.seed, &opts)?
    } else {
        return Err(CliError::Invalid(format!("unknown statistic `{}`", a.statistic)));
    };
    let s = &summary.statistic;
    record(s, summary.estimate, Some(summary.standard_error));
    record(&format!("{s}.lo95"), summary.lo, None);
    record(&format!("{s}.hi95"), summary.hi, None);
    record(&format!("{s}.failed"), summary.failed as f64, None);
    Ok(())
}

pub fn cmd_em(a: &EmArgs) -> Result<(), CliError> {
    let (data, truth) = load_data(&a.input)?;
    let opts = EmOptions {
        solver: a.solver.options()?,
        max_iter: a.max_em_iter,
        ..EmOptions::default()
    };
    let (labels, max_resp, loglik) = if a.gaussian {
        let g = gaussian_em(&data, a.components, a.restarts, a.seed)?;
        let resp = g.responsibilities(&data);
        (g.assign(&data), resp, g.log_likelihood(&data))
    } else {
        let m = em_fit(&data, a.components, a.restarts, a.seed, &opts)?;
        let r = e_step_with(&m, &data, OrphanPolicy::Uniform)?;
        let resp = (0..r.n).map(|i| r.row(i).iter().copied().fold(0.0, f64::max)).collect();
        (cluster_assign(&m, &data), resp, m.log_likelihood(&data))
    };
    let mut w = writer(a.output.as_deref())?;
    write_row(&mut w, ["row".into(), "label".into(), "max_responsibility".into()])?;
    for (i, (l, r)) in labels.iter().zip(&max_resp).enumerate() {
        write_row(&mut w, [(i + 1).to_string(), l.to_string(), num(*r)])?;
    }
    finish(w)?;
    eprintln!("loglik={loglik}");
    if let Some(truth) = truth {
        let mut classes: Vec<&String> = truth.iter().collect();
        classes.sort();
        classes.dedup();
        if classes.len() == a.components {
            let t: Vec<usize> = truth.iter().map(|s| classes.iter().position(|c| *c == s).unwrap() + 1).collect();
            eprintln!("misclassified={}", misclassified(&labels, &t, a.components));
        }
    }
    Ok(())
}

fn parse_bounds(spec: &[String], model: &LogConcaveDensity) -> Result<Vec<(f64, f64)>, CliError> {
    let d = model.dim();
    if spec.is_empty() {
        return Ok((0..d)
            .map(|c| {
                let vals: Vec<f64> = model.data().points().map(|p| p[c]).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            })
            .collect());
    }
    if spec.len() != d {
        return Err(CliError::Invalid(format!("need {d} bounds, got {}", spec.len())));
    }
    spec.iter()
        .map(|s| {
            let parsed = s.split_once(':').and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
            match parsed {
                Some((lo, hi)) if lo < hi => Ok((lo, hi)),
                _ => Err(CliError::Invalid(format!("bad bound `{s}`, expected lo:hi"))),
            }
        })
        .collect()
}

/// Row-major grid points (last coordinate fastest).
pub fn grid_points(bounds: &[(f64, f64)], resolution: usize) -> Vec<Vec<f64>> {
    let axis = |(lo, hi): (f64, f64)| -> Vec<f64> {
        (0..resolution).map(|k| lo + (hi - lo) * k as f64 / (resolution - 1) as f64).collect()
    };
    let mut points = vec![vec![]];
    for &b in bounds {
        let ticks = axis(b);
        points = points
            .into_iter()
            .flat_map(|p| ticks.iter().map(move |t| [p.clone(), vec![*t]].concat()))
            .collect();
    }
    points
}

pub fn cmd_grid(a: &GridArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    if model.dim() > 3 {
        return Err(Error::UnsupportedDim(model.dim()).into());
    }
    if a.resolution < 2 {
        return Err(CliError::Invalid("resolution must be at least 2".into()));
    }
    let bounds = parse_bounds(&a.bounds, &model)?;
    let mut w = writer(a.output.as_deref())?;
    let header = (0..model.dim()).map(|c| format!("x{}", c + 1)).chain(["density".into(), "log_density".into()]);
    write_row(&mut w, header)?;
    for x in grid_points(&bounds, a.resolution) {
        let l = model.log_density(&x);
        write_row(&mut w, x.iter().map(|v| num(*v)).chain([num(l.exp()), num(l)]))?;
    }
    finish(w)
}

pub fn cmd_simulate(a: &SimulateArgs, jobs: usize) -> Result<(), CliError> {
    let scenario: ScenarioKind = a.scenario.parse().map_err(CliError::Invalid)?;
    let bandwidth = match a.bandwidth.len() {
        0 => None,
        1 => Some(vec![a.bandwidth[0]; a.d]),
        k if k == a.d => Some(a.bandwidth.clone()),
        k => return Err(CliError::Invalid(format!("{k} bandwidths for d = {}", a.d))),
    };
    if bandwidth.as_ref().is_some_and(|h| h.iter().any(|v| *v <= 0.0)) {
        return Err(CliError::Invalid("bandwidths must be positive".into()));
    }
    let cfg = SimulationConfig {
        scenario,
        d: a.d,
        n: a.n,
        replications: a.replications,
        seed: a.seed,
        bandwidth,
        ise_draws: a.ise_draws,
        entropy_draws: a.entropy_draws,
        alpha: a.alpha,
        budget_secs: a.budget_secs,
        jobs,
        solver: a.solver.options()?,
    };
    let reps = simulate(&cfg)?;
    let mut w = writer(a.output.as_deref())?;
    write_row(
        &mut w,
        ["scenario", "n", "d", "rep", "ise_lcd", "ise_kernel", "entropy_sq_err", "hdr_symdiff", "iterations", "converged", "seconds"]
            .map(String::from),
    )?;
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    for r in &reps {
        write_row(
            &mut w,
            [
                scenario.name().into(),
                a.n.to_string(),
                a.d.to_string(),
                r.index.to_string(),
                num(r.ise_lcd),
                opt(r.ise_kernel),
                num(r.entropy_sq_err),
                num(r.hdr_symdiff),
                r.iterations.to_string(),
                r.converged.to_string(),
                num(r.seconds),
            ],
        )?;
    }
    let column = |f: &dyn Fn(&simulate::Replication) -> Option<f64>| -> Option<(f64, f64)> {
        let v: Option<Vec<f64>> = reps.iter().map(f).collect();
        v.map(|v| mean_se(&v))
    };
    let cols = [
        column(&|r| Some(r.ise_lcd)),
        column(&|r| r.ise_kernel),
        column(&|r| Some(r.entropy_sq_err)),
        column(&|r| Some(r.hdr_symdiff)),
        column(&|r| Some(r.iterations as f64)),
    ];
    for (tag, pick) in [("mean", 0usize), ("se", 1)] {
        let get = |c: &Option<(f64, f64)>| opt(c.map(|(m, s)| if pick == 0 { m } else { s }));
        write_row(
            &mut w,
            [
                scenario.name().into(),
                a.n.to_string(),
                a.d.to_string(),
                tag.into(),
                get(&cols[0]),
                get(&cols[1]),
                get(&cols[2]),
                get(&cols[3]),
                get(&cols[4]),
                reps.iter().all(|r| r.converged).to_string(),
                String::new(),
            ],
        )?;
    }
    finish(w)
}
