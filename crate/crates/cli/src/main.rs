//! `opinf`: batch front end for simulating, lifting, reducing, training,
//! tuning, predicting and evaluating.
//!
//! Every subcommand prints its effective settings as TOML before running.
//! Exit status is 0 on success, 2 on a usage error, and 3..=8 for I/O,
//! format, dimension, argument, numerical and configuration errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use opinf::data::{finite_difference_derivs, read_snapshots, write_snapshots, FiniteDifference, SnapshotFormat};
use opinf::error::Category;
use opinf::fom::FomProblem;
use opinf::lifting::{LiftingKind, LiftingMap};
use opinf::opinf::{ModelForm, ReducedModel, RegWeights};
use opinf::pipeline::{
    artifacts, build_basis, evaluate, run_pipeline, FomConfig, MetricSelection, PipelineConfig, PodConfig,
    PodMethodKind,
};
use opinf::pod::{project_unscaled, reconstruct, PodBasis};
use opinf::rom::{integrate, write_trajectory_csv, ForcingSignal, Scheme};
use opinf::tuning::{fit, tune, write_ledger, GridAxis, RegularizationPlan, TrialSettings};
use opinf::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "opinf",
    version,
    about = "Reduced polynomial models learned from snapshot data"
)]
struct Cli {
    /// Seed for every randomized component (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a full-order simulation from the `[fom]` section of a config.
    Simulate(SimulateArgs),
    /// Apply a lifting map to a snapshot file.
    Lift(LiftArgs),
    /// Center, scale and compute a POD basis.
    Basis(BasisArgs),
    /// Infer a reduced model with fixed regularization.
    Train(TrainArgs),
    /// Grid-search the regularization weights.
    Tune(TuneArgs),
    /// Integrate a reduced model.
    Predict(PredictArgs),
    /// Compare a prediction with reference snapshots.
    Evaluate(EvaluateArgs),
    /// Run the whole chain from one config file.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// `binary` or `csv`; guessed from the extension when omitted.
    #[arg(long)]
    format: Option<SnapshotFormat>,
    #[arg(long)]
    n_x: Option<usize>,
    #[arg(long)]
    t_final: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    save_every: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct LiftArgs {
    #[arg(long)]
    input: PathBuf,
    /// `identity` or `cubic_rd`.
    #[arg(long)]
    kind: LiftingKind,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    format: Option<SnapshotFormat>,
}

#[derive(Debug, Args, Serialize)]
struct BasisArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, conflicts_with = "energy", required_unless_present = "energy")]
    r: Option<usize>,
    /// Smallest rank retaining this energy fraction.
    #[arg(long)]
    energy: Option<f64>,
    /// `thin_svd` or `randomized`.
    #[arg(long, default_value = "thin_svd")]
    method: PodMethodKind,
    #[arg(long, default_value_t = 10)]
    oversampling: usize,
    #[arg(long, default_value_t = 2)]
    power_iterations: usize,
    /// Rank computed before energy truncation with the randomized method.
    #[arg(long)]
    max_rank: Option<usize>,
    #[arg(long)]
    output: PathBuf,
    #[arg(skip)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct FormArgs {
    #[arg(long)]
    linear: bool,
    #[arg(long)]
    quadratic: bool,
    #[arg(long)]
    constant: bool,
    /// Number of input channels, each driven by the forcing signal.
    #[arg(long = "inputs", default_value_t = 0)]
    inputs: usize,
}

impl FormArgs {
    /// With none of the term flags set, all three terms are used.
    fn form(&self) -> Result<ModelForm> {
        if self.linear || self.quadratic || self.constant {
            ModelForm::new(self.linear, self.quadratic, self.constant, self.inputs)
        } else {
            ModelForm::new(true, true, true, self.inputs)
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct ForcingArgs {
    /// Sinusoidal input amplitude; no forcing when omitted.
    #[arg(long)]
    forcing_amplitude: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    forcing_frequency: f64,
    #[arg(long, default_value_t = 0.0)]
    forcing_offset: f64,
}

impl ForcingArgs {
    fn signal(&self) -> Result<ForcingSignal> {
        match self.forcing_amplitude {
            Some(a) => ForcingSignal::sinusoid(a, self.forcing_frequency, self.forcing_offset),
            None => Ok(ForcingSignal::none()),
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct TrainingData {
    #[arg(long)]
    basis: PathBuf,
    /// Unscaled snapshots with the basis' variable layout.
    #[arg(long)]
    snapshots: PathBuf,
    /// Recompute time derivatives by finite differences (`central`, `forward`).
    #[arg(long)]
    derivatives: Option<FiniteDifference>,
}

impl TrainingData {
    fn load(&self) -> Result<(PodBasis, opinf::pod::ReducedData)> {
        let basis = PodBasis::read(&self.basis)?;
        let mut set = read_snapshots(&self.snapshots, SnapshotFormat::from_path(&self.snapshots))?;
        if let Some(scheme) = self.derivatives {
            set = finite_difference_derivs(&set, scheme)?;
        }
        if set.dim() != basis.dim() {
            return Err(Error::Dimension(format!(
                "{} has snapshot dimension {}, basis {} expects {}",
                self.snapshots.display(),
                set.dim(),
                self.basis.display(),
                basis.dim()
            )));
        }
        let reduced = project_unscaled(&basis, &set)?;
        Ok((basis, reduced))
    }
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    data: TrainingData,
    #[command(flatten)]
    form: FormArgs,
    #[arg(long, default_value_t = 0.0)]
    gamma1: f64,
    #[arg(long, default_value_t = 0.0)]
    gamma2: f64,
    #[command(flatten)]
    forcing: ForcingArgs,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TuneArgs {
    #[command(flatten)]
    data: TrainingData,
    #[command(flatten)]
    form: FormArgs,
    #[arg(long, default_value_t = 1.0)]
    gamma1_lo: f64,
    #[arg(long, default_value_t = 1e7)]
    gamma1_hi: f64,
    #[arg(long, default_value_t = 15)]
    gamma1_count: usize,
    #[arg(long, default_value_t = 1e10)]
    gamma2_lo: f64,
    #[arg(long, default_value_t = 1e18)]
    gamma2_hi: f64,
    #[arg(long, default_value_t = 9)]
    gamma2_count: usize,
    #[arg(long, default_value_t = 1.2)]
    growth_factor: f64,
    /// Defaults to the time span of the snapshots.
    #[arg(long)]
    training_horizon: Option<f64>,
    /// Defaults to twice the training horizon.
    #[arg(long)]
    trial_horizon: Option<f64>,
    #[arg(long, default_value = "rk2_heun")]
    scheme: Scheme,
    #[arg(long, default_value_t = 1)]
    substeps: usize,
    #[command(flatten)]
    forcing: ForcingArgs,
    #[arg(long)]
    ledger: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    basis: PathBuf,
    /// Snapshot file holding the full-order initial state.
    #[arg(long)]
    initial: PathBuf,
    /// Column of `--initial` to start from.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Lifting applied to the initial state and undone on reconstruction.
    #[arg(long, default_value = "identity")]
    lifting: LiftingKind,
    #[arg(long)]
    horizon: f64,
    #[arg(long)]
    dt: f64,
    #[arg(long, default_value = "rk2_heun")]
    scheme: Scheme,
    #[arg(long, default_value_t = 1)]
    save_every: usize,
    #[command(flatten)]
    forcing: ForcingArgs,
    /// Reduced trajectory CSV.
    #[arg(long)]
    output: PathBuf,
    /// Also write the reconstructed full-order fields here.
    #[arg(long)]
    reconstruct: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    prediction: PathBuf,
    /// Variable name or index.
    #[arg(long, default_value = "0")]
    variable: String,
    /// `all`, `correlation` or `relative_error`.
    #[arg(long, default_value = "all")]
    metric: MetricSelection,
    /// Dof indices to trace, comma separated.
    #[arg(long, value_delimiter = ',')]
    probes: Vec<usize>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    gamma1: Option<f64>,
    #[arg(long)]
    gamma2: Option<f64>,
    #[arg(long)]
    scheme: Option<Scheme>,
}

/// Only the `[fom]` table is read; other sections are ignored.
#[derive(Debug, Deserialize)]
struct FomSection {
    fom: FomConfig,
}

fn print_effective<T: Serialize>(name: &str, settings: &T) -> Result<()> {
    let text = toml::to_string(settings).map_err(|e| Error::Config(e.to_string()))?;
    println!("# effective {name} settings\n{text}");
    Ok(())
}

fn format_for(path: &Path, explicit: Option<SnapshotFormat>) -> SnapshotFormat {
    explicit.unwrap_or_else(|| SnapshotFormat::from_path(path))
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
    let mut fom = toml::from_str::<FomSection>(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", args.config.display())))?
        .fom;
    if let Some(v) = args.n_x {
        fom.n_x = v;
    }
    if let Some(v) = args.t_final {
        fom.t_final = v;
    }
    if let Some(v) = args.dt {
        fom.dt = v;
    }
    if let Some(v) = args.save_every {
        fom.save_every = v;
    }
    print_effective("simulate", &fom)?;
    let problem: FomProblem = fom.problem()?;
    let set = problem.solve(fom.t_final, fom.dt, fom.save_every)?;
    write_snapshots(&set, &args.output, format_for(&args.output, args.format))?;
    println!(
        "wrote {} snapshots of dimension {} to {}",
        set.len(),
        set.dim(),
        args.output.display()
    );
    Ok(())
}

fn lift(args: LiftArgs) -> Result<()> {
    print_effective("lift", &args)?;
    let set = read_snapshots(&args.input, SnapshotFormat::from_path(&args.input))?;
    let map = LiftingMap::new(args.kind, set.layout().clone())?;
    let lifted = map.lift_snapshots(&set)?;
    write_snapshots(&lifted, &args.output, format_for(&args.output, args.format))
}

fn basis(args: BasisArgs) -> Result<()> {
    print_effective("basis", &args)?;
    let set = read_snapshots(&args.input, SnapshotFormat::from_path(&args.input))?;
    let config = PodConfig {
        r: args.r,
        energy: args.energy,
        method: args.method,
        oversampling: args.oversampling,
        power_iterations: args.power_iterations,
        max_rank: args.max_rank,
    };
    let basis = build_basis(&set, &config, args.seed)?;
    let (eta, eta_lb) = basis.energy(basis.rank())?;
    basis.write(&args.output)?;
    println!("rank = {}\nenergy = {eta}\nenergy_lower_bound = {eta_lb}", basis.rank());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    print_effective("train", &args)?;
    let (basis, data) = args.data.load()?;
    let weights = RegWeights::new(args.gamma1, args.gamma2)?;
    let (model, report) = fit(&data, &args.form.form()?, &weights, &args.forcing.signal()?)?;
    model.with_basis_ref(basis.fingerprint()).write(&args.output)?;
    println!(
        "solve = \"{:?}\"\nrank = {}\nunknowns = {}\ncondition = {}",
        report.method, report.rank, report.unknowns, report.condition
    );
    Ok(())
}

fn tune_cmd(args: TuneArgs) -> Result<()> {
    print_effective("tune", &args)?;
    let (basis, data) = args.data.load()?;
    let span = data.times.last().copied().unwrap_or(0.0) - data.times.first().copied().unwrap_or(0.0);
    let training_horizon = args.training_horizon.unwrap_or(span);
    let plan = RegularizationPlan {
        gamma1: GridAxis::new(args.gamma1_lo, args.gamma1_hi, args.gamma1_count)?,
        gamma2: GridAxis::new(args.gamma2_lo, args.gamma2_hi, args.gamma2_count)?,
        growth_factor: args.growth_factor,
        training_horizon,
        trial_horizon: args.trial_horizon.unwrap_or(2.0 * training_horizon),
    };
    let settings = TrialSettings {
        form: args.form.form()?,
        scheme: args.scheme,
        substeps: args.substeps,
        forcing: args.forcing.signal()?,
    };
    let result = tune(&plan, &data, &settings)?;
    write_ledger(&result.candidates, &args.ledger)?;
    result.model.with_basis_ref(basis.fingerprint()).write(&args.output)?;
    println!(
        "gamma1 = {}\ngamma2 = {}\ntraining_error = {}",
        result.weights.gamma1, result.weights.gamma2, result.training_error
    );
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    print_effective("predict", &args)?;
    let model = ReducedModel::read(&args.model)?;
    let basis = PodBasis::read(&args.basis)?;
    let fingerprint = basis.fingerprint();
    if !model.basis_ref().is_empty() && model.basis_ref() != fingerprint {
        return Err(Error::InvalidArgument(format!(
            "{} was trained on basis {}, but {} is {fingerprint}",
            args.model.display(),
            model.basis_ref(),
            args.basis.display()
        )));
    }
    let initial = read_snapshots(&args.initial, SnapshotFormat::from_path(&args.initial))?;
    if args.index >= initial.len() {
        return Err(Error::InvalidArgument(format!(
            "index {} out of range for {} snapshots",
            args.index,
            initial.len()
        )));
    }
    let start = initial.select(args.index..args.index + 1)?;
    let map = LiftingMap::new(args.lifting, start.layout().clone())?;
    let reduced = project_unscaled(&basis, &map.lift_snapshots(&start)?)?;
    let s0 = reduced.states.column(0).into_owned();
    let t0 = reduced.times[0];
    let traj = integrate(
        &model,
        &s0,
        t0,
        t0 + args.horizon,
        args.dt,
        args.scheme,
        &args.forcing.signal()?,
        args.save_every,
    )?;
    write_trajectory_csv(&traj, &args.output)?;
    if let Some(path) = &args.reconstruct {
        let full = map.unlift(&reconstruct(&basis, &traj.coefficients, &traj.times)?)?;
        write_snapshots(&full, path, SnapshotFormat::from_path(path))?;
    }
    match traj.diverged_at {
        Some(k) => println!("diverged_at = {k}"),
        None => println!("steps_saved = {}", traj.times.len()),
    }
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    print_effective("evaluate", &args)?;
    let reference = read_snapshots(&args.reference, SnapshotFormat::from_path(&args.reference))?;
    let prediction = read_snapshots(&args.prediction, SnapshotFormat::from_path(&args.prediction))?;
    let eval = evaluate(&reference, &prediction, &args.variable, &args.probes)?;
    eval.write_csv(&args.output, args.metric)?;
    if let (Some(r), Some(e)) = (eval.correlation.last(), eval.relative_error.last()) {
        println!("final_correlation = {r}\nfinal_relative_error = {e}");
    }
    Ok(())
}

fn pipeline(args: PipelineArgs, seed: Option<u64>) -> Result<()> {
    let mut config = PipelineConfig::read(&args.config)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(dir) = args.output_dir {
        config.io.output_dir = dir;
    }
    if let Some(r) = args.r {
        config.pod.r = Some(r);
        config.pod.energy = None;
    }
    if let Some(g) = args.gamma1 {
        config.opinf.gamma1 = g;
    }
    if let Some(g) = args.gamma2 {
        config.opinf.gamma2 = g;
    }
    if let Some(s) = args.scheme {
        config.rom.scheme = s;
    }
    config.validate()?;
    println!("# effective pipeline settings\n{}", config.to_toml()?);
    let summary = run_pipeline(&config)?;
    let text = std::fs::read_to_string(config.io.output_dir.join(artifacts::SUMMARY))
        .map_err(|e| Error::io(config.io.output_dir.join(artifacts::SUMMARY), e))?;
    println!(
        "# summary ({} artifacts in {})\n{text}",
        summary.artifacts.len(),
        config.io.output_dir.display()
    );
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("OPINF_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("OPINF_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn exit_code(category: Category) -> u8 {
    match category {
        Category::Io => 3,
        Category::Format => 4,
        Category::Dimension => 5,
        Category::Argument => 6,
        Category::Numerical => 7,
        Category::Config => 8,
    }
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Lift(a) => lift(a),
        Command::Basis(mut a) => {
            a.seed = cli.seed.unwrap_or(0);
            basis(a)
        }
        Command::Train(a) => train(a),
        Command::Tune(a) => tune_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Pipeline(a) => pipeline(a, cli.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            eprintln!("error [{}]: {e}", category.as_str());
            ExitCode::from(exit_code(category))
        }
    }
}
