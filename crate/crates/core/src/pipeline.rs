//! End-to-end runs driven by one TOML configuration:
//! simulate → lift → center/scale + POD → train or tune → predict → evaluate.
//!
//! ```toml
//! seed = 0
//!
//! [fom]
//! kind = "viscous_burgers"
//! n_x = 128
//! domain = [0.0, 1.0]
//! diffusivity = 0.05
//! t_final = 1.0
//! dt = 1e-4
//! save_every = 50
//! left = { value = 0.0 }
//! right = { value = 0.0 }
//! initial = { kind = "sine", amplitude = 1.0, wavenumber = 1.0 }
//!
//! [pod]
//! r = 10
//!
//! [opinf]
//! gamma1 = 1e-8
//! gamma2 = 1e-6
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{write_snapshots, SnapshotFormat, SnapshotSet};
use crate::error::{Error, Result};
use crate::fom::{BoundaryValue, FomKind, FomProblem, Grid1d};
use crate::lifting::{LiftingKind, LiftingMap};
use crate::metrics::{correlation_series, relative_frobenius, FieldSeries};
use crate::opinf::{ModelForm, RegWeights, SolveReport};
use crate::pod::{center_scale, pod_basis, project, rank_for_energy, reconstruct, PodBasis, PodMethod};
use crate::rom::{integrate, write_trajectory_csv, ForcingSignal, Scheme};
use crate::tuning::{fit, tune, write_ledger, GridAxis, RegularizationPlan, TrialSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed for every randomized component.
    #[serde(default)]
    pub seed: u64,
    pub fom: FomConfig,
    #[serde(default)]
    pub lifting: LiftingConfig,
    pub pod: PodConfig,
    #[serde(default)]
    pub opinf: OpinfConfig,
    #[serde(default)]
    pub rom: RomConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning: Option<TuningConfig>,
    #[serde(default)]
    pub io: IoConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FomConfig {
    pub kind: FomKind,
    pub n_x: usize,
    pub domain: [f64; 2],
    pub diffusivity: f64,
    pub t_final: f64,
    pub dt: f64,
    #[serde(default = "one")]
    pub save_every: usize,
    pub left: BoundaryConfig,
    pub right: BoundaryConfig,
    pub initial: InitialCondition,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryConfig {
    pub value: f64,
    /// Time-dependent perturbation added to `value`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forcing: Option<ForcingSignal>,
}

impl BoundaryConfig {
    fn to_boundary(self) -> BoundaryValue {
        match self.forcing {
            Some(signal) if signal.is_active() => BoundaryValue::Forced {
                base: self.value,
                signal,
            },
            _ => BoundaryValue::Fixed(self.value),
        }
    }
}

/// Initial field as a function of `ξ = (x - x_left) / (x_right - x_left)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    /// `offset + amplitude · sin(wavenumber · π · ξ)`.
    Sine {
        amplitude: f64,
        wavenumber: f64,
        #[serde(default)]
        offset: f64,
    },
    /// `offset + amplitude · exp(-((ξ - center) / width)²)`.
    Gaussian {
        amplitude: f64,
        center: f64,
        width: f64,
        #[serde(default)]
        offset: f64,
    },
    Constant {
        value: f64,
    },
}

impl InitialCondition {
    pub fn eval(&self, xi: f64) -> f64 {
        match *self {
            InitialCondition::Sine {
                amplitude,
                wavenumber,
                offset,
            } => offset + amplitude * (wavenumber * std::f64::consts::PI * xi).sin(),
            InitialCondition::Gaussian {
                amplitude,
                center,
                width,
                offset,
            } => offset + amplitude * (-((xi - center) / width).powi(2)).exp(),
            InitialCondition::Constant { value } => value,
        }
    }
}

impl FomConfig {
    pub fn problem(&self) -> Result<FomProblem> {
        let grid = Grid1d::new(self.n_x, self.domain[0], self.domain[1])?;
        let width = self.domain[1] - self.domain[0];
        let x0 = self.domain[0];
        let init = self.initial;
        if let InitialCondition::Gaussian { width, .. } = init {
            if !(width > 0.0) {
                return Err(Error::Config("gaussian width must be positive".into()));
            }
        }
        FomProblem::from_profile(
            self.kind,
            grid,
            self.diffusivity,
            self.left.to_boundary(),
            self.right.to_boundary(),
            |x| init.eval((x - x0) / width),
        )
    }

    /// The forcing signal of the first forced boundary, if any.
    pub fn forcing(&self) -> ForcingSignal {
        [self.left, self.right]
            .iter()
            .find_map(|b| b.forcing.filter(|f| f.is_active()))
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiftingConfig {
    #[serde(default)]
    pub kind: LiftingKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PodMethodKind {
    #[default]
    ThinSvd,
    Randomized,
}

impl std::str::FromStr for PodMethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "thin_svd" | "thin-svd" | "svd" => Ok(PodMethodKind::ThinSvd),
            "randomized" => Ok(PodMethodKind::Randomized),
            other => Err(Error::InvalidArgument(format!("unknown POD method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PodConfig {
    /// Basis rank; exactly one of `r` and `energy` must be set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    /// Smallest rank whose retained energy reaches this fraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<f64>,
    #[serde(default)]
    pub method: PodMethodKind,
    #[serde(default = "default_oversampling")]
    pub oversampling: usize,
    #[serde(default = "default_power_iterations")]
    pub power_iterations: usize,
    /// Rank computed before an energy-based truncation (randomized only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rank: Option<usize>,
}

fn default_oversampling() -> usize {
    10
}

fn default_power_iterations() -> usize {
    2
}

impl PodConfig {
    pub fn method(&self, seed: u64) -> PodMethod {
        match self.method {
            PodMethodKind::ThinSvd => PodMethod::ThinSvd,
            PodMethodKind::Randomized => PodMethod::Randomized {
                oversampling: self.oversampling,
                power_iterations: self.power_iterations,
                seed,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpinfConfig {
    #[serde(default = "yes")]
    pub linear: bool,
    #[serde(default = "yes")]
    pub quadratic: bool,
    #[serde(default = "yes")]
    pub constant: bool,
    #[serde(default)]
    pub inputs: usize,
    #[serde(default)]
    pub gamma1: f64,
    #[serde(default)]
    pub gamma2: f64,
}

fn yes() -> bool {
    true
}

impl Default for OpinfConfig {
    fn default() -> Self {
        Self {
            linear: true,
            quadratic: true,
            constant: true,
            inputs: 0,
            gamma1: 0.0,
            gamma2: 0.0,
        }
    }
}

impl OpinfConfig {
    pub fn form(&self) -> Result<ModelForm> {
        ModelForm::new(self.linear, self.quadratic, self.constant, self.inputs)
    }

    pub fn weights(&self) -> Result<RegWeights> {
        RegWeights::new(self.gamma1, self.gamma2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RomConfig {
    #[serde(default)]
    pub scheme: Scheme,
    /// Integrator steps per snapshot interval.
    #[serde(default = "one")]
    pub substeps: usize,
    /// Input signal for prediction; defaults to the full-order forcing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forcing: Option<ForcingSignal>,
}

impl Default for RomConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::default(),
            substeps: 1,
            forcing: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Fraction of the simulated horizon used for training.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.6
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: default_train_fraction(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningConfig {
    #[serde(default = "default_growth_factor")]
    pub growth_factor: f64,
    /// Trial integration length; defaults to the full simulated horizon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial_horizon: Option<f64>,
    pub gamma1: GridAxis,
    pub gamma2: GridAxis,
}

fn default_growth_factor() -> f64 {
    1.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Dof indices (of the evaluated variable) to record as probe traces.
    #[serde(default)]
    pub probes: Vec<usize>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            output_dir: default_output_dir(),
            probes: Vec::new(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Effective configuration after defaulting, as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match (self.pod.r, self.pod.energy) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(Error::Config("pod: set exactly one of `r` and `energy`".into())),
        }
        if let Some(e) = self.pod.energy {
            if !(e > 0.0 && e <= 1.0) {
                return Err(Error::Config(format!("pod.energy must lie in (0, 1], got {e}")));
            }
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "split.train_fraction must lie in (0, 1], got {}",
                self.split.train_fraction
            )));
        }
        if self.rom.substeps == 0 {
            return Err(Error::Config("rom.substeps must be at least 1".into()));
        }
        if self.fom.save_every == 0 {
            return Err(Error::Config("fom.save_every must be at least 1".into()));
        }
        self.opinf.form().map_err(|e| Error::Config(format!("opinf: {e}")))?;
        self.opinf.weights().map_err(|e| Error::Config(format!("opinf: {e}")))?;
        if self.opinf.inputs > 0 && !self.model_forcing().is_active() {
            return Err(Error::Config(
                "opinf.inputs > 0 but no forcing signal is configured".into(),
            ));
        }
        if let Some(t) = &self.tuning {
            t.gamma1
                .validate()
                .map_err(|e| Error::Config(format!("tuning.gamma1: {e}")))?;
            t.gamma2
                .validate()
                .map_err(|e| Error::Config(format!("tuning.gamma2: {e}")))?;
        }
        Ok(())
    }

    /// Input signal used for training and prediction.
    pub fn model_forcing(&self) -> ForcingSignal {
        self.rom.forcing.unwrap_or_else(|| self.fom.forcing())
    }
}

/// File names written into the output directory.
pub mod artifacts {
    pub const SNAPSHOTS: &str = "fom_snapshots.bin";
    pub const BASIS: &str = "basis.pod";
    pub const MODEL: &str = "model.rom";
    pub const LEDGER: &str = "tuning_ledger.csv";
    pub const TRAJECTORY: &str = "reduced_trajectory.csv";
    pub const PREDICTION: &str = "prediction.bin";
    pub const METRICS: &str = "metrics.csv";
    pub const SUMMARY: &str = "summary.toml";
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineSummary {
    pub r: usize,
    pub energy: f64,
    pub energy_lower_bound: f64,
    pub training_snapshots: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    pub solve_method: String,
    pub solve_rank: usize,
    pub condition_estimate: f64,
    /// Relative Frobenius error of the reconstructed prediction over the
    /// training window; absent when the prediction diverged inside it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_error: Option<f64>,
    /// Same over the prediction window; absent when nothing was held out.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_error: Option<f64>,
    /// Error of the best approximation of the test data in the basis.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_projection_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_correlation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diverged_at: Option<usize>,
    pub artifacts: Vec<String>,
}

/// Which metric columns an evaluation table holds besides time and probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSelection {
    #[default]
    All,
    Correlation,
    RelativeError,
}

impl std::str::FromStr for MetricSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(MetricSelection::All),
            "correlation" => Ok(MetricSelection::Correlation),
            "relative_error" | "relative-error" | "error" => Ok(MetricSelection::RelativeError),
            other => Err(Error::InvalidArgument(format!("unknown metric `{other}`"))),
        }
    }
}

/// Evaluation table of a prediction against a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub times: Vec<f64>,
    pub correlation: Vec<f64>,
    pub relative_error: Vec<f64>,
    /// `(dof, reference trace, predicted trace)`.
    pub probes: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

/// Compares one variable of two snapshot sets step by step. Only the common
/// leading time stamps are compared (a prediction may stop early).
pub fn evaluate(
    reference: &SnapshotSet,
    prediction: &SnapshotSet,
    variable: &str,
    probes: &[usize],
) -> Result<Evaluation> {
    let vr = reference.layout().resolve(variable)?;
    let vp = prediction.layout().resolve(variable)?;
    if reference.layout().dofs_per_var() != prediction.layout().dofs_per_var() {
        return Err(Error::Dimension(format!(
            "reference has {} dofs per variable, prediction {}",
            reference.layout().dofs_per_var(),
            prediction.layout().dofs_per_var()
        )));
    }
    let n = reference.len().min(prediction.len());
    let tol = 1e-9 * reference.times().iter().fold(1.0f64, |m, t| m.max(t.abs()));
    for k in 0..n {
        if (reference.times()[k] - prediction.times()[k]).abs() > tol {
            return Err(Error::Dimension(format!(
                "time stamps differ at index {k}: {} vs {}",
                reference.times()[k],
                prediction.times()[k]
            )));
        }
    }
    let times = reference.times()[..n].to_vec();
    let rf = FieldSeries::new(reference.variable(vr).columns(0, n).into_owned(), times.clone())?;
    let pf = FieldSeries::new(prediction.variable(vp).columns(0, n).into_owned(), times.clone())?;
    let correlation = correlation_series(&rf, &pf)?;
    let relative_error = match crate::metrics::relative_error(&rf, &pf, crate::metrics::ErrorNorm::PerStepL2)? {
        crate::metrics::RelativeError::PerStep(v) => v,
        crate::metrics::RelativeError::Frobenius(_) => unreachable!(),
    };
    let probes = probes
        .iter()
        .map(|&p| {
            Ok((
                p,
                crate::metrics::probe_trace(&rf, p)?,
                crate::metrics::probe_trace(&pf, p)?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(Evaluation {
        times,
        correlation,
        relative_error,
        probes,
    })
}

impl Evaluation {
    pub fn write_csv(&self, path: &Path, selection: MetricSelection) -> Result<()> {
        let corr = selection != MetricSelection::RelativeError;
        let err = selection != MetricSelection::Correlation;
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut header = vec!["t".to_string()];
        if corr {
            header.push("correlation".into());
        }
        if err {
            header.push("relative_error".into());
        }
        for (p, _, _) in &self.probes {
            header.push(format!("probe_{p}_reference"));
            header.push(format!("probe_{p}_prediction"));
        }
        w.write_record(&header).map_err(|e| Error::csv(path, e))?;
        for k in 0..self.times.len() {
            let mut row = vec![self.times[k].to_string()];
            if corr {
                row.push(self.correlation[k].to_string());
            }
            if err {
                row.push(self.relative_error[k].to_string());
            }
            for (_, r, p) in &self.probes {
                row.push(r[k].to_string());
                row.push(p[k].to_string());
            }
            w.write_record(&row).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Computes the POD basis of a lifted training set according to `config`.
pub fn build_basis(train: &SnapshotSet, config: &PodConfig, seed: u64) -> Result<PodBasis> {
    let (scaled, scaling) = center_scale(train)?;
    let method = config.method(seed);
    let full_rank = scaled.dim().min(scaled.len());
    match (config.r, config.energy) {
        (Some(r), _) => pod_basis(&scaled, &scaling, r, &method, None),
        (None, Some(energy)) => {
            let r_max = match config.method {
                PodMethodKind::ThinSvd => full_rank,
                PodMethodKind::Randomized => config
                    .max_rank
                    .ok_or_else(|| Error::Config("pod.max_rank is required with energy and randomized".into()))?
                    .min(full_rank),
            };
            let basis = pod_basis(&scaled, &scaling, r_max, &method, None)?;
            let r = rank_for_energy(&basis, energy)?;
            basis.truncate(r)
        }
        (None, None) => Err(Error::Config("pod: set `r` or `energy`".into())),
    }
}

/// Runs the whole chain and writes artifacts to `config.io.output_dir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineSummary> {
    config.validate()?;
    let out = &config.io.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = |name: &str| out.join(name);
    let mut written = Vec::new();

    let problem = config.fom.problem()?;
    info!("simulating {:?} on {} points", config.fom.kind, config.fom.n_x);
    let reference = problem.solve(config.fom.t_final, config.fom.dt, config.fom.save_every)?;
    write_snapshots(&reference, &path(artifacts::SNAPSHOTS), SnapshotFormat::Binary)?;
    written.push(artifacts::SNAPSHOTS);

    let lifting = LiftingMap::new(config.lifting.kind, reference.layout().clone())?;
    let lifted = lifting.lift_snapshots(&reference)?;

    let t0 = reference.times()[0];
    let t_end = *reference.times().last().expect("non-empty");
    let cutoff = t0 + config.split.train_fraction * (t_end - t0);
    let tol = 1e-9 * (t_end - t0).max(1.0);
    let n_train = reference.times().iter().take_while(|&&t| t <= cutoff + tol).count();
    if n_train < 2 {
        return Err(Error::Config("training window holds fewer than two snapshots".into()));
    }
    let train = lifted.select(0..n_train)?;

    let basis = build_basis(&train, &config.pod, config.seed)?;
    let r = basis.rank();
    let (energy, energy_lb) = basis.energy(r)?;
    info!("basis rank {r}, retained energy {energy:.8}");
    basis.write(&path(artifacts::BASIS))?;
    written.push(artifacts::BASIS);

    let reduced_train = project(&basis, &basis.scaling().apply(&train)?)?;
    let form = config.opinf.form()?;
    let forcing = config.model_forcing();
    let spacing = train.uniform_step()?;

    let (model, report, weights): (_, SolveReport, RegWeights) = match &config.tuning {
        Some(t) => {
            let plan = RegularizationPlan {
                gamma1: t.gamma1,
                gamma2: t.gamma2,
                growth_factor: t.growth_factor,
                training_horizon: train.times()[n_train - 1] - t0,
                trial_horizon: t.trial_horizon.unwrap_or(t_end - t0),
            };
            let settings = TrialSettings {
                form,
                scheme: config.rom.scheme,
                substeps: config.rom.substeps,
                forcing,
            };
            let result = tune(&plan, &reduced_train, &settings)?;
            write_ledger(&result.candidates, &path(artifacts::LEDGER))?;
            written.push(artifacts::LEDGER);
            (result.model, result.report, result.weights)
        }
        None => {
            let weights = config.opinf.weights()?;
            let (model, report) = fit(&reduced_train, &form, &weights, &forcing)?;
            (model, report, weights)
        }
    };
    let model = model.with_basis_ref(basis.fingerprint());
    model.write(&path(artifacts::MODEL))?;
    written.push(artifacts::MODEL);

    let dt = spacing / config.rom.substeps as f64;
    let steps = ((t_end - t0) / spacing).round() as usize * config.rom.substeps;
    let s0 = reduced_train.states.column(0).into_owned();
    let traj = integrate(
        &model,
        &s0,
        t0,
        t0 + steps as f64 * dt,
        dt,
        config.rom.scheme,
        &forcing,
        config.rom.substeps,
    )?;
    write_trajectory_csv(&traj, &path(artifacts::TRAJECTORY))?;
    written.push(artifacts::TRAJECTORY);
    if let Some(k) = traj.diverged_at {
        log::warn!("reduced model diverged at step {k}");
    }

    // stamps of the reference at the saved prediction steps
    let n_pred = traj.times.len();
    let times = reference.times()[..n_pred].to_vec();
    let lifted_pred = reconstruct(&basis, &traj.coefficients, &times)?;
    let prediction = lifting.unlift(&lifted_pred)?;
    write_snapshots(&prediction, &path(artifacts::PREDICTION), SnapshotFormat::Binary)?;
    written.push(artifacts::PREDICTION);

    let variable = reference.layout().names()[0].clone();
    let evaluation = evaluate(&reference, &prediction, &variable, &config.io.probes)?;
    evaluation.write_csv(&path(artifacts::METRICS), MetricSelection::All)?;
    written.push(artifacts::METRICS);

    // a window cut short by divergence has no meaningful error
    let window_error = |range: std::ops::Range<usize>| -> Result<Option<f64>> {
        if range.start >= range.end || range.end > n_pred {
            return Ok(None);
        }
        let end = range.end;
        let rows = reference.states().columns(range.start, end - range.start).into_owned();
        let pred = prediction.states().columns(range.start, end - range.start).into_owned();
        relative_frobenius(&rows, &pred).map(Some)
    };
    let train_error = window_error(0..n_train)?;
    let test_error = window_error(n_train..reference.len())?;
    let test_projection_error = if n_train < reference.len() {
        let test = lifted.select(n_train..reference.len())?;
        let coeffs = project(&basis, &basis.scaling().apply(&test)?)?;
        let best = lifting.unlift(&reconstruct(&basis, &coeffs.states, test.times())?)?;
        let test_ref = reference.select(n_train..reference.len())?;
        Some(relative_frobenius(test_ref.states(), best.states())?)
    } else {
        None
    };

    let summary = PipelineSummary {
        r,
        energy,
        energy_lower_bound: energy_lb,
        training_snapshots: n_train,
        gamma1: weights.gamma1,
        gamma2: weights.gamma2,
        solve_method: format!("{:?}", report.method).to_lowercase(),
        solve_rank: report.rank,
        condition_estimate: report.condition,
        train_error,
        test_error,
        test_projection_error,
        final_correlation: evaluation.correlation.last().copied(),
        diverged_at: traj.diverged_at,
        artifacts: written
            .iter()
            .map(|s| s.to_string())
            .chain(std::iter::once(artifacts::SUMMARY.to_string()))
            .collect(),
    };
    let text = toml::to_string(&summary).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path(artifacts::SUMMARY), text).map_err(|e| Error::io(path(artifacts::SUMMARY), e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
        seed = 3

        [fom]
        kind = "viscous_burgers"
        n_x = 33
        domain = [0.0, 1.0]
        diffusivity = 0.1
        t_final = 0.5
        dt = 1e-3
        save_every = 10
        left = { value = 0.0 }
        right = { value = 0.0 }
        initial = { kind = "sine", amplitude = 1.0, wavenumber = 1.0 }

        [pod]
        r = 4

        [opinf]
        gamma1 = 1e-10
        gamma2 = 1e-10

        [rom]
        scheme = "rk4"
        substeps = 10
    "#;

    fn config(dir: &Path) -> PipelineConfig {
        let mut c = PipelineConfig::from_toml(SMALL).unwrap();
        c.io.output_dir = dir.to_path_buf();
        c.io.probes = vec![8, 16];
        c
    }

    #[test]
    fn config_defaults_and_round_trip() {
        let c = PipelineConfig::from_toml(SMALL).unwrap();
        assert_eq!(c.split.train_fraction, 0.6);
        assert_eq!(c.lifting.kind, LiftingKind::Identity);
        assert!(c.opinf.constant);
        let again = PipelineConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn config_errors() {
        assert!(matches!(PipelineConfig::from_toml("seed = 1"), Err(Error::Config(_))));
        let bad = SMALL.replace("r = 4", "r = 4\nenergy = 0.9");
        assert!(matches!(PipelineConfig::from_toml(&bad), Err(Error::Config(_))));
        let bad = SMALL.replace("n_x = 33", "n_x = 33\nbogus = 1");
        assert!(matches!(PipelineConfig::from_toml(&bad), Err(Error::Config(_))));
        let bad = SMALL.replace("gamma1 = 1e-10", "gamma1 = 1e-10\ninputs = 1");
        assert!(matches!(PipelineConfig::from_toml(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn small_pipeline_runs_and_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = run_pipeline(&config(a.path())).unwrap();
        let sb = run_pipeline(&config(b.path())).unwrap();
        assert_eq!(sa.r, 4);
        assert!(sa.diverged_at.is_none());
        assert!(sa.train_error.unwrap() < 0.05, "{sa:?}");
        for name in &sa.artifacts {
            let x = fs::read(a.path().join(name)).unwrap();
            let y = fs::read(b.path().join(name)).unwrap();
            assert_eq!(x, y, "{name} differs");
        }
        assert_eq!(sa, sb);
        let metrics = fs::read_to_string(a.path().join(artifacts::METRICS)).unwrap();
        assert!(metrics.starts_with("t,correlation,relative_error,probe_8_reference"));
    }
}
