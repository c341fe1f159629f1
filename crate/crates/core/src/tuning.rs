//! Grid search over the regularization weights `(gamma1, gamma2)`.
//!
//! Every candidate is trained on the same reduced data, integrated from the
//! first training state over a trial horizon that extends past the training
//! window, and scored by its relative error against the training
//! coefficients. A candidate is feasible when its trajectory stays bounded:
//! the largest deviation of any coefficient from its training mean over the
//! trial run may not exceed `growth_factor` times the largest such deviation
//! in the training data. The feasible candidate with the smallest training
//! error wins; ties go to the larger weights.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::opinf::{build_data_matrix, solve_regularized, ModelForm, ReducedModel, RegWeights, SolveReport};
use crate::pod::ReducedData;
use crate::rom::{integrate, ForcingSignal, ReducedTrajectory, Scheme};

/// Log-uniform axis of `count` values from `lo` to `hi` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl GridAxis {
    pub fn new(lo: f64, hi: f64, count: usize) -> Result<Self> {
        let axis = Self { lo, hi, count };
        axis.validate()?;
        Ok(axis)
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::InvalidArgument("grid axis needs at least one value".into()));
        }
        if !(self.lo > 0.0 && self.hi >= self.lo && self.hi.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "grid axis bounds must satisfy 0 < lo <= hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        if self.count > 1 && self.hi == self.lo {
            return Err(Error::InvalidArgument("repeated grid values".into()));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.lo];
        }
        let (a, b) = (self.lo.log10(), self.hi.log10());
        (0..self.count)
            .map(|i| {
                if i == self.count - 1 {
                    self.hi
                } else {
                    10f64.powf(a + (b - a) * i as f64 / (self.count - 1) as f64)
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizationPlan {
    pub gamma1: GridAxis,
    pub gamma2: GridAxis,
    #[serde(default = "default_growth_factor")]
    pub growth_factor: f64,
    /// Length of the window, from the first training time, used for the
    /// training error and the reference deviation.
    pub training_horizon: f64,
    /// Length of the trial integration from the first training time.
    pub trial_horizon: f64,
}

fn default_growth_factor() -> f64 {
    1.2
}

impl RegularizationPlan {
    /// 15 x 9 grid over `[1, 1e7] x [1e10, 1e18]` with factor 1.2.
    pub fn with_default_grid(training_horizon: f64, trial_horizon: f64) -> Self {
        Self {
            gamma1: GridAxis {
                lo: 1.0,
                hi: 1e7,
                count: 15,
            },
            gamma2: GridAxis {
                lo: 1e10,
                hi: 1e18,
                count: 9,
            },
            growth_factor: default_growth_factor(),
            training_horizon,
            trial_horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gamma1.validate()?;
        self.gamma2.validate()?;
        if !(self.growth_factor >= 1.0 && self.growth_factor.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "growth factor must be at least 1, got {}",
                self.growth_factor
            )));
        }
        if !(self.training_horizon > 0.0
            && self.trial_horizon >= self.training_horizon
            && self.trial_horizon.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "need 0 < training horizon ({}) <= trial horizon ({})",
                self.training_horizon, self.trial_horizon
            )));
        }
        Ok(())
    }

    /// All `(gamma1, gamma2)` pairs, `gamma1` outer.
    pub fn candidates(&self) -> Vec<RegWeights> {
        let g2 = self.gamma2.values();
        self.gamma1
            .values()
            .into_iter()
            .flat_map(|a| g2.iter().map(move |&b| RegWeights { gamma1: a, gamma2: b }))
            .collect()
    }
}

/// Integration settings shared by training and prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialSettings {
    pub form: ModelForm,
    pub scheme: Scheme,
    /// Integrator steps per training-data interval.
    pub substeps: usize,
    pub forcing: ForcingSignal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Candidate {
    pub gamma1: f64,
    pub gamma2: f64,
    /// Relative Frobenius error against the training coefficients; infinite
    /// when the run diverged inside the training window.
    pub training_error: f64,
    /// Whether the growth bound held over the trial run.
    #[serde(rename = "constraint_pass")]
    pub feasible: bool,
    pub diverged: bool,
    /// Largest deviation from the training mean over the trial run.
    pub max_deviation: f64,
}

#[derive(Debug, Clone)]
pub struct TuningResult {
    pub weights: RegWeights,
    pub model: ReducedModel,
    pub report: SolveReport,
    pub training_error: f64,
    /// Every evaluated candidate, in grid order.
    pub candidates: Vec<Candidate>,
}

/// Input matrix `m x K` built by sampling `forcing` at `times` for each of
/// `m` channels.
pub fn input_matrix(forcing: &ForcingSignal, times: &[f64], m: usize) -> Option<DMatrix<f64>> {
    (m > 0).then(|| DMatrix::from_fn(m, times.len(), |_, k| forcing.eval(times[k])))
}

/// Trains one model on reduced data.
pub fn fit(
    data: &ReducedData,
    form: &ModelForm,
    weights: &RegWeights,
    forcing: &ForcingSignal,
) -> Result<(ReducedModel, SolveReport)> {
    let derivs = data
        .derivs
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("training requires reduced derivative data".into()))?;
    let u = input_matrix(forcing, &data.times, form.inputs);
    let d = build_data_matrix(&data.states, u.as_ref(), form)?;
    solve_regularized(&d, &derivs.transpose(), weights, form)
}

/// Largest `|x_ik - mean_i|` over all entries, with `mean` the per-row mean.
pub fn max_deviation(coefficients: &DMatrix<f64>, mean: &DVector<f64>) -> f64 {
    let mut m: f64 = 0.0;
    for col in coefficients.column_iter() {
        for (x, mu) in col.iter().zip(mean.iter()) {
            m = m.max((x - mu).abs());
        }
    }
    m
}

/// True when the trial trajectory stays within `factor` times the training
/// data's largest deviation from its mean. Diverged trajectories fail.
pub fn growth_constraint(trial: &ReducedTrajectory, training: &DMatrix<f64>, factor: f64) -> bool {
    if trial.diverged() || trial.coefficients.nrows() != training.nrows() {
        return false;
    }
    let mean = training.column_mean();
    let bound = factor * max_deviation(training, &mean);
    max_deviation(&trial.coefficients, &mean) <= bound
}

fn training_window(data: &ReducedData, horizon: f64) -> Result<usize> {
    let t0 = data.times[0];
    let tol = 1e-9 * horizon.max(t0.abs());
    let count = data.times.iter().take_while(|&&t| t - t0 <= horizon + tol).count();
    if count < 2 {
        return Err(Error::InvalidArgument(format!(
            "training horizon {horizon} covers fewer than two snapshots"
        )));
    }
    Ok(count)
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    weights: RegWeights,
    d: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    data: &ReducedData,
    window: usize,
    plan: &RegularizationPlan,
    settings: &TrialSettings,
    spacing: f64,
) -> Result<(Candidate, Option<(ReducedModel, SolveReport)>)> {
    let (model, report) = solve_regularized(d, rhs, &weights, &settings.form)?;
    let dt = spacing / settings.substeps as f64;
    let t0 = data.times[0];
    let steps = (plan.trial_horizon / spacing).round() as usize * settings.substeps;
    let trial = integrate(
        &model,
        &data.states.column(0).into_owned(),
        t0,
        t0 + steps as f64 * dt,
        dt,
        settings.scheme,
        &settings.forcing,
        settings.substeps,
    )?;
    let training = data.states.columns(0, window);
    let training_error = if trial.coefficients.ncols() >= window {
        let pred = trial.coefficients.columns(0, window);
        (pred - training).norm() / training.norm()
    } else {
        f64::INFINITY
    };
    let mean = training.column_mean();
    let max_dev = if trial.diverged() {
        f64::INFINITY
    } else {
        max_deviation(&trial.coefficients, &mean)
    };
    let feasible = training_error.is_finite() && growth_constraint(&trial, &training.into_owned(), plan.growth_factor);
    let candidate = Candidate {
        gamma1: weights.gamma1,
        gamma2: weights.gamma2,
        training_error,
        max_deviation: max_dev,
        diverged: trial.diverged(),
        feasible,
    };
    Ok((candidate, feasible.then_some((model, report))))
}

/// Runs the grid search. Candidates are evaluated in parallel; results are
/// collected in grid order so the outcome does not depend on scheduling.
pub fn tune(plan: &RegularizationPlan, data: &ReducedData, settings: &TrialSettings) -> Result<TuningResult> {
    plan.validate()?;
    if settings.substeps == 0 {
        return Err(Error::InvalidArgument("substeps must be at least 1".into()));
    }
    let derivs = data
        .derivs
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("tuning requires reduced derivative data".into()))?;
    let spacing = crate::data::uniform_step(&data.times)?;
    let trial_steps = plan.trial_horizon / spacing;
    if (trial_steps - trial_steps.round()).abs() > 1e-8 * trial_steps.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "trial horizon {} is not a multiple of the snapshot spacing {spacing}",
            plan.trial_horizon
        )));
    }
    let window = training_window(data, plan.training_horizon)?;
    let u = input_matrix(&settings.forcing, &data.times, settings.form.inputs);
    let d = build_data_matrix(&data.states, u.as_ref(), &settings.form)?;
    let rhs = derivs.transpose();

    let outcomes: Vec<(Candidate, Option<(ReducedModel, SolveReport)>)> = plan
        .candidates()
        .into_par_iter()
        .map(|w| evaluate(w, &d, &rhs, data, window, plan, settings, spacing))
        .collect::<Result<_>>()?;

    let mut best: Option<usize> = None;
    for (i, (c, _)) in outcomes.iter().enumerate() {
        if !c.feasible {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(j) => {
                let b = &outcomes[j].0;
                let better = c.training_error < b.training_error
                    || (c.training_error == b.training_error && (c.gamma1, c.gamma2) > (b.gamma1, b.gamma2));
                Some(if better { i } else { j })
            }
        };
    }
    let candidates: Vec<Candidate> = outcomes.iter().map(|(c, _)| *c).collect();
    match best {
        Some(i) => {
            let (c, fitted) = &outcomes[i];
            let (model, report) = fitted.clone().expect("feasible candidates keep their model");
            Ok(TuningResult {
                weights: RegWeights {
                    gamma1: c.gamma1,
                    gamma2: c.gamma2,
                },
                model,
                report,
                training_error: c.training_error,
                candidates,
            })
        }
        None => {
            let closest = candidates
                .iter()
                .min_by(|a, b| a.training_error.total_cmp(&b.training_error))
                .expect("grid is non-empty");
            Err(Error::NoFeasibleRegularization {
                gamma1: closest.gamma1,
                gamma2: closest.gamma2,
                training_error: closest.training_error,
            })
        }
    }
}

/// Writes the candidate table as CSV.
pub fn write_ledger(candidates: &[Candidate], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for c in candidates {
        w.serialize(c).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::SyntheticModel;
    use approx::assert_relative_eq;

    #[test]
    fn axis_values_are_log_uniform() {
        let v = GridAxis::new(1.0, 1e4, 5).unwrap().values();
        for (a, b) in v.iter().zip([1.0, 10.0, 100.0, 1000.0, 1e4]) {
            assert_relative_eq!(*a, b, max_relative = 1e-12);
        }
        assert_eq!(GridAxis::new(3.0, 3.0, 1).unwrap().values(), vec![3.0]);
        assert!(GridAxis::new(0.0, 1.0, 3).is_err());
        assert!(GridAxis::new(1.0, 1.0, 3).is_err());
        let plan = RegularizationPlan::with_default_grid(1.0, 2.0);
        assert_eq!(plan.candidates().len(), 135);
        assert_eq!(plan.growth_factor, 1.2);
    }

    fn traj(values: &[f64]) -> ReducedTrajectory {
        ReducedTrajectory {
            times: (0..values.len()).map(|i| i as f64).collect(),
            coefficients: DMatrix::from_row_slice(1, values.len(), values),
            diverged_at: None,
        }
    }

    #[test]
    fn growth_constraint_examples() {
        // training max deviation 1 around mean 0
        let training = DMatrix::from_row_slice(1, 3, &[-1.0, 0.0, 1.0]);
        assert!(growth_constraint(&traj(&[1.2, -1.2]), &training, 1.2));
        assert!(!growth_constraint(&traj(&[1.21]), &training, 1.2));
        let mut d = traj(&[0.0]);
        d.diverged_at = Some(1);
        assert!(!growth_constraint(&d, &training, 1.2));
    }

    fn setup(seed: u64) -> (SyntheticModel, ReducedData, RegularizationPlan, TrialSettings) {
        let sys = SyntheticModel::random(4, 1, seed).unwrap();
        let forcing = ForcingSignal::sinusoid(0.5, 0.7, 0.0).unwrap();
        let data = sys
            .trajectory_data(&DVector::from_element(4, 0.3), 0.0, 4.0, 0.01, &forcing)
            .unwrap();
        let plan = RegularizationPlan {
            gamma1: GridAxis::new(1e-12, 1e-2, 3).unwrap(),
            gamma2: GridAxis::new(1e-12, 1e-2, 3).unwrap(),
            growth_factor: 1.2,
            training_horizon: 4.0,
            trial_horizon: 6.0,
        };
        let settings = TrialSettings {
            form: ModelForm::full(1),
            scheme: Scheme::Rk4,
            substeps: 1,
            forcing,
        };
        (sys, data, plan, settings)
    }

    #[test]
    fn tune_prefers_weak_regularization_on_clean_data() {
        let (_, data, plan, settings) = setup(3);
        let res = tune(&plan, &data, &settings).unwrap();
        assert_eq!(res.candidates.len(), 9);
        assert!(res.training_error < 1e-6, "{}", res.training_error);
        assert_relative_eq!(res.weights.gamma1, 1e-12, max_relative = 1e-9);
        let again = tune(&plan, &data, &settings).unwrap();
        assert_eq!(res.candidates, again.candidates);
    }

    #[test]
    fn refining_grid_never_raises_best_error() {
        let (_, data, mut plan, settings) = setup(5);
        let coarse = tune(&plan, &data, &settings).unwrap().training_error;
        // the 5-point axis contains the 3-point axis
        plan.gamma1.count = 5;
        plan.gamma2.count = 5;
        let fine = tune(&plan, &data, &settings).unwrap().training_error;
        assert!(fine <= coarse);
    }

    #[test]
    fn infeasible_grid_reports_closest_candidate() {
        // exponential growth: an accurate model keeps growing past the
        // training window and violates the growth bound
        let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.01).collect();
        let states = DMatrix::from_fn(1, times.len(), |_, k| (0.5 * times[k]).exp());
        let data = ReducedData {
            derivs: Some(states.map(|v| 0.5 * v)),
            states,
            times,
        };
        let plan = RegularizationPlan {
            gamma1: GridAxis::new(1e-12, 1e-10, 2).unwrap(),
            gamma2: GridAxis::new(1e-12, 1e-10, 2).unwrap(),
            growth_factor: 1.2,
            training_horizon: 1.0,
            trial_horizon: 3.0,
        };
        let settings = TrialSettings {
            form: ModelForm::new(true, false, false, 0).unwrap(),
            scheme: Scheme::Rk4,
            substeps: 1,
            forcing: ForcingSignal::none(),
        };
        match tune(&plan, &data, &settings) {
            Err(Error::NoFeasibleRegularization { training_error, .. }) => assert!(training_error < 1e-6),
            Ok(res) => panic!("unexpectedly feasible: {:?}", res.candidates),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn ledger_csv() {
        let (_, data, plan, settings) = setup(3);
        let res = tune(&plan, &data, &settings).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.csv");
        write_ledger(&res.candidates, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("gamma1,gamma2,training_error,constraint_pass,diverged,max_deviation"));
        assert_eq!(text.lines().count(), 10);
    }
}
