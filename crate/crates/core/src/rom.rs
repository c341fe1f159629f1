//! Time integration of learned reduced models.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::opinf::ReducedModel;

/// Magnitude past which a reduced trajectory is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForcingKind {
    #[default]
    None,
    Sinusoid,
}

/// Scalar input signal `u(t) = amplitude · sin(2π · frequency · t)`.
///
/// `offset` is the base value the perturbation is added to (for example a
/// mean boundary pressure); it is not part of `u` itself but is used by
/// [`ForcingSignal::absolute`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingSignal {
    #[serde(default)]
    pub kind: ForcingKind,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub frequency: f64,
    #[serde(default)]
    pub offset: f64,
}

impl ForcingSignal {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn sinusoid(amplitude: f64, frequency: f64, offset: f64) -> Result<Self> {
        let s = Self {
            kind: ForcingKind::Sinusoid,
            amplitude,
            frequency,
            offset,
        };
        s.validate()?;
        Ok(s)
    }

    /// Ten-percent sinusoidal perturbation of a mean value `base`.
    pub fn relative_perturbation(base: f64, frequency: f64) -> Result<Self> {
        Self::sinusoid(0.1 * base, frequency, base)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.amplitude, self.frequency, self.offset]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidArgument("forcing parameters must be finite".into()));
        }
        if self.kind == ForcingKind::Sinusoid && !(self.frequency > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sinusoid frequency must be positive, got {}",
                self.frequency
            )));
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.kind != ForcingKind::None
    }

    /// `u(t)`; zero for [`ForcingKind::None`].
    pub fn eval(&self, t: f64) -> f64 {
        match self.kind {
            ForcingKind::None => 0.0,
            ForcingKind::Sinusoid => self.amplitude * (2.0 * std::f64::consts::PI * self.frequency * t).sin(),
        }
    }

    /// `du/dt`.
    pub fn rate(&self, t: f64) -> f64 {
        match self.kind {
            ForcingKind::None => 0.0,
            ForcingKind::Sinusoid => {
                let w = 2.0 * std::f64::consts::PI * self.frequency;
                self.amplitude * w * (w * t).cos()
            }
        }
    }

    /// `offset + u(t)`.
    pub fn absolute(&self, t: f64) -> f64 {
        self.offset + self.eval(t)
    }
}

/// Evaluates a sinusoidal signal at `t`.
pub fn sinusoid_eval(forcing: &ForcingSignal, t: f64) -> Result<f64> {
    if forcing.kind != ForcingKind::Sinusoid {
        return Err(Error::InvalidArgument("signal is not a sinusoid".into()));
    }
    forcing.validate()?;
    Ok(forcing.eval(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Heun's method (explicit trapezoid).
    #[default]
    Rk2Heun,
    Rk2Midpoint,
    Rk4,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rk2" | "rk2_heun" | "heun" => Ok(Scheme::Rk2Heun),
            "rk2_midpoint" | "midpoint" => Ok(Scheme::Rk2Midpoint),
            "rk4" => Ok(Scheme::Rk4),
            other => Err(Error::InvalidArgument(format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedTrajectory {
    pub times: Vec<f64>,
    /// `r x N`, one column per saved time.
    pub coefficients: DMatrix<f64>,
    /// Step index at which the state first left the finite/bounded region.
    /// The trajectory holds the states up to, not including, that step.
    pub diverged_at: Option<usize>,
}

impl ReducedTrajectory {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

/// Right-hand side of the reduced model at `(s, t)` with scalar forcing
/// broadcast to every input channel.
pub fn rom_rhs(model: &ReducedModel, s: &DVector<f64>, t: f64, forcing: &ForcingSignal) -> Result<DVector<f64>> {
    let u = vec![forcing.eval(t); model.form().inputs];
    model.eval(s, &u)
}

/// Integrates `model` from `s0` at `t0` to `t_end` with fixed step `dt`,
/// saving every `save_every`-th state (the initial state is always saved).
///
/// The number of steps is `(t_end - t0) / dt` and must be an integer up to
/// rounding; times are computed as `t0 + k·dt`.
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    model: &ReducedModel,
    s0: &DVector<f64>,
    t0: f64,
    t_end: f64,
    dt: f64,
    scheme: Scheme,
    forcing: &ForcingSignal,
    save_every: usize,
) -> Result<ReducedTrajectory> {
    let r = model.r();
    if s0.len() != r {
        return Err(Error::Dimension(format!(
            "initial condition has {} entries, model r = {r}",
            s0.len()
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) || !(t_end >= t0) || save_every == 0 {
        return Err(Error::InvalidArgument(format!(
            "need dt > 0, t_end >= t0 and save_every >= 1 (dt = {dt}, t0 = {t0}, t_end = {t_end})"
        )));
    }
    forcing.validate()?;
    if s0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("reduced initial condition".into()));
    }
    let steps_f = (t_end - t0) / dt;
    let steps = steps_f.round() as usize;
    if (steps_f - steps as f64).abs() > 1e-8 * steps_f.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "horizon {} is not an integer multiple of dt = {dt}",
            t_end - t0
        )));
    }
    let m = model.form().inputs;
    let mut u = vec![0.0; m];
    let mut rhs = |s: &[f64], t: f64, out: &mut [f64]| {
        u.iter_mut().for_each(|v| *v = forcing.eval(t));
        model.eval_into(s, &u, out);
    };

    let mut saved = Vec::with_capacity(steps / save_every + 1);
    let mut times = Vec::with_capacity(steps / save_every + 1);
    let mut s = s0.as_slice().to_vec();
    saved.extend_from_slice(&s);
    times.push(t0);
    let mut k1 = vec![0.0; r];
    let mut k2 = vec![0.0; r];
    let mut k3 = vec![0.0; r];
    let mut k4 = vec![0.0; r];
    let mut tmp = vec![0.0; r];
    let mut diverged_at = None;
    for step in 0..steps {
        let t = t0 + step as f64 * dt;
        match scheme {
            Scheme::Rk2Heun => {
                rhs(&s, t, &mut k1);
                axpy_into(&s, dt, &k1, &mut tmp);
                rhs(&tmp, t + dt, &mut k2);
                for i in 0..r {
                    s[i] += 0.5 * dt * (k1[i] + k2[i]);
                }
            }
            Scheme::Rk2Midpoint => {
                rhs(&s, t, &mut k1);
                axpy_into(&s, 0.5 * dt, &k1, &mut tmp);
                rhs(&tmp, t + 0.5 * dt, &mut k2);
                for i in 0..r {
                    s[i] += dt * k2[i];
                }
            }
            Scheme::Rk4 => {
                rhs(&s, t, &mut k1);
                axpy_into(&s, 0.5 * dt, &k1, &mut tmp);
                rhs(&tmp, t + 0.5 * dt, &mut k2);
                axpy_into(&s, 0.5 * dt, &k2, &mut tmp);
                rhs(&tmp, t + 0.5 * dt, &mut k3);
                axpy_into(&s, dt, &k3, &mut tmp);
                rhs(&tmp, t + dt, &mut k4);
                for i in 0..r {
                    s[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        if s.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_THRESHOLD) {
            diverged_at = Some(step + 1);
            break;
        }
        if (step + 1) % save_every == 0 {
            saved.extend_from_slice(&s);
            times.push(t0 + (step + 1) as f64 * dt);
        }
    }
    Ok(ReducedTrajectory {
        coefficients: DMatrix::from_vec(r, times.len(), saved),
        times,
        diverged_at,
    })
}

fn axpy_into(x: &[f64], a: f64, y: &[f64], out: &mut [f64]) {
    for ((o, xi), yi) in out.iter_mut().zip(x).zip(y) {
        *o = xi + a * yi;
    }
}

/// Writes `t, s_1, ..., s_r`, one row per saved time.
pub fn write_trajectory_csv(traj: &ReducedTrajectory, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    let r = traj.coefficients.nrows();
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=r).map(|i| format!("s_{i}")))
        .collect();
    w.write_record(&header).map_err(|e| Error::csv(path, e))?;
    for (k, t) in traj.times.iter().enumerate() {
        let row: Vec<String> = std::iter::once(t.to_string())
            .chain(traj.coefficients.column(k).iter().map(|v| v.to_string()))
            .collect();
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
