//! One-dimensional full-order solvers used to generate training and
//! reference data: cubic reaction-diffusion `s_t = s_xx - s³` and viscous
//! Burgers `s_t = ν s_xx - s s_x`.
//!
//! Space is discretized with second-order central differences on a uniform
//! grid that includes both boundary nodes. Boundary nodes hold their
//! Dirichlet values; their rows of the right-hand side are the time
//! derivative of the prescribed value (zero for fixed values). Time stepping
//! is classical fixed-step RK4.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{SnapshotSet, VariableLayout};
use crate::error::{Error, Result};
use crate::opinf::QuadraticStructure;
use crate::rom::ForcingSignal;

/// States with any entry beyond this magnitude are treated as blown up.
pub const FOM_DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FomKind {
    CubicReactionDiffusion,
    ViscousBurgers,
}

/// Uniform grid on `[x_left, x_right]` with `n_x` nodes including both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1d {
    pub n_x: usize,
    pub x_left: f64,
    pub x_right: f64,
}

impl Grid1d {
    pub fn new(n_x: usize, x_left: f64, x_right: f64) -> Result<Self> {
        if n_x < 3 {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least 3 points, got {n_x}"
            )));
        }
        if !(x_right > x_left) || !x_left.is_finite() || !x_right.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "degenerate domain [{x_left}, {x_right}]"
            )));
        }
        Ok(Self { n_x, x_left, x_right })
    }

    pub fn dx(&self) -> f64 {
        (self.x_right - self.x_left) / (self.n_x - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_left + i as f64 * self.dx()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_x).map(|i| self.x(i)).collect()
    }

    /// Central second difference on interior nodes; boundary rows are zero.
    pub fn d2(&self, s: &[f64], out: &mut [f64]) {
        let inv = 1.0 / (self.dx() * self.dx());
        let n = self.n_x;
        out[0] = 0.0;
        out[n - 1] = 0.0;
        for i in 1..n - 1 {
            out[i] = (s[i + 1] - 2.0 * s[i] + s[i - 1]) * inv;
        }
    }

    /// Central first difference on interior nodes; boundary rows are zero.
    pub fn d1(&self, s: &[f64], out: &mut [f64]) {
        let inv = 0.5 / self.dx();
        let n = self.n_x;
        out[0] = 0.0;
        out[n - 1] = 0.0;
        for i in 1..n - 1 {
            out[i] = (s[i + 1] - s[i - 1]) * inv;
        }
    }
}

/// Prescribed value at one end of the domain.
#[derive(Debug, Clone, Copy)]
pub enum BoundaryValue {
    Fixed(f64),
    /// `base + signal(t)`.
    Forced {
        base: f64,
        signal: ForcingSignal,
    },
    /// Arbitrary function returning `(value, d value / dt)` at time `t`.
    Profile(fn(f64) -> (f64, f64)),
}

impl BoundaryValue {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            BoundaryValue::Fixed(v) => *v,
            BoundaryValue::Forced { base, signal } => base + signal.eval(t),
            BoundaryValue::Profile(f) => f(t).0,
        }
    }

    pub fn rate(&self, t: f64) -> f64 {
        match self {
            BoundaryValue::Fixed(_) => 0.0,
            BoundaryValue::Forced { signal, .. } => signal.rate(t),
            BoundaryValue::Profile(f) => f(t).1,
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, BoundaryValue::Fixed(_))
    }
}

#[derive(Debug, Clone)]
pub struct FomProblem {
    kind: FomKind,
    grid: Grid1d,
    diffusivity: f64,
    left: BoundaryValue,
    right: BoundaryValue,
    init: DVector<f64>,
}

impl FomProblem {
    /// `init` is the initial field on all grid nodes; its boundary entries are
    /// overwritten with the boundary values at `t = 0`.
    pub fn new(
        kind: FomKind,
        grid: Grid1d,
        diffusivity: f64,
        left: BoundaryValue,
        right: BoundaryValue,
        init: DVector<f64>,
    ) -> Result<Self> {
        if !(diffusivity > 0.0 && diffusivity.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "diffusivity must be positive, got {diffusivity}"
            )));
        }
        if init.len() != grid.n_x {
            return Err(Error::Dimension(format!(
                "initial field has {} entries, grid has {}",
                init.len(),
                grid.n_x
            )));
        }
        if init.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("initial field".into()));
        }
        for b in [&left, &right] {
            if let BoundaryValue::Forced { signal, base } = b {
                signal.validate()?;
                if !base.is_finite() {
                    return Err(Error::InvalidArgument("boundary base value must be finite".into()));
                }
            }
        }
        let mut init = init;
        init[0] = left.value(0.0);
        init[grid.n_x - 1] = right.value(0.0);
        Ok(Self {
            kind,
            grid,
            diffusivity,
            left,
            right,
            init,
        })
    }

    /// Initial field sampled from `f(x)`.
    pub fn from_profile(
        kind: FomKind,
        grid: Grid1d,
        diffusivity: f64,
        left: BoundaryValue,
        right: BoundaryValue,
        f: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        let init = DVector::from_iterator(grid.n_x, grid.nodes().into_iter().map(f));
        Self::new(kind, grid, diffusivity, left, right, init)
    }

    pub fn kind(&self) -> FomKind {
        self.kind
    }

    pub fn grid(&self) -> &Grid1d {
        &self.grid
    }

    pub fn diffusivity(&self) -> f64 {
        self.diffusivity
    }

    pub fn init(&self) -> &DVector<f64> {
        &self.init
    }

    pub fn boundaries(&self) -> (&BoundaryValue, &BoundaryValue) {
        (&self.left, &self.right)
    }

    pub fn layout(&self) -> VariableLayout {
        VariableLayout::single("s", self.grid.n_x).expect("n_x >= 3")
    }

    /// Largest step for which the explicit diffusion update is guaranteed
    /// stable: `0.5 dx² / diffusivity`.
    pub fn stable_dt(&self) -> f64 {
        0.5 * self.grid.dx() * self.grid.dx() / self.diffusivity
    }

    /// `f(s, t)`.
    pub fn rhs_eval(&self, state: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        if state.len() != self.grid.n_x {
            return Err(Error::Dimension(format!(
                "state has {} entries, grid has {}",
                state.len(),
                self.grid.n_x
            )));
        }
        if let Some(i) = state.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("state entry {i}")));
        }
        let mut out = DVector::zeros(self.grid.n_x);
        let mut scratch = vec![0.0; self.grid.n_x];
        self.rhs_into(state.as_slice(), t, out.as_mut_slice(), &mut scratch);
        Ok(out)
    }

    fn rhs_into(&self, s: &[f64], t: f64, out: &mut [f64], scratch: &mut [f64]) {
        let n = self.grid.n_x;
        self.grid.d2(s, out);
        match self.kind {
            FomKind::CubicReactionDiffusion => {
                for i in 1..n - 1 {
                    out[i] = self.diffusivity * out[i] - s[i] * s[i] * s[i];
                }
            }
            FomKind::ViscousBurgers => {
                self.grid.d1(s, scratch);
                for i in 1..n - 1 {
                    out[i] = self.diffusivity * out[i] - s[i] * scratch[i];
                }
            }
        }
        out[0] = self.left.rate(t);
        out[n - 1] = self.right.rate(t);
    }

    /// Integrates from the initial field to `t_final` with RK4 step `dt`,
    /// saving every `save_every`-th state together with its exact
    /// right-hand side.
    pub fn solve(&self, t_final: f64, dt: f64, save_every: usize) -> Result<SnapshotSet> {
        if !(dt > 0.0 && dt.is_finite()) || !(t_final > 0.0 && t_final.is_finite()) || save_every == 0 {
            return Err(Error::InvalidArgument(format!(
                "need dt > 0, t_final > 0 and save_every >= 1 (dt = {dt}, t_final = {t_final})"
            )));
        }
        if dt > self.stable_dt() * (1.0 + 1e-12) {
            return Err(Error::InvalidArgument(format!(
                "dt = {dt} exceeds the stability bound {:.6e}",
                self.stable_dt()
            )));
        }
        let steps_f = t_final / dt;
        let steps = steps_f.round() as usize;
        if (steps_f - steps as f64).abs() > 1e-8 * steps_f.max(1.0) {
            return Err(Error::InvalidArgument(format!(
                "t_final = {t_final} is not an integer multiple of dt = {dt}"
            )));
        }
        let n = self.grid.n_x;
        let saves = steps / save_every + 1;
        let mut states = Vec::with_capacity(n * saves);
        let mut derivs = Vec::with_capacity(n * saves);
        let mut times = Vec::with_capacity(saves);

        let mut s = self.init.as_slice().to_vec();
        let mut scratch = vec![0.0; n];
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut tmp = vec![0.0; n];

        self.rhs_into(&s, 0.0, &mut k1, &mut scratch);
        states.extend_from_slice(&s);
        derivs.extend_from_slice(&k1);
        times.push(0.0);
        for step in 0..steps {
            let t = step as f64 * dt;
            self.rhs_into(&s, t, &mut k1, &mut scratch);
            stage(&s, 0.5 * dt, &k1, &mut tmp);
            self.rhs_into(&tmp, t + 0.5 * dt, &mut k2, &mut scratch);
            stage(&s, 0.5 * dt, &k2, &mut tmp);
            self.rhs_into(&tmp, t + 0.5 * dt, &mut k3, &mut scratch);
            stage(&s, dt, &k3, &mut tmp);
            self.rhs_into(&tmp, t + dt, &mut k4, &mut scratch);
            for i in 0..n {
                s[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            let t_next = (step + 1) as f64 * dt;
            s[0] = self.left.value(t_next);
            s[n - 1] = self.right.value(t_next);
            if s.iter().any(|v| !v.is_finite() || v.abs() > FOM_DIVERGENCE_THRESHOLD) {
                return Err(Error::Diverged {
                    step: step + 1,
                    time: t_next,
                });
            }
            if (step + 1) % save_every == 0 {
                self.rhs_into(&s, t_next, &mut k1, &mut scratch);
                states.extend_from_slice(&s);
                derivs.extend_from_slice(&k1);
                times.push(t_next);
            }
        }
        let k = times.len();
        SnapshotSet::new(
            DMatrix::from_vec(n, k, states),
            Some(DMatrix::from_vec(n, k, derivs)),
            times,
            self.layout(),
        )
    }

    /// Exposes the polynomial structure of the right-hand side. Only Burgers
    /// with fixed boundary values is quadratic as written; the cubic
    /// reaction-diffusion equation must be lifted first.
    pub fn quadratic_structure(&self) -> Result<BurgersOperator> {
        if self.kind != FomKind::ViscousBurgers {
            return Err(Error::InvalidArgument(
                "cubic reaction-diffusion right-hand side is not quadratic; lift it first".into(),
            ));
        }
        if !(self.left.is_fixed() && self.right.is_fixed()) {
            return Err(Error::InvalidArgument(
                "time-dependent boundary values have no autonomous quadratic form".into(),
            ));
        }
        Ok(BurgersOperator {
            grid: self.grid,
            viscosity: self.diffusivity,
        })
    }
}

fn stage(s: &[f64], a: f64, k: &[f64], out: &mut [f64]) {
    for ((o, si), ki) in out.iter_mut().zip(s).zip(k) {
        *o = si + a * ki;
    }
}

/// Burgers right-hand side split as `a(x) = ν D2 x`, `h(x, y) = -x ∘ D1 y`,
/// both zero on boundary rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BurgersOperator {
    pub grid: Grid1d,
    pub viscosity: f64,
}

impl QuadraticStructure for BurgersOperator {
    fn dim(&self) -> usize {
        self.grid.n_x
    }

    fn linear(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.grid.n_x);
        self.grid.d2(x.as_slice(), out.as_mut_slice());
        out * self.viscosity
    }

    fn bilinear(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.grid.n_x);
        self.grid.d1(y.as_slice(), out.as_mut_slice());
        -out.component_mul(x)
    }
}
