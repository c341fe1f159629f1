//! Random reduced quadratic models with known operators, for testing
//! inference against ground truth.
//!
//! The linear part has a negative definite symmetric part and the quadratic
//! part conserves `|s|²`, so trajectories stay bounded for bounded inputs.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::opinf::{compact_width, ReducedModel};
use crate::pod::ReducedData;
use crate::rom::{integrate, rom_rhs, ForcingSignal, Scheme};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModel {
    pub model: ReducedModel,
}

impl SyntheticModel {
    /// Random model of dimension `r` with `m` inputs (`m = 0` drops `B`).
    pub fn random(r: usize, m: usize, seed: u64) -> Result<Self> {
        if r == 0 {
            return Err(Error::InvalidArgument("r must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |rows: usize, cols: usize, scale: f64| {
            DMatrix::from_fn(rows, cols, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
        };
        let rs = (r as f64).sqrt();
        let q = normal(r, r, 1.0 / rs);
        let skew = normal(r, r, 1.0 / rs);
        let a = -(DMatrix::identity(r, r) * 0.5 + &q * q.transpose()) + (&skew - skew.transpose()) * 0.5;

        // h(s, s) = sum_m s_m W_m s with each W_m skew-symmetric
        let w: Vec<DMatrix<f64>> = (0..r)
            .map(|_| {
                let x = normal(r, r, 0.5 / rs);
                &x - x.transpose()
            })
            .collect();
        let mut h = DMatrix::zeros(r, compact_width(r));
        let mut col = 0;
        for i in 0..r {
            for j in i..r {
                for l in 0..r {
                    h[(l, col)] = if i == j {
                        w[i][(l, i)]
                    } else {
                        w[i][(l, j)] + w[j][(l, i)]
                    };
                }
                col += 1;
            }
        }
        let g = normal(r, 1, 0.1);
        let b = (m > 0).then(|| normal(r, m, 1.0 / rs));
        let model = ReducedModel::new(Some(a), Some(h), Some(DVector::from_column_slice(g.as_slice())), b)?;
        Ok(Self { model })
    }

    pub fn r(&self) -> usize {
        self.model.r()
    }

    /// RK4 trajectory from `s0` sampled every `dt`, with exact right-hand
    /// sides as derivative data.
    pub fn trajectory_data(
        &self,
        s0: &DVector<f64>,
        t0: f64,
        t_end: f64,
        dt: f64,
        forcing: &ForcingSignal,
    ) -> Result<ReducedData> {
        let traj = integrate(&self.model, s0, t0, t_end, dt, Scheme::Rk4, forcing, 1)?;
        if let Some(k) = traj.diverged_at {
            return Err(Error::Diverged {
                step: k,
                time: t0 + k as f64 * dt,
            });
        }
        let mut derivs = DMatrix::zeros(self.r(), traj.times.len());
        for (k, &t) in traj.times.iter().enumerate() {
            let s = traj.coefficients.column(k).into_owned();
            derivs.set_column(k, &rom_rhs(&self.model, &s, t, forcing)?);
        }
        Ok(ReducedData {
            states: traj.coefficients,
            derivs: Some(derivs),
            times: traj.times,
        })
    }

    /// Concatenates trajectories from several initial conditions. The time
    /// stamps of the result restart for each trajectory.
    pub fn ensemble_data(
        &self,
        initial: &[DVector<f64>],
        t_end: f64,
        dt: f64,
        forcing: &ForcingSignal,
    ) -> Result<ReducedData> {
        let parts = initial
            .iter()
            .map(|s0| self.trajectory_data(s0, 0.0, t_end, dt, forcing))
            .collect::<Result<Vec<_>>>()?;
        let k: usize = parts.iter().map(|p| p.times.len()).sum();
        let r = self.r();
        let mut states = DMatrix::zeros(r, k);
        let mut derivs = DMatrix::zeros(r, k);
        let mut times = Vec::with_capacity(k);
        let mut col = 0;
        for p in parts {
            let n = p.times.len();
            states.columns_mut(col, n).copy_from(&p.states);
            derivs
                .columns_mut(col, n)
                .copy_from(p.derivs.as_ref().expect("set above"));
            times.extend(p.times);
            col += n;
        }
        Ok(ReducedData {
            states,
            derivs: Some(derivs),
            times,
        })
    }

    /// Seeded random initial conditions with entries in `[-amplitude, amplitude]`.
    pub fn random_initial_conditions(&self, count: usize, amplitude: f64, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                DVector::from_fn(self.r(), |_, _| {
                    amplitude * rand::Rng::random_range(&mut rng, -1.0..1.0)
                })
            })
            .collect()
    }
}
