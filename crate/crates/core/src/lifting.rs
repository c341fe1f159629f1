//! Pointwise quadratic liftings.
//!
//! A lifting maps the original state to a larger set of variables in which
//! the dynamics are at most quadratic. For the cubic reaction-diffusion
//! equation `s_t = s_xx - s³`, the map `s ↦ (s, s²)` gives, with
//! `w1 = s`, `w2 = s²`,
//!
//! ```text
//! w1_t = w1_xx - w1 w2
//! w2_t = 2 w1 w1_xx - 2 w2²
//! ```
//!
//! Derivative data is lifted with the Jacobian: `(ṡ, 2 s ṡ)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{SnapshotSet, VariableLayout};
use crate::error::{Error, Result};
use crate::fom::Grid1d;
use crate::opinf::QuadraticStructure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiftingKind {
    #[default]
    Identity,
    CubicRd,
}

impl std::str::FromStr for LiftingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(LiftingKind::Identity),
            "cubic_rd" => Ok(LiftingKind::CubicRd),
            other => Err(Error::InvalidArgument(format!("unknown lifting `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftingMap {
    kind: LiftingKind,
    in_layout: VariableLayout,
    out_layout: VariableLayout,
}

impl LiftingMap {
    pub fn new(kind: LiftingKind, in_layout: VariableLayout) -> Result<Self> {
        let out_layout = match kind {
            LiftingKind::Identity => in_layout.clone(),
            LiftingKind::CubicRd => {
                let mut names = in_layout.names().to_vec();
                names.extend(in_layout.names().iter().map(|n| format!("{n}_sq")));
                VariableLayout::new(names, in_layout.dofs_per_var())?
            }
        };
        Ok(Self {
            kind,
            in_layout,
            out_layout,
        })
    }

    pub fn kind(&self) -> LiftingKind {
        self.kind
    }

    pub fn in_layout(&self) -> &VariableLayout {
        &self.in_layout
    }

    pub fn out_layout(&self) -> &VariableLayout {
        &self.out_layout
    }

    fn check(&self, what: &str, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.in_layout.dim() {
            return Err(Error::Dimension(format!(
                "{what} has {} entries, lifting expects {}",
                v.len(),
                self.in_layout.dim()
            )));
        }
        Ok(())
    }

    pub fn lift_state(&self, s: &DVector<f64>) -> Result<DVector<f64>> {
        self.check("state", s)?;
        Ok(match self.kind {
            LiftingKind::Identity => s.clone(),
            LiftingKind::CubicRd => {
                let n = s.len();
                DVector::from_fn(2 * n, |i, _| if i < n { s[i] } else { s[i - n] * s[i - n] })
            }
        })
    }

    pub fn lift_deriv(&self, s: &DVector<f64>, s_dot: &DVector<f64>) -> Result<DVector<f64>> {
        self.check("state", s)?;
        self.check("derivative", s_dot)?;
        Ok(match self.kind {
            LiftingKind::Identity => s_dot.clone(),
            LiftingKind::CubicRd => {
                let n = s.len();
                DVector::from_fn(
                    2 * n,
                    |i, _| if i < n { s_dot[i] } else { 2.0 * s[i - n] * s_dot[i - n] },
                )
            }
        })
    }

    /// Lifts every snapshot and its derivative.
    pub fn lift_snapshots(&self, set: &SnapshotSet) -> Result<SnapshotSet> {
        let derivs = set
            .derivs()
            .ok_or_else(|| Error::InvalidArgument("lifting requires time-derivative data".into()))?;
        if set.dim() != self.in_layout.dim() {
            return Err(Error::Dimension(format!(
                "snapshots have dimension {}, lifting expects {}",
                set.dim(),
                self.in_layout.dim()
            )));
        }
        let n = self.out_layout.dim();
        let k = set.len();
        let mut w = DMatrix::zeros(n, k);
        let mut w_dot = DMatrix::zeros(n, k);
        for j in 0..k {
            let s = set.states().column(j).into_owned();
            let sd = derivs.column(j).into_owned();
            w.set_column(j, &self.lift_state(&s)?);
            w_dot.set_column(j, &self.lift_deriv(&s, &sd)?);
        }
        SnapshotSet::new(w, Some(w_dot), set.times().to_vec(), self.out_layout.clone())
    }

    /// Recovers original variables from lifted ones by taking the leading
    /// block, a left inverse of [`LiftingMap::lift_state`].
    pub fn unlift(&self, set: &SnapshotSet) -> Result<SnapshotSet> {
        if set.dim() != self.out_layout.dim() {
            return Err(Error::Dimension(format!(
                "lifted snapshots have dimension {}, expected {}",
                set.dim(),
                self.out_layout.dim()
            )));
        }
        let d = self.in_layout.dim();
        SnapshotSet::new(
            set.states().rows(0, d).into_owned(),
            set.derivs().map(|m| m.rows(0, d).into_owned()),
            set.times().to_vec(),
            self.in_layout.clone(),
        )
    }
}

/// Lifted cubic reaction-diffusion right-hand side `a(w) + h(w, w)` on the
/// grid, with zero boundary rows.
pub fn lifted_rhs_cubic_rd(w: &DVector<f64>, grid: &Grid1d) -> Result<DVector<f64>> {
    let op = LiftedCubicRd { grid: *grid };
    if w.len() != op.dim() {
        return Err(Error::Dimension(format!(
            "lifted state has {} entries, expected 2 x {}",
            w.len(),
            grid.n_x
        )));
    }
    Ok(op.linear(w) + op.bilinear(w, w))
}

/// `a(w) = (D2 w1, 0)`, `h(w, v) = (-w1 ∘ v2, 2 w1 ∘ D2 v1 - 2 w2 ∘ v2)` on
/// interior nodes, zero on boundary nodes. Unit diffusivity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiftedCubicRd {
    pub grid: Grid1d,
}

impl QuadraticStructure for LiftedCubicRd {
    fn dim(&self) -> usize {
        2 * self.grid.n_x
    }

    fn linear(&self, w: &DVector<f64>) -> DVector<f64> {
        let n = self.grid.n_x;
        let mut out = DVector::zeros(2 * n);
        self.grid.d2(&w.as_slice()[..n], &mut out.as_mut_slice()[..n]);
        out
    }

    fn bilinear(&self, w: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let n = self.grid.n_x;
        let mut d2v = vec![0.0; n];
        self.grid.d2(&v.as_slice()[..n], &mut d2v);
        let mut out = DVector::zeros(2 * n);
        for i in 1..n - 1 {
            out[i] = -w[i] * v[n + i];
            out[n + i] = 2.0 * w[i] * d2v[i] - 2.0 * w[n + i] * v[n + i];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fom::{BoundaryValue, FomKind, FomProblem};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(n: usize, kind: LiftingKind) -> LiftingMap {
        LiftingMap::new(kind, VariableLayout::single("s", n).unwrap()).unwrap()
    }

    #[test]
    fn lift_state_examples() {
        let m = map(1, LiftingKind::CubicRd);
        assert_eq!(
            m.lift_state(&DVector::from_element(1, 2.0)).unwrap().as_slice(),
            &[2.0, 4.0]
        );
        assert!(m.lift_state(&DVector::zeros(1)).unwrap().iter().all(|v| *v == 0.0));
        let id = map(3, LiftingKind::Identity);
        let s = DVector::from_column_slice(&[1.0, -2.0, 3.0]);
        assert_eq!(id.lift_state(&s).unwrap(), s);
        assert_eq!(id.out_layout(), id.in_layout());
        assert!(m.lift_state(&DVector::zeros(2)).is_err());
        assert_eq!(m.out_layout().names(), &["s".to_string(), "s_sq".to_string()]);
    }

    #[test]
    fn lift_deriv_examples() {
        let m = map(1, LiftingKind::CubicRd);
        let d = m
            .lift_deriv(&DVector::from_element(1, 3.0), &DVector::from_element(1, 2.0))
            .unwrap();
        assert_eq!(d.as_slice(), &[2.0, 12.0]);
        let d = m
            .lift_deriv(&DVector::from_element(1, 2.0), &DVector::from_element(1, -8.0))
            .unwrap();
        assert_eq!(d.as_slice(), &[-8.0, -32.0]);
        let z = m
            .lift_deriv(&DVector::from_element(1, 5.0), &DVector::zeros(1))
            .unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lift_snapshots_small() {
        let layout = VariableLayout::single("s", 2).unwrap();
        let set = SnapshotSet::new(
            DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            Some(DMatrix::from_column_slice(2, 1, &[0.5, 1.0])),
            vec![0.0],
            layout.clone(),
        )
        .unwrap();
        let m = LiftingMap::new(LiftingKind::CubicRd, layout.clone()).unwrap();
        let lifted = m.lift_snapshots(&set).unwrap();
        assert_eq!(lifted.states().as_slice(), &[1.0, 2.0, 1.0, 4.0]);
        assert_eq!(lifted.derivs().unwrap().as_slice(), &[0.5, 1.0, 1.0, 4.0]);
        assert_eq!(m.unlift(&lifted).unwrap(), set);

        let id = LiftingMap::new(LiftingKind::Identity, layout.clone()).unwrap();
        assert_eq!(id.lift_snapshots(&set).unwrap(), set);

        let bare = SnapshotSet::new(DMatrix::zeros(2, 1), None, vec![0.0], layout).unwrap();
        assert!(m.lift_snapshots(&bare).is_err());
    }

    #[test]
    fn lifted_rhs_constant_state() {
        let g = Grid1d::new(5, 0.0, 1.0).unwrap();
        let mut w = DVector::zeros(10);
        w.rows_mut(0, 5).fill(2.0);
        w.rows_mut(5, 5).fill(4.0);
        let f = lifted_rhs_cubic_rd(&w, &g).unwrap();
        for i in 1..4 {
            assert_eq!(f[i], -8.0);
            assert_eq!(f[5 + i], -32.0);
        }
        assert!(lifted_rhs_cubic_rd(&DVector::zeros(10), &g)
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));
        assert!(lifted_rhs_cubic_rd(&DVector::zeros(9), &g).is_err());
    }

    proptest! {
        #[test]
        fn lifting_consistency(seed in any::<u64>(), n in 3usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Grid1d::new(n, 0.0, 1.0).unwrap();
            let s = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            let p = FomProblem::new(
                FomKind::CubicReactionDiffusion,
                g,
                1.0,
                BoundaryValue::Fixed(s[0]),
                BoundaryValue::Fixed(s[n - 1]),
                s.clone(),
            )
            .unwrap();
            let m = map(n, LiftingKind::CubicRd);
            let w = m.lift_state(&s).unwrap();
            let chain = m.lift_deriv(&s, &p.rhs_eval(&s, 0.0).unwrap()).unwrap();
            let lifted = lifted_rhs_cubic_rd(&w, &g).unwrap();
            let scale = 1.0 / (g.dx() * g.dx());
            for i in 0..2 * n {
                prop_assert!((chain[i] - lifted[i]).abs() <= 1e-12 * scale.max(1.0) * 16.0);
            }
            for i in 0..n {
                prop_assert_eq!(w[n + i], w[i] * w[i]);
            }
        }
    }

    #[test]
    fn lifted_derivs_match_finite_differences() {
        let g = Grid1d::new(33, 0.0, 1.0).unwrap();
        let p = FomProblem::from_profile(
            FomKind::CubicReactionDiffusion,
            g,
            1.0,
            BoundaryValue::Fixed(0.5),
            BoundaryValue::Fixed(0.5),
            |x| 0.5 + (std::f64::consts::PI * x).sin(),
        )
        .unwrap();
        let m = map(33, LiftingKind::CubicRd);
        let errs: Vec<f64> = [2usize, 1]
            .iter()
            .map(|&every| {
                let traj = p.solve(0.02, 1e-4, every).unwrap();
                let lifted = m.lift_snapshots(&traj).unwrap();
                let fd =
                    crate::data::finite_difference_derivs(&lifted, crate::data::FiniteDifference::Central).unwrap();
                (fd.derivs().unwrap() - lifted.derivs().unwrap()).amax()
            })
            .collect();
        // halving the sampling step reduces the error about fourfold
        assert!(errs[1] < errs[0] / 3.0, "{errs:?}");
        assert_relative_eq!(errs[1], 0.0, epsilon = 1e-2);
    }
}
