//! Comparison of predicted and reference fields.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SnapshotSet;
use crate::error::{Error, Result};

/// Scalar field over `n_pts` points at `N` times.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSeries {
    values: DMatrix<f64>,
    times: Vec<f64>,
}

impl FieldSeries {
    pub fn new(values: DMatrix<f64>, times: Vec<f64>) -> Result<Self> {
        if values.ncols() != times.len() {
            return Err(Error::Dimension(format!(
                "field has {} columns for {} times",
                values.ncols(),
                times.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "field entry (point {}, step {})",
                i % values.nrows().max(1),
                i / values.nrows().max(1)
            )));
        }
        for (k, w) in times.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(Error::InvalidArgument(format!(
                    "times not increasing at index {}",
                    k + 1
                )));
            }
        }
        Ok(Self { values, times })
    }

    /// One variable of a snapshot set.
    pub fn from_variable(set: &SnapshotSet, var: usize) -> Result<Self> {
        if var >= set.layout().var_count() {
            return Err(Error::InvalidArgument(format!(
                "variable {var} out of range ({} variables)",
                set.layout().var_count()
            )));
        }
        Self::new(set.variable(var), set.times().to_vec())
    }

    /// All states of a snapshot set.
    pub fn from_states(set: &SnapshotSet) -> Self {
        Self {
            values: set.states().clone(),
            times: set.times().to_vec(),
        }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn points(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Pearson correlation between two fields at one time.
pub fn pearson_correlation(reference: &[f64], pred: &[f64]) -> Result<f64> {
    pearson_at(reference, pred, None)
}

fn pearson_at(a: &[f64], b: &[f64], step: Option<usize>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "fields have {} and {} points",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least two points".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // residual spread from rounding of the mean is not variance
    let floor = |v: &[f64], m: f64| {
        let scale = v.iter().fold(m.abs(), |acc, x| acc.max(x.abs()));
        let e = 4.0 * f64::EPSILON * scale;
        n * e * e
    };
    if saa <= floor(a, ma) || sbb <= floor(b, mb) {
        return Err(Error::UndefinedCorrelation { at_step: step });
    }
    Ok(sab / (saa.sqrt() * sbb.sqrt()))
}

/// Pearson correlation at every time step.
pub fn correlation_series(reference: &FieldSeries, pred: &FieldSeries) -> Result<Vec<f64>> {
    check_matching(reference, pred)?;
    (0..reference.len())
        .into_par_iter()
        .map(|k| {
            pearson_at(
                reference.values.column(k).as_slice(),
                pred.values.column(k).as_slice(),
                Some(k),
            )
        })
        .collect()
}

/// Time history at one point.
pub fn probe_trace(series: &FieldSeries, point: usize) -> Result<Vec<f64>> {
    if point >= series.points() {
        return Err(Error::InvalidArgument(format!(
            "probe index {point} out of range ({} points)",
            series.points()
        )));
    }
    Ok(series.values.row(point).iter().copied().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorNorm {
    #[default]
    Frobenius,
    PerStepL2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RelativeError {
    Frobenius(f64),
    PerStep(Vec<f64>),
}

/// `‖pred - ref‖ / ‖ref‖`, over the whole series or per time step.
pub fn relative_error(reference: &FieldSeries, pred: &FieldSeries, norm: ErrorNorm) -> Result<RelativeError> {
    check_matching(reference, pred)?;
    match norm {
        ErrorNorm::Frobenius => {
            let denom = reference.values.norm();
            if denom == 0.0 {
                return Err(Error::InvalidArgument("reference field is identically zero".into()));
            }
            Ok(RelativeError::Frobenius(
                (&pred.values - &reference.values).norm() / denom,
            ))
        }
        ErrorNorm::PerStepL2 => {
            let mut out = Vec::with_capacity(reference.len());
            for k in 0..reference.len() {
                let r = reference.values.column(k);
                let denom = r.norm();
                if denom == 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "reference field is zero at time index {k}"
                    )));
                }
                out.push((pred.values.column(k) - r).norm() / denom);
            }
            Ok(RelativeError::PerStep(out))
        }
    }
}

/// Frobenius relative error between two matrices of equal shape.
pub fn relative_frobenius(reference: &DMatrix<f64>, pred: &DMatrix<f64>) -> Result<f64> {
    if reference.shape() != pred.shape() {
        return Err(Error::Dimension(format!(
            "shapes {:?} and {:?} differ",
            reference.shape(),
            pred.shape()
        )));
    }
    let denom = reference.norm();
    if denom == 0.0 {
        return Err(Error::InvalidArgument("reference is identically zero".into()));
    }
    Ok((pred - reference).norm() / denom)
}

fn check_matching(a: &FieldSeries, b: &FieldSeries) -> Result<()> {
    if a.values.shape() != b.values.shape() {
        return Err(Error::Dimension(format!(
            "series shapes {:?} and {:?} differ",
            a.values.shape(),
            b.values.shape()
        )));
    }
    let tol = 1e-12 * a.times.iter().fold(1.0f64, |m, t| m.max(t.abs()));
    if a.times.iter().zip(&b.times).any(|(x, y)| (x - y).abs() > tol) {
        return Err(Error::Dimension("series have different time stamps".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn series(rows: usize, vals: &[f64]) -> FieldSeries {
        let m = DMatrix::from_column_slice(rows, vals.len() / rows, vals);
        let n = m.ncols();
        FieldSeries::new(m, (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn pearson_examples() {
        assert_relative_eq!(
            pearson_correlation(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            pearson_correlation(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap(),
            -1.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            pearson_correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
            -1.0,
            epsilon = 1e-12
        );
        assert!(matches!(
            pearson_correlation(&[0.1, 0.1, 0.1], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation { at_step: None })
        ));
        assert!(pearson_correlation(&[1.0], &[1.0]).is_err());
        assert!(pearson_correlation(&[1.0, 2.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn pearson_bounds_and_affine_invariance(
            a in prop::collection::vec(-10.0f64..10.0, 5..40),
            seed_b in prop::collection::vec(-10.0f64..10.0, 40),
            scale in 0.01f64..100.0,
            shift in -100.0f64..100.0,
        ) {
            let b = &seed_b[..a.len()];
            if let Ok(r) = pearson_correlation(&a, b) {
                prop_assert!(r.abs() <= 1.0 + 1e-12);
                let a2: Vec<f64> = a.iter().map(|x| scale * x + shift).collect();
                let a3: Vec<f64> = a.iter().map(|x| -scale * x + shift).collect();
                prop_assert!((pearson_correlation(&a2, b).unwrap() - r).abs() <= 1e-12);
                prop_assert!((pearson_correlation(&a3, b).unwrap() + r).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn series_correlation() {
        let s = series(3, &[1.0, 2.0, 4.0, 0.0, 5.0, 1.0]);
        assert!(correlation_series(&s, &s)
            .unwrap()
            .iter()
            .all(|r| (r - 1.0).abs() < 1e-12));
        let affine = FieldSeries::new(s.values().map(|v| 3.0 * v - 7.0), s.times().to_vec()).unwrap();
        assert!(correlation_series(&s, &affine)
            .unwrap()
            .iter()
            .all(|r| (r - 1.0).abs() < 1e-12));
        let flat = series(3, &[1.0, 2.0, 4.0, 2.0, 2.0, 2.0]);
        assert!(matches!(
            correlation_series(&s, &flat),
            Err(Error::UndefinedCorrelation { at_step: Some(1) })
        ));
    }

    #[test]
    fn probe_rows() {
        let s = series(2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(probe_trace(&s, 0).unwrap(), vec![1.0, 3.0]);
        assert!(probe_trace(&s, 2).is_err());
        let c = series(2, &[5.0, 5.0, 5.0, 5.0]);
        assert_eq!(probe_trace(&c, 1).unwrap(), vec![5.0, 5.0]);
    }

    #[test]
    fn relative_errors() {
        let r = series(2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            relative_error(&r, &r, ErrorNorm::Frobenius).unwrap(),
            RelativeError::Frobenius(0.0)
        );
        let p = FieldSeries::new(r.values() * 1.1, r.times().to_vec()).unwrap();
        match relative_error(&r, &p, ErrorNorm::Frobenius).unwrap() {
            RelativeError::Frobenius(e) => assert_relative_eq!(e, 0.1, epsilon = 1e-12),
            other => panic!("{other:?}"),
        }
        // ref + e1·‖ref‖ has error exactly 1
        let mut shifted = r.values().clone();
        shifted[(0, 0)] += r.values().norm();
        let p = FieldSeries::new(shifted, r.times().to_vec()).unwrap();
        match relative_error(&r, &p, ErrorNorm::Frobenius).unwrap() {
            RelativeError::Frobenius(e) => assert_relative_eq!(e, 1.0, epsilon = 1e-14),
            other => panic!("{other:?}"),
        }
        match relative_error(&r, &p, ErrorNorm::PerStepL2).unwrap() {
            RelativeError::PerStep(v) => {
                assert_relative_eq!(v[0], 30f64.sqrt() / 5f64.sqrt(), epsilon = 1e-14);
                assert_eq!(v[1], 0.0);
            }
            other => panic!("{other:?}"),
        }
        let z = series(2, &[0.0, 0.0, 1.0, 1.0]);
        assert!(relative_error(&z, &z, ErrorNorm::PerStepL2).is_err());
        assert!(relative_error(&r, &series(1, &[1.0, 2.0]), ErrorNorm::Frobenius).is_err());
    }

    #[test]
    fn series_validation() {
        assert!(FieldSeries::new(DMatrix::zeros(2, 2), vec![0.0]).is_err());
        assert!(FieldSeries::new(DMatrix::zeros(2, 2), vec![1.0, 0.0]).is_err());
        assert!(FieldSeries::new(DMatrix::from_element(1, 1, f64::NAN), vec![0.0]).is_err());
    }
}
