//! Centering and scaling of snapshot data, POD bases and projection to
//! reduced coordinates.
//!
//! States are centered by the per-dof mean over snapshots and then divided by
//! one scale per variable, the largest absolute centered value of that
//! variable, so every scaled entry lies in `[-1, 1]`. Derivatives are divided
//! by the same scales but not centered.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bytes::ByteCursor;
use crate::data::{SnapshotSet, VariableLayout};
use crate::error::{Error, Result};

pub const BASIS_MAGIC: &[u8; 8] = b"OPINFPOD";

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRecord {
    layout: VariableLayout,
    means: DVector<f64>,
    scales: Vec<f64>,
}

impl ScalingRecord {
    pub fn new(layout: VariableLayout, means: DVector<f64>, scales: Vec<f64>) -> Result<Self> {
        if means.len() != layout.dim() {
            return Err(Error::Dimension(format!(
                "mean field has {} entries, layout has {}",
                means.len(),
                layout.dim()
            )));
        }
        if scales.len() != layout.var_count() {
            return Err(Error::Dimension(format!(
                "{} scales for {} variables",
                scales.len(),
                layout.var_count()
            )));
        }
        for (name, s) in layout.names().iter().zip(&scales) {
            if !(*s > 0.0 && s.is_finite()) {
                return Err(Error::ZeroScale(name.clone()));
            }
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mean field".into()));
        }
        Ok(Self { layout, means, scales })
    }

    /// Zero means, unit scales.
    pub fn identity(layout: VariableLayout) -> Self {
        let n = layout.dim();
        let v = layout.var_count();
        Self {
            layout,
            means: DVector::zeros(n),
            scales: vec![1.0; v],
        }
    }

    pub fn layout(&self) -> &VariableLayout {
        &self.layout
    }

    pub fn means(&self) -> &DVector<f64> {
        &self.means
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Per-dof scale vector (each variable's scale repeated over its dofs).
    pub fn row_scales(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.layout.dim());
        for (v, s) in self.scales.iter().enumerate() {
            out.rows_mut(self.layout.var_range(v).start, self.layout.dofs_per_var())
                .fill(*s);
        }
        out
    }

    /// Centers and scales `set` with this record's means and scales.
    pub fn apply(&self, set: &SnapshotSet) -> Result<SnapshotSet> {
        self.check(set)?;
        let rs = self.row_scales();
        let mut states = set.states().clone();
        for mut col in states.column_iter_mut() {
            col -= &self.means;
            col.component_div_assign(&rs);
        }
        let derivs = set.derivs().map(|d| {
            let mut d = d.clone();
            for mut col in d.column_iter_mut() {
                col.component_div_assign(&rs);
            }
            d
        });
        SnapshotSet::new(states, derivs, set.times().to_vec(), set.layout().clone())
    }

    /// Inverse of [`ScalingRecord::apply`].
    pub fn invert(&self, set: &SnapshotSet) -> Result<SnapshotSet> {
        self.check(set)?;
        let rs = self.row_scales();
        let mut states = set.states().clone();
        for mut col in states.column_iter_mut() {
            col.component_mul_assign(&rs);
            col += &self.means;
        }
        let derivs = set.derivs().map(|d| {
            let mut d = d.clone();
            for mut col in d.column_iter_mut() {
                col.component_mul_assign(&rs);
            }
            d
        });
        SnapshotSet::new(states, derivs, set.times().to_vec(), set.layout().clone())
    }

    fn check(&self, set: &SnapshotSet) -> Result<()> {
        if set.dim() != self.layout.dim() || set.layout().var_count() != self.layout.var_count() {
            return Err(Error::Dimension(format!(
                "snapshot dimension {} ({} variables) does not match scaling dimension {} ({} variables)",
                set.dim(),
                set.layout().var_count(),
                self.layout.dim(),
                self.layout.var_count()
            )));
        }
        Ok(())
    }
}

/// Computes the per-dof mean and per-variable max-abs scale of `set` and
/// returns the scaled set with the record.
pub fn center_scale(set: &SnapshotSet) -> Result<(SnapshotSet, ScalingRecord)> {
    let layout = set.layout().clone();
    let means = set.states().column_mean();
    let mut scales = Vec::with_capacity(layout.var_count());
    for v in 0..layout.var_count() {
        let range = layout.var_range(v);
        let mut m: f64 = 0.0;
        let mut magnitude: f64 = 0.0;
        for col in set.states().column_iter() {
            for i in range.clone() {
                m = m.max((col[i] - means[i]).abs());
                magnitude = magnitude.max(col[i].abs());
            }
        }
        // spread at the level of rounding in the mean is no spread at all
        if m <= 8.0 * f64::EPSILON * magnitude || m == 0.0 {
            return Err(Error::ZeroScale(layout.names()[v].clone()));
        }
        scales.push(m);
    }
    let record = ScalingRecord::new(layout, means, scales)?;
    let scaled = record.apply(set)?;
    Ok((scaled, record))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum PodMethod {
    #[default]
    ThinSvd,
    Randomized {
        #[serde(default = "default_oversampling")]
        oversampling: usize,
        #[serde(default = "default_power_iterations")]
        power_iterations: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_oversampling() -> usize {
    10
}

fn default_power_iterations() -> usize {
    2
}

impl PodMethod {
    pub fn randomized(seed: u64) -> Self {
        PodMethod::Randomized {
            oversampling: default_oversampling(),
            power_iterations: default_power_iterations(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    vectors: DMatrix<f64>,
    singular_values: Vec<f64>,
    scaling: ScalingRecord,
    weights: Option<DVector<f64>>,
    snapshot_count: usize,
    total_energy: f64,
}

impl PodBasis {
    /// Wraps given orthonormal columns as a basis with identity scaling and no
    /// singular-value record.
    pub fn from_vectors(vectors: DMatrix<f64>, layout: VariableLayout) -> Result<Self> {
        if vectors.nrows() != layout.dim() || vectors.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "basis is {} x {}, layout dimension {}",
                vectors.nrows(),
                vectors.ncols(),
                layout.dim()
            )));
        }
        let gram = vectors.transpose() * &vectors;
        let err = (gram - DMatrix::identity(vectors.ncols(), vectors.ncols())).norm();
        if err > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "basis columns are not orthonormal (error {err:.2e})"
            )));
        }
        Ok(Self {
            vectors,
            singular_values: Vec::new(),
            scaling: ScalingRecord::identity(layout),
            weights: None,
            snapshot_count: 0,
            total_energy: 0.0,
        })
    }

    pub fn with_scaling(mut self, scaling: ScalingRecord) -> Result<Self> {
        if scaling.layout().dim() != self.dim() {
            return Err(Error::Dimension("scaling dimension does not match basis".into()));
        }
        self.scaling = scaling;
        Ok(self)
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn scaling(&self) -> &ScalingRecord {
        &self.scaling
    }

    pub fn layout(&self) -> &VariableLayout {
        self.scaling.layout()
    }

    pub fn weights(&self) -> Option<&DVector<f64>> {
        self.weights.as_ref()
    }

    pub fn rank(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn snapshot_count(&self) -> usize {
        self.snapshot_count
    }

    /// Squared Frobenius norm of the (weighted) scaled training matrix.
    pub fn total_energy(&self) -> f64 {
        self.total_energy
    }

    /// `(eta, eta_lower_bound)` for the leading `r` modes.
    pub fn energy(&self, r: usize) -> Result<(f64, f64)> {
        energy_retained(&self.singular_values, r, self.snapshot_count, self.total_energy)
    }

    /// Keeps the leading `r` modes.
    pub fn truncate(&self, r: usize) -> Result<Self> {
        if r == 0 || r > self.rank() {
            return Err(Error::InvalidArgument(format!("rank {r} outside 1..={}", self.rank())));
        }
        let mut out = self.clone();
        out.vectors = self.vectors.columns(0, r).into_owned();
        Ok(out)
    }

    /// Reduced coordinates `Vᵀ W x` of a scaled vector.
    pub fn project_vector(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.weights {
            Some(w) => self.vectors.tr_mul(&x.component_mul(w)),
            None => self.vectors.tr_mul(x),
        }
    }

    fn project_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.weights {
            Some(w) => {
                let mut wx = x.clone();
                for mut c in wx.column_iter_mut() {
                    c.component_mul_assign(w);
                }
                self.vectors.tr_mul(&wx)
            }
            None => self.vectors.tr_mul(x),
        }
    }

    /// Short hex digest of the encoded basis, used to tie models to bases.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.encode());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BASIS_MAGIC);
        let layout = self.layout();
        for v in [
            self.dim(),
            self.rank(),
            self.singular_values.len(),
            layout.var_count(),
            layout.dofs_per_var(),
            self.snapshot_count,
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.push(u8::from(self.weights.is_some()));
        let names = layout.names().join("\n");
        out.extend_from_slice(&(names.len() as u64).to_le_bytes());
        out.extend_from_slice(names.as_bytes());
        let mut put = |vals: &[f64]| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        put(&[self.total_energy]);
        put(self.vectors.as_slice());
        put(&self.singular_values);
        put(self.scaling.means.as_slice());
        put(&self.scaling.scales);
        if let Some(w) = &self.weights {
            put(w.as_slice());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        if cur.read_bytes(8)? != BASIS_MAGIC {
            return Err(Error::format("byte 0", "bad magic; not a basis file"));
        }
        let mut header = [0usize; 6];
        for h in header.iter_mut() {
            *h = usize::try_from(cur.read_u64()?).map_err(|_| Error::format("header", "size overflows"))?;
        }
        let [n, r, m, var_count, dofs, snapshot_count] = header;
        let flag_at = cur.position();
        let has_weights = match cur.read_u8()? {
            0 => false,
            1 => true,
            f => {
                return Err(Error::format(
                    format!("byte {flag_at}"),
                    format!("weight flag {f} is not 0 or 1"),
                ))
            }
        };
        let names_len = cur.read_u64()? as usize;
        let names_at = cur.position();
        let names = std::str::from_utf8(cur.read_bytes(names_len)?)
            .map_err(|_| Error::format(format!("byte {names_at}"), "variable names are not UTF-8"))?;
        let names: Vec<String> = names.split('\n').map(str::to_owned).collect();
        let layout =
            VariableLayout::new(names, dofs).map_err(|e| Error::format(format!("byte {names_at}"), e.to_string()))?;
        if layout.var_count() != var_count || layout.dim() != n || r == 0 || r > n {
            return Err(Error::format("header", "inconsistent basis dimensions"));
        }
        let expected = 8 * (1 + n * r + m + n + var_count + if has_weights { n } else { 0 });
        if cur.remaining() != expected {
            return Err(Error::Dimension(format!(
                "basis payload has {} bytes, header implies {expected}",
                cur.remaining()
            )));
        }
        let mut take = |len: usize| -> Result<Vec<f64>> { (0..len).map(|_| cur.read_f64()).collect() };
        let total_energy = take(1)?[0];
        let vectors = DMatrix::from_vec(n, r, take(n * r)?);
        let singular_values = take(m)?;
        let means = DVector::from_vec(take(n)?);
        let scales = take(var_count)?;
        let weights = if has_weights {
            Some(DVector::from_vec(take(n)?))
        } else {
            None
        };
        Ok(Self {
            vectors,
            singular_values,
            scaling: ScalingRecord::new(layout, means, scales)?,
            weights,
            snapshot_count,
            total_energy,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Computes a rank-`r` POD basis of a scaled snapshot set.
///
/// `weights`, when given, are positive diagonal quadrature weights defining
/// the inner product `<x, y> = sum_i w_i x_i y_i`; the returned columns are
/// then orthonormal in that inner product.
pub fn pod_basis(
    scaled: &SnapshotSet,
    scaling: &ScalingRecord,
    r: usize,
    method: &PodMethod,
    weights: Option<&DVector<f64>>,
) -> Result<PodBasis> {
    let (n, k) = scaled.states().shape();
    if r == 0 || r > n.min(k) {
        return Err(Error::InvalidArgument(format!("rank {r} outside 1..={}", n.min(k))));
    }
    if scaling.layout().dim() != n {
        return Err(Error::Dimension(format!(
            "scaling dimension {} vs snapshots {n}",
            scaling.layout().dim()
        )));
    }
    let sqrt_w = match weights {
        Some(w) => {
            if w.len() != n {
                return Err(Error::Dimension(format!(
                    "{} quadrature weights for dimension {n}",
                    w.len()
                )));
            }
            if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidArgument("quadrature weights must be positive".into()));
            }
            Some(w.map(f64::sqrt))
        }
        None => None,
    };
    let mut x = scaled.states().clone();
    if let Some(sw) = &sqrt_w {
        for mut c in x.column_iter_mut() {
            c.component_mul_assign(sw);
        }
    }
    let total_energy = x.norm_squared();
    let (mut u, sigma) = match *method {
        PodMethod::ThinSvd => thin_svd(x)?,
        PodMethod::Randomized {
            oversampling,
            power_iterations,
            seed,
        } => randomized_svd(&x, r, oversampling, power_iterations, seed)?,
    };
    let mut vectors = u.columns_mut(0, r).into_owned();
    if let Some(sw) = &sqrt_w {
        for mut c in vectors.column_iter_mut() {
            c.component_div_assign(sw);
        }
    }
    fix_signs(&mut vectors);
    u = vectors;
    Ok(PodBasis {
        vectors: u,
        singular_values: sigma,
        scaling: scaling.clone(),
        weights: weights.cloned(),
        snapshot_count: k,
        total_energy,
    })
}

/// Left singular vectors and singular values, sorted non-increasing.
fn thin_svd(x: DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let svd = x.svd(true, false);
    let u = svd.u.ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let sigma = svd.singular_values;
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));
    let u = DMatrix::from_fn(u.nrows(), order.len(), |i, j| u[(i, order[j])]);
    let sigma = order.iter().map(|&i| sigma[i]).collect();
    Ok((u, sigma))
}

fn orthonormal_range(y: DMatrix<f64>) -> DMatrix<f64> {
    y.qr().q()
}

fn randomized_svd(
    x: &DMatrix<f64>,
    r: usize,
    oversampling: usize,
    power_iterations: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let (n, k) = x.shape();
    let l = (r + oversampling).min(n.min(k));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DMatrix::from_fn(k, l, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orthonormal_range(x * omega);
    for _ in 0..power_iterations {
        let z = orthonormal_range(x.tr_mul(&q));
        q = orthonormal_range(x * z);
    }
    let b = q.tr_mul(x);
    let (ub, sigma) = thin_svd(b)?;
    Ok((q * ub, sigma))
}

/// Flips each column so that its largest-magnitude entry is positive.
fn fix_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let mut best = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Retained energy fraction of the leading `r` modes and its lower bound
/// when only `m = singular_values.len()` of `k_total` values are known:
///
/// ```text
/// eta    = sum_{i<=r} σ_i² / E
/// eta_lb = 1 - (sum_{r<i<=m} σ_i² + (k_total - m) σ_m²) / E
/// ```
///
/// `total_energy` is `E`, the squared Frobenius norm of the scaled snapshot
/// matrix.
pub fn energy_retained(singular_values: &[f64], r: usize, k_total: usize, total_energy: f64) -> Result<(f64, f64)> {
    let m = singular_values.len();
    if r > m {
        return Err(Error::InvalidArgument(format!(
            "rank {r} exceeds the {m} computed singular values"
        )));
    }
    if m == 0 || m > k_total.max(m) || !(total_energy > 0.0) {
        return Err(Error::InvalidArgument("no spectrum or zero total energy".into()));
    }
    let head: f64 = singular_values[..r].iter().map(|s| s * s).sum();
    let tail: f64 = singular_values[r..].iter().map(|s| s * s).sum();
    let sm = singular_values[m - 1];
    let unseen = k_total.saturating_sub(m) as f64 * sm * sm;
    let eta = (head / total_energy).min(1.0);
    let lb = 1.0 - (tail + unseen) / total_energy;
    Ok((eta, lb.min(eta)))
}

/// Smallest rank whose retained energy reaches `threshold`.
pub fn rank_for_energy(basis: &PodBasis, threshold: f64) -> Result<usize> {
    for r in 1..=basis.rank().min(basis.singular_values().len()) {
        if basis.energy(r)?.0 >= threshold {
            return Ok(r);
        }
    }
    Err(Error::InvalidArgument(format!(
        "basis of rank {} does not retain energy {threshold}",
        basis.rank()
    )))
}

/// Reduced coordinates of a snapshot set.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedData {
    pub states: DMatrix<f64>,
    pub derivs: Option<DMatrix<f64>>,
    pub times: Vec<f64>,
}

/// Projects a scaled set: `ŝ_k = Vᵀ W s_k`, and likewise for derivatives.
pub fn project(basis: &PodBasis, scaled: &SnapshotSet) -> Result<ReducedData> {
    if scaled.dim() != basis.dim() {
        return Err(Error::Dimension(format!(
            "snapshots have dimension {}, basis {}",
            scaled.dim(),
            basis.dim()
        )));
    }
    Ok(ReducedData {
        states: basis.project_matrix(scaled.states()),
        derivs: scaled.derivs().map(|d| basis.project_matrix(d)),
        times: scaled.times().to_vec(),
    })
}

/// Centers/scales an unscaled set with the basis' record, then projects.
pub fn project_unscaled(basis: &PodBasis, set: &SnapshotSet) -> Result<ReducedData> {
    project(basis, &basis.scaling().apply(set)?)
}

/// Maps reduced states (`r x N`) back to unscaled full-order states:
/// `x = mean + S V ŝ`.
pub fn reconstruct(basis: &PodBasis, coefficients: &DMatrix<f64>, times: &[f64]) -> Result<SnapshotSet> {
    if coefficients.nrows() != basis.rank() {
        return Err(Error::Dimension(format!(
            "{} reduced coordinates for a rank-{} basis",
            coefficients.nrows(),
            basis.rank()
        )));
    }
    if coefficients.ncols() != times.len() {
        return Err(Error::Dimension(format!(
            "{} columns for {} times",
            coefficients.ncols(),
            times.len()
        )));
    }
    let scaled = SnapshotSet::new(
        basis.vectors() * coefficients,
        None,
        times.to_vec(),
        basis.layout().clone(),
    )?;
    basis.scaling().invert(&scaled)
}
