//! Operator inference: learning reduced polynomial operators from projected
//! snapshot data by regularized least squares.
//!
//! The learned model has the form
//!
//! ```text
//! d s/dt = A s + H (s ⊗ s) + G + B u(t)
//! ```
//!
//! with any subset of the four terms active. The quadratic operator is stored
//! in compact form: one coefficient per unordered pair `(i, j)`, `i <= j`,
//! multiplying `s_i s_j`. The full `r x r²` Kronecker operator is recovered
//! with [`expand_h`] and is symmetric in its two state slots by construction,
//! which is exactly the minimum-norm solution among all Kronecker operators
//! that fit the data.
//!
//! Each of the `r` rows of the operators is an independent least-squares
//! problem sharing the data matrix `D` (one row per snapshot), so a single
//! factorization of `D` serves all rows.

use std::fs;
use std::path::Path;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bytes::ByteCursor;
use crate::error::{Error, Result};
use crate::pod::PodBasis;

pub const MODEL_MAGIC: &[u8; 8] = b"OPINFROM";

/// Which terms of the polynomial model are learned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelForm {
    pub linear: bool,
    pub quadratic: bool,
    pub constant: bool,
    /// Number of input channels `m`; zero disables the input term.
    pub inputs: usize,
}

impl ModelForm {
    pub fn new(linear: bool, quadratic: bool, constant: bool, inputs: usize) -> Result<Self> {
        let form = Self {
            linear,
            quadratic,
            constant,
            inputs,
        };
        form.validate()?;
        Ok(form)
    }

    /// Linear + quadratic, the plain quadratic system.
    pub fn quadratic() -> Self {
        Self {
            linear: true,
            quadratic: true,
            constant: false,
            inputs: 0,
        }
    }

    /// Linear + quadratic + constant + `inputs` input channels.
    pub fn full(inputs: usize) -> Self {
        Self {
            linear: true,
            quadratic: true,
            constant: true,
            inputs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.linear || self.quadratic || self.constant || self.inputs > 0) {
            return Err(Error::InvalidArgument("model form has no active term".into()));
        }
        Ok(())
    }

    /// Number of unknowns per operator row, `p`.
    pub fn width(&self, r: usize) -> usize {
        self.blocks(r).iter().map(|(_, w)| w).sum()
    }

    /// Active blocks in data-matrix column order with their widths.
    pub fn blocks(&self, r: usize) -> Vec<(Block, usize)> {
        let mut out = Vec::with_capacity(4);
        if self.linear {
            out.push((Block::Linear, r));
        }
        if self.quadratic {
            out.push((Block::Quadratic, compact_width(r)));
        }
        if self.constant {
            out.push((Block::Constant, 1));
        }
        if self.inputs > 0 {
            out.push((Block::Input, self.inputs));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Linear,
    Quadratic,
    Constant,
    Input,
}

/// `r (r + 1) / 2`, the number of distinct products `s_i s_j`.
pub fn compact_width(r: usize) -> usize {
    r * (r + 1) / 2
}

/// Tikhonov weights: `gamma1` penalizes the linear, constant and input
/// operators, `gamma2` the quadratic operator.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegWeights {
    pub gamma1: f64,
    pub gamma2: f64,
}

impl RegWeights {
    pub fn new(gamma1: f64, gamma2: f64) -> Result<Self> {
        for (name, g) in [("gamma1", gamma1), ("gamma2", gamma2)] {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and non-negative, got {g}"
                )));
            }
        }
        Ok(Self { gamma1, gamma2 })
    }

    pub fn zero() -> Self {
        Self::default()
    }

    fn for_block(&self, block: Block) -> f64 {
        match block {
            Block::Quadratic => self.gamma2,
            Block::Linear | Block::Constant | Block::Input => self.gamma1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedModel {
    r: usize,
    form: ModelForm,
    a: Option<DMatrix<f64>>,
    h: Option<DMatrix<f64>>,
    g: Option<DVector<f64>>,
    b: Option<DMatrix<f64>>,
    basis_ref: String,
}

impl ReducedModel {
    /// Assembles a model from operator blocks; a block is active iff it is
    /// `Some`. `h` is the compact `r x r(r+1)/2` quadratic operator.
    pub fn new(
        a: Option<DMatrix<f64>>,
        h: Option<DMatrix<f64>>,
        g: Option<DVector<f64>>,
        b: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let r = a
            .as_ref()
            .map(|m| m.nrows())
            .or(h.as_ref().map(|m| m.nrows()))
            .or(g.as_ref().map(|v| v.len()))
            .or(b.as_ref().map(|m| m.nrows()))
            .ok_or_else(|| Error::InvalidArgument("model has no operators".into()))?;
        if r == 0 {
            return Err(Error::InvalidArgument("reduced dimension must be positive".into()));
        }
        let check = |what: &str, shape: (usize, usize), want: (usize, usize)| {
            if shape != want {
                Err(Error::Dimension(format!(
                    "{what} is {} x {}, expected {} x {}",
                    shape.0, shape.1, want.0, want.1
                )))
            } else {
                Ok(())
            }
        };
        if let Some(a) = &a {
            check("A", a.shape(), (r, r))?;
        }
        if let Some(h) = &h {
            check("H", h.shape(), (r, compact_width(r)))?;
        }
        if let Some(g) = &g {
            check("G", (g.len(), 1), (r, 1))?;
        }
        let inputs = b.as_ref().map_or(0, |b| b.ncols());
        if let Some(b) = &b {
            if b.nrows() != r || inputs == 0 {
                return Err(Error::Dimension(format!(
                    "B is {} x {}, expected {r} x m with m >= 1",
                    b.nrows(),
                    b.ncols()
                )));
            }
        }
        let finite = a
            .iter()
            .chain(h.iter())
            .chain(b.iter())
            .all(|m| m.iter().all(|v| v.is_finite()))
            && g.iter().all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::Numerical("model operators contain non-finite entries".into()));
        }
        let form = ModelForm::new(a.is_some(), h.is_some(), g.is_some(), inputs)?;
        Ok(Self {
            r,
            form,
            a,
            h,
            g,
            b,
            basis_ref: String::new(),
        })
    }

    pub fn with_basis_ref(mut self, basis_ref: impl Into<String>) -> Self {
        self.basis_ref = basis_ref.into();
        self
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn form(&self) -> ModelForm {
        self.form
    }

    pub fn a(&self) -> Option<&DMatrix<f64>> {
        self.a.as_ref()
    }

    /// Compact quadratic operator.
    pub fn h(&self) -> Option<&DMatrix<f64>> {
        self.h.as_ref()
    }

    pub fn g(&self) -> Option<&DVector<f64>> {
        self.g.as_ref()
    }

    pub fn b(&self) -> Option<&DMatrix<f64>> {
        self.b.as_ref()
    }

    pub fn basis_ref(&self) -> &str {
        &self.basis_ref
    }

    /// Full symmetric Kronecker form of the quadratic operator.
    pub fn h_full(&self) -> Option<DMatrix<f64>> {
        self.h
            .as_ref()
            .map(|h| expand_h(h).expect("compact width checked at construction"))
    }

    /// Evaluates the right-hand side `A s + H_c q(s) + G + B u` into `out`.
    /// `u` must have `form().inputs` entries.
    pub fn eval_into(&self, s: &[f64], u: &[f64], out: &mut [f64]) {
        let r = self.r;
        debug_assert_eq!(s.len(), r);
        debug_assert_eq!(out.len(), r);
        out.iter_mut().for_each(|o| *o = 0.0);
        if let Some(a) = &self.a {
            for (j, &sj) in s.iter().enumerate() {
                for (o, aij) in out.iter_mut().zip(a.column(j).iter()) {
                    *o += aij * sj;
                }
            }
        }
        if let Some(h) = &self.h {
            let mut col = 0;
            for i in 0..r {
                for j in i..r {
                    let q = s[i] * s[j];
                    for (o, hl) in out.iter_mut().zip(h.column(col).iter()) {
                        *o += hl * q;
                    }
                    col += 1;
                }
            }
        }
        if let Some(g) = &self.g {
            for (o, gi) in out.iter_mut().zip(g.iter()) {
                *o += gi;
            }
        }
        if let Some(b) = &self.b {
            for (c, &uc) in u.iter().enumerate() {
                for (o, bl) in out.iter_mut().zip(b.column(c).iter()) {
                    *o += bl * uc;
                }
            }
        }
    }

    pub fn eval(&self, s: &DVector<f64>, u: &[f64]) -> Result<DVector<f64>> {
        if s.len() != self.r {
            return Err(Error::Dimension(format!(
                "state has {} entries, model r = {}",
                s.len(),
                self.r
            )));
        }
        if u.len() != self.form.inputs {
            return Err(Error::Dimension(format!(
                "input has {} entries, model expects {}",
                u.len(),
                self.form.inputs
            )));
        }
        let mut out = DVector::zeros(self.r);
        self.eval_into(s.as_slice(), u, out.as_mut_slice());
        Ok(out)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(self.r as u64).to_le_bytes());
        out.extend_from_slice(&(self.form.inputs as u64).to_le_bytes());
        let flags = u8::from(self.form.linear) | u8::from(self.form.quadratic) << 1 | u8::from(self.form.constant) << 2;
        out.push(flags);
        out.extend_from_slice(&(self.basis_ref.len() as u64).to_le_bytes());
        out.extend_from_slice(self.basis_ref.as_bytes());
        let mut put_rows = |m: &DMatrix<f64>| {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.extend_from_slice(&m[(i, j)].to_le_bytes());
                }
            }
        };
        if let Some(a) = &self.a {
            put_rows(a);
        }
        if let Some(h) = &self.h {
            put_rows(h);
        }
        if let Some(g) = &self.g {
            put_rows(&DMatrix::from_column_slice(g.len(), 1, g.as_slice()));
        }
        if let Some(b) = &self.b {
            put_rows(b);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        if cur.read_bytes(8)? != MODEL_MAGIC {
            return Err(Error::format("byte 0", "bad magic; not a reduced-model file"));
        }
        let r = cur.read_u64()? as usize;
        let m = cur.read_u64()? as usize;
        let flags_at = cur.position();
        let flags = cur.read_bytes(1)?[0];
        if flags & !0b111 != 0 {
            return Err(Error::format(
                format!("byte {flags_at}"),
                format!("unknown flag bits {flags:#010b}"),
            ));
        }
        let len = cur.read_u64()? as usize;
        let name_at = cur.position();
        let basis_ref = String::from_utf8(cur.read_bytes(len)?.to_vec())
            .map_err(|_| Error::format(format!("byte {name_at}"), "basis reference is not UTF-8"))?;
        let form = ModelForm::new(flags & 1 != 0, flags & 2 != 0, flags & 4 != 0, m)
            .map_err(|e| Error::format(format!("byte {flags_at}"), e.to_string()))?;
        if r == 0 || r > 1 << 20 {
            return Err(Error::format("byte 8", format!("implausible reduced dimension {r}")));
        }
        let a = form.linear.then(|| cur.read_rows(r, r)).transpose()?;
        let h = form.quadratic.then(|| cur.read_rows(r, compact_width(r))).transpose()?;
        let g = form
            .constant
            .then(|| cur.read_rows(r, 1).map(|m| DVector::from_column_slice(m.as_slice())))
            .transpose()?;
        let b = (m > 0).then(|| cur.read_rows(r, m)).transpose()?;
        if cur.remaining() != 0 {
            return Err(Error::Dimension(format!(
                "model file has {} trailing bytes after byte {}",
                cur.remaining(),
                cur.position()
            )));
        }
        Ok(Self::new(a, h, g, b)?.with_basis_ref(basis_ref))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Products `s_i s_j` for `i <= j`, lexicographic in `(i, j)`.
pub fn compact_quadratic(s: &[f64]) -> Vec<f64> {
    let r = s.len();
    let mut out = Vec::with_capacity(compact_width(r));
    for i in 0..r {
        for j in i..r {
            out.push(s[i] * s[j]);
        }
    }
    out
}

/// Expands a compact quadratic operator (`r x r(r+1)/2`) into the symmetric
/// Kronecker form (`r x r²`): diagonal pairs carry the compact coefficient,
/// off-diagonal pairs split it evenly between `(i, j)` and `(j, i)`.
pub fn expand_h(h_compact: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rows = h_compact.nrows();
    let width = h_compact.ncols();
    let r = ((((8 * width + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    if compact_width(r) != width {
        return Err(Error::Dimension(format!("{width} columns is not r(r+1)/2 for any r")));
    }
    let mut full = DMatrix::zeros(rows, r * r);
    let mut col = 0;
    for i in 0..r {
        for j in i..r {
            for l in 0..rows {
                let c = h_compact[(l, col)];
                if i == j {
                    full[(l, i * r + i)] = c;
                } else {
                    full[(l, i * r + j)] = 0.5 * c;
                    full[(l, j * r + i)] = 0.5 * c;
                }
            }
            col += 1;
        }
    }
    Ok(full)
}

/// Folds a full Kronecker operator (`r x r²`) into compact form by summing
/// the `(i, j)` and `(j, i)` coefficients. Inverse of [`expand_h`] on
/// symmetric operators.
pub fn compress_h(h_full: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rows = h_full.nrows();
    let r = (h_full.ncols() as f64).sqrt().round() as usize;
    if r * r != h_full.ncols() {
        return Err(Error::Dimension(format!(
            "{} columns is not r² for any r",
            h_full.ncols()
        )));
    }
    let mut out = DMatrix::zeros(rows, compact_width(r));
    let mut col = 0;
    for i in 0..r {
        for j in i..r {
            for l in 0..rows {
                out[(l, col)] = if i == j {
                    h_full[(l, i * r + i)]
                } else {
                    h_full[(l, i * r + j)] + h_full[(l, j * r + i)]
                };
            }
            col += 1;
        }
    }
    Ok(out)
}

/// Assembles the `K x p` least-squares data matrix. Row `k` is
/// `[s_k, q(s_k), 1, u_k]` with inactive blocks omitted.
///
/// `states` is `r x K`; `inputs`, when the form has inputs, is `m x K`.
pub fn build_data_matrix(
    states: &DMatrix<f64>,
    inputs: Option<&DMatrix<f64>>,
    form: &ModelForm,
) -> Result<DMatrix<f64>> {
    form.validate()?;
    let (r, k) = states.shape();
    if r == 0 || k == 0 {
        return Err(Error::InvalidArgument("no reduced snapshots".into()));
    }
    if form.inputs > 0 {
        let u = inputs.ok_or_else(|| Error::Dimension(format!("form expects {} inputs, none given", form.inputs)))?;
        if u.shape() != (form.inputs, k) {
            return Err(Error::Dimension(format!(
                "inputs are {} x {}, expected {} x {k}",
                u.nrows(),
                u.ncols(),
                form.inputs
            )));
        }
    }
    let p = form.width(r);
    let mut d = DMatrix::zeros(k, p);
    for snap in 0..k {
        let s = states.column(snap);
        let mut col = 0;
        for (block, width) in form.blocks(r) {
            match block {
                Block::Linear => {
                    for i in 0..r {
                        d[(snap, col + i)] = s[i];
                    }
                }
                Block::Quadratic => {
                    let mut c = col;
                    for i in 0..r {
                        for j in i..r {
                            d[(snap, c)] = s[i] * s[j];
                            c += 1;
                        }
                    }
                }
                Block::Constant => d[(snap, col)] = 1.0,
                Block::Input => {
                    let u = inputs.expect("checked above");
                    for c in 0..width {
                        d[(snap, col + c)] = u[(c, snap)];
                    }
                }
            }
            col += width;
        }
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveMethod {
    /// Householder QR of the stacked, fully penalized system.
    Qr,
    /// Truncated SVD pseudo-inverse (minimum-norm solution).
    Svd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveReport {
    pub method: SolveMethod,
    /// Numerical rank of the stacked system.
    pub rank: usize,
    pub unknowns: usize,
    /// Ratio of extreme singular values (SVD) or of extreme `|R_ii|` (QR).
    pub condition: f64,
}

impl SolveReport {
    pub fn rank_deficient(&self) -> bool {
        self.rank < self.unknowns
    }
}

/// Solves the regularized operator inference problem
///
/// ```text
/// min_o (1/K) ||D o - y||² + sum_j gamma_j o_j²
/// ```
///
/// independently for each column `y` of `rhs` (`K x r`), with `gamma_j` equal
/// to `gamma2` on quadratic coefficients and `gamma1` on all others. The
/// misfit is rescaled by `K` and the penalty appended as extra rows, so the
/// problem becomes an unweighted stacked least-squares solve. When every
/// active coefficient is penalized the stacked matrix has full column rank
/// and is solved by QR; otherwise the minimum-norm solution is taken from a
/// truncated SVD.
pub fn solve_regularized(
    d: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    weights: &RegWeights,
    form: &ModelForm,
) -> Result<(ReducedModel, SolveReport)> {
    let (ops, report) = solve_operator_rows(d, rhs, weights, form)?;
    let model = split_operators(&ops, rhs.ncols(), form)?;
    Ok((model, report))
}

/// Lower-level form of [`solve_regularized`] returning the raw `p x r`
/// coefficient matrix (column `l` holds row `l` of the stacked operators).
pub fn solve_operator_rows(
    d: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    weights: &RegWeights,
    form: &ModelForm,
) -> Result<(DMatrix<f64>, SolveReport)> {
    form.validate()?;
    let (k, p) = d.shape();
    let r = rhs.ncols();
    if p == 0 || k == 0 {
        return Err(Error::InvalidArgument("empty data matrix".into()));
    }
    if rhs.nrows() != k {
        return Err(Error::Dimension(format!(
            "data matrix has {k} rows but right-hand side has {}",
            rhs.nrows()
        )));
    }
    if form.width(r) != p {
        return Err(Error::Dimension(format!(
            "data matrix has {p} columns; form with r = {r} needs {}",
            form.width(r)
        )));
    }
    if d.iter().chain(rhs.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("operator inference data".into()));
    }
    let weights = RegWeights::new(weights.gamma1, weights.gamma2)?;

    let mut penalty = Vec::with_capacity(p);
    for (block, width) in form.blocks(r) {
        penalty.extend(std::iter::repeat_n(weights.for_block(block), width));
    }
    let penalized: Vec<usize> = (0..p).filter(|&j| penalty[j] > 0.0).collect();
    let rows = k + penalized.len();
    let mut a = DMatrix::zeros(rows, p);
    a.rows_mut(0, k).copy_from(d);
    let mut b = DMatrix::zeros(rows, r);
    b.rows_mut(0, k).copy_from(rhs);
    for (row, &j) in penalized.iter().enumerate() {
        a[(k + row, j)] = (k as f64 * penalty[j]).sqrt();
    }

    let (x, report) = if penalized.len() == p {
        solve_qr(a, b)?
    } else {
        solve_min_norm(a, b)?
    };
    debug!(
        "operator inference: {k} snapshots, {p} unknowns, r = {r}, method {:?}, rank {}, condition {:.3e}",
        report.method, report.rank, report.condition
    );
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "least-squares solve produced non-finite coefficients (condition estimate {:.3e})",
            report.condition
        )));
    }
    Ok((x, report))
}

fn solve_qr(a: DMatrix<f64>, mut b: DMatrix<f64>) -> Result<(DMatrix<f64>, SolveReport)> {
    let p = a.ncols();
    let qr = a.qr();
    qr.q_tr_mul(&mut b);
    let r = qr.r();
    let diag: Vec<f64> = (0..p).map(|i| r[(i, i)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut x = b.rows(0, p).into_owned();
    if !r.solve_upper_triangular_mut(&mut x) {
        return Err(Error::Numerical("triangular factor is singular".into()));
    }
    Ok((
        x,
        SolveReport {
            method: SolveMethod::Qr,
            rank: p,
            unknowns: p,
            condition: max / min,
        },
    ))
}

fn solve_min_norm(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<(DMatrix<f64>, SolveReport)> {
    let (m, p) = a.shape();
    let svd = a.svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let sigma = &svd.singular_values;
    let smax = sigma.iter().cloned().fold(0.0, f64::max);
    let tol = smax * m.max(p) as f64 * f64::EPSILON;
    let kept: Vec<usize> = (0..sigma.len()).filter(|&i| sigma[i] > tol).collect();
    let smin = kept.iter().map(|&i| sigma[i]).fold(f64::INFINITY, f64::min);
    let ut_b = u.transpose() * &b;
    let mut scaled = DMatrix::zeros(sigma.len(), b.ncols());
    for &i in &kept {
        for c in 0..b.ncols() {
            scaled[(i, c)] = ut_b[(i, c)] / sigma[i];
        }
    }
    let x = v_t.transpose() * scaled;
    Ok((
        x,
        SolveReport {
            method: SolveMethod::Svd,
            rank: kept.len(),
            unknowns: p,
            condition: if kept.is_empty() { f64::INFINITY } else { smax / smin },
        },
    ))
}

/// Splits a `p x r` coefficient matrix into operator blocks.
pub fn split_operators(ops: &DMatrix<f64>, r: usize, form: &ModelForm) -> Result<ReducedModel> {
    if ops.shape() != (form.width(r), r) {
        return Err(Error::Dimension(format!(
            "coefficients are {} x {}, expected {} x {r}",
            ops.nrows(),
            ops.ncols(),
            form.width(r)
        )));
    }
    let (mut a, mut h, mut g, mut b) = (None, None, None, None);
    let mut row = 0;
    for (block, width) in form.blocks(r) {
        let part = ops.rows(row, width).transpose();
        match block {
            Block::Linear => a = Some(part),
            Block::Quadratic => h = Some(part),
            Block::Constant => g = Some(DVector::from_column_slice(part.as_slice())),
            Block::Input => b = Some(part),
        }
        row += width;
    }
    ReducedModel::new(a, h, g, b)
}

/// Convenience wrapper: builds `D` from reduced states/inputs and solves
/// against the reduced derivatives (`r x K`).
pub fn infer(
    states: &DMatrix<f64>,
    derivs: &DMatrix<f64>,
    inputs: Option<&DMatrix<f64>>,
    form: &ModelForm,
    weights: &RegWeights,
) -> Result<(ReducedModel, SolveReport)> {
    if derivs.shape() != states.shape() {
        return Err(Error::Dimension(format!(
            "reduced derivatives are {} x {} but states are {} x {}",
            derivs.nrows(),
            derivs.ncols(),
            states.nrows(),
            states.ncols()
        )));
    }
    let d = build_data_matrix(states, inputs, form)?;
    solve_regularized(&d, &derivs.transpose(), weights, form)
}

/// Full-order right-hand side with exposed polynomial structure
/// `f(x) = c + a(x) + h(x, x)`, `a` linear and `h` bilinear.
pub trait QuadraticStructure {
    fn dim(&self) -> usize;

    fn linear(&self, x: &DVector<f64>) -> DVector<f64>;

    fn bilinear(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;

    fn constant(&self) -> Option<DVector<f64>> {
        None
    }
}

/// Intrusive (Galerkin) reduced operators: projects the full-order linear and
/// bilinear maps onto the basis, accounting for the basis' centering and
/// scaling. With `x = xbar + S V s`, the reduced dynamics are
/// `ds/dt = Vᵀ W S⁻¹ f(xbar + S V s)`, which expands into constant, linear
/// and quadratic terms. The returned model is linear + quadratic + constant.
pub fn intrusive_operators(basis: &PodBasis, rhs: &dyn QuadraticStructure) -> Result<ReducedModel> {
    let n = basis.dim();
    if rhs.dim() != n {
        return Err(Error::Dimension(format!(
            "full-order operator acts on dimension {} but basis has {n} rows",
            rhs.dim()
        )));
    }
    let r = basis.rank();
    let scales = basis.scaling().row_scales();
    let mean = basis.scaling().means().clone();
    // modes in physical units: S psi_i
    let modes: Vec<DVector<f64>> = (0..r)
        .map(|i| basis.vectors().column(i).component_mul(&scales))
        .collect();
    let reduce = |full: DVector<f64>| -> DVector<f64> { basis.project_vector(&full.component_div(&scales)) };

    let mut f_mean = rhs.linear(&mean) + rhs.bilinear(&mean, &mean);
    if let Some(c) = rhs.constant() {
        f_mean += c;
    }
    let g = reduce(f_mean);

    let mut a = DMatrix::zeros(r, r);
    for (i, mode) in modes.iter().enumerate() {
        let col = rhs.linear(mode) + rhs.bilinear(&mean, mode) + rhs.bilinear(mode, &mean);
        a.set_column(i, &reduce(col));
    }

    let mut h = DMatrix::zeros(r, compact_width(r));
    let mut col = 0;
    for i in 0..r {
        for j in i..r {
            let term = if i == j {
                rhs.bilinear(&modes[i], &modes[i])
            } else {
                rhs.bilinear(&modes[i], &modes[j]) + rhs.bilinear(&modes[j], &modes[i])
            };
            h.set_column(col, &reduce(term));
            col += 1;
        }
    }
    Ok(ReducedModel::new(Some(a), Some(h), Some(g), None)?.with_basis_ref(basis.fingerprint()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VariableLayout;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn compact_quadratic_examples() {
        assert_eq!(compact_quadratic(&[1.0, 2.0]), vec![1.0, 2.0, 4.0]);
        assert_eq!(compact_quadratic(&[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
        assert!(compact_quadratic(&[0.0; 4]).iter().all(|v| *v == 0.0));
        assert_eq!(compact_quadratic(&[0.0; 4]).len(), 10);
    }

    #[test]
    fn expand_h_splits_off_diagonal() {
        let h = DMatrix::from_row_slice(1, 3, &[1.0, 4.0, 3.0]);
        let full = expand_h(&h).unwrap();
        assert_eq!(full.as_slice(), &[1.0, 2.0, 2.0, 3.0]);
        assert!(expand_h(&DMatrix::zeros(2, 3)).unwrap().iter().all(|v| *v == 0.0));
        assert!(expand_h(&DMatrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn compress_inverts_expand() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = rand_mat(&mut rng, 4, compact_width(4));
        assert_relative_eq!(compress_h(&expand_h(&h).unwrap()).unwrap(), h, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn expanded_and_compact_evaluations_agree(seed in any::<u64>(), r in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = rand_mat(&mut rng, r, compact_width(r));
            let s: Vec<f64> = (0..r).map(|_| rng.random_range(-2.0..2.0)).collect();
            let sv = DVector::from_column_slice(&s);
            let kron = DVector::from_fn(r * r, |idx, _| s[idx / r] * s[idx % r]);
            let full = expand_h(&h).unwrap();
            let via_full = &full * kron;
            let via_compact = &h * DVector::from_vec(compact_quadratic(&s));
            for l in 0..r {
                prop_assert!((via_full[l] - via_compact[l]).abs() <= 1e-13 * (1.0 + via_compact[l].abs()));
                for i in 0..r {
                    for j in 0..r {
                        prop_assert_eq!(full[(l, i * r + j)], full[(l, j * r + i)]);
                    }
                }
            }
            let _ = sv;
        }
    }

    #[test]
    fn data_matrix_rows() {
        let states = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let form = ModelForm::new(true, true, true, 0).unwrap();
        let d = build_data_matrix(&states, None, &form).unwrap();
        assert_eq!(d, DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 2.0, 4.0, 1.0]));

        let states = DMatrix::from_fn(3, 5, |i, j| (i + j) as f64);
        let quad_only = ModelForm::new(false, true, false, 0).unwrap();
        assert_eq!(build_data_matrix(&states, None, &quad_only).unwrap().ncols(), 6);

        let zeros = DMatrix::zeros(2, 4);
        let d = build_data_matrix(&zeros, None, &ModelForm::full(0)).unwrap();
        assert!(d.column(5).iter().all(|v| *v == 1.0));
        assert!(d.columns(0, 5).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn data_matrix_inputs_and_errors() {
        let states = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let u = DMatrix::from_row_slice(1, 2, &[5.0, 6.0]);
        let d = build_data_matrix(&states, Some(&u), &ModelForm::full(1)).unwrap();
        assert_eq!(
            d.row(1).iter().copied().collect::<Vec<_>>(),
            vec![2.0, 4.0, 4.0, 8.0, 16.0, 1.0, 6.0]
        );
        assert!(build_data_matrix(&states, None, &ModelForm::full(1)).is_err());
        let bad_u = DMatrix::zeros(1, 3);
        assert!(matches!(
            build_data_matrix(&states, Some(&bad_u), &ModelForm::full(1)),
            Err(Error::Dimension(_))
        ));
        assert!(ModelForm::new(false, false, false, 0).is_err());
    }

    #[test]
    fn dof_counts() {
        for (r, p) in [(60, 1892), (80, 3322), (100, 5152)] {
            assert_eq!(ModelForm::full(1).width(r), p);
        }
    }

    #[test]
    fn scalar_tikhonov() {
        let d = DMatrix::from_element(1, 1, 1.0);
        let y = DMatrix::from_element(1, 1, 2.0);
        let form = ModelForm::new(true, false, false, 0).unwrap();
        let (m, rep) = solve_regularized(&d, &y, &RegWeights::zero(), &form).unwrap();
        assert_relative_eq!(m.a().unwrap()[(0, 0)], 2.0, epsilon = 1e-15);
        assert_eq!(rep.method, SolveMethod::Svd);
        let (m, rep) = solve_regularized(&d, &y, &RegWeights::new(1.0, 0.0).unwrap(), &form).unwrap();
        assert_relative_eq!(m.a().unwrap()[(0, 0)], 1.0, epsilon = 1e-15);
        assert_eq!(rep.method, SolveMethod::Qr);
    }

    #[test]
    fn tikhonov_matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = 3;
        let form = ModelForm::full(1);
        let p = form.width(r);
        let k = 40;
        let d = rand_mat(&mut rng, k, p);
        let y = rand_mat(&mut rng, k, r);
        let w = RegWeights::new(0.3, 0.05).unwrap();
        let (ops, _) = solve_operator_rows(&d, &y, &w, &form).unwrap();
        let mut gamma = DMatrix::zeros(p, p);
        let mut j = 0;
        for (block, width) in form.blocks(r) {
            for _ in 0..width {
                gamma[(j, j)] = w.for_block(block);
                j += 1;
            }
        }
        let normal = d.transpose() * &d / k as f64 + gamma;
        let expected = normal.lu().solve(&(d.transpose() * &y / k as f64)).unwrap();
        assert_relative_eq!(ops, expected, epsilon = 1e-10, max_relative = 1e-10);
    }

    #[test]
    fn rows_solve_independently() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = 4;
        let form = ModelForm::full(0);
        let d = rand_mat(&mut rng, 30, form.width(r));
        let y = rand_mat(&mut rng, 30, r);
        for w in [RegWeights::zero(), RegWeights::new(1e-2, 1e-3).unwrap()] {
            let (all, _) = solve_operator_rows(&d, &y, &w, &form).unwrap();
            for l in 0..r {
                let y_l = y.column(l).into_owned();
                // single right-hand side, same algorithm
                let (one, _) = solve_single_row(&d, &y_l, &w, &form, r);
                for i in 0..all.nrows() {
                    assert!((all[(i, l)] - one[i]).abs() <= 1e-13 * (1.0 + one[i].abs()));
                }
            }
        }
    }

    fn solve_single_row(
        d: &DMatrix<f64>,
        y: &DVector<f64>,
        w: &RegWeights,
        form: &ModelForm,
        r: usize,
    ) -> (DVector<f64>, SolveReport) {
        // pad the single column into an r-column problem whose other columns are zero
        let mut rhs = DMatrix::zeros(y.len(), r);
        rhs.set_column(0, y);
        let (x, rep) = solve_operator_rows(d, &rhs, w, form).unwrap();
        (x.column(0).into_owned(), rep)
    }

    #[test]
    fn regularization_shrinks_blocks_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let r = 3;
        let form = ModelForm::full(0);
        let d = rand_mat(&mut rng, 25, form.width(r));
        let y = rand_mat(&mut rng, 25, r);
        let mut last = (f64::INFINITY, f64::INFINITY);
        for g in [1e-6, 1e-4, 1e-2, 1.0, 100.0] {
            let (m, _) = solve_regularized(&d, &y, &RegWeights::new(g, g).unwrap(), &form).unwrap();
            let lin = m.a().unwrap().norm_squared() + m.g().unwrap().norm_squared();
            let quad = m.h().unwrap().norm();
            assert!(lin.sqrt() <= last.0 * (1.0 + 1e-12));
            assert!(quad <= last.1 * (1.0 + 1e-12));
            last = (lin.sqrt(), quad);
        }
        // gamma2 ladder at fixed gamma1
        let mut last = f64::INFINITY;
        for g2 in [1e-6, 1e-3, 1.0, 1e3] {
            let (m, _) = solve_regularized(&d, &y, &RegWeights::new(1e-3, g2).unwrap(), &form).unwrap();
            assert!(m.h().unwrap().norm() <= last * (1.0 + 1e-12));
            last = m.h().unwrap().norm();
        }
    }

    #[test]
    fn rank_deficient_solution_is_minimum_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = 3;
        let form = ModelForm::quadratic();
        let p = form.width(r);
        // four distinct snapshots, each repeated: rank 4 < p = 9
        let base = rand_mat(&mut rng, r, 4);
        let states = DMatrix::from_fn(r, 8, |i, j| base[(i, j % 4)]);
        let derivs = rand_mat(&mut rng, r, 4);
        let derivs = DMatrix::from_fn(r, 8, |i, j| derivs[(i, j % 4)]);
        let (model, rep) = infer(&states, &derivs, None, &form, &RegWeights::zero()).unwrap();
        assert!(rep.rank_deficient());
        assert_eq!(rep.rank, 4);
        // pseudo-inverse oracle
        let d = build_data_matrix(&states, None, &form).unwrap();
        let pinv = d.clone().pseudo_inverse(1e-12).unwrap();
        let ops = pinv * derivs.transpose();
        let oracle = split_operators(&ops, r, &form).unwrap();
        assert_relative_eq!(model.h().unwrap(), oracle.h().unwrap(), epsilon = 1e-10);
        assert_relative_eq!(model.a().unwrap(), oracle.a().unwrap(), epsilon = 1e-10);
        assert_eq!(p, 9);
    }

    #[test]
    fn solve_rejects_mismatches() {
        let d = DMatrix::zeros(4, 3);
        let y = DMatrix::zeros(3, 1);
        let form = ModelForm::new(true, true, true, 0).unwrap();
        assert!(matches!(
            solve_regularized(&d, &y, &RegWeights::zero(), &form),
            Err(Error::Dimension(_))
        ));
        let y = DMatrix::zeros(4, 2);
        assert!(matches!(
            solve_regularized(&d, &y, &RegWeights::zero(), &form),
            Err(Error::Dimension(_))
        ));
        let mut d = DMatrix::zeros(4, 3);
        d[(0, 0)] = f64::NAN;
        let y = DMatrix::zeros(4, 1);
        assert!(solve_regularized(&d, &y, &RegWeights::zero(), &form).is_err());
        assert!(RegWeights::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = 3;
        let model = ReducedModel::new(
            Some(rand_mat(&mut rng, r, r)),
            Some(rand_mat(&mut rng, r, 6)),
            Some(DVector::from_fn(r, |i, _| i as f64)),
            Some(rand_mat(&mut rng, r, 2)),
        )
        .unwrap()
        .with_basis_ref("abc123");
        let bytes = model.encode();
        assert_eq!(ReducedModel::decode(&bytes).unwrap(), model);
        assert!(ReducedModel::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(ReducedModel::decode(&longer).is_err());

        let lin_only = ReducedModel::new(Some(DMatrix::identity(2, 2)), None, None, None).unwrap();
        assert_eq!(ReducedModel::decode(&lin_only.encode()).unwrap(), lin_only);
    }

    #[test]
    fn model_rejects_bad_shapes() {
        assert!(ReducedModel::new(Some(DMatrix::zeros(2, 2)), Some(DMatrix::zeros(2, 4)), None, None).is_err());
        assert!(ReducedModel::new(None, None, None, None).is_err());
        let mut a = DMatrix::zeros(2, 2);
        a[(0, 1)] = f64::INFINITY;
        assert!(ReducedModel::new(Some(a), None, None, None).is_err());
    }

    struct DiagLinear(Vec<f64>);

    impl QuadraticStructure for DiagLinear {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn linear(&self, x: &DVector<f64>) -> DVector<f64> {
            x.component_mul(&DVector::from_column_slice(&self.0))
        }
        fn bilinear(&self, x: &DVector<f64>, _y: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(x.len())
        }
    }

    #[test]
    fn intrusive_coordinate_projection() {
        let layout = VariableLayout::single("s", 2).unwrap();
        let e1 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let basis = PodBasis::from_vectors(e1, layout.clone()).unwrap();
        let m = intrusive_operators(&basis, &DiagLinear(vec![-1.0, -2.0])).unwrap();
        assert_eq!(m.a().unwrap()[(0, 0)], -1.0);

        let basis = PodBasis::from_vectors(DMatrix::identity(2, 2), layout).unwrap();
        let m = intrusive_operators(&basis, &DiagLinear(vec![-1.0, -2.0])).unwrap();
        assert_eq!(m.a().unwrap(), &DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]));
        assert!(m.g().unwrap().iter().all(|v| *v == 0.0));
    }
}
