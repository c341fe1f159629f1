//! Snapshot storage and file I/O.
//!
//! A [`SnapshotSet`] holds an `n x K` matrix of state snapshots (one column
//! per time instant), optional time-derivative data of the same shape, the
//! snapshot times, and a [`VariableLayout`] describing how the `n` rows split
//! into named physical variables.
//!
//! Two on-disk formats are supported:
//!
//! * binary: `"OPINF1\0\0"`, then little-endian `u64 n`, `u64 K`,
//!   `u64 var_count`, `u64 dofs_per_var`, `u8 has_derivs`, `K` f64 times, the
//!   `n x K` states column-major, and (when `has_derivs == 1`) the `n x K`
//!   derivatives column-major. Variable names are not stored; decoded sets
//!   carry the names `v0, v1, ...`.
//! * csv: header `t,<var>_<dof>,...[,ddt_<var>_<dof>,...]`, one row per
//!   snapshot. Derivative columns are present only when the set has them.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"OPINF1\0\0";
const HEADER_LEN: usize = 8 + 4 * 8 + 1;
const DERIV_PREFIX: &str = "ddt_";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableLayout {
    names: Vec<String>,
    dofs_per_var: usize,
}

impl VariableLayout {
    pub fn new(names: Vec<String>, dofs_per_var: usize) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidArgument("layout needs at least one variable".into()));
        }
        if dofs_per_var == 0 {
            return Err(Error::InvalidArgument("dofs_per_var must be positive".into()));
        }
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::InvalidArgument(format!("variable {i} has an empty name")));
            }
            if names[..i].contains(name) {
                return Err(Error::InvalidArgument(format!("duplicate variable name `{name}`")));
            }
        }
        Ok(Self { names, dofs_per_var })
    }

    pub fn single(name: &str, dofs_per_var: usize) -> Result<Self> {
        Self::new(vec![name.to_string()], dofs_per_var)
    }

    /// Layout with placeholder names `v0, v1, ...`.
    pub fn with_default_names(var_count: usize, dofs_per_var: usize) -> Result<Self> {
        Self::new((0..var_count).map(|i| format!("v{i}")).collect(), dofs_per_var)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn var_count(&self) -> usize {
        self.names.len()
    }

    pub fn dofs_per_var(&self) -> usize {
        self.dofs_per_var
    }

    /// Total state dimension `var_count * dofs_per_var`.
    pub fn dim(&self) -> usize {
        self.names.len() * self.dofs_per_var
    }

    /// Rows of the state vector belonging to variable `var`.
    pub fn var_range(&self, var: usize) -> Range<usize> {
        var * self.dofs_per_var..(var + 1) * self.dofs_per_var
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Resolves a variable given either by name or by decimal index.
    pub fn resolve(&self, name_or_index: &str) -> Result<usize> {
        if let Some(i) = self.index_of(name_or_index) {
            return Ok(i);
        }
        match name_or_index.parse::<usize>() {
            Ok(i) if i < self.var_count() => Ok(i),
            _ => Err(Error::InvalidArgument(format!(
                "unknown variable `{name_or_index}` (have {})",
                self.names.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    states: DMatrix<f64>,
    derivs: Option<DMatrix<f64>>,
    times: Vec<f64>,
    layout: VariableLayout,
}

impl SnapshotSet {
    pub fn new(
        states: DMatrix<f64>,
        derivs: Option<DMatrix<f64>>,
        times: Vec<f64>,
        layout: VariableLayout,
    ) -> Result<Self> {
        let (n, k) = states.shape();
        if n == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!(
                "snapshot set must be non-empty (got {n} x {k})"
            )));
        }
        if layout.dim() != n {
            return Err(Error::Dimension(format!(
                "layout describes {} rows but states have {n}",
                layout.dim()
            )));
        }
        if times.len() != k {
            return Err(Error::Dimension(format!(
                "{} time stamps for {k} snapshots",
                times.len()
            )));
        }
        if let Some(d) = &derivs {
            if d.shape() != (n, k) {
                return Err(Error::Dimension(format!(
                    "derivs are {} x {} but states are {n} x {k}",
                    d.nrows(),
                    d.ncols()
                )));
            }
        }
        check_times(&times)?;
        check_finite(&states, "states")?;
        if let Some(d) = &derivs {
            check_finite(d, "derivs")?;
        }
        Ok(Self {
            states,
            derivs,
            times,
            layout,
        })
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn derivs(&self) -> Option<&DMatrix<f64>> {
        self.derivs.as_ref()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn layout(&self) -> &VariableLayout {
        &self.layout
    }

    /// State dimension `n`.
    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    /// Number of snapshots `K`.
    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_parts(self) -> (DMatrix<f64>, Option<DMatrix<f64>>, Vec<f64>, VariableLayout) {
        (self.states, self.derivs, self.times, self.layout)
    }

    pub fn with_derivs(self, derivs: Option<DMatrix<f64>>) -> Result<Self> {
        Self::new(self.states, derivs, self.times, self.layout)
    }

    pub fn with_layout(self, layout: VariableLayout) -> Result<Self> {
        Self::new(self.states, self.derivs, self.times, layout)
    }

    /// Snapshots `range` (column indices) as a new set.
    pub fn select(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::InvalidArgument(format!(
                "snapshot range {range:?} out of bounds for {} snapshots",
                self.len()
            )));
        }
        let cols = range.len();
        Self::new(
            self.states.columns(range.start, cols).into_owned(),
            self.derivs.as_ref().map(|d| d.columns(range.start, cols).into_owned()),
            self.times[range].to_vec(),
            self.layout.clone(),
        )
    }

    /// Rows of one variable as an `dofs_per_var x K` matrix.
    pub fn variable(&self, var: usize) -> DMatrix<f64> {
        let rows = self.layout.var_range(var);
        self.states.rows(rows.start, rows.len()).into_owned()
    }

    /// Common spacing of the time stamps. Errors if the stamps are not
    /// uniform to within `1e-12` relative to the magnitude of the time axis.
    pub fn uniform_step(&self) -> Result<f64> {
        uniform_step(&self.times)
    }
}

/// Common spacing of a time axis; see [`SnapshotSet::uniform_step`].
pub fn uniform_step(times: &[f64]) -> Result<f64> {
    if times.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least two time stamps to define a step".into(),
        ));
    }
    let k = times.len();
    let t0 = times[0];
    let h = (times[k - 1] - t0) / (k - 1) as f64;
    let tol = 1e-12 * h.max(t0.abs()).max(times[k - 1].abs());
    for (i, &t) in times.iter().enumerate() {
        if (t - (t0 + i as f64 * h)).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "time stamps are not uniformly spaced (index {i}: t = {t}, expected {})",
                t0 + i as f64 * h
            )));
        }
    }
    Ok(h)
}

fn check_times(times: &[f64]) -> Result<()> {
    for (k, &t) in times.iter().enumerate() {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("time stamp {k}")));
        }
        if k > 0 && t <= times[k - 1] {
            return Err(Error::InvalidArgument(format!(
                "time stamps must be strictly increasing (index {k}: {} after {})",
                t,
                times[k - 1]
            )));
        }
    }
    Ok(())
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    for k in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, k)].is_finite() {
                return Err(Error::NonFinite(format!("{what}[row {i}, snapshot {k}]")));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotFormat {
    Binary,
    Csv,
}

impl SnapshotFormat {
    /// `.csv` selects CSV; everything else is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => SnapshotFormat::Csv,
            _ => SnapshotFormat::Binary,
        }
    }
}

impl FromStr for SnapshotFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary" | "bin" => Ok(SnapshotFormat::Binary),
            "csv" => Ok(SnapshotFormat::Csv),
            other => Err(Error::InvalidArgument(format!("unknown snapshot format `{other}`"))),
        }
    }
}

impl fmt::Display for SnapshotFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SnapshotFormat::Binary => "binary",
            SnapshotFormat::Csv => "csv",
        })
    }
}

pub fn read_snapshots(path: &Path, format: SnapshotFormat) -> Result<SnapshotSet> {
    match format {
        SnapshotFormat::Binary => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_binary(&bytes)
        }
        SnapshotFormat::Csv => {
            let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
            decode_csv(file)
        }
    }
}

pub fn write_snapshots(set: &SnapshotSet, path: &Path, format: SnapshotFormat) -> Result<()> {
    let bytes = match format {
        SnapshotFormat::Binary => encode_binary(set),
        SnapshotFormat::Csv => encode_csv(set)?,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_binary(set: &SnapshotSet) -> Vec<u8> {
    let (n, k) = set.states.shape();
    let values = k + n * k * if set.derivs.is_some() { 2 } else { 1 };
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * values);
    out.extend_from_slice(SNAPSHOT_MAGIC);
    for v in [
        n as u64,
        k as u64,
        set.layout.var_count() as u64,
        set.layout.dofs_per_var() as u64,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(u8::from(set.derivs.is_some()));
    for &t in &set.times {
        out.extend_from_slice(&t.to_le_bytes());
    }
    // nalgebra storage is column-major already
    for &v in set.states.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(d) = &set.derivs {
        for &v in d.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_binary(bytes: &[u8]) -> Result<SnapshotSet> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            format!("byte {}", bytes.len()),
            format!("file too short for header ({} < {HEADER_LEN} bytes)", bytes.len()),
        ));
    }
    if &bytes[..8] != SNAPSHOT_MAGIC {
        return Err(Error::format("byte 0", "bad magic; not a snapshot file"));
    }
    let word = |i: usize| -> u64 {
        let off = 8 + 8 * i;
        u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap())
    };
    let (n, k, var_count, dofs) = (word(0), word(1), word(2), word(3));
    let has_derivs = match bytes[40] {
        0 => false,
        1 => true,
        b => {
            return Err(Error::format(
                "byte 40",
                format!("has_derivs flag must be 0 or 1, got {b}"),
            ))
        }
    };
    if n == 0 || k == 0 {
        return Err(Error::format(
            "byte 8",
            format!("empty snapshot set declared (n = {n}, K = {k})"),
        ));
    }
    if var_count.checked_mul(dofs) != Some(n) {
        return Err(Error::format(
            "byte 24",
            format!("var_count {var_count} x dofs_per_var {dofs} does not equal n = {n}"),
        ));
    }
    let blocks = if has_derivs { 2 } else { 1 };
    let expected = n
        .checked_mul(k)
        .and_then(|nk| nk.checked_mul(blocks))
        .and_then(|v| v.checked_add(k))
        .ok_or_else(|| Error::format("byte 8", "declared dimensions overflow"))?;
    let payload = bytes.len() - HEADER_LEN;
    if !payload.is_multiple_of(8) || (payload / 8) as u64 != expected {
        return Err(Error::Dimension(format!(
            "header (byte 8) declares n = {n}, K = {k}, has_derivs = {} ({expected} values) but payload from byte {HEADER_LEN} carries {} bytes ({} values)",
            u8::from(has_derivs),
            payload,
            payload as f64 / 8.0
        )));
    }
    let (n, k) = (n as usize, k as usize);
    let read_f64 = |idx: usize| -> f64 {
        let off = HEADER_LEN + 8 * idx;
        f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap())
    };
    let located = |idx: usize, what: &str| -> Result<f64> {
        let v = read_f64(idx);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("byte {} ({what})", HEADER_LEN + 8 * idx)))
        }
    };

    let mut times = Vec::with_capacity(k);
    for i in 0..k {
        let t = located(i, &format!("time {i}"))?;
        if i > 0 && t <= times[i - 1] {
            return Err(Error::format(
                format!("byte {}", HEADER_LEN + 8 * i),
                format!("time stamps must be strictly increasing ({} after {})", t, times[i - 1]),
            ));
        }
        times.push(t);
    }
    let read_block = |offset: usize, what: &str| -> Result<DMatrix<f64>> {
        let mut data = Vec::with_capacity(n * k);
        for j in 0..n * k {
            data.push(located(
                offset + j,
                &format!("{what}[row {}, snapshot {}]", j % n, j / n),
            )?);
        }
        Ok(DMatrix::from_vec(n, k, data))
    };
    let states = read_block(k, "states")?;
    let derivs = if has_derivs {
        Some(read_block(k + n * k, "derivs")?)
    } else {
        None
    };
    let layout = VariableLayout::with_default_names(var_count as usize, dofs as usize)?;
    SnapshotSet::new(states, derivs, times, layout)
}

fn csv_columns(set: &SnapshotSet) -> Vec<String> {
    let layout = &set.layout;
    let mut header = vec!["t".to_string()];
    let state_cols: Vec<String> = layout
        .names()
        .iter()
        .flat_map(|name| (0..layout.dofs_per_var()).map(move |d| format!("{name}_{d}")))
        .collect();
    header.extend(state_cols.iter().cloned());
    if set.derivs.is_some() {
        header.extend(state_cols.iter().map(|c| format!("{DERIV_PREFIX}{c}")));
    }
    header
}

pub fn encode_csv(set: &SnapshotSet) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::format("csv writer", e.to_string());
    w.write_record(csv_columns(set)).map_err(to_err)?;
    let n = set.dim();
    let mut row = Vec::with_capacity(1 + 2 * n);
    for k in 0..set.len() {
        row.clear();
        row.push(format!("{:e}", set.times[k]));
        row.extend(set.states.column(k).iter().map(|v| format!("{v:e}")));
        if let Some(d) = &set.derivs {
            row.extend(d.column(k).iter().map(|v| format!("{v:e}")));
        }
        w.write_record(&row).map_err(to_err)?;
    }
    w.into_inner().map_err(|e| Error::format("csv writer", e.to_string()))
}

pub fn decode_csv<R: std::io::Read>(reader: R) -> Result<SnapshotSet> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::format("record 1 (header)", e.to_string()))?
        .clone();
    let layout = parse_csv_header(&header)?;
    let n = layout.dim();
    let has_derivs = header.len() == 1 + 2 * n;

    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut derivs = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| Error::format(format!("record {line}"), e.to_string()))?;
        if record.len() != header.len() {
            return Err(Error::Dimension(format!(
                "record {line} has {} fields, header has {}",
                record.len(),
                header.len()
            )));
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::format(
                    format!("record {line}, column `{}`", &header[j]),
                    format!("cannot parse `{field}` as a number"),
                )
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "record {line} (snapshot {k}), column `{}`",
                    &header[j]
                )));
            }
            match j {
                0 => times.push(v),
                j if j <= n => states.push(v),
                _ => derivs.push(v),
            }
        }
        if k > 0 && times[k] <= times[k - 1] {
            return Err(Error::format(
                format!("record {line}, column `t`"),
                format!(
                    "time stamps must be strictly increasing ({} after {})",
                    times[k],
                    times[k - 1]
                ),
            ));
        }
    }
    let k = times.len();
    if k == 0 {
        return Err(Error::format("record 2", "no snapshot rows"));
    }
    let states = DMatrix::from_vec(n, k, states);
    let derivs = has_derivs.then(|| DMatrix::from_vec(n, k, derivs));
    SnapshotSet::new(states, derivs, times, layout)
}

fn parse_csv_header(header: &csv::StringRecord) -> Result<VariableLayout> {
    let loc = |j: usize| format!("record 1 (header), column {}", j + 1);
    if header.get(0).map(str::trim) != Some("t") {
        return Err(Error::format(loc(0), "first column must be `t`"));
    }
    let cols: Vec<&str> = header.iter().skip(1).collect();
    let n_state = cols.iter().take_while(|c| !c.starts_with(DERIV_PREFIX)).count();
    if n_state == 0 {
        return Err(Error::format(loc(1), "no state columns"));
    }
    let mut names: Vec<String> = Vec::new();
    let mut dofs_seen: Vec<usize> = Vec::new();
    for (j, col) in cols[..n_state].iter().enumerate() {
        let (name, dof) = col
            .rsplit_once('_')
            .and_then(|(name, dof)| Some((name, dof.parse::<usize>().ok()?)))
            .ok_or_else(|| Error::format(loc(j + 1), format!("expected `<var>_<dof>`, got `{col}`")))?;
        match names.last() {
            Some(last) if last == name => {}
            _ => {
                if names.iter().any(|n| n == name) {
                    return Err(Error::format(
                        loc(j + 1),
                        format!("variable `{name}` is not contiguous"),
                    ));
                }
                names.push(name.to_string());
                dofs_seen.push(0);
            }
        }
        let seen = dofs_seen.last_mut().unwrap();
        if dof != *seen {
            return Err(Error::format(
                loc(j + 1),
                format!("expected dof {} for `{name}`, got {dof}", *seen),
            ));
        }
        *seen += 1;
    }
    let dofs = dofs_seen[0];
    if let Some(i) = dofs_seen.iter().position(|&d| d != dofs) {
        return Err(Error::Dimension(format!(
            "variable `{}` has {} dofs but `{}` has {dofs}",
            names[i], dofs_seen[i], names[0]
        )));
    }
    let deriv_cols = &cols[n_state..];
    if !deriv_cols.is_empty() {
        if deriv_cols.len() != n_state {
            return Err(Error::Dimension(format!(
                "{} derivative columns for {n_state} state columns",
                deriv_cols.len()
            )));
        }
        for (j, (d, s)) in deriv_cols.iter().zip(&cols[..n_state]).enumerate() {
            if d.strip_prefix(DERIV_PREFIX) != Some(s) {
                return Err(Error::format(
                    loc(1 + n_state + j),
                    format!("expected `{DERIV_PREFIX}{s}`, got `{d}`"),
                ));
            }
        }
    }
    VariableLayout::new(names, dofs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FiniteDifference {
    /// Second-order central differences, second-order one-sided at the ends.
    Central,
    /// First-order forward differences (backward at the last snapshot).
    Forward,
}

impl FromStr for FiniteDifference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "central" => Ok(FiniteDifference::Central),
            "forward" => Ok(FiniteDifference::Forward),
            other => Err(Error::InvalidArgument(format!("unknown difference scheme `{other}`"))),
        }
    }
}

/// Estimates time derivatives from the states by finite differences in time,
/// replacing any derivative data already present.
pub fn finite_difference_derivs(set: &SnapshotSet, scheme: FiniteDifference) -> Result<SnapshotSet> {
    let k = set.len();
    let min = match scheme {
        FiniteDifference::Central => 3,
        FiniteDifference::Forward => 2,
    };
    if k < min {
        return Err(Error::InvalidArgument(format!(
            "{scheme:?} differences need at least {min} snapshots, got {k}"
        )));
    }
    let h = set.uniform_step()?;
    let s = &set.states;
    let mut d = DMatrix::zeros(set.dim(), k);
    match scheme {
        FiniteDifference::Central => {
            let c = 1.0 / (2.0 * h);
            d.set_column(0, &((-3.0 * s.column(0) + 4.0 * s.column(1) - s.column(2)) * c));
            for j in 1..k - 1 {
                d.set_column(j, &((s.column(j + 1) - s.column(j - 1)) * c));
            }
            d.set_column(
                k - 1,
                &((3.0 * s.column(k - 1) - 4.0 * s.column(k - 2) + s.column(k - 3)) * c),
            );
        }
        FiniteDifference::Forward => {
            for j in 0..k - 1 {
                d.set_column(j, &((s.column(j + 1) - s.column(j)) / h));
            }
            d.set_column(k - 1, &((s.column(k - 1) - s.column(k - 2)) / h));
        }
    }
    SnapshotSet::new(s.clone(), Some(d), set.times.clone(), set.layout.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn layout(vars: usize, dofs: usize) -> VariableLayout {
        VariableLayout::with_default_names(vars, dofs).unwrap()
    }

    fn sample(n_vars: usize, dofs: usize, k: usize, derivs: bool) -> SnapshotSet {
        let n = n_vars * dofs;
        let states = DMatrix::from_fn(n, k, |i, j| (i as f64 + 1.0) * 0.5 - j as f64 / 3.0);
        let d = derivs.then(|| DMatrix::from_fn(n, k, |i, j| (i * j) as f64 - 0.25));
        let times = (0..k).map(|j| 0.1 * j as f64).collect();
        SnapshotSet::new(states, d, times, layout(n_vars, dofs)).unwrap()
    }

    #[test]
    fn layout_rejects_duplicate_and_empty_names() {
        assert!(VariableLayout::new(vec!["a".into(), "a".into()], 3).is_err());
        assert!(VariableLayout::new(vec!["".into()], 3).is_err());
        assert!(VariableLayout::new(vec![], 3).is_err());
        assert!(VariableLayout::new(vec!["a".into()], 0).is_err());
        let l = VariableLayout::new(vec!["p".into(), "T".into()], 4).unwrap();
        assert_eq!(l.dim(), 8);
        assert_eq!(l.var_range(1), 4..8);
        assert_eq!(l.resolve("T").unwrap(), 1);
        assert_eq!(l.resolve("0").unwrap(), 0);
        assert!(l.resolve("rho").is_err());
    }

    #[test]
    fn set_invariants_are_enforced() {
        let l = layout(1, 2);
        let s = DMatrix::zeros(2, 3);
        assert!(SnapshotSet::new(s.clone(), None, vec![0.0, 0.0, 1.0], l.clone()).is_err());
        assert!(SnapshotSet::new(s.clone(), None, vec![0.0, 1.0], l.clone()).is_err());
        assert!(SnapshotSet::new(s.clone(), Some(DMatrix::zeros(2, 2)), vec![0.0, 1.0, 2.0], l.clone()).is_err());
        let mut bad = s.clone();
        bad[(1, 2)] = f64::INFINITY;
        assert!(matches!(
            SnapshotSet::new(bad, None, vec![0.0, 1.0, 2.0], l.clone()),
            Err(Error::NonFinite(_))
        ));
        assert!(SnapshotSet::new(DMatrix::zeros(2, 0), None, vec![], l).is_err());
    }

    #[test]
    fn binary_round_trip_well_formed_file() {
        let set = sample(2, 2, 3, true);
        let back = decode_binary(&encode_binary(&set)).unwrap();
        assert_eq!(back.states().shape(), (4, 3));
        assert_eq!(back, set);
    }

    #[test]
    fn binary_payload_shorter_than_header_declares() {
        let set = sample(1, 4, 3, false);
        let mut bytes = encode_binary(&set);
        // 3 times + 12 states = 15 values; keep 11
        bytes.truncate(HEADER_LEN + 11 * 8);
        let err = decode_binary(&bytes).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "{err}");
        assert!(err.to_string().contains("11 values"), "{err}");
    }

    #[test]
    fn binary_rejects_bad_magic_and_non_finite() {
        let set = sample(1, 2, 2, false);
        let mut bytes = encode_binary(&set);
        bytes[0] = b'X';
        assert!(matches!(decode_binary(&bytes), Err(Error::Format { .. })));

        let mut bytes = encode_binary(&set);
        let off = HEADER_LEN + 8 * 3;
        bytes[off..off + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        let err = decode_binary(&bytes).unwrap_err();
        assert!(err.to_string().contains(&format!("byte {off}")), "{err}");
    }

    #[test]
    fn binary_rejects_non_increasing_times() {
        let set = sample(1, 2, 3, false);
        let mut bytes = encode_binary(&set);
        let off = HEADER_LEN + 8 * 2;
        bytes[off..off + 8].copy_from_slice(&0.05f64.to_le_bytes());
        let err = decode_binary(&bytes).unwrap_err();
        assert!(err.to_string().contains("strictly increasing"), "{err}");
    }

    #[test]
    fn one_by_one_zero_set() {
        let set = SnapshotSet::new(DMatrix::zeros(1, 1), None, vec![0.0], layout(1, 1)).unwrap();
        let back = decode_binary(&encode_binary(&set)).unwrap();
        assert_eq!(back.states()[(0, 0)], 0.0);
    }

    #[test]
    fn empty_set_cannot_be_built() {
        let err = SnapshotSet::new(DMatrix::zeros(3, 0), None, vec![], layout(1, 3)).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn csv_round_trip_with_names() {
        let states = DMatrix::from_row_slice(4, 2, &[0.1, 1e-300, -2.5, 3.0, 1.0 / 3.0, 7e12, 0.0, -0.0]);
        let l = VariableLayout::new(vec!["p".into(), "s_sq".into()], 2).unwrap();
        let set = SnapshotSet::new(states, Some(DMatrix::from_element(4, 2, 0.7)), vec![0.0, 0.1], l).unwrap();
        let bytes = encode_csv(&set).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("t,p_0,p_1,s_sq_0,s_sq_1,ddt_p_0"), "{text}");
        let back = decode_csv(bytes.as_slice()).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn csv_nan_names_row_and_column() {
        let text = "t,u_0,u_1\n0,1,2\n0.5,3,NaN\n";
        let err = decode_csv(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        let msg = err.to_string();
        assert!(msg.contains("record 3") && msg.contains("u_1"), "{msg}");
    }

    #[test]
    fn csv_header_errors() {
        assert!(decode_csv("x,u_0\n0,1\n".as_bytes()).is_err());
        assert!(decode_csv("t,u_1\n0,1\n".as_bytes()).is_err());
        assert!(decode_csv("t,u_0,u_1,v_0\n0,1,2,3\n".as_bytes()).is_err());
        assert!(decode_csv("t,u_0,u_1\n0,1\n".as_bytes()).is_err());
        assert!(decode_csv("t,u_0\n".as_bytes()).is_err());
    }

    #[test]
    fn write_to_unwritable_path_fails() {
        let set = sample(1, 1, 1, false);
        let err = write_snapshots(&set, Path::new("/nonexistent-dir/x.bin"), SnapshotFormat::Binary).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn file_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let set = sample(2, 3, 4, true);
        for fmt in [SnapshotFormat::Binary, SnapshotFormat::Csv] {
            let p = dir.path().join(format!("s.{fmt}"));
            write_snapshots(&set, &p, fmt).unwrap();
            assert_eq!(read_snapshots(&p, fmt).unwrap(), set);
        }
    }

    fn from_fn_of_time(f: impl Fn(f64) -> f64, times: &[f64]) -> SnapshotSet {
        let states = DMatrix::from_fn(2, times.len(), |i, j| (i as f64 + 1.0) * f(times[j]));
        SnapshotSet::new(states, None, times.to_vec(), layout(1, 2)).unwrap()
    }

    #[test]
    fn central_differences_exact_for_linear_and_quadratic() {
        let t = [0.0, 0.1, 0.2];
        let d = finite_difference_derivs(&from_fn_of_time(|t| t, &t), FiniteDifference::Central).unwrap();
        for v in d.derivs().unwrap().row(0).iter() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-12);
        }
        let d = finite_difference_derivs(&from_fn_of_time(|t| t * t, &t), FiniteDifference::Central).unwrap();
        let dd = d.derivs().unwrap();
        assert_abs_diff_eq!(dd[(0, 1)], 0.2, epsilon = 1e-12);
        // one-sided second order ends are exact for quadratics too
        assert_abs_diff_eq!(dd[(0, 0)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dd[(1, 2)], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn constant_states_have_zero_derivative() {
        let t: Vec<f64> = (0..5).map(|k| k as f64 * 0.25).collect();
        for scheme in [FiniteDifference::Central, FiniteDifference::Forward] {
            let d = finite_difference_derivs(&from_fn_of_time(|_| 3.0, &t), scheme).unwrap();
            assert!(d.derivs().unwrap().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn finite_differences_reject_bad_inputs() {
        let s = from_fn_of_time(|t| t, &[0.0, 0.1]);
        assert!(finite_difference_derivs(&s, FiniteDifference::Central).is_err());
        assert!(finite_difference_derivs(&s, FiniteDifference::Forward).is_ok());
        let s = from_fn_of_time(|t| t, &[0.0, 0.1, 0.3]);
        assert!(finite_difference_derivs(&s, FiniteDifference::Central).is_err());
    }

    #[test]
    fn uniform_step_tolerates_accumulated_rounding() {
        let times: Vec<f64> = (0..20001).map(|k| 5.0 + k as f64 * 1e-4).collect();
        assert_abs_diff_eq!(uniform_step(&times).unwrap(), 1e-4, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn binary_round_trip_is_bit_exact(
            vars in 1usize..3,
            dofs in 1usize..5,
            k in 1usize..6,
            derivs in any::<bool>(),
            seed in proptest::collection::vec(-1e6f64..1e6, 64),
        ) {
            let n = vars * dofs;
            let states = DMatrix::from_fn(n, k, |i, j| seed[(i * 7 + j * 3) % 64]);
            let d = derivs.then(|| DMatrix::from_fn(n, k, |i, j| seed[(i * 5 + j * 11 + 1) % 64] * 1e-3));
            let times: Vec<f64> = (0..k).map(|j| j as f64 * 0.37 - 1.0).collect();
            let set = SnapshotSet::new(states, d, times, layout(vars, dofs)).unwrap();
            let bytes = encode_binary(&set);
            let back = decode_binary(&bytes).unwrap();
            prop_assert_eq!(encode_binary(&back), bytes);
            prop_assert_eq!(back, set);
        }

        #[test]
        fn csv_round_trip_is_exact(values in proptest::collection::vec(-1e9f64..1e9, 6)) {
            let states = DMatrix::from_vec(3, 2, values);
            let set = SnapshotSet::new(states, None, vec![0.5, 0.75], layout(1, 3)).unwrap();
            let back = decode_csv(encode_csv(&set).unwrap().as_slice()).unwrap();
            prop_assert_eq!(back, set);
        }
    }
}
