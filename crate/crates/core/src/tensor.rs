//! Dense tensors whose modes carry semantic labels.
//!
//! Data is stored row-major in the order of the mode list. Every operation is
//! driven by labels, never by positions, so the stored mode order of an input
//! does not change the result beyond the documented output mode order.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{PbpError, Result};
use crate::linalg;

/// Semantic label of a tensor mode.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModeLabel {
    /// Feature axis of the sufficient statistics attached to a separator.
    Separator(usize),
    /// States of a model variable.
    Variable(usize),
    /// Free-form axis, e.g. the output of [`vectorize`].
    Feature(String),
}

impl fmt::Display for ModeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModeLabel::Separator(id) => write!(f, "sep:{id}"),
            ModeLabel::Variable(id) => write!(f, "var:{id}"),
            ModeLabel::Feature(tag) => write!(f, "feat:{tag}"),
        }
    }
}

impl FromStr for ModeLabel {
    type Err = PbpError;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| PbpError::InvalidInput(format!("mode label `{s}` has no kind prefix")))?;
        let id = || {
            rest.parse::<usize>()
                .map_err(|_| PbpError::InvalidInput(format!("mode label `{s}` has a bad id")))
        };
        match kind {
            "sep" => Ok(ModeLabel::Separator(id()?)),
            "var" => Ok(ModeLabel::Variable(id()?)),
            "feat" => Ok(ModeLabel::Feature(rest.to_string())),
            _ => Err(PbpError::InvalidInput(format!("unknown mode kind in `{s}`"))),
        }
    }
}

impl Serialize for ModeLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModeLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mode {
    pub label: ModeLabel,
    pub extent: usize,
}

impl Mode {
    pub fn new(label: ModeLabel, extent: usize) -> Self {
        Mode { label, extent }
    }
}

/// Dense real tensor with labelled modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr", into = "TensorRepr")]
pub struct NamedTensor {
    modes: Vec<Mode>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    modes: Vec<Mode>,
    data: Vec<f64>,
}

impl TryFrom<TensorRepr> for NamedTensor {
    type Error = PbpError;
    fn try_from(r: TensorRepr) -> Result<Self> {
        NamedTensor::new(r.modes, r.data)
    }
}

impl From<NamedTensor> for TensorRepr {
    fn from(t: NamedTensor) -> Self {
        TensorRepr { modes: t.modes, data: t.data }
    }
}

pub(crate) fn strides(extents: &[usize]) -> Vec<usize> {
    let mut s = vec![1; extents.len()];
    for i in (0..extents.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * extents[i + 1];
    }
    s
}

fn check_distinct(modes: &[Mode]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for m in modes {
        if !seen.insert(&m.label) {
            return Err(PbpError::DuplicateMode(m.label.clone()));
        }
    }
    Ok(())
}

impl NamedTensor {
    pub fn new(modes: Vec<Mode>, data: Vec<f64>) -> Result<Self> {
        check_distinct(&modes)?;
        if let Some(m) = modes.iter().find(|m| m.extent == 0) {
            return Err(PbpError::Shape(format!("mode {} has extent 0", m.label)));
        }
        let len: usize = modes.iter().map(|m| m.extent).product();
        if len != data.len() {
            return Err(PbpError::Shape(format!("expected {len} entries, got {}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PbpError::NonFinite);
        }
        Ok(NamedTensor { modes, data })
    }

    pub fn scalar(value: f64) -> Self {
        NamedTensor { modes: Vec::new(), data: vec![value] }
    }

    pub fn vector(label: ModeLabel, data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        NamedTensor::new(vec![Mode::new(label, n)], data)
    }

    pub fn filled(modes: Vec<Mode>, value: f64) -> Result<Self> {
        let len = modes.iter().map(|m| m.extent).product();
        NamedTensor::new(modes, vec![value; len])
    }

    pub fn zeros(modes: Vec<Mode>) -> Result<Self> {
        Self::filled(modes, 0.0)
    }

    pub fn ones(modes: Vec<Mode>) -> Result<Self> {
        Self::filled(modes, 1.0)
    }

    /// Builds a tensor by evaluating `f` at every multi-index, in row-major order.
    pub fn from_fn(modes: Vec<Mode>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let extents: Vec<usize> = modes.iter().map(|m| m.extent).collect();
        let mut data = Vec::with_capacity(extents.iter().product());
        for_each_index(&extents, |idx| data.push(f(idx)));
        NamedTensor::new(modes, data)
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn order(&self) -> usize {
        self.modes.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn labels(&self) -> Vec<ModeLabel> {
        self.modes.iter().map(|m| m.label.clone()).collect()
    }

    pub fn extents(&self) -> Vec<usize> {
        self.modes.iter().map(|m| m.extent).collect()
    }

    pub fn position(&self, label: &ModeLabel) -> Option<usize> {
        self.modes.iter().position(|m| &m.label == label)
    }

    pub fn has_mode(&self, label: &ModeLabel) -> bool {
        self.position(label).is_some()
    }

    pub fn extent(&self, label: &ModeLabel) -> Result<usize> {
        self.position(label)
            .map(|p| self.modes[p].extent)
            .ok_or_else(|| PbpError::MissingMode(label.clone()))
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        let s = strides(&self.extents());
        self.data[index.iter().zip(&s).map(|(i, s)| i * s).sum::<usize>()]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        NamedTensor::new(self.modes.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        self.map(|v| v * factor)
    }

    /// Renames one mode, keeping its extent.
    pub fn relabel(mut self, from: &ModeLabel, to: ModeLabel) -> Result<Self> {
        let p = self.position(from).ok_or_else(|| PbpError::MissingMode(from.clone()))?;
        self.modes[p].label = to;
        check_distinct(&self.modes)?;
        Ok(self)
    }

    /// Reorders the stored modes to `labels`, which must be a permutation of the current labels.
    pub fn permuted(&self, labels: &[ModeLabel]) -> Result<Self> {
        if labels.len() != self.modes.len() {
            return Err(PbpError::ModeMismatch(format!(
                "permutation lists {} labels for an order-{} tensor",
                labels.len(),
                self.modes.len()
            )));
        }
        let perm: Vec<usize> = labels
            .iter()
            .map(|l| self.position(l).ok_or_else(|| PbpError::MissingMode(l.clone())))
            .collect::<Result<_>>()?;
        let modes: Vec<Mode> = perm.iter().map(|&p| self.modes[p].clone()).collect();
        check_distinct(&modes)?;
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(self.clone());
        }
        let src_strides = strides(&self.extents());
        let strides_in_new_order: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let new_extents: Vec<usize> = modes.iter().map(|m| m.extent).collect();
        let mut data = Vec::with_capacity(self.data.len());
        for_each_offset(&new_extents, &strides_in_new_order, |off| data.push(self.data[off]));
        Ok(NamedTensor { modes, data })
    }

    /// Sums out the listed modes.
    pub fn sum_out(&self, labels: &[ModeLabel]) -> Result<Self> {
        for l in labels {
            if !self.has_mode(l) {
                return Err(PbpError::MissingMode(l.clone()));
            }
        }
        let keep: Vec<ModeLabel> = self
            .modes
            .iter()
            .filter(|m| !labels.contains(&m.label))
            .map(|m| m.label.clone())
            .collect();
        let mut order = keep.clone();
        order.extend(labels.iter().cloned());
        let p = self.permuted(&order)?;
        let inner: usize = labels.iter().map(|l| self.extent(l)).collect::<Result<Vec<_>>>()?.iter().product();
        let outer = p.data.len() / inner;
        let data = (0..outer).map(|i| p.data[i * inner..(i + 1) * inner].iter().sum()).collect();
        let modes = p.modes[..keep.len()].to_vec();
        NamedTensor::new(modes, data)
    }

    /// Fixes `label` at `index`, dropping that mode.
    pub fn slice(&self, label: &ModeLabel, index: usize) -> Result<Self> {
        let n = self.extent(label)?;
        if index >= n {
            return Err(PbpError::InvalidInput(format!("index {index} out of range for mode {label} of extent {n}")));
        }
        let mut e = vec![0.0; n];
        e[index] = 1.0;
        mode_multiply(self, &NamedTensor::vector(label.clone(), e)?, label)
    }

    /// Largest absolute entrywise difference after aligning `other` to this tensor's mode order.
    pub fn max_abs_diff(&self, other: &NamedTensor) -> Result<f64> {
        let o = other.permuted(&self.labels())?;
        if o.extents() != self.extents() {
            return Err(PbpError::ModeMismatch("extents differ".into()));
        }
        Ok(self.data.iter().zip(&o.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// View as a matrix with `row_labels` fused into rows and the remaining modes (in stored order) into columns.
    pub fn to_matrix(&self, row_labels: &[ModeLabel]) -> Result<(DMatrix<f64>, Vec<Mode>, Vec<Mode>)> {
        let col_labels: Vec<ModeLabel> = self
            .modes
            .iter()
            .filter(|m| !row_labels.contains(&m.label))
            .map(|m| m.label.clone())
            .collect();
        let mut order = row_labels.to_vec();
        order.extend(col_labels.iter().cloned());
        let p = self.permuted(&order)?;
        let row_modes = p.modes[..row_labels.len()].to_vec();
        let col_modes = p.modes[row_labels.len()..].to_vec();
        let rows: usize = row_modes.iter().map(|m| m.extent).product();
        let cols: usize = col_modes.iter().map(|m| m.extent).product();
        Ok((DMatrix::from_row_slice(rows, cols, &p.data), row_modes, col_modes))
    }

    fn from_matrix(m: &DMatrix<f64>, row_modes: Vec<Mode>, col_modes: Vec<Mode>) -> Result<Self> {
        let mut modes = row_modes;
        modes.extend(col_modes);
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        NamedTensor::new(modes, data)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Visits every multi-index of `extents` in row-major order.
pub(crate) fn for_each_index(extents: &[usize], mut f: impl FnMut(&[usize])) {
    let total: usize = extents.iter().product();
    let mut idx = vec![0usize; extents.len()];
    for _ in 0..total {
        f(&idx);
        for k in (0..extents.len()).rev() {
            idx[k] += 1;
            if idx[k] < extents[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

fn for_each_offset(extents: &[usize], strides: &[usize], mut f: impl FnMut(usize)) {
    let total: usize = extents.iter().product();
    let mut idx = vec![0usize; extents.len()];
    let mut off = 0usize;
    for _ in 0..total {
        f(off);
        for k in (0..extents.len()).rev() {
            idx[k] += 1;
            off += strides[k];
            if idx[k] < extents[k] {
                break;
            }
            off -= strides[k] * extents[k];
            idx[k] = 0;
        }
    }
}

/// Outer product; result modes are `a`'s followed by `b`'s.
pub fn outer_product(a: &NamedTensor, b: &NamedTensor) -> Result<NamedTensor> {
    let mut modes = a.modes.clone();
    modes.extend(b.modes.iter().cloned());
    check_distinct(&modes)?;
    let mut data = Vec::with_capacity(a.data.len() * b.data.len());
    for &x in &a.data {
        data.extend(b.data.iter().map(|&y| x * y));
    }
    NamedTensor::new(modes, data)
}

/// Sums the product of `a` and `b` over the shared `labels`.
///
/// Result modes: free modes of `a` in stored order, then free modes of `b`.
pub fn contract(a: &NamedTensor, b: &NamedTensor, labels: &[ModeLabel]) -> Result<NamedTensor> {
    for l in labels {
        let ea = a.extent(l)?;
        let eb = b.extent(l)?;
        if ea != eb {
            return Err(PbpError::ExtentMismatch { label: l.clone(), left: ea, right: eb });
        }
    }
    let free = |t: &NamedTensor| -> Vec<Mode> { t.modes.iter().filter(|m| !labels.contains(&m.label)).cloned().collect() };
    let free_a = free(a);
    let free_b = free(b);
    let mut order_a: Vec<ModeLabel> = free_a.iter().map(|m| m.label.clone()).collect();
    order_a.extend(labels.iter().cloned());
    let mut order_b = labels.to_vec();
    order_b.extend(free_b.iter().map(|m| m.label.clone()));
    let pa = a.permuted(&order_a)?;
    let pb = b.permuted(&order_b)?;
    let inner: usize = labels.iter().map(|l| a.extent(l)).collect::<Result<Vec<_>>>()?.iter().product();
    let rows = pa.data.len() / inner;
    let cols = pb.data.len() / inner;
    let mut data = vec![0.0; rows * cols];
    for i in 0..rows {
        let out = &mut data[i * cols..(i + 1) * cols];
        for k in 0..inner {
            let x = pa.data[i * inner + k];
            if x == 0.0 {
                continue;
            }
            for (o, &y) in out.iter_mut().zip(&pb.data[k * cols..(k + 1) * cols]) {
                *o += x * y;
            }
        }
    }
    let mut modes = free_a;
    modes.extend(free_b);
    check_distinct(&modes)?;
    NamedTensor::new(modes, data)
}

/// Mode-specific multiplication `t ×_label m`.
///
/// `m` must be a vector or a matrix carrying `label`. A vector eliminates the mode; a
/// matrix with modes `(label, other)` replaces `label` by `other` at the same position.
pub fn mode_multiply(t: &NamedTensor, m: &NamedTensor, label: &ModeLabel) -> Result<NamedTensor> {
    let pos = t.position(label).ok_or_else(|| PbpError::MissingMode(label.clone()))?;
    if !m.has_mode(label) {
        return Err(PbpError::MissingMode(label.clone()));
    }
    match m.order() {
        1 => contract(t, m, std::slice::from_ref(label)),
        2 => {
            let other = m.modes.iter().find(|x| &x.label != label).map(|x| x.label.clone()).unwrap();
            let r = contract(t, m, std::slice::from_ref(label))?;
            let mut order: Vec<ModeLabel> = t.labels();
            order[pos] = other;
            r.permuted(&order)
        }
        k => Err(PbpError::Shape(format!("mode_multiply needs a vector or matrix, got order {k}"))),
    }
}

/// Entrywise product. `b` is aligned to `a` by label; result keeps `a`'s mode order.
pub fn hadamard(a: &NamedTensor, b: &NamedTensor) -> Result<NamedTensor> {
    let a_set: BTreeSet<_> = a.modes.iter().map(|m| &m.label).collect();
    let b_set: BTreeSet<_> = b.modes.iter().map(|m| &m.label).collect();
    if a_set != b_set {
        return Err(PbpError::ModeMismatch(format!("{:?} vs {:?}", a.labels(), b.labels())));
    }
    let bb = b.permuted(&a.labels())?;
    for (ma, mb) in a.modes.iter().zip(&bb.modes) {
        if ma.extent != mb.extent {
            return Err(PbpError::ExtentMismatch { label: ma.label.clone(), left: ma.extent, right: mb.extent });
        }
    }
    NamedTensor::new(a.modes.clone(), a.data.iter().zip(&bb.data).map(|(x, y)| x * y).collect())
}

/// Broadcasting product over the union of modes (factor product).
///
/// Result modes: `a`'s modes followed by the modes of `b` that `a` lacks.
pub fn product(a: &NamedTensor, b: &NamedTensor) -> Result<NamedTensor> {
    let mut modes = a.modes.clone();
    for m in &b.modes {
        match a.position(&m.label) {
            Some(p) if a.modes[p].extent != m.extent => {
                return Err(PbpError::ExtentMismatch { label: m.label.clone(), left: a.modes[p].extent, right: m.extent })
            }
            Some(_) => {}
            None => modes.push(m.clone()),
        }
    }
    let extents: Vec<usize> = modes.iter().map(|m| m.extent).collect();
    let bs = strides(&b.extents());
    let b_strides: Vec<usize> = modes
        .iter()
        .map(|m| b.position(&m.label).map(|p| bs[p]).unwrap_or(0))
        .collect();
    let a_len = a.data.len();
    let inner = extents[a.order()..].iter().product::<usize>();
    let mut data = Vec::with_capacity(a_len * inner);
    let mut i = 0usize;
    for_each_offset(&extents, &b_strides, |boff| {
        data.push(a.data[i / inner] * b.data[boff]);
        i += 1;
    });
    NamedTensor::new(modes, data)
}

/// Moore-Penrose pseudoinverse of `m` viewed as a matrix (rows = `row_labels`).
///
/// The result carries the column modes first, then the row modes, so that
/// contracting it with `m` over either group yields the usual products.
pub fn pinv(m: &NamedTensor, row_labels: &[ModeLabel]) -> Result<NamedTensor> {
    let (mat, row_modes, col_modes) = m.to_matrix(row_labels)?;
    let rtol = linalg::default_rtol(mat.nrows(), mat.ncols());
    let p = linalg::pinv(&mat, rtol)?;
    NamedTensor::from_matrix(&p, col_modes, row_modes)
}

/// Fuses `labels` into one `Feature(tag)` mode placed last; index is row-major over `labels`.
pub fn vectorize(t: &NamedTensor, labels: &[ModeLabel], tag: &str) -> Result<NamedTensor> {
    for l in labels {
        if !t.has_mode(l) {
            return Err(PbpError::MissingMode(l.clone()));
        }
    }
    let mut order: Vec<ModeLabel> = t.modes.iter().filter(|m| !labels.contains(&m.label)).map(|m| m.label.clone()).collect();
    let keep = order.len();
    order.extend(labels.iter().cloned());
    let p = t.permuted(&order)?;
    let fused: usize = p.modes[keep..].iter().map(|m| m.extent).product();
    let mut modes = p.modes[..keep].to_vec();
    modes.push(Mode::new(ModeLabel::Feature(tag.to_string()), fused));
    NamedTensor::new(modes, p.data)
}

/// Inverse of [`vectorize`]: splits `Feature(tag)` into `modes` (row-major), placed where the feature mode was.
pub fn devectorize(t: &NamedTensor, tag: &str, modes: &[Mode]) -> Result<NamedTensor> {
    let label = ModeLabel::Feature(tag.to_string());
    let pos = t.position(&label).ok_or_else(|| PbpError::MissingMode(label.clone()))?;
    let n: usize = modes.iter().map(|m| m.extent).product();
    if n != t.modes[pos].extent {
        return Err(PbpError::ExtentMismatch { label, left: t.modes[pos].extent, right: n });
    }
    let mut new_modes = t.modes[..pos].to_vec();
    new_modes.extend(modes.iter().cloned());
    new_modes.extend(t.modes[pos + 1..].iter().cloned());
    NamedTensor::new(new_modes, t.data.clone())
}
