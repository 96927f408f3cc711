//! Named parameter collections and the algebra applied to them.

use std::hash::{DefaultHasher, Hasher};

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2, IxDyn, Zip};

use super::EncoderError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by gradient descent.
    Weight,
    /// Updated outside of gradient descent (batch-norm running moments).
    Statistic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: ArrayD<f64>,
}

/// Ordered list of named arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    entries: Vec<ParamEntry>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, value: ArrayD<f64>) -> Result<usize, EncoderError> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(EncoderError::Incompatible(format!("duplicate entry {name}")));
        }
        self.entries.push(ParamEntry { name, kind, value });
        Ok(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn value(&self, idx: usize) -> &ArrayD<f64> {
        &self.entries[idx].value
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut ArrayD<f64> {
        &mut self.entries[idx].value
    }

    pub(crate) fn mat(&self, idx: usize) -> ArrayView2<'_, f64> {
        self.entries[idx].value.view().into_dimensionality::<Ix2>().expect("rank-2 entry")
    }

    pub(crate) fn vector(&self, idx: usize) -> ArrayView1<'_, f64> {
        self.entries[idx].value.view().into_dimensionality::<Ix1>().expect("rank-1 entry")
    }

    pub(crate) fn mat_mut(&mut self, idx: usize) -> ArrayViewMut2<'_, f64> {
        self.entries[idx].value.view_mut().into_dimensionality::<Ix2>().expect("rank-2 entry")
    }

    pub(crate) fn vector_mut(&mut self, idx: usize) -> ArrayViewMut1<'_, f64> {
        self.entries[idx].value.view_mut().into_dimensionality::<Ix1>().expect("rank-1 entry")
    }

    /// Mutable views of two distinct entries.
    pub(crate) fn pair_mut(&mut self, a: usize, b: usize) -> (ndarray::ArrayViewMutD<'_, f64>, ndarray::ArrayViewMutD<'_, f64>) {
        assert!(a < b, "entries must be given in layout order");
        let (lo, hi) = self.entries.split_at_mut(b);
        (lo[a].value.view_mut(), hi[0].value.view_mut())
    }

    /// Same names, order and shapes.
    pub fn is_compatible(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    pub fn check_compatible(&self, other: &Self) -> Result<(), EncoderError> {
        if self.is_compatible(other) {
            return Ok(());
        }
        let detail = self
            .entries
            .iter()
            .zip(&other.entries)
            .find(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
            .map_or_else(
                || format!("{} vs {} entries", self.entries.len(), other.entries.len()),
                |(a, b)| format!("{} {:?} vs {} {:?}", a.name, a.value.shape(), b.name, b.value.shape()),
            );
        Err(EncoderError::Incompatible(detail))
    }

    /// Same layout, every value zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    kind: e.kind,
                    value: ArrayD::zeros(IxDyn(e.value.shape())),
                })
                .collect(),
        }
    }

    /// Hash of names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for e in &self.entries {
            h.write(e.name.as_bytes());
            for &d in e.value.shape() {
                h.write_usize(d);
            }
            for v in e.value.iter() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().flat_map(|e| e.value.iter().copied())
    }

    /// Euclidean norm over trainable entries.
    pub fn weight_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Weight)
            .flat_map(|e| e.value.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for e in &mut self.entries {
            e.value.mapv_inplace(|v| v * c);
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64, EncoderError> {
        self.check_compatible(other)?;
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .flat_map(|(a, b)| a.value.iter().zip(b.value.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }
}

/// Exponential moving average `alpha * offline + (1 - alpha) * online`,
/// covering every entry including running statistics.
pub fn ema_update(offline: &ParameterSet, online: &ParameterSet, alpha: f64) -> Result<ParameterSet, EncoderError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(EncoderError::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    offline.check_compatible(online)?;
    if alpha == 1.0 {
        return Ok(offline.clone());
    }
    if alpha == 0.0 {
        return Ok(online.clone());
    }
    let mut out = offline.clone();
    for (o, n) in out.entries.iter_mut().zip(&online.entries) {
        Zip::from(&mut o.value).and(&n.value).for_each(|p, &x| *p += (1.0 - alpha) * (x - *p));
    }
    Ok(out)
}

/// Per-step momentum so that `alpha^steps == w`.
pub fn momentum_from_weight(w: f64, steps: usize) -> Result<f64, EncoderError> {
    if steps == 0 {
        return Err(EncoderError::InvalidArgument("steps per epoch must be positive".into()));
    }
    if !(w > 0.0 && w <= 1.0) {
        return Err(EncoderError::InvalidArgument(format!("weight {w} outside (0, 1]")));
    }
    Ok(w.powf(1.0 / steps as f64))
}

/// Element-wise arithmetic mean.
pub fn average_checkpoints(sets: &[&ParameterSet]) -> Result<ParameterSet, EncoderError> {
    let (first, rest) = sets
        .split_first()
        .ok_or_else(|| EncoderError::InvalidArgument("no checkpoints to average".into()))?;
    for s in rest {
        first.check_compatible(s)?;
    }
    let mut out = (*first).clone();
    for (k, s) in rest.iter().enumerate() {
        let n = (k + 2) as f64;
        for (e, x) in out.entries.iter_mut().zip(&s.entries) {
            Zip::from(&mut e.value).and(&x.value).for_each(|m, &v| *m += (v - *m) / n);
        }
    }
    Ok(out)
}
