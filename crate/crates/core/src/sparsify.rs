//! Magnitude-threshold sparsification with local residual accumulation.
//!
//! The threshold is the magnitude of the `ceil(k% * n)`-th largest entry. Every
//! coordinate whose magnitude is at least the threshold is transmitted, so ties
//! at the threshold may push the selection above the nominal budget. The
//! untransmitted remainder stays on the client and is added to the next
//! round's update.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::{check_len, ParamVector};

/// Transmitted coordinates of a flattened update.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSelection {
    indices: Vec<usize>,
    values: Vec<f64>,
    thr: f64,
    model_len: usize,
}

impl SparseSelection {
    /// Validates the ordering, range, and threshold invariants.
    pub fn new(indices: Vec<usize>, values: Vec<f64>, thr: f64, model_len: usize) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: indices.len(),
                got: values.len(),
            });
        }
        if !thr.is_finite() || thr < 0.0 {
            return Err(Error::ContractViolation(format!(
                "threshold {thr} must be finite and >= 0"
            )));
        }
        if let Some(w) = indices.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::ContractViolation(format!(
                "indices not strictly increasing at position {}",
                w + 1
            )));
        }
        if let Some(&last) = indices.last() {
            if last >= model_len {
                return Err(Error::ContractViolation(format!(
                    "index {last} out of range for model length {model_len}"
                )));
            }
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || v.abs() < thr) {
            return Err(Error::ContractViolation(format!(
                "value {v} is below threshold {thr} or not finite"
            )));
        }
        Ok(Self {
            indices,
            values,
            thr,
            model_len,
        })
    }

    pub fn empty(thr: f64, model_len: usize) -> Self {
        Self {
            indices: Vec::new(),
            values: Vec::new(),
            thr,
            model_len,
        }
    }

    /// Every coordinate of `v`, with threshold 0.
    pub fn from_dense(v: &ParamVector) -> Result<Self> {
        Self::new((0..v.len()).collect(), v.to_vec(), 0.0, v.len())
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn thr(&self) -> f64 {
        self.thr
    }

    pub fn model_len(&self) -> usize {
        self.model_len
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .copied()
            .zip(self.values.iter().copied())
    }

    /// Scatters into a zero vector of length `model_len`.
    pub fn to_dense(&self) -> ParamVector {
        let mut out = ParamVector::zeros(self.model_len);
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }

    /// Merges selections with disjoint supports over the same model. The
    /// merged threshold is the smallest part threshold.
    pub fn merge(parts: Vec<SparseSelection>) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("nothing to merge"));
        };
        let model_len = first.model_len;
        let thr = parts.iter().map(|p| p.thr).fold(f64::INFINITY, f64::min);
        let mut pairs: Vec<(usize, f64)> = Vec::new();
        for p in &parts {
            check_len(model_len, p.model_len)?;
            pairs.extend(p.iter());
        }
        pairs.sort_by_key(|&(i, _)| i);
        let (indices, values) = pairs.into_iter().unzip();
        Self::new(indices, values, thr, model_len)
    }
}

/// Bit mask over a flattened vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask(Vec<bool>);

impl Mask {
    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

fn check_percent(k: f64) -> Result<()> {
    if !(k > 0.0 && k <= 100.0) {
        return Err(Error::invalid(format!(
            "sparsity percent {k} outside (0, 100]"
        )));
    }
    Ok(())
}

/// Number of entries inside the top-`k`% set of a length-`n` vector:
/// `ceil(k/100 * n)`, at least 1.
pub fn budget(n: usize, k: f64) -> usize {
    let raw = k * n as f64 / 100.0;
    // Absorb representation noise such as 0.1 * 1e6 / 100 = 1000.0000000000001.
    let m = (raw - raw * 1e-12).ceil() as usize;
    m.clamp(1, n.max(1))
}

/// Magnitude of the `budget(n, k)`-th largest entry of `v`.
pub fn compute_threshold(v: &[f64], k: f64) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::invalid("cannot threshold an empty vector"));
    }
    check_percent(k)?;
    let m = budget(v.len(), k);
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    let (_, nth, _) = mags.select_nth_unstable_by(m - 1, |a, b| b.total_cmp(a));
    Ok(*nth)
}

/// `mask[i] = |v[i]| >= thr`.
pub fn build_mask(v: &[f64], thr: f64) -> Mask {
    Mask(v.iter().map(|x| x.abs() >= thr).collect())
}

/// Splits `accumulated` into the transmitted selection and the retained
/// residual. Values are routed, never modified.
pub fn sparsify(accumulated: &ParamVector, k: f64) -> Result<(SparseSelection, ParamVector)> {
    let thr = compute_threshold(accumulated, k)?;
    Ok(split(accumulated, thr, 0..accumulated.len()))
}

fn split(v: &ParamVector, thr: f64, range: Range<usize>) -> (SparseSelection, ParamVector) {
    let mask = build_mask(&v[range.clone()], thr);
    let mut residual = v.clone();
    let mut indices = Vec::with_capacity(mask.count_ones());
    let mut values = Vec::with_capacity(mask.count_ones());
    for (offset, &keep) in mask.bits().iter().enumerate() {
        if keep {
            let i = range.start + offset;
            indices.push(i);
            values.push(v[i]);
            residual[i] = 0.0;
        }
    }
    let sel = SparseSelection {
        indices,
        values,
        thr,
        model_len: v.len(),
    };
    (sel, residual)
}

/// Where the top-k threshold is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThresholdScope {
    /// One threshold over the whole flattened model.
    #[default]
    Global,
    /// An independent threshold per weight matrix / bias vector.
    PerLayer,
}

/// Per-layer variant of [`sparsify`]. Returns one selection per layer, each
/// indexed into the full flattened model, plus the combined residual.
pub fn sparsify_layers(
    accumulated: &ParamVector,
    k: f64,
    layers: &[Range<usize>],
) -> Result<(Vec<SparseSelection>, ParamVector)> {
    check_percent(k)?;
    let covered: usize = layers.iter().map(|r| r.len()).sum();
    check_len(accumulated.len(), covered)?;
    let mut residual = accumulated.clone();
    let mut parts = Vec::with_capacity(layers.len());
    for range in layers {
        if range.end > accumulated.len() {
            return Err(Error::invalid(format!(
                "layer range {range:?} out of bounds"
            )));
        }
        let thr = compute_threshold(&accumulated[range.clone()], k)?;
        let (sel, _) = split(accumulated, thr, range.clone());
        for &i in sel.indices() {
            residual[i] = 0.0;
        }
        parts.push(sel);
    }
    Ok((parts, residual))
}

/// Elementwise `residual + new_update`.
pub fn accumulate(residual: &ParamVector, new_update: &ParamVector) -> Result<ParamVector> {
    residual.add(new_update)
}

/// Per-client residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStore {
    residuals: Vec<ParamVector>,
}

impl ResidualStore {
    pub fn new(clients: usize, model_len: usize) -> Self {
        Self {
            residuals: vec![ParamVector::zeros(model_len); clients],
        }
    }

    pub fn get(&self, client: usize) -> &ParamVector {
        &self.residuals[client]
    }

    pub fn set(&mut self, client: usize, residual: ParamVector) -> Result<()> {
        check_len(self.residuals[client].len(), residual.len())?;
        self.residuals[client] = residual;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }
}
