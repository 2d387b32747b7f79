//! Compression pipelines behind one interface: uncompressed FedAvg, top-k
//! sparsification with raw float values, stochastic ternary quantization, and
//! the full sparsify-then-quantize codec.
//!
//! Each pipeline serializes its upload and reports the serialized length, and
//! the server-side reconstruction is produced from those bytes wherever the
//! format is lossy. The dense and sparse float frames are priced at 4 bytes
//! per value but reconstruct at full precision.

use std::ops::Range;

use rand::Rng;

use crate::codec::{self, Reconstruction};
use crate::error::{DecodeError, Error, Result};
use crate::model::{check_len, ParamVector};
use crate::seed;
use crate::sparsify::{self, SparseSelection, ThresholdScope};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CompressionPipeline {
    Identity,
    SparsifyOnly {
        k: f64,
        scope: ThresholdScope,
    },
    Ternary,
    Dhqc {
        k: f64,
        scope: ThresholdScope,
        reconstruction: Reconstruction,
    },
}

impl CompressionPipeline {
    pub fn dhqc(k: f64) -> Self {
        CompressionPipeline::Dhqc {
            k,
            scope: ThresholdScope::Global,
            reconstruction: Reconstruction::LowerEdge,
        }
    }

    pub fn sparsify_only(k: f64) -> Self {
        CompressionPipeline::SparsifyOnly {
            k,
            scope: ThresholdScope::Global,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CompressionPipeline::Identity => "identity",
            CompressionPipeline::SparsifyOnly { .. } => "sparsify",
            CompressionPipeline::Ternary => "ternary",
            CompressionPipeline::Dhqc { .. } => "dhqc",
        }
    }

    /// Whether untransmitted mass is carried over to the next round.
    pub fn keeps_residual(&self) -> bool {
        matches!(
            self,
            CompressionPipeline::SparsifyOnly { .. } | CompressionPipeline::Dhqc { .. }
        )
    }
}

const TERN_MAGIC: [u8; 4] = *b"TERN";
const DENSE_MAGIC: [u8; 4] = *b"DENS";
const SPARSE_MAGIC: [u8; 4] = *b"SPRS";
const FRAME_VERSION: u8 = 1;
pub const TERNARY_HEADER_LEN: usize = 17;
pub const DENSE_HEADER_LEN: usize = 13;
pub const SPARSE_HEADER_LEN: usize = 25;

/// `{-u, 0, +u}` quantized vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryUpdate {
    u: f32,
    trits: Vec<i8>,
}

impl TernaryUpdate {
    pub fn new(u: f32, trits: Vec<i8>) -> Result<Self> {
        if !(u.is_finite() && u >= 0.0) {
            return Err(Error::ContractViolation(format!(
                "scale {u} must be finite and >= 0"
            )));
        }
        if let Some(t) = trits.iter().find(|t| !(-1..=1).contains(*t)) {
            return Err(Error::ContractViolation(format!("{t} is not a trit")));
        }
        Ok(Self { u, trits })
    }

    pub fn u(&self) -> f32 {
        self.u
    }

    pub fn trits(&self) -> &[i8] {
        &self.trits
    }

    pub fn model_len(&self) -> usize {
        self.trits.len()
    }
}

/// Stochastic ternarization: coordinate `i` becomes `sign(d_i)` with
/// probability `|d_i| / u`, else 0, so `u * trit` is unbiased. `u` is the
/// largest magnitude rounded up to `f32`.
pub fn ternary_encode(delta: &ParamVector, seed: u64) -> Result<TernaryUpdate> {
    if !delta.is_finite() {
        return Err(Error::ContractViolation(
            "ternary input must be finite".into(),
        ));
    }
    let max = delta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut u = max as f32;
    if (u as f64) < max {
        u = u.next_up();
    }
    if u == 0.0 {
        return TernaryUpdate::new(0.0, vec![0; delta.len()]);
    }
    let scale = u as f64;
    let mut rng = seed::rng(seed);
    let trits = delta
        .iter()
        .map(|&d| {
            let keep = rng.random::<f64>() < d.abs() / scale;
            match (keep, d < 0.0) {
                (false, _) => 0,
                (true, false) => 1,
                (true, true) => -1,
            }
        })
        .collect();
    TernaryUpdate::new(u, trits)
}

pub fn ternary_decode(t: &TernaryUpdate) -> ParamVector {
    let u = t.u as f64;
    t.trits.iter().map(|&x| u * x as f64).collect()
}

pub fn ternary_packed_size(model_len: usize) -> usize {
    TERNARY_HEADER_LEN + model_len.div_ceil(4)
}

/// `"TERN"`, version, `model_len: u64`, `u: f32`, then 2-bit trits four per
/// byte starting at the low bits (`00` = 0, `01` = +1, `10` = -1).
pub fn pack_ternary(t: &TernaryUpdate) -> Vec<u8> {
    let mut out = Vec::with_capacity(ternary_packed_size(t.model_len()));
    out.extend_from_slice(&TERN_MAGIC);
    out.push(FRAME_VERSION);
    out.extend_from_slice(&(t.model_len() as u64).to_le_bytes());
    out.extend_from_slice(&t.u.to_le_bytes());
    for quad in t.trits.chunks(4) {
        let byte = quad.iter().enumerate().fold(0u8, |acc, (j, &x)| {
            let bits = match x {
                1 => 0b01,
                -1 => 0b10,
                _ => 0b00,
            };
            acc | (bits << (2 * j))
        });
        out.push(byte);
    }
    out
}

pub fn unpack_ternary(bytes: &[u8]) -> Result<TernaryUpdate, DecodeError> {
    if bytes.len() < 4 {
        return Err(DecodeError::Truncated);
    }
    if bytes[..4] != TERN_MAGIC {
        return Err(DecodeError::BadMagic);
    }
    if bytes.len() < TERNARY_HEADER_LEN {
        return Err(DecodeError::Truncated);
    }
    if bytes[4] != FRAME_VERSION {
        return Err(DecodeError::BadVersion(bytes[4]));
    }
    let model_len = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
    let u = f32::from_le_bytes(bytes[13..17].try_into().unwrap());
    if !(u.is_finite() && u >= 0.0) {
        return Err(DecodeError::InvalidScale(u));
    }
    let model_len = usize::try_from(model_len).map_err(|_| DecodeError::Truncated)?;
    let needed = model_len
        .checked_add(3)
        .map(|n| n / 4 + TERNARY_HEADER_LEN)
        .ok_or(DecodeError::Truncated)?;
    if bytes.len() < needed {
        return Err(DecodeError::Truncated);
    }
    if bytes.len() > needed {
        return Err(DecodeError::TrailingBytes(bytes.len() - needed));
    }
    let payload = &bytes[TERNARY_HEADER_LEN..];
    let mut trits = Vec::with_capacity(model_len);
    for pos in 0..payload.len() * 4 {
        let bits = (payload[pos / 4] >> (2 * (pos % 4))) & 0b11;
        if pos >= model_len {
            if bits != 0 {
                return Err(DecodeError::NonCanonicalPadding);
            }
            continue;
        }
        trits.push(match bits {
            0b00 => 0,
            0b01 => 1,
            0b10 => -1,
            _ => return Err(DecodeError::InvalidTrit(pos)),
        });
    }
    Ok(TernaryUpdate { u, trits })
}

fn pack_dense(delta: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(DENSE_HEADER_LEN + 4 * delta.len());
    out.extend_from_slice(&DENSE_MAGIC);
    out.push(FRAME_VERSION);
    out.extend_from_slice(&(delta.len() as u64).to_le_bytes());
    for &v in delta.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn pack_sparse_f32(sel: &SparseSelection) -> Vec<u8> {
    let mut out = Vec::with_capacity(SPARSE_HEADER_LEN + 8 * sel.len());
    out.extend_from_slice(&SPARSE_MAGIC);
    out.push(FRAME_VERSION);
    out.extend_from_slice(&(sel.model_len() as u64).to_le_bytes());
    out.extend_from_slice(&(sel.len() as u64).to_le_bytes());
    out.extend_from_slice(&(sel.thr() as f32).to_le_bytes());
    for &i in sel.indices() {
        out.extend_from_slice(&(i as u32).to_le_bytes());
    }
    for &v in sel.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Everything one client upload produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrip {
    /// Values chosen for transmission, before any quantization.
    pub sent: SparseSelection,
    /// What the server reconstructs.
    pub received: SparseSelection,
    /// Mass kept on the client for the next round.
    pub residual: ParamVector,
    /// Serialized frames, one per threshold scope part.
    pub frames: Vec<Vec<u8>>,
    /// Largest quantization step across frames; 0 for lossless pipelines.
    pub max_step: f64,
}

impl RoundTrip {
    pub fn bytes(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }
}

fn split(
    accumulated: &ParamVector,
    k: f64,
    scope: ThresholdScope,
    layers: &[Range<usize>],
) -> Result<(Vec<SparseSelection>, ParamVector)> {
    match scope {
        ThresholdScope::Global => {
            let (sel, res) = sparsify::sparsify(accumulated, k)?;
            Ok((vec![sel], res))
        }
        ThresholdScope::PerLayer => sparsify::sparsify_layers(accumulated, k, layers),
    }
}

/// Runs one client upload through `pipeline`.
///
/// Sparsifying pipelines compress `residual + delta` and return the new
/// residual; identity and ternary compress `delta` and hand `residual` back
/// untouched. `layers` is only consulted for per-layer thresholds.
pub fn pipeline_roundtrip(
    pipeline: &CompressionPipeline,
    delta: &ParamVector,
    residual: &ParamVector,
    layers: &[Range<usize>],
    client_weight: u32,
    seed: u64,
) -> Result<RoundTrip> {
    check_len(delta.len(), residual.len())?;
    match *pipeline {
        CompressionPipeline::Identity => {
            let sel = SparseSelection::from_dense(delta)?;
            Ok(RoundTrip {
                sent: sel.clone(),
                received: sel,
                residual: residual.clone(),
                frames: vec![pack_dense(delta)],
                max_step: 0.0,
            })
        }
        CompressionPipeline::Ternary => {
            let t = ternary_encode(delta, seed)?;
            let frame = pack_ternary(&t);
            let decoded = ternary_decode(&unpack_ternary(&frame)?);
            Ok(RoundTrip {
                sent: SparseSelection::from_dense(delta)?,
                received: SparseSelection::from_dense(&decoded)?,
                residual: residual.clone(),
                frames: vec![frame],
                max_step: t.u() as f64,
            })
        }
        CompressionPipeline::SparsifyOnly { k, scope } => {
            let accumulated = sparsify::accumulate(residual, delta)?;
            let (parts, new_residual) = split(&accumulated, k, scope, layers)?;
            let frames = parts.iter().map(pack_sparse_f32).collect();
            let sent = SparseSelection::merge(parts)?;
            Ok(RoundTrip {
                received: sent.clone(),
                sent,
                residual: new_residual,
                frames,
                max_step: 0.0,
            })
        }
        CompressionPipeline::Dhqc {
            k,
            scope,
            reconstruction,
        } => {
            let accumulated = sparsify::accumulate(residual, delta)?;
            let (parts, new_residual) = split(&accumulated, k, scope, layers)?;
            let mut frames = Vec::with_capacity(parts.len());
            let mut decoded = Vec::with_capacity(parts.len());
            let mut max_step = 0.0f64;
            for part in &parts {
                let frame =
                    codec::pack(&codec::encode_update(part, client_weight, reconstruction)?);
                let enc = codec::unpack(&frame)?;
                max_step = max_step.max(enc.quant_params().step());
                decoded.push(codec::decode_update(&enc)?);
                frames.push(frame);
            }
            Ok(RoundTrip {
                sent: SparseSelection::merge(parts)?,
                received: SparseSelection::merge(decoded)?,
                residual: new_residual,
                frames,
                max_step,
            })
        }
    }
}
