//! Hierarchical 4-bit quantization of sparsified updates and its wire format.
//!
//! The magnitude range `[thr, theta]` of a selection is cut into eight equal
//! intervals. Each transmitted value becomes one nibble: a sign bit (set for
//! negative values) above a 3-bit interval number. Decoding maps an interval
//! back to its lower edge `thr + location * step`, or optionally to its
//! midpoint.
//!
//! Wire format, version 1, little-endian:
//!
//! | bytes   | field                                   |
//! |---------|-----------------------------------------|
//! | 0..4    | magic `"DHQC"`                          |
//! | 4       | version `0x01`                          |
//! | 5       | flags, bit 0 = midpoint reconstruction  |
//! | 6..14   | `model_len: u64`                        |
//! | 14..22  | `count: u64`                            |
//! | 22..26  | `thr: f32`                              |
//! | 26..30  | `theta: f32`                            |
//! | 30..34  | `client_weight: u32`                    |
//! | ...     | `count` x `u32` indices, increasing      |
//! | ...     | `ceil(count / 2)` code bytes             |
//!
//! Codes are packed low nibble first; an odd count leaves the final high
//! nibble zero.

use crate::error::{DecodeError, Error, Result};
use crate::sparsify::SparseSelection;

pub const MAGIC: [u8; 4] = *b"DHQC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 34;
/// Interval count; fixed by the 3-bit location field.
pub const NUM_INTERVALS: u8 = 8;
const MAX_LOCATION: u8 = NUM_INTERVALS - 1;
const FLAG_MIDPOINT: u8 = 0x01;

/// Which point of an interval a code decodes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reconstruction {
    #[default]
    LowerEdge,
    Midpoint,
}

/// Quantization range and interval width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    thr: f64,
    theta: f64,
    step: f64,
}

impl QuantParams {
    pub fn new(thr: f64, theta: f64) -> Result<Self> {
        if !(thr.is_finite() && theta.is_finite() && thr >= 0.0 && theta >= thr) {
            return Err(Error::ContractViolation(format!(
                "invalid quantization range [{thr}, {theta}]"
            )));
        }
        let mut step = (theta - thr) / NUM_INTERVALS as f64;
        // `theta - thr` may round down; widen until the top interval reaches theta.
        while theta - (thr + MAX_LOCATION as f64 * step) > step {
            step = step.next_up();
        }
        Ok(Self { thr, theta, step })
    }

    pub fn thr(&self) -> f64 {
        self.thr
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    fn edge(&self, location: u8) -> f64 {
        self.thr + location as f64 * self.step
    }
}

/// One nibble: sign bit plus 3-bit interval number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantCode {
    negative: bool,
    location: u8,
}

impl QuantCode {
    pub fn new(negative: bool, location: u8) -> Result<Self> {
        if location > MAX_LOCATION {
            return Err(Error::ContractViolation(format!(
                "location {location} exceeds 3 bits"
            )));
        }
        Ok(Self { negative, location })
    }

    pub fn negative(&self) -> bool {
        self.negative
    }

    pub fn location(&self) -> u8 {
        self.location
    }

    pub fn to_nibble(self) -> u8 {
        (u8::from(self.negative) << 3) | self.location
    }

    pub fn from_nibble(nibble: u8) -> Self {
        Self {
            negative: nibble & 0x08 != 0,
            location: nibble & 0x07,
        }
    }
}

/// Largest magnitude in the selection, or its threshold when empty.
pub fn find_max_abs(sel: &SparseSelection) -> f64 {
    sel.values()
        .iter()
        .fold(sel.thr(), |max, v| max.max(v.abs()))
}

/// Maps `value` to its interval. Values at `theta` land in the last interval.
pub fn quantize(value: f64, q: &QuantParams) -> Result<QuantCode> {
    let mag = value.abs();
    if !(mag >= q.thr && mag <= q.theta) {
        return Err(Error::ContractViolation(format!(
            "|{value}| outside quantization range [{}, {}]",
            q.thr, q.theta
        )));
    }
    let location = if q.step == 0.0 {
        0
    } else {
        let mut loc = ((mag - q.thr) / q.step)
            .floor()
            .clamp(0.0, MAX_LOCATION as f64) as u8;
        // Settle rounding at the interval edges so that
        // edge(loc) <= mag < edge(loc + 1) holds in floating point.
        while loc < MAX_LOCATION && q.edge(loc + 1) <= mag {
            loc += 1;
        }
        while loc > 0 && q.edge(loc) > mag {
            loc -= 1;
        }
        if loc < MAX_LOCATION && mag - q.edge(loc) >= q.step {
            loc += 1;
        }
        loc
    };
    Ok(QuantCode {
        negative: value < 0.0,
        location,
    })
}

pub fn dequantize(code: QuantCode, q: &QuantParams, reconstruction: Reconstruction) -> f64 {
    let offset = match reconstruction {
        Reconstruction::LowerEdge => code.location as f64,
        Reconstruction::Midpoint => code.location as f64 + 0.5,
    };
    let mag = q.thr + offset * q.step;
    if code.negative {
        -mag
    } else {
        mag
    }
}

/// A quantized selection, ready for the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedUpdate {
    model_len: u64,
    thr: f32,
    theta: f32,
    reconstruction: Reconstruction,
    indices: Vec<u32>,
    codes: Vec<QuantCode>,
    client_weight: u32,
}

impl EncodedUpdate {
    pub fn new(
        model_len: u64,
        thr: f32,
        theta: f32,
        reconstruction: Reconstruction,
        indices: Vec<u32>,
        codes: Vec<QuantCode>,
        client_weight: u32,
    ) -> Result<Self, DecodeError> {
        if !(thr.is_finite() && theta.is_finite() && thr >= 0.0 && theta >= thr) {
            return Err(DecodeError::InvalidRange { thr, theta });
        }
        if indices.len() != codes.len() {
            return Err(DecodeError::Truncated);
        }
        check_indices(&indices, model_len)?;
        Ok(Self {
            model_len,
            thr,
            theta,
            reconstruction,
            indices,
            codes,
            client_weight,
        })
    }

    pub fn model_len(&self) -> u64 {
        self.model_len
    }

    pub fn count(&self) -> usize {
        self.indices.len()
    }

    pub fn thr(&self) -> f32 {
        self.thr
    }

    pub fn theta(&self) -> f32 {
        self.theta
    }

    pub fn reconstruction(&self) -> Reconstruction {
        self.reconstruction
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn codes(&self) -> &[QuantCode] {
        &self.codes
    }

    pub fn client_weight(&self) -> u32 {
        self.client_weight
    }

    pub fn quant_params(&self) -> QuantParams {
        QuantParams::new(self.thr as f64, self.theta as f64)
            .expect("range validated at construction")
    }
}

fn check_indices(indices: &[u32], model_len: u64) -> Result<(), DecodeError> {
    for (pos, &idx) in indices.iter().enumerate() {
        if u64::from(idx) >= model_len {
            return Err(DecodeError::IndexOutOfRange {
                index: idx.into(),
                model_len,
            });
        }
        if pos > 0 && indices[pos - 1] >= idx {
            return Err(DecodeError::NonIncreasingIndices(pos));
        }
    }
    Ok(())
}

fn f32_at_most(x: f64) -> f32 {
    let y = x as f32;
    if (y as f64) > x {
        y.next_down()
    } else {
        y
    }
}

fn f32_at_least(x: f64) -> f32 {
    let y = x as f32;
    if (y as f64) < x {
        y.next_up()
    } else {
        y
    }
}

/// Quantizes every selected value.
///
/// `thr` and `theta` travel as `f32`; they are rounded outward so every
/// selected magnitude still lies inside the transmitted range.
pub fn encode_update(
    sel: &SparseSelection,
    client_weight: u32,
    reconstruction: Reconstruction,
) -> Result<EncodedUpdate> {
    if sel.model_len() as u64 > u64::from(u32::MAX) + 1 {
        return Err(Error::invalid("model too large for 32-bit indices"));
    }
    let thr = f32_at_most(sel.thr());
    let theta = f32_at_least(find_max_abs(sel));
    if !theta.is_finite() {
        return Err(Error::ContractViolation(format!(
            "maximum magnitude {} overflows f32",
            find_max_abs(sel)
        )));
    }
    let q = QuantParams::new(thr as f64, theta as f64)?;
    let codes = sel
        .values()
        .iter()
        .map(|&v| quantize(v, &q))
        .collect::<Result<Vec<_>>>()?;
    let indices = sel.indices().iter().map(|&i| i as u32).collect();
    Ok(EncodedUpdate::new(
        sel.model_len() as u64,
        thr,
        theta,
        reconstruction,
        indices,
        codes,
        client_weight,
    )?)
}

/// Dequantizes every code back into a sparse selection over `[thr, theta]`.
pub fn decode_update(enc: &EncodedUpdate) -> Result<SparseSelection> {
    let q = enc.quant_params();
    let values = enc
        .codes
        .iter()
        .map(|&c| dequantize(c, &q, enc.reconstruction))
        .collect();
    let model_len = usize::try_from(enc.model_len)
        .map_err(|_| Error::invalid("model length exceeds address space"))?;
    SparseSelection::new(
        enc.indices.iter().map(|&i| i as usize).collect(),
        values,
        q.thr(),
        model_len,
    )
}

/// Exact serialized size for `count` transmitted coordinates.
pub fn packed_size(count: usize) -> usize {
    HEADER_LEN + 4 * count + count.div_ceil(2)
}

pub fn pack(enc: &EncodedUpdate) -> Vec<u8> {
    let mut out = Vec::with_capacity(packed_size(enc.count()));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(match enc.reconstruction {
        Reconstruction::LowerEdge => 0,
        Reconstruction::Midpoint => FLAG_MIDPOINT,
    });
    out.extend_from_slice(&enc.model_len.to_le_bytes());
    out.extend_from_slice(&(enc.count() as u64).to_le_bytes());
    out.extend_from_slice(&enc.thr.to_le_bytes());
    out.extend_from_slice(&enc.theta.to_le_bytes());
    out.extend_from_slice(&enc.client_weight.to_le_bytes());
    for idx in &enc.indices {
        out.extend_from_slice(&idx.to_le_bytes());
    }
    for pair in enc.codes.chunks(2) {
        let lo = pair[0].to_nibble();
        let hi = pair.get(1).map_or(0, |c| c.to_nibble());
        out.push(lo | (hi << 4));
    }
    out
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn le_u64(b: &[u8]) -> u64 {
    let mut buf = [0u8; 8];
    buf.copy_from_slice(&b[..8]);
    u64::from_le_bytes(buf)
}

/// Parses a version-1 frame, rejecting anything [`pack`] would not emit.
pub fn unpack(bytes: &[u8]) -> Result<EncodedUpdate, DecodeError> {
    if bytes.len() < 4 {
        return Err(DecodeError::Truncated);
    }
    if bytes[..4] != MAGIC {
        return Err(DecodeError::BadMagic);
    }
    if bytes.len() < 5 {
        return Err(DecodeError::Truncated);
    }
    if bytes[4] != VERSION {
        return Err(DecodeError::BadVersion(bytes[4]));
    }
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Truncated);
    }
    let reconstruction = match bytes[5] {
        0 => Reconstruction::LowerEdge,
        FLAG_MIDPOINT => Reconstruction::Midpoint,
        other => return Err(DecodeError::BadFlags(other)),
    };
    let model_len = le_u64(&bytes[6..14]);
    let count = le_u64(&bytes[14..22]);
    let thr = f32::from_le_bytes(bytes[22..26].try_into().unwrap());
    let theta = f32::from_le_bytes(bytes[26..30].try_into().unwrap());
    let client_weight = le_u32(&bytes[30..34]);
    if !(thr.is_finite() && theta.is_finite() && thr >= 0.0 && theta >= thr) {
        return Err(DecodeError::InvalidRange { thr, theta });
    }

    let count = usize::try_from(count).map_err(|_| DecodeError::Truncated)?;
    let needed = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(count.div_ceil(2)))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(DecodeError::Truncated)?;
    if bytes.len() < needed {
        return Err(DecodeError::Truncated);
    }
    if bytes.len() > needed {
        return Err(DecodeError::TrailingBytes(bytes.len() - needed));
    }

    let idx_end = HEADER_LEN + 4 * count;
    let indices: Vec<u32> = bytes[HEADER_LEN..idx_end]
        .chunks_exact(4)
        .map(le_u32)
        .collect();
    check_indices(&indices, model_len)?;

    let code_bytes = &bytes[idx_end..];
    if count % 2 == 1 && code_bytes[code_bytes.len() - 1] >> 4 != 0 {
        return Err(DecodeError::NonCanonicalPadding);
    }
    let codes: Vec<QuantCode> = code_bytes
        .iter()
        .flat_map(|&b| [b & 0x0f, b >> 4])
        .take(count)
        .map(QuantCode::from_nibble)
        .collect();

    EncodedUpdate::new(
        model_len,
        thr,
        theta,
        reconstruction,
        indices,
        codes,
        client_weight,
    )
}

/// Dense float32 bytes divided by packed bytes.
pub fn compression_ratio(model_len: usize, packed_bytes: usize) -> Result<f64> {
    if packed_bytes == 0 {
        return Err(Error::invalid("packed size must be >= 1 byte"));
    }
    Ok(4.0 * model_len as f64 / packed_bytes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamVector;
    use crate::sparsify::sparsify;

    #[test]
    fn max_abs_cases() {
        let sel =
            SparseSelection::new(vec![1, 2, 4, 5], vec![-5.0, 4.0, 9.0, -4.0], 4.0, 6).unwrap();
        assert_eq!(find_max_abs(&sel), 9.0);
        assert_eq!(find_max_abs(&SparseSelection::empty(0.7, 3)), 0.7);
        let one = SparseSelection::new(vec![0], vec![-2.5], 1.0, 1).unwrap();
        assert_eq!(find_max_abs(&one), 2.5);
    }

    #[test]
    fn quantize_examples() {
        let q = QuantParams::new(1.0, 9.0).unwrap();
        assert_eq!(q.step(), 1.0);
        assert_eq!(
            quantize(4.3, &q).unwrap(),
            QuantCode::new(false, 3).unwrap()
        );
        assert_eq!(quantize(1.0, &q).unwrap().location(), 0);
        assert_eq!(
            quantize(-9.0, &q).unwrap(),
            QuantCode::new(true, 7).unwrap()
        );
        assert!(quantize(0.5, &q).is_err());
        assert!(quantize(9.5, &q).is_err());
        assert!(quantize(f64::NAN, &q).is_err());
    }

    #[test]
    fn dequantize_examples() {
        let q = QuantParams::new(1.0, 9.0).unwrap();
        let lo = Reconstruction::LowerEdge;
        assert_eq!(dequantize(QuantCode::new(false, 3).unwrap(), &q, lo), 4.0);
        assert_eq!(dequantize(QuantCode::new(true, 0).unwrap(), &q, lo), -1.0);
        assert_eq!(
            dequantize(
                QuantCode::new(false, 3).unwrap(),
                &q,
                Reconstruction::Midpoint
            ),
            4.5
        );
        let flat = QuantParams::new(2.0, 2.0).unwrap();
        for loc in 0..8 {
            assert_eq!(
                dequantize(QuantCode::new(true, loc).unwrap(), &flat, lo),
                -2.0
            );
        }
        assert_eq!(quantize(-2.0, &flat).unwrap().location(), 0);
    }

    #[test]
    fn encode_example() {
        let sel = SparseSelection::new(vec![2, 4], vec![4.0, 9.0], 4.0, 6).unwrap();
        let enc = encode_update(&sel, 10, Reconstruction::LowerEdge).unwrap();
        assert_eq!(enc.theta(), 9.0);
        assert_eq!(enc.quant_params().step(), 0.625);
        assert_eq!(
            enc.codes(),
            &[
                QuantCode::new(false, 0).unwrap(),
                QuantCode::new(false, 7).unwrap()
            ]
        );
        assert_eq!(enc.indices(), &[2, 4]);
    }

    #[test]
    fn encode_empty() {
        let enc = encode_update(
            &SparseSelection::empty(0.25, 9),
            1,
            Reconstruction::LowerEdge,
        )
        .unwrap();
        assert_eq!(enc.count(), 0);
        assert_eq!(enc.theta(), enc.thr());
        let dec = decode_update(&enc).unwrap();
        assert!(dec.is_empty());
        assert_eq!(dec.model_len(), 9);
    }

    #[test]
    fn outward_rounding_keeps_values_in_range() {
        // 0.1 is not representable in f32; rounding to nearest would go up.
        let v = ParamVector::new(vec![0.1, -0.3, 0.05, 1.0 / 3.0]);
        let (sel, _) = sparsify(&v, 50.0).unwrap();
        let enc = encode_update(&sel, 1, Reconstruction::LowerEdge).unwrap();
        assert!(enc.thr() as f64 <= sel.thr());
        assert!(enc.theta() as f64 >= 1.0 / 3.0);
    }

    #[test]
    fn header_only_frame_is_34_bytes() {
        let enc =
            EncodedUpdate::new(10, 0.5, 0.5, Reconstruction::LowerEdge, vec![], vec![], 7).unwrap();
        let bytes = pack(&enc);
        assert_eq!(bytes.len(), 34);
        assert_eq!(&bytes[..6], b"DHQC\x01\x00");
        assert_eq!(unpack(&bytes).unwrap(), enc);
    }

    #[test]
    fn three_codes_pack_with_padding() {
        let codes = vec![
            QuantCode::new(false, 1).unwrap(),
            QuantCode::new(true, 7).unwrap(),
            QuantCode::new(true, 2).unwrap(),
        ];
        let enc = EncodedUpdate::new(
            100,
            1.0,
            2.0,
            Reconstruction::Midpoint,
            vec![3, 50, 99],
            codes,
            1,
        )
        .unwrap();
        let bytes = pack(&enc);
        assert_eq!(bytes.len(), 34 + 12 + 2);
        assert_eq!(bytes[5], 1);
        assert_eq!(bytes[46], 0x01 | (0x0f << 4));
        assert_eq!(bytes[47], 0x0a);
        assert_eq!(packed_size(3), bytes.len());
    }

    #[test]
    fn unpack_rejections() {
        let codes = vec![QuantCode::new(false, 1).unwrap(); 3];
        let enc = EncodedUpdate::new(
            100,
            1.0,
            2.0,
            Reconstruction::LowerEdge,
            vec![3, 50, 99],
            codes,
            1,
        )
        .unwrap();
        let good = pack(&enc);

        let mut b = good.clone();
        b[0] = b'X';
        assert_eq!(unpack(&b), Err(DecodeError::BadMagic));
        let mut b = good.clone();
        b[4] = 2;
        assert_eq!(unpack(&b), Err(DecodeError::BadVersion(2)));
        let mut b = good.clone();
        b[5] = 0x02;
        assert_eq!(unpack(&b), Err(DecodeError::BadFlags(2)));
        assert_eq!(unpack(&good[..good.len() - 1]), Err(DecodeError::Truncated));
        assert_eq!(unpack(&good[..20]), Err(DecodeError::Truncated));
        let mut b = good.clone();
        b.push(0);
        assert_eq!(unpack(&b), Err(DecodeError::TrailingBytes(1)));
        let mut b = good.clone();
        b[38..42].copy_from_slice(&3u32.to_le_bytes());
        assert_eq!(unpack(&b), Err(DecodeError::NonIncreasingIndices(1)));
        let mut b = good.clone();
        b[42..46].copy_from_slice(&100u32.to_le_bytes());
        assert!(matches!(
            unpack(&b),
            Err(DecodeError::IndexOutOfRange { index: 100, .. })
        ));
        let mut b = good.clone();
        *b.last_mut().unwrap() |= 0x10;
        assert_eq!(unpack(&b), Err(DecodeError::NonCanonicalPadding));
        let mut b = good.clone();
        b[22..26].copy_from_slice(&3.0f32.to_le_bytes());
        assert!(matches!(unpack(&b), Err(DecodeError::InvalidRange { .. })));
        let mut b = good;
        b[14..22].copy_from_slice(&u64::MAX.to_le_bytes());
        assert_eq!(unpack(&b), Err(DecodeError::Truncated));
    }

    #[test]
    fn ratio_definition() {
        assert_eq!(compression_ratio(10, 40).unwrap(), 1.0);
        let full = compression_ratio(1_000_000, 4534).unwrap();
        let half = compression_ratio(1_000_000, 2267).unwrap();
        assert!((half - 2.0 * full).abs() < 1e-9);
        assert!(compression_ratio(10, 0).is_err());
    }
}
