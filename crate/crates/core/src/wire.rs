//! The `CSFL` binary format for models and masks, and the byte ledger that
//! accounts for every simulated transfer.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CSFL" | version u16 | layer count u16
//! per layer:
//!   name len u8 | name bytes | rank u8 | dims u32 * rank | tag u8 | payload
//! ```
//!
//! Model payloads hold the weight tensor in the tagged encoding followed by
//! the bias as dense `f32` (length = last weight dim). Mask payloads are a
//! bare bitmap.
//!
//! * dense (0): every value as `f32`.
//! * sparse_bitmap (1): `ceil(W / 8)` bytes, bit set = value present,
//!   LSB-first within each byte in flat row-major order; then the present
//!   values in index order.
//! * sparse_index (2): `u32` count, `u32` flat indices, then the values.
//! * mask (3): bitmap only, same bit convention.
//!
//! A value is "present" when its bit pattern is nonzero, so `-0.0` survives
//! a sparse round trip.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Result, WireError};
use crate::nn::{Layer, ModelParams, Tensor};
use crate::sparsify::{LayerMask, Mask};

pub const MAGIC: [u8; 4] = *b"CSFL";
pub const VERSION: u16 = 1;
const FILE_HEADER_LEN: usize = 8;
const MASK_TAG: u8 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    Dense,
    SparseBitmap,
    SparseIndex,
}

impl Encoding {
    pub const ALL: [Encoding; 3] = [
        Encoding::Dense,
        Encoding::SparseBitmap,
        Encoding::SparseIndex,
    ];

    pub fn tag(self) -> u8 {
        match self {
            Encoding::Dense => 0,
            Encoding::SparseBitmap => 1,
            Encoding::SparseIndex => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Encoding::Dense),
            1 => Some(Encoding::SparseBitmap),
            2 => Some(Encoding::SparseIndex),
            _ => None,
        }
    }

    /// Weight payload bytes for `len` values of which `present` are stored.
    pub fn payload_len(self, len: usize, present: usize) -> usize {
        match self {
            Encoding::Dense => 4 * len,
            Encoding::SparseBitmap => len.div_ceil(8) + 4 * present,
            Encoding::SparseIndex => 4 + 8 * present,
        }
    }

    /// Smallest encoding; ties go to the earlier of dense, bitmap, index.
    pub fn smallest(len: usize, present: usize) -> Self {
        Self::ALL
            .into_iter()
            .min_by_key(|e| e.payload_len(len, present))
            .expect("non-empty")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ServerToClient,
    ClientToServer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketKind {
    Model,
    Mask,
}

/// Bytes of one simulated transfer.
#[derive(Clone, Debug, PartialEq)]
pub struct WirePacket {
    pub direction: Direction,
    pub round: u32,
    pub kind: PacketKind,
    pub payload: Vec<u8>,
    /// Weight encoding picked for each layer (empty for masks).
    pub encodings: Vec<Encoding>,
    /// Bytes spent on framing rather than values, bitmaps, or indices.
    pub header_bytes: usize,
}

impl WirePacket {
    pub fn model(
        direction: Direction,
        round: u32,
        params: &ModelParams,
        allow_sparse: bool,
    ) -> std::result::Result<Self, WireError> {
        let enc = encode_model(params, allow_sparse)?;
        Ok(Self {
            direction,
            round,
            kind: PacketKind::Model,
            payload: enc.bytes,
            encodings: enc.encodings,
            header_bytes: enc.header_bytes,
        })
    }

    pub fn mask(
        direction: Direction,
        round: u32,
        mask: &Mask,
    ) -> std::result::Result<Self, WireError> {
        let payload = encode_mask(mask)?;
        let header_bytes = header_len(
            mask.layers()
                .iter()
                .map(|l| (l.name.as_str(), l.shape.len())),
        );
        Ok(Self {
            direction,
            round,
            kind: PacketKind::Mask,
            payload,
            encodings: Vec::new(),
            header_bytes,
        })
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub encodings: Vec<Encoding>,
    pub header_bytes: usize,
}

fn header_len<'a>(layers: impl Iterator<Item = (&'a str, usize)>) -> usize {
    FILE_HEADER_LEN
        + layers
            .map(|(name, rank)| 1 + name.len() + 1 + 4 * rank + 1)
            .sum::<usize>()
}

fn write_header(out: &mut Vec<u8>, layers: usize) -> std::result::Result<(), WireError> {
    let count = u16::try_from(layers)
        .map_err(|_| WireError::Malformed(format!("{layers} layers exceed u16")))?;
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    Ok(())
}

fn write_layer_header(
    out: &mut Vec<u8>,
    name: &str,
    shape: &[usize],
    tag: u8,
) -> std::result::Result<(), WireError> {
    let name_len =
        u8::try_from(name.len()).map_err(|_| WireError::NameTooLong(name.to_string()))?;
    let rank = u8::try_from(shape.len())
        .map_err(|_| WireError::Malformed(format!("rank {} exceeds u8", shape.len())))?;
    out.push(name_len);
    out.extend_from_slice(name.as_bytes());
    out.push(rank);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| WireError::DimTooLarge(d))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(tag);
    Ok(())
}

fn write_bitmap(out: &mut Vec<u8>, bits: impl Iterator<Item = bool>, len: usize) {
    let start = out.len();
    out.resize(start + len.div_ceil(8), 0);
    for (i, b) in bits.enumerate() {
        if b {
            out[start + i / 8] |= 1 << (i % 8);
        }
    }
}

fn write_weights(
    out: &mut Vec<u8>,
    values: &[f32],
    encoding: Encoding,
) -> std::result::Result<(), WireError> {
    match encoding {
        Encoding::Dense => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Encoding::SparseBitmap => {
            write_bitmap(out, values.iter().map(|v| v.to_bits() != 0), values.len());
            for v in values.iter().filter(|v| v.to_bits() != 0) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Encoding::SparseIndex => {
            let present: Vec<(u32, f32)> = values
                .iter()
                .enumerate()
                .filter(|(_, v)| v.to_bits() != 0)
                .map(|(i, &v)| {
                    u32::try_from(i)
                        .map(|i| (i, v))
                        .map_err(|_| WireError::DimTooLarge(i))
                })
                .collect::<std::result::Result<_, _>>()?;
            out.extend_from_slice(&(present.len() as u32).to_le_bytes());
            for (i, _) in &present {
                out.extend_from_slice(&i.to_le_bytes());
            }
            for (_, v) in &present {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(())
}

fn encode(
    params: &ModelParams,
    choose: impl Fn(usize, usize) -> Encoding,
) -> std::result::Result<Encoded, WireError> {
    let mut bytes = Vec::new();
    write_header(&mut bytes, params.layers().len())?;
    let mut encodings = Vec::with_capacity(params.layers().len());
    for layer in params.layers() {
        let values = layer.weights().values();
        let present = values.iter().filter(|v| v.to_bits() != 0).count();
        let encoding = choose(values.len(), present);
        write_layer_header(
            &mut bytes,
            layer.name(),
            layer.weights().shape(),
            encoding.tag(),
        )?;
        write_weights(&mut bytes, values, encoding)?;
        for b in layer.bias().values() {
            bytes.extend_from_slice(&b.to_le_bytes());
        }
        encodings.push(encoding);
    }
    let header_bytes = header_len(
        params
            .layers()
            .iter()
            .map(|l| (l.name(), l.weights().shape().len())),
    );
    Ok(Encoded {
        bytes,
        encodings,
        header_bytes,
    })
}

/// Encodes a model. With `allow_sparse`, each layer's weights use whichever
/// encoding is smallest; otherwise everything is dense. Biases are always
/// dense.
pub fn encode_model(
    params: &ModelParams,
    allow_sparse: bool,
) -> std::result::Result<Encoded, WireError> {
    if allow_sparse {
        encode(params, Encoding::smallest)
    } else {
        encode(params, |_, _| Encoding::Dense)
    }
}

/// Encodes every layer's weights with `encoding`.
pub fn encode_model_with(
    params: &ModelParams,
    encoding: Encoding,
) -> std::result::Result<Encoded, WireError> {
    encode(params, |_, _| encoding)
}

/// Size of the dense encoding of `params` without building it.
pub fn dense_size(params: &ModelParams) -> usize {
    header_len(
        params
            .layers()
            .iter()
            .map(|l| (l.name(), l.weights().shape().len())),
    ) + 4 * params.param_count()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(
        &mut self,
        n: usize,
        layer: &str,
        section: &'static str,
    ) -> std::result::Result<&'a [u8], WireError> {
        if self.buf.len() - self.pos < n {
            return Err(WireError::Truncated {
                layer: layer.to_string(),
                section,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, layer: &str, section: &'static str) -> std::result::Result<u8, WireError> {
        Ok(self.take(1, layer, section)?[0])
    }

    fn u16(&mut self, layer: &str, section: &'static str) -> std::result::Result<u16, WireError> {
        let b = self.take(2, layer, section)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, layer: &str, section: &'static str) -> std::result::Result<u32, WireError> {
        let b = self.take(4, layer, section)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(
        &mut self,
        n: usize,
        layer: &str,
        section: &'static str,
    ) -> std::result::Result<Vec<f32>, WireError> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| WireError::Malformed(format!("{n} values overflow")))?;
        Ok(self
            .take(bytes, layer, section)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn bitmap(&mut self, len: usize, layer: &str) -> std::result::Result<Vec<bool>, WireError> {
        let bytes = self.take(len.div_ceil(8), layer, "bitmap")?;
        Ok((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
    }

    fn finish(&self) -> std::result::Result<(), WireError> {
        if self.pos != self.buf.len() {
            return Err(WireError::Malformed(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

struct LayerHeader {
    name: String,
    shape: Vec<usize>,
    tag: u8,
}

fn read_file_header(r: &mut Reader<'_>) -> std::result::Result<usize, WireError> {
    let magic = r.take(4, "", "file header")?;
    if magic != MAGIC {
        return Err(WireError::BadMagic([
            magic[0], magic[1], magic[2], magic[3],
        ]));
    }
    let version = r.u16("", "file header")?;
    if version != VERSION {
        return Err(WireError::UnsupportedVersion(version));
    }
    Ok(r.u16("", "file header")? as usize)
}

fn read_layer_header(
    r: &mut Reader<'_>,
    index: usize,
) -> std::result::Result<LayerHeader, WireError> {
    let placeholder = format!("#{index}");
    let name_len = r.u8(&placeholder, "layer header")? as usize;
    let name = String::from_utf8(r.take(name_len, &placeholder, "layer header")?.to_vec())
        .map_err(|_| WireError::Malformed(format!("layer {placeholder} name is not UTF-8")))?;
    let rank = r.u8(&name, "layer header")? as usize;
    let shape = (0..rank)
        .map(|_| r.u32(&name, "layer header").map(|d| d as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if shape.contains(&0) || shape.is_empty() {
        return Err(WireError::Malformed(format!(
            "layer `{name}` has shape {shape:?}"
        )));
    }
    let tag = r.u8(&name, "layer header")?;
    Ok(LayerHeader { name, shape, tag })
}

/// Rebuilds a model exactly, including explicit zeros at absent positions.
pub fn decode_model(bytes: &[u8]) -> std::result::Result<ModelParams, WireError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let count = read_file_header(&mut r)?;
    let mut layers = Vec::with_capacity(count);
    for index in 0..count {
        let h = read_layer_header(&mut r, index)?;
        let encoding = Encoding::from_tag(h.tag).ok_or_else(|| WireError::UnknownEncoding {
            layer: h.name.clone(),
            tag: h.tag,
        })?;
        if h.shape.len() != 2 {
            return Err(WireError::Malformed(format!(
                "layer `{}` weights must be rank 2, got {:?}",
                h.name, h.shape
            )));
        }
        let len = h.shape[0]
            .checked_mul(h.shape[1])
            .ok_or_else(|| WireError::Malformed(format!("layer `{}` too large", h.name)))?;
        let weights = match encoding {
            Encoding::Dense => r.f32s(len, &h.name, "values")?,
            Encoding::SparseBitmap => {
                let bits = r.bitmap(len, &h.name)?;
                let present = bits.iter().filter(|&&b| b).count();
                let mut values = r.f32s(present, &h.name, "values")?.into_iter();
                bits.iter()
                    .map(|&b| {
                        if b {
                            values.next().expect("counted")
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
            Encoding::SparseIndex => {
                let n = r.u32(&h.name, "index count")? as usize;
                if n > len {
                    return Err(WireError::Malformed(format!(
                        "layer `{}` lists {n} indices for {len} weights",
                        h.name
                    )));
                }
                let idx = (0..n)
                    .map(|_| r.u32(&h.name, "indices").map(|i| i as usize))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let vals = r.f32s(n, &h.name, "values")?;
                let mut w = vec![0.0f32; len];
                for (i, v) in idx.into_iter().zip(vals) {
                    *w.get_mut(i).ok_or_else(|| {
                        WireError::Malformed(format!("layer `{}` index {i} out of range", h.name))
                    })? = v;
                }
                w
            }
        };
        let bias = r.f32s(h.shape[1], &h.name, "bias")?;
        let malformed = |e: crate::error::Error| WireError::Malformed(e.to_string());
        let weights = Tensor::new(h.shape.clone(), weights).map_err(malformed)?;
        let bias = Tensor::new(vec![h.shape[1]], bias).map_err(malformed)?;
        layers.push(Layer::new(h.name, weights, bias).map_err(malformed)?);
    }
    r.finish()?;
    ModelParams::new(layers).map_err(|e| WireError::Malformed(e.to_string()))
}

pub fn encode_mask(mask: &Mask) -> std::result::Result<Vec<u8>, WireError> {
    let mut out = Vec::new();
    write_header(&mut out, mask.layers().len())?;
    for l in mask.layers() {
        write_layer_header(&mut out, &l.name, &l.shape, MASK_TAG)?;
        write_bitmap(&mut out, l.bits.iter().copied(), l.bits.len());
    }
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> std::result::Result<Mask, WireError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let count = read_file_header(&mut r)?;
    let mut layers = Vec::with_capacity(count);
    for index in 0..count {
        let h = read_layer_header(&mut r, index)?;
        if h.tag != MASK_TAG {
            return Err(WireError::UnknownEncoding {
                layer: h.name,
                tag: h.tag,
            });
        }
        let len = h.shape.iter().product();
        let bits = r.bitmap(len, &h.name)?;
        layers.push(LayerMask {
            name: h.name,
            shape: h.shape,
            bits,
        });
    }
    r.finish()?;
    Mask::new(layers).map_err(|e| WireError::Malformed(e.to_string()))
}

/// Whether the server ships the mask alongside the sparse model, or clients
/// derive it from the model's zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerMode {
    MaskSent,
    #[default]
    MaskDerived,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RoundBytes {
    pub bytes_down: u64,
    pub bytes_up: u64,
    /// Bytes the same transfers would cost with dense models and no mask.
    pub dense_down: u64,
    pub dense_up: u64,
    pub header_down: u64,
    pub header_up: u64,
    pub mask_down: u64,
}

/// Accumulates transferred bytes per round and direction.
#[derive(Clone, Debug, Default)]
pub struct ByteLedger {
    rounds: BTreeMap<u32, RoundBytes>,
}

impl ByteLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one packet. `dense_equivalent` is the size of the dense
    /// transfer it replaces (0 for masks, which have no dense counterpart).
    pub fn record(&mut self, packet: &WirePacket, dense_equivalent: usize) {
        let e = self.rounds.entry(packet.round).or_default();
        let (bytes, dense, header) = (
            packet.len() as u64,
            dense_equivalent as u64,
            packet.header_bytes as u64,
        );
        match packet.direction {
            Direction::ServerToClient => {
                e.bytes_down += bytes;
                e.dense_down += dense;
                e.header_down += header;
                if packet.kind == PacketKind::Mask {
                    e.mask_down += bytes;
                }
            }
            Direction::ClientToServer => {
                e.bytes_up += bytes;
                e.dense_up += dense;
                e.header_up += header;
            }
        }
    }

    pub fn round(&self, round: u32) -> Option<&RoundBytes> {
        self.rounds.get(&round)
    }

    pub fn report(&self) -> LedgerReport {
        let mut cum_down = 0;
        let mut cum_up = 0;
        let mut dense_down = 0;
        let mut dense_up = 0;
        let rounds = self
            .rounds
            .iter()
            .map(|(&round, b)| {
                cum_down += b.bytes_down;
                cum_up += b.bytes_up;
                dense_down += b.dense_down;
                dense_up += b.dense_up;
                RoundReport {
                    round,
                    bytes: b.clone(),
                    cum_bytes_down: cum_down,
                    cum_bytes_up: cum_up,
                    reduction_down: reduction(b.bytes_down, b.dense_down),
                    reduction_up: reduction(b.bytes_up, b.dense_up),
                }
            })
            .collect();
        LedgerReport {
            rounds,
            total_down: cum_down,
            total_up: cum_up,
            reduction_down: reduction(cum_down, dense_down),
            reduction_up: reduction(cum_up, dense_up),
        }
    }
}

/// `1 - bytes / dense`; 0 when there is no dense baseline.
pub fn reduction(bytes: u64, dense: u64) -> f64 {
    if dense == 0 {
        0.0
    } else {
        1.0 - bytes as f64 / dense as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: u32,
    pub bytes: RoundBytes,
    pub cum_bytes_down: u64,
    pub cum_bytes_up: u64,
    pub reduction_down: f64,
    pub reduction_up: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LedgerReport {
    pub rounds: Vec<RoundReport>,
    pub total_down: u64,
    pub total_up: u64,
    pub reduction_down: f64,
    pub reduction_up: f64,
}

/// Convenience wrapper for callers that want the crate error type.
pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    Ok(decode_model(bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_random, Architecture};
    use crate::sparsify::{derive_mask, prune};

    fn one_layer(values: Vec<f32>, rows: usize) -> ModelParams {
        let cols = values.len() / rows;
        ModelParams::new(vec![Layer::new(
            "w",
            Tensor::new(vec![rows, cols], values).unwrap(),
            Tensor::zeros(vec![cols]),
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn dense_layer_size() {
        let m = one_layer(vec![1.0, 2.0, 3.0, 4.0], 2);
        let enc = encode_model(&m, false).unwrap();
        // header 8 + name(1+1) + rank(1) + dims(8) + tag(1) + 16 weights + 8 bias
        assert_eq!(enc.bytes.len(), 8 + 2 + 1 + 8 + 1 + 16 + 8);
        assert_eq!(enc.bytes.len(), dense_size(&m));
        assert_eq!(enc.header_bytes, 20);
    }

    #[test]
    fn bitmap_section_sizes() {
        let mut v = vec![0.0f32; 1000];
        for i in 0..100 {
            v[i * 10] = 1.0 + i as f32;
        }
        assert_eq!(Encoding::SparseBitmap.payload_len(1000, 100), 125 + 400);
        assert_eq!(Encoding::smallest(1000, 100), Encoding::SparseBitmap);
        let m = one_layer(v, 10);
        let enc = encode_model(&m, true).unwrap();
        assert_eq!(enc.encodings, vec![Encoding::SparseBitmap]);
        assert_eq!(enc.bytes.len(), enc.header_bytes + 525 + 4 * 100);
        assert!(decode_model(&enc.bytes).unwrap().bit_eq(&m));
    }

    #[test]
    fn bit_order_is_lsb_first() {
        let m = one_layer(vec![0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 7.0], 1);
        let enc = encode_model_with(&m, Encoding::SparseBitmap).unwrap();
        let body = &enc.bytes[enc.header_bytes..];
        assert_eq!(&body[..2], &[0b0000_0010, 0b0000_0001]);
        assert_eq!(&body[2..6], &5.0f32.to_le_bytes());
    }

    #[test]
    fn every_encoding_round_trips() {
        let dense = init_random(&Architecture::relu(6, &[5], 3), 4).unwrap();
        let (mut sparse, _) = prune(&dense, 0.7).unwrap();
        sparse.layers_mut()[0].weights_mut()[0] = -0.0;
        for e in Encoding::ALL {
            let enc = encode_model_with(&sparse, e).unwrap();
            assert!(decode_model(&enc.bytes).unwrap().bit_eq(&sparse), "{e:?}");
        }
    }

    #[test]
    fn decode_errors_are_distinct() {
        let m = init_random(&Architecture::relu(3, &[2], 2), 1).unwrap();
        let bytes = encode_model(&m, false).unwrap().bytes;

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(WireError::BadMagic(_))));

        let cut = &bytes[..bytes.len() - 3];
        assert_eq!(
            decode_model(cut),
            Err(WireError::Truncated {
                layer: "dense_1".into(),
                section: "bias"
            })
        );

        let mut bad = bytes.clone();
        let tag_pos = 8 + 1 + "dense_0".len() + 1 + 8;
        bad[tag_pos] = 9;
        assert_eq!(
            decode_model(&bad),
            Err(WireError::UnknownEncoding {
                layer: "dense_0".into(),
                tag: 9
            })
        );

        let mut bad = bytes.clone();
        bad[4] = 7;
        assert_eq!(decode_model(&bad), Err(WireError::UnsupportedVersion(7)));
    }

    #[test]
    fn truncated_values_name_the_layer() {
        let m = init_random(&Architecture::relu(3, &[2], 2), 1).unwrap();
        let bytes = encode_model(&m, false).unwrap().bytes;
        let end_of_first_header = 8 + 1 + 7 + 1 + 8 + 1;
        let err = decode_model(&bytes[..end_of_first_header + 5]).unwrap_err();
        assert_eq!(
            err,
            WireError::Truncated {
                layer: "dense_0".into(),
                section: "values"
            }
        );
    }

    #[test]
    fn long_names_are_rejected() {
        let m = ModelParams::new(vec![Layer::new(
            "x".repeat(256),
            Tensor::zeros(vec![1, 1]),
            Tensor::zeros(vec![1]),
        )
        .unwrap()])
        .unwrap();
        assert!(matches!(
            encode_model(&m, true),
            Err(WireError::NameTooLong(_))
        ));
    }

    #[test]
    fn mask_encoding() {
        let m = one_layer(vec![1.0, 0.0, 2.0, 0.0, 0.0, 3.0, 0.0, 4.0], 2);
        let mask = derive_mask(&m);
        let bytes = encode_mask(&mask).unwrap();
        assert_eq!(bytes.len(), 8 + 1 + 1 + 1 + 8 + 1 + 1);
        assert_eq!(decode_mask(&bytes).unwrap(), mask);
        let ones = Mask::ones_for(&m);
        assert_eq!(decode_mask(&encode_mask(&ones).unwrap()).unwrap(), ones);
    }

    #[test]
    fn ledger_reduction_and_mask_modes() {
        let dense = init_random(&Architecture::relu(16, &[32], 3), 2).unwrap();
        let (sparse, mask) = prune(&dense, 0.8).unwrap();
        let dense_len = dense_size(&sparse);

        let mut derived = ByteLedger::new();
        let mut sent = ByteLedger::new();
        let model = WirePacket::model(Direction::ServerToClient, 1, &sparse, true).unwrap();
        let mask_packet = WirePacket::mask(Direction::ServerToClient, 1, &mask).unwrap();
        derived.record(&model, dense_len);
        sent.record(&model, dense_len);
        sent.record(&mask_packet, 0);
        let d = derived.report();
        let s = sent.report();
        assert!(d.reduction_down >= 0.7, "{}", d.reduction_down);
        assert_eq!(s.total_down - d.total_down, mask_packet.len() as u64);
        assert_eq!(derived.round(1).unwrap().mask_down, 0);

        let mut dense_ledger = ByteLedger::new();
        let p = WirePacket::model(Direction::ClientToServer, 0, &dense, false).unwrap();
        dense_ledger.record(&p, dense_size(&dense));
        assert_eq!(dense_ledger.report().reduction_up, 0.0);
        assert!(dense_ledger.round(0).unwrap().header_up > 0);
    }
}
