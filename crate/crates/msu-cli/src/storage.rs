//! The compressed model file format and compression-ratio accounting.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  4 bytes  "MSU1"
//! u16    format version (1)
//! u32    layer count
//! per layer:
//!   u32  layer id
//!   u8   method (0 none, 1 unify, 2 prune, 3 nm-prune)
//!   u8   block rank (0 when method = none)
//!   u32 x rank          block dims
//!   u32  layer rank
//!   u32 x layer rank    layer dims
//!   u32  constrained-block count
//!   u32 x count         constrained block indices (ascending)
//!   f32 x N             magnitudes, one per unified block (unify only)
//!   bytes               bitmap, LSB-first, padded to a byte boundary:
//!                       sign bits for unify (1 = negative), keep bits for
//!                       nm-prune (1 = kept); empty otherwise
//!   f32 x M             raw coefficients: all coefficients of unconstrained
//!                       blocks plus the kept coefficients of nm-pruned
//!                       blocks, in block order then within-block order
//!   f32 x bias length   bias (bias length = first layer dim)
//! u32    CRC-32 (IEEE) over all preceding bytes
//! ```
//!
//! Every array length above is derivable from earlier fields, so decoding
//! needs no extra framing. Pruned blocks store nothing; a decodable file only
//! pays their membership in the index list.

use msu_core::blocking::{partition, BlockPartition, BlockShape};
use msu_core::projection::{BlockConstraint, ConstraintReport, LayerReport, Method};
use msu_core::tensor::DenseTensor;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"MSU1";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("bad magic bytes (not an MSU1 file)")]
    BadMagic,
    #[error("unknown format version {0}")]
    UnknownVersion(u16),
    #[error("truncated stream at byte {0}")]
    Truncated(usize),
    #[error("checksum mismatch: stored {stored:#.8x}, computed {computed:#.8x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("report does not match weights: {0}")]
    ReportMismatch(String),
    #[error(transparent)]
    Core(#[from] msu_core::Error),
}

type Result<T> = std::result::Result<T, StorageError>;

/// Dense weights and bias of one trainable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredLayer {
    pub id: u32,
    pub weights: DenseTensor,
    pub bias: Vec<f32>,
}

/// One encoded layer record.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    pub id: u32,
    pub method: Method,
    pub block_shape: Option<BlockShape>,
    pub layer_shape: Vec<usize>,
    pub constrained: Vec<u32>,
    pub magnitudes: Vec<f32>,
    /// Packed sign bits (unify) or keep bits (nm-prune), LSB-first.
    pub bitmap: Vec<u8>,
    pub raw: Vec<f32>,
    pub bias: Vec<f32>,
}

/// The serialized artifact: per-layer block magnitudes, sign bitmaps, prune
/// membership, raw coefficients and biases.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompressedModel {
    pub layers: Vec<CompressedLayer>,
}

fn method_code(m: Method) -> u8 {
    match m {
        Method::None => 0,
        Method::Unify => 1,
        Method::Prune => 2,
        Method::NmPrune => 3,
    }
}

fn method_from_code(c: u8) -> Result<Method> {
    Ok(match c {
        0 => Method::None,
        1 => Method::Unify,
        2 => Method::Prune,
        3 => Method::NmPrune,
        other => return Err(StorageError::Malformed(format!("unknown method code {other}"))),
    })
}

struct BitWriter {
    bytes: Vec<u8>,
    used: usize,
}

impl BitWriter {
    fn new() -> Self {
        Self { bytes: Vec::new(), used: 0 }
    }

    fn push(&mut self, bit: bool) {
        if self.used % 8 == 0 {
            self.bytes.push(0);
        }
        if bit {
            *self.bytes.last_mut().unwrap() |= 1 << (self.used % 8);
        }
        self.used += 1;
    }
}

fn bit_at(bytes: &[u8], index: usize) -> bool {
    bytes[index / 8] & (1 << (index % 8)) != 0
}

/// Builds the compressed representation of a model, verifying the report
/// against the weights bit-exactly first.
pub fn compress(layers: &[StoredLayer], report: &ConstraintReport) -> Result<CompressedModel> {
    let mut out = Vec::with_capacity(layers.len());
    for layer in layers {
        let layer_report = report.layers.get(&(layer.id as usize));
        out.push(compress_layer(layer, layer_report)?);
    }
    Ok(CompressedModel { layers: out })
}

fn compress_layer(layer: &StoredLayer, report: Option<&LayerReport>) -> Result<CompressedLayer> {
    let shape = layer.weights.shape().to_vec();
    let method = report.map(|r| r.method).unwrap_or(Method::None);
    if method == Method::None {
        return Ok(CompressedLayer {
            id: layer.id,
            method,
            block_shape: None,
            layer_shape: shape,
            constrained: Vec::new(),
            magnitudes: Vec::new(),
            bitmap: Vec::new(),
            raw: layer.weights.data().to_vec(),
            bias: layer.bias.clone(),
        });
    }
    let report = report.unwrap();
    let block_shape = report.block_shape.clone().ok_or_else(|| {
        StorageError::Malformed(format!("layer {}: constrained report without block shape", layer.id))
    })?;
    let p = partition(&shape, &block_shape)?;
    if report.num_blocks != p.num_blocks() {
        return Err(StorageError::ReportMismatch(format!(
            "layer {}: report counts {} blocks, partition has {}",
            layer.id,
            report.num_blocks,
            p.num_blocks()
        )));
    }

    let mut constrained_of = vec![None; p.num_blocks()];
    for c in &report.constrained {
        constrained_of[c.block()] = Some(c);
    }
    let w = layer.weights.data();
    let mut constrained = Vec::with_capacity(report.constrained.len());
    let mut magnitudes = Vec::new();
    let mut bits = BitWriter::new();
    let mut raw = Vec::new();
    for j in 0..p.num_blocks() {
        let coords = p.block_coords(j)?;
        match constrained_of[j] {
            Some(BlockConstraint::Unified { magnitude, negative, .. }) => {
                constrained.push(j as u32);
                magnitudes.push(*magnitude);
                if negative.len() != coords.len() {
                    return Err(StorageError::ReportMismatch(format!(
                        "layer {} block {j}: sign count mismatch",
                        layer.id
                    )));
                }
                for (&c, &neg) in coords.iter().zip(negative) {
                    let expected = if neg { -*magnitude } else { *magnitude };
                    if w[c].to_bits() != expected.to_bits() {
                        return Err(StorageError::ReportMismatch(format!(
                            "layer {} block {j}: weight {} != unified {expected}",
                            layer.id, w[c]
                        )));
                    }
                    bits.push(neg);
                }
            }
            Some(BlockConstraint::Pruned { .. }) => {
                constrained.push(j as u32);
                for &c in coords {
                    if w[c] != 0.0 {
                        return Err(StorageError::ReportMismatch(format!(
                            "layer {} block {j}: nonzero {} in pruned block",
                            layer.id, w[c]
                        )));
                    }
                }
            }
            Some(BlockConstraint::NmPruned { kept, .. }) => {
                constrained.push(j as u32);
                if kept.len() != coords.len() {
                    return Err(StorageError::ReportMismatch(format!(
                        "layer {} block {j}: keep-flag count mismatch",
                        layer.id
                    )));
                }
                for (&c, &keep) in coords.iter().zip(kept) {
                    bits.push(keep);
                    if keep {
                        raw.push(w[c]);
                    } else if w[c] != 0.0 {
                        return Err(StorageError::ReportMismatch(format!(
                            "layer {} block {j}: dropped coefficient holds {}",
                            layer.id, w[c]
                        )));
                    }
                }
            }
            None => {
                for &c in coords {
                    raw.push(w[c]);
                }
            }
        }
    }
    Ok(CompressedLayer {
        id: layer.id,
        method,
        block_shape: Some(block_shape),
        layer_shape: shape,
        constrained,
        magnitudes,
        bitmap: bits.bytes,
        raw,
        bias: layer.bias.clone(),
    })
}

/// Encodes to the byte format described in the module docs.
pub fn encode(model: &CompressedModel) -> Vec<u8> {
    let mut buf = Vec::with_capacity(expected_size(model));
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for layer in &model.layers {
        buf.extend_from_slice(&layer.id.to_le_bytes());
        buf.push(method_code(layer.method));
        match &layer.block_shape {
            None => buf.push(0),
            Some(bs) => {
                buf.push(bs.rank() as u8);
                for &d in bs.dims() {
                    buf.extend_from_slice(&(d as u32).to_le_bytes());
                }
            }
        }
        buf.extend_from_slice(&(layer.layer_shape.len() as u32).to_le_bytes());
        for &d in &layer.layer_shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(layer.constrained.len() as u32).to_le_bytes());
        for &j in &layer.constrained {
            buf.extend_from_slice(&j.to_le_bytes());
        }
        for &q in &layer.magnitudes {
            buf.extend_from_slice(&q.to_le_bytes());
        }
        buf.extend_from_slice(&layer.bitmap);
        for &v in &layer.raw {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &b in &layer.bias {
            buf.extend_from_slice(&b.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Exact byte size [`encode`] will produce, from the format definition.
pub fn expected_size(model: &CompressedModel) -> usize {
    let mut size = 4 + 2 + 4; // magic, version, layer count
    for layer in &model.layers {
        size += 4 + 1 + 1; // id, method, block rank
        size += 4 * layer.block_shape.as_ref().map(|b| b.rank()).unwrap_or(0);
        size += 4 + 4 * layer.layer_shape.len();
        size += 4 + 4 * layer.constrained.len();
        size += 4 * layer.magnitudes.len();
        size += layer.bitmap.len();
        size += 4 * (layer.raw.len() + layer.bias.len());
    }
    size + 4 // CRC trailer
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(StorageError::Truncated(self.pos));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(4 * n)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Decodes and validates a byte stream (magic, version, structure, CRC).
pub fn decode(bytes: &[u8]) -> Result<CompressedModel> {
    if bytes.len() < 4 + 2 + 4 + 4 {
        return Err(StorageError::Truncated(bytes.len()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(StorageError::Checksum { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(StorageError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(StorageError::UnknownVersion(version));
    }
    let layer_count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let id = r.u32()?;
        let method = method_from_code(r.u8()?)?;
        let block_rank = r.u8()? as usize;
        let block_shape = if block_rank == 0 {
            if method != Method::None {
                return Err(StorageError::Malformed(format!(
                    "layer {id}: constrained method without block shape"
                )));
            }
            None
        } else {
            let mut dims = Vec::with_capacity(block_rank);
            for _ in 0..block_rank {
                dims.push(r.u32()? as usize);
            }
            Some(BlockShape::new(&dims)?)
        };
        let layer_rank = r.u32()? as usize;
        if layer_rank == 0 || layer_rank > 4 {
            return Err(StorageError::Malformed(format!("layer {id}: bad rank {layer_rank}")));
        }
        let mut layer_shape = Vec::with_capacity(layer_rank);
        for _ in 0..layer_rank {
            let d = r.u32()? as usize;
            if d == 0 {
                return Err(StorageError::Malformed(format!("layer {id}: zero extent")));
            }
            layer_shape.push(d);
        }
        let constrained_count = r.u32()? as usize;
        let mut constrained = Vec::with_capacity(constrained_count);
        for _ in 0..constrained_count {
            constrained.push(r.u32()?);
        }

        // Everything below is derivable from the fields above.
        let geometry = LayerGeometry::build(id, method, &block_shape, &layer_shape, &constrained)?;
        let magnitudes = r.f32s(geometry.magnitude_count)?;
        let bitmap = r.take(geometry.bitmap_bits.div_ceil(8))?.to_vec();
        let raw_count = match method {
            Method::NmPrune => {
                geometry.unconstrained_coeffs + count_set_bits(&bitmap, geometry.bitmap_bits)
            }
            _ => geometry.unconstrained_coeffs,
        };
        let raw = r.f32s(raw_count)?;
        let bias = r.f32s(layer_shape[0])?;
        layers.push(CompressedLayer {
            id,
            method,
            block_shape,
            layer_shape,
            constrained,
            magnitudes,
            bitmap,
            raw,
            bias,
        });
    }
    if r.pos != body.len() {
        return Err(StorageError::Malformed(format!(
            "{} trailing bytes after the last record",
            body.len() - r.pos
        )));
    }
    Ok(CompressedModel { layers })
}

fn count_set_bits(bitmap: &[u8], bits: usize) -> usize {
    (0..bits).filter(|&i| bit_at(bitmap, i)).count()
}

/// Array lengths implied by a record header.
struct LayerGeometry {
    magnitude_count: usize,
    bitmap_bits: usize,
    unconstrained_coeffs: usize,
    partition: Option<BlockPartition>,
}

impl LayerGeometry {
    fn build(
        id: u32,
        method: Method,
        block_shape: &Option<BlockShape>,
        layer_shape: &[usize],
        constrained: &[u32],
    ) -> Result<Self> {
        let total: usize = layer_shape.iter().product();
        if method == Method::None {
            if !constrained.is_empty() {
                return Err(StorageError::Malformed(format!(
                    "layer {id}: unconstrained record lists constrained blocks"
                )));
            }
            return Ok(Self {
                magnitude_count: 0,
                bitmap_bits: 0,
                unconstrained_coeffs: total,
                partition: None,
            });
        }
        let p = partition(layer_shape, block_shape.as_ref().unwrap())?;
        let mut seen = vec![false; p.num_blocks()];
        let mut constrained_coeffs = 0usize;
        for (i, &j) in constrained.iter().enumerate() {
            let j = j as usize;
            if j >= p.num_blocks() {
                return Err(StorageError::Malformed(format!(
                    "layer {id}: block index {j} out of range"
                )));
            }
            if seen[j] || (i > 0 && constrained[i - 1] as usize >= j) {
                return Err(StorageError::Malformed(format!(
                    "layer {id}: constrained indices not strictly ascending"
                )));
            }
            seen[j] = true;
            constrained_coeffs += p.block_size(j)?;
        }
        let (magnitude_count, bitmap_bits) = match method {
            Method::Unify => (constrained.len(), constrained_coeffs),
            Method::Prune => (0, 0),
            Method::NmPrune => (0, constrained_coeffs),
            Method::None => unreachable!(),
        };
        Ok(Self {
            magnitude_count,
            bitmap_bits,
            unconstrained_coeffs: total - constrained_coeffs,
            partition: Some(p),
        })
    }
}

/// Rebuilds the dense weights (bit-exact) and the constraint report.
pub fn reconstruct(model: &CompressedModel) -> Result<(Vec<StoredLayer>, ConstraintReport)> {
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut report = ConstraintReport::default();
    for layer in &model.layers {
        let geometry = LayerGeometry::build(
            layer.id,
            layer.method,
            &layer.block_shape,
            &layer.layer_shape,
            &layer.constrained,
        )?;
        if layer.magnitudes.len() != geometry.magnitude_count {
            return Err(StorageError::Malformed(format!(
                "layer {}: magnitude count mismatch",
                layer.id
            )));
        }
        let total: usize = layer_total(&layer.layer_shape);
        let mut data = vec![0.0f32; total];
        let mut layer_report = LayerReport {
            layer_shape: layer.layer_shape.clone(),
            method: layer.method,
            block_shape: layer.block_shape.clone(),
            num_blocks: 0,
            constrained: Vec::new(),
            ragged_constrained: Vec::new(),
        };
        match &geometry.partition {
            None => {
                if layer.raw.len() != total {
                    return Err(StorageError::Malformed(format!(
                        "layer {}: raw count mismatch",
                        layer.id
                    )));
                }
                data.copy_from_slice(&layer.raw);
                layer_report = LayerReport::unconstrained(&layer.layer_shape);
            }
            Some(p) => {
                layer_report.num_blocks = p.num_blocks();
                let constrained: std::collections::BTreeSet<usize> =
                    layer.constrained.iter().map(|&j| j as usize).collect();
                let mut bit = 0usize;
                let mut raw_pos = 0usize;
                let mut mag_pos = 0usize;
                for j in 0..p.num_blocks() {
                    let coords = p.block_coords(j)?;
                    if !constrained.contains(&j) {
                        for &c in coords {
                            data[c] = take_raw(layer, &mut raw_pos)?;
                        }
                        continue;
                    }
                    if p.is_ragged(j)? {
                        layer_report.ragged_constrained.push(j);
                    }
                    match layer.method {
                        Method::Unify => {
                            let q = layer.magnitudes[mag_pos];
                            mag_pos += 1;
                            let mut negative = Vec::with_capacity(coords.len());
                            for &c in coords {
                                let neg = bit_at(&layer.bitmap, bit);
                                bit += 1;
                                negative.push(neg);
                                data[c] = if neg { -q } else { q };
                            }
                            layer_report.constrained.push(BlockConstraint::Unified {
                                block: j,
                                magnitude: q,
                                negative,
                            });
                        }
                        Method::Prune => {
                            layer_report.constrained.push(BlockConstraint::Pruned { block: j });
                        }
                        Method::NmPrune => {
                            let mut kept = Vec::with_capacity(coords.len());
                            for &c in coords {
                                let keep = bit_at(&layer.bitmap, bit);
                                bit += 1;
                                kept.push(keep);
                                if keep {
                                    data[c] = take_raw(layer, &mut raw_pos)?;
                                }
                            }
                            layer_report
                                .constrained
                                .push(BlockConstraint::NmPruned { block: j, kept });
                        }
                        Method::None => unreachable!(),
                    }
                }
                if raw_pos != layer.raw.len() {
                    return Err(StorageError::Malformed(format!(
                        "layer {}: {} unconsumed raw coefficients",
                        layer.id,
                        layer.raw.len() - raw_pos
                    )));
                }
            }
        }
        let weights = DenseTensor::new(&layer.layer_shape, data)
            .map_err(|e| StorageError::Malformed(e.to_string()))?;
        report.layers.insert(layer.id as usize, layer_report);
        layers.push(StoredLayer { id: layer.id, weights, bias: layer.bias.clone() });
    }
    Ok((layers, report))
}

fn take_raw(layer: &CompressedLayer, pos: &mut usize) -> Result<f32> {
    let v = layer
        .raw
        .get(*pos)
        .copied()
        .ok_or_else(|| StorageError::Malformed(format!("layer {}: raw array exhausted", layer.id)))?;
    *pos += 1;
    Ok(v)
}

fn layer_total(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// `serialize = encode(compress(...))`, checking the report first.
pub fn serialize(layers: &[StoredLayer], report: &ConstraintReport) -> Result<Vec<u8>> {
    Ok(encode(&compress(layers, report)?))
}

/// `deserialize = reconstruct(decode(...))`; round-trips bit-exactly.
pub fn deserialize(bytes: &[u8]) -> Result<(Vec<StoredLayer>, ConstraintReport)> {
    reconstruct(&decode(bytes)?)
}

/// Denominator convention for [`compression_ratio`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Accounting {
    /// Stored coefficients only: raw + one magnitude per unified block +
    /// kept nm coefficients; pruned blocks are free.
    MagnitudesOnly,
    /// Adds sign/keep bits at 1/32 coefficient-equivalent each and one mask
    /// bit per pruned block.
    WithSignBits,
}

/// Weight-coefficient compression ratio of a report (biases excluded from
/// both sides).
pub fn compression_ratio(report: &ConstraintReport, accounting: Accounting) -> Result<f64> {
    let mut total = 0.0f64;
    let mut stored = 0.0f64;
    let mut bits = 0.0f64;
    for layer in report.layers.values() {
        let layer_total: usize = layer.layer_shape.iter().product();
        total += layer_total as f64;
        if layer.method == Method::None {
            stored += layer_total as f64;
            continue;
        }
        let p = partition(&layer.layer_shape, layer.block_shape.as_ref().unwrap())?;
        let mut constrained_coeffs = 0usize;
        for c in &layer.constrained {
            let size = p.block_size(c.block())?;
            constrained_coeffs += size;
            match c {
                BlockConstraint::Unified { .. } => {
                    stored += 1.0;
                    bits += size as f64;
                }
                BlockConstraint::Pruned { .. } => {
                    bits += 1.0;
                }
                BlockConstraint::NmPruned { kept, .. } => {
                    stored += kept.iter().filter(|&&k| k).count() as f64;
                    bits += size as f64;
                }
            }
        }
        stored += (layer_total - constrained_coeffs) as f64;
    }
    let denominator = match accounting {
        Accounting::MagnitudesOnly => stored,
        Accounting::WithSignBits => stored + bits / 32.0,
    };
    if denominator == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(total / denominator)
}
