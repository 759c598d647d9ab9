//! Model files: float32 checkpoints and bit-packed binary models.
//!
//! ```text
//! magic        4 bytes  "BWN1"
//! version      u16      1
//! record_count u16
//! records:
//!   kind       u8       0 = architecture text, otherwise a SlotKind code
//!   rank       u8
//!   extents    u32 × rank
//!   encoding   u8       0 = float32, 1 = packed binary, 2 = UTF-8 text
//!   payload
//! crc32        u32      IEEE CRC of every preceding byte
//! ```
//!
//! All integers and floats are little-endian. A packed payload for `F`
//! filters of `n` weights is `F·ceil(n/64)` u64 sign words (filter-major,
//! LSB first, 1 ⇒ +1, padding bits zero) followed by `F` float32 scales.
//! The first record always holds the architecture text; the remaining
//! records follow the network's parameter slots in order.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::binarize::{last_word_mask, words_for_bits, BinaryFilterBank};
use crate::error::{Error, FormatError, Result};
use crate::nn::{LayerSpec, NetworkSpec, Params, SlotKind, Weights};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"BWN1";
pub const FORMAT_VERSION: u16 = 1;

const KIND_ARCHITECTURE: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Float32 = 0,
    Packed = 1,
    Text = 2,
}

impl Encoding {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Encoding::Float32),
            1 => Some(Encoding::Packed),
            2 => Some(Encoding::Text),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Encoding::Float32 => "float32",
            Encoding::Packed => "packed",
            Encoding::Text => "text",
        }
    }
}

/// Whole-model encoding choice for [`save_model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelEncoding {
    /// Every slot as float32; binarized layers keep their shadow weights.
    Checkpoint,
    /// Binarized layers as packed signs plus scales, everything else float32.
    Packed,
}

/// Little-endian sign words of a bank (scales excluded).
pub fn pack_weights(bank: &BinaryFilterBank) -> Vec<u8> {
    bank.words().iter().flat_map(|w| w.to_le_bytes()).collect()
}

/// Sign words for `filters` filters of `n` bits from `bytes`. In strict mode
/// set padding bits are an error; otherwise they are cleared.
pub fn unpack_weights(bytes: &[u8], n: usize, filters: usize, strict: bool) -> Result<Vec<u64>> {
    let wpf = words_for_bits(n);
    let expected = filters * wpf * 8;
    if bytes.len() != expected {
        return Err(FormatError::LengthMismatch {
            what: "packed sign words".into(),
            expected,
            actual: bytes.len(),
        }
        .into());
    }
    let mask = last_word_mask(n);
    let mut words: Vec<u64> = bytes
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    for f in 0..filters {
        let last = &mut words[f * wpf + wpf - 1];
        if *last & !mask != 0 {
            if strict {
                return Err(FormatError::NonZeroPadding { filter: f }.into());
            }
            *last &= mask;
        }
    }
    Ok(words)
}

/// Payload bytes of a packed record: sign words plus one scale per filter.
pub fn packed_payload_len(filters: usize, n: usize) -> usize {
    filters * (8 * words_for_bits(n) + 4)
}

fn record_header_len(rank: usize) -> usize {
    1 + 1 + 4 * rank + 1
}

/// Decoded contents of one record.
#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    Float(Vec<f32>),
    Packed(BinaryFilterBank),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub kind: u8,
    pub shape: Vec<usize>,
    pub encoding: Encoding,
    pub data: RecordData,
    /// Encoded size of the record including its header.
    pub bytes: usize,
}

impl Record {
    pub fn kind_name(&self) -> &'static str {
        if self.kind == KIND_ARCHITECTURE {
            "architecture"
        } else {
            SlotKind::from_code(self.kind).map_or("unknown", SlotKind::name)
        }
    }
}

/// A parsed model file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub version: u16,
    pub records: Vec<Record>,
    pub crc: u32,
    pub total_bytes: usize,
}

impl ModelFile {
    pub fn is_packed(&self) -> bool {
        self.records.iter().any(|r| r.encoding == Encoding::Packed)
    }

    /// Rebuilds the network description and parameters, checking every
    /// record against the architecture's slot layout.
    pub fn into_model(self) -> Result<(NetworkSpec, Params<f32>)> {
        let mut records = self.records.into_iter();
        let spec = match records.next() {
            Some(Record {
                kind: KIND_ARCHITECTURE,
                data: RecordData::Text(text),
                ..
            }) => NetworkSpec::from_text(&text).map_err(|e| FormatError::Invalid {
                what: "architecture record".into(),
                detail: e.to_string(),
            })?,
            _ => {
                return Err(FormatError::Invalid {
                    what: "record 0".into(),
                    detail: "expected the architecture text record".into(),
                }
                .into())
            }
        };
        let layout = spec.slots();
        let rest: Vec<Record> = records.collect();
        if rest.len() != layout.len() {
            return Err(FormatError::Invalid {
                what: "record count".into(),
                detail: format!("architecture has {} parameter slots, file has {}", layout.len(), rest.len()),
            }
            .into());
        }
        let mut slots = Vec::with_capacity(rest.len());
        for (i, (slot, rec)) in layout.iter().zip(rest).enumerate() {
            let what = || format!("record {} ({})", i + 1, slot.name);
            if rec.kind != slot.kind.code() || rec.shape != slot.shape {
                return Err(FormatError::Invalid {
                    what: what(),
                    detail: format!(
                        "expected {} {:?}, found {} {:?}",
                        slot.kind.name(),
                        slot.shape,
                        rec.kind_name(),
                        rec.shape
                    ),
                }
                .into());
            }
            slots.push(match rec.data {
                RecordData::Float(v) => Weights::Dense(Tensor::from_vec(&rec.shape, v).map_err(|e| {
                    FormatError::Invalid {
                        what: what(),
                        detail: e.to_string(),
                    }
                })?),
                RecordData::Packed(bank) => Weights::Packed(bank),
                RecordData::Text(_) => {
                    return Err(FormatError::Invalid {
                        what: what(),
                        detail: "text payload in a parameter record".into(),
                    }
                    .into())
                }
            });
        }
        let params = Params::new(&spec, slots)?;
        Ok((spec, params))
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn header(&mut self, kind: u8, shape: &[usize], encoding: Encoding) -> Result<()> {
        self.buf.push(kind);
        self.buf.push(u8::try_from(shape.len()).map_err(|_| Error::invalid("save_model", "rank above 255"))?);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::invalid("save_model", format!("extent {d} exceeds u32")))?;
            self.buf.extend_from_slice(&d.to_le_bytes());
        }
        self.buf.push(encoding as u8);
        Ok(())
    }

    fn floats(&mut self, data: &[f32]) {
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serializes a model. Packed encoding binarizes dense binary-conv slots.
pub fn encode_model(spec: &NetworkSpec, params: &Params<f32>, encoding: ModelEncoding) -> Result<Vec<u8>> {
    let layout = spec.slots();
    if params.len() != layout.len() {
        return Err(Error::ModeMismatch(format!(
            "parameter set has {} slots, spec needs {}",
            params.len(),
            layout.len()
        )));
    }
    let count = u16::try_from(layout.len() + 1).map_err(|_| Error::invalid("save_model", "too many records"))?;
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(&MAGIC);
    w.buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    w.buf.extend_from_slice(&count.to_le_bytes());

    let text = spec.to_text();
    w.header(KIND_ARCHITECTURE, &[text.len()], Encoding::Text)?;
    w.buf.extend_from_slice(text.as_bytes());

    for (i, slot) in layout.iter().enumerate() {
        let binary = slot.kind == SlotKind::BinaryConv;
        match (params.get(i), encoding) {
            (Weights::Dense(t), ModelEncoding::Packed) if binary => {
                write_packed(&mut w, slot.kind, &BinaryFilterBank::from_weights(t)?)?
            }
            (Weights::Packed(bank), ModelEncoding::Packed) => write_packed(&mut w, slot.kind, bank)?,
            (Weights::Dense(t), _) => {
                w.header(slot.kind.code(), t.shape(), Encoding::Float32)?;
                w.floats(t.data());
            }
            (Weights::Packed(_), ModelEncoding::Checkpoint) => {
                return Err(Error::ModeMismatch(format!(
                    "{} holds packed signs; a float32 checkpoint needs the shadow weights",
                    slot.name
                )))
            }
        }
    }
    let crc = crc32fast::hash(&w.buf);
    w.buf.extend_from_slice(&crc.to_le_bytes());
    Ok(w.buf)
}

fn write_packed(w: &mut Writer, kind: SlotKind, bank: &BinaryFilterBank) -> Result<()> {
    w.header(kind.code(), &bank.shape(), Encoding::Packed)?;
    w.buf.extend_from_slice(&pack_weights(bank));
    w.floats(bank.scales());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(FormatError::Truncated { what: what() }.into()),
        }
    }

    fn u8(&mut self, what: &dyn Fn() -> String) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &dyn Fn() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn floats(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

/// Parses and validates a model file image.
pub fn decode_model(bytes: &[u8]) -> Result<ModelFile> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated { what: "magic".into() }.into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            found: magic,
            expected: MAGIC,
        }
        .into());
    }
    if bytes.len() < 8 {
        return Err(FormatError::Truncated { what: "file header".into() }.into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let count = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    if bytes.len() < 12 {
        return Err(FormatError::Truncated { what: "CRC footer".into() }.into());
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));

    // A short file is reported against the record it cuts into; any other
    // structural problem is only trusted once the CRC has matched.
    let parsed = match parse_records(body, count) {
        Err(e @ Error::Format(FormatError::Truncated { .. })) => return Err(e),
        other => other,
    };
    let computed = crc32fast::hash(body);
    if computed != stored {
        return Err(FormatError::CrcMismatch { stored, computed }.into());
    }
    let records = parsed?;
    Ok(ModelFile {
        version,
        records,
        crc: stored,
        total_bytes: bytes.len(),
    })
}

fn parse_records(body: &[u8], count: usize) -> Result<Vec<Record>> {
    let mut r = Reader { bytes: body, pos: 8 };
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let start = r.pos;
        let what = |part: &'static str| move || format!("record {i} {part}");
        let kind = r.u8(&what("kind"))?;
        let rank = r.u8(&what("rank"))? as usize;
        let shape = (0..rank)
            .map(|_| r.u32(&what("extents")).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let code = r.u8(&what("encoding"))?;
        let invalid = |detail: String| FormatError::Invalid {
            what: format!("record {i}"),
            detail,
        };
        let encoding = Encoding::from_code(code).ok_or_else(|| invalid(format!("unknown encoding {code}")))?;
        if kind != KIND_ARCHITECTURE && SlotKind::from_code(kind).is_none() {
            return Err(invalid(format!("unknown layer kind {kind}")).into());
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| invalid(format!("extents {shape:?} overflow")))?;
        let data = match encoding {
            Encoding::Text => {
                if kind != KIND_ARCHITECTURE || rank != 1 {
                    return Err(invalid("text payload is only valid for the architecture record".into()).into());
                }
                let raw = r.take(numel, &what("payload"))?;
                RecordData::Text(
                    String::from_utf8(raw.to_vec()).map_err(|_| invalid("architecture text is not UTF-8".into()))?,
                )
            }
            Encoding::Float32 => {
                let len = numel.checked_mul(4).ok_or_else(|| invalid("payload size overflows".into()))?;
                RecordData::Float(floats(r.take(len, &what("payload"))?))
            }
            Encoding::Packed => {
                let dims: [usize; 4] = shape
                    .clone()
                    .try_into()
                    .map_err(|_| invalid(format!("packed record needs rank 4, got {rank}")))?;
                if kind != SlotKind::BinaryConv.code() || numel == 0 {
                    return Err(invalid("packed encoding is only valid for non-empty binary conv layers".into()).into());
                }
                let (f, n) = (dims[0], dims[1] * dims[2] * dims[3]);
                let sign_bytes = f * 8 * words_for_bits(n);
                let words = unpack_weights(r.take(sign_bytes, &what("sign words"))?, n, f, true)?;
                let scales = floats(r.take(4 * f, &what("scales"))?);
                let bank = BinaryFilterBank::from_packed(dims, words, scales).map_err(|e| match e {
                    Error::Format(fe) => fe,
                    other => invalid(other.to_string()),
                })?;
                RecordData::Packed(bank)
            }
        };
        records.push(Record {
            kind,
            shape,
            encoding,
            data,
            bytes: r.pos - start,
        });
    }
    if r.pos != body.len() {
        return Err(FormatError::LengthMismatch {
            what: "record section".into(),
            expected: r.pos,
            actual: body.len(),
        }
        .into());
    }
    Ok(records)
}

/// Writes atomically: the bytes go to a temporary file in the target
/// directory, which is then renamed over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_model(path: &Path, spec: &NetworkSpec, params: &Params<f32>, encoding: ModelEncoding) -> Result<()> {
    write_atomic(path, &encode_model(spec, params, encoding)?)
}

pub fn read_model_file(path: &Path) -> Result<ModelFile> {
    decode_model(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_model(path: &Path) -> Result<(NetworkSpec, Params<f32>)> {
    read_model_file(path)?.into_model()
}

/// Exact encoded size of a model file.
pub fn encoded_len(spec: &NetworkSpec, encoding: ModelEncoding) -> usize {
    let mut total = 4 + 2 + 2 + record_header_len(1) + spec.to_text().len() + 4;
    for slot in spec.slots() {
        total += record_header_len(slot.shape.len());
        total += match (slot.kind, encoding) {
            (SlotKind::BinaryConv, ModelEncoding::Packed) => packed_payload_len(slot.shape[0], slot.fan_in()),
            _ => 4 * slot.numel(),
        };
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSize {
    pub name: String,
    pub binarized: bool,
    pub filters: usize,
    /// Weights per filter.
    pub n: usize,
    /// `4·F·n`.
    pub float_bytes: usize,
    /// Payload bytes in the packed file; equals `float_bytes` for layers
    /// that stay full precision.
    pub packed_bytes: usize,
    /// `F·n/8`: the sign bits alone, without padding.
    pub sign_bit_bytes: f64,
    /// Zero bits added to round each filter up to whole 64-bit words.
    pub padding_bytes: usize,
    pub scale_bytes: usize,
}

impl LayerSize {
    pub fn ratio(&self) -> f64 {
        self.float_bytes as f64 / self.packed_bytes as f64
    }
}

/// Byte accounting for storing a network as float32 versus packed.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub layers: Vec<LayerSize>,
    pub binarized_params: usize,
    pub float_param_bytes: usize,
    pub packed_param_bytes: usize,
    /// Sign bits of the binarized layers in bytes.
    pub sign_bit_bytes: f64,
    /// Float32 bytes the binarized layers would need.
    pub binarized_float_bytes: usize,
    pub padding_bytes: usize,
    pub scale_bytes: usize,
    pub float_file_bytes: usize,
    pub packed_file_bytes: usize,
}

impl SizeReport {
    /// Parameter-payload ratio over the whole network.
    pub fn ratio(&self) -> f64 {
        self.float_param_bytes as f64 / self.packed_param_bytes as f64
    }

    /// Float32 bytes over sign-bit bytes for the binarized layers (32 when
    /// any layer is binarized).
    pub fn sign_bit_ratio(&self) -> f64 {
        if self.binarized_params == 0 {
            1.0
        } else {
            self.binarized_float_bytes as f64 / self.sign_bit_bytes
        }
    }

    /// Ratio of the complete files, headers and CRC included.
    pub fn file_ratio(&self) -> f64 {
        self.float_file_bytes as f64 / self.packed_file_bytes as f64
    }

    /// Sign storage expressed as a count of float32 values (`params / 32`).
    pub fn float32_equivalent_params(&self) -> f64 {
        self.sign_bit_bytes / 4.0
    }
}

pub fn size_report(spec: &NetworkSpec) -> SizeReport {
    let mut layers = Vec::new();
    for slot in spec.slots() {
        let binarized = slot.kind == SlotKind::BinaryConv;
        let (filters, n) = match slot.kind {
            SlotKind::FloatConv | SlotKind::BinaryConv | SlotKind::LinearWeight => (slot.shape[0], slot.fan_in()),
            SlotKind::LinearBias | SlotKind::PreluSlope => (1, slot.numel()),
        };
        let float_bytes = 4 * filters * n;
        let (packed_bytes, sign_bit_bytes, padding_bytes, scale_bytes) = if binarized {
            let padded = filters * 8 * words_for_bits(n);
            let bits = (filters * n) as f64 / 8.0;
            (
                packed_payload_len(filters, n),
                bits,
                padded - (filters * n).div_ceil(8).min(padded),
                4 * filters,
            )
        } else {
            (float_bytes, 0.0, 0, 0)
        };
        layers.push(LayerSize {
            name: slot.name.clone(),
            binarized,
            filters,
            n,
            float_bytes,
            packed_bytes,
            sign_bit_bytes,
            padding_bytes,
            scale_bytes,
        });
    }
    let bin = || layers.iter().filter(|l| l.binarized);
    SizeReport {
        binarized_params: bin().map(|l| l.filters * l.n).sum(),
        float_param_bytes: layers.iter().map(|l| l.float_bytes).sum(),
        packed_param_bytes: layers.iter().map(|l| l.packed_bytes).sum(),
        sign_bit_bytes: bin().map(|l| l.sign_bit_bytes).sum(),
        binarized_float_bytes: bin().map(|l| l.float_bytes).sum(),
        padding_bytes: bin().map(|l| l.padding_bytes).sum(),
        scale_bytes: bin().map(|l| l.scale_bytes).sum(),
        float_file_bytes: encoded_len(spec, ModelEncoding::Checkpoint),
        packed_file_bytes: encoded_len(spec, ModelEncoding::Packed),
        layers,
    }
}

impl fmt::Display for SizeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<28} {:>6} {:>6} {:>12} {:>12} {:>8}",
            "layer", "F", "n", "float32 B", "packed B", "ratio"
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<28} {:>6} {:>6} {:>12} {:>12} {:>7.2}x{}",
                l.name,
                l.filters,
                l.n,
                l.float_bytes,
                l.packed_bytes,
                l.ratio(),
                if l.binarized { "" } else { "  (full precision)" }
            )?;
        }
        writeln!(
            f,
            "parameters: {} float32 B, {} packed B, ratio {:.2}x",
            self.float_param_bytes,
            self.packed_param_bytes,
            self.ratio()
        )?;
        if self.binarized_params == 0 {
            return write!(f, "no binarized layers: nothing to compress (ratio 1)");
        }
        writeln!(
            f,
            "binarized weights: {} params, {} float32 B vs {} sign-bit B, ratio {:.2}x",
            self.binarized_params,
            self.binarized_float_bytes,
            self.sign_bit_bytes,
            self.sign_bit_ratio()
        )?;
        writeln!(
            f,
            "  overhead: {} B word padding, {} B float32 scales",
            self.padding_bytes, self.scale_bytes
        )?;
        writeln!(
            f,
            "  sign storage = {:.0} float32-equivalent parameters ({} params / 32), or {:.0} bytes",
            self.float32_equivalent_params(),
            self.binarized_params,
            self.sign_bit_bytes
        )?;
        write!(
            f,
            "files: {} B float32 checkpoint, {} B packed, ratio {:.2}x",
            self.float_file_bytes,
            self.packed_file_bytes,
            self.file_ratio()
        )
    }
}

/// The 3×3 convolution set of a 34-layer ResNet (stages of 3, 4, 6, 3
/// two-conv blocks at widths 64 to 512) plus fourteen extra 64-channel 3×3
/// convolutions, all binarized: 21,602,304 binarizable weights. Spatial
/// extent is 1×1 since only the storage matters; the head is a small
/// full-precision projection to `embedding_dim`.
pub fn resnet34_scale_layer_set(embedding_dim: usize) -> Result<NetworkSpec> {
    let mut layers = Vec::new();
    let mut width = 64;
    for (blocks, out) in [(3 + 7, 64), (4, 128), (6, 256), (3, 512)] {
        for _ in 0..2 * blocks {
            layers.push(LayerSpec::binary_conv(width, out, 3, 1, 1));
            width = out;
        }
    }
    layers.extend([
        LayerSpec::Pool(crate::tensor::PoolKind::GlobalAverage),
        LayerSpec::Flatten,
        LayerSpec::Linear {
            in_features: width,
            out_features: embedding_dim,
            bias: true,
        },
    ]);
    NetworkSpec::new([64, 1, 1], layers, embedding_dim, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_micro_resnet, Activation};

    fn alternating_bank(n: usize) -> BinaryFilterBank {
        let w: Vec<f32> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        BinaryFilterBank::from_weights(&Tensor::from_vec(&[1, n, 1, 1], w).unwrap()).unwrap()
    }

    #[test]
    fn pack_examples() {
        let bytes = pack_weights(&alternating_bank(64));
        assert_eq!(u64::from_le_bytes(bytes[..8].try_into().unwrap()), 0x5555_5555_5555_5555);
        let ones = BinaryFilterBank::from_weights(&Tensor::full(&[1, 64, 1, 1], 0.5f32)).unwrap();
        assert_eq!(pack_weights(&ones), [0xFF; 8]);
        let bank = alternating_bank(70);
        let words = unpack_weights(&pack_weights(&bank), 70, 1, true).unwrap();
        assert_eq!(words, bank.words());
    }

    #[test]
    fn unpack_checks_length_and_padding() {
        assert!(matches!(
            unpack_weights(&[0; 15], 70, 1, true),
            Err(Error::Format(FormatError::LengthMismatch { .. }))
        ));
        let mut bytes = pack_weights(&alternating_bank(70));
        bytes[15] |= 0x80;
        assert!(matches!(
            unpack_weights(&bytes, 70, 1, true),
            Err(Error::Format(FormatError::NonZeroPadding { filter: 0 }))
        ));
        let lenient = unpack_weights(&bytes, 70, 1, false).unwrap();
        assert_eq!(lenient, alternating_bank(70).words());
    }

    #[test]
    fn layer_size_formula() {
        let layers = vec![
            LayerSpec::binary_conv(64, 64, 3, 1, 1),
            LayerSpec::Pool(crate::tensor::PoolKind::GlobalAverage),
            LayerSpec::Flatten,
        ];
        let spec = NetworkSpec::new([64, 2, 2], layers, 64, 2).unwrap();
        let r = size_report(&spec);
        let l = &r.layers[0];
        assert_eq!((l.float_bytes, l.packed_bytes), (147_456, 4_864));
        assert!((l.ratio() - 147_456.0 / 4_864.0).abs() < 1e-12);
        assert_eq!(r.sign_bit_ratio(), 32.0);
    }

    #[test]
    fn no_binary_layers_ratio_one() {
        let layers = vec![
            LayerSpec::float_conv(1, 4, 3, 1, 1),
            LayerSpec::Pool(crate::tensor::PoolKind::GlobalAverage),
            LayerSpec::Flatten,
        ];
        let spec = NetworkSpec::new([1, 4, 4], layers, 4, 2).unwrap();
        let r = size_report(&spec);
        assert_eq!(r.ratio(), 1.0);
        assert_eq!(r.sign_bit_ratio(), 1.0);
        assert_eq!(r.float_file_bytes, r.packed_file_bytes);
    }

    #[test]
    fn round_trip_and_corruption() {
        let spec = build_micro_resnet([1, 8, 8], 1, &[4, 8], 16, 3, Activation::Prelu).unwrap();
        let params = Params::init(&spec, 9);
        for enc in [ModelEncoding::Checkpoint, ModelEncoding::Packed] {
            let bytes = encode_model(&spec, &params, enc).unwrap();
            assert_eq!(bytes.len(), encoded_len(&spec, enc));
            let (spec2, params2) = decode_model(&bytes).unwrap().into_model().unwrap();
            assert_eq!(spec2, spec);
            let again = encode_model(&spec2, &params2, enc).unwrap();
            assert_eq!(again, bytes);

            let mut bad = bytes.clone();
            bad[bytes.len() / 2] ^= 0x01;
            assert!(matches!(decode_model(&bad), Err(Error::Format(_))));
        }
    }

    #[test]
    fn distinct_header_errors() {
        let spec = build_micro_resnet([1, 8, 8], 1, &[4], 8, 2, Activation::Relu).unwrap();
        let bytes = encode_model(&spec, &Params::init(&spec, 1), ModelEncoding::Packed).unwrap();
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_model(&magic), Err(Error::Format(FormatError::BadMagic { .. }))));
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(
            decode_model(&version),
            Err(Error::Format(FormatError::UnsupportedVersion(9)))
        ));
        let mut crc = bytes.clone();
        *crc.last_mut().unwrap() ^= 0xFF;
        assert!(matches!(decode_model(&crc), Err(Error::Format(FormatError::CrcMismatch { .. }))));
        let cut = &bytes[..bytes.len() - 40];
        match decode_model(cut) {
            Err(Error::Format(FormatError::Truncated { what })) => assert!(what.starts_with("record"), "{what}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resnet34_scale_set_counts() {
        let spec = resnet34_scale_layer_set(8).unwrap();
        let r = size_report(&spec);
        assert_eq!(r.binarized_params, 21_602_304);
        assert_eq!(r.sign_bit_ratio(), 32.0);
        assert!(r.file_ratio() >= 30.0, "{}", r.file_ratio());
    }
}
