//! The `BWNM` model file and its byte accounting.
//!
//! ```text
//! "BWNM" | u16 version | u16 layers
//! u32 classes | u32 in_c | u32 in_h | u32 in_w | u16 anchors | (f64 w, f64 h)* | u16 stage
//! per layer:
//!   u16 name_len | name | u8 kind | u8 group | u8 n_in | u16 input* | u8 ndim | u32 dim*
//!   [conv: u32 stride | u32 pad] | u8 flags | u32 payload_len | payload
//! u32 CRC-32 of every byte after the magic
//! ```
//!
//! All integers and floats are little-endian. A full-precision conv payload
//! is its f32 weights; a binarized one is the packed sign bits of each
//! filter followed by one f32 scale per filter. Then come the bias (flag
//! bit 0) and the BN scale, shift, mean and variance (flag bit 1).

use std::fs;
use std::path::Path;

use crate::binarize::{binarize_layer, packed_len, unpack_bits};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{BatchNorm, ConvParams, ConvSpec, Group, Layer, LayerKind, LayerSpec, Model, ModelMeta, Source};

pub const MAGIC: &[u8; 4] = b"BWNM";
pub const VERSION: u16 = 1;
const IMAGE_SOURCE: u16 = u16::MAX;
const NO_STAGE: u16 = u16::MAX;
const FLAG_BIAS: u8 = 1;
const FLAG_BN: u8 = 2;

/// Byte accounting of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSize {
    pub name: String,
    pub kind: LayerKind,
    pub binarized: bool,
    /// Stored weight bytes: f32 weights, or sign bits plus per-filter scales.
    pub weight_bytes: usize,
    /// Weight bytes the layer would need in full precision.
    pub fp_weight_bytes: usize,
    /// Bias and batch-norm bytes (always full precision).
    pub aux_bytes: usize,
}

impl LayerSize {
    pub fn payload_bytes(&self) -> usize {
        self.weight_bytes + self.aux_bytes
    }

    /// Full-precision weight bytes over stored weight bytes.
    pub fn weight_ratio(&self) -> f64 {
        if self.weight_bytes == 0 {
            1.0
        } else {
            self.fp_weight_bytes as f64 / self.weight_bytes as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub layers: Vec<LayerSize>,
    /// Sum of layer payloads.
    pub payload_bytes: usize,
    /// Payload bytes of the same model with every layer in full precision.
    pub fp_bytes: usize,
    /// Header, record headers and checksum.
    pub overhead_bytes: usize,
}

impl SizeReport {
    pub fn ratio(&self) -> f64 {
        self.fp_bytes as f64 / self.payload_bytes as f64
    }

    pub fn file_bytes(&self) -> usize {
        self.payload_bytes + self.overhead_bytes
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<8} {:<11} {:>12} {:>12} {:>10} {:>8}\n",
            "layer", "kind", "payload", "fp-payload", "weights", "w-ratio"
        );
        for l in &self.layers {
            if l.payload_bytes() == 0 {
                continue;
            }
            s += &format!(
                "{:<8} {:<11} {:>12} {:>12} {:>10} {:>8.2}\n",
                l.name,
                l.kind.name(),
                l.payload_bytes(),
                l.fp_weight_bytes + l.aux_bytes,
                l.weight_bytes,
                l.weight_ratio()
            );
        }
        s += &format!(
            "total payload {} bytes (full precision {}), overhead {} bytes, file {} bytes, ratio {:.2}x\n",
            self.payload_bytes,
            self.fp_bytes,
            self.overhead_bytes,
            self.file_bytes(),
            self.ratio()
        );
        s
    }
}

fn layer_size(l: &Layer) -> LayerSize {
    let (mut weight_bytes, mut fp_weight_bytes, mut aux_bytes) = (0, 0, 0);
    if let (Some(c), Some(p)) = (l.spec.conv, &l.params) {
        let n = c.filter_len();
        fp_weight_bytes = 4 * n * c.c_out;
        weight_bytes = if l.spec.binarized { c.c_out * (packed_len(n) + 4) } else { fp_weight_bytes };
        aux_bytes = 4 * c.c_out * (p.bias.is_some() as usize + 4 * p.bn.is_some() as usize);
    }
    LayerSize {
        name: l.spec.name.clone(),
        kind: l.spec.kind,
        binarized: l.spec.binarized,
        weight_bytes,
        fp_weight_bytes,
        aux_bytes,
    }
}

fn record_overhead(l: &Layer) -> usize {
    let dims = if l.spec.conv.is_some() { 4 } else { 0 };
    let conv = if l.spec.conv.is_some() { 8 } else { 0 };
    2 + l.spec.name.len() + 1 + 1 + 1 + 2 * l.spec.inputs.len() + 1 + 4 * dims + conv + 1 + 4
}

fn header_len(meta: &ModelMeta) -> usize {
    4 + 2 + 2 + 16 + 2 + 16 * meta.anchors.len() + 2
}

/// Per-layer and total bytes of the model as [`write_model`] stores it.
pub fn size_report(model: &Model) -> SizeReport {
    let layers: Vec<LayerSize> = model.layers.iter().map(layer_size).collect();
    let payload_bytes = layers.iter().map(LayerSize::payload_bytes).sum();
    let fp_bytes = layers.iter().map(|l| l.fp_weight_bytes + l.aux_bytes).sum();
    let overhead_bytes = header_len(&model.meta) + model.layers.iter().map(record_overhead).sum::<usize>() + 4;
    SizeReport { layers, payload_bytes, fp_bytes, overhead_bytes }
}

fn put_u16(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u16::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit the model format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn payload(l: &Layer) -> Result<Vec<u8>> {
    let Some(p) = &l.params else { return Ok(Vec::new()) };
    let mut out = Vec::new();
    if l.spec.binarized {
        let filters = binarize_layer(&p.weight)?;
        for f in &filters {
            out.extend_from_slice(&f.bits);
        }
        for f in &filters {
            out.extend_from_slice(&f.alpha.to_le_bytes());
        }
    } else {
        put_f32s(&mut out, &p.weight);
    }
    if let Some(b) = &p.bias {
        put_f32s(&mut out, b);
    }
    if let Some(bn) = &p.bn {
        for t in [&bn.gamma, &bn.beta, &bn.mean, &bn.var] {
            put_f32s(&mut out, t);
        }
    }
    Ok(out)
}

/// Encodes a model; binarized layers store their current `(bits, α)`.
pub fn write_model(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u16(&mut out, model.layers.len(), "layer count")?;
    let m = &model.meta;
    for v in [m.classes, m.input.0, m.input.1, m.input.2] {
        put_u32(&mut out, v)?;
    }
    put_u16(&mut out, m.anchors.len(), "anchor count")?;
    for &(w, h) in &m.anchors {
        out.extend_from_slice(&w.to_le_bytes());
        out.extend_from_slice(&h.to_le_bytes());
    }
    match model.stage {
        Some(s) if s < NO_STAGE as usize => put_u16(&mut out, s, "stage")?,
        Some(s) => return Err(Error::invalid(format!("stage index {s} does not fit the model format"))),
        None => out.extend_from_slice(&NO_STAGE.to_le_bytes()),
    }
    for l in &model.layers {
        let s = &l.spec;
        put_u16(&mut out, s.name.len(), "layer name length")?;
        out.extend_from_slice(s.name.as_bytes());
        out.push(s.kind.tag());
        out.push(s.group.tag());
        out.push(s.inputs.len() as u8);
        for src in &s.inputs {
            match *src {
                Source::Image => out.extend_from_slice(&IMAGE_SOURCE.to_le_bytes()),
                Source::Layer(j) => put_u16(&mut out, j, "input index")?,
            }
        }
        match s.conv {
            Some(c) => {
                out.push(4);
                for d in c.weight_shape() {
                    put_u32(&mut out, d)?;
                }
                put_u32(&mut out, c.stride)?;
                put_u32(&mut out, c.pad)?;
            }
            None => out.push(0),
        }
        let flags = l
            .params
            .as_ref()
            .map_or(0, |p| (if p.bias.is_some() { FLAG_BIAS } else { 0 }) | (if p.bn.is_some() { FLAG_BN } else { 0 }));
        out.push(flags);
        let body = payload(l)?;
        put_u32(&mut out, body.len())?;
        out.extend_from_slice(&body);
    }
    let crc = crc32fast::hash(&out[MAGIC.len()..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, shape: &[usize], what: &str) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(4 * n, what)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape, data)
    }

    fn bad(&self, detail: impl Into<String>) -> Error {
        Error::format(self.path, detail)
    }
}

/// Decodes a model file. `path` only labels errors.
pub fn read_model(bytes: &[u8], path: &Path) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::format(path, format!("{} bytes is too short for a model file", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad magic, expected BWNM"));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[MAGIC.len()..body_end]);
    if stored != computed {
        return Err(Error::Checksum { path: path.display().to_string(), stored, computed });
    }
    let mut r = Reader { bytes: &bytes[..body_end], pos: 4, path };
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(r.bad(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u16("layer count")? as usize;
    let classes = r.u32("class count")?;
    let input = (r.u32("input channels")?, r.u32("input height")?, r.u32("input width")?);
    let n_anchors = r.u16("anchor count")? as usize;
    let mut anchors = Vec::with_capacity(n_anchors);
    for _ in 0..n_anchors {
        anchors.push((r.f64("anchor")?, r.f64("anchor")?));
    }
    let stage = match r.u16("stage")? {
        NO_STAGE => None,
        s => Some(s as usize),
    };
    let mut layers = Vec::with_capacity(count);
    for li in 0..count {
        let name_len = r.u16("layer name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "layer name")?.to_vec())
            .map_err(|_| r.bad(format!("layer {li} name is not UTF-8")))?;
        let kind_tag = r.u8("kind")?;
        let kind =
            LayerKind::from_tag(kind_tag).ok_or_else(|| r.bad(format!("layer {name}: unknown kind tag {kind_tag}")))?;
        let group_tag = r.u8("group")?;
        let group =
            Group::from_tag(group_tag).ok_or_else(|| r.bad(format!("layer {name}: unknown group tag {group_tag}")))?;
        let n_in = r.u8("input count")? as usize;
        let mut inputs = Vec::with_capacity(n_in);
        for _ in 0..n_in {
            inputs.push(match r.u16("input")? {
                IMAGE_SOURCE => Source::Image,
                j => Source::Layer(j as usize),
            });
        }
        let ndim = r.u8("dimension count")? as usize;
        let dims: Vec<usize> = (0..ndim).map(|_| r.u32("dimension")).collect::<Result<_>>()?;
        let conv = if kind.is_conv() {
            let [c_out, c_in, kh, kw] = dims[..] else {
                return Err(r.bad(format!("layer {name}: conv needs 4 dimensions, found {ndim}")));
            };
            if kh != kw || c_out == 0 || c_in == 0 || kh == 0 {
                return Err(r.bad(format!("layer {name}: unsupported kernel {dims:?}")));
            }
            let (stride, pad) = (r.u32("stride")?, r.u32("pad")?);
            Some(ConvSpec { c_in, c_out, kernel: kh, stride, pad })
        } else if ndim != 0 {
            return Err(r.bad(format!("layer {name}: {} layer with dimensions", kind.name())));
        } else {
            None
        };
        let flags = r.u8("flags")?;
        let len = r.u32("payload length")?;
        let start = r.pos;
        let binarized = kind == LayerKind::ConvBin;
        let params = match conv {
            None => None,
            Some(c) => {
                let shape = c.weight_shape();
                let weight = if binarized {
                    let n = c.filter_len();
                    let bits = r.take(c.c_out * packed_len(n), "sign bits")?;
                    let alphas = r.f32s(&[c.c_out], "filter scales")?;
                    let mut w = Vec::with_capacity(c.c_out * n);
                    for (f, chunk) in bits.chunks_exact(packed_len(n)).enumerate() {
                        let a = alphas.data()[f];
                        if !(a >= 0.0 && a.is_finite()) {
                            return Err(r.bad(format!("layer {name}: filter {f} has invalid scale {a}")));
                        }
                        w.extend(unpack_bits(chunk, n).into_iter().map(|s| a * f32::from(s)));
                    }
                    Tensor::new(&shape, w)?
                } else {
                    r.f32s(&shape, "weights")?
                };
                let bias = if flags & FLAG_BIAS != 0 { Some(r.f32s(&[c.c_out], "bias")?) } else { None };
                let bn = if flags & FLAG_BN != 0 {
                    Some(BatchNorm {
                        gamma: r.f32s(&[c.c_out], "bn scale")?,
                        beta: r.f32s(&[c.c_out], "bn shift")?,
                        mean: r.f32s(&[c.c_out], "bn mean")?,
                        var: r.f32s(&[c.c_out], "bn variance")?,
                    })
                } else {
                    None
                };
                Some(ConvParams { weight, bias, bn })
            }
        };
        if r.pos - start != len {
            return Err(r.bad(format!("layer {name}: payload length {len} but {} bytes decoded", r.pos - start)));
        }
        layers.push(Layer { spec: LayerSpec { name, kind, group, inputs, conv, binarized }, params });
    }
    if r.pos != body_end {
        return Err(r.bad(format!("{} trailing bytes after the last layer", body_end - r.pos)));
    }
    let model = Model { layers, meta: ModelMeta { classes, anchors, input }, stage };
    model.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(model)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let bytes = write_model(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::super::{build_minidark, default_schedule, DEFAULT_ANCHORS};
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem.bwnm")
    }

    fn m2() -> Model {
        let mut m = build_minidark(3, &DEFAULT_ANCHORS, 9).unwrap();
        m.apply_stage(&default_schedule(), 2).unwrap();
        m
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for model in [build_minidark(3, &DEFAULT_ANCHORS, 2).unwrap(), m2()] {
            let a = write_model(&model).unwrap();
            let back = read_model(&a, p()).unwrap();
            assert_eq!(write_model(&back).unwrap(), a);
            assert_eq!(back.binarized_snapshot().unwrap(), model.binarized_snapshot().unwrap());
            assert_eq!(back.stage, model.stage);
        }
        let fp = build_minidark(3, &DEFAULT_ANCHORS, 2).unwrap();
        assert_eq!(read_model(&write_model(&fp).unwrap(), p()).unwrap(), fp);
    }

    #[test]
    fn binarized_layer_payload_arithmetic() {
        let m = m2();
        let conv7 = size_report(&m).layers.into_iter().find(|l| l.name == "conv7").unwrap();
        assert_eq!(conv7.weight_bytes, 128 * 1152 / 8 + 128 * 4);
        assert_eq!(conv7.weight_bytes, 18_944);
        assert_eq!(conv7.fp_weight_bytes, 589_824);
        assert!((conv7.weight_ratio() - 31.13).abs() < 0.01);
    }

    #[test]
    fn report_matches_file() {
        for model in [build_minidark(3, &DEFAULT_ANCHORS, 2).unwrap(), m2()] {
            let r = size_report(&model);
            assert_eq!(r.file_bytes(), write_model(&model).unwrap().len());
        }
        assert_eq!(size_report(&build_minidark(3, &DEFAULT_ANCHORS, 2).unwrap()).ratio(), 1.0);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = write_model(&m2()).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        let err = read_model(&bytes, p()).unwrap_err();
        assert!(matches!(err, Error::Checksum { .. }), "{err}");
        assert!(read_model(&bytes[..3], p()).is_err());
        let mut bad_magic = write_model(&m2()).unwrap();
        bad_magic[0] = b'X';
        assert!(read_model(&bad_magic, p()).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn truncation_and_version_are_reported() {
        let good = write_model(&m2()).unwrap();
        let mut cut = good[..good.len() - 100].to_vec();
        let crc = crc32fast::hash(&cut[4..]);
        cut.extend_from_slice(&crc.to_le_bytes());
        assert!(read_model(&cut, p()).unwrap_err().to_string().contains("truncated"));
        let mut v2 = good[..good.len() - 4].to_vec();
        v2[4] = 2;
        let crc = crc32fast::hash(&v2[4..]);
        v2.extend_from_slice(&crc.to_le_bytes());
        assert!(read_model(&v2, p()).unwrap_err().to_string().contains("version"));
    }
}
