//! Little-endian binary formats and the plain-text label file.
//!
//! * `FVFS`: u32 version, u32 T, u32 D, then T·D f64 row-major.
//! * `FVMD`: u32 version, u32 K, u32 D, u8 has_feature_layer, ν (K), ζ (K·D),
//!   μ (K·D), [W (D·D), b (D)], u32 num_classes, then per class θ
//!   ((2D+1)K + 1 values, bias last).
//! * `FVPC`: u32 version, u32 D₀, u32 d, mean (D₀), basis (d·D₀).

use std::fs;
use std::path::Path;

use crate::data_io::{FeatureSet, PcaModel};
use crate::error::{FvError, ParseErrorKind, Result};
use crate::feature_layer::FeatureLayerParams;
use crate::gmm::{RawGmmParams, DEFAULT_EPSILON};
use crate::matrix::Matrix;

const FVFS_MAGIC: [u8; 4] = *b"FVFS";
const FVMD_MAGIC: [u8; 4] = *b"FVMD";
const FVPC_MAGIC: [u8; 4] = *b"FVPC";
const VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(FvError::Parse {
                offset: self.pos,
                kind: ParseErrorKind::Truncated { needed: n, available },
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let offset = self.pos;
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(FvError::Parse { offset, kind: ParseErrorKind::BadMagic { expected, found } });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let offset = self.pos;
        let v = self.u32()?;
        if v != VERSION {
            return Err(FvError::Parse { offset, kind: ParseErrorKind::UnsupportedVersion(v) });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let offset = self.pos;
        let len = n.checked_mul(8).ok_or_else(|| FvError::Parse {
            offset,
            kind: ParseErrorKind::InvalidValue(format!("element count {n} overflows")),
        })?;
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(FvError::Parse {
                offset: self.pos,
                kind: ParseErrorKind::InvalidValue(format!(
                    "{} trailing bytes",
                    self.bytes.len() - self.pos
                )),
            });
        }
        Ok(())
    }

    fn invalid(&self, offset: usize, msg: impl Into<String>) -> FvError {
        FvError::Parse { offset, kind: ParseErrorKind::InvalidValue(msg.into()) }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| FvError::InvalidParameter(format!("{what} {n} does not fit in u32")))
}

pub fn encode_featureset(features: &FeatureSet) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + features.as_slice().len() * 8);
    out.extend_from_slice(&FVFS_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(features.len(), "point count")?);
    put_u32(&mut out, to_u32(features.dim(), "dimension")?);
    put_f64s(&mut out, features.as_slice());
    Ok(out)
}

pub fn decode_featureset(bytes: &[u8]) -> Result<FeatureSet> {
    let mut r = Reader::new(bytes);
    r.magic(FVFS_MAGIC)?;
    r.version()?;
    let header_at = r.pos;
    let t = r.u32()? as usize;
    let d = r.u32()? as usize;
    let values = r.f64s(t * d)?;
    r.finish()?;
    FeatureSet::new(t, d, values).map_err(|e| r.invalid(header_at, e.to_string()))
}

pub fn write_featureset(path: impl AsRef<Path>, features: &FeatureSet) -> Result<()> {
    fs::write(path, encode_featureset(features)?)?;
    Ok(())
}

pub fn read_featureset(path: impl AsRef<Path>) -> Result<FeatureSet> {
    decode_featureset(&fs::read(path)?)
}

/// Everything needed to encode and classify images after training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub gmm: RawGmmParams,
    pub feature_layer: Option<FeatureLayerParams>,
    /// Per-class weights over the FV space with the bias as last entry.
    pub thetas: Vec<Vec<f64>>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let k = ckpt.gmm.components();
    let d = ckpt.gmm.dim();
    let fv_len = (2 * d + 1) * k + 1;
    let mut out = Vec::new();
    out.extend_from_slice(&FVMD_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(k, "component count")?);
    put_u32(&mut out, to_u32(d, "dimension")?);
    out.push(u8::from(ckpt.feature_layer.is_some()));
    put_f64s(&mut out, &ckpt.gmm.nu);
    put_f64s(&mut out, ckpt.gmm.zeta.as_slice());
    put_f64s(&mut out, ckpt.gmm.means.as_slice());
    if let Some(layer) = &ckpt.feature_layer {
        if layer.dim() != d {
            return Err(FvError::shape("feature layer dimension differs from GMM dimension"));
        }
        put_f64s(&mut out, layer.weight.as_slice());
        put_f64s(&mut out, &layer.bias);
    }
    put_u32(&mut out, to_u32(ckpt.thetas.len(), "class count")?);
    for theta in &ckpt.thetas {
        if theta.len() != fv_len {
            return Err(FvError::shape(format!("theta has length {}, expected {fv_len}", theta.len())));
        }
        put_f64s(&mut out, theta);
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(FVMD_MAGIC)?;
    r.version()?;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let flag_at = r.pos;
    let has_layer = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(r.invalid(flag_at, format!("feature-layer flag {other}"))),
    };
    let gmm_at = r.pos;
    let nu = r.f64s(k)?;
    let zeta = Matrix::from_vec(k, d, r.f64s(k * d)?)?;
    let means = Matrix::from_vec(k, d, r.f64s(k * d)?)?;
    let gmm = RawGmmParams::new(nu, zeta, means, DEFAULT_EPSILON)
        .map_err(|e| r.invalid(gmm_at, e.to_string()))?;
    let feature_layer = if has_layer {
        let weight = Matrix::from_vec(d, d, r.f64s(d * d)?)?;
        let bias = r.f64s(d)?;
        Some(FeatureLayerParams { weight, bias })
    } else {
        None
    };
    let classes = r.u32()? as usize;
    let fv_len = (2 * d + 1) * k + 1;
    let thetas = (0..classes).map(|_| r.f64s(fv_len)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(Checkpoint { gmm, feature_layer, thetas })
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn encode_pca(model: &PcaModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&FVPC_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, to_u32(model.input_dim(), "input dimension")?);
    put_u32(&mut out, to_u32(model.output_dim(), "output dimension")?);
    put_f64s(&mut out, &model.mean);
    put_f64s(&mut out, model.basis.as_slice());
    Ok(out)
}

pub fn decode_pca(bytes: &[u8]) -> Result<PcaModel> {
    let mut r = Reader::new(bytes);
    r.magic(FVPC_MAGIC)?;
    r.version()?;
    let d0 = r.u32()? as usize;
    let d = r.u32()? as usize;
    let mean = r.f64s(d0)?;
    let basis = Matrix::from_vec(d, d0, r.f64s(d * d0)?)?;
    r.finish()?;
    Ok(PcaModel { mean, basis })
}

pub fn write_pca(path: impl AsRef<Path>, model: &PcaModel) -> Result<()> {
    fs::write(path, encode_pca(model)?)?;
    Ok(())
}

pub fn read_pca(path: impl AsRef<Path>) -> Result<PcaModel> {
    decode_pca(&fs::read(path)?)
}

/// One line of a label file: `<image-id> <±1> <±1> ...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRow {
    pub id: String,
    pub labels: Vec<i8>,
}

pub fn parse_labels(text: &str) -> Result<Vec<LabelRow>> {
    let mut rows = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let line_at = offset;
        offset += line.len();
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let id = fields.next().unwrap().to_string();
        let labels = fields
            .map(|f| match f {
                "1" | "+1" => Ok(1),
                "-1" => Ok(-1),
                other => Err(FvError::Parse {
                    offset: line_at,
                    kind: ParseErrorKind::InvalidValue(format!("label {other:?} for image {id}")),
                }),
            })
            .collect::<Result<Vec<i8>>>()?;
        if let Some(first) = rows.first().map(|r: &LabelRow| r.labels.len()) {
            if first != labels.len() {
                return Err(FvError::Parse {
                    offset: line_at,
                    kind: ParseErrorKind::InvalidValue(format!(
                        "image {id} has {} labels, expected {first}",
                        labels.len()
                    )),
                });
            }
        }
        rows.push(LabelRow { id, labels });
    }
    Ok(rows)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRow>> {
    parse_labels(&fs::read_to_string(path)?)
}

pub fn write_labels(path: impl AsRef<Path>, rows: &[LabelRow]) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&row.id);
        for y in &row.labels {
            text.push_str(if *y > 0 { " 1" } else { " -1" });
        }
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}
