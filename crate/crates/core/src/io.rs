//! Model files and metrics CSVs.
//!
//! # Model file layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "EDPM"
//! 4       4     u32 format version (1)
//! 8       4     u32 A = architecture descriptor length
//! 12      A     architecture descriptor:
//!                 u32 input rank r, r × u32 input dims,
//!                 u32 layer count, then per layer
//!                 u8 kind, u8 trainable, kind fields as u32:
//!                   0 Conv2D   out_channels kernel_h kernel_w stride
//!                   1 MaxPool2D window stride
//!                   2 Flatten
//!                   3 Dense    out_features
//!                   4 ReLU
//!                   5 Softmax
//! 12+A    4     u32 flags: bit 0 backbone, bit 1 provenance present
//! 16+A    4     u32 P = provenance length (0 or 44)
//! 20+A    P     provenance: u32 participant, u32 epochs, f64 noise
//!               multiplier, f64 clip threshold, u32 mini-batch, f64 delta,
//!               f64 epsilon
//! 20+A+P  8     u64 N = parameter count
//! 28+A+P  8N    f64 parameters, layer by layer, weight then bias
//! 28+A+P+8N 4   u32 CRC-32 (IEEE) of every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::federation::{CurvePoint, ExperimentReport, PrivateModel, Provenance};
use crate::nn::{LayerSpec, Model};
use crate::optim::DpConfig;

pub const MAGIC: &[u8; 4] = b"EDPM";
pub const FORMAT_VERSION: u32 = 1;
const FLAG_BACKBONE: u32 = 1;
const FLAG_PROVENANCE: u32 = 2;
const PROVENANCE_LEN: usize = 44;

/// A decoded model file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: Model,
    pub is_backbone: bool,
    pub provenance: Option<Provenance>,
}

impl ModelFile {
    pub fn into_private(self) -> Result<PrivateModel> {
        match (self.is_backbone, self.provenance) {
            (true, Some(provenance)) => Ok(PrivateModel { backbone: self.model, provenance }),
            _ => Err(Error::contract("model file does not hold a private backbone")),
        }
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::contract(format!("{v} does not fit in 32 bits")))
}

fn encode_architecture(model: &Model) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    put_u32(&mut buf, to_u32(model.input_shape().len())?);
    for &d in model.input_shape() {
        put_u32(&mut buf, to_u32(d)?);
    }
    put_u32(&mut buf, to_u32(model.layer_count())?);
    for (spec, &trainable) in model.specs().iter().zip(model.trainable()) {
        let (kind, fields): (u8, Vec<usize>) = match *spec {
            LayerSpec::Conv2D { out_channels, kernel_h, kernel_w, stride } => {
                (0, vec![out_channels, kernel_h, kernel_w, stride])
            }
            LayerSpec::MaxPool2D { window, stride } => (1, vec![window, stride]),
            LayerSpec::Flatten => (2, vec![]),
            LayerSpec::Dense { out_features } => (3, vec![out_features]),
            LayerSpec::ReLU => (4, vec![]),
            LayerSpec::Softmax => (5, vec![]),
        };
        buf.push(kind);
        buf.push(trainable as u8);
        for f in fields {
            put_u32(&mut buf, to_u32(f)?);
        }
    }
    Ok(buf)
}

/// Serialize a model. Refuses non-finite parameters.
pub fn encode_model(model: &Model, is_backbone: bool, provenance: Option<&Provenance>) -> Result<Vec<u8>> {
    let params = model.flat_params();
    if params.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("model parameters".into()));
    }
    let arch = encode_architecture(model)?;
    let mut buf = Vec::with_capacity(40 + arch.len() + PROVENANCE_LEN + 8 * params.len());
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    put_u32(&mut buf, to_u32(arch.len())?);
    buf.extend_from_slice(&arch);
    let mut flags = 0;
    if is_backbone {
        flags |= FLAG_BACKBONE;
    }
    if provenance.is_some() {
        flags |= FLAG_PROVENANCE;
    }
    put_u32(&mut buf, flags);
    match provenance {
        Some(p) => {
            put_u32(&mut buf, PROVENANCE_LEN as u32);
            put_u32(&mut buf, p.participant);
            put_u32(&mut buf, p.epochs);
            put_f64(&mut buf, p.dp.noise_multiplier);
            put_f64(&mut buf, p.dp.clip_threshold);
            put_u32(&mut buf, to_u32(p.dp.minibatch_size)?);
            put_f64(&mut buf, p.dp.delta);
            put_f64(&mut buf, p.epsilon);
        }
        None => put_u32(&mut buf, 0),
    }
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params {
        put_f64(&mut buf, v);
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Malformed(format!("header ends early at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_architecture(bytes: &[u8]) -> Result<(Vec<usize>, Vec<LayerSpec>, Vec<bool>)> {
    let mut r = Reader { bytes, pos: 0 };
    let rank = r.usize()?;
    if rank == 0 || rank > 8 {
        return Err(Error::Malformed(format!("input rank {rank}")));
    }
    let input = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let count = r.usize()?;
    if count > bytes.len() {
        return Err(Error::Malformed(format!("layer count {count}")));
    }
    let mut specs = Vec::with_capacity(count);
    let mut trainable = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = r.u8()?;
        let t = r.u8()?;
        if t > 1 {
            return Err(Error::Malformed(format!("trainable flag {t}")));
        }
        trainable.push(t == 1);
        specs.push(match kind {
            0 => LayerSpec::Conv2D { out_channels: r.usize()?, kernel_h: r.usize()?, kernel_w: r.usize()?, stride: r.usize()? },
            1 => LayerSpec::MaxPool2D { window: r.usize()?, stride: r.usize()? },
            2 => LayerSpec::Flatten,
            3 => LayerSpec::Dense { out_features: r.usize()? },
            4 => LayerSpec::ReLU,
            5 => LayerSpec::Softmax,
            k => return Err(Error::Malformed(format!("unknown layer kind {k}"))),
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Malformed("trailing bytes in architecture descriptor".into()));
    }
    Ok((input, specs, trainable))
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelFile> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::ModelMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let arch_len = r.usize()?;
    let arch = r.take(arch_len)?;
    let flags = r.u32()?;
    if flags & !(FLAG_BACKBONE | FLAG_PROVENANCE) != 0 {
        return Err(Error::Malformed(format!("unknown flags {flags:#x}")));
    }
    let prov_len = r.usize()?;
    let has_prov = flags & FLAG_PROVENANCE != 0;
    if prov_len != if has_prov { PROVENANCE_LEN } else { 0 } {
        return Err(Error::Malformed(format!("provenance length {prov_len}")));
    }
    let provenance = if has_prov {
        Some(Provenance {
            participant: r.u32()?,
            epochs: r.u32()?,
            dp: {
                let noise_multiplier = r.f64()?;
                let clip_threshold = r.f64()?;
                let minibatch_size = r.usize()?;
                let delta = r.f64()?;
                DpConfig { noise_multiplier, clip_threshold, minibatch_size, delta }
            },
            epsilon: r.f64()?,
        })
    } else {
        None
    };
    let declared = r.u64()? as usize;
    let available = bytes.len().saturating_sub(r.pos + 4) / 8;
    if bytes.len() < r.pos + 4 || declared != available || !(bytes.len() - r.pos - 4).is_multiple_of(8) {
        return Err(Error::PayloadShape { expected: declared, actual: available });
    }
    let body = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let (input, specs, trainable) = decode_architecture(arch)?;
    let mut model = Model::zeros(&specs, &input).map_err(|e| Error::Malformed(e.to_string()))?;
    if model.param_count() != declared {
        return Err(Error::PayloadShape { expected: model.param_count(), actual: declared });
    }
    let params: Vec<f64> = (0..declared).map(|_| r.f64()).collect::<Result<_>>()?;
    model.set_flat_params(&params)?;
    for (i, t) in trainable.into_iter().enumerate() {
        model.set_trainable(i, t);
    }
    Ok(ModelFile { model, is_backbone: flags & FLAG_BACKBONE != 0, provenance })
}

/// Write a model file; returns the number of bytes written.
pub fn save_model(model: &Model, is_backbone: bool, provenance: Option<&Provenance>, path: &Path) -> Result<usize> {
    let bytes = encode_model(model, is_backbone, provenance)?;
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}

pub fn save_private(model: &PrivateModel, path: &Path) -> Result<usize> {
    save_model(&model.backbone, true, Some(&model.provenance), path)
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

/// `%.6g`-style formatting: six significant digits, trailing zeros dropped.
pub fn fmt_sig6(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    // the exponent after rounding to six digits decides the notation
    let sci = format!("{:.5e}", v);
    let (mant, e) = sci.split_once('e').unwrap();
    let exp: i32 = e.parse().unwrap();
    if (-4..6).contains(&exp) {
        trim_zeros(format!("{:.*}", (5 - exp) as usize, v))
    } else {
        format!("{}e{}{:02}", trim_zeros(mant.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub const METRICS_HEADER: &str = "nm,nc,delta,epsilon,initial_acc,private_avg_acc,final_acc,seed,epochs,batch";
pub const CURVES_HEADER: &str = "participant,epoch,train_acc,test_acc";

pub fn metrics_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            fmt_sig6(r.noise_multiplier),
            fmt_sig6(r.clip_threshold),
            fmt_sig6(r.delta),
            fmt_sig6(r.epsilon),
            fmt_sig6(r.initial_accuracy),
            fmt_sig6(r.private_avg_accuracy),
            fmt_sig6(r.final_accuracy),
            r.seed,
            r.epochs,
            r.batch
        ));
    }
    out
}

pub fn curves_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.participant,
            p.epoch,
            fmt_sig6(p.train_accuracy),
            fmt_sig6(p.test_accuracy)
        ));
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

/// One CSV row per report.
pub fn write_metrics(reports: &[ExperimentReport], path: &Path) -> Result<()> {
    write_file(path, &metrics_csv(reports))
}

/// Per-participant, per-epoch accuracies.
pub fn write_curves(points: &[CurvePoint], path: &Path) -> Result<()> {
    write_file(path, &curves_csv(points))
}
