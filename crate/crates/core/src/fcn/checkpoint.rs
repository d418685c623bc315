//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "FCNW"            magic
//! u16               format version (1)
//! u8                variant id (1 stacked, 2 multichannel, 3 image)
//! u8                activation id (0 relu, 1 identity)
//! u32 u32 u32 u32   C, layer count, T, L
//! f64 f64           batch-norm epsilon, momentum
//! (u32 u32 u32)*    per layer: filters, kernel, stride
//! f32*              per layer: conv weights, conv bias, gamma, beta,
//!                   running mean, running variance; then dense weights
//!                   (M × C row-major), dense bias
//! u32               CRC32 of every preceding byte
//! ```
//!
//! Even kernels use "same" padding with the odd unit on the trailing side.

use std::fs;
use std::path::Path;

use super::batchnorm::BnConfig;
use super::model::{build_model, Activation, FcnModel, LayerSpec, ModelConfig, Variant};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FCNW";
pub const VERSION: u16 = 1;

pub fn encode_checkpoint(model: &FcnModel<f32>) -> Vec<u8> {
    let cfg = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(cfg.variant.id());
    out.push(cfg.activation.id());
    for v in [cfg.class_count, cfg.layers.len(), cfg.t, cfg.l] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.bn.epsilon.to_le_bytes());
    out.extend_from_slice(&cfg.bn.momentum.to_le_bytes());
    for ls in &cfg.layers {
        for v in [ls.filters, ls.kernel, ls.stride] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }
    for arr in model.all_arrays() {
        for v in arr {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn write_checkpoint(model: &FcnModel<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt {
                path: self.path.to_path_buf(),
                reason: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<FcnModel<f32>> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    if bytes.len() < 4 + 2 + 4 {
        return Err(corrupt("truncated header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader { buf: body, pos: 4, path };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version as u32,
            expected: VERSION as u32,
        });
    }
    let stored_crc = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(corrupt("checksum mismatch (truncated or modified file)".into()));
    }
    let variant_id = r.u8()?;
    let variant = Variant::from_id(variant_id).ok_or_else(|| corrupt(format!("unknown variant id {variant_id}")))?;
    let act_id = r.u8()?;
    let activation =
        Activation::from_id(act_id).ok_or_else(|| corrupt(format!("unknown activation id {act_id}")))?;
    let class_count = r.u32()?;
    let layer_count = r.u32()?;
    let t = r.u32()?;
    let l = r.u32()?;
    let bn = BnConfig {
        epsilon: r.f64()?,
        momentum: r.f64()?,
    };
    if layer_count > 64 {
        return Err(corrupt(format!("implausible layer count {layer_count}")));
    }
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        layers.push(LayerSpec::new(r.u32()?, r.u32()?, r.u32()?));
    }
    let config = ModelConfig {
        variant,
        layers,
        class_count,
        t,
        l,
        bn,
        activation,
    };
    let mut model = build_model::<f32>(config, 0).map_err(|e| corrupt(format!("inconsistent architecture: {e}")))?;
    let expected: usize = model.all_arrays().iter().map(|a| a.len()).sum();
    let remaining = body.len() - r.pos;
    if remaining != expected * 4 {
        return Err(corrupt(format!(
            "parameter block has {remaining} bytes, architecture needs {}",
            expected * 4
        )));
    }
    for arr in model.all_arrays_mut() {
        for v in arr.iter_mut() {
            *v = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
        }
    }
    if model
        .blocks
        .iter()
        .any(|b| b.running_var.iter().any(|&v| !(v >= 0.0)))
    {
        return Err(corrupt("negative running variance".into()));
    }
    Ok(model)
}

pub fn read_checkpoint(path: &Path) -> Result<FcnModel<f32>> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes, path)
}
