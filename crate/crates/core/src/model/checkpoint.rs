//! Versioned little-endian checkpoint format. See `docs/checkpoint-format.md`.

use std::collections::BTreeSet;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Architecture, ModelConfig, ModelGraph, DEPTH};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::RngStream;
use crate::tensor::{DType, Element, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"NUMSCKPT";

/// A model plus the optimizer state needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelGraph<T>,
    pub optimizer: Option<AdamState<T>>,
    /// Completed training epochs.
    pub epoch: u64,
}

impl<T: Element> Checkpoint<T> {
    pub fn new(model: ModelGraph<T>) -> Self {
        Checkpoint { model, optimizer: None, epoch: 0 }
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn put_u8(out: &mut Vec<u8>, v: u8) {
    out.push(v);
}
fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_values<T: Element>(out: &mut Vec<u8>, values: &[T]) {
    put_u8(out, T::DTYPE.code());
    put_u64(out, values.len() as u64);
    for &v in values {
        v.write_le(out);
    }
}

/// Serialises `ckpt` to bytes.
pub fn write_checkpoint<T: Element>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let cfg = ckpt.model.config();
    put_u8(&mut out, cfg.arch.code());
    put_u32(&mut out, cfg.num_classes as u32);
    put_u8(&mut out, u8::from(cfg.batch_norm) | (u8::from(cfg.deep_supervision) << 1));
    for &w in &cfg.widths {
        put_u32(&mut out, w as u32);
    }
    put_f64(&mut out, cfg.dropout);
    put_f64(&mut out, cfg.bn_momentum);
    put_f64(&mut out, cfg.bn_eps);
    put_u64(&mut out, ckpt.epoch);

    let params = ckpt.model.params();
    put_u32(&mut out, params.len() as u32);
    for p in params {
        put_u16(&mut out, p.name.len() as u16);
        out.extend_from_slice(p.name.as_bytes());
        put_u8(&mut out, T::DTYPE.code());
        put_u8(&mut out, p.value.shape().len() as u8);
        for &d in p.value.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }

    match &ckpt.optimizer {
        None => put_u8(&mut out, 0),
        Some(opt) => {
            put_u8(&mut out, 1);
            let c = opt.config;
            for v in [c.lr, c.beta1, c.beta2, c.eps] {
                put_f64(&mut out, v);
            }
            put_u64(&mut out, opt.step_count());
            put_u32(&mut out, params.len() as u32);
            for i in 0..params.len() {
                match opt.moments(i) {
                    None => put_u8(&mut out, 0),
                    Some((m, v)) => {
                        put_u8(&mut out, 1);
                        put_values(&mut out, m);
                        put_values(&mut out, v);
                    }
                }
            }
        }
    }
    let sum = checksum(&out);
    put_u64(&mut out, sum);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("unexpected end of data while reading {what}")));
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
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn dtype(&mut self, what: &str) -> Result<DType> {
        let code = self.u8(what)?;
        DType::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code} in {what}")))
    }

    /// Reads `n` elements stored as `dtype`, converting to `T`.
    fn elements<T: Element>(&mut self, dtype: DType, n: usize, what: &str) -> Result<Vec<T>> {
        let size = dtype.size_bytes();
        let raw = self.take(n.checked_mul(size).ok_or_else(|| Error::Checkpoint(format!("{what} too large")))?, what)?;
        Ok(raw
            .chunks_exact(size)
            .map(|c| match dtype {
                DType::F32 => T::from_f64(f32::read_le(c).to_f64()),
                DType::F64 => T::from_f64(f64::read_le(c)),
            })
            .collect())
    }

    fn values<T: Element>(&mut self, what: &str) -> Result<Vec<T>> {
        let dtype = self.dtype(what)?;
        let n = self.u64(what)? as usize;
        self.elements(dtype, n, what)
    }
}

/// Parses bytes produced by [`write_checkpoint`].
pub fn read_checkpoint<T: Element>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Checkpoint(format!("{} bytes is too short for a checkpoint", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = checksum(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let arch_code = r.u8("architecture")?;
    let arch = Architecture::from_code(arch_code)
        .ok_or_else(|| Error::Checkpoint(format!("unknown architecture code {arch_code}")))?;
    let num_classes = r.u32("class count")? as usize;
    let flags = r.u8("flags")?;
    let mut widths = [0usize; DEPTH];
    for w in widths.iter_mut() {
        *w = r.u32("widths")? as usize;
    }
    let config = ModelConfig {
        arch,
        widths,
        num_classes,
        batch_norm: flags & 1 != 0,
        deep_supervision: flags & 2 != 0,
        dropout: r.f64("dropout")?,
        bn_momentum: r.f64("batch-norm momentum")?,
        bn_eps: r.f64("batch-norm eps")?,
    };
    let epoch = r.u64("epoch")?;
    let mut model = ModelGraph::<T>::build(config, &RngStream::new(0))?;

    let count = r.u32("record count")? as usize;
    let mut seen = BTreeSet::new();
    for _ in 0..count {
        let len = r.u16("record name")? as usize;
        let name = std::str::from_utf8(r.take(len, "record name")?)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
            .to_string();
        let dtype = r.dtype(&name)?;
        let rank = r.u8(&name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&name)? as usize);
        }
        let idx = model
            .param_index(&name)
            .ok_or_else(|| Error::ArchitectureMismatch(format!("record `{name}` has no counterpart in {arch}")))?;
        let expected = model.params()[idx].value.shape().to_vec();
        if shape != expected {
            return Err(Error::RecordShapeMismatch { name, found: shape, expected });
        }
        let n = shape.iter().product();
        let data = r.elements::<T>(dtype, n, &name)?;
        model.params_mut()[idx].value = Tensor::new(shape, data)?;
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate record `{name}`")));
        }
    }
    if let Some(missing) = model.params().iter().find(|p| !seen.contains(&p.name)) {
        return Err(Error::Checkpoint(format!("missing record `{}`", missing.name)));
    }

    let optimizer = match r.u8("optimizer flag")? {
        0 => None,
        1 => {
            let config = AdamConfig {
                lr: r.f64("adam lr")?,
                beta1: r.f64("adam beta1")?,
                beta2: r.f64("adam beta2")?,
                eps: r.f64("adam eps")?,
            };
            let step = r.u64("adam step")?;
            let slots = r.u32("adam slots")? as usize;
            if slots != model.params().len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer has {slots} slots for {} parameters",
                    model.params().len()
                )));
            }
            let mut moments = Vec::with_capacity(slots);
            for i in 0..slots {
                moments.push(match r.u8("adam slot flag")? {
                    0 => None,
                    _ => {
                        let m = r.values::<T>("adam first moment")?;
                        let v = r.values::<T>("adam second moment")?;
                        let n = model.params()[i].value.numel();
                        if m.len() != n || v.len() != n {
                            return Err(Error::Checkpoint(format!(
                                "optimizer moments for `{}` have the wrong length",
                                model.params()[i].name
                            )));
                        }
                        Some((m, v))
                    }
                });
            }
            Some(AdamState::restore(config, step, moments))
        }
        f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
    };
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Checkpoint { model, optimizer, epoch })
}

pub fn save_checkpoint<T: Element>(path: impl AsRef<Path>, ckpt: &Checkpoint<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Element>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_numsnet;

    fn sample() -> Checkpoint<f32> {
        let cfg = ModelConfig::new(Architecture::Numsnet, 3).with_widths([2, 3, 4, 5, 6]);
        let model = ModelGraph::build(cfg, &RngStream::new(8)).unwrap();
        let mut opt = AdamState::new(AdamConfig::default());
        let mut params: Vec<Tensor<f32>> = model.params().iter().map(|p| p.value.clone()).collect();
        let grads: Vec<Tensor<f32>> = params.iter().map(|p| p.map(|v| v * 0.5 + 0.1)).collect();
        opt.step(params.iter_mut().zip(grads.iter()).enumerate().map(|(i, (p, g))| (p, (i % 3 != 0).then_some(g))))
            .unwrap();
        Checkpoint { model, optimizer: Some(opt), epoch: 4 }
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample();
        let back: Checkpoint<f32> = read_checkpoint(&write_checkpoint(&ckpt)).unwrap();
        assert_eq!(back, ckpt);
        let plain = Checkpoint::new(build_numsnet::<f64>(2, &RngStream::new(1)).unwrap());
        assert_eq!(read_checkpoint::<f64>(&write_checkpoint(&plain)).unwrap(), plain);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = sample();
        save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(load_checkpoint::<f32>(&path).unwrap(), ckpt);
        assert!(matches!(load_checkpoint::<f32>(dir.path().join("none")), Err(Error::Io { .. })));
    }

    #[test]
    fn truncation_and_corruption_fail_the_checksum() {
        let bytes = write_checkpoint(&sample());
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(read_checkpoint::<f32>(cut), Err(Error::ChecksumMismatch { .. })));
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(read_checkpoint::<f32>(&flipped), Err(Error::ChecksumMismatch { .. })));
        assert!(matches!(read_checkpoint::<f32>(&bytes[..4]), Err(Error::Checkpoint(_))));
    }

    fn reseal(mut body: Vec<u8>) -> Vec<u8> {
        let sum = checksum(&body);
        body.extend_from_slice(&sum.to_le_bytes());
        body
    }

    #[test]
    fn version_and_shape_errors_are_distinct() {
        let bytes = write_checkpoint(&sample());
        let mut body = bytes[..bytes.len() - 8].to_vec();
        body[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            read_checkpoint::<f32>(&reseal(body)),
            Err(Error::VersionMismatch { found: 7, expected: CHECKPOINT_VERSION })
        ));

        // Bump the first dimension of the first record.
        let mut body = bytes[..bytes.len() - 8].to_vec();
        let header = 8 + 4 + 1 + 4 + 1 + 4 * DEPTH + 8 * 3 + 8 + 4;
        let name_len = u16::from_le_bytes([body[header], body[header + 1]]) as usize;
        let dim0 = header + 2 + name_len + 2;
        body[dim0] += 1;
        assert!(matches!(read_checkpoint::<f32>(&reseal(body)), Err(Error::RecordShapeMismatch { .. })));
    }

    #[test]
    fn cross_precision_load() {
        let ckpt = sample();
        let wide: Checkpoint<f64> = read_checkpoint(&write_checkpoint(&ckpt)).unwrap();
        assert_eq!(wide.model.cast::<f32>(), ckpt.model);
    }
}
