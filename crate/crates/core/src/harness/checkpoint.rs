//! Model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SHLA"             4 bytes
//! version            u16 (= 1)
//! kind               u32 (1 denoiser, 2 autoencoder, 3 binder)
//! metadata length    u32, then that many UTF-8 bytes
//! tensor count       u32
//! per tensor:        name length u32, name bytes, ndim u32, ndim x u64 dims
//! payload            every tensor's data as f64, in manifest order
//! checksum           u64 FNV-1a over every preceding byte
//! ```

use std::path::Path;

use crate::binder::{BinderModel, Modality};
use crate::diffusion::{Autoencoder, DenoiserModel};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::tensor::Tensor;
use crate::world::Cursor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SHLA";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Denoiser,
    Autoencoder,
    Binder,
}

impl ModelKind {
    fn tag(self) -> u32 {
        match self {
            ModelKind::Denoiser => 1,
            ModelKind::Autoencoder => 2,
            ModelKind::Binder => 3,
        }
    }

    fn from_tag(t: u32) -> Option<Self> {
        match t {
            1 => Some(ModelKind::Denoiser),
            2 => Some(ModelKind::Autoencoder),
            3 => Some(ModelKind::Binder),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Denoiser => "denoiser",
            ModelKind::Autoencoder => "autoencoder",
            ModelKind::Binder => "binder",
        }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.kind.tag().to_le_bytes());
        b.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        b.extend_from_slice(self.metadata.as_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, t) in &self.tensors {
            for x in t.data() {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        let sum = fnv1a64(&b);
        b.extend_from_slice(&sum.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 4 + 2 + 8 {
            return Err(format("truncated"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(format("bad magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let computed = fnv1a64(body);
        if stored != computed {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        let mut cur = Cursor {
            bytes: body,
            pos: 4,
            path,
        };
        let version = cur.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(cur.err(&format!("unsupported version {version}")));
        }
        let tag = cur.u32()?;
        let kind = ModelKind::from_tag(tag)
            .ok_or_else(|| cur.err(&format!("unknown model kind {tag}")))?;
        let meta_len = cur.u32()? as usize;
        let metadata = String::from_utf8(cur.take(meta_len)?.to_vec())
            .map_err(|_| cur.err("metadata is not UTF-8"))?;
        let count = cur.u32()? as usize;
        let mut manifest = Vec::new();
        for _ in 0..count {
            let n = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(n)?.to_vec())
                .map_err(|_| cur.err("tensor name is not UTF-8"))?;
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            manifest.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in manifest {
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| cur.err("bad shape"))?;
            if len > (body.len() - cur.pos) / 8 {
                return Err(cur.err("truncated payload"));
            }
            let data = cur.f64s(len)?;
            let t = Tensor::new(shape, data).map_err(|e| cur.err(&e.to_string()))?;
            tensors.push((name, t));
        }
        if cur.pos != body.len() {
            return Err(cur.err("trailing bytes"));
        }
        Ok(Checkpoint {
            kind,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, path)
    }
}

/// Models that can be written as checkpoints.
pub trait Persist: Sized {
    const KIND: ModelKind;
    fn to_tensors(&self) -> Vec<(String, Tensor)>;
    fn from_tensors(tensors: Vec<(String, Tensor)>) -> Result<Self>;
}

pub fn save_checkpoint<M: Persist>(model: &M, metadata: &str, path: &Path) -> Result<()> {
    Checkpoint {
        kind: M::KIND,
        metadata: metadata.to_string(),
        tensors: model.to_tensors(),
    }
    .save(path)
}

/// Loads a model, checking the kind tag. Returns the model and its metadata.
pub fn load_checkpoint<M: Persist>(path: &Path) -> Result<(M, String)> {
    let ck = Checkpoint::load(path)?;
    if ck.kind != M::KIND {
        return Err(Error::KindMismatch {
            expected: M::KIND.name().into(),
            found: ck.kind.name().into(),
        });
    }
    Ok((M::from_tensors(ck.tensors)?, ck.metadata))
}

fn bad(kind: ModelKind, detail: impl Into<String>) -> Error {
    Error::InvalidArgument(format!("{} checkpoint: {}", kind.name(), detail.into()))
}

/// Removes tensors named `<prefix>.<i>.weight|bias` from the front of `it`
/// and builds an MLP from them.
fn take_mlp(kind: ModelKind, tensors: &mut Vec<(String, Tensor)>, prefix: &str) -> Result<Mlp> {
    let dot = format!("{prefix}.");
    let n = tensors
        .iter()
        .take_while(|(name, _)| name.starts_with(&dot))
        .count();
    if n == 0 {
        return Err(bad(kind, format!("missing {prefix} tensors")));
    }
    let part: Vec<(String, Tensor)> = tensors.drain(..n).collect();
    for (i, (name, _)) in part.iter().enumerate() {
        let expected = format!(
            "{prefix}.{}.{}",
            i / 2,
            if i % 2 == 0 { "weight" } else { "bias" }
        );
        if *name != expected {
            return Err(bad(kind, format!("expected {expected}, found {name}")));
        }
    }
    Mlp::from_params(part.into_iter().map(|(_, t)| t).collect())
}

fn take_named(kind: ModelKind, tensors: &mut Vec<(String, Tensor)>, name: &str) -> Result<Tensor> {
    match tensors.first() {
        Some((n, _)) if n == name => Ok(tensors.remove(0).1),
        Some((n, _)) => Err(bad(kind, format!("expected {name}, found {n}"))),
        None => Err(bad(kind, format!("missing {name}"))),
    }
}

fn finish(kind: ModelKind, tensors: &[(String, Tensor)]) -> Result<()> {
    match tensors.first() {
        Some((n, _)) => Err(bad(kind, format!("unexpected tensor {n}"))),
        None => Ok(()),
    }
}

impl Persist for DenoiserModel {
    const KIND: ModelKind = ModelKind::Denoiser;

    fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut t = self.mlp().named_params("mlp");
        t.push(("class_table".into(), self.class_table().clone()));
        t
    }

    fn from_tensors(mut tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mlp = take_mlp(Self::KIND, &mut tensors, "mlp")?;
        let table = take_named(Self::KIND, &mut tensors, "class_table")?;
        finish(Self::KIND, &tensors)?;
        DenoiserModel::from_parts(mlp, table)
    }
}

impl Persist for Autoencoder {
    const KIND: ModelKind = ModelKind::Autoencoder;

    fn to_tensors(&self) -> Vec<(String, Tensor)> {
        match self {
            Autoencoder::Identity { dim } => {
                vec![("identity_dim".into(), Tensor::scalar(*dim as f64))]
            }
            Autoencoder::Affine {
                enc_w,
                enc_b,
                dec_w,
                dec_b,
            } => vec![
                ("enc_w".into(), enc_w.clone()),
                ("enc_b".into(), enc_b.clone()),
                ("dec_w".into(), dec_w.clone()),
                ("dec_b".into(), dec_b.clone()),
            ],
        }
    }

    fn from_tensors(mut tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let k = Self::KIND;
        if tensors.first().is_some_and(|(n, _)| n == "identity_dim") {
            let d = take_named(k, &mut tensors, "identity_dim")?;
            finish(k, &tensors)?;
            let dim = d.data()[0];
            if !(d.is_scalar() && dim >= 1.0 && dim.fract() == 0.0) {
                return Err(bad(k, format!("bad identity width {dim}")));
            }
            return Ok(Autoencoder::identity(dim as usize));
        }
        let enc_w = take_named(k, &mut tensors, "enc_w")?;
        let enc_b = take_named(k, &mut tensors, "enc_b")?;
        let dec_w = take_named(k, &mut tensors, "dec_w")?;
        let dec_b = take_named(k, &mut tensors, "dec_b")?;
        finish(k, &tensors)?;
        let ok = enc_w.ndim() == 2
            && dec_w.shape() == [enc_w.shape()[1], enc_w.shape()[0]]
            && enc_b.shape() == [enc_w.shape()[1]]
            && dec_b.shape() == [enc_w.shape()[0]];
        if !ok {
            return Err(bad(k, "inconsistent affine shapes"));
        }
        Ok(Autoencoder::Affine {
            enc_w,
            enc_b,
            dec_w,
            dec_b,
        })
    }
}

impl Persist for BinderModel {
    const KIND: ModelKind = ModelKind::Binder;

    fn to_tensors(&self) -> Vec<(String, Tensor)> {
        self.named_params()
    }

    fn from_tensors(mut tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let k = Self::KIND;
        let encoders = Modality::ALL
            .iter()
            .map(|m| take_mlp(k, &mut tensors, m.tag()))
            .collect::<Result<Vec<_>>>()?;
        let tau = take_named(k, &mut tensors, "tau")?;
        finish(k, &tensors)?;
        if !tau.is_scalar() {
            return Err(bad(k, "tau must be a scalar"));
        }
        BinderModel::from_parts(encoders, tau.item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<M: Persist + PartialEq + std::fmt::Debug>(m: &M) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.shla");
        save_checkpoint(m, "note", &p).unwrap();
        let (back, meta): (M, String) = load_checkpoint(&p).unwrap();
        assert_eq!(&back, m);
        assert_eq!(meta, "note");
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn models_round_trip() {
        roundtrip(&DenoiserModel::new(5, 3, 1));
        roundtrip(&Autoencoder::affine(6, 3, 2));
        roundtrip(&Autoencoder::identity(7));
        roundtrip(&BinderModel::new(6, 5, 3, 2, 0.07, 3));
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.shla");
        save_checkpoint(&DenoiserModel::new(4, 2, 1), "", &p).unwrap();
        let good = std::fs::read(&p).unwrap();

        let mut flipped = good.clone();
        let i = good.len() - 100;
        flipped[i] ^= 0x01;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped, &p),
            Err(Error::Checksum { .. })
        ));

        for cut in [0, 3, 10, good.len() / 2, good.len() - 1] {
            assert!(
                Checkpoint::from_bytes(&good[..cut], &p).is_err(),
                "cut {cut}"
            );
        }
        let r: Result<(BinderModel, String)> = load_checkpoint(&p);
        assert!(matches!(r, Err(Error::KindMismatch { .. })));
    }
}
