//! Binary checkpoint container. All integers and values are little-endian.
//!
//! ```text
//! magic          8 bytes  "MCBERTCK"
//! version        u32
//! dtype          u8       4 = f32, 8 = f64
//! config hash    32 bytes SHA-256 of the canonical config text
//! vocab hash     32 bytes SHA-256 of the vocabulary file
//! config text    u64 length + UTF-8 bytes
//! vocab size     u64
//! step           u64
//! flops          f64
//! rng            u64 seed, u64 step (every stream is derived from these)
//! params         u32 count, then blobs
//! adam step      u64
//! adam m, v      u32 count each, then blobs
//! ```
//!
//! A blob is `u32 name length, name, u32 ndim, u64 dims…, values`.

use std::io::{Read, Write};
use std::path::Path;

use super::{restore_model, Model, TrainConfig, Variant};
use crate::autograd::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MCBERTCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config_hash: [u8; 32],
    pub vocab_hash: [u8; 32],
    pub config_text: String,
    pub vocab_size: usize,
    pub step: u64,
    pub flops: f64,
    pub rng_seed: u64,
    pub rng_step: u64,
    pub params: Vec<(String, Tensor<T>)>,
    pub adam_step: u64,
    pub adam_m: Vec<(String, Tensor<T>)>,
    pub adam_v: Vec<(String, Tensor<T>)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_blobs<T: Scalar>(out: &mut Vec<u8>, blobs: &[(String, Tensor<T>)]) {
    put_u32(out, blobs.len() as u32);
    for (name, t) in blobs {
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.ndim() as u32);
        for &d in t.shape() {
            put_u64(out, d as u64);
        }
        for &v in t.data() {
            v.write_le(out);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn hash(&mut self) -> Result<[u8; 32]> {
        Ok(self.take(32)?.try_into().expect("32 bytes"))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }

    fn blobs<T: Scalar>(&mut self) -> Result<Vec<(String, Tensor<T>)>> {
        let count = self.u32()? as usize;
        let width = T::DTYPE.tag() as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = self.string(len)?;
            let ndim = self.u32()? as usize;
            let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("shape overflow in `{name}`")))?;
            let raw = self.take(n.checked_mul(width).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.vocab_hash);
        put_u64(&mut out, self.config_text.len() as u64);
        out.extend_from_slice(self.config_text.as_bytes());
        put_u64(&mut out, self.vocab_size as u64);
        put_u64(&mut out, self.step);
        put_u64(&mut out, self.flops.to_bits());
        put_u64(&mut out, self.rng_seed);
        put_u64(&mut out, self.rng_step);
        put_blobs(&mut out, &self.params);
        put_u64(&mut out, self.adam_step);
        put_blobs(&mut out, &self.adam_m);
        put_blobs(&mut out, &self.adam_v);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let tag = r.take(1)?[0];
        if DType::from_tag(tag) != Some(T::DTYPE) {
            return Err(Error::Checkpoint(format!(
                "stored dtype tag {tag} does not match requested {:?}",
                T::DTYPE
            )));
        }
        let config_hash = r.hash()?;
        let vocab_hash = r.hash()?;
        let len = r.u64()? as usize;
        let config_text = r.string(len)?;
        let ck = Checkpoint {
            config_hash,
            vocab_hash,
            config_text,
            vocab_size: r.u64()? as usize,
            step: r.u64()?,
            flops: f64::from_bits(r.u64()?),
            rng_seed: r.u64()?,
            rng_step: r.u64()?,
            params: r.blobs()?,
            adam_step: r.u64()?,
            adam_m: r.blobs()?,
            adam_v: r.blobs()?,
        };
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// The training configuration stored in the checkpoint, checked against
    /// its hash.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::desk(Variant::Roberta);
        c.apply_kv(&self.config_text)?;
        self.verify_config(&c.hash())?;
        Ok(c)
    }

    /// The parameters as a model of the stored configuration.
    pub fn model(&self) -> Result<Model<Tensor<T>>> {
        restore_model(&self.train_config()?, self.vocab_size, &self.params)
    }

    /// Refuses a checkpoint written under a different configuration.
    pub fn verify_config(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.config_hash != expected {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs requested {}",
                hex::encode(self.config_hash),
                hex::encode(expected)
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        let t = |s: &[usize], off: f32| {
            let n: usize = s.iter().product();
            Tensor::new(s.to_vec(), (0..n).map(|i| i as f32 * 0.37 + off).collect()).unwrap()
        };
        Checkpoint {
            config_hash: [7; 32],
            vocab_hash: [9; 32],
            config_text: "variant=mc-bert\n".into(),
            vocab_size: 40,
            step: 123,
            flops: 1.5e12,
            rng_seed: 5,
            rng_step: 123,
            params: vec![("a.weight".into(), t(&[3, 4], 0.1)), ("b".into(), t(&[5], -0.0))],
            adam_step: 123,
            adam_m: vec![("a.weight".into(), t(&[3, 4], 1e-7)), ("b".into(), t(&[5], f32::MIN_POSITIVE))],
            adam_v: vec![("a.weight".into(), t(&[3, 4], 2.0)), ("b".into(), t(&[5], 3.0))],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, ck);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        ck.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
        assert_eq!(Checkpoint::<f32>::load(&p).unwrap(), ck);
    }

    #[test]
    fn rejects_corruption_and_mismatch() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        assert!(ck.verify_config(&[7; 32]).is_ok());
        assert!(matches!(ck.verify_config(&[8; 32]), Err(Error::Checkpoint(_))));
    }
}
