//! Versioned binary archive of named tensors: magic `AMAE`, `u32` format
//! version, `u32` entry count, then per entry a `u16` name length, the UTF-8
//! name, a `u8` rank, `u32` dims and an `f64` little-endian payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AMAE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f64>)>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[(String, Tensor<f64>)] {
        &self.entries
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, value: &Tensor<T>) {
        let name = name.into();
        let value = value.cast();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.insert(name, &Tensor::scalar(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f64>> {
        self.get(name).ok_or_else(|| bad(format!("missing entry {name}")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.require(name)?;
        if t.len() != 1 {
            return Err(bad(format!("entry {name} is not a scalar")));
        }
        Ok(t.item())
    }

    /// Stores every parameter under `prefix` + its own name.
    pub fn insert_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (name, value) in store.iter() {
            self.insert(format!("{prefix}{name}"), value);
        }
    }

    pub fn insert_tensors<T: Scalar>(&mut self, prefix: &str, tensors: &[Tensor<T>]) {
        for (i, t) in tensors.iter().enumerate() {
            self.insert(format!("{prefix}{i}"), t);
        }
    }

    /// Overwrites every parameter of `store` from the entries written by
    /// [`Self::insert_store`] with the same prefix.
    pub fn load_store<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = format!("{prefix}{}", store.name(id));
            let t = self.require(&name)?;
            if t.shape() != store.get(id).shape() {
                return Err(bad(format!(
                    "entry {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.cast();
        }
        Ok(())
    }

    pub fn load_tensors<T: Scalar>(&self, prefix: &str, tensors: &mut [Tensor<T>]) -> Result<()> {
        for (i, slot) in tensors.iter_mut().enumerate() {
            let name = format!("{prefix}{i}");
            let t = self.require(&name)?;
            if t.shape() != slot.shape() {
                return Err(bad(format!("entry {name} has shape {:?}", t.shape())));
            }
            *slot = t.cast();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let len = u16::try_from(name.len()).map_err(|_| bad(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| bad(format!("rank too large for {name}")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| bad(format!("dimension too large for {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated file"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("missing AMAE magic"));
        }
        let u32_of = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        let version = u32_of(take(4)?);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = u32_of(take(4)?) as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nb = take(2)?;
            let len = u16::from_le_bytes([nb[0], nb[1]]) as usize;
            let name = std::str::from_utf8(take(len)?)
                .map_err(|_| bad("entry name is not UTF-8"))?
                .to_string();
            let rank = take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32_of(take(4)?) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(numel.checked_mul(8).ok_or_else(|| bad("entry too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            entries.push((name, Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))?));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(&bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut c = Checkpoint::new();
        c.insert("a.weight", &Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2));
        c.insert_scalar("step", 42.0);
        c.insert("empty", &Tensor::<f64>::zeros(&[0]));
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.scalar("step").unwrap(), 42.0);
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Checkpoint::new();
        c.insert("x", &Tensor::<f64>::ones(&[4]));
        let bytes = c.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
