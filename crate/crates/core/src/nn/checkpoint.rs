//! `EVCK` named-tensor checkpoints.
//!
//! Layout (little-endian): magic `EVCK`, u32 version, u32 tensor count, then
//! per tensor u16 name length, name bytes, u8 rank, rank × u32 dims and the
//! f32 payload; finally a u32-length-prefixed UTF-8 config blob.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EVCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub config: String,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Captures every tensor of `store`, trainable or not.
    pub fn from_store(store: &ParamStore<f32>, config: String) -> Self {
        Self {
            tensors: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            config,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.write_u32::<LittleEndian>(self.tensors.len() as u32).unwrap();
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(corrupt(format!("tensor name too long: {name}")));
            }
            if t.shape().len() > u8::MAX as usize {
                return Err(corrupt(format!("tensor rank too large: {name}")));
            }
            out.write_u16::<LittleEndian>(nb.len() as u16).unwrap();
            out.extend_from_slice(nb);
            out.write_u8(t.shape().len() as u8).unwrap();
            for &d in t.shape() {
                out.write_u32::<LittleEndian>(d as u32).unwrap();
            }
            for &v in t.data() {
                out.write_f32::<LittleEndian>(v).unwrap();
            }
        }
        out.write_u32::<LittleEndian>(self.config.len() as u32).unwrap();
        out.extend_from_slice(self.config.as_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let eof = |_| corrupt("truncated checkpoint");
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic, expected EVCK"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(eof)?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let count = r.read_u32::<LittleEndian>().map_err(eof)?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let len = r.read_u16::<LittleEndian>().map_err(eof)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(eof)?;
            let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let rank = r.read_u8().map_err(eof)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32::<LittleEndian>().map_err(eof)? as usize);
            }
            let n: usize = shape.iter().product();
            let remaining = bytes.len() - r.position() as usize;
            if n.checked_mul(4).is_none_or(|b| b > remaining) {
                return Err(corrupt(format!("truncated payload for {name}")));
            }
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(eof)?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let len = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let mut cfg = vec![0u8; len];
        r.read_exact(&mut cfg).map_err(eof)?;
        let config = String::from_utf8(cfg).map_err(|_| corrupt("config blob is not UTF-8"))?;
        if (r.position() as usize) != bytes.len() {
            return Err(corrupt("trailing bytes after config blob"));
        }
        Ok(Self { tensors, config })
    }

    /// Copies the stored tensors into `store`. Names and shapes must match
    /// exactly.
    pub fn restore(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store
                .id(name)
                .ok_or_else(|| Error::ConfigMismatch(format!("unknown tensor '{name}'")))?;
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "tensor '{name}' has shape {:?} in checkpoint, {:?} in model",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            tensors: vec![
                ("a.weight".into(), Tensor::matrix(2, 3, vec![1.0, -2.5, 3.0, 0.0, f32::MIN_POSITIVE, 7.25])),
                ("a.bias".into(), Tensor::vector(vec![0.5, -0.5, 1e-30])),
            ],
            config: "task = \"object\"\n".into(),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.encode().unwrap();
        assert_eq!(&bytes[..4], b"EVCK");
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn layout_of_first_tensor() {
        let bytes = sample().encode().unwrap();
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 8);
        assert_eq!(&bytes[14..22], b"a.weight");
        assert_eq!(bytes[22], 2);
        assert_eq!(u32::from_le_bytes(bytes[23..27].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[27..31].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(bytes[31..35].try_into().unwrap()), 1.0);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().encode().unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let c = sample();
        let mut store = ParamStore::<f32>::new();
        store.insert("a.weight", Tensor::zeros(&[2, 3]), true).unwrap();
        store.insert("a.bias", Tensor::zeros(&[3]), true).unwrap();
        c.restore(&mut store).unwrap();
        assert_eq!(store.get(store.id("a.bias").unwrap()).value.data()[0], 0.5);

        let mut wrong = ParamStore::<f32>::new();
        wrong.insert("a.weight", Tensor::zeros(&[3, 2]), true).unwrap();
        wrong.insert("a.bias", Tensor::zeros(&[3]), true).unwrap();
        assert!(matches!(c.restore(&mut wrong), Err(Error::ConfigMismatch(_))));
    }
}
