//! Binary checkpoint format.
//!
//! ```text
//! "LBMT" | version: u32 | n_blocks: u32 |
//!   per block: name_len: u32 | name (UTF-8) | rank: u32 | extents: u32 × rank
//!              | values: f32 × product(extents)
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use super::{ParamSet, Scalar};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LBMT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub blocks: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.blocks.push((name.to_string(), shape.to_vec(), data));
    }

    pub fn push_params<T: Scalar>(&mut self, params: &ParamSet<T>) {
        for (name, t) in params.iter() {
            let data = t.data().iter().map(|v| v.as_f64() as f32).collect();
            self.push(name, t.shape(), data);
        }
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.blocks
            .iter()
            .find(|b| b.0 == name)
            .map(|b| (b.1.as_slice(), b.2.as_slice()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &e in shape {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::dataset::ByteReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        let mut ck = Checkpoint::default();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("block name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = (0..count).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            ck.blocks.push((name, shape, data));
        }
        if !r.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last block",
                r.remaining()
            )));
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let mut ck = Checkpoint::default();
        ck.push("a.weight", &[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, -0.25]);
        ck.push("model.kind", &[1], vec![2.0]);
        ck.push("scalar", &[], vec![4.0]);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"LBMT");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);

        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
    }
}
