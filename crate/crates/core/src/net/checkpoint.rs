//! Binary checkpoint container.
//!
//! ```text
//! "NTLS" | u32 version | config hash (32 bytes) | u64 step |
//! repeated: u16 name length, utf-8 name, u8 rank, u32 × rank dims, f32 LE data
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{read_file, write_file, Reader};
use crate::tensor::Mat;

const MAGIC: &[u8; 4] = b"NTLS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub step: u64,
    pub tensors: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.config_hash);
        b.extend_from_slice(&self.step.to_le_bytes());
        for (name, m) in &self.tensors {
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(2);
            b.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            b.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for &v in m.data() {
                b.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        b
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(path, bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::data_file(path, "bad magic, expected NTLS"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::data_file(
                path,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let step = r.u64()?;
        let mut tensors = Vec::new();
        while !r.finished() {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::data_file(path, "tensor name is not utf-8"))?
                .to_string();
            let rank = r.u8()?;
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let (rows, cols) = match dims[..] {
                [] => (1, 1),
                [n] => (1, n),
                [a, b] => (a, b),
                _ => return Err(Error::data_file(path, format!("tensor {name} has rank {rank} > 2"))),
            };
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(r.f32()? as f64);
            }
            tensors.push((name, Mat::from_vec(rows, cols, data)));
        }
        Ok(Checkpoint {
            config_hash,
            step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(path, &read_file(path)?)
    }
}
