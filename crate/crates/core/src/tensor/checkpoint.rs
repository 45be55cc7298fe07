//! "PWTS" weight checkpoints: magic, layer count, then per entry a
//! length-prefixed UTF-8 name, rank, extents and a float32 payload.

use std::io::{Read, Write};

use super::Tensor;
use crate::binio::*;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PWTS";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, self)?;
        Ok(buf)
    }
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    write_magic(w, MAGIC)?;
    write_u32(w, ckpt.entries.len() as u32)?;
    for e in &ckpt.entries {
        let name = e.name.as_bytes();
        write_u32(w, name.len() as u32)?;
        w.write_all(name)?;
        write_u32(w, e.tensor.rank() as u32)?;
        for &d in e.tensor.shape() {
            write_u32(w, d as u32)?;
        }
        write_f32_slice(w, e.tensor.data())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    read_magic(r, MAGIC)?;
    let count = read_u32(r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Format(format!("checkpoint name is not UTF-8: {e}")))?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data = read_f32_vec(r, count)?;
        entries.push(NamedTensor {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    Ok(Checkpoint { entries })
}
