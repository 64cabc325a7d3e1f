//! Binary checkpoints: named f32 tensors.
//!
//! Layout (little-endian): magic `ILCK`, u32 version, u32 entry count,
//! then per entry u32 name length, UTF-8 name, u32 rank, u32 dims and the
//! f32 values.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ILCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor<f32>)>,
}

fn bank_entry(domain: usize) -> String {
    format!("bank{domain}.prototypes")
}

impl Checkpoint {
    pub fn from_model(backbone: &Backbone<f32>, banks: &[MemoryBank<f32>]) -> Self {
        let mut entries = backbone.named_parameters().to_vec();
        entries.extend(banks.iter().map(|b| (bank_entry(b.domain()), b.prototypes().clone())));
        Checkpoint { entries }
    }

    pub fn backbone(&self) -> Result<Backbone<f32>> {
        let mut b = Backbone::new(0);
        b.load_state(&self.entries)?;
        Ok(b)
    }

    /// Stored prototypes, in domain order.
    pub fn prototypes(&self) -> Vec<&Tensor<f32>> {
        (0..)
            .map_while(|d| self.entries.iter().find(|(n, _)| *n == bank_entry(d)).map(|(_, t)| t))
            .collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(r)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            if len > 1 << 16 {
                return Err(Error::Format(format!("implausible entry name length {len}")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("entry {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            entries.push((name, Tensor::new(&shape, data)?));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(fs::File::open(path)?))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
