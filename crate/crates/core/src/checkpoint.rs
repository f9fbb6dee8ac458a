//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "MVLTCKPT"
//! version  u32      1
//! width    u8       bytes per element (4 = f32, 8 = f64)
//! header   u64 length + UTF-8 text (run configuration)
//! count    u64
//! entries  count × { u32 name length, name, u32 rank, rank × u64 dims, payload }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

const MAGIC: &[u8; 8] = b"MVLTCKPT";
pub const VERSION: u32 = 1;
const ELEMENT_WIDTH: u8 = std::mem::size_of::<Float>() as u8;

/// Upper bounds that reject corrupt length fields before allocating.
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: String,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(header: impl Into<String>, store: &ParamStore) -> Self {
        Checkpoint {
            header: header.into(),
            entries: store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[ELEMENT_WIDTH])?;
        w.write_all(&(self.header.len() as u64).to_le_bytes())?;
        w.write_all(self.header.as_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut width = [0u8];
        read_exact(&mut r, &mut width)?;
        let width = width[0];
        if width != 4 && width != 8 {
            return Err(Error::Checkpoint(format!("unsupported element width {width}")));
        }
        let header_len = read_u64(&mut r)? as usize;
        let header = String::from_utf8(read_vec(&mut r, header_len)?)
            .map_err(|_| bad("header is not UTF-8"))?;
        let count = read_u64(&mut r)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > MAX_NAME {
                return Err(bad("parameter name too long"));
            }
            let name = String::from_utf8(read_vec(&mut r, name_len)?)
                .map_err(|_| bad("parameter name is not UTF-8"))?;
            let rank = read_u32(&mut r)? as usize;
            if rank > MAX_RANK {
                return Err(Error::Checkpoint(format!("{name}: rank {rank} too large")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let bytes = read_vec(&mut r, numel * width as usize)?;
            let data = decode(&bytes, width);
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { header, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

fn decode(bytes: &[u8], width: u8) -> Vec<Float> {
    if width == 4 {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Float)
            .collect()
    } else {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Float)
            .collect()
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))
}

fn read_vec(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(len as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if buf.len() != len {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Outcome of copying checkpoint entries into a parameter store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Store parameters with no entry in the checkpoint.
    pub missing: Vec<String>,
    /// Checkpoint entries with no parameter of that name.
    pub unexpected: Vec<String>,
    /// `(name, store shape, checkpoint shape)`.
    pub mismatched: Vec<(String, Vec<usize>, Vec<usize>)>,
}

impl LoadReport {
    pub fn is_exact(&self) -> bool {
        self.missing.is_empty() && self.unexpected.is_empty() && self.mismatched.is_empty()
    }
}

/// Copies every entry whose name and shape match a parameter in `store`,
/// reporting the rest. Used both for resuming and for external
/// pre-trained weights that cover only part of the model.
pub fn load_matching(store: &mut ParamStore, ckpt: &Checkpoint) -> LoadReport {
    let mut report = LoadReport::default();
    let mut seen = vec![false; store.len()];
    for (name, tensor) in &ckpt.entries {
        match store.id(name) {
            None => report.unexpected.push(name.clone()),
            Some(id) => {
                let param = store.get_mut(id);
                if param.value.shape() == tensor.shape() {
                    param.value = tensor.clone();
                    report.loaded.push(name.clone());
                    seen[id.index()] = true;
                } else {
                    report.mismatched.push((
                        name.clone(),
                        param.value.shape().to_vec(),
                        tensor.shape().to_vec(),
                    ));
                }
            }
        }
    }
    report.missing = store
        .iter()
        .filter(|(id, _)| !seen[id.index()])
        .map(|(_, p)| p.name.clone())
        .collect();
    report
}

/// Strict load: every parameter must be present with the right shape.
pub fn load_exact(store: &mut ParamStore, ckpt: &Checkpoint) -> Result<()> {
    let report = load_matching(store, ckpt);
    if report.is_exact() {
        Ok(())
    } else {
        Err(Error::Checkpoint(format!(
            "checkpoint does not match model: {} missing, {} unexpected, {} shape mismatches",
            report.missing.len(),
            report.unexpected.len(),
            report.mismatched.len()
        )))
    }
}
