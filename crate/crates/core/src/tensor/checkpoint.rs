//! Named-tensor checkpoint file.
//!
//! Layout (all integers little-endian):
//!   magic "VFTN", u32 version = 1, u32 tensor count, then per tensor:
//!   u32 name length, UTF-8 name bytes, u8 rank, u64 per dim, f32 payload.
//! Save/load round trips are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VFTN";
const VERSION: u32 = 1;

/// A loaded checkpoint: ordered name -> (shape, data).
#[derive(Debug, Default, Clone)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: &Tensor) {
        self.entries
            .insert(name.into(), (tensor.shape().to_vec(), tensor.to_vec()));
    }

    pub fn insert_raw(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.entries.insert(name.into(), (shape, data));
    }

    pub fn get(&self, name: &str) -> Result<&(Vec<usize>, Vec<f32>)> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Copies a stored tensor's data into an existing tensor of equal shape.
    pub fn load_into(&self, name: &str, tensor: &Tensor) -> Result<()> {
        let (shape, data) = self.get(name)?;
        if shape.as_slice() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                shape,
                tensor.shape()
            )));
        }
        tensor.set_data(data)
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> {
        self.entries
            .keys()
            .filter(move |n| n.starts_with(prefix))
            .map(|n| n.as_str())
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, entries: &[(String, Tensor)]) -> Result<()> {
    let mut ck = Checkpoint::new();
    for (name, t) in entries {
        ck.insert(name.clone(), t);
    }
    save_checkpoint_map(path, &ck)
}

pub fn save_checkpoint_map(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.as_ref().parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(ck.entries.len() as u32).to_le_bytes());
    for (name, (shape, data)) in &ck.entries {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut pos = 0usize;

    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint {} at byte {}",
                path.display(),
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a VFTN checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());

    let mut ck = Checkpoint::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("bad tensor name: {e}")))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut pos, numel * 4)?;
        let mut data = Vec::with_capacity(numel);
        for ch in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(ch.try_into().unwrap()));
        }
        ck.entries.insert(name, (shape, data));
    }
    Ok(ck)
}
