//! `AGK1` binary checkpoints.
//!
//! Layout: the magic `AGK1`, then per parameter: name length (u32 LE), UTF-8
//! name, rank (u8), extents (u32 LE each), values (f64 LE). Entries run to the
//! end of the file.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"AGK1";

/// Buffers are tagged by name suffix so a loaded store knows which entries to train.
fn kind_for(name: &str) -> ParamKind {
    if name.ends_with(".running_mean") || name.ends_with(".running_var") {
        ParamKind::Buffer
    } else {
        ParamKind::Trainable
    }
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = p.value.shape();
        let rank = shape.rank();
        out.push(rank as u8);
        for d in &shape.dims()[..rank] {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic, expected AGK1".into()));
    }
    let mut cur = Cursor { buf: bytes, pos: 4 };
    let mut store = ParamStore::new();
    while cur.pos < bytes.len() {
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cur.take(1, "rank")?[0] as usize;
        if rank > 4 {
            return Err(Error::Checkpoint(format!("`{name}` has rank {rank} > 4")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32("extent")? as usize);
        }
        let shape = Shape::from_dims(&dims)?;
        let raw = cur.take(shape.numel() * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let kind = kind_for(&name);
        store.insert(name, Tensor::new(shape, data)?, kind);
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(store))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Copies checkpoint values into `target`, requiring the same names and shapes.
pub fn restore_into(target: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    for name in target.names().map(str::to_string).collect::<Vec<_>>() {
        let src = loaded.get(&name)?;
        let dst = target.get_mut(&name)?;
        if src.shape() != dst.shape() {
            return Err(Error::ParameterShape {
                name,
                expected: dst.shape(),
                actual: src.shape(),
            });
        }
        *dst = src.clone();
    }
    if let Some(extra) = loaded.names().find(|n| !target.contains(n)) {
        return Err(Error::UnknownParameter(extra.to_string()));
    }
    Ok(())
}
