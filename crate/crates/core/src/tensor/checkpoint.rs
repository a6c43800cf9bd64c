//! Flat binary checkpoint format.
//!
//! ```text
//! "MSAK1"
//! repeated until EOF:
//!   u32 LE  name length in bytes
//!   [u8]    UTF-8 name
//!   u32 LE  rank
//!   u32 LE  dim, `rank` times
//!   f32 LE  values, product(dims) times
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MSAK1";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for p in store.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    out
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let bad = |what: &str| Error::Data(format!("malformed checkpoint: {what}"));
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing MSAK1 magic"));
    }
    let mut r = &bytes[MAGIC.len()..];
    let mut entries = Vec::new();
    while !r.is_empty() {
        let len = read_u32(&mut r).map_err(|_| bad("truncated name length"))? as usize;
        if len > r.len() {
            return Err(bad("truncated name"));
        }
        let name = std::str::from_utf8(&r[..len]).map_err(|_| bad("name is not UTF-8"))?.to_string();
        r = &r[len..];
        let rank = read_u32(&mut r).map_err(|_| bad("truncated rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r).map_err(|_| bad("truncated dims"))? as usize);
        }
        let n: usize = shape.iter().product();
        if r.len() < 4 * n {
            return Err(bad(&format!("truncated values for `{name}`")));
        }
        let values = r[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        r = &r[4 * n..];
        entries.push(Entry { name, shape, values });
    }
    Ok(entries)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load_entries(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Copy checkpoint values into `store`. Every parameter of the store must be
/// present with a matching shape; the error lists all offenders.
pub fn restore<T: Scalar>(store: &mut ParamStore<T>, entries: &[Entry]) -> Result<()> {
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    for p in store.iter_mut() {
        match entries.iter().find(|e| e.name == p.name) {
            None => missing.push(p.name.clone()),
            Some(e) if e.shape != p.tensor.shape() => {
                mismatched.push(format!("{} (checkpoint {:?}, model {:?})", p.name, e.shape, p.tensor.shape()))
            }
            Some(e) => {
                p.tensor = Tensor::new(e.shape.clone(), e.values.iter().map(|&v| T::from_f32(v)).collect())?;
            }
        }
    }
    if missing.is_empty() && mismatched.is_empty() {
        return Ok(());
    }
    let mut msg = String::from("checkpoint does not match model");
    if !missing.is_empty() {
        msg.push_str(&format!("; missing parameters: {}", missing.join(", ")));
    }
    if !mismatched.is_empty() {
        msg.push_str(&format!("; shape mismatches: {}", mismatched.join(", ")));
    }
    Err(Error::Config(msg))
}
