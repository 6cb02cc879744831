//! `PFCKPT v1` tensor archives.
//!
//! Layout: the ASCII line `PFCKPT v1\n`, a little-endian u64 entry count,
//! then per entry: u64 name length, UTF-8 name, u64 rank, rank x u64 dims and
//! the little-endian f64 data. Optimizer moments use the same framing with
//! `.m` / `.v` name suffixes.

use std::io::{Read, Write};
use std::path::Path;

use super::optim::AdamState;
use super::{ParamStore, Tensor};
use crate::{Error, Result};

const HEADER: &[u8] = b"PFCKPT v1\n";
const MAX_RANK: u64 = 8;

pub fn write_entries<W: Write>(mut out: W, entries: &[(String, &Tensor)]) -> Result<()> {
    out.write_all(HEADER)?;
    out.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, t) in entries {
        out.write_all(&(name.len() as u64).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(8 * t.len());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format("PFCKPT", "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a whole archive; nothing is returned unless every entry is valid.
pub fn read_entries<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if !bytes.starts_with(HEADER) {
        return Err(Error::format("PFCKPT", "bad header"));
    }
    let mut cur = Cursor {
        bytes: &bytes,
        pos: HEADER.len(),
    };
    let count = cur.u64()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = cur.u64()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::format("PFCKPT", "entry name is not UTF-8"))?
            .to_string();
        let rank = cur.u64()?;
        if rank > MAX_RANK {
            return Err(Error::format("PFCKPT", format!("{name}: rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::format("PFCKPT", format!("{name}: oversized shape")))?;
        let data = cur
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push((name, Tensor::new(&shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::format("PFCKPT", "trailing bytes after last entry"));
    }
    Ok(entries)
}

/// Parameters of `store` (prefixed), followed by their optimizer moments.
pub fn store_entries<'a>(
    prefix: &str,
    store: &'a ParamStore,
    adam: Option<&'a AdamState>,
) -> Vec<(String, &'a Tensor)> {
    let mut out: Vec<(String, &Tensor)> = store
        .iter()
        .map(|p| (format!("{prefix}{}", p.name), &p.value))
        .collect();
    if let Some(a) = adam {
        for (p, m) in store.iter().zip(&a.m) {
            out.push((format!("{prefix}{}.m", p.name), m));
        }
        for (p, v) in store.iter().zip(&a.v) {
            out.push((format!("{prefix}{}.v", p.name), v));
        }
    }
    out
}

/// Looks up `name` in a parsed archive.
pub fn find<'a>(entries: &'a [(String, Tensor)], name: &str) -> Option<&'a Tensor> {
    entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}

/// Fills `store` (and optionally `adam`) from entries written by
/// [`store_entries`] with the same prefix.
pub fn load_store(
    entries: &[(String, Tensor)],
    prefix: &str,
    store: &mut ParamStore,
    adam: Option<&mut AdamState>,
) -> Result<()> {
    let lookup = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let key = format!("{prefix}{name}");
        let t = find(entries, &key)
            .ok_or_else(|| Error::format("PFCKPT", format!("missing entry {key}")))?;
        if t.shape() != shape {
            return Err(Error::format(
                "PFCKPT",
                format!("{key}: shape {:?}, expected {shape:?}", t.shape()),
            ));
        }
        Ok(t.clone())
    };
    let values = store
        .iter()
        .map(|p| lookup(&p.name, p.value.shape()))
        .collect::<Result<Vec<_>>>()?;
    if let Some(a) = adam {
        let m = store
            .iter()
            .map(|p| lookup(&format!("{}.m", p.name), p.value.shape()))
            .collect::<Result<Vec<_>>>()?;
        let v = store
            .iter()
            .map(|p| lookup(&format!("{}.v", p.name), p.value.shape()))
            .collect::<Result<Vec<_>>>()?;
        a.m = m;
        a.v = v;
    }
    for (p, v) in store.iter_mut().zip(values) {
        p.value = v;
    }
    Ok(())
}

pub fn write_file(path: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    write_entries(&mut buf, entries)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_entries(std::fs::File::open(path)?)
}
