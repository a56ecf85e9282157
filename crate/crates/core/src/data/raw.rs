//! The on-disk tensor container shared by dataset files and checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic: 8 bytes ("LRGTEN01" for datasets, "LRGVAE01" for checkpoints)
//! meta_len: u32, then meta_len bytes of UTF-8 "key=value\n" lines
//! tensor_count: u32
//! per tensor:
//!   name_len: u32, name bytes (UTF-8)
//!   dtype: u8 (0 = f32, 1 = u8)
//!   rank: u8, then rank extents as u64
//!   raw data (little-endian f32, or bytes)
//! checksum: u64 FNV-1a over everything after the magic
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"LRGTEN01";

#[derive(Clone, Debug, PartialEq)]
pub enum RawDtype {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: RawDtype,
}

impl RawTensor {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub(crate) struct Fnv1a(pub(crate) u64);

impl Fnv1a {
    pub(crate) fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }
    pub(crate) fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

/// Writer that hashes everything it forwards.
struct HashingWriter<W: Write> {
    inner: W,
    hash: Fnv1a,
}

impl<W: Write> HashingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.hash.update(bytes);
        self.inner.write_all(bytes)?;
        Ok(())
    }
}

pub(crate) fn write_container(
    path: &Path,
    magic: &[u8; 8],
    meta: &[(String, String)],
    tensors: &[RawTensor],
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = HashingWriter {
        inner: BufWriter::new(file),
        hash: Fnv1a::new(),
    };
    w.inner.write_all(magic)?;

    let mut doc = String::new();
    for (k, v) in meta {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Checkpoint(format!(
                "metadata key/value may not contain '=' in key or newlines: {k}"
            )));
        }
        doc.push_str(k);
        doc.push('=');
        doc.push_str(v);
        doc.push('\n');
    }
    w.put(&(doc.len() as u32).to_le_bytes())?;
    w.put(doc.as_bytes())?;

    w.put(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let dlen = match &t.data {
            RawDtype::F32(v) => v.len(),
            RawDtype::U8(v) => v.len(),
        };
        if dlen != t.numel() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}`: shape {:?} wants {} elements, has {dlen}",
                t.name,
                t.shape,
                t.numel()
            )));
        }
        w.put(&(t.name.len() as u32).to_le_bytes())?;
        w.put(t.name.as_bytes())?;
        match &t.data {
            RawDtype::F32(_) => w.put(&[0u8])?,
            RawDtype::U8(_) => w.put(&[1u8])?,
        }
        w.put(&[t.shape.len() as u8])?;
        for &e in &t.shape {
            w.put(&(e as u64).to_le_bytes())?;
        }
        match &t.data {
            RawDtype::F32(v) => {
                let mut buf = Vec::with_capacity(v.len() * 4);
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
                w.put(&buf)?;
            }
            RawDtype::U8(v) => w.put(v)?,
        }
    }
    let digest = w.hash.0;
    w.inner.write_all(&digest.to_le_bytes())?;
    w.inner.flush()?;
    Ok(())
}

struct HashingReader<R: Read> {
    inner: R,
    hash: Fnv1a,
}

impl<R: Read> HashingReader<R> {
    fn take(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        self.hash.update(buf);
        Ok(())
    }
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.take(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.take(&mut b)?;
        Ok(b[0])
    }
}

type Meta = Vec<(String, String)>;

pub(crate) fn read_container(path: &Path, magic: &[u8; 8]) -> Result<(Meta, Vec<RawTensor>)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut r = HashingReader {
        inner: BufReader::new(file),
        hash: Fnv1a::new(),
    };
    let mut got_magic = [0u8; 8];
    r.inner
        .read_exact(&mut got_magic)
        .map_err(|e| Error::Checkpoint(format!("truncated magic: {e}")))?;
    if &got_magic != magic {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got_magic),
            String::from_utf8_lossy(magic)
        )));
    }

    let meta_len = r.u32()? as usize;
    if meta_len > 1 << 30 {
        return Err(Error::Checkpoint(format!(
            "unreasonable metadata length {meta_len}"
        )));
    }
    let mut meta_bytes = vec![0u8; meta_len];
    r.take(&mut meta_bytes)?;
    let doc = String::from_utf8(meta_bytes)
        .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
    let meta: Meta = doc
        .lines()
        .filter(|l| !l.is_empty())
        .map(|line| match line.split_once('=') {
            Some((k, v)) => Ok((k.to_string(), v.to_string())),
            None => Err(Error::Checkpoint(format!(
                "metadata line without '=': {line}"
            ))),
        })
        .collect::<Result<_>>()?;

    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        if name_len > 1 << 20 {
            return Err(Error::Checkpoint(format!(
                "unreasonable tensor name length {name_len}"
            )));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.take(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 1 << 32 {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` declares unreasonable size {numel}"
            )));
        }
        let data = match dtype {
            0 => {
                let mut buf = vec![0u8; numel * 4];
                r.take(&mut buf)?;
                RawDtype::F32(
                    buf.chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                )
            }
            1 => {
                let mut buf = vec![0u8; numel];
                r.take(&mut buf)?;
                RawDtype::U8(buf)
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has unknown dtype {other}"
                )))
            }
        };
        tensors.push(RawTensor { name, shape, data });
    }

    let computed = r.hash.0;
    let stored = r.u64_unhashed()?;
    if computed != stored {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
        )));
    }
    Ok((meta, tensors))
}

impl<R: Read> HashingReader<R> {
    fn u64_unhashed(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Checkpoint(format!("truncated checksum: {e}")))?;
        Ok(u64::from_le_bytes(b))
    }
}

/// Write a dataset-flavored container.
pub fn write_raw_tensors(
    path: &Path,
    meta: &[(String, String)],
    tensors: &[RawTensor],
) -> Result<()> {
    write_container(path, DATASET_MAGIC, meta, tensors)
}

/// Read a dataset-flavored container.
pub fn read_raw_tensors(path: &Path) -> Result<(Meta, Vec<RawTensor>)> {
    read_container(path, DATASET_MAGIC)
}
