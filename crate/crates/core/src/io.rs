//! Binary file formats. All integers and floats are little-endian.
//!
//! - `.egts` tensor dump: `u32 rank`, `rank x u32 dims`, then `f32` data in
//!   row-major order.
//! - `EGTB` table file: magic, `u32 version`, `u32 table_count`, then per
//!   table `u64 rows, u32 d_sub, u32 order, u32 head, u32 layer`, then every
//!   table's rows as row-major `f32`, tables in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{EngramError, Result};
use crate::hasher::TableKey;
use crate::store::{EmbeddingTable, TableId};

const TABLE_MAGIC: &[u8; 4] = b"EGTB";
const TABLE_VERSION: u32 = 1;

pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(buf: &'a [u8], kind: &'static str) -> Self {
        Self { buf, pos: 0, kind }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(EngramError::Format {
                kind: self.kind,
                reason: format!("truncated at byte {}", self.pos),
            });
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err("trailing bytes"));
        }
        Ok(())
    }

    pub(crate) fn err(&self, reason: &str) -> EngramError {
        EngramError::Format {
            kind: self.kind,
            reason: reason.to_owned(),
        }
    }
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, xs: impl IntoIterator<Item = f32>) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub(crate) fn read_all(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    Ok(buf)
}

pub(crate) fn write_all(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

pub fn encode_tensor(t: &ArrayD<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    put_f32s(&mut out, t.iter().copied());
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<ArrayD<f32>> {
    let mut c = Cursor::new(bytes, "tensor");
    let rank = c.u32()? as usize;
    if rank > 8 {
        return Err(c.err("rank above 8"));
    }
    let dims = (0..rank)
        .map(|_| c.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| c.err("size overflow"))?;
    let data = c.f32s(len)?;
    c.finish()?;
    Ok(ArrayD::from_shape_vec(IxDyn(&dims), data).expect("length checked"))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &ArrayD<f32>) -> Result<()> {
    write_all(path, &encode_tensor(t))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<ArrayD<f32>> {
    decode_tensor(&read_all(path)?)
}

/// Converts any `f64` array to an `f32` tensor for writing.
pub fn to_f32_tensor<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> ArrayD<f32> {
    a.mapv(|x| x as f32).into_dyn()
}

pub fn encode_tables(tables: &[EmbeddingTable<f32>]) -> Vec<u8> {
    let payload: usize = tables.iter().map(|t| t.data.len()).sum();
    let mut out = Vec::with_capacity(12 + 24 * tables.len() + 4 * payload);
    out.extend_from_slice(TABLE_MAGIC);
    out.extend_from_slice(&TABLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(tables.len() as u32).to_le_bytes());
    for t in tables {
        out.extend_from_slice(&t.rows.to_le_bytes());
        out.extend_from_slice(&(t.dim as u32).to_le_bytes());
        out.extend_from_slice(&(t.id.key.order as u32).to_le_bytes());
        out.extend_from_slice(&(t.id.key.head as u32).to_le_bytes());
        out.extend_from_slice(&t.id.layer.to_le_bytes());
    }
    for t in tables {
        put_f32s(&mut out, t.data.iter().copied());
    }
    out
}

pub fn decode_tables(bytes: &[u8]) -> Result<Vec<EmbeddingTable<f32>>> {
    let mut c = Cursor::new(bytes, "table");
    if c.take(4)? != TABLE_MAGIC {
        return Err(c.err("missing EGTB magic"));
    }
    if c.u32()? != TABLE_VERSION {
        return Err(c.err("unsupported version"));
    }
    let count = c.u32()? as usize;
    let mut headers = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let rows = c.u64()?;
        let dim = c.u32()? as usize;
        let order = c.u32()? as usize;
        let head = c.u32()? as usize;
        let layer = c.u32()?;
        headers.push((rows, dim, TableId { key: TableKey { order, head }, layer }));
    }
    let mut tables = Vec::with_capacity(count);
    for (rows, dim, id) in headers {
        let n = (rows as usize).checked_mul(dim).ok_or_else(|| c.err("size overflow"))?;
        let data = c.f32s(n)?;
        tables.push(EmbeddingTable { id, rows, dim, data });
    }
    c.finish()?;
    Ok(tables)
}

pub fn write_tables(path: impl AsRef<Path>, tables: &[EmbeddingTable<f32>]) -> Result<()> {
    write_all(path, &encode_tables(tables))
}

pub fn read_tables(path: impl AsRef<Path>) -> Result<Vec<EmbeddingTable<f32>>> {
    decode_tables(&read_all(path)?)
}
