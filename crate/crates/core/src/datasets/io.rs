//! Binary dataset files: magic, image tensor, labels, optional factor table.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LabeledDataset, Split};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 5] = b"ADRA\x01";

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_dataset(w: &mut impl Write, ds: &LabeledDataset) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    put_u32(w, ds.images.rank())?;
    for &d in ds.images.shape() {
        put_u32(w, d)?;
    }
    w.write_all(&ds.images.to_le_bytes())?;
    put_u32(w, ds.labels.len())?;
    for &l in &ds.labels {
        put_u32(w, l)?;
    }
    if let Some(rows) = &ds.factors {
        put_u32(w, rows.len())?;
        put_u32(w, 5)?;
        for row in rows {
            for &v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Parse a dataset file; the class count is one past the largest label.
pub fn read_dataset(r: &mut impl Read, split: Split) -> Result<LabeledDataset> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(5, "magic")? != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let rank = c.u32("rank")?;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| c.u32("shape"))
        .collect::<Result<Vec<_>>>()?;
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    let bytes = c.take(
        count
            .checked_mul(4)
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?,
        "image data",
    )?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let images = Tensor::new(shape, data)?;
    let n = c.u32("label count")?;
    let labels = (0..n)
        .map(|_| c.u32("labels"))
        .collect::<Result<Vec<_>>>()?;
    let class_count = labels.iter().max().map_or(0, |&m| m + 1);
    let mut ds = LabeledDataset::new(images, labels, class_count, split)?;
    if !c.done() {
        let rows = c.u32("factor rows")?;
        let cols = c.u32("factor columns")?;
        if rows != n || cols != 5 {
            return Err(Error::Format(format!(
                "factor table is {rows}×{cols}, expected {n}×5"
            )));
        }
        let mut table = Vec::with_capacity(rows);
        for _ in 0..rows {
            let mut row = [0u32; 5];
            for v in &mut row {
                *v = c.u32("factor values")? as u32;
            }
            table.push(row);
        }
        ds.factors = Some(table);
    }
    if !c.done() {
        return Err(Error::Format("trailing bytes after dataset".into()));
    }
    Ok(ds)
}

pub fn save_dataset(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path, split: Split) -> Result<LabeledDataset> {
    read_dataset(&mut BufReader::new(File::open(path)?), split)
}
