//! Dense row-major matrices and the `CALT` on-disk tensor format.
//!
//! File layout, bit-exact: magic bytes `CALT`, version `u32` = 1, dtype `u8`
//! (0 = f32, 1 = i64), ndim `u8` = 2, shape as two little-endian `u64`,
//! then the payload row-major little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CALT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_I64: u8 = 1;

/// Dense row-major matrix of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tensor2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Tensor2D { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Tensor2D::new(rows, cols, data.iter().map(|&v| v as f32).collect())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(path, format!("truncated file while reading {what}")))
}

/// Writes a float tensor in `CALT` format. Refuses non-finite entries.
pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor2D) -> Result<()> {
    let path = path.as_ref();
    if !t.is_finite() {
        return Err(Error::Data(format!(
            "refusing to write non-finite tensor to {}",
            path.display()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_header(&mut w, DTYPE_F32, t.rows as u64, t.cols as u64, path)?;
    for v in &t.data {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes integer labels as an n x 1 `CALT` tensor with dtype i64.
pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_header(&mut w, DTYPE_I64, labels.len() as u64, 1, path)?;
    for &v in labels {
        w.write_all(&(v as i64).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_header(w: &mut impl Write, dtype: u8, rows: u64, cols: u64, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&[dtype, 2]).map_err(io)?;
    w.write_all(&rows.to_le_bytes()).map_err(io)?;
    w.write_all(&cols.to_le_bytes()).map_err(io)?;
    Ok(())
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<(u8, usize, usize)> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, path, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {:?}, expected {:?}", magic, MAGIC),
        ));
    }
    let mut ver = [0u8; 4];
    read_exact(r, &mut ver, path, "version")?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let mut meta = [0u8; 2];
    read_exact(r, &mut meta, path, "dtype/ndim")?;
    let (dtype, ndim) = (meta[0], meta[1]);
    if dtype != DTYPE_F32 && dtype != DTYPE_I64 {
        return Err(Error::format(path, format!("unknown dtype {dtype}")));
    }
    if ndim != 2 {
        return Err(Error::format(path, format!("unsupported ndim {ndim}")));
    }
    let mut dim = [0u8; 8];
    read_exact(r, &mut dim, path, "rows")?;
    let rows = u64::from_le_bytes(dim) as usize;
    read_exact(r, &mut dim, path, "cols")?;
    let cols = u64::from_le_bytes(dim) as usize;
    Ok((dtype, rows, cols))
}

/// Reads a float tensor in `CALT` format, validating shape and finiteness.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor2D> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let (dtype, rows, cols) = read_header(&mut r, path)?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(
            path,
            format!("expected f32 tensor, found dtype {dtype}"),
        ));
    }
    let n = rows * cols;
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for i in 0..n {
        read_exact(&mut r, &mut buf, path, &format!("payload entry {i} of {n}"))?;
        let v = f32::from_le_bytes(buf);
        if !v.is_finite() {
            return Err(Error::format(path, format!("non-finite entry at index {i}")));
        }
        data.push(v);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Tensor2D::new(rows, cols, data)
}

/// Reads an n x 1 i64 `CALT` tensor as non-negative label indices.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let (dtype, rows, cols) = read_header(&mut r, path)?;
    if dtype != DTYPE_I64 {
        return Err(Error::format(
            path,
            format!("expected i64 tensor, found dtype {dtype}"),
        ));
    }
    if cols != 1 {
        return Err(Error::format(path, format!("labels must be n x 1, got {rows}x{cols}")));
    }
    let mut labels = Vec::with_capacity(rows);
    let mut buf = [0u8; 8];
    for i in 0..rows {
        read_exact(&mut r, &mut buf, path, &format!("label {i} of {rows}"))?;
        let v = i64::from_le_bytes(buf);
        if v < 0 {
            return Err(Error::format(path, format!("negative label {v} at row {i}")));
        }
        labels.push(v as usize);
    }
    Ok(labels)
}
