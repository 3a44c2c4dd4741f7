//! VMAT dense-matrix container.
//!
//! Layout (little-endian): magic `"VMAT"`, `u32` rows, `u32` cols, then
//! `rows · cols` `f64` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VMAT";

pub fn write_vmat(matrix: &DMatrix<f64>, writer: &mut impl Write) -> std::io::Result<()> {
    writer.write_all(MAGIC)?;
    writer.write_all(&(matrix.nrows() as u32).to_le_bytes())?;
    writer.write_all(&(matrix.ncols() as u32).to_le_bytes())?;
    for r in 0..matrix.nrows() {
        for c in 0..matrix.ncols() {
            writer.write_all(&matrix[(r, c)].to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_vmat(matrix: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_vmat(matrix, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_vmat(bytes: &[u8], path: &Path) -> Result<DMatrix<f64>> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "missing VMAT header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| Error::format(path, "VMAT dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "VMAT payload for {rows}x{cols} needs {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let values = bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    Ok(DMatrix::from_row_iterator(rows, cols, values))
}

pub fn load_vmat(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    read_vmat(&bytes, path)
}
