//! Binary matrix container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! b"IBFP" | version: u32 | count: u64 | m: u64 | count * m * m f64, row-major
//! ```
//!
//! Model files append a coefficient block right after a container:
//!
//! ```text
//! b"IBFC" | rows: u64 | cols: u64 | rows * cols f64, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IBFP";
pub const COEF_MAGIC: &[u8; 4] = b"IBFC";
pub const VERSION: u32 = 1;

pub fn write_matrices<W: Write>(w: &mut W, matrices: &[DMatrix<f64>]) -> Result<()> {
    let m = matrices.first().map_or(0, |f| f.nrows());
    for (n, f) in matrices.iter().enumerate() {
        if f.nrows() != m || f.ncols() != m {
            return Err(Error::Dimension(format!(
                "matrix {n} is {}x{}, expected {m}x{m}",
                f.nrows(),
                f.ncols()
            )));
        }
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(matrices.len() as u64).to_le_bytes())?;
    w.write_all(&(m as u64).to_le_bytes())?;
    for f in matrices {
        write_row_major(w, f)?;
    }
    Ok(())
}

/// Reads a container. An empty container carries `m` but no matrices, so it
/// is returned alongside.
pub fn read_matrices<R: Read>(r: &mut R) -> Result<(usize, Vec<DMatrix<f64>>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data("bad container magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported container version {version}")));
    }
    let count = read_len(r)?;
    let m = read_len(r)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(read_row_major(r, m, m)?);
    }
    Ok((m, out))
}

pub fn write_coefficients<W: Write>(w: &mut W, s: &DMatrix<f64>) -> Result<()> {
    w.write_all(COEF_MAGIC)?;
    w.write_all(&(s.nrows() as u64).to_le_bytes())?;
    w.write_all(&(s.ncols() as u64).to_le_bytes())?;
    write_row_major(w, s)
}

pub fn read_coefficients<R: Read>(r: &mut R) -> Result<DMatrix<f64>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != COEF_MAGIC {
        return Err(Error::Data("bad coefficient block magic".into()));
    }
    let rows = read_len(r)?;
    let cols = read_len(r)?;
    read_row_major(r, rows, cols)
}

pub fn save_matrices(path: &Path, matrices: &[DMatrix<f64>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrices(&mut w, matrices)?;
    w.flush()?;
    Ok(())
}

pub fn load_matrices(path: &Path) -> Result<(usize, Vec<DMatrix<f64>>)> {
    let mut r = BufReader::new(File::open(path)?);
    read_matrices(&mut r)
}

fn write_row_major<W: Write>(w: &mut W, f: &DMatrix<f64>) -> Result<()> {
    for i in 0..f.nrows() {
        for j in 0..f.ncols() {
            w.write_all(&f[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_row_major<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf)?;
    let vals: Vec<f64> = buf
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &vals))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_len<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Data("length overflow".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn container_round_trip_is_bit_exact(
            m in 0usize..5,
            n in 0usize..4,
            seed in proptest::collection::vec(proptest::num::f64::ANY, 100),
        ) {
            let mats: Vec<DMatrix<f64>> = (0..n)
                .map(|k| DMatrix::from_fn(m, m, |i, j| seed[(k * 25 + i * 5 + j) % 100]))
                .collect();
            let mut buf = Vec::new();
            write_matrices(&mut buf, &mats).unwrap();
            let (m2, back) = read_matrices(&mut buf.as_slice()).unwrap();
            if n > 0 { prop_assert_eq!(m2, m); }
            prop_assert_eq!(back.len(), n);
            for (a, b) in mats.iter().zip(&back) {
                for (x, y) in a.iter().zip(b.iter()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_matrices(&mut buf, &[DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])]).unwrap();
        assert_eq!(&buf[0..4], b"IBFP");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[16..24].try_into().unwrap()), 2);
        // row-major: second value is (0, 1)
        assert_eq!(f64::from_le_bytes(buf[32..40].try_into().unwrap()), 2.0);
        assert_eq!(buf.len(), 24 + 4 * 8);
    }

    #[test]
    fn rejects_bad_magic_and_ragged_input() {
        assert!(read_matrices(&mut &b"NOPE\0\0\0\0"[..]).is_err());
        let mats = vec![DMatrix::zeros(2, 2), DMatrix::zeros(3, 3)];
        assert!(matches!(
            write_matrices(&mut Vec::new(), &mats),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn coefficient_block_round_trip() {
        let s = DMatrix::from_fn(3, 2, |i, j| i as f64 - 0.5 * j as f64);
        let mut buf = Vec::new();
        write_coefficients(&mut buf, &s).unwrap();
        assert_eq!(read_coefficients(&mut buf.as_slice()).unwrap(), s);
    }
}
