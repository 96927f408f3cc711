//! Little-endian matrix container shared by posterior and feature files.
//!
//! Layout of one record:
//!
//! ```text
//! magic   : 4 bytes
//! rows    : u32 LE
//! cols    : u32 LE
//! payload : rows * cols f64 LE, row-major
//! ```
//!
//! A file may hold any number of records back to back.

use std::io::{self, Read, Write};

use ndarray::Array2;

pub const POSTERIOR_MAGIC: [u8; 4] = *b"CTCP";
pub const FEATURE_MAGIC: [u8; 4] = *b"FEAT";

pub fn write_matrix<W: Write>(mut w: W, magic: [u8; 4], m: &Array2<f64>) -> io::Result<()> {
    let (rows, cols) = m.dim();
    let rows32 = u32::try_from(rows).map_err(|_| invalid("row count exceeds u32"))?;
    let cols32 = u32::try_from(cols).map_err(|_| invalid("column count exceeds u32"))?;
    w.write_all(&magic)?;
    w.write_all(&rows32.to_le_bytes())?;
    w.write_all(&cols32.to_le_bytes())?;
    let mut buf = Vec::with_capacity(rows * cols * 8);
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads one record. Returns `Ok(None)` on a clean end of stream.
pub fn read_matrix<R: Read>(mut r: R, magic: [u8; 4]) -> io::Result<Option<Array2<f64>>> {
    let mut head = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut head[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated header"));
        }
        filled += n;
    }
    if head != magic {
        return Err(invalid("bad magic"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let rows = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let cols = u32::from_le_bytes(word) as usize;
    let mut payload = vec![0u8; rows * cols * 8];
    r.read_exact(&mut payload)?;
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Array2::from_shape_vec((rows, cols), values)
        .map(Some)
        .map_err(|e| invalid(&e.to_string()))
}

pub fn read_all_matrices<R: Read>(mut r: R, magic: [u8; 4]) -> io::Result<Vec<Array2<f64>>> {
    let mut out = Vec::new();
    while let Some(m) = read_matrix(&mut r, magic)? {
        out.push(m);
    }
    Ok(out)
}

fn invalid(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}
