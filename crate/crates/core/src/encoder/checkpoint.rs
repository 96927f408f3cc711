//! Binary checkpoint container.
//!
//! All integers are little-endian `u32`, all values little-endian `f64`.
//!
//! ```text
//! "MPCK" version header_len header(TOML EncoderConfig) entry_count
//! entry_count x { name_len name kind(u8: 0 weight, 1 statistic) ndim dims... values... }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::{EncoderConfig, EncoderError, Encoder, ParamKind, ParameterSet};

const MAGIC: &[u8; 4] = b"MPCK";
const VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<(), EncoderError> {
    let v = u32::try_from(v).map_err(|_| EncoderError::Format("length exceeds u32".into()))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize, EncoderError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_checkpoint<W: Write>(mut w: W, config: &EncoderConfig, params: &ParameterSet) -> Result<(), EncoderError> {
    Encoder::new(config.clone())?.check_params(params)?;
    let header = toml::to_string(config).map_err(|e| EncoderError::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION as usize)?;
    put_u32(&mut w, header.len())?;
    w.write_all(header.as_bytes())?;
    put_u32(&mut w, params.len())?;
    for e in params.entries() {
        put_u32(&mut w, e.name.len())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&[match e.kind {
            ParamKind::Weight => 0,
            ParamKind::Statistic => 1,
        }])?;
        put_u32(&mut w, e.value.ndim())?;
        for &d in e.value.shape() {
            put_u32(&mut w, d)?;
        }
        for v in e.value.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(EncoderConfig, ParameterSet), EncoderError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(EncoderError::Format("bad magic".into()));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION as usize {
        return Err(EncoderError::Format(format!("unsupported version {version}")));
    }
    let header_len = get_u32(&mut r)?;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let header = String::from_utf8(header).map_err(|_| EncoderError::Format("header is not UTF-8".into()))?;
    let config: EncoderConfig = toml::from_str(&header).map_err(|e| EncoderError::Format(e.to_string()))?;
    let count = get_u32(&mut r)?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name_len = get_u32(&mut r)?;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| EncoderError::Format("entry name is not UTF-8".into()))?;
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        let kind = match kind[0] {
            0 => ParamKind::Weight,
            1 => ParamKind::Statistic,
            k => return Err(EncoderError::Format(format!("unknown entry kind {k}"))),
        };
        let ndim = get_u32(&mut r)?;
        let shape = (0..ndim).map(|_| get_u32(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        let value = ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| EncoderError::Format(e.to_string()))?;
        params.push(name, kind, value)?;
    }
    Encoder::new(config.clone())?.check_params(&params)?;
    Ok((config, params))
}

pub fn save_checkpoint(path: &Path, config: &EncoderConfig, params: &ParameterSet) -> Result<(), EncoderError> {
    write_checkpoint(BufWriter::new(File::create(path)?), config, params)
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderConfig, ParameterSet), EncoderError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
