//! Flat little-endian parameter checkpoints.
//!
//! Layout: magic `UGNN`, u32 version, u32 parameter count, then per
//! parameter: u32 name length, name bytes (UTF-8), u32 rank, rank x u32
//! dims, f32 data in row-major order.

use std::io::{Read, Write};

use crate::error::TensorError;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UGNN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint<T: Scalar>(w: &mut impl Write, params: &ParamSet<T>) -> Result<(), TensorError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_u32(w, params.len() as u32)?;
    for (name, t) in params.iter() {
        put_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.rank() as u32)?;
        for &d in t.shape() {
            put_u32(w, d as u32)?;
        }
        for &x in t.data() {
            w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(r: &mut impl Read) -> Result<ParamSet<T>, TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = get_u32(r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = get_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Format(e.to_string()))?;
        let rank = get_u32(r)? as usize;
        let shape = (0..rank).map(|_| get_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let mut buf = vec![0u8; numel * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        params.add(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_and_values() {
        let mut p = ParamSet::<f32>::new();
        p.add("enc.0.w", Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.0, 1e-8, 7.0]));
        p.add("b", Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        assert_eq!(&buf[..4], b"UGNN");
        let q: ParamSet<f32> = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_wrong_magic() {
        let buf = b"XXXX\x01\x00\x00\x00\x00\x00\x00\x00";
        assert!(read_checkpoint::<f32>(&mut buf.as_slice()).is_err());
    }
}
