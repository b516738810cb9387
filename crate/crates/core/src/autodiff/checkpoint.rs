//! Flat binary parameter checkpoints.
//!
//! ```text
//! magic   4 bytes  "KGCK"
//! version u32
//! count   u32
//! repeated `count` times:
//!   name_len u32, name (UTF-8), rank u32, dims u64 x rank, values f64 x prod(dims)
//! ```
//! All integers and floats are little-endian. The store seed is not part of
//! the format; a loaded store reports seed 0.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::array::Array;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"KGCK";
pub const VERSION: u32 = 1;

pub fn write_params<T: Scalar, W: Write>(store: &ParamStore<T>, mut w: W) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, a) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(a.rank() as u32).to_le_bytes())?;
        for &d in a.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in a.data() {
            w.write_all(&x.as_f64().to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    Error::Format(format!("truncated checkpoint: {e}"))
}

pub fn read_params<T: Scalar, R: Read>(mut r: R) -> Result<ParamStore<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new(0);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::of(f64::from_bits(read_u64(&mut r)?)));
        }
        store.insert(&name, Array::new(shape, data)?);
    }
    Ok(store)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_params(store, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_params(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values() {
        let mut s = ParamStore::<f64>::new(3);
        s.init_matrix("enc.w", 3, 5);
        s.init_zeros("enc.b", &[5]);
        s.insert("scalar", Array::scalar(1.5));
        let mut buf = Vec::new();
        write_params(&s, &mut buf).unwrap();
        let back: ParamStore<f64> = read_params(buf.as_slice()).unwrap();
        assert_eq!(back.fingerprint(), s.fingerprint());
    }

    #[test]
    fn header_layout() {
        let mut s = ParamStore::<f64>::new(0);
        s.insert("ab", Array::from_vec(vec![1.0]));
        let mut buf = Vec::new();
        write_params(&s, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"KGCK");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        assert_eq!(&buf[16..18], b"ab");
        assert_eq!(u32::from_le_bytes(buf[18..22].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[22..30].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(buf[30..38].try_into().unwrap()), 1.0);
        assert_eq!(buf.len(), 38);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_params::<f64, _>(&b"NOPE\x01\0\0\0\0\0\0\0"[..]).is_err());
        let mut s = ParamStore::<f64>::new(0);
        s.init_zeros("w", &[4]);
        let mut buf = Vec::new();
        write_params(&s, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_params::<f64, _>(buf.as_slice()), Err(Error::Format(_))));
    }
}
