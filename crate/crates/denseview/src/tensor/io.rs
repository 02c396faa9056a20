//! Flat binary tensor container.
//!
//! Layout: magic bytes `C4DT`, u32 rank, one u64 per extent, then the
//! row-major payload as little-endian f64. Used for parameter checkpoints,
//! grid files, and golden-value tests.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"C4DT";

impl Tensor {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &e in self.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in self.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::data(format!("{}: bad magic", path.display())));
        }
        let mut rank_buf = [0u8; 4];
        r.read_exact(&mut rank_buf)?;
        let rank = u32::from_le_bytes(rank_buf) as usize;
        if rank > 16 {
            return Err(Error::data(format!("{}: implausible rank {}", path.display(), rank)));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 8];
        r.read_exact(&mut payload)?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::data(format!("{}: trailing bytes", path.display())));
        }
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.c4dt");
        let t = Tensor::from_fn(vec![3, 5, 2], |i| (i as f64 * 0.7).sin() * 1e3);
        t.save(&path).unwrap();
        let back = Tensor::load(&path).unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn scalar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.c4dt");
        Tensor::scalar(-0.25).save(&path).unwrap();
        assert_eq!(Tensor::load(&path).unwrap().item().unwrap(), -0.25);
    }

    #[test]
    fn bad_magic_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.c4dt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(Tensor::load(&path), Err(Error::Data(_))));
    }
}
