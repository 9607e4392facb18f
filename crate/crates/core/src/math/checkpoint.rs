//! Checkpoint container for named parameter tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TRAJPILOT-CKPT-V1\n"        header string, 18 bytes
//! u32  tensor count
//! per tensor:
//!   u32  name length, then name bytes (utf-8)
//!   u32  ndim, then ndim × u64 dims
//!   dim-product × f64 values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::tape::ParamStore;
use crate::math::tensor::Tensor;

const HEADER: &[u8] = b"TRAJPILOT-CKPT-V1\n";

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(HEADER)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let mut r = BufReader::new(
        File::open(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?,
    );
    let mut header = [0u8; 18];
    r.read_exact(&mut header)?;
    if header != HEADER {
        return Err(Error::Invalid(format!(
            "{} is not a v1 checkpoint",
            path.display()
        )));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Invalid("bad checkpoint name".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        store.add(&name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_order() {
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 1e-300]).unwrap());
        store.add("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let dir = std::env::temp_dir().join("tp-ckpt-test");
        let path = dir.join("roundtrip.ckpt");
        save(&store, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.len(), 2);
        let names: Vec<&str> = back.iter().map(|(_, n, _)| n).collect();
        assert_eq!(names, vec!["a.w", "b"]);
        for ((_, _, t1), (_, _, t2)) in store.iter().zip(back.iter()) {
            assert_eq!(t1, t2);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_foreign_file() {
        let dir = std::env::temp_dir().join("tp-ckpt-test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("not_a_ckpt.bin");
        std::fs::write(&path, b"something else entirely.....").unwrap();
        assert!(load(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
