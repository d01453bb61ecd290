//! Binary parameter files: a magic tag and version, then one record per
//! parameter (`name`, rank, dims, little-endian `f32` payload).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::params::ParamStore;
use super::Real;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GLCK";
const VERSION: u32 = 1;

pub fn write_params<F: Real, W: Write>(store: &ParamStore<F>, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for e in store.entries() {
        let name = e.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&2u32.to_le_bytes())?;
        for &d in e.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in e.value.iter() {
            w.write_all(&v.to_f32().unwrap().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads all records as `(name, values)` pairs in file order.
pub fn read_params<R: Read>(mut r: R) -> Result<Vec<(String, Array2<f32>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic tag".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)?;
        if rank != 2 {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} is not supported")));
        }
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut payload = vec![0u8; rows * cols * 4];
        r.read_exact(&mut payload)?;
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let arr = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.push((name, arr));
    }
    Ok(out)
}

pub fn save<F: Real>(store: &ParamStore<F>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_params(store, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Loads a file into a fresh store (seed 0), all entries trainable.
pub fn load<F: Real>(path: &Path) -> Result<ParamStore<F>> {
    let file = std::fs::File::open(path)?;
    let records = read_params(std::io::BufReader::new(file))?;
    let mut store = ParamStore::new(0);
    for (name, v) in records {
        if store.id(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        store.insert(&name, v.mapv(|x| F::from(x).unwrap()));
    }
    Ok(store)
}

/// Overwrites matching entries of `store`; every stored name must exist.
pub fn load_into<F: Real>(store: &mut ParamStore<F>, path: &Path) -> Result<()> {
    let file = std::fs::File::open(path)?;
    for (name, v) in read_params(std::io::BufReader::new(file))? {
        if store.id(&name).is_none() {
            return Err(Error::Checkpoint(format!("unknown parameter {name}")));
        }
        store.set(&name, v.mapv(|x| F::from(x).unwrap()))?;
    }
    Ok(())
}
