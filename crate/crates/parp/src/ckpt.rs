//! Binary parameter checkpoints. Bit-exact: f64 values are stored as raw
//! little-endian bytes, so save/load round-trips preserve value hashes.

use crate::error::{Error, Result};
use crate::tensor::{Param, ParamStore, Tensor};
use std::io::{Read, Write};
use std::path::Path;

const CKPT_MAGIC: &[u8; 8] = b"PARPCKPT";
const CKPT_VERSION: u16 = 1;

pub fn save_store(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        buf.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(p.prunable as u8);
        buf.extend_from_slice(&(p.value.shape().len() as u8).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_store(path: &Path) -> Result<ParamStore> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > buf.len() {
            return Err(Error::MaskFormat(format!("truncated checkpoint {}", path.display())));
        }
        let s = &buf[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    if take(&mut cur, 8)? != CKPT_MAGIC {
        return Err(Error::MaskFormat(format!("bad checkpoint magic in {}", path.display())));
    }
    let version = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::MaskFormat(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
            .map_err(|e| Error::MaskFormat(format!("bad param name: {e}")))?;
        let prunable = take(&mut cur, 1)?[0] != 0;
        let ndim = take(&mut cur, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut cur, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut cur, n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(Param::new(name, Tensor::new(shape, data)?, prunable))?;
    }
    Ok(store)
}
