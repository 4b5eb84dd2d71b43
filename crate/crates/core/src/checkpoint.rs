//! Named-tensor archive.
//!
//! Layout, little-endian throughout: `GRIFCKPT`, u32 version, u32 entry
//! count, then per entry `name_len u16, name (UTF-8), ndim u8, dims u32 x
//! ndim, dtype u8 (0 = f32), payload`. Entries are written in name order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::wire::{put_f32, put_u16, put_u32, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GRIFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn to_bytes(ps: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + ps.numel() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, ps.len() as u32);
    for (name, t) in ps.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
        if !t.all_finite() {
            return Err(Error::NonFinite("checkpoint tensor"));
        }
        put_u16(&mut out, name_len);
        out.extend_from_slice(name.as_bytes());
        let ndim = u8::try_from(t.rank())
            .map_err(|_| Error::InvalidArgument(format!("{name}: rank {} too large", t.rank())))?;
        out.push(ndim);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        out.push(DTYPE_F32);
        for &v in t.data() {
            put_f32(&mut out, v);
        }
    }
    Ok(out)
}

pub fn from_bytes(buf: &[u8]) -> Result<ParamStore> {
    let mut r = Reader::new(buf, "checkpoint");
    if r.bytes(CHECKPOINT_MAGIC.len()).map_err(|_| Error::BadMagic)? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut ps = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.bytes(name_len)?)
            .map_err(|_| Error::InvalidArgument("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::InvalidArgument(format!("{name}: unknown dtype {dtype}")));
        }
        let n: usize = dims.iter().product();
        if r.remaining() < n * 4 {
            return Err(Error::Truncated(format!(
                "checkpoint: `{name}` needs {} payload bytes, {} left",
                n * 4,
                r.remaining()
            )));
        }
        let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<f32>>>()?;
        ps.insert(name, Tensor::new(dims, data)?)?;
    }
    if r.remaining() != 0 {
        return Err(Error::InvalidArgument(format!(
            "checkpoint: {} trailing bytes",
            r.remaining()
        )));
    }
    Ok(ps)
}

pub fn save(ps: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(ps)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
