//! TLK1 tensor files and checkpoints.
//!
//! A TLK1 record is: magic bytes `TLK1`, one u8 rank (always 5), five u32
//! little-endian dims (n, c, d, h, w), then the raw little-endian f32
//! values, row-major.
//!
//! A checkpoint is a text manifest followed by concatenated TLK1 records:
//! the first line is `TLKCKPT <count>`, then one `<byte-offset> <name>`
//! line per parameter (offset relative to the end of the blank line that
//! terminates the manifest), then the records in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Dims, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"TLK1";
pub const CKPT_MAGIC: &str = "TLKCKPT";

pub fn write_tensor<T: Real>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    let d = t.dims();
    w.write_all(MAGIC)?;
    w.write_all(&[5u8])?;
    for dim in [d.n, d.c, d.d, d.h, d.w] {
        let dim = u32::try_from(dim).map_err(|_| Error::msg(format!("dim {dim} exceeds u32")))?;
        w.write_all(&dim.to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<T: Real>(r: &mut impl Read) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format { context: "tensor", detail: format!("bad magic {magic:?}") });
    }
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    if rank[0] != 5 {
        return Err(Error::Format { context: "tensor", detail: format!("rank {} != 5", rank[0]) });
    }
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)?;
        *d = u32::from_le_bytes(buf) as usize;
    }
    let dims = Dims::new(dims[0], dims[1], dims[2], dims[3], dims[4]);
    let mut data = Vec::with_capacity(dims.count());
    let mut buf = [0u8; 4];
    for _ in 0..dims.count() {
        r.read_exact(&mut buf)?;
        data.push(T::from_f64(f32::from_le_bytes(buf) as f64));
    }
    Tensor::new(dims, data)
}

pub fn save_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)?;
    f.flush()?;
    Ok(())
}

pub fn load_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}

fn tensor_byte_len(d: Dims) -> u64 {
    (4 + 1 + 20 + 4 * d.count()) as u64
}

pub fn save_checkpoint<T: Real>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{CKPT_MAGIC} {}", store.len())?;
    let mut offset = 0u64;
    for id in store.ids() {
        writeln!(f, "{offset} {}", store.name(id))?;
        offset += tensor_byte_len(store.value(id).dims());
    }
    writeln!(f)?;
    for id in store.ids() {
        write_tensor(&mut f, store.value(id))?;
    }
    f.flush()?;
    Ok(())
}

/// Load parameter values into an already-registered store. Every manifest
/// name must match a known parameter with the stored shape.
pub fn load_checkpoint<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<()> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = String::new();
    read_line(&mut r, &mut header)?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(CKPT_MAGIC) {
        return Err(Error::Format { context: "checkpoint", detail: "bad magic line".into() });
    }
    let count: usize = parts
        .next()
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::Format { context: "checkpoint", detail: "bad parameter count".into() })?;

    let mut names = Vec::with_capacity(count);
    let mut line = String::new();
    for _ in 0..count {
        line.clear();
        read_line(&mut r, &mut line)?;
        let (offset, name) = line
            .trim_end()
            .split_once(' ')
            .ok_or_else(|| Error::Format { context: "checkpoint", detail: format!("bad manifest line {line:?}") })?;
        let _: u64 = offset
            .parse()
            .map_err(|_| Error::Format { context: "checkpoint", detail: format!("bad offset {offset:?}") })?;
        names.push(name.to_string());
    }
    line.clear();
    read_line(&mut r, &mut line)?;
    if !line.trim().is_empty() {
        return Err(Error::Format { context: "checkpoint", detail: "missing blank separator".into() });
    }
    if count != store.len() {
        return Err(Error::Format {
            context: "checkpoint",
            detail: format!("holds {count} parameters, model has {}", store.len()),
        });
    }
    for name in names {
        let id = store.id_of(&name).ok_or_else(|| Error::Format {
            context: "checkpoint",
            detail: format!("unknown parameter {name:?}"),
        })?;
        let t: Tensor<T> = read_tensor(&mut r)?;
        if t.dims() != store.value(id).dims() {
            return Err(Error::Format {
                context: "checkpoint",
                detail: format!(
                    "parameter {name:?} has shape {}, expected {}",
                    t.dims(),
                    store.value(id).dims()
                ),
            });
        }
        *store.value_mut(id) = t;
    }
    Ok(())
}

fn read_line(r: &mut impl Read, out: &mut String) -> Result<()> {
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            return Ok(());
        }
        out.push(byte[0] as char);
    }
}
