//! Versioned binary checkpoint files.
//!
//! Layout: magic `NATC`, format version (u32 LE), then one record per named
//! parameter: name length (u32 LE), UTF-8 name bytes, rank (u32 LE), dims
//! (u32 LE each), row-major payload as little-endian f64. Records run to EOF.
//! Training step and epoch ride along as two reserved rank-0 records
//! (`_meta.step`, `_meta.epoch`) that load back into struct fields, not into
//! the parameter set.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NATC";
const VERSION: u32 = 1;
const META_STEP: &str = "_meta.step";
const META_EPOCH: &str = "_meta.epoch";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub step: u64,
    pub epoch: u32,
}

impl Checkpoint {
    pub fn new(params: ParamSet, step: u64, epoch: u32) -> Self {
        Self { params, step, epoch }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        write_record(&mut w, META_STEP, &Tensor::scalar(self.step as f64)).map_err(io)?;
        write_record(&mut w, META_EPOCH, &Tensor::scalar(self.epoch as f64)).map_err(io)?;
        for (name, tensor) in self.params.iter() {
            write_record(&mut w, name, tensor).map_err(io)?;
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let fmt = |reason: &str| Error::Format {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| fmt("missing magic"))?;
        if &magic != MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = read_u32(&mut r).map_err(|_| fmt("missing version"))?;
        if version != VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }

        let mut params = ParamSet::new();
        let mut step = 0u64;
        let mut epoch = 0u32;
        loop {
            let name_len = match read_u32(&mut r) {
                Ok(n) => n as usize,
                Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
                Err(_) => return Err(fmt("truncated record header")),
            };
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)
                .map_err(|_| fmt("truncated name"))?;
            let name =
                String::from_utf8(name_bytes).map_err(|_| fmt("parameter name is not UTF-8"))?;
            let rank = read_u32(&mut r).map_err(|_| fmt("truncated rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r).map_err(|_| fmt("truncated dims"))? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0f64; numel];
            for v in data.iter_mut() {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf)
                    .map_err(|_| fmt("truncated payload"))?;
                *v = f64::from_le_bytes(buf);
            }
            let tensor = Tensor::new(shape, data)?;
            match name.as_str() {
                META_STEP => step = tensor.item()? as u64,
                META_EPOCH => epoch = tensor.item()? as u32,
                _ => params.insert(name, tensor),
            }
        }
        Ok(Checkpoint { params, step, epoch })
    }
}

fn write_record(w: &mut impl Write, name: &str, tensor: &Tensor) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
