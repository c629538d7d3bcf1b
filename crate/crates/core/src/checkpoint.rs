//! Checkpoint container.
//!
//! Layout (little-endian): 8-byte magic `VFCKPT\0\0`, `u32` version, `u32`
//! length + UTF-8 TOML echo of the [`ModelConfig`], `u32` tensor count, then
//! per tensor: `u32` name length, name, `u8` dtype (0 = f32, 2 = f64), `u8`
//! trainable flag, `u32` rank, `u32` extents, payload. Nothing
//! time-dependent is stored, so identical parameters give identical bytes.

use std::path::Path;

use vf_tensor::{DType, Scalar, Tensor};

use crate::config::{parse_toml, ModelConfig};
use crate::error::{Result, VfError};
use crate::model::Model;
use crate::nn::ParamStore;

pub const MAGIC: [u8; 8] = *b"VFCKPT\0\0";
pub const VERSION: u32 = 1;

pub fn to_bytes<T: Scalar>(cfg: &ModelConfig, params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let echo = toml::to_string(cfg).expect("config is always serializable");
    out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    out.extend_from_slice(echo.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(p.trainable as u8);
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        p.value.data().iter().for_each(|v| v.write_le(&mut out));
    }
    out
}

/// A decoded checkpoint: config echo and named tensors in file order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, bool, Tensor<f64>)>,
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> VfError {
        VfError::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} bytes, {} left", self.b.len() - self.pos)));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn from_bytes(b: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { b, pos: 0, path };
    if r.take(8)? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(VfError::Version(format!(
            "{}: checkpoint version {version}, this build reads {VERSION}",
            path.display()
        )));
    }
    let n = r.u32()? as usize;
    let echo = std::str::from_utf8(r.take(n)?).map_err(|_| r.fail("config echo is not UTF-8"))?;
    let config: ModelConfig = parse_toml(echo, path)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| r.fail("tensor name is not UTF-8"))?
            .to_string();
        let code = r.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| r.fail(format!("unknown dtype code {code}")))?;
        let trainable = r.u8()? != 0;
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * dtype.size_of())?;
        let data: Vec<f64> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
        };
        let t = Tensor::new(&shape, data).map_err(|e| r.fail(e.to_string()))?;
        tensors.push((name, trainable, t));
    }
    if r.pos != b.len() {
        return Err(r.fail("trailing bytes"));
    }
    Ok(Checkpoint { config, tensors })
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model.config(), &model.params);
    // write-then-rename keeps the previous file intact if writing fails
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| VfError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| VfError::io(path, e))
}

/// Rebuilds the network from the config echo and loads every tensor,
/// requiring an exact match of names and shapes.
pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let b = std::fs::read(path).map_err(|e| VfError::io(path, e))?;
    let ck = from_bytes(&b, path)?;
    let mut model = Model::<T>::new(&ck.config, 0)?;
    if ck.tensors.len() != model.params.len() {
        return Err(VfError::Version(format!(
            "{}: {} tensors stored, architecture has {}",
            path.display(),
            ck.tensors.len(),
            model.params.len()
        )));
    }
    for (name, _, t) in ck.tensors {
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| VfError::Version(format!("{}: unknown parameter {name}", path.display())))?;
        let slot = model.params.value_mut(id);
        if slot.shape() != t.shape() {
            return Err(VfError::Version(format!(
                "{}: {name} has shape {:?}, architecture expects {:?}",
                path.display(),
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.cast();
    }
    Ok(model)
}
