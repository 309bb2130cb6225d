//! Binary checkpoints. All integers and floats are little-endian.
//!
//! ```text
//! "BALN"  version:u32  iteration:u32  digest:[u8; 32]
//! config_len:u32  config:utf8          model config text, hashed by `digest`
//! count:u32  { tensor }*               parameters
//! count:u32  { tensor }*               momentum buffers
//! count:u32  { name  c:u32  mean:f32*c  var:f32*c }*
//!
//! tensor = name_len:u32 name:utf8 dims:u32*4 data:f32*
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::config;
use crate::error::{Error, Result};
use crate::model::{Layout, Model, ModelConfig, ParameterSet};
use crate::nn::RunningStats;
use crate::tensor::Tensor;
use crate::train::TrainState;

pub const MAGIC: &[u8; 4] = b"BALN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u32,
    pub model: ModelConfig,
    pub params: ParameterSet<f32>,
    pub momentum: BTreeMap<String, Tensor<f32>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.u32(b.len())?;
        self.0.extend_from_slice(b);
        Ok(())
    }

    fn floats(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn tensors(&mut self, map: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        self.u32(map.len())?;
        for (name, t) in map {
            self.bytes(name.as_bytes())?;
            for d in t.dims() {
                self.u32(d)?;
            }
            self.floats(t.data());
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::format("checkpoint", msg)
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("name is not UTF-8"))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| corrupt("length overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
    }

    fn tensors(&mut self) -> Result<BTreeMap<String, Tensor<f32>>> {
        let count = self.len()?;
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let name = self.string()?;
            let dims = [self.len()?, self.len()?, self.len()?, self.len()?];
            let numel =
                dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("dims overflow"))?;
            let t = Tensor::from_vec(dims, self.floats(numel)?)?;
            if map.insert(name.clone(), t).is_some() {
                return Err(corrupt(format!("duplicate tensor `{name}`")));
            }
        }
        Ok(map)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize)?;
        w.u32(self.iteration as usize)?;
        w.0.extend_from_slice(&self.model.digest());
        w.bytes(self.model.to_text().as_bytes())?;
        w.tensors(&self.params.tensors)?;
        w.tensors(&self.momentum)?;
        w.u32(self.params.batchnorm.len())?;
        for (name, st) in &self.params.batchnorm {
            w.bytes(name.as_bytes())?;
            w.u32(st.channels())?;
            w.floats(&st.mean);
            w.floats(&st.var);
        }
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch { found: version, expected: VERSION });
        }
        let iteration = r.u32()?;
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let text = r.string()?;
        let model = ModelConfig::from_entries(&config::parse_entries(&text)?)?;
        if model.digest() != digest {
            return Err(corrupt("config digest does not match the stored config"));
        }
        let tensors = r.tensors()?;
        let momentum = r.tensors()?;
        let count = r.len()?;
        let mut batchnorm = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let c = r.len()?;
            let stats = RunningStats { mean: r.floats(c)?, var: r.floats(c)? };
            batchnorm.insert(name, stats);
        }
        if r.pos != buf.len() {
            return Err(corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        let params = ParameterSet { tensors, batchnorm };
        params.check_layout(&Layout::for_config(&model))?;
        for (name, m) in &momentum {
            if params.get(name)?.dims() != m.dims() {
                return Err(corrupt(format!("momentum `{name}` does not match its parameter")));
            }
        }
        Ok(Self { iteration, model, params, momentum })
    }

    /// Snapshot of a training run.
    pub fn from_state(state: &TrainState) -> Result<Self> {
        let iteration = u32::try_from(state.iteration)
            .map_err(|_| Error::invalid(format!("iteration {} does not fit in u32", state.iteration)))?;
        Ok(Self {
            iteration,
            model: state.model.cfg.clone(),
            params: state.model.params.clone(),
            momentum: state.velocity.clone(),
        })
    }

    /// Model and optimizer state to continue or evaluate the run.
    pub fn into_state(self) -> Result<TrainState> {
        Ok(TrainState {
            model: Model::from_parts(self.model, self.params)?,
            velocity: self.momentum,
            iteration: self.iteration as usize,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(Error::at(&tmp))?;
        fs::rename(&tmp, path).map_err(Error::at(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(Error::at(path))?)
    }
}
