//! Versioned binary checkpoints.
//!
//! Layout, little-endian: magic `MDRT`, `u32` version, `u32` metadata
//! length and JSON metadata, `u32` record count, then per record a `u32`
//! name length and name, `u8` dtype, `u32` rank, `u64` dims and the raw
//! values.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::Config;
use super::model::{Model, Routing};
use super::optim::AdamW;
use super::trainer::{Phase, Trainer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synthdata::BrainSample;
use crate::tensor::Array;

pub const MAGIC: &[u8; 4] = b"MDRT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: Config,
    pub phase: u8,
    /// Routing label for phase 2 (`soft_merge`, ..., `single_<i>`).
    pub routing: Option<String>,
    pub spec_hash: String,
    /// Completed optimizer updates.
    pub step: u64,
    pub initial_total: Option<f64>,
    pub dtype: u8,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Array<T>)>,
}

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

impl<T: Scalar> Checkpoint<T> {
    pub fn from_trainer(t: &Trainer<T>) -> Self {
        let mut tensors = t.model.named_values();
        for (k, &id) in t.optim.trainable.iter().enumerate() {
            let name = t.model.params.name(id);
            tensors.push((format!("{M_PREFIX}{name}"), t.optim.m[k].clone()));
            tensors.push((format!("{V_PREFIX}{name}"), t.optim.v[k].clone()));
        }
        let routing = match t.phase {
            Phase::Alignment => None,
            Phase::Routing(r) => Some(r.label()),
        };
        Self {
            meta: CheckpointMeta {
                config: t.config.clone(),
                phase: t.phase.number(),
                routing,
                spec_hash: t.config.corpus.hash(),
                step: t.optim.step,
                initial_total: t.initial_total,
                dtype: T::DTYPE,
            },
            tensors,
        }
    }

    fn tensor(&self, name: &str) -> Option<&Array<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Rebuilds the model described by the metadata and fills in the stored
    /// parameter values.
    pub fn model(&self) -> Result<Model<T>> {
        let mut model = Model::new(&self.meta.config)?;
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let value = self
                .tensor(&name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter `{name}`")))?;
            model.params.set(&name, value.clone())?;
        }
        Ok(model)
    }

    pub fn phase(&self) -> Result<Phase> {
        match (self.meta.phase, &self.meta.routing) {
            (1, None) => Ok(Phase::Alignment),
            (2, Some(r)) => Ok(Phase::Routing(Routing::parse(r)?)),
            (p, r) => Err(Error::invalid(format!("checkpoint has inconsistent phase {p} / routing {r:?}"))),
        }
    }

    /// Resumes training exactly where the checkpoint was taken.
    pub fn trainer(&self, train: &[BrainSample]) -> Result<Trainer<T>> {
        let model = self.model()?;
        let phase = self.phase()?;
        let config = self.meta.config.clone();
        let trainable = model.trainable(phase.frozen());
        let mut optim = AdamW::new(&config.optim, &model.params, trainable.clone());
        optim.step = self.meta.step;
        for (k, &id) in trainable.iter().enumerate() {
            let name = model.params.name(id);
            let get = |prefix: &str| {
                self.tensor(&format!("{prefix}{name}"))
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("checkpoint lacks optimizer state for `{name}`")))
            };
            optim.m[k] = get(M_PREFIX)?;
            optim.v[k] = get(V_PREFIX)?;
        }
        Trainer::restore(config, phase, model, optim, self.meta.initial_total, train)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, a) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE);
            out.extend_from_slice(&(a.rank() as u32).to_le_bytes());
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in a.data() {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::format(path, format!("metadata: {e}")))?;
        if meta.dtype != T::DTYPE {
            return Err(Error::format(
                path,
                format!("checkpoint dtype tag {} does not match the requested {}", meta.dtype, T::DTYPE),
            ));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
            let dtype = r.take(1)?[0];
            if dtype != T::DTYPE {
                return Err(Error::format(path, format!("tensor `{name}` has dtype tag {dtype}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * T::BYTES)?;
            let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            let a = Array::new(shape, data).map_err(|e| Error::format(path, format!("tensor `{name}`: {e}")))?;
            tensors.push((name, a));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after the last tensor"));
        }
        Ok(Self { meta, tensors })
    }

    /// Writes atomically (temp file, then rename) under an exclusive lock
    /// on `<path>.lock`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let lock_path = sidecar(path, "lock");
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| Error::io(&lock_path, e))?;
        lock.lock().map_err(|e| Error::io(&lock_path, e))?;
        let tmp = sidecar(path, "tmp");
        let result = (|| {
            let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
        })();
        let _ = lock.unlock();
        result
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
