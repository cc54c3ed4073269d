//! Single-file checkpoints: magic, version, JSON header, raw little-endian
//! f64 payload (parameters in store order, then optimizer moments).

use std::io::Write;
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::autograd::{ParamId, Tensor};
use crate::error::{Error, Result};
use crate::optim::Adam;

const MAGIC: &[u8; 8] = b"TSECKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    /// Parameter indices that carry moments, in payload order.
    moments: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    step: u64,
    params: Vec<TensorMeta>,
    optimizer: Option<OptimizerHeader>,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Model weights, step counter, optional optimizer state and free-form
/// metadata (the trainer stores its configuration there).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    pub optimizer: Option<Adam>,
    pub extra: serde_json::Value,
}

fn put(buf: &mut Vec<u8>, t: &Tensor) {
    for v in t.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_shape_vec(IxDyn(shape), data).unwrap())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.model.store;
        let params = store
            .entries()
            .iter()
            .map(|e| TensorMeta {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
            })
            .collect();
        let optimizer = self.optimizer.as_ref().map(|o| OptimizerHeader {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            t: o.t,
            moments: o.moments().map(|(id, _, _)| id.0).collect(),
        });
        let header = Header {
            model: self.model.config.clone(),
            step: self.step,
            params,
            optimizer,
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for e in store.entries() {
            put(&mut buf, &e.value);
        }
        if let Some(o) = &self.optimizer {
            for (_, m, v) in o.moments() {
                put(&mut buf, m);
                put(&mut buf, v);
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        let mut model = Model::new(header.model)?;
        if header.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, the model config expects {}",
                header.params.len(),
                model.store.len()
            )));
        }
        for (i, meta) in header.params.iter().enumerate() {
            let id = ParamId(i);
            if meta.name != model.store.name(id) || meta.shape != model.store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} is {} {:?}, the model expects {} {:?}",
                    meta.name,
                    meta.shape,
                    model.store.name(id),
                    model.store.get(id).shape()
                )));
            }
            let t = r.tensor(&meta.shape)?;
            model.store.set(id, t);
        }
        let optimizer = match header.optimizer {
            None => None,
            Some(h) => {
                let mut o = Adam::new(h.lr);
                o.beta1 = h.beta1;
                o.beta2 = h.beta2;
                o.eps = h.eps;
                o.t = h.t;
                for &i in &h.moments {
                    if i >= model.store.len() {
                        return Err(Error::Checkpoint(format!("optimizer moment for unknown tensor {i}")));
                    }
                    let shape = model.store.get(ParamId(i)).shape().to_vec();
                    let m = r.tensor(&shape)?;
                    let v = r.tensor(&shape)?;
                    o.set_moments(ParamId(i), m, v);
                }
                Some(o)
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Self {
            model,
            step: header.step,
            optimizer,
            extra: header.extra,
        })
    }

    /// Writes atomically via a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}
