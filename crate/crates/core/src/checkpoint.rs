//! Versioned checkpoint container.
//!
//! Layout: the magic `XSKCH01`, a little-endian u32 length, a JSON header
//! (model config, epoch, step, training config, optimizer scalars and the
//! name/shape table), then row-major little-endian f32 payloads: every
//! parameter in table order, followed by the Adam first and second moments
//! in the same order. Parameters and moments are kept at f32 precision
//! during training, so a save/load cycle is exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcvae::{ModelConfig, ParamGroup, SeqCvae};
use crate::tensor::Matrix;
use crate::trainer::{Adam, TrainConfig};

pub const MAGIC: &[u8; 7] = b"XSKCH01";

/// Model, optimizer, and progress counters.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SeqCvae,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub train: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    group: ParamGroup,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    epoch: usize,
    step: u64,
    train: Option<TrainConfig>,
    adam: [f64; 3],
    adam_t: u64,
    tensors: Vec<TensorInfo>,
}

fn put(out: &mut Vec<u8>, m: &Matrix) {
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let raw = self.take(rows * cols * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        Ok(Matrix::from_vec(rows, cols, data))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.model.params();
        let header = Header {
            config: self.model.config().clone(),
            epoch: self.epoch,
            step: self.step,
            train: self.train.clone(),
            adam: [self.optimizer.beta1, self.optimizer.beta2, self.optimizer.eps],
            adam_t: self.optimizer.t,
            tensors: params
                .entries()
                .iter()
                .map(|e| TensorInfo { name: e.name.clone(), group: e.group, shape: [e.value.rows(), e.value.cols()] })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(json.len() + 12 + params.count() * 12);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for e in params.entries() {
            put(&mut out, &e.value);
        }
        for m in self.optimizer.m.iter().chain(&self.optimizer.v) {
            put(&mut out, m);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let len = r.take(4)?;
        let len = u32::from_le_bytes([len[0], len[1], len[2], len[3]]) as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut model = SeqCvae::new(header.config)?;
        if model.params().len() != header.tensors.len() {
            return Err(Error::Checkpoint("parameter table does not match the model".into()));
        }
        let mut named = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            named.push((t.name.clone(), r.matrix(t.shape[0], t.shape[1])?));
        }
        model.load_params(&named)?;
        let mut optimizer = Adam::new(model.params());
        for slot in optimizer.m.iter_mut().chain(optimizer.v.iter_mut()) {
            *slot = r.matrix(slot.rows(), slot.cols())?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        [optimizer.beta1, optimizer.beta2, optimizer.eps] = header.adam;
        optimizer.t = header.adam_t;
        Ok(Self { model, optimizer, epoch: header.epoch, step: header.step, train: header.train })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Wraps a model with a fresh optimizer.
    pub fn from_model(model: SeqCvae) -> Self {
        let optimizer = Adam::new(model.params());
        Self { model, optimizer, epoch: 0, step: 0, train: None }
    }
}
