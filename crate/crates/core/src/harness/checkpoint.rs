//! Binary checkpoints: `OABNCKPT`, a u32 format version, a u64 header
//! length, a JSON header, then every tensor as little-endian f32 in header
//! order (parameters, first moments, second moments).

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::optim::{Optimizer, OptimizerMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"OABNCKPT";
const VERSION: u32 = 1;

/// Enough of a ChaCha stream to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position, as a decimal string for JSON.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad RNG word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    config_hash: String,
    epoch: usize,
    classes: Vec<String>,
    rng: RngState,
    params: Vec<TensorEntry>,
    optimizer: OptimizerMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub config_hash: String,
    /// Completed epochs; 0 is the initialization.
    pub epoch: usize,
    pub classes: Vec<String>,
    pub rng: RngState,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Optimizer<f32>,
}

fn push_tensor(buf: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            classes: self.classes.clone(),
            rng: self.rng.clone(),
            params: self
                .params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            optimizer: self.optimizer.meta(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, t) in &self.params {
            push_tensor(&mut buf, t);
        }
        for t in self.optimizer.first.iter().chain(&self.optimizer.second) {
            push_tensor(&mut buf, t);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + len)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut rest = &bytes[20 + len..];
        let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            if rest.len() < 4 * n {
                return Err(bad("truncated tensor data"));
            }
            let (head, tail) = rest.split_at(4 * n);
            rest = tail;
            let data = head
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::from_vec(shape, data)
        };
        let mut params = Vec::with_capacity(header.params.len());
        for e in &header.params {
            params.push((e.name.clone(), take(&e.shape)?));
        }
        let meta = &header.optimizer;
        let per_set = header.params.len();
        if !meta.buffers.is_multiple_of(per_set.max(1)) || meta.buffers > 2 * per_set {
            return Err(bad("optimizer buffer count does not match the parameters"));
        }
        let mut first = Vec::new();
        let mut second = Vec::new();
        for i in 0..meta.buffers {
            let t = take(&header.params[i % per_set].shape)?;
            if i < per_set {
                first.push(t);
            } else {
                second.push(t);
            }
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let o = &header.config.optim;
        Ok(Self {
            optimizer: Optimizer {
                kind: meta.kind,
                lr: o.lr,
                weight_decay: o.weight_decay,
                momentum: o.momentum,
                step: meta.step,
                first,
                second,
            },
            config: header.config,
            config_hash: header.config_hash,
            epoch: header.epoch,
            classes: header.classes,
            rng: header.rng,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
