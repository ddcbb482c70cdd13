//! Binary checkpoints: a `ZEUS1` magic, a little-endian u64 manifest length,
//! a JSON manifest, then every tensor as little-endian f64.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoder::{EncoderError, EncoderParams};
use crate::tensor::Tensor;
use crate::trainer::{HistoryEntry, TrainState};

pub const MAGIC: &[u8; 5] = b"ZEUS1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    /// Byte offset into the blob.
    offset: usize,
    /// Segment length in bytes.
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    config: RunConfig,
    step: u64,
    stream_position: u64,
    history: Vec<HistoryEntry>,
    /// Whether first and second Adam moments follow the parameters.
    has_optimizer: bool,
    tensors: Vec<TensorEntry>,
}

/// A saved run: its configuration and full training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(config: RunConfig, state: TrainState) -> Self {
        Self { config, state }
    }

    pub fn params(&self) -> &EncoderParams {
        &self.state.params
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let layout = self.state.params.config().layout();
        let mut entries = Vec::new();
        let mut offset = 0;
        let groups: [(&str, &[Tensor]); 3] = [
            ("", self.state.params.tensors()),
            ("adam_m.", &self.state.adam_m),
            ("adam_v.", &self.state.adam_v),
        ];
        for (prefix, tensors) in groups {
            for ((name, _), t) in layout.iter().zip(tensors) {
                entries.push(TensorEntry {
                    name: format!("{prefix}{name}"),
                    shape: t.shape(),
                    offset,
                    len: 8 * t.len(),
                });
                offset += 8 * t.len();
            }
        }
        let manifest = Manifest {
            config: self.config.clone(),
            step: self.state.step,
            stream_position: self.state.stream_position,
            history: self.state.history.clone(),
            has_optimizer: true,
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut blob = Vec::with_capacity(offset);
        for (_, tensors) in groups {
            for t in tensors {
                for v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        w.write_all(&blob)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::Magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = usize::try_from(u64::from_le_bytes(len))
            .map_err(|_| CheckpointError::Corrupt("manifest length overflows".into()))?;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let manifest: Manifest = serde_json::from_slice(&json)?;
        manifest
            .config
            .validate()
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;
        if blob.len() % 8 != 0 {
            return Err(CheckpointError::Corrupt("payload is not a whole number of f64".into()));
        }

        let layout = manifest.config.encoder.layout();
        let take = |name: &str, shape: [usize; 2]| -> Result<Tensor> {
            let e = manifest
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| CheckpointError::Corrupt(format!("missing tensor {name}")))?;
            if e.shape != shape || e.len != 8 * shape[0] * shape[1] || e.offset % 8 != 0 {
                return Err(CheckpointError::Corrupt(format!("tensor {name} has shape {:?}", e.shape)));
            }
            let bytes = blob
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {name} runs past the payload")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            Tensor::new(shape[0], shape[1], data).map_err(|e| CheckpointError::Corrupt(e.to_string()))
        };
        let load = |prefix: &str| -> Result<Vec<Tensor>> {
            layout.iter().map(|(n, s)| take(&format!("{prefix}{n}"), *s)).collect()
        };
        let params = EncoderParams::from_tensors(manifest.config.encoder, load("")?)?;
        let mut state = TrainState::new(params);
        if manifest.has_optimizer {
            state.adam_m = load("adam_m.")?;
            state.adam_v = load("adam_v.")?;
        }
        state.step = manifest.step;
        state.stream_position = manifest.stream_position;
        state.history = manifest.history;
        Ok(Self {
            config: manifest.config,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
