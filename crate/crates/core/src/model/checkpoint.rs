use std::path::Path;

use qvsum_autograd::{ParamLayout, ParamStore};
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelShape};
use crate::container;
use crate::error::{Error, Result};
use crate::qencode::Vocab;

const CHECKPOINT_MAGIC: &[u8; 8] = b"QVSCKPT\0";

/// Seed and progress needed to continue the keyed random streams.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epochs_completed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub shape: ModelShape,
    pub vocab: Vocab,
    pub layout: Vec<ParamLayout>,
    pub rng: RngState,
    /// Caller-defined context, e.g. the resolved run configuration.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
    pub rng: RngState,
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let header = CheckpointHeader {
        config: ck.model.config.clone(),
        shape: ck.model.shape,
        vocab: ck.vocab.clone(),
        layout: ck.model.store.layout(),
        rng: ck.rng.clone(),
        extra: ck.extra.clone(),
    };
    container::write(path, CHECKPOINT_MAGIC, &header, &container::f64_bytes(&ck.model.store.flatten()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (h, payload): (CheckpointHeader, _) = container::read(path, CHECKPOINT_MAGIC)?;
    let values = container::bytes_f64(&payload)?;
    let store = ParamStore::from_flat(&h.layout, &values)?;
    let mut model = Model::new(h.config, h.shape)?;
    if model.store.layout() != store.layout() {
        return Err(Error::Checkpoint(format!(
            "{}: parameter layout does not match the {:?} architecture",
            path.display(),
            model.config.variant
        )));
    }
    model.store = store;
    Ok(Checkpoint { model, vocab: h.vocab, rng: h.rng, extra: h.extra })
}
