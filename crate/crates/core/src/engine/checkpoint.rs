use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{write_atomic, Task, TrainConfig};
use crate::losses::ClassWeights;
use crate::models::{parameter_checksum, WeightSource};
use crate::nn::{AdamState, Parameterized};
use crate::{Error, Result};

const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Mean of each named loss component over the epoch's training windows.
    pub train_components: BTreeMap<String, f64>,
}

/// Model parameters, optimizer state and history of a training run.
///
/// Window order and augmentation draws are pure functions of
/// `(config.seed, epoch, window index)`, so `epochs_done` together with the
/// seed is the complete random state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub task: Task,
    pub config: TrainConfig,
    pub config_hash: String,
    pub epochs_done: usize,
    pub params: Vec<TensorRecord>,
    pub parameter_checksum: String,
    pub adam: AdamState,
    pub history: Vec<EpochRecord>,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub class_weights: Option<ClassWeights>,
    pub extractor: Option<WeightSource>,
}

impl Checkpoint {
    pub(crate) fn capture<M: Parameterized<f32>>(
        config: &TrainConfig,
        model: &M,
        adam: &AdamState,
        epochs_done: usize,
        history: &[EpochRecord],
    ) -> Checkpoint {
        let params = model
            .params()
            .into_iter()
            .map(|(name, p)| TensorRecord {
                name,
                shape: p.value.shape().to_vec(),
                values: p.value.iter().copied().collect(),
            })
            .collect();
        let (best_val, best_epoch) = best_of(history);
        Checkpoint {
            format: FORMAT,
            task: config.task,
            config: config.clone(),
            config_hash: config.hash(),
            epochs_done,
            params,
            parameter_checksum: parameter_checksum(model),
            adam: adam.clone(),
            history: history.to_vec(),
            best_val,
            best_epoch,
            class_weights: None,
            extractor: None,
        }
    }

    /// Copies stored values into a freshly built model of the same layout.
    pub fn restore<M: Parameterized<f32>>(&self, model: &mut M) -> Result<()> {
        let mut params = model.params_mut();
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                params.len()
            )));
        }
        for ((name, p), rec) in params.iter_mut().zip(&self.params) {
            if *name != rec.name || p.value.shape() != rec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match model tensor {name} {:?}",
                    rec.name,
                    rec.shape,
                    p.value.shape()
                )));
            }
            p.value = ArrayD::from_shape_vec(IxDyn(&rec.shape), rec.values.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        drop(params);
        if parameter_checksum(model) != self.parameter_checksum {
            return Err(Error::Checkpoint("parameter checksum mismatch after restore".into()));
        }
        Ok(())
    }
}

pub(crate) fn best_of(history: &[EpochRecord]) -> (Option<f64>, Option<usize>) {
    let mut best: Option<(f64, usize)> = None;
    for r in history {
        if let Some(v) = r.val_loss {
            if best.is_none_or(|(b, _)| v < b) {
                best = Some((v, r.epoch));
            }
        }
    }
    (best.map(|b| b.0), best.map(|b| b.1))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let json = serde_json::to_vec(ckpt)?;
    write_atomic(path, &json)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.display().to_string()));
    }
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint =
        serde_json::from_slice(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if ckpt.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint format {}",
            path.display(),
            ckpt.format
        )));
    }
    Ok(ckpt)
}
