//! Training loops, checkpoints, and the NCS/SCS inference pipelines.

mod checkpoint;
mod infer;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::losses::SegLossKind;
use crate::models::{FeatureExtractor, NetConfig};
use crate::sampler::{AugmentationParams, WindowGeometry};
use crate::volume::{LabelMap, Mask, Volume};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, EpochRecord, TensorRecord};
pub use infer::{
    predict_labels, predict_synthesis, run_pipeline, segmentation_from, synthesis_from, LabelPrediction, Mode, Models,
    PipelineResult, StageTiming, Trained,
};
pub use train::{
    train_segmentation, train_synthesis, SegSample, SynthSample, TrainOutcome, BEST_CHECKPOINT, FINAL_CHECKPOINT,
    TRAIN_LOG,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Synthesis,
    Segmentation,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Synthesis => "synthesis",
            Task::Segmentation => "segmentation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `lr0 / (1 + decay * epoch)`, epoch counted from 0.
    #[default]
    InverseTime,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub decay: f64,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.001,
            decay: 0.1,
            schedule: Schedule::InverseTime,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::InverseTime => self.lr / (1.0 + self.decay * epoch as f64),
            Schedule::Constant => self.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// In-plane stride; half the window when absent.
    pub stride: Option<[usize; 2]>,
    /// Synthesis patches need this fraction of the center slice in the brain.
    pub min_mask_fraction: f64,
    /// Synthesis patches use every `z_stride`-th interior slice as center.
    pub z_stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            stride: None,
            min_mask_fraction: 0.5,
            z_stride: 1,
        }
    }
}

/// Which volume feeds the segmentation network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SegInput {
    /// Native contrast (NCS).
    #[default]
    Mprage,
    /// WMn synthesized from MPRAGE by a trained synthesis model (SCS).
    Synthesized,
    /// Acquired WMn, when available.
    Wmn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationConfig {
    pub loss: SegLossKind,
    pub input: SegInput,
    /// Needed when `input = "synthesized"`.
    pub synthesis_checkpoint: Option<PathBuf>,
    /// Explicit WCCE class weights; inverse frequency over the training
    /// labels when absent.
    pub class_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorChoice {
    /// Pretrained weights from the cache directory when present, otherwise
    /// fixed-random.
    #[default]
    Auto,
    FixedRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub extractor: ExtractorChoice,
    pub extractor_seed: u64,
    pub extractor_widths: [usize; 2],
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            extractor: ExtractorChoice::Auto,
            extractor_seed: 0,
            extractor_widths: [64, 128],
        }
    }
}

impl SynthesisConfig {
    pub fn build_extractor(&self) -> Result<FeatureExtractor<f32>> {
        match self.extractor {
            ExtractorChoice::Auto => FeatureExtractor::from_cache_or_random(self.extractor_seed, self.extractor_widths),
            ExtractorChoice::FixedRandom => Ok(FeatureExtractor::fixed_random(
                self.extractor_seed,
                self.extractor_widths,
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of subject folders; relative paths resolve against the
    /// config file's directory.
    pub root: PathBuf,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub network: NetConfig,
    #[serde(default)]
    pub windows: WindowConfig,
    #[serde(default)]
    pub augmentation: AugmentationParams,
    #[serde(default)]
    pub segmentation: SegmentationConfig,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub data: DataConfig,
}

fn default_epochs() -> usize {
    50
}

fn default_batch() -> usize {
    10
}

fn default_checkpoint_every() -> usize {
    1
}

impl TrainConfig {
    pub fn new(task: Task) -> TrainConfig {
        TrainConfig {
            task,
            seed: 0,
            epochs: default_epochs(),
            batch_size: default_batch(),
            checkpoint_every: default_checkpoint_every(),
            optimizer: OptimizerConfig::default(),
            network: NetConfig::default(),
            windows: WindowConfig::default(),
            augmentation: AugmentationParams::default(),
            segmentation: SegmentationConfig::default(),
            synthesis: SynthesisConfig::default(),
            data: DataConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; a relative data root is resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<TrainConfig> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainConfig::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.data.root.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data.root = dir.join(&cfg.data.root);
            }
        }
        if let Some(p) = &cfg.segmentation.synthesis_checkpoint {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.segmentation.synthesis_checkpoint = Some(dir.join(p));
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", o.lr));
        }
        if !(o.decay >= 0.0) {
            return bad("decay must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("Adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        self.network.validate()?;
        self.geometry().validate()?;
        self.augmentation.validate()?;
        if !(0.0..=1.0).contains(&self.windows.min_mask_fraction) {
            return bad("min_mask_fraction must lie in [0, 1]".into());
        }
        if self.windows.z_stride == 0 {
            return bad("z_stride must be at least 1".into());
        }
        if let Some(w) = &self.segmentation.class_weights {
            crate::losses::ClassWeights::user(w.clone())?;
        }
        if self.synthesis.extractor_widths.contains(&0) {
            return bad("extractor widths must be positive".into());
        }
        if let Some(id) = self.data.train.iter().find(|id| self.data.val.contains(id)) {
            return bad(format!("subject {id} is in both the training and validation lists"));
        }
        Ok(())
    }

    pub fn geometry(&self) -> WindowGeometry {
        let size = self.network.window;
        match self.windows.stride {
            Some(stride) => WindowGeometry { size, stride },
            None => WindowGeometry::with_default_stride(size),
        }
    }

    /// Hash of everything except the epoch budget, so a run extended by
    /// resuming keeps its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// One subject held in memory.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub mprage: Volume,
    pub wmn: Option<Volume>,
    pub labels: Option<LabelMap>,
    pub brain_mask: Mask,
}

impl Subject {
    /// Reads the standard subject layout; WMn and labels are optional.
    pub fn load(root: &Path, id: &str) -> Result<Subject> {
        let p = crate::layout::SubjectPaths::new(root, id);
        let mprage = crate::volume::load_volume(&p.mprage())?;
        let wmn = p.wmn().exists().then(|| crate::volume::load_volume(&p.wmn())).transpose()?;
        let labels = p.labels().exists().then(|| LabelMap::load(&p.labels())).transpose()?;
        let brain_mask = if p.brain_mask().exists() {
            Mask::load(&p.brain_mask())?
        } else {
            Mask::new(mprage.data().mapv(|v| v != 0.0), mprage.grid().clone())?
        };
        mprage.grid().check_same(brain_mask.grid())?;
        Ok(Subject {
            id: id.to_string(),
            mprage,
            wmn,
            labels,
            brain_mask,
        })
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults() {
        let c = TrainConfig::from_toml_str("task = \"segmentation\"").unwrap();
        assert_eq!((c.epochs, c.batch_size), (50, 10));
        assert_eq!(c.optimizer.lr, 0.001);
        assert_eq!(c.optimizer.decay, 0.1);
        assert!((c.optimizer.lr_at(0) - 0.001).abs() < 1e-15);
        assert!((c.optimizer.lr_at(10) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn schema_violations_are_rejected() {
        assert!(TrainConfig::from_toml_str("task = \"segmentation\"\nlearning_rate = 1").is_err());
        assert!(TrainConfig::from_toml_str("task = \"segmentation\"\nepochs = 0").is_err());
        assert!(TrainConfig::from_toml_str("task = \"segmentation\"\n[network]\ndepth = 4\nwindow = [100, 96]").is_err());
        let dup = "task = \"synthesis\"\n[data]\ntrain = [\"a\", \"b\"]\nval = [\"b\"]";
        assert!(TrainConfig::from_toml_str(dup).is_err());
    }

    #[test]
    fn hash_ignores_epoch_budget() {
        let a = TrainConfig::new(Task::Synthesis);
        let mut b = a.clone();
        b.epochs = 3;
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
