use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::{best_of, Checkpoint, EpochRecord};
use super::{save_checkpoint, Task, TrainConfig};
use crate::losses::{segmentation_loss_batch, synthesis_loss, ClassWeights, LossValue};
use crate::models::{build_segmentation_model, build_synthesis_model, FeatureExtractor, SegmentationModel, SynthesisModel};
use crate::nn::{Adam, AdamState, Parameterized};
use crate::phantom::derive_seed;
use crate::sampler::{
    augment, extract_window, segmentation_specs, support_of, synthesis_specs, window_rng, WindowSpec,
};
use crate::volume::{LabelMap, Mask, Volume};
use crate::{Error, Result};

pub const FINAL_CHECKPOINT: &str = "final.json";
pub const BEST_CHECKPOINT: &str = "best.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Segmentation training pair: network input and ground-truth labels.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub id: String,
    pub input: Volume,
    pub labels: LabelMap,
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub id: String,
    pub mprage: Volume,
    pub wmn: Volume,
    pub mask: Mask,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub final_path: PathBuf,
    pub best_path: Option<PathBuf>,
}

trait Job {
    type Model: Parameterized<f32>;
    fn windows(&self) -> &[WindowSpec];
    fn subject(&self, spec: &WindowSpec) -> &str;
    /// Forward, loss, and gradient accumulation for one batch of windows
    /// (indices into `windows()`, each with its own augmentation stream).
    fn train_batch(&self, model: &mut Self::Model, batch: &mut [(usize, ChaCha8Rng)]) -> Result<Step>;
    fn validate(&self, model: &Self::Model) -> Result<Option<f64>>;
}

/// Outcome of one batch. `loss` is on a per-window scale (the batch mean);
/// the accumulated gradients are multiplied by `grad_scale` before the update.
struct Step {
    loss: LossValue,
    grad_scale: f64,
    /// Window whose loss was non-finite, when it can be pinned to one.
    culprit: Option<usize>,
}

struct SegJob<'a> {
    cfg: &'a TrainConfig,
    train: &'a [SegSample],
    val: &'a [SegSample],
    weights: ClassWeights,
    windows: Vec<WindowSpec>,
}

impl SegJob<'_> {
    /// Loss of one subject with all of its windows stacked as one batch.
    fn subject_loss(&self, model: &SegmentationModel<f32>, sample: &SegSample) -> Result<f64> {
        let geom = self.cfg.geometry();
        let mut thal = Vec::new();
        let mut nuclei = Vec::new();
        let mut labels = Vec::new();
        for spec in segmentation_specs(&support_of(&sample.input), &geom, 0)? {
            let w = extract_window(&spec, geom.size, &[&sample.input], Some(&sample.labels));
            let out = model.forward(&w.image)?;
            labels.push(w.center_labels().expect("labels attached"));
            thal.push(out.thalamus);
            nuclei.push(out.nuclei);
        }
        let thal: Vec<_> = thal.iter().collect();
        let nuclei: Vec<_> = nuclei.iter().collect();
        let (lv, _, _) = segmentation_loss_batch(self.cfg.segmentation.loss, &thal, &nuclei, &labels, &self.weights)?;
        Ok(lv.total)
    }
}

impl Job for SegJob<'_> {
    type Model = SegmentationModel<f32>;

    fn windows(&self) -> &[WindowSpec] {
        &self.windows
    }

    fn subject(&self, spec: &WindowSpec) -> &str {
        &self.train[spec.subject].id
    }

    fn train_batch(&self, model: &mut Self::Model, batch: &mut [(usize, ChaCha8Rng)]) -> Result<Step> {
        let mut caches = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for (i, rng) in batch.iter_mut() {
            let spec = &self.windows[*i];
            let s = &self.train[spec.subject];
            let w = extract_window(spec, self.cfg.network.window, &[&s.input], Some(&s.labels));
            let w = augment(&w, &self.cfg.augmentation, rng);
            labels.push(w.center_labels().expect("labels attached"));
            caches.push(model.forward_train(&w.image)?);
        }
        let thal: Vec<_> = caches.iter().map(|c| &c.output().thalamus).collect();
        let nuclei: Vec<_> = caches.iter().map(|c| &c.output().nuclei).collect();
        let (loss, gt, gn) = segmentation_loss_batch(self.cfg.segmentation.loss, &thal, &nuclei, &labels, &self.weights)?;
        if loss.total.is_finite() {
            for ((cache, gt), gn) in caches.iter().zip(&gt).zip(&gn) {
                model.backward(cache, gt, gn);
            }
        }
        Ok(Step {
            loss,
            grad_scale: 1.0,
            culprit: None,
        })
    }

    fn validate(&self, model: &Self::Model) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let mut sum = 0.0;
        for s in self.val {
            sum += self.subject_loss(model, s)?;
        }
        Ok(Some(sum / self.val.len() as f64))
    }
}

struct SynthJob<'a> {
    cfg: &'a TrainConfig,
    train: &'a [SynthSample],
    val: &'a [SynthSample],
    extractor: FeatureExtractor<f32>,
    windows: Vec<WindowSpec>,
}

impl Job for SynthJob<'_> {
    type Model = SynthesisModel<f32>;

    fn windows(&self) -> &[WindowSpec] {
        &self.windows
    }

    fn subject(&self, spec: &WindowSpec) -> &str {
        &self.train[spec.subject].id
    }

    fn train_batch(&self, model: &mut Self::Model, batch: &mut [(usize, ChaCha8Rng)]) -> Result<Step> {
        let mut parts: BTreeMap<String, f64> = BTreeMap::new();
        let n = batch.len() as f64;
        for (i, rng) in batch.iter_mut() {
            let spec = &self.windows[*i];
            let s = &self.train[spec.subject];
            let w = extract_window(spec, self.cfg.network.window, &[&s.mprage, &s.wmn], None);
            let w = augment(&w, &self.cfg.augmentation, rng);
            let cache = model.forward_train(&w.channel(0))?;
            let (lv, g) = synthesis_loss(&w.center(1), cache.output(), &self.extractor)?;
            if !lv.total.is_finite() {
                return Ok(Step {
                    loss: lv,
                    grad_scale: 0.0,
                    culprit: Some(*i),
                });
            }
            model.backward(&cache, &g);
            for (k, v) in lv.components {
                *parts.entry(k).or_default() += v / n;
            }
        }
        Ok(Step {
            loss: LossValue::from_parts(parts.into_iter().collect()),
            grad_scale: 1.0 / n,
            culprit: None,
        })
    }

    fn validate(&self, model: &Self::Model) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let geom = self.cfg.geometry();
        let mut sum = 0.0;
        let mut n = 0usize;
        for s in self.val {
            let specs = synthesis_specs(&s.mask, &geom, self.cfg.windows.min_mask_fraction, self.cfg.windows.z_stride, 0)?;
            for spec in specs {
                let w = extract_window(&spec, geom.size, &[&s.mprage, &s.wmn], None);
                let out = model.forward(&w.channel(0))?;
                sum += synthesis_loss(&w.center(1), &out, &self.extractor)?.0.total;
                n += 1;
            }
        }
        Ok((n > 0).then(|| sum / n as f64))
    }
}

#[derive(Serialize)]
struct LogLine<'a> {
    task: &'a str,
    epoch: usize,
    lr: f64,
    train_loss: f64,
    val_loss: Option<f64>,
    wall_time: f64,
}

fn check_resume(cfg: &TrainConfig, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.task != cfg.task {
        return Err(Error::Checkpoint(format!(
            "cannot resume a {} run from a {} checkpoint",
            cfg.task.name(),
            ckpt.task.name()
        )));
    }
    if ckpt.config_hash != cfg.hash() {
        return Err(Error::Checkpoint(
            "configuration differs from the checkpoint's (only `epochs` may change when resuming)".into(),
        ));
    }
    Ok(())
}

fn run<J: Job>(
    job: &J,
    cfg: &TrainConfig,
    model: &mut J::Model,
    resume: Option<&Checkpoint>,
    out: &Path,
    decorate: impl Fn(&mut Checkpoint),
) -> Result<TrainOutcome> {
    let n = job.windows().len();
    if n == 0 {
        return Err(Error::EmptyDataset(format!("no {} training windows", cfg.task.name())));
    }
    let adam = Adam {
        beta1: cfg.optimizer.beta1,
        beta2: cfg.optimizer.beta2,
        eps: cfg.optimizer.eps,
    };
    let mut state = AdamState::for_model(model);
    let mut history = Vec::new();
    let mut start = 0;
    if let Some(ckpt) = resume {
        check_resume(cfg, ckpt)?;
        ckpt.restore(model)?;
        state = ckpt.adam.clone();
        history = ckpt.history.clone();
        start = ckpt.epochs_done;
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(TRAIN_LOG);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let final_path = out.join(FINAL_CHECKPOINT);
    let best_path = out.join(BEST_CHECKPOINT);
    let clock = Instant::now();
    let (mut best, _) = best_of(&history);
    log::info!(
        "{} training: {} windows/epoch, {} parameters, epochs {}..{}",
        cfg.task.name(),
        n,
        model.num_parameters(),
        start,
        cfg.epochs
    );

    for epoch in start..cfg.epochs {
        let lr = cfg.optimizer.lr_at(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", epoch as u64)));
        let mut total = 0.0;
        let mut components: BTreeMap<String, f64> = BTreeMap::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            model.zero_grad();
            let mut items: Vec<(usize, ChaCha8Rng)> = chunk
                .iter()
                .map(|&i| (i, window_rng(cfg.seed, epoch as u64, i as u64)))
                .collect();
            let step = job.train_batch(model, &mut items)?;
            if !step.loss.total.is_finite() {
                let parts: Vec<String> = step.loss.components.iter().map(|(k, v)| format!("{k}={v}")).collect();
                let at = |i: usize| {
                    let spec = &job.windows()[i];
                    format!(
                        "window {i} (subject {}, corner {},{}, slice {})",
                        job.subject(spec),
                        spec.x,
                        spec.y,
                        spec.z_center
                    )
                };
                let place = match step.culprit {
                    Some(i) => at(i),
                    None => chunk.iter().map(|&i| at(i)).collect::<Vec<_>>().join("; "),
                };
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("{place}: {}", parts.join(", ")),
                });
            }
            let k = chunk.len() as f64;
            total += step.loss.total * k;
            for (name, v) in &step.loss.components {
                *components.entry(name.clone()).or_default() += v * k;
            }
            adam.step(model, &mut state, lr, step.grad_scale);
        }
        let train_loss = total / n as f64;
        components.values_mut().for_each(|v| *v /= n as f64);
        let val_loss = job.validate(model)?;
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_loss,
            train_components: components,
        });
        let line = LogLine {
            task: cfg.task.name(),
            epoch,
            lr,
            train_loss,
            val_loss,
            wall_time: clock.elapsed().as_secs_f64(),
        };
        writeln!(log, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(&log_path, e))?;
        log::info!(
            "epoch {epoch}: lr {lr:.3e} train {train_loss:.5} val {}",
            val_loss.map_or("-".into(), |v| format!("{v:.5}"))
        );

        let improved = matches!((val_loss, best), (Some(v), None) if v.is_finite())
            || matches!((val_loss, best), (Some(v), Some(b)) if v < b);
        let last = epoch + 1 == cfg.epochs;
        if improved || last || (epoch + 1) % cfg.checkpoint_every == 0 {
            let mut ckpt = Checkpoint::capture(cfg, model, &state, epoch + 1, &history);
            decorate(&mut ckpt);
            if improved {
                best = val_loss;
                save_checkpoint(&ckpt, &best_path)?;
            }
            if last || (epoch + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(&ckpt, &final_path)?;
            }
        }
    }
    let mut ckpt = Checkpoint::capture(cfg, model, &state, cfg.epochs.max(start), &history);
    decorate(&mut ckpt);
    if start >= cfg.epochs {
        save_checkpoint(&ckpt, &final_path)?;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        final_path,
        best_path: best_path.exists().then_some(best_path),
    })
}

/// Trains the dual-head segmentation network on 2.5D slabs of `train`,
/// optionally resuming from a checkpoint of the same configuration.
pub fn train_segmentation(
    cfg: &TrainConfig,
    train: &[SegSample],
    val: &[SegSample],
    out: &Path,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.task != Task::Segmentation {
        return Err(Error::Config("train_segmentation needs task = \"segmentation\"".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset("no segmentation training subjects".into()));
    }
    for s in train.iter().chain(val) {
        s.input.grid().check_same(s.labels.grid())?;
    }
    let geom = cfg.geometry();
    let mut windows = Vec::new();
    for (i, s) in train.iter().enumerate() {
        windows.extend(segmentation_specs(&support_of(&s.input), &geom, i)?);
    }
    let weights = match &cfg.segmentation.class_weights {
        Some(w) => ClassWeights::user(w.clone())?,
        None => ClassWeights::inverse_frequency(train.iter().map(|s| &s.labels)),
    };
    let job = SegJob {
        cfg,
        train,
        val,
        weights: weights.clone(),
        windows,
    };
    let mut model = build_segmentation_model::<f32>(&cfg.network, cfg.seed)?;
    run(&job, cfg, &mut model, resume, out, |c| c.class_weights = Some(weights.clone()))
}

/// Trains the MPRAGE-to-WMn synthesis network on in-mask 2.5D patches.
pub fn train_synthesis(
    cfg: &TrainConfig,
    train: &[SynthSample],
    val: &[SynthSample],
    out: &Path,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.task != Task::Synthesis {
        return Err(Error::Config("train_synthesis needs task = \"synthesis\"".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset("no synthesis training subjects".into()));
    }
    for s in train.iter().chain(val) {
        s.mprage.grid().check_same(s.wmn.grid())?;
        s.mprage.grid().check_same(s.mask.grid())?;
    }
    let geom = cfg.geometry();
    let mut windows = Vec::new();
    for (i, s) in train.iter().enumerate() {
        windows.extend(synthesis_specs(
            &s.mask,
            &geom,
            cfg.windows.min_mask_fraction,
            cfg.windows.z_stride,
            i,
        )?);
    }
    let extractor = cfg.synthesis.build_extractor()?;
    let source = extractor.source.clone();
    let job = SynthJob {
        cfg,
        train,
        val,
        extractor,
        windows,
    };
    let mut model = build_synthesis_model::<f32>(&cfg.network, cfg.seed)?;
    run(&job, cfg, &mut model, resume, out, |c| c.extractor = Some(source.clone()))
}
