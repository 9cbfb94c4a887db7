use std::time::Instant;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, Task};
use crate::models::{build_segmentation_model, build_synthesis_model, SegmentationModel, SynthesisModel};
use crate::sampler::{crop_region, extract_window, segmentation_specs, support_of, Stitcher, WindowGeometry};
use crate::volume::{LabelMap, Mask, Provenance, Volume, NUM_CLASSES};
use crate::{Error, Result};

/// Thalamus mask and nuclei labels predicted for one volume.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPrediction {
    pub thalamus: Mask,
    /// Per-voxel argmax of the nuclei head (the reported variant).
    pub labels: LabelMap,
    /// `labels` with everything outside the thalamus mask set to background.
    pub gated: LabelMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Segment the native MPRAGE.
    Ncs,
    /// Synthesize WMn from MPRAGE first, then segment the synthesized image.
    Scs,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Ncs => "ncs",
            Mode::Scs => "scs",
        }
    }
}

/// A trained network together with the window geometry it runs on.
#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub geometry: WindowGeometry,
}

#[derive(Debug, Clone)]
pub struct Models {
    pub segmentation: Trained<SegmentationModel<f32>>,
    pub synthesis: Option<Trained<SynthesisModel<f32>>>,
}

impl Models {
    pub fn from_checkpoints(segmentation: &Checkpoint, synthesis: Option<&Checkpoint>) -> Result<Models> {
        Ok(Models {
            segmentation: segmentation_from(segmentation)?,
            synthesis: synthesis.map(synthesis_from).transpose()?,
        })
    }
}

fn expect_task(ckpt: &Checkpoint, task: Task) -> Result<()> {
    if ckpt.task != task {
        return Err(Error::Checkpoint(format!(
            "expected a {} checkpoint, got {}",
            task.name(),
            ckpt.task.name()
        )));
    }
    Ok(())
}

pub fn segmentation_from(ckpt: &Checkpoint) -> Result<Trained<SegmentationModel<f32>>> {
    expect_task(ckpt, Task::Segmentation)?;
    let mut model = build_segmentation_model::<f32>(&ckpt.config.network, ckpt.config.seed)?;
    ckpt.restore(&mut model)?;
    Ok(Trained {
        model,
        geometry: ckpt.config.geometry(),
    })
}

pub fn synthesis_from(ckpt: &Checkpoint) -> Result<Trained<SynthesisModel<f32>>> {
    expect_task(ckpt, Task::Synthesis)?;
    let mut model = build_synthesis_model::<f32>(&ckpt.config.network, ckpt.config.seed)?;
    ckpt.restore(&mut model)?;
    Ok(Trained {
        model,
        geometry: ckpt.config.geometry(),
    })
}

/// Synthesized WMn on the input grid: every slice predicted once per
/// in-plane window, overlaps averaged, clamped to [0, 1], zero off-mask.
pub fn predict_synthesis(net: &Trained<SynthesisModel<f32>>, mprage: &Volume, mask: &Mask) -> Result<Volume> {
    mprage.grid().check_same(mask.grid())?;
    let geom = &net.geometry;
    let support = mask.data();
    let specs = segmentation_specs(support, geom, 0)?;
    let (lo, hi) = crop_region(support, geom.size)?;
    let mut stitch = Stitcher::new(mprage.shape(), 1).with_region(lo, hi);
    for spec in &specs {
        let w = extract_window(spec, geom.size, &[mprage], None);
        stitch.add(spec, &net.model.forward(&w.image)?);
    }
    let maps = stitch.finish(&[0.0], false)?;
    let mut out = maps.channel(0);
    ndarray::Zip::from(&mut out).and(support).for_each(|v, &m| {
        *v = if m { v.clamp(0.0, 1.0) } else { 0.0 };
    });
    Volume::new(out, mprage.grid().clone(), Provenance::Synthesized)
}

/// Slab-wise segmentation of a preprocessed volume. Windows tile the
/// nonzero region; voxels outside it are background.
pub fn predict_labels(net: &Trained<SegmentationModel<f32>>, volume: &Volume) -> Result<LabelPrediction> {
    let geom = &net.geometry;
    let support = support_of(volume);
    let specs = segmentation_specs(&support, geom, 0)?;
    let (lo, hi) = crop_region(&support, geom.size)?;
    let shape = volume.shape();
    let mut thal = Stitcher::new(shape, 1).with_region(lo, hi);
    let mut nuclei = Stitcher::new(shape, NUM_CLASSES).with_region(lo, hi);
    for spec in &specs {
        let w = extract_window(spec, geom.size, &[volume], None);
        let out = net.model.forward(&w.image)?;
        thal.add(spec, &out.thalamus);
        nuclei.add(spec, &out.nuclei);
    }
    let mut fill = vec![0.0; NUM_CLASSES];
    fill[0] = 1.0;
    let thal = thal.finish(&[0.0], false)?.channel(0).mapv(|p| p >= 0.5);
    let labels = nuclei.finish(&fill, false)?.argmax();
    let gated = Array3::from_shape_fn(labels.dim(), |i| if thal[i] { labels[i] } else { 0 });
    let grid = volume.grid().clone();
    Ok(LabelPrediction {
        thalamus: Mask::new(thal, grid.clone())?,
        labels: LabelMap::new(labels, grid.clone())?,
        gated: LabelMap::new(gated, grid)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub mode: Mode,
    pub synthesized: Option<Volume>,
    pub prediction: LabelPrediction,
    pub timing: Vec<StageTiming>,
}

/// NCS segments the MPRAGE directly; SCS synthesizes WMn inside the brain
/// mask (the MPRAGE support when `mask` is `None`) and segments that.
pub fn run_pipeline(mode: Mode, models: &Models, mprage: &Volume, mask: Option<&Mask>) -> Result<PipelineResult> {
    let mut timing = Vec::new();
    let synthesized = match mode {
        Mode::Ncs => None,
        Mode::Scs => {
            let net = models.synthesis.as_ref().ok_or_else(|| {
                Error::MissingCheckpoint("SCS inference needs a synthesis checkpoint".into())
            })?;
            let own;
            let mask = match mask {
                Some(m) => m,
                None => {
                    own = Mask::new(support_of(mprage), mprage.grid().clone())?;
                    &own
                }
            };
            let t = Instant::now();
            let syn = predict_synthesis(net, mprage, mask)?;
            timing.push(StageTiming {
                stage: "synthesis".into(),
                seconds: t.elapsed().as_secs_f64(),
            });
            Some(syn)
        }
    };
    let t = Instant::now();
    let prediction = predict_labels(&models.segmentation, synthesized.as_ref().unwrap_or(mprage))?;
    timing.push(StageTiming {
        stage: "segmentation".into(),
        seconds: t.elapsed().as_secs_f64(),
    });
    Ok(PipelineResult {
        mode,
        synthesized,
        prediction,
        timing,
    })
}
