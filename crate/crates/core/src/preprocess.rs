//! Intensity normalization and adapters for the external preprocessing tools
//! (affine registration, brain extraction, bias-field correction).

use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{load_volume, Mask, Provenance, Volume};

/// How percentile bounds are read off the sorted in-mask intensities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PercentileMethod {
    /// Linear interpolation between neighbouring order statistics.
    Linear,
    /// Nearest order statistic outside the requested rank (floor for the
    /// lower bound, ceil for the upper). Makes the stretch idempotent.
    #[default]
    Outward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub name: String,
    pub params: Vec<(String, String)>,
}

/// Ordered log of what was applied to a subject's images.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessRecord {
    steps: Vec<StepRecord>,
    pub percentiles: Option<PercentileBounds>,
    pub brain_mask: Option<String>,
}

impl PreprocessRecord {
    pub fn push(&mut self, name: &str, params: Vec<(String, String)>) {
        self.steps.push(StepRecord {
            name: name.to_string(),
            params,
        });
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentileBounds {
    pub p_low: f64,
    pub p_high: f64,
    pub v_low: f64,
    pub v_high: f64,
}

#[derive(Debug, Clone)]
pub struct Stretched {
    pub volume: Volume,
    pub bounds: PercentileBounds,
    /// Set when the in-mask intensities are constant; the output is all zeros.
    pub degenerate: bool,
}

/// Percentile of already-sorted values.
pub fn percentile_sorted(sorted: &[f64], p: f64, method: PercentileMethod, upper: bool) -> f64 {
    let n = sorted.len();
    let rank = p / 100.0 * (n - 1) as f64;
    match method {
        PercentileMethod::Linear => {
            let lo = rank.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let t = rank - lo as f64;
            sorted[lo] + t * (sorted[hi] - sorted[lo])
        }
        PercentileMethod::Outward => {
            let idx = if upper { rank.ceil() } else { rank.floor() } as usize;
            sorted[idx.min(n - 1)]
        }
    }
}

/// Histogram-based contrast stretching: clip in-mask intensities to the
/// `[p_low, p_high]` percentile range and map it affinely onto `[0, 1]`.
/// Voxels outside the mask become 0.
pub fn contrast_stretch(
    volume: &Volume,
    mask: &Mask,
    p_low: f64,
    p_high: f64,
    method: PercentileMethod,
) -> Result<Stretched> {
    volume.grid().check_same(mask.grid())?;
    if !(0.0..100.0).contains(&p_low) || !(p_low < p_high && p_high <= 100.0) {
        return Err(Error::InvalidVolume(format!(
            "percentile bounds must satisfy 0 <= p_low < p_high <= 100, got ({p_low}, {p_high})"
        )));
    }
    let mut inside: Vec<f64> = Zip::from(volume.data())
        .and(mask.data())
        .fold(Vec::new(), |mut acc, &v, &m| {
            if m {
                acc.push(v as f64);
            }
            acc
        });
    if inside.is_empty() {
        return Err(Error::EmptyMask("contrast stretching needs a nonempty brain mask".into()));
    }
    inside.sort_by(f64::total_cmp);
    let v_low = percentile_sorted(&inside, p_low, method, false);
    let v_high = percentile_sorted(&inside, p_high, method, true);
    let bounds = PercentileBounds {
        p_low,
        p_high,
        v_low,
        v_high,
    };
    let degenerate = v_high <= v_low;
    if degenerate {
        log::warn!("constant intensities inside mask ({v_low}); stretched volume is all zeros");
    }
    let range = v_high - v_low;
    let mut out = volume.data().clone();
    Zip::from(&mut out).and(mask.data()).for_each(|v, &m| {
        *v = if !m || degenerate {
            0.0
        } else {
            ((*v as f64).clamp(v_low, v_high) - v_low) as f32 / range as f32
        };
        // guard against f32 rounding just past the unit interval
        *v = v.clamp(0.0, 1.0);
    });
    let volume = Volume::new(out, volume.grid().clone(), Provenance::Preprocessed)?;
    Ok(Stretched {
        volume,
        bounds,
        degenerate,
    })
}

pub fn apply_mask(volume: &Volume, mask: &Mask) -> Result<Volume> {
    volume.grid().check_same(mask.grid())?;
    let mut out = volume.data().clone();
    Zip::from(&mut out).and(mask.data()).for_each(|v, &m| {
        if !m {
            *v = 0.0;
        }
    });
    Volume::new(out, volume.grid().clone(), volume.provenance())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    AffineRegister,
    BrainExtract,
    BiasCorrect,
}

impl StepKind {
    pub fn name(self) -> &'static str {
        match self {
            StepKind::AffineRegister => "affine_register",
            StepKind::BrainExtract => "brain_extract",
            StepKind::BiasCorrect => "bias_correct",
        }
    }
}

/// Command templates for the external tools. Placeholders: `{in}`, `{out}`,
/// and `{ref}` (registration target).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ToolCommands {
    pub affine_register: Option<String>,
    pub brain_extract: Option<String>,
    pub bias_correct: Option<String>,
}

impl ToolCommands {
    pub fn get(&self, kind: StepKind) -> Option<&str> {
        match kind {
            StepKind::AffineRegister => self.affine_register.as_deref(),
            StepKind::BrainExtract => self.brain_extract.as_deref(),
            StepKind::BiasCorrect => self.bias_correct.as_deref(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum StepOutput {
    Volume(Volume),
    Mask(Mask),
}

/// Runs one external preprocessing tool through `sh -c` and validates that
/// its output lies on the expected grid (the reference grid for
/// registration, the input grid otherwise).
pub fn external_step(
    kind: StepKind,
    input: &Path,
    reference: Option<&Path>,
    output: &Path,
    tools: &ToolCommands,
    record: &mut PreprocessRecord,
) -> Result<StepOutput> {
    let template = tools.get(kind).ok_or_else(|| Error::ToolNotConfigured {
        step: kind.name().to_string(),
    })?;
    if !input.exists() {
        return Err(Error::MissingFile(input.to_path_buf()));
    }
    let expected_grid = match (kind, reference) {
        (StepKind::AffineRegister, Some(r)) => load_volume(r)?.grid().clone(),
        (StepKind::AffineRegister, None) => {
            return Err(Error::ToolFailed {
                step: kind.name().into(),
                reason: "registration needs a reference image".into(),
            })
        }
        _ => load_volume(input)?.grid().clone(),
    };
    let command = template
        .replace("{in}", &shell_quote(input))
        .replace("{out}", &shell_quote(output))
        .replace("{ref}", &reference.map(shell_quote).unwrap_or_default());
    let status = Command::new("sh")
        .arg("-c")
        .arg(&command)
        .output()
        .map_err(|e| Error::ToolFailed {
            step: kind.name().into(),
            reason: format!("could not launch `{command}`: {e}"),
        })?;
    if !status.status.success() {
        return Err(Error::ToolFailed {
            step: kind.name().into(),
            reason: format!(
                "`{command}` exited with {}: {}",
                status.status,
                String::from_utf8_lossy(&status.stderr).trim()
            ),
        });
    }
    if !output.exists() {
        return Err(Error::ToolFailed {
            step: kind.name().into(),
            reason: format!("tool did not write {}", output.display()),
        });
    }
    let produced = load_volume(output)?;
    expected_grid.check_same(produced.grid())?;
    let mut params = vec![
        ("command".to_string(), template.to_string()),
        ("input".to_string(), input.display().to_string()),
        ("output".to_string(), output.display().to_string()),
    ];
    if let Some(r) = reference {
        params.push(("reference".to_string(), r.display().to_string()));
    }
    record.push(kind.name(), params);
    Ok(match kind {
        StepKind::BrainExtract => {
            let mask = produced.data().mapv(|v| v > 0.0);
            record.brain_mask = Some(output.display().to_string());
            StepOutput::Mask(Mask::new(mask, produced.grid().clone())?)
        }
        _ => StepOutput::Volume(produced),
    })
}

fn shell_quote(p: &Path) -> String {
    let s = p.display().to_string();
    format!("'{}'", s.replace('\'', "'\\''"))
}

/// Files produced for one subject by [`preprocess_subject`].
#[derive(Debug, Clone)]
pub struct PreprocessedSubject {
    pub volume: Volume,
    pub mask: Mask,
    pub record: PreprocessRecord,
    pub degenerate: bool,
}

/// Full chain for one contrast: optional registration to `reference`, brain
/// extraction (or a supplied mask), bias correction, then contrast stretching
/// as the final step. With `assume_preprocessed` the external tools are
/// skipped and only stretching runs.
#[allow(clippy::too_many_arguments)]
pub fn preprocess_subject(
    input: &Path,
    reference: Option<&Path>,
    mask: Option<&Mask>,
    work_dir: &Path,
    tools: &ToolCommands,
    assume_preprocessed: bool,
    p_low: f64,
    p_high: f64,
) -> Result<PreprocessedSubject> {
    let mut record = PreprocessRecord::default();
    let mut current: PathBuf = input.to_path_buf();
    let mut brain: Option<Mask> = mask.cloned();
    if !assume_preprocessed {
        std::fs::create_dir_all(work_dir).map_err(|e| Error::io(work_dir, e))?;
        if let Some(r) = reference {
            let out = work_dir.join("registered.nii.gz");
            external_step(StepKind::AffineRegister, &current, Some(r), &out, tools, &mut record)?;
            current = out;
        }
        if brain.is_none() {
            let out = work_dir.join("brain_mask.nii.gz");
            if let StepOutput::Mask(m) =
                external_step(StepKind::BrainExtract, &current, None, &out, tools, &mut record)?
            {
                brain = Some(m);
            }
        }
        let out = work_dir.join("bias_corrected.nii.gz");
        external_step(StepKind::BiasCorrect, &current, None, &out, tools, &mut record)?;
        current = out;
    }
    let volume = load_volume(&current)?;
    let brain = match brain {
        Some(m) => m,
        None => Mask::full(volume.grid()),
    };
    let masked = apply_mask(&volume, &brain)?;
    let stretched = contrast_stretch(&masked, &brain, p_low, p_high, PercentileMethod::default())?;
    record.push(
        "contrast_stretch",
        vec![
            ("p_low".into(), p_low.to_string()),
            ("p_high".into(), p_high.to_string()),
        ],
    );
    record.percentiles = Some(stretched.bounds);
    Ok(PreprocessedSubject {
        volume: stretched.volume,
        mask: brain,
        record,
        degenerate: stretched.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;
    use ndarray::Array3;

    fn ramp_volume() -> (Volume, Mask) {
        // in-mask values 0..=1000 on a 11x7x13 grid (1001 voxels)
        let g = Grid::new([11, 7, 13], [1.0; 3]).unwrap();
        let data = Array3::from_shape_fn((11, 7, 13), |(x, y, z)| (x * 91 + y * 13 + z) as f32);
        (
            Volume::new(data, g.clone(), Provenance::Raw).unwrap(),
            Mask::full(&g),
        )
    }

    #[test]
    fn percentile_oracle_on_ramp() {
        let values: Vec<f64> = (0..=1000).map(|v| v as f64).collect();
        // rank = p/100 * 1000 lands exactly on an order statistic
        assert_eq!(percentile_sorted(&values, 1.0, PercentileMethod::Linear, false), 10.0);
        assert_eq!(percentile_sorted(&values, 99.0, PercentileMethod::Outward, true), 990.0);
        let five: Vec<f64> = vec![0.0, 1.0, 2.0, 3.0, 10.0];
        // rank 0.04 between 0 and 1
        assert!((percentile_sorted(&five, 1.0, PercentileMethod::Linear, false) - 0.04).abs() < 1e-12);
        assert_eq!(percentile_sorted(&five, 1.0, PercentileMethod::Outward, false), 0.0);
        assert_eq!(percentile_sorted(&five, 99.0, PercentileMethod::Outward, true), 10.0);
    }

    #[test]
    fn stretch_ramp_spans_unit_interval() {
        let (v, m) = ramp_volume();
        let s = contrast_stretch(&v, &m, 1.0, 99.0, PercentileMethod::default()).unwrap();
        let out = s.volume.data();
        assert_eq!(s.bounds.v_low, 10.0);
        assert_eq!(s.bounds.v_high, 990.0);
        assert_eq!(out.iter().cloned().fold(f32::MAX, f32::min), 0.0);
        assert_eq!(out.iter().cloned().fold(f32::MIN, f32::max), 1.0);
        for (&before, &after) in v.data().iter().zip(out.iter()) {
            if before < 10.0 {
                assert_eq!(after, 0.0);
            }
        }
        assert!(!s.degenerate);
    }

    #[test]
    fn constant_image_is_degenerate() {
        let g = Grid::new([4, 4, 4], [1.0; 3]).unwrap();
        let v = Volume::new(Array3::from_elem((4, 4, 4), 7.0), g.clone(), Provenance::Raw).unwrap();
        let s = contrast_stretch(&v, &Mask::full(&g), 1.0, 99.0, PercentileMethod::default()).unwrap();
        assert!(s.degenerate);
        assert!(s.volume.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn outlier_is_clipped_without_collapsing_range() {
        let g = Grid::new([10, 10, 10], [1.0; 3]).unwrap();
        let mut data = Array3::from_shape_fn((10, 10, 10), |(x, y, z)| ((x + y + z) % 101) as f32);
        data[[5, 5, 5]] = 1e6;
        let v = Volume::new(data, g.clone(), Provenance::Raw).unwrap();
        let s = contrast_stretch(&v, &Mask::full(&g), 1.0, 99.0, PercentileMethod::default()).unwrap();
        assert!(s.bounds.v_high <= 100.0);
        assert_eq!(s.volume.data()[[5, 5, 5]], 1.0);
        // median voxel keeps a mid-range value
        let mid = s.volume.data()[[5, 5, 4]];
        assert!(mid > 0.05 && mid < 0.95, "{mid}");
    }

    #[test]
    fn empty_mask_is_an_error() {
        let (v, _) = ramp_volume();
        let empty = Mask::new(Array3::from_elem((11, 7, 13), false), v.grid().clone()).unwrap();
        assert!(matches!(
            contrast_stretch(&v, &empty, 1.0, 99.0, PercentileMethod::default()),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn mask_application() {
        let (v, full) = ramp_volume();
        assert_eq!(apply_mask(&v, &full).unwrap(), v);
        let empty = Mask::new(Array3::from_elem((11, 7, 13), false), v.grid().clone()).unwrap();
        assert!(apply_mask(&v, &empty).unwrap().data().iter().all(|&x| x == 0.0));
        let half = Mask::new(Array3::from_shape_fn((11, 7, 13), |(x, _, _)| x < 5), v.grid().clone()).unwrap();
        let out = apply_mask(&v, &half).unwrap();
        for ((x, y, z), &val) in out.data().indexed_iter() {
            let expected = if x < 5 { v.data()[[x, y, z]] } else { 0.0 };
            assert_eq!(val, expected);
        }
        let other = Mask::full(&Grid::new([3, 3, 3], [1.0; 3]).unwrap());
        assert!(apply_mask(&v, &other).is_err());
    }
}
