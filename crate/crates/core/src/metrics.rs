//! Overlap, volume and image-similarity metrics.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::stats::paired_ttest;
use crate::volume::{LabelMap, Mask, Structure, Volume, NUM_STRUCTURES};
use crate::{Error, Result};

/// PSNR reported when the in-mask MSE falls below `1e-10`.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Hard Dice overlap. Two empty masks score 1, one empty mask scores 0.
pub fn dice(g: &Mask, p: &Mask) -> Result<f64> {
    g.grid().check_same(p.grid())?;
    let mut inter = 0usize;
    let mut ng = 0usize;
    let mut np = 0usize;
    for (&a, &b) in g.data().iter().zip(p.data()) {
        ng += a as usize;
        np += b as usize;
        inter += (a && b) as usize;
    }
    Ok(dice_from_counts(inter, ng, np))
}

fn dice_from_counts(inter: usize, ng: usize, np: usize) -> f64 {
    if ng + np == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (ng + np) as f64
    }
}

/// `|V_G - V_P| / V_G * 100`. Not symmetric.
pub fn volume_difference(g: &Mask, p: &Mask) -> Result<f64> {
    g.grid().check_same(p.grid())?;
    let vv = g.grid().voxel_volume_mm3();
    vd_from_volumes(g.count() as f64 * vv, p.count() as f64 * vv)
}

fn vd_from_volumes(vg: f64, vp: f64) -> Result<f64> {
    if vg <= 0.0 {
        return Err(Error::UndefinedMetric(
            "volume difference with an empty ground-truth structure".into(),
        ));
    }
    Ok((vg - vp).abs() / vg * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisScore {
    pub rmse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    /// Number of in-mask voxels the scores cover.
    pub voxels: usize,
}

/// RMSE, PSNR (range 1) and slice-wise 2D SSIM inside `mask`.
pub fn synthesis_metrics(w: &Volume, w_syn: &Volume, mask: &Mask) -> Result<SynthesisScore> {
    w.grid().check_same(w_syn.grid())?;
    w.grid().check_same(mask.grid())?;
    if mask.is_empty() {
        return Err(Error::EmptyMask("synthesis metrics need a nonempty brain mask".into()));
    }
    let mut se = 0.0;
    for ((&a, &b), &m) in w.data().iter().zip(w_syn.data()).zip(mask.data()) {
        if m {
            let d = a as f64 - b as f64;
            se += d * d;
        }
    }
    let n = mask.count();
    let mse = se / n as f64;
    let psnr_db = if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    };

    let mut ssim_sum = 0.0;
    for z in 0..w.shape()[2] {
        let ms = mask.data().index_axis(Axis(2), z);
        if !ms.iter().any(|&m| m) {
            continue;
        }
        let a = w.data().index_axis(Axis(2), z).mapv(f64::from);
        let b = w_syn.data().index_axis(Axis(2), z).mapv(f64::from);
        let map = ssim_map(a.view(), b.view());
        ssim_sum += map.iter().zip(ms).filter(|(_, &m)| m).map(|(s, _)| s).sum::<f64>();
    }
    Ok(SynthesisScore {
        rmse: mse.sqrt(),
        psnr_db,
        ssim: ssim_sum / n as f64,
        voxels: n,
    })
}

fn gaussian_kernel() -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let d = i as f64 - SSIM_RADIUS as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut r = i.rem_euclid(period);
    if r >= n {
        r = period - 1 - r;
    }
    r as usize
}

fn blur(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = SSIM_RADIUS as isize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                s += kv * img[[reflect(i as isize + t as isize - r, h), j]];
            }
            tmp[[i, j]] = s;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                s += kv * tmp[[i, reflect(j as isize + t as isize - r, w)]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

/// Per-pixel SSIM of two images with dynamic range 1.
pub fn ssim_map(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let k = gaussian_kernel();
    let a = a.to_owned();
    let b = b.to_owned();
    let mu_a = blur(&a, &k);
    let mu_b = blur(&b, &k);
    let aa = blur(&(&a * &a), &k);
    let bb = blur(&(&b * &b), &k);
    let ab = blur(&(&a * &b), &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut out = Array2::<f64>::zeros(a.dim());
    ndarray::Zip::from(&mut out)
        .and(&mu_a)
        .and(&mu_b)
        .and(&aa)
        .and(&bb)
        .and(&ab)
        .for_each(|o, &ma, &mb, &saa, &sbb, &sab| {
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            *o = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        });
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScore {
    pub subject: String,
    pub thalamus_dice: f64,
    pub thalamus_vd: f64,
    /// Indexed by structure code - 1.
    pub dice: Vec<f64>,
    pub vd: Vec<f64>,
}

impl SegmentationScore {
    pub fn structure_dice(&self, s: Structure) -> f64 {
        self.dice[s.code() as usize - 1]
    }

    pub fn mean_structure_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / self.dice.len() as f64
    }
}

/// Scores one predicted label map against ground truth in a single pass.
pub fn score_subject(subject: &str, gt: &LabelMap, pred: &LabelMap) -> Result<SegmentationScore> {
    gt.grid().check_same(pred.grid())?;
    let mut inter = [0usize; NUM_STRUCTURES + 1];
    let mut ng = [0usize; NUM_STRUCTURES + 1];
    let mut np = [0usize; NUM_STRUCTURES + 1];
    let (mut ti, mut tg, mut tp) = (0usize, 0usize, 0usize);
    for (&g, &p) in gt.data().iter().zip(pred.data()) {
        ng[g as usize] += 1;
        np[p as usize] += 1;
        if g == p {
            inter[g as usize] += 1;
        }
        tg += (g > 0) as usize;
        tp += (p > 0) as usize;
        ti += (g > 0 && p > 0) as usize;
    }
    let vv = gt.grid().voxel_volume_mm3();
    let vd_of = |what: &str, g: usize, p: usize| {
        vd_from_volumes(g as f64 * vv, p as f64 * vv)
            .map_err(|_| Error::UndefinedMetric(format!("subject {subject}: {what} is absent from the ground truth")))
    };
    let mut dice = Vec::with_capacity(NUM_STRUCTURES);
    let mut vd = Vec::with_capacity(NUM_STRUCTURES);
    for s in Structure::ALL {
        let c = s.code() as usize;
        dice.push(dice_from_counts(inter[c], ng[c], np[c]));
        vd.push(vd_of(s.abbrev(), ng[c], np[c])?);
    }
    Ok(SegmentationScore {
        subject: subject.to_string(),
        thalamus_dice: dice_from_counts(ti, tg, tp),
        thalamus_vd: vd_of("the thalamus", tg, tp)?,
        dice,
        vd,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(v: &[f64]) -> MeanSd {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() < 2 {
            0.0
        } else {
            (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanSd { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    /// Structure abbreviation, or `Thalamus` for the whole-thalamus row.
    pub structure: String,
    pub dice: MeanSd,
    pub vd: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortScore {
    pub subjects: usize,
    /// Whole thalamus first, then structures in code order.
    pub rows: Vec<CohortRow>,
}

fn row_values(scores: &[SegmentationScore], row: usize, dice: bool) -> Vec<f64> {
    scores
        .iter()
        .map(|s| match (row, dice) {
            (0, true) => s.thalamus_dice,
            (0, false) => s.thalamus_vd,
            (r, true) => s.dice[r - 1],
            (r, false) => s.vd[r - 1],
        })
        .collect()
}

fn row_name(row: usize) -> &'static str {
    if row == 0 {
        "Thalamus"
    } else {
        Structure::ALL[row - 1].abbrev()
    }
}

pub fn score_cohort(scores: &[SegmentationScore]) -> Result<CohortScore> {
    if scores.is_empty() {
        return Err(Error::EmptyDataset("no subjects to score".into()));
    }
    let rows = (0..=NUM_STRUCTURES)
        .map(|r| CohortRow {
            structure: row_name(r).to_string(),
            dice: MeanSd::of(&row_values(scores, r, true)),
            vd: MeanSd::of(&row_values(scores, r, false)),
        })
        .collect();
    Ok(CohortScore {
        subjects: scores.len(),
        rows,
    })
}

/// Scores every `(subject, truth, prediction)` triple and aggregates them.
pub fn score_pairs<'a>(
    pairs: impl IntoIterator<Item = (&'a str, &'a LabelMap, &'a LabelMap)>,
) -> Result<(Vec<SegmentationScore>, CohortScore)> {
    let scores: Vec<SegmentationScore> = pairs
        .into_iter()
        .map(|(id, g, p)| score_subject(id, g, p))
        .collect::<Result<_>>()?;
    let cohort = score_cohort(&scores)?;
    Ok((scores, cohort))
}

fn paired_p(a: &[f64], b: &[f64]) -> String {
    match paired_ttest(a, b, 0.05) {
        Ok(t) => format!("{:.6}", t.p),
        Err(_) => String::new(),
    }
}

/// Writes the NCS-versus-SCS comparison table: one row per structure with
/// Dice and VD mean and SD for both pipelines and paired t-test p-values.
/// Subjects must appear in the same order in both slices.
pub fn write_comparison_csv(path: &Path, ncs: &[SegmentationScore], scs: &[SegmentationScore]) -> Result<()> {
    if ncs.len() != scs.len() || ncs.iter().zip(scs).any(|(a, b)| a.subject != b.subject) {
        return Err(Error::ShapeMismatch(
            "NCS and SCS score lists must cover the same subjects in the same order".into(),
        ));
    }
    if ncs.is_empty() {
        return Err(Error::EmptyDataset("no subjects to compare".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    w.write_record([
        "structure",
        "ncs_dice_mean",
        "ncs_dice_sd",
        "scs_dice_mean",
        "scs_dice_sd",
        "dice_p",
        "ncs_vd_mean",
        "ncs_vd_sd",
        "scs_vd_mean",
        "scs_vd_sd",
        "vd_p",
    ])?;
    for r in 0..=NUM_STRUCTURES {
        let nd = row_values(ncs, r, true);
        let sd = row_values(scs, r, true);
        let nv = row_values(ncs, r, false);
        let sv = row_values(scs, r, false);
        let (a, b, c, d) = (MeanSd::of(&nd), MeanSd::of(&sd), MeanSd::of(&nv), MeanSd::of(&sv));
        w.write_record([
            row_name(r).to_string(),
            format!("{:.6}", a.mean),
            format!("{:.6}", a.sd),
            format!("{:.6}", b.mean),
            format!("{:.6}", b.sd),
            paired_p(&nd, &sd),
            format!("{:.6}", c.mean),
            format!("{:.6}", c.sd),
            format!("{:.6}", d.mean),
            format!("{:.6}", d.sd),
            paired_p(&nv, &sv),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
