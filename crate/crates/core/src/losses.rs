//! Training losses with analytic gradients, evaluated in double precision.
//!
//! Class-stacked arrays put the class axis first: `(classes, ...spatial)`.

use ndarray::{Array4, ArrayD, ArrayViewD, Axis, IxDyn, Zip};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::models::FeatureExtractor;
use crate::nn::Scalar;
use crate::volume::{LabelMap, NUM_CLASSES};
use crate::{Error, Result};

/// Default smoothing constant for both Dice losses.
pub const DICE_EPS: f64 = 1e-5;
/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Scalar loss with named parts; `total` is their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub components: Vec<(String, f64)>,
}

impl LossValue {
    pub fn single(name: &str, v: f64) -> Self {
        LossValue {
            total: v,
            components: vec![(name.to_string(), v)],
        }
    }

    pub fn from_parts(parts: Vec<(String, f64)>) -> Self {
        LossValue {
            total: parts.iter().map(|(_, v)| v).sum(),
            components: parts,
        }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightProvenance {
    InverseFrequency,
    UserSupplied,
}

/// Per-class weights for the weighted cross-entropy, background first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub provenance: WeightProvenance,
}

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        ClassWeights {
            weights: vec![1.0; classes],
            provenance: WeightProvenance::UserSupplied,
        }
    }

    pub fn user(weights: Vec<f64>) -> Result<Self> {
        let w = ClassWeights {
            weights,
            provenance: WeightProvenance::UserSupplied,
        };
        w.validate()?;
        Ok(w)
    }

    /// Inverse class frequency over the given label maps, with add-one
    /// smoothing so absent classes stay finite, rescaled to mean 1.
    pub fn inverse_frequency<'a>(labels: impl IntoIterator<Item = &'a LabelMap>) -> Self {
        let mut counts = vec![0u64; NUM_CLASSES];
        for lm in labels {
            for &c in lm.data().iter() {
                counts[c as usize] += 1;
            }
        }
        let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / (c as f64 + 1.0)).collect();
        let mean = inv.iter().sum::<f64>() / inv.len() as f64;
        ClassWeights {
            weights: inv.iter().map(|w| w / mean).collect(),
            provenance: WeightProvenance::InverseFrequency,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((i, w)) = self.weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::LossInput(format!("class weight {i} must be positive and finite, got {w}")));
        }
        Ok(())
    }
}

fn check_same_shape(a: &ArrayViewD<f64>, b: &ArrayViewD<f64>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: prediction shape {:?} vs target shape {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| v.is_nan()) {
        return Err(Error::LossInput(format!("{what}: NaN input")));
    }
    Ok(())
}

/// Binary soft Dice, `-(2Σgp + ε) / (Σg + Σp + ε)`, and its gradient in `p`.
pub fn soft_dice_loss(p: ArrayViewD<f64>, g: ArrayViewD<f64>, eps: f64) -> Result<(LossValue, ArrayD<f64>)> {
    check_same_shape(&p, &g, "soft Dice")?;
    let inter: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
    let s = p.sum() + g.sum() + eps;
    let num = 2.0 * inter + eps;
    let loss = -num / s;
    let mut grad = ArrayD::zeros(p.raw_dim());
    Zip::from(&mut grad).and(&g).for_each(|d, &gv| {
        *d = -(2.0 * gv * s - num) / (s * s);
    });
    Ok((LossValue::single("dice", loss), grad))
}

/// Multi-label Dice without the conventional factor 2:
/// `-Σ_{i=1..C} (Σ g_i p_i + ε/2) / (Σ g_i + Σ p_i + ε)`, background (class 0)
/// excluded. Each term lies in `[0, 1/2]`, exactly `1/2` for a perfect
/// prediction (also when the class is absent from both), so the total is in
/// `[-C/2, 0]`.
pub fn multilabel_dice_loss(
    p: ArrayViewD<f64>,
    g: ArrayViewD<f64>,
    structures: usize,
    eps: f64,
) -> Result<(LossValue, ArrayD<f64>)> {
    check_same_shape(&p, &g, "multi-label Dice")?;
    if p.shape()[0] != structures + 1 {
        return Err(Error::ShapeMismatch(format!(
            "multi-label Dice: expected {} class channels, found {}",
            structures + 1,
            p.shape()[0]
        )));
    }
    check_distribution(&p)?;
    let mut grad = ArrayD::zeros(p.raw_dim());
    let mut total = 0.0;
    for i in 1..=structures {
        let pi = p.index_axis(Axis(0), i);
        let gi = g.index_axis(Axis(0), i);
        let inter: f64 = pi.iter().zip(gi.iter()).map(|(a, b)| a * b).sum();
        let s = pi.sum() + gi.sum() + eps;
        let num = inter + 0.5 * eps;
        total -= num / s;
        let mut gr = grad.index_axis_mut(Axis(0), i);
        Zip::from(&mut gr).and(&gi).for_each(|d, &gv| {
            *d = -(gv * s - num) / (s * s);
        });
    }
    Ok((LossValue::single("multilabel_dice", total), grad))
}

fn check_distribution(p: &ArrayViewD<f64>) -> Result<()> {
    let sums = p.sum_axis(Axis(0));
    if let Some(s) = sums.iter().find(|s| (*s - 1.0).abs() > 1e-4) {
        return Err(Error::LossInput(format!(
            "class probabilities must sum to 1 at every pixel (found {s})"
        )));
    }
    Ok(())
}

/// Weighted categorical cross-entropy averaged over pixels.
pub fn wcce_loss(p: ArrayViewD<f64>, g: ArrayViewD<f64>, weights: &ClassWeights) -> Result<(LossValue, ArrayD<f64>)> {
    check_same_shape(&p, &g, "WCCE")?;
    weights.validate()?;
    let classes = p.shape()[0];
    if weights.weights.len() != classes {
        return Err(Error::LossInput(format!(
            "{} class weights for {classes} classes",
            weights.weights.len()
        )));
    }
    let pixels = (p.len() / classes.max(1)) as f64;
    let mut grad = ArrayD::zeros(p.raw_dim());
    let mut total = 0.0;
    for i in 0..classes {
        let w = weights.weights[i];
        let mut gr = grad.index_axis_mut(Axis(0), i);
        Zip::from(&mut gr)
            .and(&p.index_axis(Axis(0), i))
            .and(&g.index_axis(Axis(0), i))
            .for_each(|d, &pv, &gv| {
                if gv != 0.0 {
                    total -= w * gv * pv.max(PROB_FLOOR).ln();
                    if pv > PROB_FLOOR {
                        *d = -w * gv / (pv * pixels);
                    }
                }
            });
    }
    Ok((LossValue::single("wcce", total / pixels), grad))
}

/// Binary cross-entropy averaged over pixels.
pub fn bce_loss(p: ArrayViewD<f64>, g: ArrayViewD<f64>) -> Result<(LossValue, ArrayD<f64>)> {
    check_same_shape(&p, &g, "BCE")?;
    let n = p.len() as f64;
    let mut total = 0.0;
    let mut grad = ArrayD::zeros(p.raw_dim());
    Zip::from(&mut grad).and(&p).and(&g).for_each(|d, &pv, &gv| {
        let a = pv.max(PROB_FLOOR);
        let b = (1.0 - pv).max(PROB_FLOOR);
        total -= gv * a.ln() + (1.0 - gv) * b.ln();
        let mut v = 0.0;
        if pv > PROB_FLOOR {
            v -= gv / pv;
        }
        if 1.0 - pv > PROB_FLOOR {
            v += (1.0 - gv) / (1.0 - pv);
        }
        *d = v / n;
    });
    Ok((LossValue::single("bce", total / n), grad))
}

/// Which pair of losses trains the two segmentation heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SegLossKind {
    /// Soft Dice on the thalamus head plus multi-label Dice on the nuclei.
    #[default]
    Dice,
    /// Binary cross-entropy on the thalamus plus weighted cross-entropy.
    Wcce,
}

/// One-hot `(classes, 1, h, w)` stack from a center-slice label patch.
pub fn one_hot(labels: &ndarray::Array2<u8>, classes: usize) -> ArrayD<f64> {
    let (h, w) = labels.dim();
    let mut out = ArrayD::zeros(IxDyn(&[classes, 1, h, w]));
    for ((x, y), &c) in labels.indexed_iter() {
        out[[c as usize, 0, x, y]] = 1.0;
    }
    out
}

/// Sum of the thalamus and nuclei losses for one window, with gradients on
/// both head outputs cast back to the network's scalar type.
pub fn segmentation_loss<T: Scalar>(
    kind: SegLossKind,
    thalamus: &Array4<T>,
    nuclei: &Array4<T>,
    labels: &ndarray::Array2<u8>,
    weights: &ClassWeights,
) -> Result<(LossValue, Array4<T>, Array4<T>)> {
    let (value, mut dt, mut dn) =
        segmentation_loss_batch(kind, &[thalamus], &[nuclei], std::slice::from_ref(labels), weights)?;
    Ok((value, dt.remove(0), dn.remove(0)))
}

/// Segmentation loss over a batch of windows treated as one volume: the
/// center slices are stacked along the slice axis before the Dice sums, so
/// false positives in windows that contain no structure are still
/// penalized. The cross-entropy losses are per-pixel means either way.
/// Gradients come back split per window.
pub fn segmentation_loss_batch<T: Scalar>(
    kind: SegLossKind,
    thalamus: &[&Array4<T>],
    nuclei: &[&Array4<T>],
    labels: &[ndarray::Array2<u8>],
    weights: &ClassWeights,
) -> Result<(LossValue, Vec<Array4<T>>, Vec<Array4<T>>)> {
    if thalamus.is_empty() || thalamus.len() != nuclei.len() || nuclei.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "segmentation batch: {} thalamus maps, {} nuclei maps, {} label slices",
            thalamus.len(),
            nuclei.len(),
            labels.len()
        )));
    }
    let classes = nuclei[0].dim().0;
    let stack = |parts: &[&Array4<T>]| -> Result<ArrayD<f64>> {
        let views: Vec<ArrayD<f64>> = parts.iter().map(|a| a.mapv(|v| v.to_f64_lossless()).into_dyn()).collect();
        let views: Vec<_> = views.iter().map(|a| a.view()).collect();
        ndarray::concatenate(Axis(1), &views).map_err(|e| Error::ShapeMismatch(format!("segmentation batch: {e}")))
    };
    let pt = stack(thalamus)?;
    let pn = stack(nuclei)?;
    let hots: Vec<ArrayD<f64>> = labels.iter().map(|l| one_hot(l, classes)).collect();
    let hot_views: Vec<_> = hots.iter().map(|a| a.view()).collect();
    let gn = ndarray::concatenate(Axis(1), &hot_views)
        .map_err(|e| Error::ShapeMismatch(format!("segmentation batch labels: {e}")))?;
    let gt = gn.index_axis(Axis(0), 0).mapv(|b| 1.0 - b).insert_axis(Axis(0));
    let ((lt, dt), (ln, dn)) = match kind {
        SegLossKind::Dice => (
            soft_dice_loss(pt.view(), gt.view(), DICE_EPS)?,
            multilabel_dice_loss(pn.view(), gn.view(), classes - 1, DICE_EPS)?,
        ),
        SegLossKind::Wcce => (bce_loss(pt.view(), gt.view())?, wcce_loss(pn.view(), gn.view(), weights)?),
    };
    let value = LossValue::from_parts(vec![
        (format!("thalamus_{}", lt.components[0].0), lt.total),
        (format!("nuclei_{}", ln.components[0].0), ln.total),
    ]);
    let split = |a: ArrayD<f64>| -> Vec<Array4<T>> {
        a.axis_iter(Axis(1))
            .map(|w| {
                w.insert_axis(Axis(1))
                    .mapv(T::from_f64_lossy)
                    .into_dimensionality()
                    .expect("4D head output")
            })
            .collect()
    };
    Ok((value, split(dt), split(dn)))
}

/// Mean absolute difference plus the RMS feature-map difference.
///
/// Returns the loss and its gradient with respect to `w_syn`.
pub fn synthesis_loss<T: Scalar>(
    w: &Array4<T>,
    w_syn: &Array4<T>,
    extractor: &FeatureExtractor<T>,
) -> Result<(LossValue, Array4<T>)> {
    if w.dim() != w_syn.dim() {
        return Err(Error::ShapeMismatch(format!(
            "synthesis loss: target {:?} vs synthesized {:?}",
            w.dim(),
            w_syn.dim()
        )));
    }
    let n = w.len() as f64;
    let mut l1 = 0.0;
    let mut grad = Array4::<T>::zeros(w.raw_dim());
    Zip::from(&mut grad).and(w).and(w_syn).for_each(|d, &a, &b| {
        let diff = b.to_f64_lossless() - a.to_f64_lossless();
        l1 += diff.abs();
        *d = T::from_f64_lossy(diff.signum() * f64::from(diff != 0.0) / n);
    });
    l1 /= n;

    let fw = extractor.extract(w);
    let cache = extractor.extract_cached(w_syn);
    let fs = cache.features();
    let nf = fs.len() as f64;
    let sq: f64 = fs
        .iter()
        .zip(fw.iter())
        .map(|(&a, &b)| {
            let d = a.to_f64_lossless() - b.to_f64_lossless();
            d * d
        })
        .sum();
    let norm = sq.sqrt();
    let perceptual = norm / nf.sqrt();
    if norm > 0.0 {
        let scale = 1.0 / (norm * nf.sqrt());
        let mut g_feat = fs.clone();
        Zip::from(&mut g_feat).and(&fw).for_each(|g, &b| {
            *g = T::from_f64_lossy((g.to_f64_lossless() - b.to_f64_lossless()) * scale);
        });
        grad += &extractor.backward(&cache, &g_feat);
    }
    Ok((
        LossValue::from_parts(vec![("intensity".into(), l1), ("perceptual".into(), perceptual)]),
        grad,
    ))
}

/// Largest relative error between the analytic gradient and central finite
/// differences over `coords` randomly chosen coordinates (all of them when
/// the point is smaller). Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check<F, R>(loss: F, point: &ArrayD<f64>, h: f64, coords: usize, floor: f64, rng: &mut R) -> f64
where
    F: Fn(&ArrayD<f64>) -> (f64, ArrayD<f64>),
    R: Rng,
{
    let (_, analytic) = loss(point);
    let n = point.len();
    let picks: Vec<usize> = if coords >= n {
        (0..n).collect()
    } else {
        sample(rng, n, coords).into_vec()
    };
    let mut worst: f64 = 0.0;
    let mut x = point.clone();
    for j in picks {
        let orig = x.as_slice().expect("contiguous")[j];
        x.as_slice_mut().expect("contiguous")[j] = orig + h;
        let lp = loss(&x).0;
        x.as_slice_mut().expect("contiguous")[j] = orig - h;
        let lm = loss(&x).0;
        x.as_slice_mut().expect("contiguous")[j] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic.as_slice().expect("contiguous")[j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn half_mask(n: usize) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[n]), |i| if i[0] < n / 2 { 1.0 } else { 0.0 })
    }

    #[test]
    fn soft_dice_reference_values() {
        let g = half_mask(100);
        let (l, _) = soft_dice_loss(g.view(), g.view(), DICE_EPS).unwrap();
        assert!((l.total + 1.0).abs() < 1e-9);
        let inv = g.mapv(|v| 1.0 - v);
        let (l, _) = soft_dice_loss(inv.view(), g.view(), DICE_EPS).unwrap();
        assert!((l.total + DICE_EPS / (100.0 + DICE_EPS)).abs() < 1e-12);
        let half = ArrayD::from_elem(IxDyn(&[100]), 0.5);
        let (l, _) = soft_dice_loss(half.view(), g.view(), DICE_EPS).unwrap();
        let expect = -(2.0 * 25.0 + DICE_EPS) / (100.0 + DICE_EPS);
        assert!((l.total - expect).abs() < 1e-12);
    }

    #[test]
    fn multilabel_dice_reference_values() {
        // perfect one-hot with all 12 structures present
        let labels = Array2::from_shape_fn((4, 4), |(x, y)| ((x * 4 + y) % 13) as u8);
        let g = one_hot(&labels, 13);
        let (l, _) = multilabel_dice_loss(g.view(), g.view(), 12, DICE_EPS).unwrap();
        assert!((l.total + 6.0).abs() < 1e-3);
        // all mass on background
        let mut p = ArrayD::zeros(g.raw_dim());
        p.index_axis_mut(Axis(0), 0).fill(1.0);
        let (l, _) = multilabel_dice_loss(p.view(), g.view(), 12, DICE_EPS).unwrap();
        assert!(l.total.abs() < 1e-3);
        // one structure, |G|=|P|=8, overlap 4
        let mut g1 = ArrayD::zeros(IxDyn(&[2, 16]));
        let mut p1 = ArrayD::zeros(IxDyn(&[2, 16]));
        for i in 0..16 {
            g1[[1, i]] = f64::from(i < 8);
            p1[[1, i]] = f64::from((4..12).contains(&i));
            g1[[0, i]] = 1.0 - g1[[1, i]];
            p1[[0, i]] = 1.0 - p1[[1, i]];
        }
        let (l, _) = multilabel_dice_loss(p1.view(), g1.view(), 1, DICE_EPS).unwrap();
        assert!((l.total + 0.25).abs() < 1e-6);
    }

    #[test]
    fn multilabel_dice_rejects_non_distributions() {
        let p = ArrayD::from_elem(IxDyn(&[3, 4]), 0.5);
        assert!(multilabel_dice_loss(p.view(), p.view(), 2, DICE_EPS).is_err());
        let q = ArrayD::from_elem(IxDyn(&[3, 4]), 1.0 / 3.0);
        assert!(multilabel_dice_loss(q.view(), q.view(), 3, DICE_EPS).is_err());
    }

    #[test]
    fn wcce_reference_values() {
        let labels = Array2::from_shape_fn((3, 3), |(x, y)| ((x + 2 * y) % 13) as u8);
        let g = one_hot(&labels, 13);
        let w = ClassWeights::uniform(13);
        let (l, _) = wcce_loss(g.view(), g.view(), &w).unwrap();
        assert_eq!(l.total, 0.0);
        let u = ArrayD::from_elem(g.raw_dim(), 1.0 / 13.0);
        let (l, _) = wcce_loss(u.view(), g.view(), &w).unwrap();
        assert!((l.total - 13f64.ln()).abs() < 1e-12);
        let mut w2 = w.clone();
        let c = labels[[0, 0]] as usize;
        w2.weights[c] = 2.0;
        let (l2, _) = wcce_loss(u.view(), g.view(), &w2).unwrap();
        let count = labels.iter().filter(|&&v| v as usize == c).count() as f64;
        assert!((l2.total - l.total - count * 13f64.ln() / 9.0).abs() < 1e-12);
        assert!(ClassWeights::user(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn inverse_frequency_weights_have_mean_one() {
        use crate::volume::{Grid, LabelMap};
        let grid = Grid::new([4, 4, 2], [1.0; 3]).unwrap();
        let data = ndarray::Array3::from_shape_fn((4, 4, 2), |(x, _, _)| if x == 0 { 3 } else { 0 });
        let lm = LabelMap::new(data, grid).unwrap();
        let w = ClassWeights::inverse_frequency([&lm]);
        let mean = w.weights.iter().sum::<f64>() / 13.0;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(w.weights[3] > w.weights[0]);
        assert!(w.validate().is_ok());
    }

    fn interior_distribution(rng: &mut ChaCha8Rng, classes: usize, n: usize) -> ArrayD<f64> {
        let mut p = ArrayD::from_shape_fn(IxDyn(&[classes, n]), |_| rng.random_range(0.05..1.0));
        for mut col in p.axis_iter_mut(Axis(1)) {
            let s: f64 = col.sum();
            col.mapv_inplace(|v| v / s);
        }
        p
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = Array2::from_shape_fn((5, 6), |_| rng.random_range(0..13u8));
        let g = one_hot(&labels, 13).into_shape_with_order(IxDyn(&[13, 30])).unwrap();
        let p = interior_distribution(&mut rng, 13, 30);
        let err = gradient_check(
            |x| {
                let (l, gr) = multilabel_dice_loss(x.view(), g.view(), 12, DICE_EPS).unwrap();
                (l.total, gr)
            },
            &p,
            1e-5,
            60,
            1e-10,
            &mut rng,
        );
        assert!(err < 1e-4, "multi-label dice {err}");
        let err = gradient_check(
            |x| {
                let (l, gr) = soft_dice_loss(x.index_axis(Axis(0), 3), g.index_axis(Axis(0), 3), DICE_EPS).unwrap();
                let mut full = ArrayD::zeros(x.raw_dim());
                full.index_axis_mut(Axis(0), 3).assign(&gr);
                (l.total, full)
            },
            &p,
            1e-5,
            60,
            1e-10,
            &mut rng,
        );
        assert!(err < 1e-4, "soft dice {err}");
        let w = ClassWeights::user((0..13).map(|i| 0.5 + i as f64 * 0.1).collect()).unwrap();
        let err = gradient_check(
            |x| {
                let (l, gr) = wcce_loss(x.view(), g.view(), &w).unwrap();
                (l.total, gr)
            },
            &p,
            1e-5,
            60,
            1e-10,
            &mut rng,
        );
        assert!(err < 1e-4, "wcce {err}");
    }

    #[test]
    fn synthesis_loss_zero_at_identity_and_intensity_term() {
        let fx = FeatureExtractor::<f64>::fixed_random(7, [4, 8]);
        let w = Array4::from_shape_fn((1, 1, 8, 8), |(_, _, x, y)| (x * 8 + y) as f64 / 64.0);
        let (l, _) = synthesis_loss(&w, &w, &fx).unwrap();
        assert_eq!(l.total, 0.0);
        let zero = Array4::zeros((1, 1, 8, 8));
        let half = Array4::from_elem((1, 1, 8, 8), 0.5);
        let (l, _) = synthesis_loss(&zero, &half, &fx).unwrap();
        assert_eq!(l.component("intensity"), Some(0.5));
        assert!(l.component("perceptual").unwrap() > 0.0);
        assert!((l.total - l.components.iter().map(|c| c.1).sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn batch_dice_penalizes_false_positives_in_empty_windows() {
        let h = 4;
        let mut busy = ndarray::Array2::<u8>::zeros((h, h));
        busy[[1, 1]] = 3;
        busy[[1, 2]] = 3;
        let empty = ndarray::Array2::<u8>::zeros((h, h));
        let thal = Array4::from_elem((1, 1, h, h), 0.5f64);
        let nuclei = Array4::from_elem((NUM_CLASSES, 1, h, h), 1.0 / NUM_CLASSES as f64);
        let w = ClassWeights::uniform(NUM_CLASSES);

        // alone, an empty window gives (almost) no gradient
        let (_, gt, _) = segmentation_loss(SegLossKind::Dice, &thal, &nuclei, &empty, &w).unwrap();
        assert!(gt.iter().all(|g| g.abs() < 1e-3));

        let (lv, gt, gn) = segmentation_loss_batch(
            SegLossKind::Dice,
            &[&thal, &thal],
            &[&nuclei, &nuclei],
            &[busy.clone(), empty],
            &w,
        )
        .unwrap();
        assert_eq!((gt.len(), gn.len()), (2, 2));
        assert_eq!(gn[1].dim(), (NUM_CLASSES, 1, h, h));
        // raising the thalamus probability in the empty window hurts
        assert!(gt[1].iter().all(|&g| g > 1e-3));

        let (one, _, _) = segmentation_loss(SegLossKind::Dice, &thal, &nuclei, &busy, &w).unwrap();
        let (batch, _, _) = segmentation_loss_batch(SegLossKind::Dice, &[&thal], &[&nuclei], &[busy], &w).unwrap();
        assert_eq!(one.total, batch.total);
        assert!(lv.total > one.total);
    }
}
