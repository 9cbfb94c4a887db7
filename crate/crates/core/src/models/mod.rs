//! The segmentation and synthesis networks plus the frozen feature extractor
//! used by the perceptual loss.

mod features;
mod unet;

use ndarray::{Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use features::{FeatureCache, FeatureExtractor, WeightSource, EXTRACTOR_CACHE_ENV, PRETRAINED_FILE};
pub use unet::{Decoder, UNet, UNetCache};

use crate::nn::{
    concat_channels, join, sigmoid, softmax_channels, softmax_channels_backward, split_channels, BlockCache, Conv,
    ConvBlock, Param, Parameterized, Scalar,
};
use crate::volume::NUM_CLASSES;
use crate::{Error, Result};

/// Number of slices in every input slab.
pub const SLAB_DEPTH: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Instance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Number of resolution scales.
    pub depth: usize,
    pub base_channels: usize,
    /// Channel multiplier per scale.
    pub growth: usize,
    #[serde(default)]
    pub norm: NormKind,
    #[serde(default)]
    pub activation: Activation,
    /// In-plane window `(h, w)`.
    pub window: [usize; 2],
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            depth: 4,
            base_channels: 24,
            growth: 2,
            norm: NormKind::Instance,
            activation: Activation::Relu,
            window: [192, 192],
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("network depth must be at least 2, got {}", self.depth)));
        }
        if self.base_channels == 0 || self.growth == 0 {
            return Err(Error::Config("base_channels and growth must be positive".into()));
        }
        let div = 1usize << (self.depth - 1);
        for &s in &self.window {
            if s == 0 || s % div != 0 {
                return Err(Error::Config(format!(
                    "window {}x{} is not divisible by {div} (2^(depth-1) for depth {})",
                    self.window[0], self.window[1], self.depth
                )));
            }
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|l| self.base_channels * self.growth.pow(l as u32))
            .collect()
    }

    pub(crate) fn check_input<T: Scalar>(&self, x: &Array4<T>) -> Result<()> {
        let (c, z, h, w) = x.dim();
        if c != 1 || z != SLAB_DEPTH || [h, w] != self.window {
            return Err(Error::ShapeMismatch(format!(
                "model expects (1, {SLAB_DEPTH}, {}, {}) input, got ({c}, {z}, {h}, {w})",
                self.window[0], self.window[1]
            )));
        }
        Ok(())
    }
}

/// SHA-256 over parameter names, shapes and values (as f64 bit patterns).
pub fn parameter_checksum<T: Scalar, M: Parameterized<T>>(model: &M) -> String {
    let mut h = Sha256::new();
    for (name, p) in model.params() {
        h.update(name.as_bytes());
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.value.iter() {
            h.update(v.to_f64_lossless().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Center-slice outputs of the segmentation network.
#[derive(Debug, Clone, PartialEq)]
pub struct SegOutput<T> {
    /// `(1, 1, h, w)` thalamus probability.
    pub thalamus: Array4<T>,
    /// `(13, 1, h, w)` class distribution.
    pub nuclei: Array4<T>,
}

/// Backbone with a sigmoid thalamus head and a nuclei head that also sees
/// the predicted thalamus map.
///
/// The nuclei distribution is hierarchical: with thalamus probability `t`
/// and the nuclei head's own softmax `q`, class `k > 0` gets `t * q_k` and
/// background gets `1 - t + t * q_0`. Nothing outside the predicted
/// thalamus can win a nucleus label, even though the Dice losses never
/// reward background directly.
#[derive(Debug, Clone)]
pub struct SegmentationModel<T> {
    pub config: NetConfig,
    pub seed: u64,
    pub backbone: UNet<T>,
    pub thalamus_head: Conv<T>,
    pub nuclei_block: ConvBlock<T>,
    pub nuclei_head: Conv<T>,
}

pub struct SegCache<T> {
    backbone: UNetCache<T>,
    out: SegOutput<T>,
    block: BlockCache<T>,
    /// Nuclei softmax before composition with the thalamus map.
    q: Array4<T>,
}

fn compose_nuclei<T: Scalar>(q: &Array4<T>, thalamus: &Array4<T>) -> Array4<T> {
    let mut out = q.clone();
    for (c, mut lane) in out.axis_iter_mut(Axis(0)).enumerate() {
        ndarray::Zip::from(&mut lane)
            .and(&thalamus.index_axis(Axis(0), 0))
            .for_each(|v, &t| *v = if c == 0 { T::one() - t + t * *v } else { t * *v });
    }
    out
}

impl<T: Scalar> SegCache<T> {
    pub fn output(&self) -> &SegOutput<T> {
        &self.out
    }
}

pub fn build_segmentation_model<T: Scalar>(config: &NetConfig, seed: u64) -> Result<SegmentationModel<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = UNet::new(config, 1, &mut rng);
    let c0 = backbone.out_channels();
    Ok(SegmentationModel {
        config: config.clone(),
        seed,
        thalamus_head: Conv::new(c0, 1, 1, 1, 0, &mut rng),
        nuclei_block: ConvBlock::new(c0 + 1, c0, 1, 3, 0, &mut rng),
        nuclei_head: Conv::new(c0, NUM_CLASSES, 1, 1, 0, &mut rng),
        backbone,
    })
}

impl<T: Scalar> SegmentationModel<T> {
    pub fn features(&self, x: &Array4<T>) -> Array4<T> {
        self.backbone.forward(x)
    }

    /// Nuclei distribution from backbone features and a thalamus map.
    pub fn nuclei_from(&self, features: &Array4<T>, thalamus: &Array4<T>) -> Array4<T> {
        let h = self.nuclei_block.forward(&concat_channels(features, thalamus));
        compose_nuclei(&softmax_channels(&self.nuclei_head.forward(&h)), thalamus)
    }

    pub fn forward(&self, x: &Array4<T>) -> Result<SegOutput<T>> {
        self.config.check_input(x)?;
        let f = self.features(x);
        let thalamus = sigmoid(&self.thalamus_head.forward(&f));
        let nuclei = self.nuclei_from(&f, &thalamus);
        Ok(SegOutput { thalamus, nuclei })
    }

    pub fn forward_batch(&self, batch: &[Array4<T>]) -> Result<Vec<SegOutput<T>>> {
        batch.iter().map(|x| self.forward(x)).collect()
    }

    pub fn forward_train(&self, x: &Array4<T>) -> Result<SegCache<T>> {
        self.config.check_input(x)?;
        let backbone = self.backbone.forward_cached(x);
        let f = backbone.output();
        let thalamus = sigmoid(&self.thalamus_head.forward(f));
        let block = self.nuclei_block.forward_cached(&concat_channels(f, &thalamus));
        let q = softmax_channels(&self.nuclei_head.forward(block.output()));
        let nuclei = compose_nuclei(&q, &thalamus);
        Ok(SegCache {
            backbone,
            out: SegOutput { thalamus, nuclei },
            block,
            q,
        })
    }

    /// Accumulates parameter gradients given loss gradients with respect to
    /// the two output probability maps.
    pub fn backward(&mut self, cache: &SegCache<T>, g_thalamus: &Array4<T>, g_nuclei: &Array4<T>) {
        let f = cache.backbone.output();
        let t = cache.out.thalamus.index_axis(Axis(0), 0);
        // d nuclei / d q is t on every class; d nuclei / d t is q_c, minus 1 for background
        let mut g_q = g_nuclei.clone();
        let mut g_t_direct = g_nuclei.index_axis(Axis(0), 0).mapv(|g| -g);
        for (c, mut lane) in g_q.axis_iter_mut(Axis(0)).enumerate() {
            ndarray::Zip::from(&mut g_t_direct)
                .and(&lane)
                .and(&cache.q.index_axis(Axis(0), c))
                .for_each(|d, &g, &q| *d = *d + g * q);
            lane.zip_mut_with(&t, |g, &t| *g = *g * t);
        }
        let g_logits = softmax_channels_backward(&cache.q, &g_q);
        let g_h = self
            .nuclei_head
            .backward(cache.block.output(), &g_logits, true)
            .expect("input grad");
        let g_cat = self.nuclei_block.backward(&cache.block, &g_h, true).expect("input grad");
        let (mut g_f, g_thal_from_nuclei) = split_channels(&g_cat, f.dim().0);
        let mut g_thal = g_thalamus + &g_thal_from_nuclei;
        g_thal.index_axis_mut(Axis(0), 0).zip_mut_with(&g_t_direct, |g, &d| *g = *g + d);
        ndarray::Zip::from(&mut g_thal)
            .and(&cache.out.thalamus)
            .for_each(|g, &p| *g = *g * p * (T::one() - p));
        g_f += &self.thalamus_head.backward(f, &g_thal, true).expect("input grad");
        self.backbone.backward(&cache.backbone, &g_f, false);
    }
}

impl<T: Scalar> Parameterized<T> for SegmentationModel<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.backbone.visit(&join(prefix, "backbone"), out);
        self.thalamus_head.visit(&join(prefix, "thalamus_head"), out);
        self.nuclei_block.visit(&join(prefix, "nuclei_block"), out);
        self.nuclei_head.visit(&join(prefix, "nuclei_head"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.backbone.visit_mut(&join(prefix, "backbone"), out);
        self.thalamus_head.visit_mut(&join(prefix, "thalamus_head"), out);
        self.nuclei_block.visit_mut(&join(prefix, "nuclei_block"), out);
        self.nuclei_head.visit_mut(&join(prefix, "nuclei_head"), out);
    }
}

/// Backbone with a single sigmoid regression head producing the center
/// slice of the target contrast.
#[derive(Debug, Clone)]
pub struct SynthesisModel<T> {
    pub config: NetConfig,
    pub seed: u64,
    pub backbone: UNet<T>,
    pub head: Conv<T>,
}

pub struct SynthCache<T> {
    backbone: UNetCache<T>,
    out: Array4<T>,
}

impl<T: Scalar> SynthCache<T> {
    pub fn output(&self) -> &Array4<T> {
        &self.out
    }
}

pub fn build_synthesis_model<T: Scalar>(config: &NetConfig, seed: u64) -> Result<SynthesisModel<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = UNet::new(config, 1, &mut rng);
    let c0 = backbone.out_channels();
    Ok(SynthesisModel {
        config: config.clone(),
        seed,
        head: Conv::new(c0, 1, 1, 1, 0, &mut rng),
        backbone,
    })
}

impl<T: Scalar> SynthesisModel<T> {
    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>> {
        self.config.check_input(x)?;
        Ok(sigmoid(&self.head.forward(&self.backbone.forward(x))))
    }

    pub fn forward_batch(&self, batch: &[Array4<T>]) -> Result<Vec<Array4<T>>> {
        batch.iter().map(|x| self.forward(x)).collect()
    }

    pub fn forward_train(&self, x: &Array4<T>) -> Result<SynthCache<T>> {
        self.config.check_input(x)?;
        let backbone = self.backbone.forward_cached(x);
        let out = sigmoid(&self.head.forward(backbone.output()));
        Ok(SynthCache { backbone, out })
    }

    pub fn backward(&mut self, cache: &SynthCache<T>, g_out: &Array4<T>) {
        let mut g = g_out.clone();
        ndarray::Zip::from(&mut g)
            .and(&cache.out)
            .for_each(|g, &p| *g = *g * p * (T::one() - p));
        let g_f = self
            .head
            .backward(cache.backbone.output(), &g, true)
            .expect("input grad");
        self.backbone.backward(&cache.backbone, &g_f, false);
    }
}

impl<T: Scalar> Parameterized<T> for SynthesisModel<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.backbone.visit(&join(prefix, "backbone"), out);
        self.head.visit(&join(prefix, "head"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.backbone.visit_mut(&join(prefix, "backbone"), out);
        self.head.visit_mut(&join(prefix, "head"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(window: usize, depth: usize) -> NetConfig {
        NetConfig {
            depth,
            base_channels: 2,
            growth: 2,
            window: [window, window],
            ..NetConfig::default()
        }
    }

    fn random_input(window: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((1, SLAB_DEPTH, window, window), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn divisibility_is_checked() {
        assert!(small(96, 4).validate().is_ok());
        // 96 = 3 * 32, so six scales still divide evenly; seven do not
        assert!(small(96, 6).validate().is_ok());
        assert!(small(96, 7).validate().is_err());
        assert!(small(80, 6).validate().is_err());
        assert!(small(96, 1).validate().is_err());
    }

    #[test]
    fn segmentation_shapes_and_distributions() {
        let m = build_segmentation_model::<f64>(&small(16, 3), 1).unwrap();
        let out = m.forward(&random_input(16, 2)).unwrap();
        assert_eq!(out.thalamus.dim(), (1, 1, 16, 16));
        assert_eq!(out.nuclei.dim(), (13, 1, 16, 16));
        for lane in out.nuclei.lanes(ndarray::Axis(0)) {
            assert!((lane.sum() - 1.0).abs() < 1e-9);
        }
        assert!(out.thalamus.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(m.forward(&Array4::zeros((1, 5, 8, 16))).is_err());
    }

    #[test]
    fn nuclei_head_depends_on_thalamus_map() {
        let m = build_segmentation_model::<f64>(&small(16, 3), 1).unwrap();
        let x = random_input(16, 3);
        let f = m.features(&x);
        let out = m.forward(&x).unwrap();
        let ablated = m.nuclei_from(&f, &Array4::zeros((1, 1, 16, 16)));
        assert_eq!(m.nuclei_from(&f, &out.thalamus), out.nuclei);
        let diff: f64 = (&ablated - &out.nuclei).mapv(f64::abs).sum();
        assert!(diff > 1e-6);
    }

    #[test]
    fn identical_windows_identical_outputs() {
        let m = build_synthesis_model::<f32>(&small(16, 3), 1).unwrap();
        let x = random_input(16, 3).mapv(|v| v as f32);
        let outs = m.forward_batch(&[x.clone(), x]).unwrap();
        assert_eq!(outs[0], outs[1]);
    }

    #[test]
    fn same_seed_same_checksum() {
        let a = build_segmentation_model::<f32>(&small(16, 3), 4).unwrap();
        let b = build_segmentation_model::<f32>(&small(16, 3), 4).unwrap();
        let c = build_segmentation_model::<f32>(&small(16, 3), 5).unwrap();
        assert_eq!(parameter_checksum(&a), parameter_checksum(&b));
        assert_ne!(parameter_checksum(&a), parameter_checksum(&c));
    }

    fn check_param_grads<M: Parameterized<f64> + Clone>(
        model: &M,
        loss: impl Fn(&M) -> f64,
        picks: &[(usize, usize)],
    ) {
        let analytic: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|(_, p)| p.grad.iter().copied().collect())
            .collect();
        let h = 1e-5;
        for &(pi, j) in picks {
            let mut m = model.clone();
            let shift = |m: &mut M, d: f64| {
                let mut ps = m.params_mut();
                let v = ps[pi].1.value.as_slice_mut().unwrap();
                v[j % v.len()] += d;
            };
            shift(&mut m, h);
            let lp = loss(&m);
            shift(&mut m, -2.0 * h);
            let lm = loss(&m);
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic[pi][j % analytic[pi].len()];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            assert!((fd - an).abs() / denom < 1e-4, "param {pi}[{j}]: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn segmentation_backward_matches_finite_differences() {
        let mut m = build_segmentation_model::<f64>(&small(8, 2), 3).unwrap();
        let x = random_input(8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pt = Array4::from_shape_fn((1, 1, 8, 8), |_| rng.random_range(-1.0..1.0));
        let pn = Array4::from_shape_fn((13, 1, 8, 8), |_| rng.random_range(-1.0..1.0));
        let loss = |m: &SegmentationModel<f64>| {
            let o = m.forward(&x).unwrap();
            (&o.thalamus * &pt).sum() + (&o.nuclei * &pn).sum()
        };
        let cache = m.forward_train(&x).unwrap();
        m.zero_grad();
        m.backward(&cache, &pt, &pn);
        let n = m.params().len();
        let picks: Vec<(usize, usize)> = (0..n).map(|i| (i, 3 * i + 1)).collect();
        check_param_grads(&m, loss, &picks);
    }

    #[test]
    fn synthesis_backward_matches_finite_differences() {
        let mut m = build_synthesis_model::<f64>(&small(8, 3), 3).unwrap();
        let x = random_input(8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let probe = Array4::from_shape_fn((1, 1, 8, 8), |_| rng.random_range(-1.0..1.0));
        let loss = |m: &SynthesisModel<f64>| (&m.forward(&x).unwrap() * &probe).sum();
        let cache = m.forward_train(&x).unwrap();
        assert!(cache.output().iter().all(|&v| (0.0..=1.0).contains(&v)));
        m.zero_grad();
        m.backward(&cache, &probe);
        let n = m.params().len();
        let picks: Vec<(usize, usize)> = (0..n).map(|i| (i, 5 * i + 2)).collect();
        check_param_grads(&m, loss, &picks);
    }
}
