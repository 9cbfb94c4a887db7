use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{relu_backward, relu_inplace, Conv, MaxPool, Param, PoolCache, Scalar};
use crate::{Error, Result};

/// Environment variable naming a directory that may hold pretrained
/// extractor weights.
pub const EXTRACTOR_CACHE_ENV: &str = "THALSEG_EXTRACTOR_CACHE";
/// File looked up inside the cache directory.
pub const PRETRAINED_FILE: &str = "vgg16_to_relu2_1.json";

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSource {
    Pretrained { path: PathBuf },
    FixedRandom { seed: u64 },
}

/// Frozen VGG16-style front end up to the third ReLU:
/// conv(3→w1) relu, conv(w1→w1) relu, 2×2 max-pool, conv(w1→w2) relu.
///
/// VGG16 itself has widths (64, 128). Pretrained weights are read from a
/// JSON file with keys `conv1_1`, `conv1_2`, `conv2_1`, each holding
/// `weight` (flattened `[out][in][3][3]`) and `bias`.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T> {
    convs: [Conv<T>; 3],
    pub source: WeightSource,
    pub widths: [usize; 2],
}

pub struct FeatureCache<T> {
    input_dims: (usize, usize, usize, usize),
    x0: Array4<T>,
    r1: Array4<T>,
    r2: Array4<T>,
    pool: PoolCache,
    pooled: Array4<T>,
    r3: Array4<T>,
}

impl<T: Scalar> FeatureCache<T> {
    pub fn features(&self) -> &Array4<T> {
        &self.r3
    }
}

#[derive(Deserialize)]
struct ConvWeights {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Deserialize)]
struct PretrainedFile {
    conv1_1: ConvWeights,
    conv1_2: ConvWeights,
    conv2_1: ConvWeights,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn fixed_random(seed: u64, widths: [usize; 2]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w1, w2] = widths;
        FeatureExtractor {
            convs: [
                Conv::new(3, w1, 1, 3, 0, &mut rng),
                Conv::new(w1, w1, 1, 3, 0, &mut rng),
                Conv::new(w1, w2, 1, 3, 0, &mut rng),
            ],
            source: WeightSource::FixedRandom { seed },
            widths,
        }
    }

    pub fn pretrained(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: PretrainedFile = serde_json::from_str(&text)?;
        let w1 = file.conv1_1.bias.len();
        let w2 = file.conv2_1.bias.len();
        let mk = |cw: &ConvWeights, cin: usize, cout: usize, name: &str| -> Result<Conv<T>> {
            if cw.weight.len() != cout * cin * 9 || cw.bias.len() != cout {
                return Err(Error::Config(format!(
                    "pretrained extractor layer {name}: expected {} weights and {cout} biases, found {} and {}",
                    cout * cin * 9,
                    cw.weight.len(),
                    cw.bias.len()
                )));
            }
            let cast = |v: &[f64]| v.iter().map(|&x| T::from_f64_lossy(x)).collect::<Vec<T>>();
            Ok(Conv {
                weight: Param::new(ArrayD::from_shape_vec(IxDyn(&[cout, cin * 9]), cast(&cw.weight)).expect("checked")),
                bias: Param::new(ArrayD::from_shape_vec(IxDyn(&[cout]), cast(&cw.bias)).expect("checked")),
                cin,
                cout,
                kz: 1,
                k: 3,
                pad_z: 0,
            })
        };
        Ok(FeatureExtractor {
            convs: [
                mk(&file.conv1_1, 3, w1, "conv1_1")?,
                mk(&file.conv1_2, w1, w1, "conv1_2")?,
                mk(&file.conv2_1, w1, w2, "conv2_1")?,
            ],
            source: WeightSource::Pretrained { path: path.to_path_buf() },
            widths: [w1, w2],
        })
    }

    /// Pretrained weights when the cache directory holds them, otherwise the
    /// fixed-random extractor with `seed` and `widths`.
    pub fn from_cache_or_random(seed: u64, widths: [usize; 2]) -> Result<Self> {
        if let Some(dir) = std::env::var_os(EXTRACTOR_CACHE_ENV) {
            let path = Path::new(&dir).join(PRETRAINED_FILE);
            if path.exists() {
                return Self::pretrained(&path);
            }
            log::warn!("{} has no {PRETRAINED_FILE}; using fixed-random extractor", path.display());
        }
        Ok(Self::fixed_random(seed, widths))
    }

    fn normalizes(&self) -> bool {
        matches!(self.source, WeightSource::Pretrained { .. })
    }

    /// Single-channel `(1, z, h, w)` image replicated to three channels.
    fn lift(&self, image: &Array4<T>) -> Array4<T> {
        assert_eq!(image.dim().0, 1, "extractor expects a single-channel image");
        let mut x = ndarray::concatenate(Axis(0), &[image.view(), image.view(), image.view()]).expect("same dims");
        if self.normalizes() {
            for c in 0..3 {
                let m = T::from_f64_lossy(IMAGENET_MEAN[c]);
                let s = T::from_f64_lossy(IMAGENET_STD[c]);
                x.index_axis_mut(Axis(0), c).mapv_inplace(|v| (v - m) / s);
            }
        }
        x
    }

    pub fn extract(&self, image: &Array4<T>) -> Array4<T> {
        self.extract_cached(image).r3
    }

    pub fn extract_cached(&self, image: &Array4<T>) -> FeatureCache<T> {
        let x0 = self.lift(image);
        let mut r1 = self.convs[0].forward(&x0);
        relu_inplace(&mut r1);
        let mut r2 = self.convs[1].forward(&r1);
        relu_inplace(&mut r2);
        let (pooled, pool) = MaxPool::forward(&r2);
        let mut r3 = self.convs[2].forward(&pooled);
        relu_inplace(&mut r3);
        FeatureCache {
            input_dims: image.dim(),
            x0,
            r1,
            r2,
            pool,
            pooled,
            r3,
        }
    }

    /// Gradient with respect to the single-channel input image. Weights stay
    /// frozen, so nothing is accumulated on them.
    pub fn backward(&self, cache: &FeatureCache<T>, g_features: &Array4<T>) -> Array4<T> {
        let mut g = g_features.clone();
        relu_backward(&cache.r3, &mut g);
        let g = self.convs[2].backward_input(cache.pooled.dim(), &g);
        let mut g = MaxPool::backward(&cache.pool, &g);
        relu_backward(&cache.r2, &mut g);
        let mut g = self.convs[1].backward_input(cache.r1.dim(), &g);
        relu_backward(&cache.r1, &mut g);
        let g = self.convs[0].backward_input(cache.x0.dim(), &g);
        let mut out = Array4::<T>::zeros(cache.input_dims);
        for c in 0..3 {
            let scale = if self.normalizes() {
                T::one() / T::from_f64_lossy(IMAGENET_STD[c])
            } else {
                T::one()
            };
            let gc = g.index_axis(Axis(0), c);
            out.index_axis_mut(Axis(0), 0).zip_mut_with(&gc, |o, &v| *o += v * scale);
        }
        out
    }
}
