use ndarray::{concatenate, s, Array4, Axis, Ix1};
use rand::Rng;

use super::{join, Conv, Param, Parameterized, Scalar};

pub fn relu_inplace<T: Scalar>(x: &mut Array4<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Gradient of ReLU given its output `y`.
pub fn relu_backward<T: Scalar>(y: &Array4<T>, gy: &mut Array4<T>) {
    ndarray::Zip::from(gy).and(y).for_each(|g, &v| {
        if v <= T::zero() {
            *g = T::zero();
        }
    });
}

pub fn sigmoid<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| T::one() / (T::one() + (-v).exp()))
}

/// Softmax across the channel axis at every voxel.
pub fn softmax_channels<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(0)) {
        let m = lane.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in lane.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in lane.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Pulls a gradient on softmax probabilities `p` back to the logits.
pub fn softmax_channels_backward<T: Scalar>(p: &Array4<T>, gp: &Array4<T>) -> Array4<T> {
    let mut out = Array4::<T>::zeros(p.raw_dim());
    for ((mut o, pl), gl) in out
        .lanes_mut(Axis(0))
        .into_iter()
        .zip(p.lanes(Axis(0)))
        .zip(gp.lanes(Axis(0)))
    {
        let dot: T = pl.iter().zip(gl.iter()).map(|(&a, &b)| a * b).sum();
        for ((ov, &pv), &gv) in o.iter_mut().zip(pl.iter()).zip(gl.iter()) {
            *ov = pv * (gv - dot);
        }
    }
    out
}

pub fn concat_channels<T: Scalar>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
}

pub fn split_channels<T: Scalar>(x: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    (
        x.slice(s![..first, .., .., ..]).to_owned(),
        x.slice(s![first.., .., .., ..]).to_owned(),
    )
}

/// Per-channel instance normalization with learned affine.
#[derive(Debug, Clone)]
pub struct InstanceNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    xhat: Array4<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> InstanceNorm<T> {
    pub fn new(channels: usize) -> Self {
        InstanceNorm {
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, NormCache<T>) {
        let c = x.dim().0;
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().expect("1D");
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().expect("1D");
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(c);
        let eps = T::from_f64_lossy(self.eps);
        for ci in 0..c {
            let mut xh = xhat.index_axis_mut(Axis(0), ci);
            let n = T::from_usize(xh.len()).expect("count fits");
            let mean = xh.sum() / n;
            let var = xh.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            xh.mapv_inplace(|v| (v - mean) * is);
            let mut yc = y.index_axis_mut(Axis(0), ci);
            yc.zip_mut_with(&xh, |o, &h| *o = h * gamma[ci] + beta[ci]);
            inv_std.push(is);
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &NormCache<T>, gy: &Array4<T>) -> Array4<T> {
        let c = gy.dim().0;
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().expect("1D").to_owned();
        let mut gx = Array4::<T>::zeros(gy.raw_dim());
        for ci in 0..c {
            let g = gy.index_axis(Axis(0), ci);
            let xh = cache.xhat.index_axis(Axis(0), ci);
            let n = T::from_usize(g.len()).expect("count fits");
            let sum_g: T = g.sum();
            let sum_gx: T = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
            self.beta.grad[[ci]] += sum_g;
            self.gamma.grad[[ci]] += sum_gx;
            let k = gamma[ci] * cache.inv_std[ci] / n;
            let mut out = gx.index_axis_mut(Axis(0), ci);
            ndarray::Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gv, &h| {
                *o = k * (n * gv - sum_g - h * sum_gx);
            });
        }
        gx
    }
}

impl<T: Scalar> Parameterized<T> for InstanceNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

/// Convolution, instance norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub conv: Conv<T>,
    pub norm: InstanceNorm<T>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    input: Array4<T>,
    norm: NormCache<T>,
    output: Array4<T>,
}

impl<T: Scalar> BlockCache<T> {
    pub fn output(&self) -> &Array4<T> {
        &self.output
    }
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, kz: usize, k: usize, pad_z: usize, rng: &mut R) -> Self {
        ConvBlock {
            conv: Conv::new(cin, cout, kz, k, pad_z, rng),
            norm: InstanceNorm::new(cout),
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (mut y, _) = self.norm.forward(&self.conv.forward(x));
        relu_inplace(&mut y);
        y
    }

    pub fn forward_cached(&self, x: &Array4<T>) -> BlockCache<T> {
        let (mut y, norm) = self.norm.forward(&self.conv.forward(x));
        relu_inplace(&mut y);
        BlockCache {
            input: x.clone(),
            norm,
            output: y,
        }
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, gy: &Array4<T>, need_input_grad: bool) -> Option<Array4<T>> {
        let mut g = gy.clone();
        relu_backward(&cache.output, &mut g);
        let g = self.norm.backward(&cache.norm, &g);
        self.conv.backward(&cache.input, &g, need_input_grad)
    }
}

impl<T: Scalar> Parameterized<T> for ConvBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.conv.visit(&join(prefix, "conv"), out);
        self.norm.visit(&join(prefix, "norm"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.conv.visit_mut(&join(prefix, "conv"), out);
        self.norm.visit_mut(&join(prefix, "norm"), out);
    }
}

/// 2×2 in-plane max pooling; depth is unchanged. Ties go to the first
/// position in scan order.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaxPool;

#[derive(Debug, Clone)]
pub struct PoolCache {
    dims: (usize, usize, usize, usize),
    argmax: Vec<u8>,
}

impl MaxPool {
    pub fn forward<T: Scalar>(x: &Array4<T>) -> (Array4<T>, PoolCache) {
        let (c, z, h, w) = x.dim();
        let (ho, wo) = (h / 2, w / 2);
        let mut y = Array4::<T>::zeros((c, z, ho, wo));
        let mut argmax = Vec::with_capacity(c * z * ho * wo);
        for ci in 0..c {
            for iz in 0..z {
                for ox in 0..ho {
                    for oy in 0..wo {
                        let mut best = x[[ci, iz, 2 * ox, 2 * oy]];
                        let mut arg = 0u8;
                        for k in 1..4u8 {
                            let v = x[[ci, iz, 2 * ox + (k / 2) as usize, 2 * oy + (k % 2) as usize]];
                            if v > best {
                                best = v;
                                arg = k;
                            }
                        }
                        y[[ci, iz, ox, oy]] = best;
                        argmax.push(arg);
                    }
                }
            }
        }
        (y, PoolCache { dims: x.dim(), argmax })
    }

    pub fn backward<T: Scalar>(cache: &PoolCache, gy: &Array4<T>) -> Array4<T> {
        let mut gx = Array4::<T>::zeros(cache.dims);
        let (c, z, ho, wo) = gy.dim();
        let mut i = 0;
        for ci in 0..c {
            for iz in 0..z {
                for ox in 0..ho {
                    for oy in 0..wo {
                        let k = cache.argmax[i] as usize;
                        gx[[ci, iz, 2 * ox + k / 2, 2 * oy + k % 2]] += gy[[ci, iz, ox, oy]];
                        i += 1;
                    }
                }
            }
        }
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(dims: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
        Array4::from_shape_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    fn fd_check<F: Fn(&Array4<f64>) -> f64>(f: F, x: &Array4<f64>, gx: &Array4<f64>, idxs: &[(usize, usize, usize, usize)]) {
        let h = 1e-6;
        for &idx in idxs {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-6, "at {idx:?}: fd {fd} vs analytic {}", gx[idx]);
        }
    }

    #[test]
    fn instance_norm_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor((3, 2, 4, 4), &mut rng).mapv(|v| 3.0 * v + 2.0);
        let (y, _) = InstanceNorm::<f64>::new(3).forward(&x);
        for c in 0..3 {
            let yc = y.index_axis(Axis(0), c);
            let mean = yc.mean().unwrap();
            let var = yc.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn instance_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut norm = InstanceNorm::<f64>::new(2);
        norm.gamma.value.mapv_inplace(|_| rng.random_range(0.5..1.5));
        let x = random_tensor((2, 1, 3, 4), &mut rng);
        let probe = random_tensor(x.dim(), &mut rng);
        let (_, cache) = norm.forward(&x);
        let gx = norm.backward(&cache, &probe);
        fd_check(|x| (&norm.forward(x).0 * &probe).sum(), &x, &gx, &[(0, 0, 0, 0), (1, 0, 2, 3), (0, 0, 1, 2)]);
    }

    #[test]
    fn conv_block_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut block = ConvBlock::<f64>::new(2, 3, 1, 3, 0, &mut rng);
        let x = random_tensor((2, 2, 4, 4), &mut rng);
        let cache = block.forward_cached(&x);
        let probe = random_tensor(cache.output().dim(), &mut rng);
        let gx = block.backward(&cache, &probe, true).unwrap();
        fd_check(|x| (&block.forward(x) * &probe).sum(), &x, &gx, &[(0, 0, 0, 0), (1, 1, 3, 2), (0, 1, 2, 1)]);
    }

    #[test]
    fn softmax_sums_to_one_and_backward_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor((4, 1, 2, 3), &mut rng).mapv(|v| 5.0 * v);
        let p = softmax_channels(&x);
        for lane in p.lanes(Axis(0)) {
            assert!((lane.sum() - 1.0).abs() < 1e-12);
        }
        let probe = random_tensor(x.dim(), &mut rng);
        let gx = softmax_channels_backward(&p, &probe);
        fd_check(|x| (&softmax_channels(x) * &probe).sum(), &x, &gx, &[(0, 0, 0, 0), (3, 0, 1, 2), (2, 0, 0, 1)]);
    }

    #[test]
    fn maxpool_routes_gradient_to_maximum() {
        let x = Array4::from_shape_vec((1, 1, 2, 4), vec![1.0, 5.0, 0.0, -1.0, 2.0, 3.0, 4.0, 4.0]).unwrap();
        let (y, cache) = MaxPool::forward(&x);
        assert_eq!(y.iter().copied().collect::<Vec<f64>>(), vec![5.0, 4.0]);
        let gx = MaxPool::backward(&cache, &Array4::from_elem((1, 1, 1, 2), 1.0));
        assert_eq!(gx[[0, 0, 0, 1]], 1.0);
        // tie between (1,2) and (1,3) goes to the first
        assert_eq!(gx[[0, 0, 1, 2]], 1.0);
        assert_eq!(gx.sum(), 2.0);
    }

    #[test]
    fn concat_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_tensor((2, 1, 2, 2), &mut rng);
        let b = random_tensor((3, 1, 2, 2), &mut rng);
        let (a2, b2) = split_channels(&concat_channels(&a, &b), 2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
