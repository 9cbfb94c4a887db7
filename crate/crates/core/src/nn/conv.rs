use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;

use super::{join, Param, Parameterized, Scalar};

/// Unfolds `(c, z, x, y)` into a `(c*kz*k*k, zo*x*y)` patch matrix for a
/// convolution with kernel `kz×k×k`, through-plane padding `pad_z` and
/// in-plane "same" padding. Out-of-range taps read zero.
pub fn im2col<T: Scalar>(x: &Array4<T>, kz: usize, k: usize, pad_z: usize) -> Array2<T> {
    let (c, z, h, w) = x.dim();
    let p = k / 2;
    let zo = z + 2 * pad_z + 1 - kz;
    let n = zo * h * w;
    let rows = c * kz * k * k;
    let mut col = vec![T::zero(); rows * n];
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    for ci in 0..c {
        for dz in 0..kz {
            for dx in 0..k {
                for dy in 0..k {
                    let r = ((ci * kz + dz) * k + dx) * k + dy;
                    let row = &mut col[r * n..(r + 1) * n];
                    let oy0 = p.saturating_sub(dy);
                    let oy1 = (w + p).saturating_sub(dy).min(w);
                    if oy0 >= oy1 {
                        continue;
                    }
                    for oz in 0..zo {
                        let iz = oz + dz;
                        if iz < pad_z || iz - pad_z >= z {
                            continue;
                        }
                        let iz = iz - pad_z;
                        for ox in 0..h {
                            let ix = ox + dx;
                            if ix < p || ix - p >= h {
                                continue;
                            }
                            let ix = ix - p;
                            let src = ((ci * z + iz) * h + ix) * w + oy0 + dy - p;
                            let dst = (oz * h + ox) * w + oy0;
                            row[dst..dst + (oy1 - oy0)].copy_from_slice(&xs[src..src + (oy1 - oy0)]);
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((rows, n), col).expect("sized above")
}

/// Adjoint of [`im2col`]: folds a patch-matrix gradient back onto the input.
pub fn col2im<T: Scalar>(
    col: &Array2<T>,
    dims: (usize, usize, usize, usize),
    kz: usize,
    k: usize,
    pad_z: usize,
) -> Array4<T> {
    let (c, z, h, w) = dims;
    let p = k / 2;
    let zo = z + 2 * pad_z + 1 - kz;
    let n = zo * h * w;
    let mut out = vec![T::zero(); c * z * h * w];
    let col = col.as_standard_layout();
    let cs = col.as_slice().expect("standard layout");
    for ci in 0..c {
        for dz in 0..kz {
            for dx in 0..k {
                for dy in 0..k {
                    let r = ((ci * kz + dz) * k + dx) * k + dy;
                    let row = &cs[r * n..(r + 1) * n];
                    let oy0 = p.saturating_sub(dy);
                    let oy1 = (w + p).saturating_sub(dy).min(w);
                    if oy0 >= oy1 {
                        continue;
                    }
                    for oz in 0..zo {
                        let iz = oz + dz;
                        if iz < pad_z || iz - pad_z >= z {
                            continue;
                        }
                        let iz = iz - pad_z;
                        for ox in 0..h {
                            let ix = ox + dx;
                            if ix < p || ix - p >= h {
                                continue;
                            }
                            let ix = ix - p;
                            let dst = ((ci * z + iz) * h + ix) * w + oy0 + dy - p;
                            let src = (oz * h + ox) * w + oy0;
                            for (o, &g) in out[dst..dst + (oy1 - oy0)]
                                .iter_mut()
                                .zip(&row[src..src + (oy1 - oy0)])
                            {
                                *o += g;
                            }
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec((c, z, h, w), out).expect("sized above")
}

/// `c += a · bᵀ` for row-major `a (m×k)` and `b (n×k)`.
///
/// Weight gradients have few output rows and a very long shared dimension
/// (all pixels), a shape where the generic GEMM spends most of its time
/// packing the transposed operand; row-by-row dot products are faster there.
pub(crate) fn add_a_bt<T: Scalar>(a: &Array2<T>, b: &Array2<T>, c: &mut ndarray::ArrayViewMut2<T>) {
    let (m, k) = a.dim();
    let n = b.nrows();
    if m > 32 || k < 1024 {
        general_mat_mul(T::one(), a, &b.t(), T::one(), c);
        return;
    }
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let a_s = a.as_slice().expect("standard layout");
    let b_s = b.as_slice().expect("standard layout");
    let chunks = k / 8;
    for j in 0..n {
        let bj = &b_s[j * k..(j + 1) * k];
        let mut i = 0;
        while i < m {
            let rows = (m - i).min(4);
            let mut acc = [[T::zero(); 8]; 4];
            for ch in 0..chunks {
                let bb = &bj[ch * 8..ch * 8 + 8];
                for (r, acc_r) in acc.iter_mut().enumerate().take(rows) {
                    let aa = &a_s[(i + r) * k + ch * 8..(i + r) * k + ch * 8 + 8];
                    for l in 0..8 {
                        acc_r[l] += aa[l] * bb[l];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate().take(rows) {
                let ai = &a_s[(i + r) * k..(i + r + 1) * k];
                let mut sum = acc_r.iter().copied().fold(T::zero(), |x, y| x + y);
                for t in chunks * 8..k {
                    sum += ai[t] * bj[t];
                }
                c[[i + r, j]] += sum;
            }
            i += rows;
        }
    }
}

/// 3D convolution with a `kz×k×k` kernel, stride 1, in-plane "same" padding
/// and configurable through-plane padding.
#[derive(Debug, Clone)]
pub struct Conv<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub cin: usize,
    pub cout: usize,
    pub kz: usize,
    pub k: usize,
    pub pad_z: usize,
}

impl<T: Scalar> Conv<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, kz: usize, k: usize, pad_z: usize, rng: &mut R) -> Self {
        let fan_in = cin * kz * k * k;
        Conv {
            weight: Param::he_normal(&[cout, fan_in], fan_in, rng),
            bias: Param::zeros(&[cout]),
            cin,
            cout,
            kz,
            k,
            pad_z,
        }
    }

    fn weight2(&self) -> ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2D weight")
    }

    pub fn output_depth(&self, z: usize) -> usize {
        z + 2 * self.pad_z + 1 - self.kz
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (c, z, h, w) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        let zo = self.output_depth(z);
        let col = im2col(x, self.kz, self.k, self.pad_z);
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().expect("1D bias");
        let mut y = Array2::<T>::zeros((self.cout, zo * h * w));
        for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            row.fill(b);
        }
        general_mat_mul(T::one(), &self.weight2(), &col, T::one(), &mut y);
        y.into_shape_with_order((self.cout, zo, h, w)).expect("sized above")
    }

    /// Accumulates parameter gradients and, when `need_input_grad`, returns
    /// the gradient with respect to `x`.
    pub fn backward(&mut self, x: &Array4<T>, gy: &Array4<T>, need_input_grad: bool) -> Option<Array4<T>> {
        let (cout, zo, h, w) = gy.dim();
        let gy2 = gy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((cout, zo * h * w))
            .expect("contiguous");
        let col = im2col(x, self.kz, self.k, self.pad_z);
        {
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<Ix2>()
                .expect("2D weight");
            add_a_bt(&gy2, &col, &mut gw);
        }
        {
            let mut gb = self.bias.grad.view_mut().into_dimensionality::<Ix1>().expect("1D bias");
            gb += &gy2.sum_axis(Axis(1));
        }
        if !need_input_grad {
            return None;
        }
        Some(self.input_grad_from(x.dim(), &gy2))
    }

    /// Gradient with respect to the input only; parameters are untouched.
    pub fn backward_input(&self, dims: (usize, usize, usize, usize), gy: &Array4<T>) -> Array4<T> {
        let (cout, zo, h, w) = gy.dim();
        let gy2 = gy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((cout, zo * h * w))
            .expect("contiguous");
        self.input_grad_from(dims, &gy2)
    }

    fn input_grad_from(&self, dims: (usize, usize, usize, usize), gy2: &Array2<T>) -> Array4<T> {
        let mut gcol = Array2::<T>::zeros((self.weight2().ncols(), gy2.ncols()));
        general_mat_mul(T::one(), &self.weight2().t(), gy2, T::zero(), &mut gcol);
        col2im(&gcol, dims, self.kz, self.k, self.pad_z)
    }
}

impl<T: Scalar> Parameterized<T> for Conv<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Transposed convolution doubling the in-plane resolution (2×2 kernel,
/// stride 2, no overlap). Depth is unchanged.
#[derive(Debug, Clone)]
pub struct UpConv<T> {
    /// `(cout*4, cin)`; row `co*4 + a*2 + b` writes output offset `(a, b)`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub cin: usize,
    pub cout: usize,
}

impl<T: Scalar> UpConv<T> {
    pub fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        UpConv {
            weight: Param::he_normal(&[cout * 4, cin], cin, rng),
            bias: Param::zeros(&[cout]),
            cin,
            cout,
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (c, z, h, w) = x.dim();
        assert_eq!(c, self.cin, "upconv input channels");
        let x2 = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, z * h * w))
            .expect("contiguous");
        let wv = self.weight.value.view().into_dimensionality::<Ix2>().expect("2D");
        let mut ycol = Array2::<T>::zeros((self.cout * 4, z * h * w));
        general_mat_mul(T::one(), &wv, &x2, T::zero(), &mut ycol);
        let bias = self.bias.value.view().into_dimensionality::<Ix1>().expect("1D");
        let mut y = Array4::<T>::zeros((self.cout, z, 2 * h, 2 * w));
        for co in 0..self.cout {
            for a in 0..2 {
                for b in 0..2 {
                    let row = ycol.row(co * 4 + a * 2 + b);
                    for iz in 0..z {
                        for ix in 0..h {
                            for iy in 0..w {
                                y[[co, iz, 2 * ix + a, 2 * iy + b]] =
                                    row[(iz * h + ix) * w + iy] + bias[co];
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Array4<T>, gy: &Array4<T>) -> Array4<T> {
        let (c, z, h, w) = x.dim();
        let mut gcol = Array2::<T>::zeros((self.cout * 4, z * h * w));
        let mut gb = Array1::<T>::zeros(self.cout);
        for co in 0..self.cout {
            for a in 0..2 {
                for b in 0..2 {
                    let mut row = gcol.row_mut(co * 4 + a * 2 + b);
                    for iz in 0..z {
                        for ix in 0..h {
                            for iy in 0..w {
                                let g = gy[[co, iz, 2 * ix + a, 2 * iy + b]];
                                row[(iz * h + ix) * w + iy] = g;
                                gb[co] += g;
                            }
                        }
                    }
                }
            }
        }
        let x2 = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, z * h * w))
            .expect("contiguous");
        {
            let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2D");
            add_a_bt(&gcol, &x2, &mut gw);
        }
        {
            let mut gbias = self.bias.grad.view_mut().into_dimensionality::<Ix1>().expect("1D");
            gbias += &gb;
        }
        let wv = self.weight.value.view().into_dimensionality::<Ix2>().expect("2D");
        let mut gx = Array2::<T>::zeros((c, z * h * w));
        general_mat_mul(T::one(), &wv.t(), &gcol, T::zero(), &mut gx);
        gx.into_shape_with_order((c, z, h, w)).expect("sized above")
    }
}

impl<T: Scalar> Parameterized<T> for UpConv<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as an oracle.
    fn conv_direct(conv: &Conv<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (c, z, h, w) = x.dim();
        let zo = conv.output_depth(z);
        let p = conv.k as isize / 2;
        let wt = conv.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        Array4::from_shape_fn((conv.cout, zo, h, w), |(co, oz, ox, oy)| {
            let mut acc = conv.bias.value[[co]];
            for ci in 0..c {
                for dz in 0..conv.kz {
                    for dx in 0..conv.k {
                        for dy in 0..conv.k {
                            let iz = oz as isize + dz as isize - conv.pad_z as isize;
                            let ix = ox as isize + dx as isize - p;
                            let iy = oy as isize + dy as isize - p;
                            if iz < 0 || ix < 0 || iy < 0 || iz >= z as isize || ix >= h as isize || iy >= w as isize {
                                continue;
                            }
                            let r = ((ci * conv.kz + dz) * conv.k + dx) * conv.k + dy;
                            acc += wt[[co, r]] * x[[ci, iz as usize, ix as usize, iy as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn random_tensor(dims: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
        Array4::from_shape_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(kz, k, pad_z) in &[(3, 3, 0), (3, 3, 1), (1, 3, 0), (1, 1, 0)] {
            let mut conv = Conv::<f64>::new(2, 3, kz, k, pad_z, &mut rng);
            conv.bias.value.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            let x = random_tensor((2, 5, 6, 7), &mut rng);
            let fast = conv.forward(&x);
            let slow = conv_direct(&conv, &x);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn a_bt_kernel_matches_gemm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(m, n, k) in &[(8, 27, 3001), (5, 3, 1030), (13, 8, 2048)] {
            let a = Array2::from_shape_fn((m, k), |_| rng.random_range(-1.0..1.0));
            let b = Array2::from_shape_fn((n, k), |_| rng.random_range(-1.0..1.0));
            let mut c = Array2::<f64>::ones((m, n));
            add_a_bt(&a, &b, &mut c.view_mut());
            let expect = a.dot(&b.t()) + 1.0;
            for (x, y) in c.iter().zip(expect.iter()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor((2, 5, 4, 6), &mut rng);
        let col = im2col(&x, 3, 3, 0);
        let c = Array2::from_shape_fn(col.dim(), |_| rng.random_range(-1.0..1.0));
        let lhs: f64 = (&col * &c).sum();
        let back = col2im(&c, x.dim(), 3, 3, 0);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    fn loss_of(y: &Array4<f64>, probe: &Array4<f64>) -> f64 {
        (y * probe).sum()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv::<f64>::new(2, 3, 3, 3, 0, &mut rng);
        let x = random_tensor((2, 5, 4, 4), &mut rng);
        let y = conv.forward(&x);
        let probe = random_tensor(y.dim(), &mut rng);
        let gx = conv.backward(&x, &probe, true).unwrap();
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (1, 2, 3, 1), (0, 4, 2, 3)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss_of(&conv.forward(&xp), &probe) - loss_of(&conv.forward(&xm), &probe)) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-7, "{fd} vs {}", gx[idx]);
        }
        for j in [0usize, 17, 53] {
            let mut c2 = conv.clone();
            c2.weight.value.as_slice_mut().unwrap()[j] += h;
            let lp = loss_of(&c2.forward(&x), &probe);
            c2.weight.value.as_slice_mut().unwrap()[j] -= 2.0 * h;
            let lm = loss_of(&c2.forward(&x), &probe);
            let fd = (lp - lm) / (2.0 * h);
            let an = conv.weight.grad.as_slice().unwrap()[j];
            assert!((fd - an).abs() < 1e-7, "{fd} vs {an}");
        }
    }

    #[test]
    fn upconv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut up = UpConv::<f64>::new(3, 2, &mut rng);
        let x = random_tensor((3, 1, 3, 2), &mut rng);
        let y = up.forward(&x);
        assert_eq!(y.dim(), (2, 1, 6, 4));
        let probe = random_tensor(y.dim(), &mut rng);
        let gx = up.backward(&x, &probe);
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (2, 0, 2, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss_of(&up.forward(&xp), &probe) - loss_of(&up.forward(&xm), &probe)) / (2.0 * h);
            assert!((fd - gx[idx]).abs() < 1e-7);
        }
        let mut u2 = up.clone();
        u2.weight.value.as_slice_mut().unwrap()[5] += h;
        let lp = loss_of(&u2.forward(&x), &probe);
        u2.weight.value.as_slice_mut().unwrap()[5] -= 2.0 * h;
        let lm = loss_of(&u2.forward(&x), &probe);
        assert!(((lp - lm) / (2.0 * h) - up.weight.grad.as_slice().unwrap()[5]).abs() < 1e-7);
    }
}
