//! 2.5D window extraction, runtime augmentation, and stitching of
//! center-slice predictions back onto the volume grid.
//!
//! Windows are `(channels, 5, h, w)` tensors: five consecutive slices along
//! the volume's third axis, `h` along the first and `w` along the second.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::models::SLAB_DEPTH;
use crate::volume::{LabelMap, Mask, Volume};
use crate::{Error, Result};

const HALF: usize = SLAB_DEPTH / 2;

/// In-plane window size and stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowGeometry {
    pub size: [usize; 2],
    pub stride: [usize; 2],
}

impl WindowGeometry {
    /// Half-window in-plane stride.
    pub fn with_default_stride(size: [usize; 2]) -> Self {
        WindowGeometry {
            size,
            stride: [(size[0] / 2).max(1), (size[1] / 2).max(1)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.contains(&0) || self.stride.contains(&0) {
            return Err(Error::Config(format!("window geometry must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Where a window sits: in-plane corner and center slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub subject: usize,
    pub x: usize,
    pub y: usize,
    pub z_center: usize,
}

impl WindowSpec {
    /// True when all five slices lie inside the grid (no edge replication).
    pub fn is_interior(&self, nz: usize) -> bool {
        self.z_center >= HALF && self.z_center + HALF < nz
    }
}

/// A materialized 2.5D window.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub spec: WindowSpec,
    pub size: [usize; 2],
    /// `(channels, 5, h, w)`; channel order is set by the caller.
    pub image: Array4<f32>,
    /// `(5, h, w)` label slab.
    pub labels: Option<Array3<u8>>,
}

impl Window {
    /// Single channel as a `(1, 5, h, w)` model input.
    pub fn channel(&self, c: usize) -> Array4<f32> {
        self.image.slice(s![c..c + 1, .., .., ..]).to_owned()
    }

    /// Center slice of channel `c` as `(1, 1, h, w)`.
    pub fn center(&self, c: usize) -> Array4<f32> {
        self.image.slice(s![c..c + 1, HALF..HALF + 1, .., ..]).to_owned()
    }

    pub fn center_labels(&self) -> Option<Array2<u8>> {
        self.labels.as_ref().map(|l| l.index_axis(Axis(0), HALF).to_owned())
    }
}

/// In-plane region `[lo, hi)` around the nonzero voxels, grown (centered,
/// then shifted to fit) so each side is at least the window size.
pub fn crop_region(support: &Array3<bool>, size: [usize; 2]) -> Result<([usize; 2], [usize; 2])> {
    let (nx, ny, _) = support.dim();
    let dims = [nx, ny];
    for a in 0..2 {
        if dims[a] < size[a] {
            return Err(Error::Geometry(format!(
                "grid {}x{} is smaller than the {}x{} window; configure a smaller window",
                nx, ny, size[0], size[1]
            )));
        }
    }
    let mut lo = [usize::MAX; 2];
    let mut hi = [0usize; 2];
    for ((x, y, _), &v) in support.indexed_iter() {
        if v {
            lo[0] = lo[0].min(x);
            lo[1] = lo[1].min(y);
            hi[0] = hi[0].max(x + 1);
            hi[1] = hi[1].max(y + 1);
        }
    }
    if lo[0] == usize::MAX {
        return Ok(([0, 0], dims));
    }
    for a in 0..2 {
        let extent = hi[a] - lo[a];
        if extent < size[a] {
            let grow = size[a] - extent;
            let new_lo = lo[a].saturating_sub(grow / 2);
            let new_lo = new_lo.min(dims[a] - size[a]);
            lo[a] = new_lo;
            hi[a] = new_lo + size[a];
        }
    }
    Ok((lo, hi))
}

/// Window starts along one axis: `lo, lo+stride, ...` while the window fits,
/// plus a final start clamped to `hi - size` when the stride skips the end.
pub fn axis_starts(lo: usize, hi: usize, size: usize, stride: usize) -> Vec<usize> {
    assert!(hi >= lo + size, "region shorter than window");
    let last = hi - size;
    let mut out: Vec<usize> = (lo..=last).step_by(stride.max(1)).collect();
    if *out.last().expect("nonempty") != last {
        out.push(last);
    }
    out
}

fn in_plane_corners(support: &Array3<bool>, geom: &WindowGeometry) -> Result<Vec<(usize, usize)>> {
    geom.validate()?;
    let (lo, hi) = crop_region(support, geom.size)?;
    let xs = axis_starts(lo[0], hi[0], geom.size[0], geom.stride[0]);
    let ys = axis_starts(lo[1], hi[1], geom.size[1], geom.stride[1]);
    Ok(xs.iter().flat_map(|&x| ys.iter().map(move |&y| (x, y))).collect())
}

/// Descriptors for segmentation / inference windows: every slice is a
/// center slice once; in-plane windows tile the cropped brain region.
pub fn segmentation_specs(support: &Array3<bool>, geom: &WindowGeometry, subject: usize) -> Result<Vec<WindowSpec>> {
    let nz = support.dim().2;
    let corners = in_plane_corners(support, geom)?;
    let mut out = Vec::with_capacity(corners.len() * nz);
    for z in 0..nz {
        for &(x, y) in &corners {
            out.push(WindowSpec {
                subject,
                x,
                y,
                z_center: z,
            });
        }
    }
    Ok(out)
}

/// Descriptors for synthesis training patches: only fully interior slabs,
/// center slices every `z_stride`, kept when at least `min_fraction` of the
/// center-slice footprint lies inside the brain mask.
pub fn synthesis_specs(
    mask: &Mask,
    geom: &WindowGeometry,
    min_fraction: f64,
    z_stride: usize,
    subject: usize,
) -> Result<Vec<WindowSpec>> {
    if mask.is_empty() {
        return Err(Error::EmptyMask("no brain voxels to draw synthesis patches from".into()));
    }
    let m = mask.data();
    let nz = m.dim().2;
    if nz < SLAB_DEPTH {
        return Err(Error::Geometry(format!(
            "volume has {nz} slices; synthesis patches need {SLAB_DEPTH}"
        )));
    }
    let corners = in_plane_corners(m, geom)?;
    let area = (geom.size[0] * geom.size[1]) as f64;
    let mut out = Vec::new();
    for z in (HALF..nz - HALF).step_by(z_stride.max(1)) {
        for &(x, y) in &corners {
            let inside = m
                .slice(s![x..x + geom.size[0], y..y + geom.size[1], z])
                .iter()
                .filter(|&&b| b)
                .count() as f64;
            if inside / area >= min_fraction {
                out.push(WindowSpec {
                    subject,
                    x,
                    y,
                    z_center: z,
                });
            }
        }
    }
    Ok(out)
}

fn slab_f32(data: &Array3<f32>, spec: &WindowSpec, size: [usize; 2], out: &mut ndarray::ArrayViewMut3<f32>) {
    let nz = data.dim().2;
    for dz in 0..SLAB_DEPTH {
        let z = (spec.z_center as isize + dz as isize - HALF as isize).clamp(0, nz as isize - 1) as usize;
        out.index_axis_mut(Axis(0), dz)
            .assign(&data.slice(s![spec.x..spec.x + size[0], spec.y..spec.y + size[1], z]));
    }
}

/// Materializes a window from one or more co-registered channels and an
/// optional label map. Slices beyond the volume replicate the edge slice.
pub fn extract_window(spec: &WindowSpec, size: [usize; 2], channels: &[&Volume], labels: Option<&LabelMap>) -> Window {
    let mut image = Array4::<f32>::zeros((channels.len(), SLAB_DEPTH, size[0], size[1]));
    for (c, vol) in channels.iter().enumerate() {
        slab_f32(vol.data(), spec, size, &mut image.index_axis_mut(Axis(0), c));
    }
    let labels = labels.map(|lm| {
        let nz = lm.shape()[2];
        let mut slab = Array3::<u8>::zeros((SLAB_DEPTH, size[0], size[1]));
        for dz in 0..SLAB_DEPTH {
            let z = (spec.z_center as isize + dz as isize - HALF as isize).clamp(0, nz as isize - 1) as usize;
            slab.index_axis_mut(Axis(0), dz)
                .assign(&lm.data().slice(s![spec.x..spec.x + size[0], spec.y..spec.y + size[1], z]));
        }
        slab
    });
    Window {
        spec: *spec,
        size,
        image,
        labels,
    }
}

/// Nonzero voxels of a brain-extracted volume.
pub fn support_of(volume: &Volume) -> Array3<bool> {
    volume.data().mapv(|v| v != 0.0)
}

/// Segmentation slabs for a whole volume (optionally with labels).
pub fn extract_segmentation_slabs(
    volume: &Volume,
    labels: Option<&LabelMap>,
    geom: &WindowGeometry,
) -> Result<Vec<Window>> {
    if let Some(lm) = labels {
        volume.grid().check_same(lm.grid())?;
    }
    let specs = segmentation_specs(&support_of(volume), geom, 0)?;
    Ok(specs
        .iter()
        .map(|s| extract_window(s, geom.size, &[volume], labels))
        .collect())
}

/// Paired synthesis patches (channel 0 MPRAGE, channel 1 WMn).
pub fn extract_synthesis_patches(
    mprage: &Volume,
    wmn: &Volume,
    mask: &Mask,
    geom: &WindowGeometry,
    min_fraction: f64,
) -> Result<Vec<Window>> {
    mprage.grid().check_same(wmn.grid())?;
    mprage.grid().check_same(mask.grid())?;
    let specs = synthesis_specs(mask, geom, min_fraction, 1, 0)?;
    Ok(specs
        .iter()
        .map(|s| extract_window(s, geom.size, &[mprage, wmn], None))
        .collect())
}

/// Ranges for runtime augmentation. Angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationParams {
    pub scale: [f64; 2],
    pub shear_deg: [f64; 2],
    pub rotation_deg: [f64; 2],
    pub through_plane_deg: [f64; 2],
    /// Through-plane rotation is only applied when set.
    pub through_plane: bool,
}

impl Default for AugmentationParams {
    fn default() -> Self {
        AugmentationParams {
            scale: [0.9, 1.1],
            shear_deg: [-5.0, 5.0],
            rotation_deg: [-10.0, 10.0],
            through_plane_deg: [-10.0, 10.0],
            through_plane: false,
        }
    }
}

impl AugmentationParams {
    pub fn identity() -> Self {
        AugmentationParams {
            scale: [1.0, 1.0],
            shear_deg: [0.0, 0.0],
            rotation_deg: [0.0, 0.0],
            through_plane_deg: [0.0, 0.0],
            through_plane: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("scale", self.scale, 1.0),
            ("shear_deg", self.shear_deg, 0.0),
            ("rotation_deg", self.rotation_deg, 0.0),
            ("through_plane_deg", self.through_plane_deg, 0.0),
        ];
        for (name, [lo, hi], id) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= id && id <= hi) {
                return Err(Error::Config(format!(
                    "augmentation range {name} = [{lo}, {hi}] must be finite and contain {id}"
                )));
            }
        }
        if self.scale[0] <= 0.0 {
            return Err(Error::Config("augmentation scale must stay positive".into()));
        }
        Ok(())
    }
}

/// One sampled transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub scale: f64,
    pub shear: f64,
    pub rotation: f64,
    pub through_plane: f64,
}

impl Transform {
    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.shear == 0.0 && self.rotation == 0.0 && self.through_plane == 0.0
    }
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

pub fn sample_transform(params: &AugmentationParams, rng: &mut ChaCha8Rng) -> Transform {
    Transform {
        scale: draw(rng, params.scale),
        shear: draw(rng, params.shear_deg).to_radians(),
        rotation: draw(rng, params.rotation_deg).to_radians(),
        through_plane: if params.through_plane {
            draw(rng, params.through_plane_deg).to_radians()
        } else {
            0.0
        },
    }
}

/// Deterministic per-window generator from (seed, epoch, window index).
pub fn window_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"thalseg-augment");
    h.update(seed.to_le_bytes());
    h.update(epoch.to_le_bytes());
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Applies one random transform (sampled from `rng`) to every channel and
/// the label slab. Images are resampled trilinearly, labels with nearest
/// neighbor; samples falling outside the window clamp to its edge.
pub fn augment(window: &Window, params: &AugmentationParams, rng: &mut ChaCha8Rng) -> Window {
    let t = sample_transform(params, rng);
    apply_transform(window, &t)
}

pub fn apply_transform(window: &Window, t: &Transform) -> Window {
    if t.is_identity() {
        return window.clone();
    }
    let (nc, nz, h, w) = window.image.dim();
    let cx = (h as f64 - 1.0) / 2.0;
    let cy = (w as f64 - 1.0) / 2.0;
    let cz = HALF as f64;
    // forward map M = R(rotation) * Shear * scale; sample source at M^-1 (p - c) + c
    let (sn, cs) = t.rotation.sin_cos();
    let sh = t.shear.tan();
    let m = [
        [cs * t.scale, (cs * sh - sn) * t.scale],
        [sn * t.scale, (sn * sh + cs) * t.scale],
    ];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let (tsn, tcs) = t.through_plane.sin_cos();

    let mut image = Array4::<f32>::zeros((nc, nz, h, w));
    let mut labels = window.labels.as_ref().map(|l| Array3::<u8>::zeros(l.raw_dim()));
    let clampf = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    for z in 0..nz {
        for x in 0..h {
            // through-plane rotation in the x-z plane about the slab center
            let dx0 = x as f64 - cx;
            let dz0 = z as f64 - cz;
            let x1 = cx + tcs * dx0 - tsn * dz0;
            let zs = clampf(cz + tsn * dx0 + tcs * dz0, nz);
            for y in 0..w {
                let px = x1 - cx;
                let py = y as f64 - cy;
                let xs = clampf(inv[0][0] * px + inv[0][1] * py + cx, h);
                let ys = clampf(inv[1][0] * px + inv[1][1] * py + cy, w);
                let (z0, fz) = split(zs, nz);
                let (x0, fx) = split(xs, h);
                let (y0, fy) = split(ys, w);
                for c in 0..nc {
                    let src = window.image.index_axis(Axis(0), c);
                    let mut acc = 0.0f64;
                    for (az, wz) in [(z0, 1.0 - fz), ((z0 + 1).min(nz - 1), fz)] {
                        if wz == 0.0 {
                            continue;
                        }
                        for (ax, wx) in [(x0, 1.0 - fx), ((x0 + 1).min(h - 1), fx)] {
                            if wx == 0.0 {
                                continue;
                            }
                            for (ay, wy) in [(y0, 1.0 - fy), ((y0 + 1).min(w - 1), fy)] {
                                if wy == 0.0 {
                                    continue;
                                }
                                acc += wz * wx * wy * src[[az, ax, ay]] as f64;
                            }
                        }
                    }
                    image[[c, z, x, y]] = acc as f32;
                }
                if let (Some(out), Some(src)) = (labels.as_mut(), window.labels.as_ref()) {
                    out[[z, x, y]] = src[[zs.round() as usize, xs.round() as usize, ys.round() as usize]];
                }
            }
        }
    }
    Window {
        spec: window.spec,
        size: window.size,
        image,
        labels: labels.take(),
    }
}

fn split(v: f64, n: usize) -> (usize, f64) {
    let f = v.floor();
    let i = (f as usize).min(n - 1);
    (i, if i == n - 1 { 0.0 } else { v - f })
}

/// Accumulates center-slice predictions `(classes, 1, h, w)` and averages
/// them with uniform weights.
#[derive(Debug, Clone)]
pub struct Stitcher {
    sum: Array4<f32>,
    count: Array3<u32>,
    region_lo: [usize; 2],
    region_hi: [usize; 2],
}

/// Stitched per-class maps laid out `(classes, x, y, z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMaps {
    pub data: Array4<f32>,
}

impl Stitcher {
    pub fn new(shape: [usize; 3], classes: usize) -> Self {
        Stitcher {
            sum: Array4::zeros((classes, shape[0], shape[1], shape[2])),
            count: Array3::zeros((shape[0], shape[1], shape[2])),
            region_lo: [0, 0],
            region_hi: [shape[0], shape[1]],
        }
    }

    /// Only voxels inside the in-plane region must be covered; the rest take
    /// a fill value at [`Stitcher::finish`].
    pub fn with_region(mut self, lo: [usize; 2], hi: [usize; 2]) -> Self {
        self.region_lo = lo;
        self.region_hi = hi;
        self
    }

    pub fn add(&mut self, spec: &WindowSpec, pred: &Array4<f32>) {
        let (c, _, h, w) = pred.dim();
        assert_eq!(c, self.sum.dim().0, "stitch class count");
        let mut dst = self
            .sum
            .slice_mut(s![.., spec.x..spec.x + h, spec.y..spec.y + w, spec.z_center]);
        dst += &pred.index_axis(Axis(1), 0);
        self.count
            .slice_mut(s![spec.x..spec.x + h, spec.y..spec.y + w, spec.z_center])
            .mapv_inplace(|n| n + 1);
    }

    /// Averages overlapping predictions. With `normalize`, each voxel's
    /// class values are rescaled to sum to 1. Uncovered voxels inside the
    /// region are an error; outside it they receive `fill`.
    pub fn finish(self, fill: &[f32], normalize: bool) -> Result<ClassMaps> {
        let Stitcher {
            mut sum,
            count,
            region_lo,
            region_hi,
        } = self;
        assert_eq!(fill.len(), sum.dim().0, "fill value per class");
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut missing = 0usize;
        for ((x, y, z), &n) in count.indexed_iter() {
            let inside = (region_lo[0]..region_hi[0]).contains(&x) && (region_lo[1]..region_hi[1]).contains(&y);
            let mut lane = sum.slice_mut(s![.., x, y, z]);
            if n == 0 {
                if inside {
                    missing += 1;
                    for (a, i) in [x, y, z].into_iter().enumerate() {
                        lo[a] = lo[a].min(i);
                        hi[a] = hi[a].max(i);
                    }
                } else {
                    for (v, &f) in lane.iter_mut().zip(fill) {
                        *v = f;
                    }
                }
                continue;
            }
            let inv = 1.0 / n as f32;
            lane.mapv_inplace(|v| v * inv);
            if normalize {
                let total: f32 = lane.sum();
                if total > 0.0 {
                    lane.mapv_inplace(|v| v / total);
                }
            }
        }
        if missing > 0 {
            return Err(Error::Uncovered { lo, hi, count: missing });
        }
        Ok(ClassMaps { data: sum })
    }
}

impl ClassMaps {
    /// Per-voxel argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> Array3<u8> {
        let (_, nx, ny, nz) = self.data.dim();
        Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| {
            let lane = self.data.slice(s![.., x, y, z]);
            let mut best = 0usize;
            for (i, &v) in lane.iter().enumerate() {
                if v > lane[best] {
                    best = i;
                }
            }
            best as u8
        })
    }

    pub fn channel(&self, c: usize) -> Array3<f32> {
        self.data.index_axis(Axis(0), c).to_owned()
    }
}

/// Center-slice one-hot `(classes, 1, h, w)` from a label window.
pub fn one_hot_center(window: &Window, classes: usize) -> Option<Array4<f32>> {
    let labels = window.center_labels()?;
    let (h, w) = labels.dim();
    let mut out = Array4::zeros((classes, 1, h, w));
    for ((x, y), &c) in labels.indexed_iter() {
        out[[c as usize, 0, x, y]] = 1.0;
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Grid, Provenance};

    fn volume(shape: [usize; 3]) -> Volume {
        let grid = Grid::new(shape, [1.0; 3]).unwrap();
        let data = Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(x, y, z)| {
            ((x * 31 + y * 17 + z * 7) % 97) as f32 / 100.0 + 0.01
        });
        Volume::new(data, grid, Provenance::Preprocessed).unwrap()
    }

    #[test]
    fn window_counts_match_slice_enumeration() {
        let g = WindowGeometry::with_default_stride([192, 192]);
        let v = volume([192, 192, 5]);
        let w = extract_segmentation_slabs(&v, None, &g).unwrap();
        let interior: Vec<_> = w.iter().filter(|w| w.spec.is_interior(5)).collect();
        assert_eq!(interior.len(), 1);
        assert_eq!((interior[0].spec.x, interior[0].spec.y, interior[0].spec.z_center - 2), (0, 0, 0));
        assert_eq!(w.len(), 5);

        let v = volume([192, 192, 7]);
        let w = extract_segmentation_slabs(&v, None, &g).unwrap();
        assert_eq!(w.len(), 7);
        let centers: Vec<usize> = w.iter().filter(|w| w.spec.is_interior(7)).map(|w| w.spec.z_center).collect();
        assert_eq!(centers, vec![2, 3, 4]);
        // z=0 window replicates slice 0 for its two lower context slices
        let w0 = &w[0];
        assert_eq!(w0.image.index_axis(Axis(1), 0), w0.image.index_axis(Axis(1), 2));
    }

    #[test]
    fn in_plane_starts() {
        assert_eq!(axis_starts(0, 256, 192, 64), vec![0, 64]);
        assert_eq!(axis_starts(0, 128, 64, 32), vec![0, 32, 64]);
        assert_eq!(axis_starts(0, 100, 64, 32), vec![0, 32, 36]);
        assert_eq!(axis_starts(0, 64, 64, 7), vec![0]);
    }

    #[test]
    fn synthesis_patch_counts() {
        let v = volume([64, 64, 5]);
        let mask = Mask::full(v.grid());
        let g = WindowGeometry {
            size: [64, 64],
            stride: [32, 32],
        };
        assert_eq!(extract_synthesis_patches(&v, &v, &mask, &g, 0.5).unwrap().len(), 1);
        let v = volume([128, 64, 5]);
        let mask = Mask::full(v.grid());
        let p = extract_synthesis_patches(&v, &v, &mask, &g, 0.5).unwrap();
        assert_eq!(p.iter().map(|w| w.spec.x).collect::<Vec<_>>(), vec![0, 32, 64]);
        let empty = Mask::new(Array3::from_elem((128, 64, 5), false), v.grid().clone()).unwrap();
        assert!(matches!(
            extract_synthesis_patches(&v, &v, &empty, &g, 0.5),
            Err(Error::EmptyMask(_))
        ));
    }

    #[test]
    fn too_small_grid_is_rejected() {
        let v = volume([32, 32, 5]);
        let g = WindowGeometry::with_default_stride([64, 64]);
        assert!(matches!(extract_segmentation_slabs(&v, None, &g), Err(Error::Geometry(_))));
    }

    #[test]
    fn crop_grows_small_support_to_window() {
        let mut sup = Array3::from_elem((40, 40, 3), false);
        sup[[20, 21, 1]] = true;
        let (lo, hi) = crop_region(&sup, [16, 8]).unwrap();
        assert_eq!([hi[0] - lo[0], hi[1] - lo[1]], [16, 8]);
        assert!(lo[0] <= 20 && hi[0] > 20 && lo[1] <= 21 && hi[1] > 21);
        sup[[39, 0, 0]] = true;
        let (lo, hi) = crop_region(&sup, [16, 8]).unwrap();
        assert_eq!((lo, hi), ([20, 0], [40, 22]));
    }

    #[test]
    fn stitch_averages_overlaps_and_reports_holes() {
        let mut st = Stitcher::new([4, 2, 1], 1);
        let spec = |x| WindowSpec {
            subject: 0,
            x,
            y: 0,
            z_center: 0,
        };
        st.add(&spec(0), &Array4::from_elem((1, 1, 3, 2), 0.2));
        st.add(&spec(1), &Array4::from_elem((1, 1, 3, 2), 0.6));
        let out = st.finish(&[0.0], false).unwrap();
        assert!((out.data[[0, 0, 0, 0]] - 0.2).abs() < 1e-7);
        assert!((out.data[[0, 1, 0, 0]] - 0.4).abs() < 1e-7);
        assert!((out.data[[0, 3, 1, 0]] - 0.6).abs() < 1e-7);

        let mut st = Stitcher::new([4, 2, 1], 1);
        st.add(&spec(0), &Array4::from_elem((1, 1, 2, 2), 0.2));
        match st.finish(&[0.0], false) {
            Err(Error::Uncovered { lo, hi, count }) => {
                assert_eq!((lo, hi, count), ([2, 0, 0], [3, 1, 0], 4));
            }
            other => panic!("expected coverage error, got {other:?}"),
        }
    }

    #[test]
    fn argmax_ties_go_to_lowest_code() {
        let mut data = Array4::zeros((13, 1, 1, 1));
        data[[3, 0, 0, 0]] = 0.5;
        data[[7, 0, 0, 0]] = 0.5;
        assert_eq!(ClassMaps { data }.argmax()[[0, 0, 0]], 3);
    }

    #[test]
    fn ninety_degree_rotation_permutes_pixels() {
        let v = volume([8, 8, 5]);
        let grid = v.grid().clone();
        let lm = LabelMap::new(
            Array3::from_shape_fn((8, 8, 5), |(x, y, _)| ((x * 8 + y) % 13) as u8),
            grid,
        )
        .unwrap();
        let spec = WindowSpec {
            subject: 0,
            x: 0,
            y: 0,
            z_center: 2,
        };
        let w = extract_window(&spec, [8, 8], &[&v], Some(&lm));
        let t = Transform {
            scale: 1.0,
            shear: 0.0,
            rotation: std::f64::consts::FRAC_PI_2,
            through_plane: 0.0,
        };
        let r = apply_transform(&w, &t);
        // output (x, y) samples source M^-1 (p - c) + c; for a quarter turn
        // that is (y, 7 - x)
        for x in 0..8 {
            for y in 0..8 {
                assert!((r.image[[0, 2, x, y]] - w.image[[0, 2, y, 7 - x]]).abs() < 1e-5);
                assert_eq!(r.labels.as_ref().unwrap()[[2, x, y]], w.labels.as_ref().unwrap()[[2, y, 7 - x]]);
            }
        }
    }

    #[test]
    fn identity_augmentation_is_identity_and_seeded_draws_repeat() {
        let v = volume([16, 16, 5]);
        let w = extract_segmentation_slabs(&v, None, &WindowGeometry::with_default_stride([16, 16])).unwrap();
        let id = AugmentationParams::identity();
        assert_eq!(augment(&w[2], &id, &mut window_rng(1, 0, 2)), w[2]);
        let p = AugmentationParams {
            through_plane: true,
            ..AugmentationParams::default()
        };
        let a = augment(&w[2], &p, &mut window_rng(1, 3, 2));
        let b = augment(&w[2], &p, &mut window_rng(1, 3, 2));
        assert_eq!(a, b);
        assert_ne!(a, w[2]);
        assert!(AugmentationParams {
            scale: [1.1, 1.2],
            ..p
        }
        .validate()
        .is_err());
    }
}
