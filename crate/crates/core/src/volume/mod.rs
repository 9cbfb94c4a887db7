//! In-memory volumes, label maps and masks on a shared voxel grid, plus
//! NIfTI-1 persistence.
//!
//! All arrays are indexed `[x, y, z]` in canonical (RAS+) axis order; files
//! with other orientations are permuted and flipped on load so downstream
//! code never has to think about axis order.

pub mod nifti;
pub mod taxonomy;

use std::path::Path;

use ndarray::{Array3, Axis, ShapeBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use nifti::{NiftiHeader, Payload};
pub use taxonomy::{group_of, Group, Structure, NUM_CLASSES, NUM_STRUCTURES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Raw,
    Preprocessed,
    Synthesized,
}

impl Provenance {
    fn tag(self) -> &'static str {
        match self {
            Provenance::Raw => "thalseg:raw",
            Provenance::Preprocessed => "thalseg:preprocessed",
            Provenance::Synthesized => "thalseg:synthesized",
        }
    }

    fn from_descrip(d: &str) -> Provenance {
        match d.trim() {
            "thalseg:preprocessed" => Provenance::Preprocessed,
            "thalseg:synthesized" => Provenance::Synthesized,
            _ => Provenance::Raw,
        }
    }
}

/// Voxel grid geometry shared by paired images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    shape: [usize; 3],
    spacing: [f32; 3],
    /// Voxel-to-world transform, three rows of four.
    affine: [[f64; 4]; 3],
}

impl Grid {
    pub fn new(shape: [usize; 3], spacing: [f32; 3]) -> Result<Grid> {
        let affine = [
            [spacing[0] as f64, 0.0, 0.0, 0.0],
            [0.0, spacing[1] as f64, 0.0, 0.0],
            [0.0, 0.0, spacing[2] as f64, 0.0],
        ];
        Grid::with_affine(shape, spacing, affine)
    }

    pub fn with_affine(shape: [usize; 3], spacing: [f32; 3], affine: [[f64; 4]; 3]) -> Result<Grid> {
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidVolume(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::InvalidVolume(format!("empty grid {shape:?}")));
        }
        Ok(Grid {
            shape,
            spacing,
            affine,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn affine(&self) -> [[f64; 4]; 3] {
        self.affine
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().map(|&s| s as f64).product()
    }

    pub fn num_voxels(&self) -> usize {
        self.shape.iter().product()
    }

    /// Same shape and spacing (affines may differ by float noise after
    /// external tools rewrite headers).
    pub fn matches(&self, other: &Grid) -> bool {
        self.shape == other.shape
            && self
                .spacing
                .iter()
                .zip(other.spacing.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-4 * a.abs().max(1.0))
    }

    pub fn check_same(&self, other: &Grid) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::GridMismatch {
                expected: self.shape,
                found: other.shape,
            });
        }
        if !self.matches(other) {
            return Err(Error::InvalidVolume(format!(
                "voxel spacing differs: {:?} vs {:?}",
                self.spacing, other.spacing
            )));
        }
        Ok(())
    }

    fn header(&self, datatype: i16, bitpix: i16, descrip: &str) -> NiftiHeader {
        let mut h = NiftiHeader {
            datatype,
            bitpix,
            descrip: descrip.to_string(),
            ..NiftiHeader::default()
        };
        h.dim = [3, self.shape[0] as i16, self.shape[1] as i16, self.shape[2] as i16, 1, 1, 1, 1];
        h.pixdim = [1.0, self.spacing[0], self.spacing[1], self.spacing[2], 1.0, 1.0, 1.0, 1.0];
        h.sform_code = 1;
        for r in 0..3 {
            for c in 0..4 {
                h.srow[r][c] = self.affine[r][c] as f32;
            }
        }
        let diagonal = (0..3).all(|r| (0..3).all(|c| r == c || self.affine[r][c] == 0.0))
            && (0..3).all(|i| self.affine[i][i] > 0.0);
        if diagonal {
            h.qform_code = 1;
            h.qoffset = [self.affine[0][3] as f32, self.affine[1][3] as f32, self.affine[2][3] as f32];
        }
        h
    }
}

/// Boolean mask on a grid (brain mask, thalamus mask, per-structure mask).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    data: Array3<bool>,
    grid: Grid,
}

impl Mask {
    pub fn new(data: Array3<bool>, grid: Grid) -> Result<Mask> {
        check_shape(data.dim(), &grid)?;
        Ok(Mask { data, grid })
    }

    pub fn full(grid: &Grid) -> Mask {
        let s = grid.shape;
        Mask {
            data: Array3::from_elem((s[0], s[1], s[2]), true),
            grid: grid.clone(),
        }
    }

    pub fn data(&self) -> &Array3<bool> {
        &self.data
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Inclusive-exclusive bounding box `(lo, hi)` of the set voxels.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for ((x, y, z), &v) in self.data.indexed_iter() {
            if v {
                any = true;
                for (a, i) in [x, y, z].into_iter().enumerate() {
                    lo[a] = lo[a].min(i);
                    hi[a] = hi[a].max(i + 1);
                }
            }
        }
        any.then_some((lo, hi))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let labels = self.data.mapv(u8::from);
        write_u8(path, &labels, &self.grid, "thalseg:mask")
    }

    pub fn load(path: &Path) -> Result<Mask> {
        let (grid, values, _) = load_integers(path)?;
        Mask::new(values.mapv(|v| v != 0), grid)
    }
}

/// A scalar intensity image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    grid: Grid,
    provenance: Provenance,
}

impl Volume {
    pub fn new(data: Array3<f32>, grid: Grid, provenance: Provenance) -> Result<Volume> {
        check_shape(data.dim(), &grid)?;
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-finite intensity {v}")));
        }
        if provenance != Provenance::Raw {
            if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidVolume(format!(
                    "{provenance:?} volume must lie in [0,1], found {v}"
                )));
            }
        }
        Ok(Volume {
            data,
            grid,
            provenance,
        })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn shape(&self) -> [usize; 3] {
        self.grid.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.grid.spacing
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }
}

/// Integer label image over the structure taxonomy (0 = background).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    data: Array3<u8>,
    grid: Grid,
}

impl LabelMap {
    pub fn new(data: Array3<u8>, grid: Grid) -> Result<LabelMap> {
        check_shape(data.dim(), &grid)?;
        if let Some(&c) = data.iter().find(|&&c| c as usize > NUM_STRUCTURES) {
            return Err(Error::UnknownCode(c as i64));
        }
        Ok(LabelMap { data, grid })
    }

    pub fn background(grid: &Grid) -> LabelMap {
        let s = grid.shape;
        LabelMap {
            data: Array3::zeros((s[0], s[1], s[2])),
            grid: grid.clone(),
        }
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn shape(&self) -> [usize; 3] {
        self.grid.shape
    }

    pub fn mask_of(&self, code: u8) -> Mask {
        Mask {
            data: self.data.mapv(|c| c == code),
            grid: self.grid.clone(),
        }
    }

    /// Whole thalamus: union of all structure codes.
    pub fn thalamus_mask(&self) -> Mask {
        Mask {
            data: self.data.mapv(|c| c != 0),
            grid: self.grid.clone(),
        }
    }

    pub fn voxel_count(&self, code: u8) -> usize {
        self.data.iter().filter(|&&c| c == code).count()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_u8(path, &self.data, &self.grid, "thalseg:labels")
    }

    pub fn load(path: &Path) -> Result<LabelMap> {
        let (grid, values, path_desc) = load_integers(path)?;
        if let Some(&bad) = values.iter().find(|&&v| !(0..=NUM_STRUCTURES as i64).contains(&v)) {
            return Err(Error::InvalidVolume(format!(
                "label code {bad} in {path_desc} is outside the taxonomy"
            )));
        }
        LabelMap::new(values.mapv(|v| v as u8), grid)
    }
}

/// Physical volume (mm³) of the voxels carrying `code`.
pub fn structure_volume_mm3(labels: &LabelMap, code: u8) -> Result<f64> {
    if code as usize > NUM_STRUCTURES {
        return Err(Error::UnknownCode(code as i64));
    }
    Ok(labels.voxel_count(code) as f64 * labels.grid.voxel_volume_mm3())
}

fn check_shape(dim: (usize, usize, usize), grid: &Grid) -> Result<()> {
    let found = [dim.0, dim.1, dim.2];
    if found != grid.shape {
        return Err(Error::GridMismatch {
            expected: grid.shape,
            found,
        });
    }
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (header, payload) = nifti::read(path)?;
    let shape = spatial_shape(path, &header)?;
    let values: Vec<f32> = match payload {
        Payload::Float32(v) => v,
        Payload::Float64(v) => v.into_iter().map(|x| x as f32).collect(),
        Payload::Int(v) => v.into_iter().map(|x| x as f32).collect(),
    };
    let data = from_file_order(values, shape);
    let (data, grid) = canonicalize(data, &header, shape)?;
    Volume::new(data, grid, Provenance::from_descrip(&header.descrip))
}

pub fn save_volume(volume: &Volume, path: &Path) -> Result<()> {
    let header = volume
        .grid
        .header(nifti::DT_FLOAT32, 32, volume.provenance.tag());
    let bytes = nifti::f32_bytes(to_file_order(&volume.data));
    ensure_parent(path)?;
    nifti::write(path, &header, &bytes)
}

pub fn load_labelmap(path: &Path) -> Result<LabelMap> {
    LabelMap::load(path)
}

pub fn save_labelmap(labels: &LabelMap, path: &Path) -> Result<()> {
    labels.save(path)
}

fn write_u8(path: &Path, data: &Array3<u8>, grid: &Grid, descrip: &str) -> Result<()> {
    let header = grid.header(nifti::DT_UINT8, 8, descrip);
    let bytes: Vec<u8> = to_file_order(data).collect();
    ensure_parent(path)?;
    nifti::write(path, &header, &bytes)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && !parent.exists() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

fn load_integers(path: &Path) -> Result<(Grid, Array3<i64>, String)> {
    let (header, payload) = nifti::read(path)?;
    let shape = spatial_shape(path, &header)?;
    let values: Vec<i64> = match payload {
        Payload::Int(v) => v,
        Payload::Float32(v) => to_integral(path, v.into_iter().map(|x| x as f64))?,
        Payload::Float64(v) => to_integral(path, v.into_iter())?,
    };
    let data = from_file_order(values, shape);
    let (data, grid) = canonicalize(data, &header, shape)?;
    Ok((grid, data, path.display().to_string()))
}

fn to_integral(path: &Path, values: impl Iterator<Item = f64>) -> Result<Vec<i64>> {
    values
        .map(|x| {
            if x.fract() == 0.0 && x.is_finite() {
                Ok(x as i64)
            } else {
                Err(Error::InvalidVolume(format!(
                    "non-integer label value {x} in {}",
                    path.display()
                )))
            }
        })
        .collect()
}

fn spatial_shape(path: &Path, h: &NiftiHeader) -> Result<[usize; 3]> {
    let ndim = h.dim[0] as usize;
    // trailing singleton dimensions are harmless
    let effective = (1..=ndim).rev().find(|&i| h.dim[i] > 1).unwrap_or(1).max(3);
    if effective > 3 {
        return Err(Error::NotThreeD {
            path: path.to_path_buf(),
            ndim: effective,
        });
    }
    let d = |i: usize| if i <= ndim { h.dim[i] as usize } else { 1 };
    Ok([d(1), d(2), d(3)])
}

/// NIfTI stores x fastest; our arrays are `[x, y, z]` in standard layout.
fn from_file_order<T: Clone>(values: Vec<T>, shape: [usize; 3]) -> Array3<T> {
    Array3::from_shape_vec((shape[0], shape[1], shape[2]).f(), values)
        .expect("payload length checked against header")
        .as_standard_layout()
        .into_owned()
}

fn to_file_order<T: Copy>(data: &Array3<T>) -> impl Iterator<Item = T> + '_ {
    data.t().into_iter().copied()
}

/// Permutes/flips voxel axes so that array axis `i` runs along increasing
/// world axis `i`.
fn canonicalize<T: Clone>(
    data: Array3<T>,
    header: &NiftiHeader,
    shape: [usize; 3],
) -> Result<(Array3<T>, Grid)> {
    let affine = nifti::header_affine(header);
    let pixdim = [header.pixdim[1].abs(), header.pixdim[2].abs(), header.pixdim[3].abs()];
    let mut world_of = [0usize; 3];
    for (j, w) in world_of.iter_mut().enumerate() {
        *w = (0..3)
            .max_by(|&a, &b| affine[a][j].abs().total_cmp(&affine[b][j].abs()))
            .unwrap();
    }
    let mut seen = [false; 3];
    for &w in &world_of {
        seen[w] = true;
    }
    if !seen.iter().all(|&s| s) {
        log::warn!("oblique orientation; keeping file axis order");
        return Ok((data, Grid::with_affine(shape, pixdim, affine)?));
    }
    let mut perm = [0usize; 3];
    for (j, &w) in world_of.iter().enumerate() {
        perm[w] = j;
    }
    let mut out = data.permuted_axes(perm);
    let mut new_affine = [[0.0; 4]; 3];
    for r in 0..3 {
        new_affine[r][3] = affine[r][3];
    }
    for (i, &j) in perm.iter().enumerate() {
        let flip = affine[i][j] < 0.0;
        if flip {
            out.invert_axis(Axis(i));
            for r in 0..3 {
                new_affine[r][3] += affine[r][j] * (shape[j] as f64 - 1.0);
            }
        }
        let sign = if flip { -1.0 } else { 1.0 };
        for r in 0..3 {
            new_affine[r][i] = sign * affine[r][j];
        }
    }
    let new_shape = [shape[perm[0]], shape[perm[1]], shape[perm[2]]];
    let new_spacing = [pixdim[perm[0]], pixdim[perm[1]], pixdim[perm[2]]];
    let out = out.as_standard_layout().into_owned();
    Ok((out, Grid::with_affine(new_shape, new_spacing, new_affine)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn grid(shape: [usize; 3], spacing: [f32; 3]) -> Grid {
        Grid::new(shape, spacing).unwrap()
    }

    #[test]
    fn structure_volumes() {
        let g = grid([10, 10, 10], [1.0, 1.0, 1.0]);
        let mut data = Array3::<u8>::zeros((10, 10, 10));
        data.iter_mut().take(100).for_each(|c| *c = 4);
        let labels = LabelMap::new(data, g).unwrap();
        assert_eq!(structure_volume_mm3(&labels, 4).unwrap(), 100.0);
        assert_eq!(structure_volume_mm3(&labels, 7).unwrap(), 0.0);
        assert!(structure_volume_mm3(&labels, 13).is_err());

        let g = grid([4, 4, 4], [0.5, 0.5, 2.0]);
        let labels = LabelMap::new(Array3::from_elem((4, 4, 4), 3u8), g).unwrap();
        assert_eq!(structure_volume_mm3(&labels, 3).unwrap(), 32.0);
    }

    #[test]
    fn volumes_over_all_codes_sum_to_grid_volume() {
        let g = grid([6, 5, 4], [0.8, 0.8, 1.5]);
        let data = Array3::from_shape_fn((6, 5, 4), |(x, y, z)| ((x * 7 + y * 3 + z) % 13) as u8);
        let labels = LabelMap::new(data, g.clone()).unwrap();
        let total: f64 = (0..=12u8)
            .map(|c| structure_volume_mm3(&labels, c).unwrap())
            .sum();
        let expected = g.num_voxels() as f64 * g.voxel_volume_mm3();
        assert!((total - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn rejects_invalid_construction() {
        assert!(Grid::new([2, 2, 2], [1.0, 0.0, 1.0]).is_err());
        let g = grid([2, 2, 2], [1.0; 3]);
        assert!(LabelMap::new(Array3::from_elem((2, 2, 2), 13u8), g.clone()).is_err());
        assert!(Volume::new(Array3::from_elem((2, 2, 2), 1.5), g.clone(), Provenance::Preprocessed).is_err());
        assert!(Volume::new(Array3::from_elem((2, 2, 2), f32::NAN), g.clone(), Provenance::Raw).is_err());
        assert!(Volume::new(Array3::zeros((2, 2, 3)), g, Provenance::Raw).is_err());
    }

    #[test]
    fn mask_bounding_box() {
        let g = grid([5, 5, 5], [1.0; 3]);
        let mut d = Array3::from_elem((5, 5, 5), false);
        d[[1, 2, 3]] = true;
        d[[3, 1, 3]] = true;
        let m = Mask::new(d, g).unwrap();
        assert_eq!(m.bounding_box(), Some(([1, 1, 3], [4, 3, 4])));
        assert_eq!(m.count(), 2);
    }
}
