//! Synthetic head phantoms with paired MPRAGE-like and WMn-like contrasts.
//!
//! The thalamus is an ellipsoidal container tiled by twelve structure cells.
//! Each structure owns a core ellipsoid; a voxel of the container belongs to
//! the structure whose core-normalized distance `|(p - c) / r|` is smallest.
//! Disjoint cores guarantee every core lies inside its own cell, so the
//! tiling reproduces the requested layout and structure sizes follow the core
//! radii. Atrophy shrinks a cell about its core center by a linear factor `f`
//! (volume close to `f^3`); vacated voxels become unlabeled thalamic matrix.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::layout::SubjectPaths;
use crate::stats::{write_cohort_csv, CohortRecord};
use crate::volume::{
    save_labelmap, save_volume, structure_volume_mm3, Grid, LabelMap, Mask, Provenance, Structure, Volume,
    NUM_STRUCTURES,
};
use crate::{Error, Result};

/// Intracranial volume at which the default geometry is drawn.
pub const ICV_REF_MM3: f64 = 1.45e6;
/// Cohort ICV distribution: normal, clipped to `ICV_RANGE_MM3`.
pub const ICV_MEAN_MM3: f64 = 1.45e6;
pub const ICV_SD_MM3: f64 = 1.3e5;
pub const ICV_RANGE_MM3: (f64, f64) = (1.1e6, 1.8e6);
/// Cohort ages are uniform on this range.
pub const AGE_RANGE_YEARS: (f64, f64) = (25.0, 70.0);
/// Fractional thalamic volume loss per year of age, relative to `AGE_REF_YEARS`.
pub const AGE_VOLUME_SLOPE: f64 = 0.003;
pub const AGE_REF_YEARS: f64 = 47.5;

/// Structures treated as small when comparing pipelines.
pub const SMALL_STRUCTURES: [Structure; 5] =
    [Structure::LGN, Structure::MGN, Structure::CM, Structure::Hb, Structure::MTT];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Site {
    pub structure: Structure,
    /// Core center relative to the thalamus center, mm.
    pub offset: [f64; 3],
    /// Core semi-axes, mm.
    pub radii: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastTable {
    pub background: f32,
    pub csf: f32,
    pub gm: f32,
    pub wm: f32,
    /// Thalamic tissue not assigned to any structure.
    pub matrix: f32,
    /// Indexed by structure code - 1.
    pub nuclei: [f32; NUM_STRUCTURES],
}

impl ContrastTable {
    fn values(&self) -> impl Iterator<Item = f32> + '_ {
        [self.background, self.csf, self.gm, self.wm, self.matrix]
            .into_iter()
            .chain(self.nuclei.iter().copied())
    }

    /// Population SD of the structure levels.
    pub fn nuclear_spread(&self) -> f64 {
        let v: Vec<f64> = self.nuclei.iter().map(|&x| f64::from(x)).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionSpec {
    pub count: usize,
    /// Sphere radius, mm.
    pub radius: f64,
    pub mprage_offset: f32,
    pub wmn_offset: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing: [f32; 3],
    pub seed: u64,
    /// Brain ellipsoid, mm in grid coordinates (`index * spacing`).
    pub brain_center: [f64; 3],
    pub brain_radii: [f64; 3],
    /// Normalized brain radius where cortex starts and where the outer CSF
    /// rim starts.
    pub cortex_start: f64,
    pub csf_start: f64,
    /// Ventricle ellipsoid relative to the thalamus center.
    pub ventricle_offset: [f64; 3],
    pub ventricle_radii: [f64; 3],
    pub thalamus_center: [f64; 3],
    pub thalamus_radii: [f64; 3],
    /// Container voxels farther than this normalized distance from every core
    /// stay unlabeled.
    pub reach: f64,
    pub sites: Vec<Site>,
    pub mprage: ContrastTable,
    pub wmn: ContrastTable,
    pub noise_sd: f32,
    /// Gaussian smoothing SD in voxels; 0 disables it.
    pub smoothing_sigma: f64,
    pub lesions: Option<LesionSpec>,
    /// Linear shrink factor per structure, in (0, 1].
    #[serde(default)]
    pub atrophy: BTreeMap<Structure, f64>,
}

const WMN_LEVELS: [f32; NUM_STRUCTURES] = [0.85, 0.45, 0.65, 0.35, 0.75, 0.55, 0.9, 0.3, 0.8, 0.6, 0.95, 0.25];
const WMN_MEAN: f32 = 0.6;
/// MPRAGE carries the same nuclear pattern compressed by this factor.
const MPRAGE_COMPRESSION: f32 = 0.1;

fn default_sites() -> Vec<Site> {
    use Structure::*;
    let s = |structure, offset, radii| Site { structure, offset, radii };
    vec![
        s(AV, [1.0, -11.0, 2.0], [4.0, 3.0, 3.0]),
        s(VA, [-9.0, -9.0, 0.0], [4.0, 3.5, 4.0]),
        s(VLa, [-16.0, -2.0, 0.0], [3.0, 3.5, 4.0]),
        s(VLp, [-8.0, -1.0, 0.0], [4.5, 4.0, 5.0]),
        s(VPl, [-12.0, 7.0, 0.0], [4.0, 3.0, 4.0]),
        s(Pul, [6.0, 10.0, 0.0], [7.0, 4.0, 5.0]),
        s(LGN, [-4.0, 12.0, -1.0], [2.5, 2.0, 2.5]),
        s(MGN, [15.0, 4.0, -2.0], [2.5, 2.5, 2.5]),
        s(CM, [1.0, 3.0, -1.0], [3.0, 2.5, 3.0]),
        s(MD, [8.0, -3.0, 0.0], [5.0, 4.0, 5.0]),
        s(Hb, [14.0, -4.0, 4.0], [2.0, 2.0, 2.0]),
        s(MTT, [-1.0, -4.0, -2.0], [1.5, 1.5, 3.0]),
    ]
}

impl Default for PhantomSpec {
    /// 96x96x24 grid at 1 mm with a single thalamus in the middle.
    fn default() -> Self {
        let mut mprage_nuclei = [0.0; NUM_STRUCTURES];
        for (m, w) in mprage_nuclei.iter_mut().zip(WMN_LEVELS) {
            *m = 0.62 + MPRAGE_COMPRESSION * (w - WMN_MEAN);
        }
        PhantomSpec {
            shape: [96, 96, 24],
            spacing: [1.0, 1.0, 1.0],
            seed: 0,
            brain_center: [47.5, 47.5, 11.5],
            brain_radii: [44.0, 46.0, 18.0],
            cortex_start: 0.82,
            csf_start: 0.94,
            ventricle_offset: [0.0, -24.0, 0.0],
            ventricle_radii: [8.0, 4.0, 6.0],
            thalamus_center: [47.5, 51.5, 11.5],
            thalamus_radii: [22.0, 16.0, 8.0],
            reach: 2.5,
            sites: default_sites(),
            mprage: ContrastTable {
                background: 0.0,
                csf: 0.08,
                gm: 0.5,
                wm: 0.82,
                matrix: 0.61,
                nuclei: mprage_nuclei,
            },
            wmn: ContrastTable {
                background: 0.0,
                csf: 0.3,
                gm: 0.7,
                wm: 0.12,
                matrix: 0.5,
                nuclei: WMN_LEVELS,
            },
            noise_sd: 0.02,
            smoothing_sigma: 0.5,
            lesions: None,
            atrophy: BTreeMap::new(),
        }
    }
}

fn ellipsoid_norm(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
    let mut s = 0.0;
    for a in 0..3 {
        let d = (p[a] - c[a]) / r[a];
        s += d * d;
    }
    s.sqrt()
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Seed for the `index`-th item drawn from a parent seed.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"thalseg-phantom");
    h.update(tag.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl PhantomSpec {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.shape, self.spacing)
    }

    fn site_center(&self, i: usize) -> [f64; 3] {
        add(self.thalamus_center, self.sites[i].offset)
    }

    fn pos(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            x as f64 * f64::from(self.spacing[0]),
            y as f64 * f64::from(self.spacing[1]),
            z as f64 * f64::from(self.spacing[2]),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Phantom(m));
        if self.shape.iter().any(|&n| n == 0) {
            return bad("grid shape has a zero dimension".into());
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("voxel spacing must be positive".into());
        }
        for (what, r) in [
            ("brain", self.brain_radii),
            ("ventricle", self.ventricle_radii),
            ("thalamus", self.thalamus_radii),
        ] {
            if r.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return bad(format!("{what} radii must be positive"));
            }
        }
        if !(0.0 < self.cortex_start && self.cortex_start < self.csf_start && self.csf_start <= 1.0) {
            return bad("need 0 < cortex_start < csf_start <= 1".into());
        }
        if !(self.reach >= 1.0) {
            return bad("reach must be at least 1".into());
        }
        if !(self.noise_sd >= 0.0) {
            return bad("noise SD must be nonnegative".into());
        }
        if !(self.smoothing_sigma >= 0.0) {
            return bad("smoothing width must be nonnegative".into());
        }
        for t in [&self.mprage, &self.wmn] {
            if t.values().any(|v| !(0.0..=1.0).contains(&v)) {
                return bad("intensity tables must lie in [0, 1]".into());
            }
        }
        if let Some(l) = &self.lesions {
            if !(l.radius > 0.0) {
                return bad("lesion radius must be positive".into());
            }
        }
        let mut seen = [false; NUM_STRUCTURES];
        for s in &self.sites {
            let i = s.structure.code() as usize - 1;
            if std::mem::replace(&mut seen[i], true) {
                return bad(format!("structure {} listed twice", s.structure.abbrev()));
            }
            if s.radii.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return bad(format!("{} radii must be positive", s.structure.abbrev()));
            }
        }
        if seen.iter().any(|s| !s) {
            return bad("every structure needs a site".into());
        }
        for (s, &f) in &self.atrophy {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("atrophy factor for {} must lie in (0, 1], got {f}", s.abbrev()));
            }
        }
        self.check_cores()
    }

    /// Cores must sit inside the thalamus and must not share a voxel.
    fn check_cores(&self) -> Result<()> {
        let mut owner = vec![0u8; self.shape.iter().product()];
        for (i, site) in self.sites.iter().enumerate() {
            let c = self.site_center(i);
            let (lo, hi) = self.index_box(c, site.radii);
            for x in lo[0]..hi[0] {
                for y in lo[1]..hi[1] {
                    for z in lo[2]..hi[2] {
                        let p = self.pos(x, y, z);
                        if ellipsoid_norm(p, c, site.radii) > 1.0 {
                            continue;
                        }
                        if ellipsoid_norm(p, self.thalamus_center, self.thalamus_radii) > 1.0 {
                            return Err(Error::Phantom(format!(
                                "{} core leaves the thalamus at voxel {:?}",
                                site.structure.abbrev(),
                                [x, y, z]
                            )));
                        }
                        let k = (x * self.shape[1] + y) * self.shape[2] + z;
                        if owner[k] != 0 {
                            return Err(Error::Phantom(format!(
                                "cores of {} and {} overlap at voxel {:?}",
                                Structure::from_code(owner[k])?.abbrev(),
                                site.structure.abbrev(),
                                [x, y, z]
                            )));
                        }
                        owner[k] = site.structure.code();
                    }
                }
            }
        }
        Ok(())
    }

    /// Index range covering an ellipsoid, clipped to the grid.
    fn index_box(&self, c: [f64; 3], r: [f64; 3]) -> ([usize; 3], [usize; 3]) {
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for a in 0..3 {
            let s = f64::from(self.spacing[a]);
            lo[a] = ((c[a] - r[a]) / s).floor().max(0.0) as usize;
            hi[a] = (((c[a] + r[a]) / s).ceil() as i64 + 1).clamp(0, self.shape[a] as i64) as usize;
            lo[a] = lo[a].min(hi[a]);
        }
        (lo, hi)
    }

    /// Nearest core in normalized distance, or `None` beyond reach.
    fn owner_at(&self, p: [f64; 3]) -> Option<usize> {
        if ellipsoid_norm(p, self.thalamus_center, self.thalamus_radii) > 1.0 {
            return None;
        }
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for (i, s) in self.sites.iter().enumerate() {
            let d = ellipsoid_norm(p, self.site_center(i), s.radii);
            if d < best_d {
                best_d = d;
                best = Some(i);
            }
        }
        best.filter(|_| best_d <= self.reach)
    }

    /// Structure labels plus the thalamus container mask.
    fn rasterize_thalamus(&self) -> (Array3<u8>, Array3<bool>) {
        let mut labels = Array3::<u8>::zeros(self.shape);
        let mut container = Array3::from_elem(self.shape, false);
        let (lo, hi) = self.index_box(self.thalamus_center, self.thalamus_radii);
        let factors: Vec<Option<f64>> = self
            .sites
            .iter()
            .map(|s| self.atrophy.get(&s.structure).copied().filter(|&f| f < 1.0))
            .collect();
        for x in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for z in lo[2]..hi[2] {
                    let p = self.pos(x, y, z);
                    if ellipsoid_norm(p, self.thalamus_center, self.thalamus_radii) > 1.0 {
                        continue;
                    }
                    container[[x, y, z]] = true;
                    let Some(i) = self.owner_at(p) else { continue };
                    if let Some(f) = factors[i] {
                        let c = self.site_center(i);
                        let q = [
                            c[0] + (p[0] - c[0]) / f,
                            c[1] + (p[1] - c[1]) / f,
                            c[2] + (p[2] - c[2]) / f,
                        ];
                        if self.owner_at(q) != Some(i) {
                            continue;
                        }
                    }
                    labels[[x, y, z]] = self.sites[i].structure.code();
                }
            }
        }
        (labels, container)
    }

    /// Ground-truth labels only, skipping image rendering.
    pub fn labels(&self) -> Result<LabelMap> {
        self.validate()?;
        LabelMap::new(self.rasterize_thalamus().0, self.grid()?)
    }

    /// Scales head size: brain, thalamus and every core, each about its own
    /// reference center.
    pub fn scaled(&self, brain: f64, thalamus: f64) -> PhantomSpec {
        let mut s = self.clone();
        for a in 0..3 {
            s.brain_radii[a] *= brain;
            s.ventricle_radii[a] *= brain;
            s.ventricle_offset[a] *= brain;
            s.thalamus_radii[a] *= thalamus;
        }
        for site in &mut s.sites {
            for a in 0..3 {
                site.offset[a] *= thalamus;
                site.radii[a] *= thalamus;
            }
        }
        s
    }

    /// Subject-level variation: thalamus shift and per-axis scale, small core
    /// displacements and radius changes, global intensity gain. Draws are
    /// repeated until the cores stay disjoint.
    pub fn jittered(&self, rng: &mut ChaCha8Rng) -> Result<PhantomSpec> {
        for _ in 0..64 {
            let mut s = self.clone();
            s.seed = rng.random();
            let shift = [rng.random_range(-3.0..=3.0), rng.random_range(-3.0..=3.0), rng.random_range(-1.0..=1.0)];
            let scale: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.95..=1.05));
            for a in 0..3 {
                s.thalamus_center[a] += shift[a];
                s.thalamus_radii[a] *= scale[a];
            }
            for site in &mut s.sites {
                for a in 0..3 {
                    site.offset[a] = site.offset[a] * scale[a] + rng.random_range(-0.5..=0.5);
                    site.radii[a] *= scale[a] * rng.random_range(0.96..=1.04);
                }
            }
            let gain = rng.random_range(0.97f32..=1.03);
            for t in [&mut s.mprage, &mut s.wmn] {
                for v in [&mut t.csf, &mut t.gm, &mut t.wm, &mut t.matrix]
                    .into_iter()
                    .chain(t.nuclei.iter_mut())
                {
                    *v = (*v * gain).min(1.0);
                }
            }
            if s.validate().is_ok() {
                return Ok(s);
            }
        }
        Err(Error::Phantom("could not draw a valid jittered layout in 64 attempts".into()))
    }

    /// Population-SD ratio of WMn to MPRAGE structure levels.
    pub fn contrast_ratio(&self) -> f64 {
        self.wmn.nuclear_spread() / self.mprage.nuclear_spread().max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub mprage: Volume,
    pub wmn: Volume,
    pub labels: LabelMap,
    pub brain_mask: Mask,
}

#[derive(Clone, Copy)]
enum Tissue {
    Background,
    Csf,
    Gm,
    Wm,
    Matrix,
    Nucleus(u8),
}

fn level(t: &ContrastTable, tissue: Tissue) -> f32 {
    match tissue {
        Tissue::Background => t.background,
        Tissue::Csf => t.csf,
        Tissue::Gm => t.gm,
        Tissue::Wm => t.wm,
        Tissue::Matrix => t.matrix,
        Tissue::Nucleus(c) => t.nuclei[c as usize - 1],
    }
}

/// Renders both contrasts from one geometry, then smooths and adds noise.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let grid = spec.grid()?;
    let (labels, container) = spec.rasterize_thalamus();
    let ventricle_c = add(spec.thalamus_center, spec.ventricle_offset);
    let mut tissue = Array3::from_elem(spec.shape, Tissue::Background);
    let mut brain = Array3::from_elem(spec.shape, false);
    for ((x, y, z), t) in tissue.indexed_iter_mut() {
        let p = spec.pos(x, y, z);
        let rb = ellipsoid_norm(p, spec.brain_center, spec.brain_radii);
        if rb > 1.0 {
            continue;
        }
        brain[[x, y, z]] = true;
        *t = if container[[x, y, z]] {
            match labels[[x, y, z]] {
                0 => Tissue::Matrix,
                c => Tissue::Nucleus(c),
            }
        } else if rb > spec.csf_start || ellipsoid_norm(p, ventricle_c, spec.ventricle_radii) <= 1.0 {
            Tissue::Csf
        } else if rb > spec.cortex_start {
            Tissue::Gm
        } else {
            Tissue::Wm
        };
    }
    let mut mprage = tissue.mapv(|t| level(&spec.mprage, t));
    let mut wmn = tissue.mapv(|t| level(&spec.wmn, t));

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "render", 0));
    if let Some(lesions) = &spec.lesions {
        let thal: Vec<[usize; 3]> = container
            .indexed_iter()
            .filter(|(_, &c)| c)
            .map(|((x, y, z), _)| [x, y, z])
            .collect();
        for _ in 0..lesions.count {
            let [cx, cy, cz] = thal[rng.random_range(0..thal.len())];
            let c = spec.pos(cx, cy, cz);
            let (lo, hi) = spec.index_box(c, [lesions.radius; 3]);
            for x in lo[0]..hi[0] {
                for y in lo[1]..hi[1] {
                    for z in lo[2]..hi[2] {
                        if ellipsoid_norm(spec.pos(x, y, z), c, [lesions.radius; 3]) <= 1.0 {
                            mprage[[x, y, z]] = (mprage[[x, y, z]] + lesions.mprage_offset).clamp(0.0, 1.0);
                            wmn[[x, y, z]] = (wmn[[x, y, z]] + lesions.wmn_offset).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
    }

    if spec.smoothing_sigma > 0.0 {
        mprage = gaussian_smooth(&mprage, spec.smoothing_sigma);
        wmn = gaussian_smooth(&wmn, spec.smoothing_sigma);
    }
    if spec.noise_sd > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise_sd).map_err(|e| Error::Phantom(e.to_string()))?;
        let mut rm = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "noise-mprage", 0));
        let mut rw = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "noise-wmn", 0));
        mprage.iter_mut().for_each(|v| *v += normal.sample(&mut rm));
        wmn.iter_mut().for_each(|v| *v += normal.sample(&mut rw));
    }
    // skull-stripped: nothing survives outside the brain
    for ((m, w), &b) in mprage.iter_mut().zip(wmn.iter_mut()).zip(&brain) {
        *m = if b { m.clamp(0.0, 1.0) } else { 0.0 };
        *w = if b { w.clamp(0.0, 1.0) } else { 0.0 };
    }

    Ok(Phantom {
        mprage: Volume::new(mprage, grid.clone(), Provenance::Preprocessed)?,
        wmn: Volume::new(wmn, grid.clone(), Provenance::Preprocessed)?,
        labels: LabelMap::new(labels, grid.clone())?,
        brain_mask: Mask::new(brain, grid)?,
    })
}

/// Separable Gaussian blur with clamped borders, truncated at 3 sigma.
fn gaussian_smooth(a: &Array3<f32>, sigma: f64) -> Array3<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    let k: Vec<f32> = k.iter().map(|v| (v / s) as f32).collect();
    let mut cur = a.clone();
    for axis in 0..3 {
        let n = cur.len_of(Axis(axis)) as isize;
        let mut out = Array3::<f32>::zeros(cur.dim());
        for (mut o, i) in out.lanes_mut(Axis(axis)).into_iter().zip(cur.lanes(Axis(axis))) {
            for j in 0..n {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let src = (j + t as isize - r).clamp(0, n - 1);
                    acc += kv * i[src as usize];
                }
                o[j as usize] = acc;
            }
        }
        cur = out;
    }
    cur
}

/// Per-subject JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub subject_id: String,
    pub diagnosis: bool,
    pub age_years: f64,
    pub icv_mm3: f64,
    pub spec: PhantomSpec,
}

pub fn write_phantom(paths: &SubjectPaths, phantom: &Phantom, sidecar: &Sidecar) -> Result<()> {
    std::fs::create_dir_all(&paths.dir).map_err(|e| Error::io(&paths.dir, e))?;
    save_volume(&phantom.mprage, &paths.mprage())?;
    save_volume(&phantom.wmn, &paths.wmn())?;
    save_labelmap(&phantom.labels, &paths.labels())?;
    phantom.brain_mask.save(&paths.brain_mask())?;
    write_sidecar(paths, sidecar)
}

fn write_sidecar(paths: &SubjectPaths, sidecar: &Sidecar) -> Result<()> {
    std::fs::create_dir_all(&paths.dir).map_err(|e| Error::io(&paths.dir, e))?;
    let json = serde_json::to_string_pretty(sidecar)?;
    std::fs::write(paths.sidecar(), json).map_err(|e| Error::io(paths.sidecar(), e))
}

/// `n` healthy subjects drawn from `base` with layout jitter.
pub fn dataset_specs(base: &PhantomSpec, n: usize, seed: u64) -> Result<Vec<PhantomSpec>> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "subject", i as u64));
            base.jittered(&mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSubject {
    pub record: CohortRecord,
    pub spec: PhantomSpec,
}

/// Draws a two-group cohort. Controls come first; patients carry `atrophy`.
/// Head size follows the sampled ICV, thalamic size additionally declines
/// with age, and every subject gets layout jitter.
pub fn cohort_specs(
    n_controls: usize,
    n_patients: usize,
    base: &PhantomSpec,
    atrophy: &BTreeMap<Structure, f64>,
    seed: u64,
) -> Result<Vec<CohortSubject>> {
    if n_controls < 2 || n_patients < 2 {
        return Err(Error::Phantom("a cohort needs at least 2 subjects per group".into()));
    }
    let icv_dist = Normal::new(ICV_MEAN_MM3, ICV_SD_MM3).map_err(|e| Error::Phantom(e.to_string()))?;
    let mut out = Vec::with_capacity(n_controls + n_patients);
    for i in 0..n_controls + n_patients {
        let patient = i >= n_controls;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "cohort", i as u64));
        let age = rng.random_range(AGE_RANGE_YEARS.0..=AGE_RANGE_YEARS.1);
        let icv = icv_dist.sample(&mut rng).clamp(ICV_RANGE_MM3.0, ICV_RANGE_MM3.1);
        let head = (icv / ICV_REF_MM3).cbrt();
        let aging = (1.0 - AGE_VOLUME_SLOPE * (age - AGE_REF_YEARS)).cbrt();
        let mut spec = base.scaled(head, head * aging).jittered(&mut rng)?;
        if patient {
            spec.atrophy = atrophy.clone();
        }
        spec.validate()?;
        let labels = spec.labels()?;
        let mut gt = [0.0; NUM_STRUCTURES];
        for s in Structure::ALL {
            gt[s.code() as usize - 1] = structure_volume_mm3(&labels, s.code())?;
        }
        out.push(CohortSubject {
            record: CohortRecord {
                subject_id: format!("sub-{i:03}"),
                diagnosis: patient,
                age_years: age,
                icv_mm3: icv,
                gt: Some(gt),
                ncs: None,
                scs: None,
            },
            spec,
        });
    }
    Ok(out)
}

/// Writes a cohort tree under `root` plus `cohort.csv`. With `labels_only`
/// each subject gets its label map and sidecar but no rendered images.
pub fn generate_cohort(
    root: &Path,
    n_controls: usize,
    n_patients: usize,
    base: &PhantomSpec,
    atrophy: &BTreeMap<Structure, f64>,
    seed: u64,
    labels_only: bool,
) -> Result<Vec<CohortRecord>> {
    let subjects = cohort_specs(n_controls, n_patients, base, atrophy, seed)?;
    for s in &subjects {
        let paths = SubjectPaths::new(root, &s.record.subject_id);
        let sidecar = Sidecar {
            subject_id: s.record.subject_id.clone(),
            diagnosis: s.record.diagnosis,
            age_years: s.record.age_years,
            icv_mm3: s.record.icv_mm3,
            spec: s.spec.clone(),
        };
        if labels_only {
            save_labelmap(&s.spec.labels()?, &paths.labels())?;
            write_sidecar(&paths, &sidecar)?;
        } else {
            write_phantom(&paths, &generate_phantom(&s.spec)?, &sidecar)?;
        }
    }
    let records: Vec<CohortRecord> = subjects.into_iter().map(|s| s.record).collect();
    write_cohort_csv(&root.join("cohort.csv"), &records)?;
    Ok(records)
}

/// Writes `n` healthy subjects named `{prefix}-{i:03}` and returns their ids.
pub fn generate_dataset(root: &Path, prefix: &str, n: usize, base: &PhantomSpec, seed: u64) -> Result<Vec<String>> {
    let specs = dataset_specs(base, n, seed)?;
    let mut ids = Vec::with_capacity(n);
    for (i, spec) in specs.iter().enumerate() {
        let id = format!("{prefix}-{i:03}");
        let phantom = generate_phantom(spec)?;
        let sidecar = Sidecar {
            subject_id: id.clone(),
            diagnosis: false,
            age_years: AGE_REF_YEARS,
            icv_mm3: ICV_REF_MM3,
            spec: spec.clone(),
        };
        write_phantom(&SubjectPaths::new(root, &id), &phantom, &sidecar)?;
        ids.push(id);
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid_and_tiles_the_thalamus() {
        let spec = PhantomSpec::default();
        spec.validate().unwrap();
        let lm = spec.labels().unwrap();
        for s in Structure::ALL {
            assert!(lm.voxel_count(s.code()) > 50, "{} too small", s.abbrev());
        }
        assert!(spec.contrast_ratio() >= 5.0);
    }

    #[test]
    fn noiseless_rendering_hits_table_levels() {
        let spec = PhantomSpec {
            noise_sd: 0.0,
            smoothing_sigma: 0.0,
            ..PhantomSpec::default()
        };
        let p = generate_phantom(&spec).unwrap();
        for ((idx, &c), (&m, &w)) in p.labels.data().indexed_iter().zip(p.mprage.data().iter().zip(p.wmn.data())) {
            if c > 0 {
                assert_eq!(m, spec.mprage.nuclei[c as usize - 1], "{idx:?}");
                assert_eq!(w, spec.wmn.nuclei[c as usize - 1], "{idx:?}");
            }
        }
    }

    #[test]
    fn same_seed_same_bits() {
        let spec = PhantomSpec {
            seed: 9,
            ..PhantomSpec::default()
        };
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.mprage.data(), b.mprage.data());
        assert_eq!(a.wmn.data(), b.wmn.data());
        assert_eq!(a.labels.data(), b.labels.data());
    }

    #[test]
    fn atrophy_scales_volume_cubically() {
        let base = PhantomSpec::default();
        let n0 = base.labels().unwrap().voxel_count(Structure::VLp.code()) as f64;
        let mut at = base.clone();
        at.atrophy.insert(Structure::VLp, 0.8);
        let n1 = at.labels().unwrap().voxel_count(Structure::VLp.code()) as f64;
        let ratio = n1 / n0;
        assert!((ratio / 0.512 - 1.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn overlapping_cores_are_rejected() {
        let mut spec = PhantomSpec::default();
        spec.sites[1].offset = spec.sites[0].offset;
        assert!(matches!(spec.validate(), Err(Error::Phantom(_))));
        let mut spec = PhantomSpec::default();
        spec.atrophy.insert(Structure::MD, 1.2);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn jitter_keeps_layout_valid() {
        let base = PhantomSpec::default();
        for s in dataset_specs(&base, 6, 3).unwrap() {
            s.validate().unwrap();
        }
        assert_eq!(dataset_specs(&base, 2, 3).unwrap(), dataset_specs(&base, 2, 3).unwrap());
    }
}
