use approx::assert_relative_eq;
use ndarray::Array3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use thalseg::metrics::dice;
use thalseg::preprocess::{contrast_stretch, PercentileMethod};
use thalseg::sampler::{extract_window, one_hot_center, segmentation_specs, Stitcher, WindowGeometry};
use thalseg::stats::{ancova_diagnosis, bland_altman, paired_ttest};
use thalseg::volume::{load_labelmap, load_volume, save_labelmap, save_volume, Grid, LabelMap, Mask, Provenance, Volume};

fn grid(shape: [usize; 3]) -> Grid {
    Grid::new(shape, [1.0, 1.0, 1.5]).unwrap()
}

fn volume_and_mask() -> impl Strategy<Value = (Volume, Mask)> {
    (2usize..9, 2usize..9, 1usize..5).prop_flat_map(|(x, y, z)| {
        let n = x * y * z;
        (
            prop::collection::vec(-50.0f32..500.0, n),
            prop::collection::vec(prop::bool::weighted(0.7), n),
        )
            .prop_filter_map("mask needs a voxel", move |(v, m)| {
                if !m.iter().any(|&b| b) {
                    return None;
                }
                let g = grid([x, y, z]);
                let v = Volume::new(Array3::from_shape_vec((x, y, z), v).unwrap(), g.clone(), Provenance::Raw).unwrap();
                let m = Mask::new(Array3::from_shape_vec((x, y, z), m).unwrap(), g).unwrap();
                Some((v, m))
            })
    })
}

fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..7, 1usize..7, 1usize..4).prop_flat_map(|(x, y, z)| {
        let n = x * y * z;
        (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n)).prop_map(move |(a, b)| {
            let g = grid([x, y, z]);
            (
                Mask::new(Array3::from_shape_vec((x, y, z), a).unwrap(), g.clone()).unwrap(),
                Mask::new(Array3::from_shape_vec((x, y, z), b).unwrap(), g).unwrap(),
            )
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stretch_lands_in_unit_interval_and_is_idempotent((v, m) in volume_and_mask(), lo in 0.0f64..10.0, hi in 90.0f64..100.0) {
        let once = contrast_stretch(&v, &m, lo, hi, PercentileMethod::Outward).unwrap();
        for (&x, &inside) in once.volume.data().iter().zip(m.data()) {
            prop_assert!((0.0..=1.0).contains(&x));
            if !inside {
                prop_assert_eq!(x, 0.0);
            }
        }
        if !once.degenerate {
            let twice = contrast_stretch(&once.volume, &m, lo, hi, PercentileMethod::Outward).unwrap();
            prop_assert_eq!(twice.volume.data(), once.volume.data());
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded((a, b) in mask_pair()) {
        let ab = dice(&a, &b).unwrap();
        prop_assert_eq!(ab, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ttest_is_antisymmetric(a in prop::collection::vec(0.0f64..100.0, 3..30), noise in prop::collection::vec(-5.0f64..5.0, 30)) {
        let b: Vec<f64> = a.iter().zip(&noise).map(|(x, e)| x + e).collect();
        if let (Ok(ab), Ok(ba)) = (paired_ttest(&a, &b, 0.05), paired_ttest(&b, &a, 0.05)) {
            prop_assert_eq!(ab.t, -ba.t);
            prop_assert_eq!(ab.p, ba.p);
            prop_assert!((0.0..=1.0).contains(&ab.p));
        }
    }

    #[test]
    fn bland_altman_shift_moves_only_the_bias(truth in prop::collection::vec(100.0f64..1000.0, 3..40), shift in -50.0f64..50.0) {
        let pred: Vec<f64> = truth.iter().enumerate().map(|(i, t)| t * 1.02 + (i % 3) as f64).collect();
        let shifted: Vec<f64> = pred.iter().map(|p| p + shift).collect();
        let a = bland_altman(&truth, &pred).unwrap();
        let b = bland_altman(&truth, &shifted).unwrap();
        assert_relative_eq!(b.bias, a.bias + shift, epsilon = 1e-9);
        assert_relative_eq!(b.sd, a.sd, epsilon = 1e-9, max_relative = 1e-9);
        prop_assert!(b.lower <= b.bias && b.bias <= b.upper);
    }

    #[test]
    fn ancova_ignores_affine_rescaling_of_volumes(seed in 0u64..1000, scale in 0.1f64..10.0, offset in -500.0f64..500.0) {
        let n = 24;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let diag: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let age: Vec<f64> = (0..n).map(|_| rng.random_range(25.0..70.0)).collect();
        let icv: Vec<f64> = (0..n).map(|_| rng.random_range(1.3e6..1.6e6)).collect();
        let y: Vec<f64> = diag.iter().map(|&d| 800.0 + rng.random_range(0.0..50.0) - 20.0 * f64::from(u8::from(d))).collect();
        let y2: Vec<f64> = y.iter().map(|v| scale * v + offset).collect();
        let a = ancova_diagnosis(&y, &diag, &age, &icv).unwrap();
        let b = ancova_diagnosis(&y2, &diag, &age, &icv).unwrap();
        assert_relative_eq!(a.f, b.f, max_relative = 1e-8);
        assert_relative_eq!(a.p, b.p, max_relative = 1e-8);
        assert_relative_eq!(b.ls_means[0].mean, scale * a.ls_means[0].mean + offset, max_relative = 1e-9);
    }

    #[test]
    fn nifti_round_trip(x in 1usize..12, y in 1usize..12, z in 1usize..6, seed in any::<u32>(), gz in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new([x, y, z], [0.7, 0.7, 1.2]).unwrap();
        let data = Array3::from_shape_fn((x, y, z), |(i, j, k)| ((i * 31 + j * 17 + k * 7 + seed as usize) % 101) as f32 / 100.0);
        let v = Volume::new(data, g.clone(), Provenance::Preprocessed).unwrap();
        let ext = if gz { "nii.gz" } else { "nii" };
        let path = dir.path().join(format!("v.{ext}"));
        save_volume(&v, &path).unwrap();
        let back = load_volume(&path).unwrap();
        prop_assert_eq!(back.data(), v.data());
        prop_assert_eq!(back.grid(), v.grid());
        prop_assert_eq!(back.provenance(), Provenance::Preprocessed);

        let labels = LabelMap::new(v.data().mapv(|f| (f * 12.0) as u8), g).unwrap();
        let lpath = dir.path().join(format!("l.{ext}"));
        save_labelmap(&labels, &lpath).unwrap();
        let back = load_labelmap(&lpath).unwrap();
        prop_assert_eq!(back.data(), labels.data());
    }

    #[test]
    fn stitching_covers_every_voxel_once_per_window(x in 8usize..40, y in 8usize..40, w in 8usize..24, s in 4usize..24) {
        prop_assume!(w <= x.min(y));
        let size = [w, w];
        let stride = [s.min(w), s.min(w)];
        let support = Array3::from_elem((x, y, 3), true);
        let g = grid([x, y, 3]);
        let labels = LabelMap::new(Array3::from_shape_fn((x, y, 3), |(i, j, k)| ((i + 2 * j + k) % 13) as u8), g.clone()).unwrap();
        let vol = Volume::new(Array3::zeros((x, y, 3)), g, Provenance::Preprocessed).unwrap();
        let mut st = Stitcher::new([x, y, 3], 13);
        for ws in segmentation_specs(&support, &WindowGeometry { size, stride }, 0).unwrap() {
            let win = extract_window(&ws, size, &[&vol], Some(&labels));
            st.add(&ws, &one_hot_center(&win, 13).unwrap());
        }
        let back = st.finish(&[0.0; 13], true).unwrap().argmax();
        prop_assert_eq!(&back, labels.data());
    }
}
