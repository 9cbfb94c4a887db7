use thalseg::engine::{
    load_checkpoint, predict_synthesis, run_pipeline, segmentation_from, synthesis_from, train_segmentation,
    train_synthesis, Mode, Models, SegSample, SynthSample, Task, TrainConfig, BEST_CHECKPOINT, FINAL_CHECKPOINT,
    TRAIN_LOG,
};
use thalseg::models::NetConfig;
use thalseg::phantom::{dataset_specs, generate_phantom, Phantom, PhantomSpec};
use thalseg::sampler::AugmentationParams;
use thalseg::Error;

fn phantoms(n: usize, seed: u64) -> Vec<Phantom> {
    dataset_specs(&PhantomSpec::default(), n, seed)
        .unwrap()
        .iter()
        .map(|s| generate_phantom(s).unwrap())
        .collect()
}

fn tiny_net(window: usize) -> NetConfig {
    NetConfig {
        depth: 2,
        base_channels: 4,
        window: [window, window],
        ..NetConfig::default()
    }
}

fn seg_config(epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::new(Task::Segmentation);
    c.seed = 5;
    c.epochs = epochs;
    c.batch_size = 8;
    c.optimizer.lr = 0.003;
    c.network = tiny_net(48);
    c.windows.stride = Some([48, 48]);
    c.augmentation = AugmentationParams::identity();
    c
}

fn seg_samples(ps: &[Phantom]) -> Vec<SegSample> {
    ps.iter()
        .enumerate()
        .map(|(i, p)| SegSample {
            id: format!("s{i}"),
            input: p.mprage.clone(),
            labels: p.labels.clone(),
        })
        .collect()
}

fn synth_samples(ps: &[Phantom]) -> Vec<SynthSample> {
    ps.iter()
        .enumerate()
        .map(|(i, p)| SynthSample {
            id: format!("s{i}"),
            mprage: p.mprage.clone(),
            wmn: p.wmn.clone(),
            mask: p.brain_mask.clone(),
        })
        .collect()
}

#[test]
fn segmentation_smoke_run_learns_and_resumes_bit_identically() {
    let ps = phantoms(5, 11);
    let samples = seg_samples(&ps);
    let (train, val) = samples.split_at(4);

    let dir = tempfile::tempdir().unwrap();
    let straight = train_segmentation(&seg_config(3), train, val, &dir.path().join("a"), None).unwrap();
    let h = &straight.checkpoint.history;
    assert_eq!(h.len(), 3);
    assert!(h[2].train_loss < h[0].train_loss, "{:?}", h.iter().map(|r| r.train_loss).collect::<Vec<_>>());
    assert!(h.iter().all(|r| r.val_loss.is_some()));
    assert!(dir.path().join("a").join(FINAL_CHECKPOINT).exists());
    assert!(straight.best_path.is_some());
    let log = std::fs::read_to_string(dir.path().join("a").join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "lr", "train_loss", "val_loss", "wall_time"] {
            assert!(v.get(key).is_some(), "{key} missing from {line}");
        }
    }

    let b = dir.path().join("b");
    train_segmentation(&seg_config(1), train, val, &b, None).unwrap();
    let partial = load_checkpoint(&b.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(partial.epochs_done, 1);
    let resumed = train_segmentation(&seg_config(3), train, val, &b, Some(&partial)).unwrap();
    assert_eq!(resumed.checkpoint, straight.checkpoint);
    let on_disk = load_checkpoint(&b.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(on_disk.parameter_checksum, straight.checkpoint.parameter_checksum);
    let best = load_checkpoint(&b.join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(best.best_val, straight.checkpoint.best_val);
    assert_eq!(std::fs::read_to_string(b.join(TRAIN_LOG)).unwrap().lines().count(), 3);

    let mut other = seg_config(3);
    other.seed = 6;
    assert!(matches!(
        train_segmentation(&seg_config(3), train, val, &dir.path().join("c"), Some(&{
            let mut c = partial.clone();
            c.config_hash = other.hash();
            c
        })),
        Err(Error::Checkpoint(_))
    ));

    let models = Models {
        segmentation: segmentation_from(&straight.checkpoint).unwrap(),
        synthesis: None,
    };
    let ncs = run_pipeline(Mode::Ncs, &models, &ps[4].mprage, None).unwrap();
    assert!(ncs.synthesized.is_none());
    assert_eq!(ncs.timing.len(), 1);
    assert_eq!(ncs.prediction.labels.grid(), ps[4].mprage.grid());
    let again = run_pipeline(Mode::Ncs, &models, &ps[4].mprage, None).unwrap();
    assert_eq!(again.prediction.labels, ncs.prediction.labels);
    let gated = ncs.prediction.gated.data();
    for (i, &t) in ncs.prediction.thalamus.data().indexed_iter() {
        assert_eq!(gated[i], if t { ncs.prediction.labels.data()[i] } else { 0 });
    }
    assert!(matches!(
        run_pipeline(Mode::Scs, &models, &ps[4].mprage, None),
        Err(Error::MissingCheckpoint(_))
    ));
}

#[test]
fn synthesis_smoke_run_and_scs_pipeline() {
    let ps = phantoms(3, 12);
    let samples = synth_samples(&ps);
    let mut cfg = TrainConfig::new(Task::Synthesis);
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.optimizer.lr = 0.003;
    cfg.network = tiny_net(32);
    cfg.windows.stride = Some([32, 32]);
    cfg.windows.z_stride = 4;
    cfg.augmentation = AugmentationParams::identity();
    cfg.synthesis.extractor_widths = [4, 8];
    cfg.synthesis.extractor = thalseg::engine::ExtractorChoice::FixedRandom;

    let dir = tempfile::tempdir().unwrap();
    let out = train_synthesis(&cfg, &samples[..2], &samples[2..], dir.path(), None).unwrap();
    let h = &out.checkpoint.history;
    assert!(h[1].train_loss < h[0].train_loss);
    assert!(out.checkpoint.extractor.is_some());
    assert!(matches!(
        train_segmentation(&cfg, &[], &[], dir.path(), None),
        Err(Error::Config(_))
    ));

    let net = synthesis_from(&out.checkpoint).unwrap();
    let p = &ps[2];
    let syn = predict_synthesis(&net, &p.mprage, &p.brain_mask).unwrap();
    assert_eq!(syn.shape(), p.mprage.shape());
    for (&v, &m) in syn.data().iter().zip(p.brain_mask.data()) {
        assert!((0.0..=1.0).contains(&v));
        if !m {
            assert_eq!(v, 0.0);
        }
    }
    assert_eq!(predict_synthesis(&net, &p.mprage, &p.brain_mask).unwrap(), syn);

    let seg = train_segmentation(&seg_config(1), &seg_samples(&ps[..1]), &[], &dir.path().join("seg"), None).unwrap();
    assert!(seg.best_path.is_none());
    let models = Models::from_checkpoints(&seg.checkpoint, Some(&out.checkpoint)).unwrap();
    let scs = run_pipeline(Mode::Scs, &models, &p.mprage, Some(&p.brain_mask)).unwrap();
    assert_eq!(scs.synthesized.as_ref(), Some(&syn));
    assert_eq!(scs.timing.len(), 2);
    assert!(Models::from_checkpoints(&out.checkpoint, None).is_err());
}

#[test]
fn empty_training_set_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        train_segmentation(&seg_config(1), &[], &[], dir.path(), None),
        Err(Error::EmptyDataset(_))
    ));
}
