use std::path::Path;
use std::process::{Command, Output};

use thalseg::workflow::checksum_tree;

fn thalseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thalseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = thalseg(args);
    assert!(
        out.status.success(),
        "thalseg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn phantom_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("phantom.toml");
    std::fs::write(&cfg, "subjects = 2\n").unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["phantom", "--spec", "default", "--config", p(&cfg), "--out", p(out), "--seed", "1"]);
    }
    let sums = checksum_tree(&a).unwrap();
    assert_eq!(sums.len(), 10);
    assert_eq!(sums, checksum_tree(&b).unwrap());
    assert!(a.join("manifest.json").exists());
}

#[test]
fn contract_errors_have_messages_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = thalseg(&["phantom", "--out", p(dir.path()), "--bogus"]);
    assert!(!out.status.success());

    let ckpt = dir.path().join("missing.json");
    let out = thalseg(&[
        "infer",
        "--mode",
        "scs",
        "--data",
        p(dir.path()),
        "--segmentation",
        p(&ckpt),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    let cfg = dir.path().join("seg.toml");
    std::fs::write(&cfg, "task = \"segmentation\"\nlearning_rate = 0.1\n").unwrap();
    let out = thalseg(&["train-segmentation", "--config", p(&cfg), "--out", p(&dir.path().join("t"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let pre = dir.path().join("pre.toml");
    std::fs::write(&pre, "root = \"raw\"\n").unwrap();
    ok(&["phantom", "--out", p(&dir.path().join("raw")), "--config", p(&{
        let c = dir.path().join("one.toml");
        std::fs::write(&c, "subjects = 1\n").unwrap();
        c
    })]);
    let out = thalseg(&["preprocess", "--config", p(&pre), "--out", p(&dir.path().join("pp"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--assume-preprocessed"));
}

const NET: &str = "[network]\ndepth = 2\nbase_channels = 4\n";

#[test]
fn full_pipeline_script() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cohort.toml"), "kind = \"cohort\"\ncontrols = 3\npatients = 3\n[atrophy]\nVLp = 0.85\n").unwrap();
    ok(&["phantom", "--config", p(&d.join("cohort.toml")), "--out", p(&d.join("raw")), "--seed", "3"]);

    std::fs::write(d.join("pre.toml"), "root = \"raw\"\n").unwrap();
    ok(&["preprocess", "--config", p(&d.join("pre.toml")), "--out", p(&d.join("data")), "--assume-preprocessed"]);

    let data = "[data]\nroot = \"data\"\ntrain = [\"sub-000\", \"sub-001\", \"sub-003\"]\nval = [\"sub-004\"]\n";
    let aug = "[augmentation]\nscale = [1.0, 1.0]\nshear_deg = [0.0, 0.0]\nrotation_deg = [0.0, 0.0]\nthrough_plane_deg = [0.0, 0.0]\n";
    std::fs::write(
        d.join("synth.toml"),
        format!(
            "task = \"synthesis\"\nepochs = 1\nbatch_size = 8\n{NET}window = [32, 32]\n[windows]\nstride = [32, 32]\nz_stride = 6\n[synthesis]\nextractor = \"fixed_random\"\nextractor_widths = [4, 8]\n{aug}{data}"
        ),
    )
    .unwrap();
    let seg_common = format!("task = \"segmentation\"\nepochs = 1\nbatch_size = 8\n{NET}window = [48, 48]\n[windows]\nstride = [48, 48]\n{aug}{data}");
    std::fs::write(d.join("ncs.toml"), &seg_common).unwrap();
    std::fs::write(
        d.join("scs.toml"),
        format!("{seg_common}[segmentation]\ninput = \"synthesized\"\nsynthesis_checkpoint = \"synth/final.json\"\n"),
    )
    .unwrap();

    ok(&["train-synthesis", "--config", p(&d.join("synth.toml")), "--out", p(&d.join("synth"))]);
    ok(&["train-segmentation", "--config", p(&d.join("ncs.toml")), "--out", p(&d.join("seg_ncs"))]);
    ok(&["train-segmentation", "--config", p(&d.join("scs.toml")), "--out", p(&d.join("seg_scs"))]);
    assert!(d.join("synth/train_log.jsonl").exists());

    ok(&[
        "infer", "--mode", "ncs", "--data", p(&d.join("data")),
        "--segmentation", p(&d.join("seg_ncs/final.json")), "--out", p(&d.join("pred_ncs")),
    ]);
    ok(&[
        "infer", "--mode", "scs", "--data", p(&d.join("data")),
        "--segmentation", p(&d.join("seg_scs/final.json")),
        "--synthesis", p(&d.join("synth/final.json")), "--out", p(&d.join("pred_scs")), "--jobs", "2",
    ]);
    assert!(d.join("pred_scs/sub-002/wmn_syn.nii.gz").exists());
    assert!(!d.join("pred_ncs/sub-002/wmn_syn.nii.gz").exists());

    ok(&[
        "evaluate", "--data", p(&d.join("data")), "--ncs", p(&d.join("pred_ncs")),
        "--scs", p(&d.join("pred_scs")), "--out", p(&d.join("eval")),
    ]);
    for f in ["comparison.csv", "cohort.csv", "scores_ncs.csv", "synthesis_scs.csv", "manifest.json"] {
        assert!(d.join("eval").join(f).exists(), "{f}");
    }
    ok(&["stats", "--cohort", p(&d.join("eval/cohort.csv")), "--out", p(&d.join("stats"))]);
    assert!(d.join("stats/ancova_gt.csv").exists());
    ok(&[
        "report", "--eval", p(&d.join("eval")), "--train", p(&d.join("synth")),
        "--train", p(&d.join("seg_ncs")), "--out", p(&d.join("report")),
    ]);
    let report = checksum_tree(&d.join("report")).unwrap();
    assert!(report.contains_key("bland_altman_ncs.csv"));
    assert!(report.contains_key("loss_synthesis_0.svg"));
    assert!(report.contains_key("comparison.csv"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("seg_scs/manifest.json")).unwrap()).unwrap();
    assert!(manifest["config_hash"].is_string());
    assert!(manifest["inputs"].as_object().unwrap().keys().any(|k| k.ends_with("synth/final.json")));
}
