//! Directory-level steps behind the command-line subcommands: each reads a
//! subject tree, runs one stage, and writes its outputs plus a manifest.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{
    load_checkpoint, predict_synthesis, run_pipeline, synthesis_from, train_segmentation, train_synthesis,
    Checkpoint, Mode, Models, SegInput, SegSample, StageTiming, Subject, SynthSample, Task, TrainConfig,
    TrainOutcome, FINAL_CHECKPOINT,
};
use crate::layout::{list_labeled, list_subjects, SubjectPaths};
use crate::metrics::{score_cohort, score_subject, synthesis_metrics, write_comparison_csv, CohortScore, SegmentationScore, SynthesisScore};
use crate::phantom::{generate_cohort, generate_dataset, PhantomSpec, Sidecar};
use crate::preprocess::{preprocess_subject, ToolCommands};
use crate::report::{plot_bland_altman, plot_loss_curves, write_bland_altman_csv, write_group_report_csv};
use crate::stats::{group_analysis, read_cohort_csv, write_cohort_csv, CohortRecord, GroupReport, VolumeSource};
use crate::volume::{load_volume, save_labelmap, save_volume, structure_volume_mm3, LabelMap, Structure, NUM_STRUCTURES};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Checksums of every file under `root` keyed by relative path, skipping
/// manifests (they name absolute input paths).
pub fn checksum_tree(root: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if e.file_name() != MANIFEST {
                let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                out.insert(rel, sha256_file(&p)?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str) -> Manifest {
        let mut versions = BTreeMap::new();
        versions.insert("thalseg".to_string(), env!("CARGO_PKG_VERSION").to_string());
        Manifest {
            command: command.to_string(),
            config_hash: None,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            versions,
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    /// Records a checksum for a file, or for every file below a directory.
    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        if path.is_dir() {
            for (rel, sum) in checksum_tree(path)? {
                self.inputs.insert(path.join(rel).display().to_string(), sum);
            }
        } else {
            self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        }
        Ok(self)
    }

    /// Checksums everything already written under `out` and saves the manifest there.
    pub fn finish(mut self, out: &Path) -> Result<Manifest> {
        self.outputs = checksum_tree(out)?;
        let json = serde_json::to_string_pretty(&self)?;
        crate::engine::write_atomic(&out.join(MANIFEST), json.as_bytes())?;
        Ok(self)
    }
}

/// Hash of a config file's bytes.
pub fn config_hash(path: &Path) -> Result<String> {
    sha256_file(path)
}

/// Applies `f` to every item on up to `jobs` threads, keeping input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        base.parent().map_or_else(|| p.to_path_buf(), |d| d.join(p))
    } else {
        p.to_path_buf()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    /// Healthy subjects for training and testing.
    #[default]
    Dataset,
    /// Controls and patients with age, ICV and atrophy, plus `cohort.csv`.
    Cohort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomRunConfig {
    pub kind: PhantomKind,
    pub subjects: usize,
    pub prefix: String,
    pub controls: usize,
    pub patients: usize,
    /// Shrink factor per structure abbreviation, applied to patients.
    pub atrophy: BTreeMap<Structure, f64>,
    pub labels_only: bool,
}

impl Default for PhantomRunConfig {
    fn default() -> Self {
        PhantomRunConfig {
            kind: PhantomKind::Dataset,
            subjects: 4,
            prefix: "sub".into(),
            controls: 20,
            patients: 20,
            atrophy: BTreeMap::new(),
            labels_only: false,
        }
    }
}

impl PhantomRunConfig {
    pub fn load(path: &Path) -> Result<PhantomRunConfig> {
        read_toml(path)
    }
}

/// `default` or a TOML/JSON file holding a full phantom description.
pub fn load_phantom_spec(arg: &str) -> Result<PhantomSpec> {
    if arg == "default" {
        return Ok(PhantomSpec::default());
    }
    let path = Path::new(arg);
    let spec: PhantomSpec = if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    } else {
        read_toml(path)?
    };
    spec.validate()?;
    Ok(spec)
}

pub fn run_phantom(cfg: &PhantomRunConfig, base: &PhantomSpec, out: &Path, seed: u64) -> Result<Vec<String>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match cfg.kind {
        PhantomKind::Dataset => {
            if cfg.subjects == 0 {
                return Err(Error::Config("subjects must be at least 1".into()));
            }
            generate_dataset(out, &cfg.prefix, cfg.subjects, base, seed)
        }
        PhantomKind::Cohort => {
            let recs = generate_cohort(out, cfg.controls, cfg.patients, base, &cfg.atrophy, seed, cfg.labels_only)?;
            Ok(recs.into_iter().map(|r| r.subject_id).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Raw subject tree; relative to the config file.
    pub root: PathBuf,
    /// All subjects under `root` when empty.
    pub subjects: Vec<String>,
    pub tools: ToolCommands,
    pub p_low: f64,
    pub p_high: f64,
    /// Affinely register WMn to the subject's MPRAGE.
    pub register_wmn: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            root: PathBuf::new(),
            subjects: Vec::new(),
            tools: ToolCommands::default(),
            p_low: 1.0,
            p_high: 99.0,
            register_wmn: true,
        }
    }
}

impl PreprocessConfig {
    pub fn load(path: &Path) -> Result<PreprocessConfig> {
        let mut cfg: PreprocessConfig = read_toml(path)?;
        cfg.root = resolve(path, &cfg.root);
        if !(0.0..100.0).contains(&cfg.p_low) || !(cfg.p_low < cfg.p_high && cfg.p_high <= 100.0) {
            return Err(Error::Config(format!(
                "{}: need 0 <= p_low < p_high <= 100",
                path.display()
            )));
        }
        Ok(cfg)
    }
}

fn subject_ids(root: &Path, listed: &[String]) -> Result<Vec<String>> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let ids = if listed.is_empty() {
        list_subjects(root).map_err(|e| Error::io(root, e))?
    } else {
        listed.to_vec()
    };
    if ids.is_empty() {
        return Err(Error::EmptyDataset(format!("no subjects under {}", root.display())));
    }
    Ok(ids)
}

fn copy_if_exists(from: &Path, to: &Path) -> Result<()> {
    if from.exists() {
        std::fs::copy(from, to).map_err(|e| Error::io(to, e))?;
    }
    Ok(())
}

/// Preprocesses each subject's MPRAGE (and WMn, when present) into `out`,
/// carrying labels and sidecars along.
pub fn preprocess_tree(cfg: &PreprocessConfig, out: &Path, assume_preprocessed: bool, jobs: usize) -> Result<Vec<String>> {
    let ids = subject_ids(&cfg.root, &cfg.subjects)?;
    par_map(&ids, jobs, |id| {
        let src = SubjectPaths::new(&cfg.root, id);
        let dst = SubjectPaths::new(out, id);
        let work = out.join(".work").join(id);
        std::fs::create_dir_all(&dst.dir).map_err(|e| Error::io(&dst.dir, e))?;
        if !src.mprage().exists() {
            return Err(Error::MissingFile(src.mprage()));
        }
        let given = if src.brain_mask().exists() {
            Some(crate::volume::Mask::load(&src.brain_mask())?)
        } else {
            None
        };
        let m = preprocess_subject(
            &src.mprage(),
            None,
            given.as_ref(),
            &work.join("mprage"),
            &cfg.tools,
            assume_preprocessed,
            cfg.p_low,
            cfg.p_high,
        )?;
        save_volume(&m.volume, &dst.mprage())?;
        m.mask.save(&dst.brain_mask())?;
        let mut records = BTreeMap::new();
        records.insert("mprage", m.record);
        if src.wmn().exists() {
            let reference = (cfg.register_wmn && !assume_preprocessed).then(|| src.mprage());
            let w = preprocess_subject(
                &src.wmn(),
                reference.as_deref(),
                Some(&m.mask),
                &work.join("wmn"),
                &cfg.tools,
                assume_preprocessed,
                cfg.p_low,
                cfg.p_high,
            )?;
            save_volume(&w.volume, &dst.wmn())?;
            records.insert("wmn", w.record);
        }
        copy_if_exists(&src.labels(), &dst.labels())?;
        copy_if_exists(&src.sidecar(), &dst.sidecar())?;
        let json = serde_json::to_string_pretty(&records)?;
        let rec = dst.dir.join("preprocess.json");
        std::fs::write(&rec, json).map_err(|e| Error::io(&rec, e))?;
        Ok(id.clone())
    })
    .inspect(|_| {
        let _ = std::fs::remove_dir_all(out.join(".work"));
    })
}

pub fn load_subjects(root: &Path, ids: &[String]) -> Result<Vec<Subject>> {
    ids.iter().map(|id| Subject::load(root, id)).collect()
}

pub fn synthesis_samples(subjects: &[Subject]) -> Result<Vec<SynthSample>> {
    subjects
        .iter()
        .map(|s| {
            let wmn = s
                .wmn
                .clone()
                .ok_or_else(|| Error::MissingFile(PathBuf::from(format!("{}/wmn.nii.gz", s.id))))?;
            Ok(SynthSample {
                id: s.id.clone(),
                mprage: s.mprage.clone(),
                wmn,
                mask: s.brain_mask.clone(),
            })
        })
        .collect()
}

/// Segmentation pairs with the configured input contrast. Synthesized
/// inputs come from running `synthesis` over each subject's MPRAGE.
pub fn segmentation_samples(
    subjects: &[Subject],
    input: SegInput,
    synthesis: Option<&Checkpoint>,
) -> Result<Vec<SegSample>> {
    let net = match (input, synthesis) {
        (SegInput::Synthesized, Some(c)) => Some(synthesis_from(c)?),
        (SegInput::Synthesized, None) => {
            return Err(Error::MissingCheckpoint(
                "segmentation.input = \"synthesized\" needs segmentation.synthesis_checkpoint".into(),
            ))
        }
        _ => None,
    };
    subjects
        .iter()
        .map(|s| {
            let labels = s
                .labels
                .clone()
                .ok_or_else(|| Error::MissingFile(PathBuf::from(format!("{}/labels.nii.gz", s.id))))?;
            let input = match input {
                SegInput::Mprage => s.mprage.clone(),
                SegInput::Wmn => s
                    .wmn
                    .clone()
                    .ok_or_else(|| Error::MissingFile(PathBuf::from(format!("{}/wmn.nii.gz", s.id))))?,
                SegInput::Synthesized => predict_synthesis(net.as_ref().expect("checked"), &s.mprage, &s.brain_mask)?,
            };
            Ok(SegSample {
                id: s.id.clone(),
                input,
                labels,
            })
        })
        .collect()
}

/// Loads the config's subjects and trains; with `resume` an existing
/// final checkpoint in `out` is continued.
pub fn run_training(cfg: &TrainConfig, out: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = &cfg.data.root;
    if cfg.data.train.is_empty() {
        return Err(Error::EmptyDataset("data.train lists no subjects".into()));
    }
    let train = load_subjects(root, &cfg.data.train)?;
    let val = load_subjects(root, &cfg.data.val)?;
    let previous = if resume && out.join(FINAL_CHECKPOINT).exists() {
        Some(load_checkpoint(&out.join(FINAL_CHECKPOINT))?)
    } else {
        None
    };
    match cfg.task {
        Task::Synthesis => train_synthesis(
            cfg,
            &synthesis_samples(&train)?,
            &synthesis_samples(&val)?,
            out,
            previous.as_ref(),
        ),
        Task::Segmentation => {
            let synth = match (&cfg.segmentation.input, &cfg.segmentation.synthesis_checkpoint) {
                (SegInput::Synthesized, Some(p)) => Some(load_checkpoint(p)?),
                _ => None,
            };
            let input = cfg.segmentation.input;
            train_segmentation(
                cfg,
                &segmentation_samples(&train, input, synth.as_ref())?,
                &segmentation_samples(&val, input, synth.as_ref())?,
                out,
                previous.as_ref(),
            )
        }
    }
}

/// Runs a pipeline over every subject of `root` (or `ids`), writing label
/// maps, the thalamus mask and, for SCS, the synthesized WMn under `out`.
pub fn infer_tree(
    models: &Models,
    mode: Mode,
    root: &Path,
    ids: &[String],
    out: &Path,
    jobs: usize,
) -> Result<BTreeMap<String, Vec<StageTiming>>> {
    let ids = subject_ids(root, ids)?;
    let timings = par_map(&ids, jobs, |id| {
        let s = Subject::load(root, id)?;
        let r = run_pipeline(mode, models, &s.mprage, Some(&s.brain_mask))?;
        let dst = SubjectPaths::new(out, id);
        std::fs::create_dir_all(&dst.dir).map_err(|e| Error::io(&dst.dir, e))?;
        save_labelmap(&r.prediction.labels, &dst.labels())?;
        save_labelmap(&r.prediction.gated, &dst.gated_labels())?;
        r.prediction.thalamus.save(&dst.thalamus())?;
        if let Some(syn) = &r.synthesized {
            save_volume(syn, &dst.synthesized())?;
        }
        Ok((id.clone(), r.timing))
    })?;
    Ok(timings.into_iter().collect())
}

/// Per-structure volumes (mm³) indexed by code - 1.
pub fn structure_volumes(labels: &LabelMap) -> Result<[f64; NUM_STRUCTURES]> {
    let mut v = [0.0; NUM_STRUCTURES];
    for s in Structure::ALL {
        v[s.code() as usize - 1] = structure_volume_mm3(labels, s.code())?;
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineScores {
    pub subjects: Vec<SegmentationScore>,
    pub cohort: CohortScore,
    /// Mean over subjects of the per-subject mean structure Dice.
    pub mean_structure_dice: f64,
    /// Present when synthesized WMn was found next to the labels.
    pub synthesis: Option<Vec<(String, SynthesisScore)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub ncs: Option<PipelineScores>,
    pub scs: Option<PipelineScores>,
}

impl Evaluation {
    pub fn get(&self, mode: Mode) -> Option<&PipelineScores> {
        match mode {
            Mode::Ncs => self.ncs.as_ref(),
            Mode::Scs => self.scs.as_ref(),
        }
    }
}

fn score_dir(gt_root: &Path, pred_root: &Path, ids: &[String]) -> Result<(PipelineScores, Vec<[f64; NUM_STRUCTURES]>)> {
    let mut scores = Vec::new();
    let mut volumes = Vec::new();
    let mut synth = Vec::new();
    let mut all_synth = true;
    for id in ids {
        let g = SubjectPaths::new(gt_root, id);
        let p = SubjectPaths::new(pred_root, id);
        let gt = LabelMap::load(&g.labels())?;
        let pred = LabelMap::load(&p.labels())?;
        scores.push(score_subject(id, &gt, &pred)?);
        volumes.push(structure_volumes(&pred)?);
        if p.synthesized().exists() && g.wmn().exists() {
            let mask = if g.brain_mask().exists() {
                crate::volume::Mask::load(&g.brain_mask())?
            } else {
                crate::volume::Mask::full(gt.grid())
            };
            let score = synthesis_metrics(&load_volume(&g.wmn())?, &load_volume(&p.synthesized())?, &mask)?;
            synth.push((id.clone(), score));
        } else {
            all_synth = false;
        }
    }
    let cohort = score_cohort(&scores)?;
    let mean_structure_dice = scores.iter().map(|s| s.mean_structure_dice()).sum::<f64>() / scores.len() as f64;
    Ok((
        PipelineScores {
            subjects: scores,
            cohort,
            mean_structure_dice,
            synthesis: (all_synth && !synth.is_empty()).then_some(synth),
        },
        volumes,
    ))
}

fn write_scores_csv(path: &Path, scores: &[SegmentationScore]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    let mut header = vec!["subject".to_string(), "thalamus_dice".into(), "thalamus_vd".into()];
    header.extend(Structure::ALL.iter().map(|s| format!("dice_{}", s.abbrev())));
    header.extend(Structure::ALL.iter().map(|s| format!("vd_{}", s.abbrev())));
    w.write_record(&header)?;
    for s in scores {
        let mut row = vec![s.subject.clone(), s.thalamus_dice.to_string(), s.thalamus_vd.to_string()];
        row.extend(s.dice.iter().chain(&s.vd).map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_synthesis_csv(path: &Path, rows: &[(String, SynthesisScore)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    w.write_record(["subject", "rmse", "psnr_db", "ssim", "voxels"])?;
    for (id, s) in rows {
        w.write_record([
            id.clone(),
            s.rmse.to_string(),
            s.psnr_db.to_string(),
            s.ssim.to_string(),
            s.voxels.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Scores NCS and/or SCS predictions against `gt_root`. Writes per-subject
/// and summary tables, the NCS-vs-SCS comparison when both are given, and
/// `cohort.csv` with volumes when every subject has a phantom sidecar.
pub fn evaluate_tree(gt_root: &Path, ncs: Option<&Path>, scs: Option<&Path>, out: &Path) -> Result<Evaluation> {
    if ncs.is_none() && scs.is_none() {
        return Err(Error::Config("evaluate needs at least one prediction directory".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ids = {
        let first = ncs.or(scs).expect("checked");
        let ids = list_labeled(first).map_err(|e| Error::io(first, e))?;
        if ids.is_empty() {
            return Err(Error::EmptyDataset(format!("no predictions under {}", first.display())));
        }
        ids
    };
    let mut eval = Evaluation { ncs: None, scs: None };
    let mut vols: BTreeMap<&str, Vec<[f64; NUM_STRUCTURES]>> = BTreeMap::new();
    for (mode, dir) in [(Mode::Ncs, ncs), (Mode::Scs, scs)] {
        let Some(dir) = dir else { continue };
        let (scores, v) = score_dir(gt_root, dir, &ids)?;
        write_scores_csv(&out.join(format!("scores_{}.csv", mode.name())), &scores.subjects)?;
        if let Some(syn) = &scores.synthesis {
            write_synthesis_csv(&out.join(format!("synthesis_{}.csv", mode.name())), syn)?;
        }
        let summary = out.join(format!("summary_{}.json", mode.name()));
        std::fs::write(&summary, serde_json::to_string_pretty(&scores)?).map_err(|e| Error::io(&summary, e))?;
        vols.insert(mode.name(), v);
        match mode {
            Mode::Ncs => eval.ncs = Some(scores),
            Mode::Scs => eval.scs = Some(scores),
        }
    }
    if let (Some(n), Some(s)) = (&eval.ncs, &eval.scs) {
        write_comparison_csv(&out.join("comparison.csv"), &n.subjects, &s.subjects)?;
    }

    let sidecars: Vec<Option<Sidecar>> = ids
        .iter()
        .map(|id| {
            let p = SubjectPaths::new(gt_root, id).sidecar();
            if !p.exists() {
                return Ok(None);
            }
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Ok(Some(serde_json::from_str(&text)?))
        })
        .collect::<Result<_>>()?;
    if sidecars.iter().all(Option::is_some) {
        let mut records = Vec::with_capacity(ids.len());
        for (i, (id, sc)) in ids.iter().zip(sidecars).enumerate() {
            let sc = sc.expect("checked");
            let gt = LabelMap::load(&SubjectPaths::new(gt_root, id).labels())?;
            records.push(CohortRecord {
                subject_id: id.clone(),
                diagnosis: sc.diagnosis,
                age_years: sc.age_years,
                icv_mm3: sc.icv_mm3,
                gt: Some(structure_volumes(&gt)?),
                ncs: vols.get("ncs").map(|v| v[i]),
                scs: vols.get("scs").map(|v| v[i]),
            });
        }
        write_cohort_csv(&out.join("cohort.csv"), &records)?;
    }
    Ok(eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub alpha: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig { alpha: 0.05 }
    }
}

impl StatsConfig {
    pub fn load(path: &Path) -> Result<StatsConfig> {
        let cfg: StatsConfig = read_toml(path)?;
        if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
            return Err(Error::Config(format!("{}: alpha must lie in (0, 1)", path.display())));
        }
        Ok(cfg)
    }
}

fn sources_of(cohort: &[CohortRecord]) -> Vec<VolumeSource> {
    [VolumeSource::Gt, VolumeSource::Ncs, VolumeSource::Scs]
        .into_iter()
        .filter(|s| !cohort.is_empty() && cohort.iter().all(|r| r.volumes(*s).is_some()))
        .collect()
}

/// Group-then-nucleus ANCOVA for every volume source in the cohort table.
pub fn stats_tree(cohort_csv: &Path, cfg: &StatsConfig, out: &Path) -> Result<Vec<GroupReport>> {
    let cohort = read_cohort_csv(cohort_csv)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut reports = Vec::new();
    for src in sources_of(&cohort) {
        let r = match group_analysis(&cohort, src, cfg.alpha) {
            Ok(r) => r,
            // Predicted volumes can be degenerate (e.g. a structure never
            // predicted); ground truth must always be analyzable.
            Err(e) if src != VolumeSource::Gt => {
                log::warn!("skipping {} volumes: {e}", src.prefix());
                continue;
            }
            Err(e) => return Err(e),
        };
        write_group_report_csv(&out.join(format!("ancova_{}.csv", src.prefix())), &r)?;
        reports.push(r);
    }
    let json = out.join("stats.json");
    std::fs::write(&json, serde_json::to_string_pretty(&reports)?).map_err(|e| Error::io(&json, e))?;
    Ok(reports)
}

/// Figures and tables: per-structure Bland-Altman plots of each pipeline
/// against ground truth, the comparison table, and loss curves from the
/// given training directories.
pub fn report_tree(eval_dir: &Path, train_dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    let cohort_csv = eval_dir.join("cohort.csv");
    if cohort_csv.exists() {
        let cohort = read_cohort_csv(&cohort_csv)?;
        for src in sources_of(&cohort).into_iter().filter(|s| *s != VolumeSource::Gt) {
            let mut rows = Vec::new();
            for s in Structure::ALL {
                let i = s.code() as usize - 1;
                let truth: Vec<f64> = cohort.iter().map(|r| r.gt.expect("gt present")[i]).collect();
                let pred: Vec<f64> = cohort.iter().map(|r| r.volumes(src).expect("filtered")[i]).collect();
                let path = out.join(format!("bland_altman_{}_{}.svg", src.prefix(), s.abbrev()));
                let title = format!("{} {}", src.prefix().to_uppercase(), s.abbrev());
                match plot_bland_altman(&path, &title, &truth, &pred) {
                    Ok(ba) => {
                        rows.push((s.abbrev().to_string(), ba));
                        written.push(path);
                    }
                    Err(e) => log::warn!("skipping Bland-Altman plot for {title}: {e}"),
                }
            }
            let table = out.join(format!("bland_altman_{}.csv", src.prefix()));
            write_bland_altman_csv(&table, &rows)?;
            written.push(table);
        }
    }
    let comparison = eval_dir.join("comparison.csv");
    if comparison.exists() {
        let dst = out.join("comparison.csv");
        std::fs::copy(&comparison, &dst).map_err(|e| Error::io(&dst, e))?;
        written.push(dst);
    }
    for (i, dir) in train_dirs.iter().enumerate() {
        let ckpt = load_checkpoint(&dir.join(FINAL_CHECKPOINT))?;
        let path = out.join(format!("loss_{}_{i}.svg", ckpt.task.name()));
        plot_loss_curves(&path, &format!("{} training loss", ckpt.task.name()), &ckpt.history)?;
        written.push(path);
    }
    if written.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "nothing to report: {} has no cohort.csv or comparison.csv and no training runs were given",
            eval_dir.display()
        )));
    }
    Ok(written)
}
