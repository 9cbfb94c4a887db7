use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thalseg::engine::{load_checkpoint, Mode, Models, SegInput, TrainConfig};
use thalseg::workflow::{
    config_hash, evaluate_tree, infer_tree, load_phantom_spec, preprocess_tree, report_tree, run_phantom,
    run_training, stats_tree, Manifest, PhantomRunConfig, PreprocessConfig, StatsConfig,
};
use thalseg::{Error, Result};

#[derive(Parser)]
#[command(name = "thalseg", version, about = "Thalamic nuclei segmentation with optional WMn synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Ncs,
    Scs,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom subjects (images, labels, sidecars).
    Phantom {
        /// `default` or a TOML/JSON phantom description.
        #[arg(long, default_value = "default")]
        spec: String,
        /// Run settings: dataset or cohort, counts, atrophy.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Register, skull-strip, bias-correct and contrast-stretch a subject tree.
    Preprocess {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip the external tools; only masking and contrast stretching run.
        #[arg(long)]
        assume_preprocessed: bool,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train the MPRAGE-to-WMn synthesis network.
    TrainSynthesis {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from `<out>/final.json` when present.
        #[arg(long)]
        resume: bool,
    },
    /// Train the dual-head segmentation network.
    TrainSegmentation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        resume: bool,
    },
    /// Segment every subject of a preprocessed tree.
    Infer {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Preprocessed subject tree.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        segmentation: PathBuf,
        /// Required for `--mode scs`.
        #[arg(long)]
        synthesis: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score predictions against ground-truth labels.
    Evaluate {
        /// Ground-truth subject tree.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ncs: Option<PathBuf>,
        #[arg(long)]
        scs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Group-then-nucleus ANCOVA on a cohort volume table.
    Stats {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render tables, Bland-Altman plots and loss curves.
    Report {
        /// Output directory of `evaluate`.
        #[arg(long)]
        eval: PathBuf,
        /// Training output directories (repeatable).
        #[arg(long)]
        train: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn create(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn train(task: &str, config: &Path, out: &Path, seed: Option<u64>, resume: bool) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    if cfg.task.name() != task {
        return Err(Error::Config(format!(
            "{} has task = \"{}\" but this command trains {task}",
            config.display(),
            cfg.task.name()
        )));
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    require(&cfg.data.root, "data root")?;
    if cfg.segmentation.input == SegInput::Synthesized {
        match &cfg.segmentation.synthesis_checkpoint {
            Some(p) if p.exists() => {}
            Some(p) => return Err(Error::MissingCheckpoint(p.display().to_string())),
            None => {
                return Err(Error::MissingCheckpoint(
                    "segmentation.synthesis_checkpoint (needed for input = \"synthesized\")".into(),
                ))
            }
        }
    }
    create(out)?;
    let mut m = Manifest::new(&format!("train-{task}"));
    m.config_hash = Some(cfg.hash());
    m.seed("train", cfg.seed).seed("extractor", cfg.synthesis.extractor_seed);
    m.input(config)?;
    for id in cfg.data.train.iter().chain(&cfg.data.val) {
        m.input(&cfg.data.root.join(id))?;
    }
    if let Some(p) = &cfg.segmentation.synthesis_checkpoint {
        if cfg.segmentation.input == SegInput::Synthesized {
            m.input(p)?;
        }
    }
    let outcome = run_training(&cfg, out, resume)?;
    let last = outcome.checkpoint.history.last();
    log::info!(
        "{task}: {} epochs, final train loss {:.5}, checkpoint {}",
        outcome.checkpoint.epochs_done,
        last.map_or(f64::NAN, |r| r.train_loss),
        outcome.final_path.display()
    );
    m.finish(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom { spec, config, out, seed } => {
            let cfg = match &config {
                Some(p) => PhantomRunConfig::load(p)?,
                None => PhantomRunConfig::default(),
            };
            let base = load_phantom_spec(&spec)?;
            create(&out)?;
            let mut m = Manifest::new("phantom");
            m.seed("phantom", seed);
            if let Some(p) = &config {
                m.config_hash = Some(config_hash(p)?);
                m.input(p)?;
            }
            if spec != "default" {
                m.input(Path::new(&spec))?;
            }
            let ids = run_phantom(&cfg, &base, &out, seed)?;
            log::info!("wrote {} subjects to {}", ids.len(), out.display());
            m.finish(&out)?;
        }
        Command::Preprocess {
            config,
            out,
            assume_preprocessed,
            jobs,
        } => {
            let cfg = PreprocessConfig::load(&config)?;
            require(&cfg.root, "input root")?;
            create(&out)?;
            let mut m = Manifest::new("preprocess");
            m.config_hash = Some(config_hash(&config)?);
            m.input(&config)?.input(&cfg.root)?;
            let ids = preprocess_tree(&cfg, &out, assume_preprocessed, jobs)?;
            log::info!("preprocessed {} subjects", ids.len());
            m.finish(&out)?;
        }
        Command::TrainSynthesis {
            config,
            out,
            seed,
            resume,
        } => train("synthesis", &config, &out, seed, resume)?,
        Command::TrainSegmentation {
            config,
            out,
            seed,
            resume,
        } => train("segmentation", &config, &out, seed, resume)?,
        Command::Infer {
            mode,
            data,
            segmentation,
            synthesis,
            out,
            jobs,
        } => {
            let mode = match mode {
                ModeArg::Ncs => Mode::Ncs,
                ModeArg::Scs => Mode::Scs,
            };
            require(&data, "data directory")?;
            let seg = load_checkpoint(&segmentation)?;
            let syn = match (mode, &synthesis) {
                (Mode::Scs, None) => {
                    return Err(Error::MissingCheckpoint(
                        "--mode scs needs a synthesis checkpoint (--synthesis <final.json>)".into(),
                    ))
                }
                (Mode::Scs, Some(p)) => Some(load_checkpoint(p)?),
                (Mode::Ncs, _) => None,
            };
            let models = Models::from_checkpoints(&seg, syn.as_ref())?;
            create(&out)?;
            let mut m = Manifest::new(&format!("infer --mode {}", mode.name()));
            m.config_hash = Some(seg.config_hash.clone());
            m.seed("segmentation", seg.config.seed);
            m.input(&segmentation)?;
            if let (Some(p), Some(c)) = (&synthesis, &syn) {
                m.seed("synthesis", c.config.seed);
                m.input(p)?;
            }
            m.input(&data)?;
            let timing = infer_tree(&models, mode, &data, &[], &out, jobs)?;
            let path = out.join("timing.json");
            std::fs::write(&path, serde_json::to_string_pretty(&timing)?).map_err(|e| Error::Config(e.to_string()))?;
            log::info!("segmented {} subjects ({})", timing.len(), mode.name());
            m.finish(&out)?;
        }
        Command::Evaluate { data, ncs, scs, out } => {
            require(&data, "ground-truth directory")?;
            for p in ncs.iter().chain(&scs) {
                require(p, "prediction directory")?;
            }
            create(&out)?;
            let mut m = Manifest::new("evaluate");
            for p in std::iter::once(&data).chain(&ncs).chain(&scs) {
                m.input(p)?;
            }
            let eval = evaluate_tree(&data, ncs.as_deref(), scs.as_deref(), &out)?;
            for (name, s) in [("ncs", &eval.ncs), ("scs", &eval.scs)] {
                if let Some(s) = s {
                    log::info!(
                        "{name}: thalamus Dice {:.4}, mean structure Dice {:.4}",
                        s.cohort.rows[0].dice.mean,
                        s.mean_structure_dice
                    );
                }
            }
            m.finish(&out)?;
        }
        Command::Stats { cohort, config, out } => {
            require(&cohort, "cohort table")?;
            let cfg = match &config {
                Some(p) => StatsConfig::load(p)?,
                None => StatsConfig::default(),
            };
            create(&out)?;
            let mut m = Manifest::new("stats");
            if let Some(p) = &config {
                m.config_hash = Some(config_hash(p)?);
                m.input(p)?;
            }
            m.input(&cohort)?;
            for r in stats_tree(&cohort, &cfg, &out)? {
                log::info!(
                    "{}: flagged groups {:?}, nuclei {:?}",
                    r.source.prefix(),
                    r.flagged_groups(),
                    r.flagged_nuclei(cfg.alpha)
                );
            }
            m.finish(&out)?;
        }
        Command::Report { eval, train, out } => {
            require(&eval, "evaluation directory")?;
            create(&out)?;
            let mut m = Manifest::new("report");
            m.input(&eval)?;
            for t in &train {
                m.input(&t.join(thalseg::engine::FINAL_CHECKPOINT))?;
            }
            let files = report_tree(&eval, &train, &out)?;
            log::info!("wrote {} report files", files.len());
            m.finish(&out)?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::MissingFile(_) | Error::MissingCheckpoint(_) | Error::ToolNotConfigured { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
