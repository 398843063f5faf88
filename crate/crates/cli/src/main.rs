use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use semit::config::RunConfig;
use semit::data::{self, CorpusManifest, ImageSet, MANIFEST_FILE};
use semit::eval::{self, EvalReport};
use semit::losses::AdvForm;
use semit::ntpl::{HeldOut, PseudoLabeledSet};
use semit::trainer::{self, TranslationData};
use semit::{Error, Result};

#[derive(Parser)]
#[command(name = "semit", version, about = "Semi-supervised few-shot image translation pipeline")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    /// Parallel workers for data generation.
    #[arg(long, global = true, env = "SEMIT_NUM_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Flags that override values of the config file.
#[derive(Args, Default)]
struct Overrides {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    labeled_fraction: Option<f64>,
    /// Share of low-frequency channels in octave layers.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Exemplars per unseen class at inference.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Pseudo-label acceptance confidence.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Accept pseudo-labels as one-hot vectors instead of soft ones.
    #[arg(long, global = true)]
    hard_labels: bool,
    /// Use the logistic adversarial loss instead of hinge.
    #[arg(long, global = true)]
    log_adv: bool,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Translation-phase iterations.
    #[arg(long, global = true)]
    iterations: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus and held-out set into the data directory.
    GenData,
    /// Split labels and run progressive pseudo-labeling.
    TrainLabeler,
    /// Train the translation networks on the pseudo-labeled set.
    Train,
    /// Translate source images with k exemplars and write an image grid.
    Translate {
        /// Translation checkpoint; defaults to the run's final model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        source: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        targets: Vec<PathBuf>,
        /// Output PNG; defaults to `translate.png` in the run directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score k-shot translations into the unseen classes and print the report
    /// as JSON.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Corpus directory holding `manifest.jsonl`; defaults to the data
        /// directory.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Print the effective configuration.
    Config,
}

fn effective_config(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.apply_seed(s);
    }
    if let Some(v) = o.labeled_fraction {
        cfg.labeled_fraction = v;
    }
    if let Some(v) = o.alpha {
        cfg.train.net.alpha = v;
    }
    if let Some(v) = o.k {
        cfg.eval.k = v;
    }
    if let Some(v) = o.rounds {
        cfg.ntpl.rounds = v;
    }
    if let Some(v) = o.threshold {
        cfg.ntpl.threshold = v;
    }
    if o.hard_labels {
        cfg.ntpl.hard_labels = true;
    }
    if o.log_adv {
        cfg.train.adv_form = AdvForm::Log;
    }
    if let Some(v) = &o.out_dir {
        cfg.paths.out_dir = v.clone();
    }
    if let Some(v) = &o.data_dir {
        cfg.paths.data_dir = v.clone();
    }
    if let Some(v) = o.iterations {
        cfg.train.iterations = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn labeled_manifest_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out_dir.join("labeled_manifest.jsonl")
}

fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.paths.out_dir.join("translation").join("model.safetensors")
}

fn gen_data(cfg: &RunConfig, workers: usize) -> Result<()> {
    let root = &cfg.paths.data_dir;
    let mut manifest = data::generate_corpus(&cfg.data, root, workers)?;
    if let Some(ext) = &cfg.paths.external_dir {
        manifest = data::merge_external(&manifest, ext)?;
        manifest.save()?;
    }
    if cfg.heldout_per_class > 0 {
        data::generate_heldout(&cfg.data, cfg.heldout_per_class, root)?;
    }
    cfg.save(&root.join("effective_config.json"))?;
    println!("{} images written to {}", manifest.records.len(), root.display());
    Ok(())
}

fn train_labeler(cfg: &RunConfig) -> Result<()> {
    let corpus = CorpusManifest::load(&cfg.paths.data_dir)?;
    let labeled = data::split_labels(&corpus, cfg.labeled_fraction, cfg.seed)?;
    labeled.save_to(&labeled_manifest_path(cfg))?;
    let heldout_path = data::heldout_manifest_path(&cfg.paths.data_dir);
    let heldout = if cfg.heldout_per_class > 0 && heldout_path.exists() {
        let m = CorpusManifest::load_from(&heldout_path, &cfg.paths.data_dir)?;
        Some(HeldOut::from_manifest(&m, cfg.data.resolution)?)
    } else {
        None
    };
    let outcome = trainer::run_phase1(
        &cfg.ntpl,
        &labeled,
        cfg.data.resolution,
        cfg.train.precision,
        heldout.as_ref(),
        &cfg.paths.out_dir.join("labeler"),
    )?;
    for r in &outcome.reports {
        match r.heldout_error {
            Some(e) => println!("round {:>3}: {} labeled, held-out error {:.2}%", r.round, r.train_size, 100.0 * e),
            None => println!("round {:>3}: {} labeled", r.round, r.train_size),
        }
    }
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let manifest = CorpusManifest::load_from(&labeled_manifest_path(cfg), &cfg.paths.data_dir)?;
    let set = PseudoLabeledSet::load(&cfg.paths.out_dir.join("labeler").join("labeled_set.jsonl"))?;
    let data = TranslationData::from_labeled_set(&manifest, &set, cfg.data.resolution, cfg.train.external_unlabeled)?;
    let out = cfg.paths.out_dir.join("translation");
    let state = trainer::run_phase2(&cfg.train, &data, &out, |_| {})?;
    println!("{} iterations done; model at {}", state.iteration, out.join("model.safetensors").display());
    Ok(())
}

fn translate(cfg: &RunConfig, checkpoint: &Path, source: &[PathBuf], targets: &[PathBuf], output: &Path) -> Result<()> {
    let (model, _) = trainer::load_translation_model(checkpoint)?;
    if targets.len() < cfg.eval.k {
        return Err(Error::Config(format!("--k {} but only {} target images", cfg.eval.k, targets.len())));
    }
    let res = model.cfg.resolution;
    let dtype = model.dtype();
    let x_sc = ImageSet::from_paths(source, res)?.tensor().to_dtype(dtype)?;
    let x_tg = ImageSet::from_paths(&targets[..cfg.eval.k], res)?.tensor().to_dtype(dtype)?;
    let grid = eval::translation_grid(&model, &x_sc, &x_tg)?;
    data::save_image_grid(&grid, cfg.eval.k + 2, output)?;
    println!("grid written to {}", output.display());
    Ok(())
}

fn evaluate(cfg: &RunConfig, checkpoint: &Path, corpus_dir: &Path) -> Result<EvalReport> {
    let (model, _) = trainer::load_translation_model(checkpoint)?;
    let res = model.cfg.resolution;
    let manifest = CorpusManifest::load(corpus_dir)?;
    let eval_dir = cfg.paths.out_dir.join("eval");
    let (all_path, test_path) = (eval_dir.join("classifier_all.safetensors"), eval_dir.join("classifier_test.safetensors"));
    let (cls_all, cls_test) = if all_path.exists() && test_path.exists() {
        (trainer::load_classifier(&all_path)?.0, trainer::load_classifier(&test_path)?.0)
    } else {
        let dtype = cfg.train.precision.dtype();
        let (a, t) = eval::train_eval_classifiers(&manifest, res, &cfg.classifier, dtype)?;
        let total = manifest.num_seen + manifest.num_unseen;
        let all_classes: Vec<usize> = (0..total).collect();
        trainer::save_classifier(&all_path, &a, cfg.classifier.width, cfg.train.precision, &all_classes)?;
        trainer::save_classifier(&test_path, &t, cfg.classifier.width, cfg.train.precision, &all_classes[manifest.num_seen..])?;
        (a, t)
    };
    let dtype = model.dtype();
    let results = eval::run_episodes(&manifest, &cfg.eval, res, |src, tgt| {
        eval::k_shot_translate(&model, &src.to_dtype(dtype)?, &tgt.to_dtype(dtype)?)
    })?;
    let report = eval::report(&results, manifest.num_seen, &cls_all, &cls_test, cfg.eval.is_splits)?;
    std::fs::write(eval_dir.join("eval_report.json"), report.to_json()? + "\n").map_err(|e| Error::io(&eval_dir, e))?;
    Ok(report)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli.overrides)?;
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    if !matches!(cli.command, Command::Config | Command::GenData) {
        cfg.save(&cfg.paths.out_dir.join("effective_config.json"))?;
    }
    match cli.command {
        Command::GenData => gen_data(&cfg, workers),
        Command::TrainLabeler => train_labeler(&cfg),
        Command::Train => train(&cfg),
        Command::Translate {
            checkpoint,
            source,
            targets,
            output,
        } => {
            let checkpoint = checkpoint.unwrap_or_else(|| default_checkpoint(&cfg));
            let output = output.unwrap_or_else(|| cfg.paths.out_dir.join("translate.png"));
            translate(&cfg, &checkpoint, &source, &targets, &output)
        }
        Command::Evaluate { checkpoint, manifest } => {
            let checkpoint = checkpoint.unwrap_or_else(|| default_checkpoint(&cfg));
            let corpus = manifest.unwrap_or_else(|| cfg.paths.data_dir.clone());
            if !corpus.join(MANIFEST_FILE).exists() {
                return Err(Error::Config(format!("no {MANIFEST_FILE} in {}", corpus.display())));
            }
            let report = evaluate(&cfg, &checkpoint, &corpus)?;
            eprintln!("{report}");
            println!("{}", serde_json::to_string(&report)?);
            Ok(())
        }
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
    }
}

fn exit_status(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        Error::MissingCheckpoint(_) | Error::Checkpoint(_) => 3,
        Error::NonFinite { .. } => 4,
        Error::Io { .. } | Error::Image(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": e.kind().to_string() }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("{}", serde_json::json!({ "error": e.code(), "message": e.to_string() }));
            ExitCode::from(exit_status(&e))
        }
    }
}
