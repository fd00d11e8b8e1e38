//! `xdssl` — command-line driver for the experiment pipeline.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error
//! (including missing files), 4 integrity or schema error, 5 internal.
//! Failures print one JSON record to stderr.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xdssl::audit::AccessAudit;
use xdssl::data::{generate_phantom, patient_split, Domain, Manifest, Split};
use xdssl::evaluation::{build_report, emit_report, evaluate_run, scores_csv, write_overlays, RunEvaluation};
use xdssl::fusion::{EntropyBase, FusionOptions, FusionStrategy, NormScope};
use xdssl::model::Group;
use xdssl::pipeline::{self, ExperimentConfig, OUT_ROOT_ENV};
use xdssl::seed::derive_seed;
use xdssl::training::{self, RunConfig, RunStage, SplitUsage};
use xdssl::{Error, Result};

#[derive(Parser)]
#[command(name = "xdssl", version, about = "Cross-domain self-supervised segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (TOML); `XDSSL__SECTION__KEY` variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set finetune.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Master seed (shorthand for `--set seed=N`).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut sets = self.sets.clone();
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        ExperimentConfig::resolve(self.config.as_deref(), std::env::vars(), &sets)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory (default: `<out root>/runs/<name>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run name (default: the stage name).
    #[arg(long)]
    name: Option<String>,
    /// Domain to train on (default: target for pretraining, source for fine-tuning).
    #[arg(long)]
    domain: Option<Domain>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain dataset and an unsplit manifest.
    Phantom {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory (default: `<out root>/data`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assign patients of both domains to train/val/test; rewrites the manifest.
    Split {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Masked image modeling on unlabeled frames.
    PretrainMim(TrainArgs),
    /// Temporally masked contrastive pretraining on unlabeled frames.
    PretrainContrastive(TrainArgs),
    /// Supervised Dice-BCE training, optionally from a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        /// Comma-separated groups copied from the checkpoint.
        #[arg(long, value_delimiter = ',')]
        transfer_groups: Option<Vec<Group>>,
    },
    /// Write probability rasters for every frame of a split.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "target")]
        domain: Domain,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse two prediction directories.
    Fuse {
        /// Predictions of the MIM-initialized branch.
        #[arg(long)]
        generative: PathBuf,
        /// Predictions of the contrastive-initialized branch.
        #[arg(long)]
        contrastive: PathBuf,
        #[arg(long, default_value = "entropy")]
        strategy: FusionStrategy,
        #[arg(long, value_enum, default_value = "per-image")]
        scope: ScopeArg,
        #[arg(long, value_enum, default_value = "two")]
        entropy_base: BaseArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction directory against ground truth.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "target")]
        domain: Domain,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Run name used in file names (default: the directory name).
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        overlays: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate evaluations into `report.json` with paired tests.
    Report {
        /// `evaluation_<name>.json` files written by `evaluate`.
        #[arg(long, num_args = 1.., required = true)]
        evaluations: Vec<PathBuf>,
        /// Compare only these pairs, `a:b`; default every pair.
        #[arg(long)]
        pair: Vec<String>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// The whole experiment from data generation to report.
    Reproduce {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (default: `<out root>/reproduce`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Print the resolved experiment config as TOML.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ScopeArg {
    PerImage,
    PerBatch,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum BaseArg {
    Two,
    Natural,
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("xdssl-out"))
}

fn split_fractions(cfg: &ExperimentConfig) -> BTreeMap<Split, f64> {
    [(Split::Train, cfg.split.train), (Split::Val, cfg.split.val), (Split::Test, cfg.split.test)]
        .into_iter()
        .collect()
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

fn train(args: &TrainArgs, stage: RunStage, init: Option<PathBuf>, groups: Option<Vec<Group>>) -> Result<serde_json::Value> {
    let exp = args.config.resolve()?;
    require_file(&args.manifest)?;
    let default_name = match stage {
        RunStage::PretrainMim => "pretrain_mim",
        RunStage::PretrainContrastive => "pretrain_contrastive",
        RunStage::Finetune => "finetune",
    };
    let name = args.name.clone().unwrap_or_else(|| default_name.to_string());
    let domain = args.domain.unwrap_or(match stage {
        RunStage::Finetune => Domain::Source,
        _ => Domain::Target,
    });
    let out = args.out.clone().unwrap_or_else(|| out_root().join("runs").join(&name));
    let val = if stage == RunStage::PretrainContrastive { vec![] } else { vec![Split::Val] };
    let usage = SplitUsage {
        domain,
        train: vec![Split::Train],
        val,
    };
    let mut rc = RunConfig::preset(stage, &name, args.manifest.clone(), usage, out, derive_seed(exp.seed, &format!("run/{name}")));
    let (opt, epochs, batch) = match stage {
        RunStage::PretrainMim => (&exp.mim.optimizer, exp.mim.epochs, exp.mim.batch_size),
        RunStage::PretrainContrastive => (&exp.contrastive.optimizer, exp.contrastive.epochs, exp.contrastive.batch_size),
        RunStage::Finetune => (&exp.finetune.optimizer, exp.finetune.epochs, exp.finetune.batch_size),
    };
    rc.optimizer = opt.clone();
    rc.epochs = epochs;
    rc.batch_size = batch;
    rc.loss = exp.loss.clone();
    rc.augmentation = exp.augmentation.clone();
    rc.backbone = exp.backbone.clone();
    if let Some(p) = &init {
        require_file(p)?;
        rc.transfer_groups = groups.unwrap_or_else(|| exp.finetune.transfer_groups.clone());
    } else if groups.is_some() {
        return Err(Error::Config("--transfer-groups needs --init-checkpoint".into()));
    }
    rc.init_checkpoint = init;
    let out = training::run(&rc)?;
    Ok(serde_json::json!({
        "run": out.name,
        "best_checkpoint": out.best_checkpoint,
        "final_checkpoint": out.final_checkpoint,
        "best_epoch": out.log.best_epoch,
        "access": out.access,
    }))
}

fn prediction_ids(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = std::collections::BTreeSet::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|x| x == "f32" || x == "png") {
            if let Some(stem) = p.file_stem() {
                ids.insert(stem.to_string_lossy().into_owned());
            }
        }
    }
    if ids.is_empty() {
        return Err(Error::Data(format!("no predictions in {}", dir.display())));
    }
    Ok(ids.into_iter().collect())
}

fn execute(command: Command) -> Result<serde_json::Value> {
    match command {
        Command::Phantom { config, out } => {
            let cfg = config.resolve()?;
            let dir = out.unwrap_or_else(|| out_root().join("data"));
            let mut records = Vec::new();
            for (label, phantom) in [("source", &cfg.phantom.source), ("target", &cfg.phantom.target)] {
                let mut p = phantom.clone();
                p.rng_seed = derive_seed(cfg.seed, &format!("phantom/{label}"));
                records.extend(generate_phantom(&p, &dir, label)?);
            }
            let manifest = Manifest::new(records, &dir)?;
            let path = dir.join(pipeline::reproduce::MANIFEST_JSON);
            manifest.save(&path)?;
            Ok(serde_json::json!({ "manifest": path, "frames": manifest.records.len() }))
        }
        Command::Split { config, manifest } => {
            let cfg = config.resolve()?;
            let mut m = Manifest::load(&manifest)?;
            for domain in [Domain::Source, Domain::Target] {
                m = patient_split(&m, domain, &split_fractions(&cfg), derive_seed(cfg.seed, &format!("split/{domain}")))?;
            }
            m.save(&manifest)?;
            Ok(serde_json::json!({ "manifest": manifest, "assignment": m.split_assignment }))
        }
        Command::PretrainMim(args) => train(&args, RunStage::PretrainMim, None, None),
        Command::PretrainContrastive(args) => train(&args, RunStage::PretrainContrastive, None, None),
        Command::Finetune {
            train: args,
            init_checkpoint,
            transfer_groups,
        } => train(&args, RunStage::Finetune, init_checkpoint, transfer_groups),
        Command::Infer {
            checkpoint,
            manifest,
            domain,
            split,
            out,
        } => {
            require_file(&checkpoint)?;
            let m = Manifest::load(&manifest)?;
            let a = pipeline::infer(&checkpoint, &m, domain, &[split], &out)?;
            Ok(serde_json::json!({ "images": a.images, "access": a.access }))
        }
        Command::Fuse {
            generative,
            contrastive,
            strategy,
            scope,
            entropy_base,
            out,
        } => {
            let ids = prediction_ids(&generative)?;
            let options = FusionOptions {
                scope: match scope {
                    ScopeArg::PerImage => NormScope::PerImage,
                    ScopeArg::PerBatch => NormScope::PerBatch,
                },
                entropy_base: match entropy_base {
                    BaseArg::Two => EntropyBase::Two,
                    BaseArg::Natural => EntropyBase::Natural,
                },
            };
            pipeline::fuse_dirs(&generative, &contrastive, &ids, strategy, options, &out)?;
            Ok(serde_json::json!({ "fused": ids.len(), "out": out }))
        }
        Command::Evaluate {
            predictions,
            manifest,
            domain,
            split,
            name,
            threshold,
            overlays,
            out,
        } => {
            let m = Manifest::load(&manifest)?;
            let name = name.unwrap_or_else(|| {
                predictions
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "run".into())
            });
            let audit = AccessAudit::new();
            let eval = evaluate_run(&name, &predictions, &m, domain, split, threshold, &audit)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let csv = out.join(format!("scores_{name}.csv"));
            std::fs::write(&csv, scores_csv(&eval)).map_err(|e| Error::io(&csv, e))?;
            let json = out.join(format!("evaluation_{name}.json"));
            std::fs::write(&json, serde_json::to_string_pretty(&eval)? + "\n").map_err(|e| Error::io(&json, e))?;
            if overlays {
                write_overlays(&eval, &predictions, &m, threshold, &out.join("overlays").join(&name), &audit)?;
            }
            Ok(serde_json::json!({ "run": name, "n_images": eval.scores.len(), "mean_dsc": eval.mean_dsc, "mean_iou": eval.mean_iou }))
        }
        Command::Report {
            evaluations,
            pair,
            threshold,
            out,
        } => {
            let mut runs = Vec::new();
            for p in &evaluations {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let e: RunEvaluation =
                    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", p.display())))?;
                runs.push(e);
            }
            let pairs: Vec<(String, String)> = pair
                .iter()
                .map(|s| {
                    s.split_once(':')
                        .map(|(a, b)| (a.to_string(), b.to_string()))
                        .ok_or_else(|| Error::Config(format!("pair `{s}` is not a:b")))
                })
                .collect::<Result<_>>()?;
            let report = build_report(&runs, (!pairs.is_empty()).then_some(pairs.as_slice()), threshold)?;
            emit_report(&report, &runs, &out)?;
            Ok(serde_json::json!({ "report": out.join(xdssl::evaluation::REPORT_JSON), "runs": report.runs }))
        }
        Command::Reproduce { config, out, quiet } => {
            let cfg = config.resolve()?;
            let out = out.unwrap_or_else(|| out_root().join("reproduce"));
            let mut log = |m: &str| {
                if !quiet {
                    eprintln!("[xdssl] {m}");
                }
            };
            let r = pipeline::reproduce(&cfg, &out, &mut log)?;
            Ok(serde_json::json!({
                "report": r.layout.report(),
                "ordering": r.ordering,
                "ordering_holds": r.ordering.holds(),
                "seconds": r.seconds,
            }))
        }
        Command::Config { config } => {
            print!("{}", config.resolve()?.to_toml());
            Ok(serde_json::Value::Null)
        }
    }
}

fn error_record(kind: &str, code: i32, message: &str) -> String {
    serde_json::json!({ "error": kind, "exit_code": code, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            eprintln!("{}", error_record("usage", 2, msg.lines().next().unwrap_or_default()));
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code();
            eprintln!("{}", error_record(e.kind(), code, &e.to_string()));
            ExitCode::from(code as u8)
        }
    }
}
