//! The end-to-end experiment: phantom data, both pretrainings, the
//! fine-tuned branches and baselines, fusion, evaluation and the report.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::stages::{frame_ids, fuse_dirs, infer};
use crate::audit::{AccessAudit, AccessSummary};
use crate::data::{generate_phantom, patient_split, Domain, Manifest, Split};
use crate::error::{Error, Result};
use crate::evaluation::{build_report, emit_report, evaluate_run, write_overlays, Report, RunEvaluation, REPORT_JSON};
use crate::fusion::{FusionOptions, FusionStrategy};
use crate::seed::derive_seed;
use crate::training::{run, RunConfig, RunOutput, RunStage, SplitUsage};

pub const MANIFEST_JSON: &str = "manifest.json";
pub const TIMING_JSON: &str = "timing.json";

pub const PRETRAIN_MIM: &str = "pretrain_mim";
pub const PRETRAIN_CONTRASTIVE: &str = "pretrain_contrastive";
pub const SSL_MIM: &str = "ssl_mim";
pub const SSL_CONTRASTIVE: &str = "ssl_contrastive";
pub const LOWER_BOUND: &str = "lower_bound";
pub const UPPER_BOUND: &str = "upper_bound";
pub const FUSED: &str = "fused";

/// Layout of a reproduction directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn manifest(&self) -> PathBuf {
        self.data().join(MANIFEST_JSON)
    }
    pub fn run(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(name)
    }
    pub fn predictions(&self, name: &str) -> PathBuf {
        self.root.join("predictions").join(name)
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn report(&self) -> PathBuf {
        self.report_dir().join(REPORT_JSON)
    }
}

/// Generates both phantom domains under `data_dir`, assigns patient splits
/// and saves the manifest.
pub fn prepare_data(cfg: &ExperimentConfig, data_dir: &Path) -> Result<Manifest> {
    let mut records = Vec::new();
    for (label, phantom) in [("source", &cfg.phantom.source), ("target", &cfg.phantom.target)] {
        let mut p = phantom.clone();
        p.rng_seed = derive_seed(cfg.seed, &format!("phantom/{label}"));
        records.extend(generate_phantom(&p, data_dir, label)?);
    }
    let mut manifest = Manifest::new(records, data_dir)?;
    let fractions: BTreeMap<Split, f64> = [
        (Split::Train, cfg.split.train),
        (Split::Val, cfg.split.val),
        (Split::Test, cfg.split.test),
    ]
    .into_iter()
    .collect();
    for domain in [Domain::Source, Domain::Target] {
        manifest = patient_split(&manifest, domain, &fractions, derive_seed(cfg.seed, &format!("split/{domain}")))?;
    }
    manifest.save(&data_dir.join(MANIFEST_JSON))?;
    Ok(manifest)
}

/// Run configurations of the experiment, in execution order.
pub fn run_configs(cfg: &ExperimentConfig, layout: &Layout) -> Vec<RunConfig> {
    let manifest = layout.manifest();
    let usage = |domain| SplitUsage {
        domain,
        train: vec![Split::Train],
        val: vec![Split::Val],
    };
    let make = |stage, name: &str, domain| {
        let mut r = RunConfig::preset(stage, name, manifest.clone(), usage(domain), layout.run(name), derive_seed(cfg.seed, &format!("run/{name}")));
        let settings = match stage {
            RunStage::PretrainMim => (&cfg.mim.optimizer, cfg.mim.epochs, cfg.mim.batch_size),
            RunStage::PretrainContrastive => (&cfg.contrastive.optimizer, cfg.contrastive.epochs, cfg.contrastive.batch_size),
            RunStage::Finetune => (&cfg.finetune.optimizer, cfg.finetune.epochs, cfg.finetune.batch_size),
        };
        r.optimizer = settings.0.clone();
        r.epochs = settings.1;
        r.batch_size = settings.2;
        r.loss = cfg.loss.clone();
        r.augmentation = cfg.augmentation.clone();
        r.backbone = cfg.backbone.clone();
        r
    };
    let mut contrastive = make(RunStage::PretrainContrastive, PRETRAIN_CONTRASTIVE, Domain::Target);
    contrastive.splits.val.clear();
    let ssl = |name: &str, pretrain: &str| {
        let mut r = make(RunStage::Finetune, name, Domain::Source);
        r.init_checkpoint = Some(layout.run(pretrain).join(crate::training::BEST_CHECKPOINT));
        r.transfer_groups = cfg.finetune.transfer_groups.clone();
        r
    };
    vec![
        make(RunStage::PretrainMim, PRETRAIN_MIM, Domain::Target),
        contrastive,
        ssl(SSL_MIM, PRETRAIN_MIM),
        ssl(SSL_CONTRASTIVE, PRETRAIN_CONTRASTIVE),
        make(RunStage::Finetune, LOWER_BOUND, Domain::Source),
        make(RunStage::Finetune, UPPER_BOUND, Domain::Target),
    ]
}

/// Mean test DSC of the compared methods and the expected orderings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ordering {
    pub lower_bound: f64,
    pub ssl_mim: f64,
    pub ssl_contrastive: f64,
    pub fused: f64,
    pub upper_bound: f64,
    /// Smallest gain of an SSL branch over the lower bound.
    pub ssl_gain_min: f64,
    pub lower_bound_below_ssl: bool,
    pub ssl_gain_at_least_0_01: bool,
    pub fused_within_0_005_of_best_branch: bool,
    pub upper_bound_above_fused: bool,
}

impl Ordering {
    pub fn from_means(means: &BTreeMap<String, f64>) -> Result<Self> {
        let get = |k: &str| {
            means
                .get(k)
                .copied()
                .ok_or_else(|| Error::Data(format!("no evaluation for run `{k}`")))
        };
        let (lb, g, c, f, ub) = (get(LOWER_BOUND)?, get(SSL_MIM)?, get(SSL_CONTRASTIVE)?, get(FUSED)?, get(UPPER_BOUND)?);
        let gain = g.min(c) - lb;
        Ok(Self {
            lower_bound: lb,
            ssl_mim: g,
            ssl_contrastive: c,
            fused: f,
            upper_bound: ub,
            ssl_gain_min: gain,
            lower_bound_below_ssl: lb <= g && lb <= c,
            ssl_gain_at_least_0_01: gain >= 0.01,
            fused_within_0_005_of_best_branch: f >= g.max(c) - 0.005,
            upper_bound_above_fused: ub >= f,
        })
    }

    pub fn holds(&self) -> bool {
        self.lower_bound_below_ssl
            && self.ssl_gain_at_least_0_01
            && self.fused_within_0_005_of_best_branch
            && self.upper_bound_above_fused
    }
}

/// Everything a reproduction produced.
#[derive(Debug, Clone)]
pub struct Reproduction {
    pub layout: Layout,
    pub report: Report,
    pub ordering: Ordering,
    pub runs: Vec<RunOutput>,
    /// Data access per stage, keyed `run/<name>`, `infer/<name>`, `evaluate`.
    pub access: BTreeMap<String, AccessSummary>,
    pub seconds: f64,
}

#[derive(Serialize)]
struct Timing {
    total_seconds: f64,
    stages: BTreeMap<String, f64>,
}

fn fused_name(strategy: FusionStrategy, primary: FusionStrategy) -> String {
    if strategy == primary {
        FUSED.to_string()
    } else {
        let s = serde_json::to_value(strategy).expect("enum serializes");
        format!("{FUSED}_{}", s.as_str().expect("string tag"))
    }
}

/// Runs the whole experiment into `out`. The report holds no wall times or
/// absolute paths, so equal seeds give byte-identical report files.
pub fn reproduce(cfg: &ExperimentConfig, out: &Path, log: &mut dyn FnMut(&str)) -> Result<Reproduction> {
    cfg.validate()?;
    let started = Instant::now();
    let mut timing = BTreeMap::new();
    let layout = Layout::new(out);
    let lap = |name: &str, t: &mut Instant, timing: &mut BTreeMap<String, f64>| {
        timing.insert(name.to_string(), t.elapsed().as_secs_f64());
        *t = Instant::now();
    };
    let mut t = Instant::now();

    log("generating phantom data");
    let manifest = prepare_data(cfg, &layout.data())?;
    lap("data", &mut t, &mut timing);

    let mut access = BTreeMap::new();
    let mut runs = Vec::new();
    for rc in run_configs(cfg, &layout) {
        log(&format!("training {}", rc.name));
        let output = run(&rc)?;
        access.insert(format!("run/{}", rc.name), output.access.clone());
        lap(&format!("run/{}", rc.name), &mut t, &mut timing);
        runs.push(output);
    }
    let checkpoint = |name: &str| {
        runs.iter()
            .find(|r| r.name == name)
            .map(|r| r.best_checkpoint.clone())
            .expect("run executed")
    };

    log("inference on the target test split");
    let test = [Split::Test];
    let evaluated = [SSL_MIM, SSL_CONTRASTIVE, LOWER_BOUND, UPPER_BOUND];
    for name in evaluated {
        let a = infer(&checkpoint(name), &manifest, Domain::Target, &test, &layout.predictions(name))?;
        access.insert(format!("infer/{name}"), a.access);
    }
    lap("infer", &mut t, &mut timing);

    let ids = frame_ids(&manifest, Domain::Target, &test);
    let options = FusionOptions {
        entropy_base: cfg.fusion.entropy_base,
        scope: cfg.fusion.scope,
    };
    let mut strategies = vec![cfg.fusion.strategy];
    if cfg.fusion.ablation {
        strategies.extend(
            [FusionStrategy::Entropy, FusionStrategy::Margin, FusionStrategy::Average]
                .into_iter()
                .filter(|s| *s != cfg.fusion.strategy),
        );
    }
    let mut pred_names: Vec<String> = evaluated.iter().map(|s| s.to_string()).collect();
    for s in strategies {
        let name = fused_name(s, cfg.fusion.strategy);
        fuse_dirs(
            &layout.predictions(SSL_MIM),
            &layout.predictions(SSL_CONTRASTIVE),
            &ids,
            s,
            options,
            &layout.predictions(&name),
        )?;
        pred_names.push(name);
    }
    lap("fuse", &mut t, &mut timing);

    log("evaluating");
    let audit = AccessAudit::new();
    let mut evals: Vec<RunEvaluation> = Vec::new();
    for name in &pred_names {
        let dir = layout.predictions(name);
        let e = evaluate_run(name, &dir, &manifest, Domain::Target, Split::Test, cfg.evaluation.threshold, &audit)?;
        if cfg.evaluation.overlays {
            write_overlays(&e, &dir, &manifest, cfg.evaluation.threshold, &layout.root.join("overlays").join(name), &audit)?;
        }
        evals.push(e);
    }
    access.insert("evaluate".to_string(), audit.summarize(&manifest));
    let means: BTreeMap<String, f64> = evals.iter().map(|e| (e.name.clone(), e.mean_dsc)).collect();
    let ordering = Ordering::from_means(&means)?;
    let mut report = build_report(&evals, None, cfg.evaluation.threshold)?;
    report.sections.insert("ordering".into(), serde_json::to_value(&ordering)?);
    report.sections.insert("access".into(), serde_json::to_value(&access)?);
    report.sections.insert("config".into(), serde_json::to_value(cfg)?);
    report.sections.insert(
        "transfer".into(),
        serde_json::to_value(
            runs.iter()
                .filter_map(|r| r.transfer.as_ref().map(|t| (r.name.clone(), t)))
                .collect::<BTreeMap<_, _>>(),
        )?,
    );
    emit_report(&report, &evals, &layout.report_dir())?;
    lap("evaluate", &mut t, &mut timing);

    let seconds = started.elapsed().as_secs_f64();
    let timing_path = layout.root.join(TIMING_JSON);
    let body = serde_json::to_string_pretty(&Timing {
        total_seconds: seconds,
        stages: timing,
    })?;
    std::fs::write(&timing_path, body + "\n").map_err(|e| Error::io(&timing_path, e))?;
    log(&format!("done in {seconds:.1}s"));
    Ok(Reproduction {
        layout,
        report,
        ordering,
        runs,
        access,
        seconds,
    })
}

/// Names of runs allowed to read target-domain labels.
pub fn target_label_readers() -> BTreeSet<&'static str> {
    [UPPER_BOUND].into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_checks() {
        let means: BTreeMap<String, f64> = [
            (LOWER_BOUND, 0.5),
            (SSL_MIM, 0.6),
            (SSL_CONTRASTIVE, 0.55),
            (FUSED, 0.597),
            (UPPER_BOUND, 0.8),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let o = Ordering::from_means(&means).unwrap();
        assert!(o.holds());
        assert!((o.ssl_gain_min - 0.05).abs() < 1e-12);
        let mut worse = means.clone();
        worse.insert(FUSED.into(), 0.59);
        assert!(!Ordering::from_means(&worse).unwrap().fused_within_0_005_of_best_branch);
    }

    #[test]
    fn run_plan_isolates_domains() {
        let cfg = ExperimentConfig::default();
        let runs = run_configs(&cfg, &Layout::new("/x"));
        let by: BTreeMap<&str, &RunConfig> = runs.iter().map(|r| (r.name.as_str(), r)).collect();
        assert_eq!(by[PRETRAIN_MIM].splits.domain, Domain::Target);
        assert_eq!(by[PRETRAIN_CONTRASTIVE].splits.domain, Domain::Target);
        for n in [SSL_MIM, SSL_CONTRASTIVE, LOWER_BOUND] {
            assert_eq!(by[n].splits.domain, Domain::Source, "{n}");
        }
        assert!(by[LOWER_BOUND].init_checkpoint.is_none());
        assert_eq!(by[UPPER_BOUND].splits.domain, Domain::Target);
        let seeds: BTreeSet<u64> = runs.iter().map(|r| r.seed).collect();
        assert_eq!(seeds.len(), runs.len());
    }
}
