//! The full experiment on a toy-sized phantom with one epoch per stage.

use xdssl::pipeline::reproduce::{
    FUSED, LOWER_BOUND, PRETRAIN_CONTRASTIVE, PRETRAIN_MIM, SSL_CONTRASTIVE, SSL_MIM, UPPER_BOUND,
};
use xdssl::pipeline::{reproduce, ExperimentConfig};

fn toy() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 3;
    cfg.phantom.source.patients = 4;
    cfg.phantom.source.videos_per_patient = 1;
    cfg.phantom.source.frames_per_video = 6;
    cfg.phantom.target.patients = 4;
    cfg.phantom.target.frames_per_video = 8;
    cfg.mim.epochs = 1;
    cfg.contrastive.epochs = 1;
    cfg.finetune.epochs = 1;
    cfg
}

#[test]
fn toy_experiment_is_deterministic_and_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy();
    let a = reproduce(&cfg, &dir.path().join("a"), &mut |_| {}).unwrap();
    let b = reproduce(&cfg, &dir.path().join("b"), &mut |_| {}).unwrap();

    let bytes = |r: &xdssl::pipeline::Reproduction| std::fs::read(r.layout.report()).unwrap();
    assert_eq!(bytes(&a), bytes(&b));

    let names: Vec<&str> = a.runs.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(
        names,
        [PRETRAIN_MIM, PRETRAIN_CONTRASTIVE, SSL_MIM, SSL_CONTRASTIVE, LOWER_BOUND, UPPER_BOUND]
    );
    for run in &a.runs {
        let acc = &run.access;
        match run.name.as_str() {
            PRETRAIN_MIM | PRETRAIN_CONTRASTIVE => {
                assert_eq!(acc.source_images + acc.source_masks + acc.target_masks, 0, "{}", run.name)
            }
            SSL_MIM | SSL_CONTRASTIVE | LOWER_BOUND => {
                assert_eq!(acc.target_images + acc.target_masks, 0, "{}", run.name)
            }
            UPPER_BOUND => assert_eq!(acc.source_images + acc.source_masks, 0),
            other => panic!("unexpected run {other}"),
        }
    }
    for (stage, acc) in &a.access {
        if stage.starts_with("infer/") {
            assert_eq!(acc.source_masks + acc.target_masks + acc.source_images, 0, "{stage}");
        }
    }

    let report: serde_json::Value = serde_json::from_slice(&bytes(&a)).unwrap();
    let text = serde_json::to_string(&report).unwrap();
    for name in [SSL_MIM, SSL_CONTRASTIVE, LOWER_BOUND, UPPER_BOUND, FUSED, "fused_margin", "fused_average"] {
        assert!(text.contains(&format!("\"{name}\"")), "{name} missing from report");
    }
    let o = &a.ordering;
    for v in [o.lower_bound, o.ssl_mim, o.ssl_contrastive, o.fused, o.upper_bound] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(!text.contains(dir.path().to_str().unwrap()), "report leaks an absolute path");
}
