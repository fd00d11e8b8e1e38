//! Drives the `xdssl` binary: a small stage-by-stage workflow, config
//! layering and the exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

fn xdssl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xdssl"))
        .args(args)
        .env_remove("XDSSL_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = xdssl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap_or(serde_json::Value::Null)
}

fn failure(out: &Output) -> (i32, serde_json::Value) {
    let code = out.status.code().expect("exit code");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    (code, serde_json::from_str(line).unwrap_or(serde_json::Value::Null))
}

const SMALL: [&str; 10] = [
    "--set",
    "phantom.source.patients=4",
    "--set",
    "phantom.source.frames_per_video=4",
    "--set",
    "phantom.target.patients=4",
    "--set",
    "phantom.target.frames_per_video=8",
    "--set",
    "finetune.epochs=1",
];

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn stage_by_stage_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let manifest = data.join("manifest.json");

    let mut args = vec!["phantom", "--out", s(&data)];
    args.extend(SMALL);
    let v = ok(&args);
    assert_eq!(v["frames"], 4 * 2 * 4 + 4 * 8);
    ok(&["split", "--manifest", s(&manifest)]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert!(m.to_string().contains("\"test\""));

    let run = root.join("runs/ub");
    let mut args = vec!["finetune", "--manifest", s(&manifest), "--out", s(&run), "--domain", "target"];
    args.extend(SMALL);
    ok(&args);
    let ckpt = run.join("best.ckpt");
    assert!(ckpt.is_file());

    let preds = root.join("pred/ub");
    let v = ok(&["infer", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&preds)]);
    assert!(v["images"].as_u64().unwrap() > 0);

    // Averaging a branch with itself reproduces it exactly.
    let fused = root.join("pred/self");
    ok(&["fuse", "--generative", s(&preds), "--contrastive", s(&preds), "--strategy", "average", "--out", s(&fused)]);
    let mut compared = 0;
    for entry in std::fs::read_dir(&preds).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "f32") {
            let other = fused.join(p.file_name().unwrap());
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&other).unwrap(), "{}", p.display());
            compared += 1;
        }
    }
    assert!(compared > 0);

    let evals = root.join("eval");
    let a = ok(&["evaluate", "--predictions", s(&preds), "--manifest", s(&manifest), "--out", s(&evals)]);
    let b = ok(&["evaluate", "--predictions", s(&fused), "--manifest", s(&manifest), "--out", s(&evals)]);
    assert_eq!(a["mean_dsc"], b["mean_dsc"]);
    assert!(evals.join("scores_ub.csv").is_file());

    let report = root.join("report");
    ok(&[
        "report",
        "--evaluations",
        s(&evals.join("evaluation_ub.json")),
        s(&evals.join("evaluation_self.json")),
        "--out",
        s(&report),
    ]);
    let text = std::fs::read_to_string(report.join("report.json")).unwrap();
    assert!(text.contains("\"ub\"") && text.contains("\"self\""));

    // A prediction directory with a hole names the missing image.
    let holed = root.join("pred/holed");
    std::fs::create_dir_all(&holed).unwrap();
    for entry in std::fs::read_dir(&preds).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "f32") {
            std::fs::copy(&p, holed.join(p.file_name().unwrap())).unwrap();
        }
    }
    let scores = std::fs::read_to_string(evals.join("scores_ub.csv")).unwrap();
    let first_scored = scores.lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    std::fs::remove_file(holed.join(format!("{first_scored}.f32"))).unwrap();
    let out = xdssl(&["evaluate", "--predictions", s(&holed), "--manifest", s(&manifest), "--out", s(&evals)]);
    let (code, err) = failure(&out);
    assert_eq!(code, 3);
    assert_eq!(err["error"], "missing_predictions");
    assert!(err["message"].as_str().unwrap().contains(&first_scored));
}

#[test]
fn config_layers_env_below_flags() {
    let out = Command::new(env!("CARGO_BIN_EXE_xdssl"))
        .args(["config"])
        .env("XDSSL__MIM__EPOCHS", "3")
        .env("XDSSL__FUSION__STRATEGY", "margin")
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg: toml::Table = String::from_utf8(out.stdout).unwrap().parse().unwrap();
    assert_eq!(cfg["mim"]["epochs"].as_integer(), Some(3));
    assert_eq!(cfg["fusion"]["strategy"].as_str(), Some("margin"));

    let out = Command::new(env!("CARGO_BIN_EXE_xdssl"))
        .args(["config", "--set", "mim.epochs=5", "--seed", "11"])
        .env("XDSSL__MIM__EPOCHS", "3")
        .output()
        .unwrap();
    let cfg: toml::Table = String::from_utf8(out.stdout).unwrap().parse().unwrap();
    assert_eq!(cfg["mim"]["epochs"].as_integer(), Some(5));
    assert_eq!(cfg["seed"].as_integer(), Some(11));
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();

    let (code, err) = failure(&xdssl(&["config", "--no-such-flag"]));
    assert_eq!((code, err["error"].as_str()), (2, Some("usage")));

    let (code, err) = failure(&xdssl(&["config", "--set", "mim.epochs=0"]));
    assert_eq!((code, err["error"].as_str()), (2, Some("config")));

    let missing = dir.path().join("nope.json");
    let (code, _) = failure(&xdssl(&["split", "--manifest", s(&missing)]));
    assert_eq!(code, 3);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[mim\nepochs = ").unwrap();
    let (code, err) = failure(&xdssl(&["config", "--config", s(&bad)]));
    assert_eq!((code, err["error"].as_str()), (4, Some("schema")));

    std::fs::write(&bad, "[mim]\nepochs = \"many\"\n").unwrap();
    let (code, _) = failure(&xdssl(&["config", "--config", s(&bad)]));
    assert_eq!(code, 4);

    let garbage = dir.path().join("manifest.json");
    std::fs::write(&garbage, "{ not json").unwrap();
    let (code, _) = failure(&xdssl(&["split", "--manifest", s(&garbage)]));
    assert_eq!(code, 4);
}
