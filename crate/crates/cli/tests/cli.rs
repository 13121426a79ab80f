use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn parnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parnet"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL: &str = r#"
name = "tiny"
numeric_path = "data/values.csv"
text_path = "data/texts.jsonl"
rhos = [0.0, 0.9]
seeds = [0]
variants = ["full", "unimodal"]
hidden = 8
max_epochs = 2
patience = 2
"#;

#[test]
fn synth_train_certify_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&parnet(d, &["--out", "data", "synth", "--len", "160"]));
    assert!(d.join("data/values.csv").exists() && d.join("data/texts.jsonl").exists());
    fs::write(d.join("exp.toml"), SMALL).unwrap();

    ok(&parnet(d, &["--config", "exp.toml", "--out", "ing", "ingest", "--numeric", "data/values.csv", "--texts", "data/texts.jsonl"]));
    assert_eq!(fs::read_to_string(d.join("ing/aligned.jsonl")).unwrap().lines().count(), 160);

    ok(&parnet(d, &["--config", "exp.toml", "--out", "pert", "perturb", "--rho", "0.5"]));
    assert!(!fs::read_to_string(d.join("pert/audit.jsonl")).unwrap().is_empty());

    ok(&parnet(d, &["--config", "exp.toml", "--out", "run", "train", "--rho", "0.9"]));
    for f in ["checkpoint.json", "epochs.csv", "metrics.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    ok(&parnet(d, &["--config", "exp.toml", "--out", "cert", "certify", "--checkpoint", "run/checkpoint.json", "--anchors", "2"]));
    let cert: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("cert/certificate.json")).unwrap()).unwrap();
    assert!(cert["l_total"].as_f64().unwrap() > 0.0);

    ok(&parnet(d, &["--config", "exp.toml", "--out", "s1", "sweep"]));
    ok(&parnet(d, &["--config", "exp.toml", "--out", "s2", "sweep"]));
    let a = fs::read(d.join("s1/results.csv")).unwrap();
    assert_eq!(a, fs::read(d.join("s2/results.csv")).unwrap());
    assert!(String::from_utf8(a).unwrap().starts_with("dataset,variant,rho,seed,mse,mae\n"));

    ok(&parnet(d, &["--out", "rep", "report", "--csv", "s1/results.csv"]));
    assert!(fs::read_to_string(d.join("rep/chart.svg")).unwrap().contains("<polyline"));
}

#[test]
fn prop2_and_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = parnet(d, &["verify-prop2", "--trials", "2000", "--reps", "5"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));

    fs::write(d.join("bad.toml"), "bogus = 1\n").unwrap();
    let out = parnet(d, &["--config", "bad.toml", "sweep"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
