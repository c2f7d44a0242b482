use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fusion_vad::dsp::AudioBuffer;
use fusion_vad::model::{build_model, FusionConfig, FusionMode};

fn fvad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fvad")).args(args).env_remove("FVAD_THREADS").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = fvad(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(args: &[&str], code: i32, needle: &str) {
    let out = fvad(args);
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {err}");
    assert!(err.contains(needle), "{args:?}: expected {needle:?} in {err}");
}

fn total(table: &str) -> usize {
    table.lines().find(|l| l.starts_with("total")).unwrap().split_whitespace().nth(1).unwrap().parse().unwrap()
}

fn count(mode: &str) -> usize {
    total(&ok(&["count-params", "--fusion", mode, "--d-mfcc", "13", "--d-ptm", "768"]))
}

#[test]
fn count_params_deltas() {
    assert_eq!(count("concat") - count("add"), 32_896);
    assert_eq!(count("xattn") - count("add"), 66_304);
    let built = build_model::<f32>(&FusionConfig::new(FusionMode::NoneMfcc, 13, 768), 0).unwrap().scalar_count();
    assert_eq!(count("none-mfcc"), built);
    let table = ok(&["count-params", "--fusion", "none-mfcc", "--d-mfcc", "13", "--d-ptm", "1"]);
    assert!(table.contains("proj_mfcc") && table.contains("18304"));
}

#[test]
fn invalid_dims_exit_2() {
    fails_with(
        &["count-params", "--fusion", "xattn", "--d-mfcc", "13", "--d-ptm", "8", "--d-model", "5"],
        2,
        "divisible",
    );
    fails_with(&["count-params", "--fusion", "add", "--d-mfcc", "0", "--d-ptm", "8"], 2, "d_mfcc");
    fails_with(&["count-params", "--fusion", "sum", "--d-mfcc", "1", "--d-ptm", "8"], 2, "unknown fusion mode");
}

#[test]
fn threads_fall_back_to_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_fvad"))
        .args(["count-params", "--fusion", "add", "--d-mfcc", "1", "--d-ptm", "1"])
        .env("FVAD_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--threads"));
}

fn tone(path: &Path, seconds: f64) {
    let n = (seconds * 16_000.0) as usize;
    let s: Vec<f32> = (0..n).map(|i| 0.3 * (i as f32 * 0.11).sin() + 0.05 * (i as f32 * 1.7).cos()).collect();
    AudioBuffer::new(s, 16_000).unwrap().write_wav_i16(path).unwrap();
}

#[test]
fn extract_mfcc_files() {
    let dir = tempfile::tempdir().unwrap();
    let wavs = dir.path().join("wavs");
    fs::create_dir(&wavs).unwrap();
    tone(&wavs.join("a.wav"), 2.0);
    let out = dir.path().join("feats");
    let (w, o) = (wavs.to_str().unwrap(), out.to_str().unwrap());
    assert!(ok(&["extract-mfcc", "--wav-dir", w, "--out", o]).contains("T=100 D=13"));
    let first = fs::read(out.join("a.fvad")).unwrap();
    let m = fusion_vad::data::read_features(&out.join("a.fvad")).unwrap();
    assert_eq!((m.frames(), m.dim(), m.hop_ms()), (100, 13, 20.0));
    ok(&["--threads", "1", "extract-mfcc", "--wav", wavs.join("a.wav").to_str().unwrap(), "--out", o]);
    assert_eq!(fs::read(out.join("a.fvad")).unwrap(), first);
    let run: serde_json::Value = serde_json::from_slice(&fs::read(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "extract-mfcc");
    assert_eq!(run["inputs"].as_object().unwrap().len(), 1);

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    fails_with(&["extract-mfcc", "--wav-dir", empty.to_str().unwrap(), "--out", o], 2, "no wav files found");
    let bad = wavs.join("broken.wav");
    fs::write(&bad, b"RIFF0000WAVEjunk").unwrap();
    fails_with(&["extract-mfcc", "--wav", bad.to_str().unwrap(), "--out", o], 2, "broken.wav");
}

const TINY: &[&str] = &["--d-model", "8", "--lstm-hidden", "8", "--lstm-layers", "1", "--epochs", "2", "--batch", "4"];

fn synth(dir: &Path) -> String {
    let d = dir.join("data");
    ok(&["synth", "--out", d.to_str().unwrap(), "--n-files", "5", "--file-s", "12", "--seed", "3"]);
    d.join("manifest.jsonl").to_str().unwrap().to_string()
}

fn train(manifest: &str, mode: &str, out: &Path) -> String {
    let mut args = vec!["train", "--manifest", manifest, "--fusion", mode, "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    ok(&args)
}

#[test]
fn synth_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let data = dir.path().join("data");
    assert!(data.join("reference.rttm").exists() && data.join("run.json").exists());

    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    let stdout = train(&manifest, "add", &r1);
    assert!(stdout.starts_with("best_epoch="), "{stdout}");
    train(&manifest, "add", &r2);
    assert_eq!(fs::read(r1.join("best.fvck")).unwrap(), fs::read(r2.join("best.fvck")).unwrap());
    let log: serde_json::Value = serde_json::from_slice(&fs::read(r1.join("trainlog.json")).unwrap()).unwrap();
    assert!(log["epochs"].as_array().unwrap().len() <= 2);

    // the reference scored against itself
    let report = dir.path().join("oracle.json");
    let table = ok(&[
        "eval",
        "--manifest",
        &manifest,
        "--split",
        "test",
        "--hyp-rttm",
        data.join("reference.rttm").to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(table.contains("DER") && table.contains("overall"));
    let rep: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(rep["der"], 0.0);

    let report = dir.path().join("model.json");
    ok(&[
        "eval",
        "--model",
        r1.join("best.fvck").to_str().unwrap(),
        "--manifest",
        &manifest,
        "--split",
        "dev",
        "--report",
        report.to_str().unwrap(),
    ]);
    let rep: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    let (der, far, mr) = (rep["der"].as_f64().unwrap(), rep["far"].as_f64().unwrap(), rep["mr"].as_f64().unwrap());
    assert!((der - (far + mr)).abs() < 1e-9);
    assert!(dir.path().join("model.run.json").exists());

    let plot = dir.path().join("plot");
    ok(&[
        "plot",
        "--manifest",
        &manifest,
        "--file-id",
        "synth0004",
        "--model",
        &format!("add={}", r1.join("best.fvck").display()),
        "--hyp-rttm",
        &format!("ref={}", data.join("reference.rttm").display()),
        "--out",
        plot.to_str().unwrap(),
    ]);
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(plot.join("synth0004.json")).unwrap()).unwrap();
    let names: Vec<&str> = doc["lanes"].as_array().unwrap().iter().map(|l| l["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["reference", "add", "ref"]);
    assert!(fs::read_to_string(plot.join("synth0004.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn input_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    // drop the PTM stream from every entry
    let text = fs::read_to_string(&manifest).unwrap();
    let stripped: String = text
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("ptm_path");
            v.to_string() + "\n"
        })
        .collect();
    let mfcc_only = dir.path().join("data").join("mfcc_only.jsonl");
    fs::write(&mfcc_only, stripped).unwrap();
    let out = dir.path().join("x");
    let mut args =
        vec!["train", "--manifest", mfcc_only.to_str().unwrap(), "--fusion", "xattn", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    fails_with(&args, 2, "fusion requires ptm stream");

    let mut args =
        vec!["train", "--manifest", &manifest, "--fusion", "add", "--d-mfcc", "20", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    fails_with(&args, 2, "--d-mfcc 20 but features have 13");

    // a manifest with only training files has no test split
    let train_only: String = text.lines().filter(|l| l.contains("\"train\"")).map(|l| format!("{l}\n")).collect();
    let train_manifest = dir.path().join("data").join("train_only.jsonl");
    fs::write(&train_manifest, train_only).unwrap();
    let rttm = dir.path().join("data").join("reference.rttm");
    fails_with(
        &[
            "eval",
            "--manifest",
            train_manifest.to_str().unwrap(),
            "--hyp-rttm",
            rttm.to_str().unwrap(),
            "--report",
            dir.path().join("r.json").to_str().unwrap(),
        ],
        2,
        "no test split",
    );
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path());
    let out = dir.path().join("r");
    let mut args =
        vec!["train", "--manifest", &manifest, "--fusion", "add", "--lr", "1e30", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    fails_with(&args, 3, "non-finite");
    assert!(!out.join("best.fvck").exists());
}
