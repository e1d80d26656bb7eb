use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use multideriv::commands::{AblationRow, Manifest, Report};
use multideriv::formats::{read_csv, LossRow};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_multideriv"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// Small, fast model and data settings shared by the tests.
const SMALL: &str = "\
data.clips = 8
data.size = 36
model.input_size = 12
model.filters = 2, 2
model.gru_units = 2
train.batch_size = 8
";

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p.display().to_string()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_layout_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["gen-data", "--config", &cfg, "--seed", "5", "--out", a.to_str().unwrap()]);
    ok(&["gen-data", "--config", &cfg, "--seed", "5", "--out", b.to_str().unwrap()]);
    let fa = files(&a.join("data"));
    assert_eq!(fa.iter().filter(|(n, _)| n.ends_with(".bin")).count(), 8);
    // out differs between the two runs, and config.txt records it.
    let strip = |v: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> { v.into_iter().filter(|(n, _)| n != "config.txt").collect() };
    assert_eq!(strip(fa), strip(files(&b.join("data"))));

    let m: Manifest = serde_json::from_slice(&fs::read(a.join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!((m.frames, m.height, m.width, m.channels), (180, 36, 36, 3));
    let r = multideriv_core::render::SamplerRanges::default();
    for c in &m.clips {
        assert!(r.hr_bpm.contains(c.hr_bpm));
        assert!(r.hr_jitter.contains(c.hr_jitter));
        assert!(r.noise_sigma.contains(c.optics.noise_sigma));
        assert!(r.illumination.contains(c.optics.illumination));
        assert!(r.motion_amp.contains(c.optics.motion_amp));
        assert!(r.dicrotic_amp.contains(c.template.dicrotic_amp));
    }
    let bin = fs::read(a.join("data").join(&m.clips[0].tensor)).unwrap();
    assert_eq!(bin.len(), 32 + 4 * 180 * 36 * 36 * 3);
}

#[test]
fn train_eval_and_plots() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "model.fd_input = true\nmodel.sd_input = false\nmodel.fd_target = true\nmodel.sd_target = false\n");
    let out = tmp.path().join("o");
    let o = out.to_str().unwrap();
    ok(&["gen-data", "--config", &cfg, "--out", o]);
    ok(&["train", "--config", &cfg, "--out", o]);
    let loss: Vec<LossRow> = read_csv(&out.join("train/loss.csv")).unwrap();
    assert_eq!(loss.len(), 8);
    assert!(loss.iter().all(|r| r.mean_loss.is_finite()));
    let first = fs::read(out.join("train/loss.csv")).unwrap();
    ok(&["train", "--config", &cfg, "--out", o]);
    assert_eq!(fs::read(out.join("train/loss.csv")).unwrap(), first);

    let stdout = ok(&["eval", "--config", &cfg, "--out", o]);
    assert!(stdout.contains("HR MAE"));
    let text = fs::read_to_string(out.join("eval/report.json")).unwrap();
    let r: Report = serde_json::from_str(&text).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for k in ["hr_mae_bpm", "lvet_mae_ms"] {
        assert!(v[k]["mean"].is_number() && v[k]["std"].is_number(), "{k}");
    }
    assert_eq!(r.n_clips, 2);
    for f in ["bland_altman_hr.csv", "bland_altman_lvet.csv", "hr.csv", "lvet_series.csv"] {
        assert!(out.join("eval").join(f).exists(), "{f}");
    }

    ok(&["eval", "--config", &cfg, "--out", o, "--truth"]);
    let r: Report = serde_json::from_slice(&fs::read(out.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(r.hr_mae_bpm.unwrap().mean, 0.0);
    assert_eq!(r.lvet_mae_ms.unwrap().mean, 0.0);

    ok(&["export-plots", "--config", &cfg, "--out", o]);
    assert_eq!(
        fs::read(out.join("plots/lvet_series.csv")).unwrap(),
        fs::read(out.join("eval/lvet_series.csv")).unwrap()
    );
}

#[test]
fn errors_are_json_on_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("nothing");
    let o = run(&["train", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "IoError");
    assert!(err["message"].as_str().unwrap().contains("manifest.json"));

    let o = run(&["gen-data", "--set", "train.epochs=0"]);
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "ConfigError");

    let o = run(&["gen-data", "--set", "data.hr_bpm=90,60", "--out", out.to_str().unwrap()]);
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "InvalidRange");
}

#[test]
fn ablate_grid_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "train.epochs = 1\nablate.sd_input_rows = true\nmodel.input_size = 6\n");
    let out = tmp.path().join("o");
    let o = out.to_str().unwrap();
    ok(&["gen-data", "--config", &cfg, "--out", o]);
    ok(&["ablate", "--config", &cfg, "--out", o]);
    let rows: Vec<AblationRow> = read_csv(&out.join("ablate/ablation.csv")).unwrap();
    assert_eq!(rows.len(), 15);
    let header = fs::read_to_string(out.join("ablate/ablation.csv")).unwrap();
    assert!(header.starts_with(
        "arch,fd_input,sd_input,fd_target,sd_target,role,hr_mae_mean,hr_mae_std,lvet_mae_mean,lvet_mae_std"
    ));
    assert_eq!(rows.iter().filter(|r| r.role == "FD-Optimized").count(), 2);
    assert_eq!(rows.iter().filter(|r| r.role == "SD-Optimized").count(), 2);
    assert!(rows.iter().all(|r| r.failure.is_empty()));
}
