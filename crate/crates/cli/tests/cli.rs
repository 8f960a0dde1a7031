use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowscale_climate::{GridDataset, Variable};

fn flowscale(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowscale"))
        .args(args)
        .env("FLOWSCALE_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic 8×8 bumps and their 4×4 block means under `root/data`.
fn synth(root: &Path, samples: usize) -> (PathBuf, PathBuf) {
    let cfg = root.join("synth.json");
    fs::write(&cfg, r#"{"height": 8, "width": 8, "factor": 2}"#).unwrap();
    ok(&flowscale(&["synth", "--config", s(&cfg), "--samples", &samples.to_string(), "--seed", "3", "--output-dir", "data"], root));
    (root.join("data/low.fgrd"), root.join("data/high.fgrd"))
}

fn write_config(root: &Path, name: &str, output_dir: &str, extra: &str) -> PathBuf {
    let text = format!(
        r#"{{
  "data": {{"x": "data/low.fgrd", "y": "data/high.fgrd", "x_range": {{"start": 0, "end": 30}}, "y_range": {{"start": 10, "end": 40}}}},
  "model": {{"levels": 2, "steps": 1, "hidden": 4, "critic_widths": [4, 1], "shared_init": true}},
  "train": {{"batch_size": 4, "total_steps": 6, "critic_ratio": 1, "init_batch": 8, "lr_flow": 1e-3, "lr_critic": 1e-3, "lambda_x": 0.1, "lambda_y": 0.1, "noise_x": 0.02}},
  "output_dir": "{output_dir}"{extra}
}}"#
    );
    let path = root.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn trained(root: &Path) -> PathBuf {
    synth(root, 40);
    let cfg = write_config(root, "run.json", "run", "");
    ok(&flowscale(&["train", s(&cfg)], root));
    root.join("run/model.ckpt")
}

#[test]
fn missing_data_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.json", "run", "");
    let out = flowscale(&["train", s(&cfg)], dir.path());
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("data/low.fgrd"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 40);
    let cfg = write_config(dir.path(), "bad.json", "run", r#", "learning_rate": 0.1"#);
    assert_eq!(code(&flowscale(&["train", s(&cfg)], dir.path())), 2);
    let cfg = write_config(dir.path(), "bad2.json", "run", r#", "cv": {"holdout": 10, "val_len": 5, "window": 30, "k": 2, "fold": 4}"#);
    assert_eq!(code(&flowscale(&["train", s(&cfg)], dir.path())), 2);
    assert_eq!(code(&flowscale(&["train", "/nonexistent/run.json"], dir.path())), 2);
    assert_eq!(code(&flowscale(&["downscale", "--model", "m"], dir.path())), 2);
}

#[test]
fn training_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let model = trained(root);
    assert!(model.exists());
    for f in ["history.csv", "config.resolved.json", "provenance.json"] {
        assert!(root.join("run").join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(root.join("run/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 7);
    assert!(history.starts_with("step,mle_x,mle_y"));

    let again = write_config(root, "again.json", "again", "");
    ok(&flowscale(&["train", s(&again)], root));
    assert_eq!(fs::read(root.join("again/history.csv")).unwrap(), history.as_bytes());
    assert_eq!(fs::read(root.join("again/model.ckpt")).unwrap(), fs::read(&model).unwrap());

    // the resolved snapshot reruns the same experiment from anywhere
    let snapshot = fs::read_to_string(root.join("run/config.resolved.json")).unwrap();
    let moved = root.join("elsewhere");
    fs::create_dir(&moved).unwrap();
    let snapshot = snapshot.replace(s(&root.canonicalize().unwrap().join("run")), s(&moved.join("rerun")));
    fs::write(moved.join("cfg.json"), snapshot).unwrap();
    ok(&flowscale(&["train", s(&moved.join("cfg.json"))], root));
    assert_eq!(fs::read_to_string(moved.join("rerun/history.csv")).unwrap(), history);

    let other = write_config(root, "other.json", "other", "");
    ok(&flowscale(&["train", s(&other), "--seed", "9"], root));
    assert_ne!(fs::read_to_string(root.join("other/history.csv")).unwrap(), history);
}

#[test]
fn resume_reproduces_the_remaining_history() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    synth(root, 40);
    let full = write_config(root, "full.json", "full", r#", "checkpoint_every": 3"#);
    ok(&flowscale(&["train", s(&full)], root));
    let part = write_config(root, "part.json", "part", "");
    ok(&flowscale(&["train", s(&part), "--resume", s(&root.join("full/checkpoints/step-3.ckpt"))], root));
    let a = fs::read_to_string(root.join("full/history.csv")).unwrap();
    let b = fs::read_to_string(root.join("part/history.csv")).unwrap();
    // a fresh output directory starts without the first three rows
    assert_eq!(b.lines().skip(1).collect::<Vec<_>>(), a.lines().skip(4).collect::<Vec<_>>());
    assert_eq!(fs::read(root.join("part/model.ckpt")).unwrap(), fs::read(root.join("full/model.ckpt")).unwrap());
}

#[test]
fn downscale_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let model = trained(root);
    let low = root.join("data/low.fgrd");
    let args = |out: &str, t: &str, n: &str| {
        vec!["downscale".to_string(), "--model".into(), s(&model).into(), "--input".into(), s(&low).into(), "--output".into(), out.into(), "--temperature".into(), t.into(), "--samples".into(), n.into()]
    };
    let run = |a: Vec<String>| flowscale(&a.iter().map(String::as_str).collect::<Vec<_>>(), root);
    ok(&run(args("pred/a.fgrd", "0", "1")));
    ok(&run(args("pred/b.fgrd", "0", "1")));
    let a = fs::read(root.join("pred/a.fgrd")).unwrap();
    assert_eq!(a, fs::read(root.join("pred/b.fgrd")).unwrap());
    let pred = GridDataset::decode(&a).unwrap();
    let high = GridDataset::read(root.join("data/high.fgrd")).unwrap();
    assert_eq!((pred.height, pred.width, pred.len()), (8, 8, 40));
    assert_eq!((pred.variable, pred.units.as_str()), (high.variable, high.units.as_str()));
    assert_eq!(pred.dates, GridDataset::read(&low).unwrap().dates);
    // physical units: the prediction sits on the truth's scale, not the unit normal one
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean(&pred.values) - mean(&high.values)).abs() < 0.5 * mean(&high.values).abs().max(0.1));

    let listed = ok(&run(args("samples/s.fgrd", "0.7", "5")));
    let files: Vec<&str> = listed.lines().collect();
    assert_eq!(files.len(), 5);
    let bytes: Vec<Vec<u8>> = files.iter().map(|f| fs::read(f).unwrap()).collect();
    for i in 0..5 {
        for j in i + 1..5 {
            assert_ne!(bytes[i], bytes[j]);
        }
    }
    assert_eq!(code(&run(vec!["downscale".into(), "--model".into(), s(&model).into(), "--input".into(), s(&root.join("data/high.fgrd")).into(), "--output".into(), "x.fgrd".into()])), 3);
}

#[test]
fn sample_and_interpolate() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let model = trained(root);
    ok(&flowscale(&["sample", "--model", s(&model), "-n", "4", "--seed", "2", "--output-dir", "s1"], root));
    ok(&flowscale(&["sample", "--model", s(&model), "-n", "4", "--seed", "2", "--output-dir", "s2"], root));
    for f in ["samples_x.fgrd", "samples_y.fgrd"] {
        let a = fs::read(root.join("s1").join(f)).unwrap();
        assert_eq!(a, fs::read(root.join("s2").join(f)).unwrap());
        assert_eq!(GridDataset::decode(&a).unwrap().len(), 4);
    }

    let high = root.join("data/high.fgrd");
    ok(&flowscale(&["interpolate", "--model", s(&model), "--data", s(&high), "--from", "3", "--to", "17", "--steps", "6", "--output-dir", "interp"], root));
    let y = GridDataset::read(root.join("interp/interp_y.fgrd")).unwrap();
    let x = GridDataset::read(root.join("interp/interp_x.fgrd")).unwrap();
    assert_eq!((y.len(), x.len()), (6, 6));
    let truth = GridDataset::read(&high).unwrap();
    for (frame, t) in [(0, 3), (5, 17)] {
        for (a, b) in y.field(frame).iter().zip(truth.field(t)) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
    let out = flowscale(&["interpolate", "--model", s(&model), "--data", s(&high), "--from", "0", "--to", "400"], root);
    assert_eq!(code(&out), 3);
}

#[test]
fn evaluate_reports() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (_, high) = synth(root, 70);
    ok(&flowscale(&["evaluate", "--pred", s(&high), "--truth", s(&high), "--output", "self"], root));
    let metrics = fs::read_to_string(root.join("self.metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("prediction,rmse,bias,corr,excluded_cells"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!((row[1], row[2], row[3]), ("0.0", "0.0", "1.0"));
    let climdex = fs::read_to_string(root.join("self.climdex.csv")).unwrap();
    assert!(climdex.starts_with("prediction,index,bias,bias_spread,corr\n"));
    assert_eq!(climdex.lines().count(), 3);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(root.join("self.json")).unwrap()).unwrap();
    assert_eq!(json["sparse"], false);

    let rain_cfg = root.join("rain.json");
    fs::write(&rain_cfg, r#"{"height": 8, "width": 8, "factor": 2, "variable": "precipitation"}"#).unwrap();
    ok(&flowscale(&["synth", "--config", s(&rain_cfg), "--samples", "62", "--output-dir", "rain"], root));
    let rain = root.join("rain/high.fgrd");
    ok(&flowscale(&["evaluate", "--pred", s(&rain), "--truth", s(&rain), "--format", "json", "--output", "rain-report"], root));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(root.join("rain-report.json")).unwrap()).unwrap();
    assert_eq!(json["sparse"], true);
    assert_eq!(json["climdex"].as_array().unwrap().len(), 5);
    assert!(!root.join("rain-report.metrics.csv").exists());

    // a prediction starting after the truth's last day
    let late = GridDataset::read(&high).unwrap();
    let shifted = GridDataset { dates: flowscale_climate::daily_calendar(*late.dates.last().unwrap() + chrono::Days::new(1), late.len()), ..late };
    shifted.write(root.join("late.fgrd")).unwrap();
    assert_eq!(code(&flowscale(&["evaluate", "--pred", s(&root.join("late.fgrd")), "--truth", s(&high)], root)), 3);
}

#[test]
fn bcsd_fit_and_apply() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&flowscale(&["synth", "--kind", "bias", "--samples", "730", "--output-dir", "bias"], root));
    let (low, high) = (root.join("bias/low.fgrd"), root.join("bias/high.fgrd"));
    ok(&flowscale(&["bcsd", "fit", "--low", s(&low), "--high", s(&high), "--output", "m.bcsd"], root));
    ok(&flowscale(&["bcsd", "apply", "--model", s(&root.join("m.bcsd")), "--input", s(&low), "--output", "out.fgrd"], root));
    let out = GridDataset::read(root.join("out.fgrd")).unwrap();
    let truth = GridDataset::read(&high).unwrap();
    let rmse = (out.values.iter().zip(&truth.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / out.values.len() as f64).sqrt();
    let m = truth.values.iter().sum::<f64>() / truth.values.len() as f64;
    let std = (truth.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / truth.values.len() as f64).sqrt();
    assert!(rmse < 0.05 * std, "{rmse} vs {std}");

    // coarse data mapped onto itself comes back unchanged
    ok(&flowscale(&["bcsd", "fit", "--low", s(&low), "--high", s(&low), "--output", "id.bcsd"], root));
    ok(&flowscale(&["bcsd", "apply", "--model", s(&root.join("id.bcsd")), "--input", s(&low), "--output", "id.fgrd"], root));
    let id = GridDataset::read(root.join("id.fgrd")).unwrap();
    let input = GridDataset::read(&low).unwrap();
    assert!(id.values.iter().zip(&input.values).all(|(a, b)| (a - b).abs() < 1e-4));

    ok(&flowscale(&["synth", "--kind", "bias", "--samples", "40", "--output-dir", "short"], root));
    ok(&flowscale(&["bcsd", "fit", "--low", s(&root.join("short/low.fgrd")), "--high", s(&root.join("short/high.fgrd")), "--output", "short.bcsd"], root));
    let out = flowscale(&["bcsd", "apply", "--model", s(&root.join("short.bcsd")), "--input", s(&low), "--output", "x.fgrd"], root);
    assert_eq!(code(&out), 3);
}

#[test]
fn csv_conversion_and_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let csv = root.join("in.csv");
    fs::write(&csv, "time,row,col,value\n0,0,0,1.5\n0,0,1,0\n1,0,0,3\n1,0,1,4.25\n").unwrap();
    let printed = ok(&flowscale(&["convert-csv", "--input", s(&csv), "--variable", "precip", "--start", "2010-06-30", "--output", "nested/g.fgrd"], root));
    assert_eq!(PathBuf::from(printed.trim()), root.join("nested/g.fgrd"));
    let ds = GridDataset::read(root.join("nested/g.fgrd")).unwrap();
    assert_eq!((ds.variable, ds.units.as_str(), ds.values.clone()), (Variable::Precipitation, "mm/day", vec![1.5, 0.0, 3.0, 4.25]));
    assert_eq!(ds.dates[1].to_string(), "2010-07-01");
    fs::write(&csv, "time,row,col,value\n0,0,0,1\n0,1,1,2\n").unwrap();
    assert_eq!(code(&flowscale(&["convert-csv", "--input", s(&csv), "--variable", "tmax", "--output", "bad.fgrd"], root)), 3);
}
