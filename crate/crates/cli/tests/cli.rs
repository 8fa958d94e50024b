//! End-to-end tests of the `vgate` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::{array, Array3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::Value;
use tempfile::TempDir;

use vgate::ept::{write_ept, write_labels, Kind, LabelVector, PredictionTensor, Task};

fn vgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vgate"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = vgate(args);
    assert!(
        out.status.success(),
        "vgate {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn save(dir: &Path, name: &str, tensor: &PredictionTensor) -> PathBuf {
    let path = dir.join(name);
    write_ept(tensor, fs::File::create(&path).unwrap()).unwrap();
    path
}

fn save_labels(dir: &Path, name: &str, labels: &LabelVector) -> PathBuf {
    let path = dir.join(name);
    write_labels(labels, fs::File::create(&path).unwrap()).unwrap();
    path
}

/// Runs `synth` with `extra` flags under `dir/prefix`.
fn synth(dir: &Path, prefix: &str, extra: &[&str]) -> PathBuf {
    let base = dir.join(prefix);
    let mut args = vec!["synth", "--out", s(&base)];
    args.extend_from_slice(extra);
    ok(&args);
    base
}

fn file(base: &Path, suffix: &str) -> String {
    format!("{}{suffix}", base.display())
}

fn csv_rows(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn synth_static_writes_three_files_deterministically() {
    let dir = TempDir::new().unwrap();
    let flags = ["--samples", "40", "--classes", "5", "--members", "3", "--seed", "11"];
    let a = synth(dir.path(), "a", &flags);
    let b = synth(dir.path(), "b", &flags);
    for suffix in ["_probs.ept", "_logits.ept", "_labels.csv"] {
        let x = fs::read(file(&a, suffix)).unwrap();
        let y = fs::read(file(&b, suffix)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{suffix} differs between identical runs");
    }
    let c = synth(dir.path(), "c", &["--samples", "40", "--classes", "5", "--members", "3", "--seed", "12"]);
    assert_ne!(fs::read(file(&a, "_probs.ept")).unwrap(), fs::read(file(&c, "_probs.ept")).unwrap());
}

#[test]
fn synth_collapse_writes_one_file_per_epoch() {
    let dir = TempDir::new().unwrap();
    let base = synth(
        dir.path(),
        "run",
        &["--mode", "collapse", "--epochs", "10", "--decay", "0.3", "--samples", "10", "--classes", "3"],
    );
    let epochs: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("run_epoch"))
        .collect();
    assert_eq!(epochs.len(), 10);
    assert!(Path::new(&file(&base, "_epoch009.ept")).exists());
    assert!(Path::new(&file(&base, "_labels.csv")).exists());
}

#[test]
fn synth_rejects_invalid_config() {
    let dir = TempDir::new().unwrap();
    let out = vgate(&["synth", "--out", s(&dir.path().join("x")), "--s-noise=-1"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("s_noise"));
    assert!(out.stdout.is_empty());
}

#[test]
fn report_csv_format_contract() {
    let dir = TempDir::new().unwrap();
    let base = synth(dir.path(), "r", &["--samples", "25", "--classes", "4", "--members", "5"]);
    let out = ok(&["report", "--input", &file(&base, "_probs.ept"), "--k", "0.5,1,2,4"]);
    let text = stdout(&out);
    assert!(text.ends_with('\n') && !text.contains('\r'));
    let (header, rows) = csv_rows(&text);
    assert_eq!(rows.len(), 25);
    let gated: Vec<&String> = header.iter().filter(|h| h.contains("_gated_k")).collect();
    assert_eq!(gated.len(), 12, "four gated groups of three");
    for k in ["0.5", "1", "2", "4"] {
        assert!(header.contains(&format!("eu_gated_k{k}")));
    }
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row[0], i.to_string(), "rows sorted by sample");
        assert_eq!(row.len(), header.len());
        for (h, v) in header.iter().zip(row) {
            if h == "decision" {
                assert!(v == "uncertain" || v.starts_with("class:"));
                continue;
            }
            let x: f64 = v.parse().unwrap_or_else(|_| panic!("{h}={v} not numeric"));
            assert!(x.is_finite());
            let digits = v.trim_start_matches('-').split('e').next().unwrap().replace('.', "");
            assert!(digits.trim_start_matches('0').len() <= 9, "{h}={v} has more than 9 significant digits");
        }
    }
}

#[test]
fn report_collapsed_input_has_zero_eu_and_k_invariant_gating() {
    let dir = TempDir::new().unwrap();
    let base = synth(dir.path(), "z", &["--samples", "30", "--classes", "6", "--s-noise", "0"]);
    let out = ok(&["report", "--input", &file(&base, "_probs.ept"), "--k", "0.5,1,2,4", "--format", "json"]);
    for row in json(&out).as_array().unwrap() {
        assert!(row["eu"].as_f64().unwrap().abs() < 1e-12);
        for m in ["tu", "au", "eu"] {
            let first = row[format!("{m}_gated_k0.5")].as_f64().unwrap();
            for k in ["1", "2", "4"] {
                assert!((row[format!("{m}_gated_k{k}")].as_f64().unwrap() - first).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn report_json_keys_follow_csv_columns() {
    let dir = TempDir::new().unwrap();
    let base = synth(dir.path(), "j", &["--samples", "3", "--classes", "3"]);
    let labels = file(&base, "_labels.csv");
    let input = file(&base, "_probs.ept");
    let csv = ok(&["report", "--input", &input, "--labels", &labels, "--k", "1,2"]);
    let js = ok(&["report", "--input", &input, "--labels", &labels, "--k", "1,2", "--format", "json"]);
    let (header, _) = csv_rows(&stdout(&csv));
    let keys: Vec<String> = json(&js)[0].as_object().unwrap().keys().cloned().collect();
    assert_eq!(keys, header);
    assert_eq!(header.last().unwrap(), "correct");
}

#[test]
fn report_softmaxes_logits_with_notice() {
    let dir = TempDir::new().unwrap();
    let base = synth(dir.path(), "l", &["--samples", "8", "--classes", "3"]);
    let from_logits = ok(&["report", "--input", &file(&base, "_logits.ept")]);
    let from_probs = ok(&["report", "--input", &file(&base, "_probs.ept")]);
    assert!(stderr(&from_logits).contains("logits"));
    assert!(stderr(&from_probs).is_empty());
    assert_eq!(stdout(&from_logits), stdout(&from_probs));
}

#[test]
fn report_writes_output_file() {
    let dir = TempDir::new().unwrap();
    let base = synth(dir.path(), "o", &["--samples", "5", "--classes", "3"]);
    let dest = dir.path().join("report.csv");
    let out = ok(&["report", "--input", &file(&base, "_probs.ept"), "--output", s(&dest)]);
    assert!(out.stdout.is_empty());
    assert_eq!(fs::read_to_string(&dest).unwrap().lines().count(), 6);
}

#[test]
fn report_multilabel_rows_per_label() {
    let dir = TempDir::new().unwrap();
    let t = PredictionTensor::new(Kind::Probs, Task::Multilabel, array![[[0.9, 0.2, 0.5]], [[0.8, 0.4, 0.5]]]).unwrap();
    let input = save(dir.path(), "ml.ept", &t);
    let labels = save_labels(dir.path(), "ml.csv", &LabelVector::Multilabel(array![[1u8, 0, 1]]));
    let out = ok(&["report", "--input", s(&input), "--labels", s(&labels)]);
    let (header, rows) = csv_rows(&stdout(&out));
    assert_eq!(&header[..2], &["sample", "label"]);
    assert_eq!(rows.len(), 3);
    let decision = header.iter().position(|h| h == "decision").unwrap();
    let gmu = header.iter().position(|h| h == "gmu").unwrap();
    assert_eq!(rows[2][decision], "uncertain");
    assert_eq!(rows[2][gmu], "1");
}

#[test]
fn report_rejects_bad_k_and_missing_input() {
    let dir = TempDir::new().unwrap();
    let base = synth(dir.path(), "b", &["--samples", "4", "--classes", "3"]);
    for k in ["1,x", "-1", "0"] {
        let out = vgate(&["report", "--input", &file(&base, "_probs.ept"), "--k", k]);
        assert!(!out.status.success(), "--k {k} accepted");
        assert!(out.stdout.is_empty());
        assert!(!stderr(&out).is_empty());
    }
    let out = vgate(&["report", "--input", s(&dir.path().join("missing.ept"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("missing.ept"));
}

/// Expected small-noise slope of diversity in the logit noise scale,
/// estimated by Monte Carlo through the softmax Jacobian.
fn kappa(c: usize, m: usize, s_signal: f64, draws: usize) -> f64 {
    let mut rng = StdRng::seed_from_u64(1234);
    let mut normal = || {
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let mut total = 0.0;
    for _ in 0..draws {
        let z: Vec<f64> = (0..c).map(|_| s_signal * normal()).collect();
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        let sum: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / sum).collect();
        let g: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let eps: Vec<f64> = (0..c).map(|_| normal()).collect();
                let pe: f64 = p.iter().zip(&eps).map(|(a, b)| a * b).sum();
                (0..c).map(|j| p[j] * (eps[j] - pe)).collect()
            })
            .collect();
        let mut acc = 0.0;
        for j in 0..c {
            let mean = g.iter().map(|r| r[j]).sum::<f64>() / m as f64;
            acc += (g.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / m as f64).sqrt();
        }
        total += acc / c as f64;
    }
    total / draws as f64
}

#[test]
fn diversity_detects_collapse_near_analytic_crossing() {
    let dir = TempDir::new().unwrap();
    let (c, m, s0, tau, crossing) = (4usize, 8usize, 3.0, 1e-3, 8.0);
    let k = kappa(c, m, 1.0, 40_000);
    let decay = (k * s0 / tau).ln() / crossing;
    let base = synth(
        dir.path(),
        "col",
        &[
            "--mode", "collapse", "--epochs", "12", "--decay", &decay.to_string(),
            "--samples", "300", "--classes", &c.to_string(), "--members", &m.to_string(),
            "--s-noise", &s0.to_string(), "--seed", "5",
        ],
    );
    let inputs: Vec<String> = (0..12).map(|t| file(&base, &format!("_epoch{t:03}.ept"))).collect();
    let mut args = vec!["diversity", "--format", "json", "--inputs"];
    args.extend(inputs.iter().map(String::as_str));
    let out = ok(&args);
    let detected = json(&out)["collapse_epoch"].as_u64().expect("collapse detected");
    assert!((detected as f64 - crossing).abs() <= 1.0, "detected {detected}, analytic {crossing}");
    assert!(stderr(&out).contains(&format!("collapse epoch: {detected}")));

    args[2] = "csv";
    let (header, rows) = csv_rows(&stdout(&ok(&args)));
    assert_eq!(header, ["epoch", "diversity", "collapse"]);
    assert_eq!(rows.len(), 12);
    let flagged: Vec<&Vec<String>> = rows.iter().filter(|r| r[2] == "1").collect();
    assert_eq!(flagged.len(), 1);
    assert_eq!(flagged[0][0], detected.to_string());
}

#[test]
fn diversity_single_snapshot_above_tau() {
    let dir = TempDir::new().unwrap();
    let base = synth(dir.path(), "one", &["--samples", "20", "--classes", "3", "--s-noise", "1"]);
    let out = ok(&["diversity", "--inputs", &file(&base, "_probs.ept"), "--format", "json"]);
    assert!(json(&out)["collapse_epoch"].is_null());
    assert!(stderr(&out).contains("no collapse"));
}

#[test]
fn diversity_rejects_unordered_epochs() {
    let dir = TempDir::new().unwrap();
    let base = synth(
        dir.path(),
        "u",
        &["--mode", "collapse", "--epochs", "3", "--samples", "5", "--classes", "3"],
    );
    let out = vgate(&[
        "diversity",
        "--inputs",
        &file(&base, "_epoch002.ept"),
        &file(&base, "_epoch001.ept"),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("strictly increasing"));
}

#[test]
fn coverage_certain_correct_tensor() {
    let dir = TempDir::new().unwrap();
    let block = array![[0.8, 0.1, 0.1], [0.2, 0.7, 0.1], [0.1, 0.1, 0.8]];
    let data = ndarray::stack![ndarray::Axis(0), block, block];
    let t = PredictionTensor::new(Kind::Probs, Task::Multiclass, data).unwrap();
    let input = save(dir.path(), "c.ept", &t);
    let labels = save_labels(dir.path(), "c.csv", &LabelVector::Multiclass(vec![0, 1, 2]));
    let out = ok(&["coverage", "--input", s(&input), "--labels", s(&labels), "--k-grid", "0.5,1,10,1e6"]);
    let (header, rows) = csv_rows(&stdout(&out));
    assert_eq!(header, ["k", "decided", "coverage", "risk"]);
    for row in rows {
        assert_eq!((row[2].as_str(), row[3].as_str()), ("1", "0"));
    }
}

#[test]
fn coverage_huge_k_and_monotone_on_synthetic_suite() {
    let dir = TempDir::new().unwrap();
    let base = synth(dir.path(), "cov", &["--samples", "300", "--classes", "5", "--members", "6"]);
    let args = ["coverage", "--input", &file(&base, "_probs.ept"), "--labels", &file(&base, "_labels.csv")];
    let (_, rows) = csv_rows(&stdout(&ok(&[&args[..], &["--k-grid", "0.1:3:0.1"]].concat())));
    assert_eq!(rows.len(), 30);
    let coverage: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(coverage.windows(2).all(|w| w[1] <= w[0]), "{coverage:?}");

    let (_, rows) = csv_rows(&stdout(&ok(&[&args[..], &["--k-grid", "1e9"]].concat())));
    assert_eq!(rows[0][1..], ["0", "0", "NA"]);
}

#[test]
fn calibrate_recovers_scaled_temperature() {
    let dir = TempDir::new().unwrap();
    let base = synth(
        dir.path(),
        "cal",
        &["--samples", "10000", "--classes", "10", "--members", "1", "--s-signal", "2", "--s-noise", "0", "--logit-scale", "2.5"],
    );
    let probs_out = dir.path().join("calibrated.ept");
    let out = ok(&[
        "calibrate", "--input", &file(&base, "_logits.ept"), "--labels", &file(&base, "_labels.csv"),
        "--output-probs", s(&probs_out),
    ]);
    let fit = json(&out);
    let t = fit["temperatures"][0].as_f64().unwrap();
    assert!((t - 2.5).abs() / 2.5 < 0.05, "recovered {t}");
    assert!(fit["nll_after"].as_f64().unwrap() <= fit["nll_before"].as_f64().unwrap());
    assert_eq!(fit["scope"], "global");
    let calibrated = vgate::ept::read_ept(fs::File::open(&probs_out).unwrap()).unwrap();
    assert_eq!(calibrated.kind(), Kind::Probs);
}

#[test]
fn calibrate_rejects_probs() {
    let dir = TempDir::new().unwrap();
    let base = synth(dir.path(), "p", &["--samples", "5", "--classes", "3"]);
    let out = vgate(&["calibrate", "--input", &file(&base, "_probs.ept"), "--labels", &file(&base, "_labels.csv")]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("calibration requires logits"));
    assert!(out.stdout.is_empty());
}

#[test]
fn calibrate_per_member_reports_each_temperature() {
    let dir = TempDir::new().unwrap();
    let base = synth(dir.path(), "pm", &["--samples", "200", "--classes", "4", "--members", "3"]);
    let out = ok(&[
        "calibrate", "--input", &file(&base, "_logits.ept"), "--labels", &file(&base, "_labels.csv"), "--per-member",
    ]);
    let fit = json(&out);
    assert_eq!(fit["temperatures"].as_array().unwrap().len(), 3);
    assert_eq!(fit["scope"], "per_member");
}

#[test]
fn ood_separates_collapsed_from_disagreeing() {
    let dir = TempDir::new().unwrap();
    let id = synth(dir.path(), "id", &["--samples", "300", "--s-signal", "5", "--s-noise", "0.001", "--seed", "1"]);
    let ood = synth(dir.path(), "ood", &["--samples", "300", "--s-signal", "0.5", "--s-noise", "2", "--seed", "2"]);
    let out = ok(&["ood", "--id", &file(&id, "_probs.ept"), "--ood", &file(&ood, "_probs.ept")]);
    let aucs = json(&out);
    let names: Vec<&String> = aucs.as_object().unwrap().keys().collect();
    assert_eq!(names, ["tu", "au", "eu", "epce", "epkl", "epjs", "gmu", "tu_gated", "au_gated", "eu_gated"]);
    for m in ["eu", "epkl", "gmu"] {
        assert!(aucs[m].as_f64().unwrap() >= 0.95, "{m}: {}", aucs[m]);
    }
}

#[test]
fn ood_identical_files_near_chance() {
    let dir = TempDir::new().unwrap();
    let base = synth(dir.path(), "same", &["--samples", "200"]);
    let p = file(&base, "_probs.ept");
    let out = ok(&["ood", "--id", &p, "--ood", &p, "--measure", "eu,gmu"]);
    let aucs = json(&out);
    assert_eq!(aucs.as_object().unwrap().len(), 2);
    for m in ["eu", "gmu"] {
        assert!((aucs[m].as_f64().unwrap() - 0.5).abs() <= 0.05);
    }
    let out = vgate(&["ood", "--id", &p, "--ood", &p, "--measure", "entropy"]);
    assert!(!out.status.success());
}

#[test]
fn unreadable_container_reports_typed_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("junk.ept");
    fs::write(&path, b"JUNKJUNK").unwrap();
    let out = vgate(&["report", "--input", s(&path)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("magic"));
    let t = PredictionTensor::new(Kind::Probs, Task::Multiclass, Array3::from_elem((1, 2, 2), 0.5)).unwrap();
    let input = save(dir.path(), "two.ept", &t);
    let labels = dir.path().join("short.csv");
    fs::write(&labels, "0\n").unwrap();
    let out = vgate(&["report", "--input", s(&input), "--labels", s(&labels)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("records"));
}
