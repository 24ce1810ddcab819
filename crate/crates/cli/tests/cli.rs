use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn stq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stq"))
        .args(args)
        .output()
        .expect("run stq")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_idx_images(path: &Path, images: &[Vec<u8>]) {
    let mut b = Vec::new();
    b.extend(0x0803u32.to_be_bytes());
    b.extend((images.len() as u32).to_be_bytes());
    b.extend(28u32.to_be_bytes());
    b.extend(28u32.to_be_bytes());
    for img in images {
        b.extend(img);
    }
    fs::write(path, b).unwrap();
}

fn write_idx_labels(path: &Path, labels: &[u8]) {
    let mut b = Vec::new();
    b.extend(0x0801u32.to_be_bytes());
    b.extend((labels.len() as u32).to_be_bytes());
    b.extend(labels);
    fs::write(path, b).unwrap();
}

/// Digit `k` lights a 7x7 block whose position depends on `k`.
fn fake_digit(k: u8, jitter: usize) -> Vec<u8> {
    let mut img = vec![0u8; 28 * 28];
    let (r0, c0) = ((k as usize / 4) * 9 + jitter % 2, (k as usize % 4) * 7 + jitter % 3);
    for r in r0..(r0 + 7).min(28) {
        for c in c0..(c0 + 7).min(28) {
            img[r * 28 + c] = 255;
        }
    }
    img
}

fn mnist_fixture(dir: &Path, train: usize, test: usize) {
    for (prefix, n) in [("train", train), ("t10k", test)] {
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let images: Vec<Vec<u8>> = labels.iter().enumerate().map(|(i, &k)| fake_digit(k, i)).collect();
        write_idx_images(&dir.join(format!("{prefix}-images-idx3-ubyte")), &images);
        write_idx_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte")), &labels);
    }
}

struct Fixture {
    tmp: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let tmp = TempDir::new().unwrap();
        fs::create_dir(tmp.path().join("mnist")).unwrap();
        mnist_fixture(&tmp.path().join("mnist"), 200, 50);
        Fixture { tmp }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.tmp.path().join(rel)
    }

    fn config(&self, name: &str, train: &str) -> PathBuf {
        let text = format!(
            "out_dir = {:?}\n[data]\ndir = {:?}\n[train]\nepochs = 1\nbatch_size = 20\nlr_drop_epochs = []\n{train}\n",
            self.path("runs"),
            self.path("mnist"),
        );
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn train(&self, config: &Path, extra: &[&str]) -> (Output, PathBuf) {
        let mut args = vec!["train", "--config", config.to_str().unwrap()];
        args.extend(extra);
        let out = stq(&args);
        assert!(out.status.success(), "train failed: {}", stderr(&out));
        let line = stdout(&out)
            .lines()
            .find_map(|l| l.strip_prefix("run dir ").map(str::to_owned))
            .expect("run dir line");
        (out, PathBuf::from(line))
    }
}

fn printed_ratio(out: &Output) -> f64 {
    stdout(out)
        .lines()
        .find_map(|l| l.strip_prefix("compression ratio "))
        .expect("ratio line")
        .parse()
        .unwrap()
}

#[test]
fn train_eval_report_round() {
    let fx = Fixture::new();
    let cfg = fx.config("stq.toml", "");
    let (out, run) = fx.train(&cfg, &[]);
    let text = stdout(&out);
    assert!(text.contains("epoch   1"), "{text}");
    assert!(text.contains("depths "), "{text}");
    for f in [
        "config.toml",
        "model.stqw",
        "checkpoint.json",
        "report.json",
        "metrics.csv",
        "beta_trajectory.csv",
        "summary.txt",
        "summary.csv",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let ratio = printed_ratio(&out);
    assert!((16.0..=32.0).contains(&ratio), "{ratio}");

    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    let final_acc = report["quantized_accuracy"].as_f64().unwrap();

    let model = run.join("model.stqw");
    let ev = stq(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--data-dir",
        fx.path("mnist").to_str().unwrap(),
    ]);
    assert!(ev.status.success(), "{}", stderr(&ev));
    let line = stdout(&ev);
    assert!(line.contains("on test split"), "{line}");
    let correct: usize = line
        .split('(')
        .nth(1)
        .and_then(|s| s.split('/').next())
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(correct as f64 / 50.0, final_acc);

    let rep = stq(&["report", run.to_str().unwrap()]);
    assert!(rep.status.success(), "{}", stderr(&rep));
    for i in 0..5 {
        assert!(run.join(format!("report/layer{i}_hist.csv")).is_file());
    }
    let hist = fs::read_to_string(run.join("report/layer0_hist.csv")).unwrap();
    assert_eq!(hist.lines().next(), Some("bin_left,bin_right,count"));
    assert_eq!(hist.lines().count(), 101);
    assert!(stdout(&rep).contains("compression ratio"));
}

#[test]
fn baseline_ratios() {
    let fx = Fixture::new();
    let (twn, _) = fx.train(&fx.config("twn.toml", "mode = \"twn\""), &[]);
    assert_eq!(printed_ratio(&twn), 16.0);
    let (bwn, _) = fx.train(&fx.config("bwn.toml", "mode = \"bwn\""), &[]);
    assert_eq!(printed_ratio(&bwn), 32.0);
    let (fp, _) = fx.train(&fx.config("fp.toml", "mode = \"fp\""), &[]);
    assert_eq!(printed_ratio(&fp), 1.0);
}

#[test]
fn resolved_config_reproduces_the_model() {
    let fx = Fixture::new();
    let (_, first) = fx.train(&fx.config("a.toml", ""), &["--seed", "3"]);
    let echoed = first.join("config.toml");
    assert!(fs::read_to_string(&echoed).unwrap().contains("seed = 3"));
    let (_, second) = fx.train(&echoed, &[]);
    assert_ne!(first, second);
    assert_eq!(
        fs::read(first.join("model.stqw")).unwrap(),
        fs::read(second.join("model.stqw")).unwrap()
    );
}

#[test]
fn truncated_model_is_rejected() {
    let fx = Fixture::new();
    let (_, run) = fx.train(&fx.config("a.toml", ""), &[]);
    let bytes = fs::read(run.join("model.stqw")).unwrap();
    let bad = fx.path("bad.stqw");
    fs::write(&bad, &bytes[..bytes.len() / 2]).unwrap();
    let ev = stq(&[
        "eval",
        "--model",
        bad.to_str().unwrap(),
        "--data-dir",
        fx.path("mnist").to_str().unwrap(),
    ]);
    assert!(!ev.status.success());
    let err = stderr(&ev);
    assert!(err.contains("offset"), "{err}");
}

#[test]
fn bad_inputs_fail_cleanly() {
    let fx = Fixture::new();
    let bogus = fx.path("bogus.toml");
    fs::write(&bogus, "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = stq(&["train", "--config", bogus.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));

    let cfg = fx.config("a.toml", "");
    let out = stq(&["train", "--config", cfg.to_str().unwrap(), "--data-dir", fx.path("nowhere").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).starts_with("error: "));

    let out = stq(&["report", fx.path("runs").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("missing artifact"));
}
