use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kmaxseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kmaxseg")).args(args).current_dir(cwd).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn sorted_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    names
}

#[test]
fn generate_writes_pairs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| ["generate", "--out", out, "--count", "5", "--shape", "16,16,16", "--classes", "3", "--seed", "2"];
    assert_eq!(code(&kmaxseg(&args("a"), dir.path())), 0);
    assert_eq!(code(&kmaxseg(&args("b"), dir.path())), 0);
    let names = sorted_files(&dir.path().join("a"));
    let volumes = names.iter().filter(|n| n.ends_with(".json") && n.starts_with("case_") && !n.contains("_mask")).count();
    let masks = names.iter().filter(|n| n.ends_with("_mask.json")).count();
    assert_eq!((volumes, masks), (5, 5));
    assert!(names.contains(&"index.json".to_string()));
    assert_eq!(names, sorted_files(&dir.path().join("b")));
    for n in &names {
        assert_eq!(fs::read(dir.path().join("a").join(n)).unwrap(), fs::read(dir.path().join("b").join(n)).unwrap(), "{n}");
    }
}

#[test]
fn argument_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let four = kmaxseg(&["generate", "--out", "x", "--count", "1", "--shape", "16,16,16", "--classes", "4"], dir.path());
    assert_eq!(code(&four), 2, "{}", stderr(&four));
    let unknown = kmaxseg(&["generate", "--out", "x", "--count", "1", "--shape", "16,16,16", "--colour"], dir.path());
    assert_eq!(code(&unknown), 2);
    let shape = kmaxseg(&["generate", "--out", "x", "--count", "1", "--shape", "16,16"], dir.path());
    assert_eq!(code(&shape), 2);
}

#[test]
fn unwritable_output_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("blocker"), "").unwrap();
    let out = kmaxseg(&["generate", "--out", "blocker/data", "--count", "1", "--shape", "16,16,16"], dir.path());
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("blocker"), "{}", stderr(&out));
}

#[test]
fn malformed_config_reports_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), "{\n  \"steps\": 1,\n  \"stepz\": 2\n}\n").unwrap();
    let out = kmaxseg(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(code(&out), 4);
    let err = stderr(&out);
    assert!(err.contains("line 3") && err.contains("stepz"), "{err}");
}

const TINY: &str = r#"{
  "data": {"kind": "directory", "path": "data"},
  "model": {"base_width": 2, "channels": 4, "num_queries": 4, "num_classes": 2, "crop": [16, 16, 16]},
  "labeled_fraction": 0.5,
  "steps": 3
}"#;

#[test]
fn train_eval_plot_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for (split, count) in [("train", "2"), ("val", "1")] {
        let out = format!("data/{split}");
        let args = ["generate", "--out", out.as_str(), "--count", count, "--shape", "16,16,16", "--classes", "2", "--seed", "1"];
        assert_eq!(code(&kmaxseg(&args, p)), 0);
    }
    fs::write(p.join("tiny.json"), TINY).unwrap();
    let train = kmaxseg(&["train", "--config", "tiny.json", "--out", "run"], p);
    assert_eq!(code(&train), 0, "{}", stderr(&train));
    let run = p.join("run");
    for f in ["config.json", "loss.csv", "eval.csv", "metrics.csv", "metrics.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap().lines().count(), 4);

    let eval = kmaxseg(&["eval", "--checkpoint", "run/checkpoint", "--data", "data/val", "--config", "tiny.json"], p);
    assert_eq!(code(&eval), 0, "{}", stderr(&eval));
    assert!(String::from_utf8_lossy(&eval.stdout).starts_with("dice "));
    assert!(run.join("checkpoint/eval/metrics.json").exists());

    fs::write(p.join("other.json"), TINY.replace("\"steps\": 3", "\"steps\": 4")).unwrap();
    let mismatch = kmaxseg(&["eval", "--checkpoint", "run/checkpoint", "--data", "data/val", "--config", "other.json"], p);
    assert_eq!(code(&mismatch), 6);
    assert!(stderr(&mismatch).contains("hashes"), "{}", stderr(&mismatch));

    let missing = kmaxseg(&["eval", "--checkpoint", "nowhere", "--data", "data/val"], p);
    assert_eq!(code(&missing), 3);

    assert_eq!(code(&kmaxseg(&["plot", "--run", "run", "--out", "plots/loss.svg"], p)), 0);
    let first: Vec<Vec<u8>> = ["loss.svg", "loss_metrics.svg"].iter().map(|f| fs::read(p.join("plots").join(f)).unwrap()).collect();
    assert!(first.iter().all(|b| b.len() > 1000 && String::from_utf8_lossy(b).contains("<svg")));
    assert_eq!(code(&kmaxseg(&["plot", "--run", "run", "--out", "plots/loss.svg"], p)), 0);
    let second: Vec<Vec<u8>> = ["loss.svg", "loss_metrics.svg"].iter().map(|f| fs::read(p.join("plots").join(f)).unwrap()).collect();
    assert_eq!(first, second);
}
