use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use distillkit_cli::ablation;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_distillkit"));
    c.env_remove("DISTILLKIT_OUT").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn number_after(text: &str, key: &str) -> f64 {
    let rest = &text[text.find(key).unwrap_or_else(|| panic!("'{key}' missing in:\n{text}")) + key.len()..];
    rest.split_whitespace().next().unwrap().parse().unwrap()
}

/// 16x16 synthetic run that trains in a few seconds.
fn tiny_config(dir: &Path, name: &str, lambda: f64) -> PathBuf {
    let text = format!(
        r#"
name = "{name}"

[data]
source = "synthetic"
input_hw = [16, 16]

[data.synthetic]
classes = 3
train_per_class = 6
test_total = 6

[student]
stem_channels = 4
lambda = {lambda}
stages = [
    {{ out_channels = 8, blocks = 2, stride = 2 }},
    {{ out_channels = 16, blocks = 2, stride = 2 }},
]

[teacher]
width = 0.125
plan = [[64], [128]]

[teacher_train]
epochs = 2

[train]
epochs = 2
batch_size = 8

[ablate]
seeds = [0, 1]
"#
    );
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn analyze_student_prints_millions_to_two_decimals() {
    let o = run(&["analyze", "--builtin", "student"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("Params (M): 2.36  FLOPs (M): "), "{text}");
}

#[test]
fn analyze_stage_pair_ratio() {
    let half = stdout(&run(&["analyze", "--builtin", "stage", "--stage-n", "4", "--stage-lambda", "0.5"]));
    let r = number_after(&half, "r_p empirical");
    assert!((r - 2.0).abs() / 2.0 <= 0.05, "{half}");
    let zero = stdout(&run(&["analyze", "--builtin", "stage", "--stage-n", "4", "--stage-lambda", "0"]));
    assert_eq!(number_after(&zero, "r_p empirical"), 1.0, "{zero}");
}

#[test]
fn input_hw_scales_macs() {
    let at = |h: &str| {
        let o = run(&["analyze", "--builtin", "desk-student", "--input-hw", h, h]);
        assert!(o.status.success(), "{}", stderr(&o));
        number_after(&stdout(&o), "total FLOPs:")
    };
    let ratio = at("64") / at("32");
    assert!(ratio > 3.95 && ratio <= 4.0, "ratio {ratio}");
}

#[test]
fn graph_file_roundtrip_and_malformed_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.txt");
    let o = run(&["analyze", "--builtin", "desk-student", "--write", path.to_str().unwrap()]);
    assert!(o.status.success());
    let from_file = run(&["analyze", path.to_str().unwrap(), "--input-hw", "32", "32"]);
    assert!(from_file.status.success(), "{}", stderr(&from_file));
    assert!(stdout(&from_file).contains("Params (M): 0.05"));
    assert!(stdout(&from_file).contains("agreement within 5%: ok"));

    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let at = lines.iter().position(|l| l.contains(" conv2d ")).unwrap();
    lines[at] = lines[at].replace(" conv2d ", " conv9d ");
    fs::write(&path, lines.join("\n")).unwrap();
    let o = run(&["analyze", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(&format!("line {}", at + 1)), "{}", stderr(&o));
}

#[test]
fn missing_dataset_root_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "t", 0.5);
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--dataset-root", "/no/such/images"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/images"), "{}", stderr(&o));
}

#[test]
fn bad_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "name = \"x\"\n[train]\nlr = -1.0\n").unwrap();
    let o = run(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("config field train"), "{}", stderr(&o));
    fs::write(&path, "name = \"x\"\n[train]\nlerning_rate = 1.0\n").unwrap();
    let o = run(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lerning_rate"), "{}", stderr(&o));
}

#[test]
fn eval_without_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "t", 0.5);
    let o = run(&["eval", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("run train first"));
}

#[test]
fn diverging_run_exits_with_runtime_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "t", 0.5);
    let text = fs::read_to_string(&cfg).unwrap().replace("batch_size = 8", "batch_size = 8\nlr = 1e12\nmomentum = 0.99");
    fs::write(&cfg, text).unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn train_rerun_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let small = tiny_config(dir.path(), "small", 0.5);
    let wide = tiny_config(dir.path(), "wide", 0.25);
    for cfg in [&wide, &small] {
        let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    // Same seed in a fresh output root gives the same history.
    let again = dir.path().join("again");
    let o = run(&["train", "--config", small.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(
        fs::read(out.join("small-seed0/history.csv")).unwrap(),
        fs::read(again.join("small-seed0/history.csv")).unwrap()
    );

    let report = |dest: &Path| {
        let o = run(&["report", out.to_str().unwrap(), "--out", dest.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    let table = report(&r1);
    report(&r2);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3, "{table}");
    assert!(lines[0].starts_with("Model") && lines[0].contains("Params (M)"));
    let col = |l: &str| l.find("Params (M)").unwrap();
    assert!(col(lines[0]) < lines[0].find("FLOPs (M)").unwrap());
    assert!(lines[1].starts_with("small-seed0") && lines[2].starts_with("wide-seed0"), "{table}");
    for f in ["report.txt", "report.csv", "curves_small-seed0.svg", "curves_wide-seed0.svg"] {
        let a = fs::read(r1.join("report").join(f)).unwrap();
        assert_eq!(a, fs::read(r2.join("report").join(f)).unwrap(), "{f} differs between reruns");
    }

    let empty = tempfile::tempdir().unwrap();
    let o = run(&["report", empty.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablation_table_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "abl", 0.5);
    let o = run(&["ablate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let base = dir.path().join("abl-ablate");
    let text = fs::read_to_string(base.join("ablation.txt")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).take_while(|l| !l.is_empty()).collect();
    assert_eq!(rows.len(), 3, "{text}");
    let marks: Vec<(&str, &str)> = rows
        .iter()
        .map(|r| {
            let mut it = r.split_whitespace();
            (it.next().unwrap(), it.next().unwrap())
        })
        .collect();
    assert_eq!(marks, [("×", "×"), ("✓", "×"), ("✓", "✓")]);
    let params = |r: &str| r.split_whitespace().nth(2).unwrap().to_string();
    assert_eq!(params(rows[1]), params(rows[2]));
    assert_eq!(rows[2].split_whitespace().nth(3).unwrap().split('/').count(), 2);
    let csv = fs::read_to_string(base.join("ablation.csv")).unwrap();
    let parsed = ablation::from_csv(&csv).unwrap();
    assert_eq!(parsed[1].params, parsed[2].params);
    assert_eq!(ablation::to_csv(&parsed).unwrap(), csv);
}
