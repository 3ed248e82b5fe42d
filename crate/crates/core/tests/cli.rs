use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_flowforge");

fn write_config(dir: &Path, space: &str, trainer: &str) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        r#"seed = 5
output_dir = "{}"

[flow_space]
{space}

[oracle.synthetic]

{trainer}
"#,
        dir.join("run").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

const SIX_BY_TWO: &str = r#"transformations = ["b", "rw", "rwz", "rf", "rfz", "rs"]
repetition = 2"#;

const TINY_TRAINER: &str = r#"[trainer]
initial_threshold = 40
retrain_interval = 20
training_budget = 80
sample_count = 150
class_count = 3
output_count = 5
percentiles = [20.0, 80.0]
parallelism = 2

[trainer.architecture]
conv_filters = 2
local_filters = 0
dense_units = 8

[trainer.training]
steps = 30
log_interval = 10
"#;

fn flowforge(args: &[&dyn AsRef<std::ffi::OsStr>]) -> Output {
    let mut cmd = Command::new(BIN);
    for a in args {
        cmd.arg(a);
    }
    cmd.env("RUST_LOG", "warn").env_remove("FLOWFORGE_SEED").output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).trim().to_string()
}

fn count_for(space: &str) -> String {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), space, "");
    let out = flowforge(&[&"count", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    stdout(&out)
}

#[test]
fn count_prints_exact_integers() {
    assert_eq!(count_for(SIX_BY_TWO), "7484400");
    let four_reps = r#"transformations = ["b", "rw", "rwz", "rf", "rfz", "rs"]
repetition = 4"#;
    assert_eq!(count_for(four_reps), "3246670537110000");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "transformations = []\nrepetition = 1", "");
    assert_eq!(flowforge(&[&"count", &cfg]).status.code(), Some(2));
    let missing = dir.path().join("absent.toml");
    assert_eq!(flowforge(&[&"count", &missing]).status.code(), Some(2));
}

#[test]
fn stages_out_of_order_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SIX_BY_TWO, TINY_TRAINER);
    for stage in ["predict", "train", "select", "evaluate"] {
        let out = flowforge(&[&stage, &cfg]);
        assert_eq!(out.status.code(), Some(3), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(flowforge(&[&"report", &dir.path().join("run")]).status.code(), Some(3));
}

#[test]
fn a_locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SIX_BY_TWO, TINY_TRAINER);
    std::fs::create_dir_all(dir.path().join("run")).unwrap();
    std::fs::write(dir.path().join("run/.lock"), "").unwrap();
    let out = flowforge(&[&"sample", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn csv_rows(path: &Path) -> Vec<String> {
    read(path).lines().map(str::to_string).collect()
}

#[test]
fn stage_by_stage_matches_the_files_of_a_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let trainer = TINY_TRAINER.replace("initial_threshold = 40", "initial_threshold = 80");
    let cfg = write_config(dir.path(), SIX_BY_TWO, &trainer);
    let run = dir.path().join("run");
    let staged = dir.path().join("staged");

    assert!(flowforge(&[&"run", &cfg]).status.success());
    let steps: [&[&str]; 5] = [&["sample"], &["evaluate"], &["train"], &["predict"], &["select"]];
    for step in steps {
        let mut args: Vec<&dyn AsRef<std::ffi::OsStr>> = step.iter().map(|s| s as _).collect();
        args.push(&cfg);
        args.push(&"--out");
        args.push(&staged);
        let out = flowforge(&args);
        assert!(out.status.success(), "{step:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for file in [
        "training_flows.txt",
        "sample_flows.txt",
        "dataset.jsonl",
        "model.json",
        "class_model.json",
        "predictions.csv",
        "angel_flows.csv",
        "devil_flows.csv",
    ] {
        assert_eq!(read(&run.join(file)), read(&staged.join(file)), "{file}");
    }
}

#[test]
fn run_then_report_writes_the_analysis_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SIX_BY_TWO, TINY_TRAINER);
    let out = flowforge(&[&"run", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    let out = flowforge(&[&"report", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let scatter = csv_rows(&run.join("qor_scatter.csv"));
    assert_eq!(scatter[0], "flow,delay,area,true_class");
    assert_eq!(scatter.len(), 1 + 150);
    let selected = csv_rows(&run.join("selected_flows.csv"));
    assert_eq!(selected[0], "flow,kind,delay,area");
    assert_eq!(selected.len(), 1 + 10);
    assert_eq!(selected.iter().filter(|r| r.contains(",delay-angel,")).count(), 5);
    assert_eq!(selected.iter().filter(|r| r.contains(",delay-devil,")).count(), 5);
    let trace = csv_rows(&run.join("accuracy_trace.csv"));
    assert_eq!(trace[0], "cycle,labels_used,wall_seconds,accuracy");
    let labels: Vec<&str> = trace[1..].iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(labels, ["40", "60", "80"]);
    assert_eq!(std::fs::read_dir(run.join("cycles")).unwrap().count(), 3);

    // every scatter value parses back to the same float
    for row in &scatter[1..] {
        for field in row.split(',').skip(1).take(2) {
            let v: f64 = field.parse().unwrap();
            assert_eq!(v.to_string(), field);
        }
    }
    assert!(read(&run.join("qor_scatter.csv")).find("\r\n").is_none());
}

#[test]
fn the_config_snapshot_replays_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SIX_BY_TWO, TINY_TRAINER);
    assert!(flowforge(&[&"run", &cfg]).status.success());
    let first = dir.path().join("run");
    let replay = dir.path().join("replay");
    let snapshot = first.join("config.toml");
    assert!(flowforge(&[&"run", &snapshot, &"--out", &replay]).status.success());
    for file in [
        "dataset.jsonl",
        "model.json",
        "predictions.csv",
        "angel_flows.csv",
        "devil_flows.csv",
        "accuracy.json",
        "sample_qor.jsonl",
    ] {
        assert_eq!(read(&first.join(file)), read(&replay.join(file)), "{file}");
    }
}

#[test]
fn seed_variable_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SIX_BY_TWO, TINY_TRAINER);
    let run = dir.path().join("run");
    let sample = |seed: Option<&str>| {
        let mut cmd = Command::new(BIN);
        cmd.arg("sample").arg(&cfg).env("RUST_LOG", "warn");
        match seed {
            Some(s) => cmd.env("FLOWFORGE_SEED", s),
            None => cmd.env_remove("FLOWFORGE_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        (read(&run.join("sample_flows.txt")), read(&run.join("config.toml")))
    };
    let (base, _) = sample(None);
    let (same, _) = sample(Some("5"));
    let (other, snapshot) = sample(Some("6"));
    assert_eq!(base, same);
    assert_ne!(base, other);
    assert!(snapshot.contains("seed = 6"));
    let bad = Command::new(BIN)
        .arg("count")
        .arg(&cfg)
        .env("FLOWFORGE_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
