//! End-to-end checks of the binary: dataset generation, the run artifact
//! set with its provenance stamps, output-root resolution, exit codes, and
//! report aggregation. Everything runs on desk-sized configurations inside
//! temporary directories.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn itl(cwd: &Path, out_root: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_itl"));
    cmd.current_dir(cwd).env_remove("ITL_OUT_ROOT").args(args);
    if let Some(root) = out_root {
        cmd.env("ITL_OUT_ROOT", root);
    }
    cmd.output().expect("failed to spawn the binary")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_code(out: &Output, want: i32) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "expected exit code {}\nstdout: {}\nstderr: {}",
        want,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Minutes-not-hours experiment file: four blob classes over two tasks,
/// a tiny net, and single-digit epoch counts.
fn tiny_config(variants: &str, seeds: &str) -> String {
    format!(
        r#"[data]
classes = 4
dim = 2
train_per_class = 12
test_per_class = 6
sigma = 0.6

[stream]
tasks = 2

[model]
hidden = [8]

[buffer]
capacity = 8

[train]
epochs_specialist = 3
epochs_tangent = 4
epochs_distill = 4
epochs_finetune = 3
batch_size = 8

[run]
variants = {variants}
seeds = {seeds}
"#
    )
}

/// The single `<stem>-<hash>` directory created under an output root.
fn run_dir(root: &Path, stem: &str) -> PathBuf {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with(&format!("{}-", stem)))
        })
        .collect();
    assert_eq!(dirs.len(), 1, "expected exactly one run directory, found {:?}", dirs);
    dirs.pop().unwrap()
}

#[test]
fn gen_writes_deterministic_manifested_datasets() {
    let tmp = TempDir::new().unwrap();
    let args = [
        "gen",
        "--classes",
        "3",
        "--train-per-class",
        "4",
        "--test-per-class",
        "2",
        "--sigma",
        "0.5",
        "--seed",
        "9",
        "--precision",
        "f64",
    ];
    let d1 = tmp.path().join("d1");
    let d2 = tmp.path().join("d2");
    for d in [&d1, &d2] {
        let mut full = args.to_vec();
        full.extend(["--out", d.to_str().unwrap()]);
        assert_ok(&itl(tmp.path(), None, &full));
    }

    for name in ["train.bin", "test.bin", "manifest.json"] {
        assert!(d1.join(name).is_file(), "missing {}", name);
        assert_eq!(
            fs::read(d1.join(name)).unwrap(),
            fs::read(d2.join(name)).unwrap(),
            "{} differs between identical generations",
            name
        );
    }
    assert!(fs::read(d1.join("train.bin")).unwrap().starts_with(b"ITLDSET1"));

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d1.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["classes"], 3);
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["train_records"], 12);
    assert_eq!(manifest["test_records"], 6);
    assert_eq!(manifest["precision"], "f64");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 16);

    // A different seed must change the data.
    let d3 = tmp.path().join("d3");
    let mut full = args.to_vec();
    full[8] = "10";
    full.extend(["--out", d3.to_str().unwrap()]);
    assert_ok(&itl(tmp.path(), None, &full));
    assert_ne!(
        fs::read(d1.join("train.bin")).unwrap(),
        fs::read(d3.join("train.bin")).unwrap(),
        "seed change left the dataset bytes untouched"
    );
}

#[test]
fn run_writes_the_full_provenance_stamped_artifact_set() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, tiny_config("[\"ITL\"]", "[0]")).unwrap();
    let root = tmp.path().join("runs");

    let out = itl(tmp.path(), Some(&root), &["run", "--config", cfg.to_str().unwrap()]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("artifacts:"), "stdout lacks the artifacts line: {}", stdout);
    assert!(stdout.contains("class-IL %"), "stdout lacks the summary table: {}", stdout);

    let dir = run_dir(&root, "tiny");
    let hash = dir.file_name().unwrap().to_str().unwrap().strip_prefix("tiny-").unwrap().to_string();
    assert_eq!(hash.len(), 16, "run directory suffix is not a 16-digit hash");

    for name in ["config.toml", "summary.txt", "summary.csv"] {
        assert!(dir.join(name).is_file(), "missing {}", name);
    }
    let seed_dir = dir.join("ITL").join("seed0");
    for name in ["metrics.json", "metrics.csv", "stage_log.csv", "checkpoint.bin", "buffer.bin"] {
        assert!(seed_dir.join(name).is_file(), "missing {}", name);
    }

    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(seed_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(record["config_hash"].as_str().unwrap(), hash);
    assert_eq!(record["variant"], "ITL");
    assert_eq!(record["seed"], 0);
    assert_eq!(record["buffer_capacity"], 8);
    assert_eq!(record["precision"], "f32");
    let acc = record["metrics"]["class_il_final"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc), "accuracy {} outside [0, 1]", acc);

    let prov = format!("# config_hash={} seed=0", hash);
    for name in ["metrics.csv", "stage_log.csv"] {
        let text = fs::read_to_string(seed_dir.join(name)).unwrap();
        assert!(
            text.lines().next() == Some(prov.as_str()),
            "{} does not open with the provenance stamp: {:?}",
            name,
            text.lines().next()
        );
    }
    let log = fs::read_to_string(seed_dir.join("stage_log.csv")).unwrap();
    assert_eq!(log.lines().nth(1), Some("task,stage,step,loss,class_il,task_il"));
    assert!(fs::read(seed_dir.join("checkpoint.bin")).unwrap().starts_with(b"ITLCKPT1"));
    assert!(fs::read(seed_dir.join("buffer.bin")).unwrap().starts_with(b"ITLBUF01"));
    assert!(fs::read_to_string(dir.join("summary.txt"))
        .unwrap()
        .starts_with(&format!("# config_hash={}", hash)));

    // The stored config must reparse to the same hash.
    let stored = fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(stored.contains("capacity = 8"));
}

#[test]
fn identical_runs_produce_byte_identical_artifacts() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("det.toml");
    fs::write(&cfg, tiny_config("[\"ITL-L\"]", "[1]")).unwrap();
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    for root in [&r1, &r2] {
        assert_ok(&itl(tmp.path(), Some(root), &["run", "--config", cfg.to_str().unwrap()]));
    }
    let (d1, d2) = (run_dir(&r1, "det"), run_dir(&r2, "det"));
    assert_eq!(d1.file_name(), d2.file_name(), "config hash changed between runs");
    for name in ["metrics.json", "metrics.csv", "stage_log.csv", "checkpoint.bin", "buffer.bin"] {
        let p1 = d1.join("ITL-L").join("seed1").join(name);
        let p2 = d2.join("ITL-L").join("seed1").join(name);
        assert_eq!(
            fs::read(&p1).unwrap(),
            fs::read(&p2).unwrap(),
            "{} differs between identical runs",
            name
        );
    }
}

#[test]
fn flag_overrides_replace_seeds_variants_and_capacity() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("base.toml");
    fs::write(&cfg, tiny_config("[\"ITL\"]", "[0]")).unwrap();
    let root = tmp.path().join("runs");
    assert_ok(&itl(
        tmp.path(),
        Some(&root),
        &[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--variant",
            "B",
            "--seed",
            "3",
            "--buffer-capacity",
            "6",
        ],
    ));
    let dir = run_dir(&root, "base");
    let seed_dir = dir.join("B").join("seed3");
    assert!(seed_dir.join("metrics.json").is_file(), "override did not steer the grid");
    assert!(!dir.join("ITL").exists(), "config variant ran despite the override");
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(seed_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(record["variant"], "B");
    assert_eq!(record["seed"], 3);
    assert_eq!(record["buffer_capacity"], 6);
}

#[test]
fn out_dir_flag_wins_over_the_environment_root() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, tiny_config("[\"B\"]", "[0]")).unwrap();
    let env_root = tmp.path().join("env-root");
    let flag_root = tmp.path().join("flag-root");
    assert_ok(&itl(
        tmp.path(),
        Some(&env_root),
        &[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            flag_root.to_str().unwrap(),
        ],
    ));
    assert!(flag_root.exists(), "flag output root was not used");
    assert!(!env_root.exists(), "environment root was used despite the flag");

    // Without the flag, the environment variable supplies the root.
    assert_ok(&itl(tmp.path(), Some(&env_root), &["run", "--config", cfg.to_str().unwrap()]));
    assert!(env_root.exists(), "environment output root was ignored");
}

#[test]
fn file_based_datasets_feed_the_run() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_ok(&itl(
        tmp.path(),
        None,
        &[
            "gen",
            "--classes",
            "4",
            "--train-per-class",
            "10",
            "--test-per-class",
            "4",
            "--sigma",
            "0.6",
            "--out",
            data.to_str().unwrap(),
        ],
    ));
    let cfg = tmp.path().join("files.toml");
    fs::write(
        &cfg,
        format!(
            r#"[data]
train = "{}"
test = "{}"

[stream]
tasks = 2

[model]
hidden = [8]

[buffer]
capacity = 8

[train]
epochs_specialist = 3
epochs_tangent = 3
epochs_distill = 3
epochs_finetune = 3
batch_size = 8

[run]
variants = ["ITL"]
seeds = [0]
"#,
            data.join("train.bin").display(),
            data.join("test.bin").display()
        ),
    )
    .unwrap();
    let root = tmp.path().join("runs");
    assert_ok(&itl(tmp.path(), Some(&root), &["run", "--config", cfg.to_str().unwrap()]));
    let dir = run_dir(&root, "files");
    assert!(dir.join("ITL").join("seed0").join("metrics.json").is_file());
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("runs");

    // Unknown config key: configuration error.
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "banana = 1\n").unwrap();
    assert_code(&itl(tmp.path(), Some(&root), &["run", "--config", bad.to_str().unwrap()]), 1);

    // Unknown variant name on the command line: configuration error.
    let good = tmp.path().join("good.toml");
    fs::write(&good, tiny_config("[\"ITL\"]", "[0]")).unwrap();
    assert_code(
        &itl(
            tmp.path(),
            Some(&root),
            &["run", "--config", good.to_str().unwrap(), "--variant", "NOPE"],
        ),
        1,
    );

    // Unknown precision for gen: configuration error.
    assert_code(&itl(tmp.path(), Some(&root), &["gen", "--precision", "f16"]), 1);

    // Unparsable command line: configuration error.
    assert_code(&itl(tmp.path(), Some(&root), &["run", "--no-such-flag"]), 1);

    // Dataset files that do not exist: data error.
    let missing = tmp.path().join("missing.toml");
    fs::write(
        &missing,
        "[data]\ntrain = \"nowhere/train.bin\"\ntest = \"nowhere/test.bin\"\n",
    )
    .unwrap();
    assert_code(
        &itl(tmp.path(), Some(&root), &["run", "--config", missing.to_str().unwrap()]),
        2,
    );

    // Report over a path with no metrics: data error.
    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_code(&itl(tmp.path(), Some(&root), &["report", empty.to_str().unwrap()]), 2);
    assert_code(&itl(tmp.path(), Some(&root), &["report", "no-such-path"]), 2);

    // A learning rate of 1e12 blows the parameters up within a step or
    // two: numerical failure.
    let diverge = tmp.path().join("diverge.toml");
    fs::write(
        &diverge,
        tiny_config("[\"B\"]", "[0]").replace("[train]", "[train]\nlr_specialist = 1e12"),
    )
    .unwrap();
    assert_code(
        &itl(tmp.path(), Some(&root), &["run", "--config", diverge.to_str().unwrap()]),
        3,
    );
}

#[test]
fn report_aggregates_runs_into_tables_and_series() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("grid.toml");
    fs::write(&cfg, tiny_config("[\"B\", \"ITL\"]", "[0, 1]")).unwrap();
    let root = tmp.path().join("runs");
    assert_ok(&itl(tmp.path(), Some(&root), &["run", "--config", cfg.to_str().unwrap()]));
    let dir = run_dir(&root, "grid");

    let report_dir = tmp.path().join("report");
    let out = itl(
        tmp.path(),
        Some(&root),
        &["report", dir.to_str().unwrap(), "--out", report_dir.to_str().unwrap()],
    );
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("class-IL %"), "missing class-IL table: {}", stdout);
    assert!(stdout.contains("task-IL %"), "missing task-IL table: {}", stdout);
    assert!(stdout.contains("4 runs aggregated"), "wrong run count: {}", stdout);

    let final_csv = fs::read_to_string(report_dir.join("report_final.csv")).unwrap();
    let mut lines = final_csv.lines();
    assert_eq!(
        lines.next(),
        Some(
            "variant,capacity,seeds,class_il_mean,class_il_std,task_il_mean,task_il_std,\
             forgetting_mean,forgetting_std"
        )
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2, "expected one row per variant: {:?}", rows);
    assert!(rows[0].starts_with("B,8,2,"), "ladder order broken: {:?}", rows);
    assert!(rows[1].starts_with("ITL,8,2,"), "ladder order broken: {:?}", rows);

    // Accuracy series: two tasks give one row after task 0 and two after
    // task 1, per variant.
    let acc_csv = fs::read_to_string(report_dir.join("report_accuracy.csv")).unwrap();
    assert_eq!(acc_csv.lines().count(), 1 + 2 * 3, "unexpected accuracy series: {}", acc_csv);

    // Stage series: rows exist for both variants and carry the stage names.
    let stages_csv = fs::read_to_string(report_dir.join("report_stages.csv")).unwrap();
    assert!(stages_csv.contains("ITL,8,"), "missing ITL stage rows: {}", stages_csv);
    assert!(stages_csv.contains(",tangent,"), "missing tangent stage: {}", stages_csv);
    assert!(stages_csv.contains(",distill,"), "missing distill stage: {}", stages_csv);

    // A single metrics file is also a valid report input.
    let single = dir.join("B").join("seed0").join("metrics.json");
    let out = itl(tmp.path(), Some(&root), &["report", single.to_str().unwrap()]);
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("1 runs aggregated"));
}
