use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const QUICK: &str = r#"{
  "seed": 3,
  "benchmark": {"samples_per_subject": 80},
  "source_epochs": 6,
  "epochs": 2,
  "baselines": ["lower_fusion", "blend_mmd_uda"],
  "ablation": "tau_ss_sweep",
  "ablation_thresholds": [0.0, 1.0]
}"#;

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msda-lab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("MSDA_LAB_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], out: &Path) {
    let o = run(args, out);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("quick.json");
    fs::write(&path, QUICK).unwrap();
    path
}

const CHAIN: [&str; 8] = [
    "gen-data",
    "train-source",
    "select",
    "adapt",
    "evaluate",
    "baseline",
    "ablate",
    "export-embeddings",
];

fn run_chain(config: &Path, out: &Path) {
    let c = config.to_str().unwrap();
    for cmd in CHAIN {
        ok(&[cmd, "--config", c], out);
    }
}

fn csv_files(root: &Path) -> Vec<PathBuf> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                found.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    found.sort();
    found
}

#[test]
fn full_chain_writes_every_artifact_and_repeats_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_chain(&config, &a);
    run_chain(&config, &b);
    for rel in [
        "source/checkpoint.json",
        "select/t00.csv",
        "adapt/t02/metrics.csv",
        "evaluate/results.csv",
        "baseline/results.csv",
        "ablate/tau_ss_sweep.csv",
        "embeddings/t01.csv",
    ] {
        assert!(a.join(rel).exists(), "missing {rel}");
    }
    for cmd in ["source", "select", "adapt", "evaluate", "baseline", "ablate", "embeddings"] {
        assert!(a.join(cmd).join("resolved_config.json").exists(), "{cmd}");
    }
    let files = csv_files(&a);
    assert!(files.len() >= 30, "{}", files.len());
    assert_eq!(files, csv_files(&b));
    for f in &files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{}", f.display());
    }
    assert_eq!(
        fs::read(a.join("source/checkpoint.json")).unwrap(),
        fs::read(b.join("source/checkpoint.json")).unwrap()
    );
    let results = fs::read_to_string(a.join("evaluate/results.csv")).unwrap();
    assert!(results.starts_with("method,t00,t01,t02,avg\nfull,"), "{results}");
}

#[test]
fn adapt_without_checkpoint_names_the_checkpoint_path() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let out = tmp.path().join("run");
    ok(&["gen-data", "--config", config.to_str().unwrap()], &out);
    let o = run(&["adapt", "--config", config.to_str().unwrap()], &out);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    let expected = out.join("source").join("checkpoint.json");
    assert!(err.contains(&expected.display().to_string()), "{err}");
}

#[test]
fn adapt_without_selection_names_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let out = tmp.path().join("run");
    let c = config.to_str().unwrap();
    ok(&["gen-data", "--config", c], &out);
    ok(&["train-source", "--config", c], &out);
    let o = run(&["adapt", "--config", c, "--targets", "t01"], &out);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains(&out.join("select").join("t01.csv").display().to_string()), "{err}");
}

#[test]
fn config_errors_exit_nonzero_with_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = run(&["gen-data"], &out);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));

    let o = run(&["select", "--seed", "1", "--tau-ss", "1.5"], &out);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("tau_ss"));

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"seed": 1, "learning_rate": 0.1}"#).unwrap();
    let o = run(&["gen-data", "--config", bad.to_str().unwrap()], &out);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn unknown_target_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let out = tmp.path().join("run");
    let c = config.to_str().unwrap();
    ok(&["gen-data", "--config", c], &out);
    let o = run(&["train-source", "--config", c, "--targets", "t09"], &out);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("t09"));
}

#[test]
fn out_defaults_to_the_environment_variable() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_msda-lab"))
        .args(["gen-data", "--seed", "2"])
        .env("MSDA_LAB_OUT", &root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("data").join("dataset.json").exists());
}
