//! The command-line tool: config handling, exit codes and emitted files.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use evimix::harness::{Manifest, MANIFEST_NAME};
use sha2::{Digest, Sha256};

fn evimix(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_evimix"));
    cmd.args(args).env_remove("EVIMIX_OUTPUT_ROOT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn read_manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_NAME)).unwrap()).unwrap()
}

const SMALL_TRACE: &str = r#"
kind = "trace-study"
model = "model-a-bmm"
seed = 11

[trace]
n = 200
rounds = 3
"#;

#[test]
fn run_writes_every_file_listed_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = dir.path().join("exp.toml");
    // Top-level keys must precede the first table.
    let text = SMALL_TRACE.replace("seed = 11\n", &format!("seed = 11\noutput = {:?}\n", out.to_str().unwrap()));
    fs::write(&config, text).unwrap();
    let res = evimix(&["run", config.to_str().unwrap()], &[]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let manifest = read_manifest(&out);
    assert_eq!(manifest.config_dialect, "toml-1.0");
    assert!(manifest.passed);
    // One trace per bound kind and round, plus config and summaries.
    assert_eq!(manifest.files.len(), 6 + 3);
    for f in &manifest.files {
        let bytes = fs::read(out.join(&f.path)).unwrap();
        assert_eq!(bytes.len() as u64, f.bytes);
        assert_eq!(format!("{:x}", Sha256::digest(&bytes)), f.sha256, "{}", f.path);
    }
    let trace = fs::read_to_string(out.join("traces/slb-round000.csv")).unwrap();
    assert!(trace.starts_with("iter,surrogate,mc_elbo,mc_elbo_stderr\n1,"));
    // The echoed config parses back to the effective config.
    let echoed = evimix::harness::parse_config(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(echoed.trace.n, 200);
    assert_eq!(echoed.output, None);
}

#[test]
fn config_errors_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad_value = dir.path().join("bad.toml");
    fs::write(
        &bad_value,
        "kind = \"trace-study\"\n[truth]\nweights = [0.4, 0.6]\nshapes = [[2.0, 3.0], [4.0, -5.0]]\n",
    )
    .unwrap();
    let res = evimix(&["run", bad_value.to_str().unwrap()], &[]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("truth.shapes[1][1]"));

    let bad_syntax = dir.path().join("syntax.toml");
    fs::write(&bad_syntax, "kind = \"trace-study\"\nmodel = \n").unwrap();
    let res = evimix(&["run", bad_syntax.to_str().unwrap()], &[]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 2"));

    let res = evimix(&["preset", "model-q", "--out", dir.path().to_str().unwrap()], &[]);
    assert_eq!(res.status.code(), Some(2));
    let res = evimix(&["run", dir.path().join("missing.toml").to_str().unwrap()], &[]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let res = evimix(&["sweep", "--configs", "10", "--out", blocker.join("x").to_str().unwrap()], &[]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn failed_experiment_check_exits_with_status_one() {
    // Under the literal strong-condition update every MLB run decreases, so
    // every round is excluded and the sign checks cannot pass.
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("cmp.toml");
    fs::write(
        &config,
        format!(
            "kind = \"comparison\"\nmodel = \"model-a-bmm\"\noutput = {:?}\n[comparison]\nn = 200\nrounds = 2\nelbo_draws = 1000\nkl_draws = 1000\n",
            dir.path().join("out").to_str().unwrap()
        ),
    )
    .unwrap();
    let res = evimix(&["run", config.to_str().unwrap()], &[]);
    assert_eq!(res.status.code(), Some(1));
    let manifest = read_manifest(&dir.path().join("out"));
    assert!(!manifest.passed);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/comparison.json")).unwrap()).unwrap();
    assert_eq!(report["excluded_rounds"], 2);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    fs::write(&config, SMALL_TRACE).unwrap();
    let res = evimix(&["run", config.to_str().unwrap()], &[("EVIMIX_OUTPUT_ROOT", dir.path().to_str().unwrap())]);
    assert!(res.status.success());
    assert!(dir.path().join("trace-study-model-a-bmm-seed11").join(MANIFEST_NAME).exists());
}

#[test]
fn output_does_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let run = |out: &Path, threads: &str| {
        let res = evimix(
            &["sweep", "--configs", "5000", "--seed", "4", "--out", out.to_str().unwrap()],
            &[("RAYON_NUM_THREADS", threads)],
        );
        assert!(res.status.code().is_some());
    };
    run(&a, "1");
    run(&b, "3");
    assert_eq!(fs::read(a.join(MANIFEST_NAME)).unwrap(), fs::read(b.join(MANIFEST_NAME)).unwrap());
    assert_eq!(fs::read(a.join("gaps.csv")).unwrap(), fs::read(b.join("gaps.csv")).unwrap());
}
