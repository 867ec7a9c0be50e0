use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mfgkit::cli::bundled_config;

const EXPERIMENTS: [&str; 7] = ["riccati-bench", "mfc-verify", "mfg-verify", "fbsde-check", "finite-nash-sweep", "prop61", "systemic"];

fn mfgkit(args: &[&str], threads: Option<usize>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mfgkit"));
    cmd.args(args);
    match threads {
        Some(n) => cmd.env("MFGKIT_THREADS", n.to_string()),
        None => cmd.env_remove("MFGKIT_THREADS"),
    };
    cmd.output().unwrap()
}

fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn run_into(experiment: &str, dir: &Path, threads: Option<usize>, seed: Option<&str>) -> BTreeMap<String, Vec<u8>> {
    let config = bundled_config(&format!("{experiment}.toml"));
    let mut args = vec![experiment, "--config", config.to_str().unwrap(), "--out", dir.to_str().unwrap()];
    if let Some(s) = seed {
        args.extend(["--seed", s]);
    }
    let out = mfgkit(&args, threads);
    assert!(out.status.success(), "{experiment}: {}", String::from_utf8_lossy(&out.stderr));
    outputs(dir)
}

#[test]
fn outputs_are_byte_identical_across_runs_and_thread_counts() {
    for experiment in EXPERIMENTS {
        let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
        let a = run_into(experiment, dirs[0].path(), Some(1), None);
        let b = run_into(experiment, dirs[1].path(), Some(4), None);
        let c = run_into(experiment, dirs[2].path(), None, None);
        assert!(!a.is_empty());
        assert_eq!(a, b, "{experiment}");
        assert_eq!(a, c, "{experiment}");
    }
}

#[test]
fn output_headers_record_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let files = run_into("mfc-verify", dir.path(), None, Some("42"));
    let csv = String::from_utf8(files["mfc_verify_residual.csv"].clone()).unwrap();
    assert!(csv.starts_with("# experiment=mfc-verify\n# seed=42\n# grid=[0, 1] steps=2000\n# model_hash=sha256:"));
    assert!(csv.contains("# config: model.preset = \"scalar-benchmark\"\n"));
    let body: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(body[0].starts_with("t,x0,m1,y0,residual,"));
    assert_eq!(body.len(), 101);
    let col = body[0].split(',').position(|h| h == "residual").unwrap();
    let max = body[1..].iter().map(|l| l.split(',').nth(col).unwrap().parse::<f64>().unwrap().abs()).fold(0.0, f64::max);
    assert!(max <= 1e-6, "{max}");
    let first = body[1].split(',').next().unwrap();
    assert_eq!(first.split('e').next().unwrap().len(), 18, "17 significant digits: {first}");

    let other = tempfile::tempdir().unwrap();
    let reseeded = run_into("mfc-verify", other.path(), None, Some("43"));
    assert_ne!(files["mfc_verify_residual.csv"], reseeded["mfc_verify_residual.csv"]);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "model.preset = \"scalar-benchmark\"\ngrid.steps = 10\ngamma_mode = \"fd\"\n").unwrap();
    let out = mfgkit(&["mfc-verify", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma_mode"));

    let missing = dir.path().join("missing.toml");
    let out = mfgkit(&["prop61", "--config", missing.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));

    fs::write(&config, "run.K = [3]\n").unwrap();
    let out = mfgkit(&["prop61", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], Some(0));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("MFGKIT_THREADS"));
}

#[test]
fn numerical_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("blowup.toml");
    // Q̄ = −10 drives the scalar flow through tan-type escape before t = 0.
    fs::write(&config, "model.preset = \"scalar-benchmark\"\nmodel.Q_bar = [[-10.0]]\ngrid.steps = 1000\n").unwrap();
    let out = mfgkit(&["mfc-verify", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("blew up"));
}
