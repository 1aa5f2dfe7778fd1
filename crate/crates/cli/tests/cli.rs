use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/fixture.toml")
}

fn simcal(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simcal"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("SIMCAL_CONFIG", fixture_config())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn full_run_writes_report_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = simcal(&["all"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("report/report.csv")).unwrap();
    assert!(report.starts_with("weighting,sn,layer_avg,natsv_k,rho,p_value,pairs\n"));
    // Four layers: 5 uniform layer settings, 4 for the other weightings.
    assert_eq!(report.lines().count(), 1 + (5 + 4 + 4) * 2 * 3);
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("report/summary.json")).unwrap())
            .unwrap();
    assert!(summary["best"]["rho"].as_f64().is_some());
    assert!(dir.path().join("artifacts.json").is_file());
    assert!(dir.path().join("report/best_embeddings.memb").is_file());
    for w in ["uniform", "linear", "inverse_linear"] {
        assert!(dir.path().join(format!("report/report_{w}.svg")).is_file());
    }

    // Stages rerun individually reproduce the same files.
    let before = std::fs::read(dir.path().join("pairs.csv")).unwrap();
    let o = simcal(&["pairs"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(dir.path().join("pairs.csv")).unwrap(), before);

    // An empty pairs file is rejected with a module-tagged cause.
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "a_piece,a_window,b_piece,b_window,label\n").unwrap();
    let o = simcal(&["grid", "--pairs", empty.to_str().unwrap()], dir.path());
    assert!(!o.status.success());
    assert!(
        stderr(&o).contains("evaluation: insufficient pairs"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn seed_override_changes_pairs_but_not_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, seed) in [(&a, "1"), (&b, "2")] {
        for stage in ["tokenize", "vocab", "pairs"] {
            let o = simcal(&[stage, "--seed", seed], dir.path());
            assert!(o.status.success(), "{stage}: {}", stderr(&o));
        }
    }
    let pa = std::fs::read_to_string(a.path().join("pairs.csv")).unwrap();
    let pb = std::fs::read_to_string(b.path().join("pairs.csv")).unwrap();
    assert_ne!(pa, pb);
    assert_eq!(pa.lines().count(), pb.lines().count());
}

#[test]
fn missing_or_invalid_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_simcal"))
        .arg("all")
        .env_remove("SIMCAL_CONFIG")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no run config"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(
        &bad,
        "seed = 1\n[paths]\nmanifest = \"m.csv\"\nout_dir = \"o\"\n",
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_simcal"))
        .args(["--config", bad.to_str().unwrap(), "all"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("parsing run config"), "{}", stderr(&o));
}
