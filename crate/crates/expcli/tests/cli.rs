use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn replora(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_replora"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

const SMALL: &str = r#"{"n_grid": [40, 80, 160], "trials": 2, "mc_samples": 500,
    "optimizer": {"steps": 60, "restarts": 2}}"#;

#[test]
fn sweep_rate_and_plotdata() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), SMALL).unwrap();
    let o = replora(&["sweep", "--config", "c.json", "--out", "s.csv", "--workers", "2"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with("n,trial,seed,family,loss_name,"));

    let o = replora(&["rate", "s.csv", "--column", "l2_mu_error"], dir.path());
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["slope"].as_f64().unwrap().is_finite());
    assert_eq!(v["points"].as_array().unwrap().len(), 3);

    let o = replora(&["plotdata", "s.csv", "--column", "loss_value"], dir.path());
    assert_eq!(code(&o), 0);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.starts_with("n,count,min,q10,q25,median,q75,q90,max\n40,2,"));

    // Rerun resumes into the finished file and leaves it unchanged.
    let o = replora(&["sweep", "--config", "c.json", "--out", "s.csv"], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(dir.path().join("s.csv")).unwrap(), csv);
}

#[test]
fn gen_data_then_fit() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), SMALL).unwrap();
    let o = replora(&["gen-data", "--config", "c.json", "--n", "50", "--out", "d.csv"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["d.csv", "d.csv.truth.json", "d.csv.backbone.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(dir.path().join("d.csv")).unwrap().lines().count(), 51);
    let o = replora(
        &["fit", "--config", "c.json", "--data", "d.csv", "--trace", "t.csv", "--out", "fit.json"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("D2="));
    assert_eq!(fs::read_to_string(dir.path().join("t.csv")).unwrap().lines().count(), 62);
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("fit.json")).unwrap()).unwrap();
    assert!(fit["final_objective"].as_f64().unwrap() >= 0.0);
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = replora(&["verify", "losses"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).lines().all(|l| l.starts_with("pass ")));

    let o = replora(&["verify", "gradients", "--mutate-gradient", "expert-value"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));

    assert_eq!(code(&replora(&["verify", "nonsense"], dir.path())), 2);
}

#[test]
fn merge_demo() {
    let dir = tempfile::tempdir().unwrap();
    let o = replora(&["merge-demo", "--seed", "3", "--out", "m.json"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(dir.path().join("m.json").exists());
    assert_eq!(code(&replora(&["merge-demo", "--dim", "7", "--heads", "2"], dir.path())), 2);
}

#[test]
fn usage_and_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&replora(&["no-such-command"], dir.path())), 2);
    fs::write(dir.path().join("bad.json"), r#"{"trials": 0}"#).unwrap();
    assert_eq!(code(&replora(&["sweep", "--config", "bad.json"], dir.path())), 2);
    fs::write(dir.path().join("typo.json"), r#"{"trails": 3}"#).unwrap();
    assert_eq!(code(&replora(&["sweep", "--config", "typo.json"], dir.path())), 2);
    assert_eq!(code(&replora(&["rate", "missing.csv"], dir.path())), 3);
    assert_eq!(code(&replora(&["sweep", "--config", "missing.json"], dir.path())), 3);
}

#[test]
fn resume_refuses_other_family() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.json"), SMALL).unwrap();
    let b = SMALL.replacen('{', r#"{"family": "free_low_rank", "#, 1);
    fs::write(dir.path().join("b.json"), b).unwrap();
    assert_eq!(code(&replora(&["sweep", "--config", "a.json", "--out", "s.csv"], dir.path())), 0);
    assert_eq!(code(&replora(&["sweep", "--config", "b.json", "--out", "s.csv"], dir.path())), 2);
}
