use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn otdistill(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otdistill"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .unwrap()
}

#[test]
fn gen_synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = otdistill(d, &["gen-synth", "--samples", "100", "--seed", "3"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["synth.csv", "synth_target_labels.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let labels = fs::read_to_string(a.join("synth_target_labels.txt")).unwrap();
    assert_eq!(labels.lines().count(), 100);
}

#[test]
fn distill_wbt_writes_one_row_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"synth": {"samples_per_domain": 200}}"#).unwrap();
    let out = otdistill(
        dir.path(),
        &["distill", "--method", "wbt", "--spc", "1", "--dump-plan", "--config", cfg.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("summary_wbt_spc1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
    assert!(dir.path().join("summary_wbt_spc1.json").exists());
    assert!(dir.path().join("plan_wbt_spc1.json").exists());
}

#[test]
fn bad_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"methods": ["wbt"], "not_a_key": true}"#).unwrap();
    let out = otdistill(dir.path(), &["sweep", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[config_invalid]"));
}

#[test]
fn two_unlabeled_domains_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    fs::write(&data, "domain,label,f0,f1\ns,a,0.0,1.0\ns,b,1.0,0.0\nt1,,0.5,0.5\nt2,,0.2,0.1\n").unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, format!(r#"{{"dataset": {:?}}}"#, data.to_str().unwrap())).unwrap();
    let out = otdistill(dir.path(), &["distill", "--method", "random_source", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[data_error]"));
}
