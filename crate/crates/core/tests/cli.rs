use std::fs;
use std::path::Path;

use neucept::cli::{main_with_args, OracleReport};
use neucept::selection::DiscoveryReport;
use neucept::trace::load_trace;

fn run(dir: &Path, args: &[&str]) -> i32 {
    let mut full = vec!["neucept".to_string(), "--config".into(), dir.join("run.json").display().to_string()];
    full.extend(args.iter().map(|s| s.to_string()));
    main_with_args(full)
}

fn write_config(dir: &Path, body: &str) {
    fs::write(dir.join("run.json"), body).unwrap();
}

const SYNTH: &str = r#"{
  "seed": 3,
  "synth": {"layer_widths": [12, 10, 2], "critical_widths": [4, 4], "k_true": 2, "samples": 200, "output": "out"},
  "discover": {"trace": "out/pkt", "layers": ["hidden1"], "q": [0.2], "repetitions": 5, "output": "out/sel.json"}
}"#;

#[test]
fn synth_writes_pair_and_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    write_config(d.path(), SYNTH);
    assert_eq!(run(d.path(), &["synth"]), 0);
    let pkt = load_trace(&d.path().join("out/pkt")).unwrap();
    assert_eq!(pkt.sample_count(), 200);
    assert!(d.path().join("out/normal/spec.json").exists());
    let first = fs::read(d.path().join("out/pkt/layer_001.bin")).unwrap();
    assert_eq!(run(d.path(), &["synth"]), 0);
    assert_eq!(first, fs::read(d.path().join("out/pkt/layer_001.bin")).unwrap());
}

#[test]
fn invalid_widths_are_config_errors() {
    let d = tempfile::tempdir().unwrap();
    write_config(
        d.path(),
        r#"{"seed": 1, "synth": {"layer_widths": [6, 4, 2], "critical_widths": [8, 4], "k_true": 2, "samples": 10, "output": "o"}}"#,
    );
    assert_eq!(run(d.path(), &["synth"]), 1);
    assert_eq!(run(d.path(), &["synth", "--layer-widths", "6,0,2"]), 1);
    assert!(!d.path().join("o").exists());
}

#[test]
fn missing_seed_and_bad_config_exit_one() {
    let d = tempfile::tempdir().unwrap();
    write_config(
        d.path(),
        r#"{"synth": {"layer_widths": [6, 4, 2], "critical_widths": [2, 2], "k_true": 2, "samples": 10, "output": "o"}}"#,
    );
    assert_eq!(run(d.path(), &["synth"]), 1);
    assert_eq!(run(d.path(), &["--seed", "4", "synth"]), 0);
    write_config(d.path(), r#"{"sed": 1}"#);
    assert_eq!(run(d.path(), &["synth"]), 1);
    assert_eq!(main_with_args(["neucept", "frobnicate"]), 1);
}

#[test]
fn discover_and_flag_overrides() {
    let d = tempfile::tempdir().unwrap();
    write_config(d.path(), SYNTH);
    assert_eq!(run(d.path(), &["synth"]), 0);
    assert_eq!(run(d.path(), &["discover"]), 0);
    let report: DiscoveryReport = serde_json::from_slice(&fs::read(d.path().join("out/sel.json")).unwrap()).unwrap();
    assert_eq!(report.results[0].taus.len(), 5);
    assert_eq!(report.results[0].q, 0.2);

    let alt = d.path().join("alt.json");
    let alt_s = alt.display().to_string();
    assert_eq!(run(d.path(), &["discover", "--q", "0.3", "--repetitions", "2", "--out", &alt_s]), 0);
    let report: DiscoveryReport = serde_json::from_slice(&fs::read(&alt).unwrap()).unwrap();
    assert_eq!(report.results[0].taus.len(), 2);
    assert_eq!(report.results[0].q, 0.3);

    assert_eq!(run(d.path(), &["discover", "--layers", "nope"]), 1);
    let missing = d.path().join("absent").display().to_string();
    assert_eq!(run(d.path(), &["discover", "--trace", &missing]), 2);
}

#[test]
fn oracle_on_csv_table() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("xor.csv"), "a,b,c,y\n0,0,1,0\n0,1,0,1\n1,0,0,1\n1,1,1,0\n").unwrap();
    write_config(
        d.path(),
        r#"{"oracle": {"table": "xor.csv", "k": 2, "subset": [0], "output": "oracle.json"}}"#,
    );
    assert_eq!(run(d.path(), &["oracle"]), 0);
    let r: OracleReport = serde_json::from_slice(&fs::read(d.path().join("oracle.json")).unwrap()).unwrap();
    assert_eq!(r.best.subset, vec![0, 1]);
    assert_eq!(r.best.mi, 1.0);
    assert_eq!(r.subset_mi, Some(0.0));

    fs::write(d.path().join("xor.csv"), "a,y\n0,x\n").unwrap();
    assert_eq!(run(d.path(), &["oracle"]), 2);
}
