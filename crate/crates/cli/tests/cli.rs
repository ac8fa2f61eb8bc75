use std::path::PathBuf;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_walkhammer")).args(args).output().expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("walkhammer-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn presets_and_validate() {
    let o = bin(&["presets"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for p in ["desk", "t420", "x230", "e6420"] {
        assert!(text.contains(p), "{text}");
    }
    let o = bin(&["presets", "t420"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(serde_json::from_slice::<serde_json::Value>(&o.stdout).is_ok());
    assert_eq!(bin(&["validate", "--config", "desk"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(bin(&[]).status.code(), Some(1));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(&["run", "--experiment", "E9"]).status.code(), Some(1));
    assert_eq!(bin(&["run"]).status.code(), Some(1));
    assert_eq!(bin(&["run", "--experiment", "E1", "--defense", "moat"]).status.code(), Some(1));
    assert_eq!(bin(&["run", "--experiment", "E1", "--reps", "0"]).status.code(), Some(1));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_2() {
    let d = scratch("cfg");
    let bad = d.join("bad.json");
    std::fs::write(&bad, r#"{"base":"desk","machine":{"os":{"p_consec":3}}}"#).unwrap();
    assert_eq!(bin(&["validate", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(bin(&["validate", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(bin(&["validate", "--config", "no-such-preset"]).status.code(), Some(2));
    std::fs::write(&bad, r#"{"sizes":[1],"colour":"red"}"#).unwrap();
    let o = bin(&["run", "--experiment", "E1", "--params", bad.to_str().unwrap(), "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_3() {
    let d = scratch("rt");
    let cfg = d.join("c.json");
    std::fs::write(&cfg, r#"{"base":"desk","attack":{"max_pairs":0}}"#).unwrap();
    let o = bin(&["run", "--config", cfg.to_str().unwrap(), "--experiment", "E5", "--reps", "1", "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_writes_csv_and_manifest() {
    let d = scratch("run");
    let out = d.join("out");
    let o = bin(&["run", "--experiment", "e1", "--seed", "4", "--reps", "2", "--out", out.to_str().unwrap(), "--sequential"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("e1_tlb_miss.csv")).unwrap();
    assert!(csv.starts_with("preset,seed,size,trials,miss_rate,true_miss_rate\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 16);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 4);
    assert_eq!(m["runs"][0]["reps"], 2);
    assert_eq!(m["files"][0]["file"], "e1_tlb_miss.csv");
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert!(m["version"].as_str().unwrap().starts_with('v'));

    // same seed, same bytes
    let again = d.join("again");
    bin(&["run", "--experiment", "e1", "--seed", "4", "--reps", "2", "--out", again.to_str().unwrap()]);
    assert_eq!(std::fs::read(again.join("e1_tlb_miss.csv")).unwrap(), csv.as_bytes());
}

#[test]
fn sweep_runs_a_list() {
    let d = scratch("sweep");
    let params = d.join("p.json");
    std::fs::write(&params, r#"{"sizes":[4,12],"trials":20,"targets":4}"#).unwrap();
    let o = bin(&["sweep", "--experiment", "E1,E3,E6", "--reps", "1", "--params", params.to_str().unwrap(), "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["e1_tlb_miss.csv", "e3_selection.csv", "e6_escalation.csv", "e6_flips.csv", "e6_events.json", "manifest.json"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let e6 = std::fs::read_to_string(d.join("e6_escalation.csv")).unwrap();
    assert!(e6.lines().nth(1).unwrap().contains("l1pt"), "{e6}");
}
