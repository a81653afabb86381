use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fedrc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedrc"))
        .args(args)
        .output()
        .expect("spawn fedrc")
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(dir.parent().unwrap()).unwrap();
    dir
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const SMALL: &[&str] = &[
    "--set",
    "scenario.num_clients=9",
    "--set",
    "scenario.samples_per_client=[30, 40]",
    "--set",
    "scenario.holdout_adapt_per_class=3",
    "--set",
    "scenario.holdout_test_per_class=5",
];

#[test]
fn train_compose_eval_round_trip() {
    let dir = scratch("run");
    let d = dir.to_str().unwrap();
    let mut args = vec!["train", "--rounds", "2", "--out", d, "--set", "fed.num_clusters=2"];
    args.extend_from_slice(SMALL);
    ok(&fedrc(&args));

    let csv = fs::read_to_string(dir.join("rounds.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,objective,train_acc,local_acc,global_acc,global_acc_hard,active_clusters,gamma_max_row_change,purity"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    // no weight change is defined before the first round
    assert_eq!(rows[0].split(',').nth(7), Some(""));

    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["active_clusters"], 2);
    assert_eq!(summary["rounds"], 2);
    let purity = summary["purity"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&purity));
    for f in ["model.json", "state.json", "config.resolved.toml"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }

    let path = ok(&fedrc(&["compose", d, "--attribute", "class", "--hard"]));
    let table = fs::read_to_string(path.trim()).unwrap();
    assert!(table.starts_with("class,mass,cluster_0,cluster_1"), "{table}");
    assert_eq!(table.lines().count(), 11);

    let line = ok(&fedrc(&["eval", d, "--workers", "2"]));
    assert!(line.starts_with("round 2:"), "{line}");
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["round"], 2);
    assert!(eval["holdout"].as_array().is_some_and(|h| !h.is_empty()));
}

#[test]
fn zero_rounds_writes_initial_report_only() {
    let dir = scratch("zero");
    let mut args = vec!["train", "--rounds", "0", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    ok(&fedrc(&args));
    let csv = fs::read_to_string(dir.join("rounds.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn generate_then_train_from_saved_scenario() {
    let data = scratch("data");
    let mut args = vec!["generate", "--out", data.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    ok(&fedrc(&args));
    assert!(data.join("scenario.json").is_file() && data.join("scenario.csv").is_file());

    let manifest = scratch("manifest.toml");
    fs::write(
        &manifest,
        format!(
            "algorithm = \"ifca\"\nseed = 1\n[scenario]\npath = {:?}\n[model]\narchitecture = \"linear\"\n[fed]\nnum_clusters = 2\nrounds = 1\n",
            data.to_str().unwrap()
        ),
    )
    .unwrap();
    let run = scratch("from-saved");
    let out = ok(&fedrc(&["train", "--config", manifest.to_str().unwrap(), "--out", run.to_str().unwrap()]));
    assert!(out.starts_with("ifca: 1 rounds"), "{out}");
}

#[test]
fn exit_codes() {
    let bad_key = fedrc(&["train", "--set", "fed.no_such_key=1", "--out", scratch("bad").to_str().unwrap()]);
    assert_eq!(bad_key.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("no_such_key"));

    let bad_value = fedrc(&["train", "--set", "fed.participation_fraction=2.0", "--out", scratch("bad2").to_str().unwrap()]);
    assert_eq!(bad_value.status.code(), Some(2));

    let missing = fedrc(&["eval", scratch("nowhere").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(4));

    let attr = fedrc(&["compose", scratch("nowhere2").to_str().unwrap(), "--attribute", "colour"]);
    assert_eq!(attr.status.code(), Some(2));

    assert_eq!(fedrc(&["frobnicate"]).status.code(), Some(2));
}
