use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_songdemand"))
        .arg("--store")
        .arg(dir.join("store"))
        .args(args)
        .current_dir(dir)
        .env_remove("SONGDEMAND_STORE")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap()
}

fn simulate_and_ingest(dir: &Path) {
    let data = dir.join("data.csv");
    ok(dir, &["--seed", "7", "--output-format", "csv", "simulate", "--out", data.to_str().unwrap()]);
    ok(dir, &["ingest", data.to_str().unwrap()]);
}

#[test]
fn exit_codes_separate_usage_from_failures() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(run(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["fit-adsr"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["ingest", "missing.csv"]).status.code(), Some(1));
    std::fs::write(dir.path().join("bad.csv"), "song_id,streams\nx,1\n").unwrap();
    let out = run(dir.path(), &["ingest", "bad.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(run(dir.path(), &["export", "--song", "absent"]).status.code(), Some(1));
}

#[test]
fn simulate_is_deterministic_in_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = ok(dir.path(), &["--seed", "7", "--output-format", "csv", "simulate"]);
    let b = ok(dir.path(), &["--seed", "7", "--output-format", "csv", "simulate"]);
    let c = ok(dir.path(), &["--seed", "8", "--output-format", "csv", "simulate"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.starts_with("song_id,"));
}

#[test]
fn export_round_trips_through_ingest() {
    let dir = tempfile::tempdir().unwrap();
    simulate_and_ingest(dir.path());
    let exported = ok(dir.path(), &["export", "--song", "song-b"]);
    let other = tempfile::tempdir().unwrap();
    std::fs::write(other.path().join("b.csv"), &exported).unwrap();
    ok(other.path(), &["ingest", "b.csv"]);
    assert_eq!(ok(other.path(), &["export", "--song", "song-b"]), exported);
}

#[test]
fn replay_rebuilds_the_store() {
    let dir = tempfile::tempdir().unwrap();
    simulate_and_ingest(dir.path());
    let fit = json(&ok(dir.path(), &["fit-adsr", "--song", "song-c"]));
    let fit_id = fit["fit_id"].as_str().unwrap();
    ok(dir.path(), &["optimize", "--fit", fit_id, "--scheme", "forced", "--budget", "4"]);
    ok(dir.path(), &["classify", "--k", "2"]);

    let target = tempfile::tempdir().unwrap();
    let source = dir.path().join("store");
    let replayed = json(&ok(target.path(), &["replay", "--from", source.to_str().unwrap()]));
    assert_eq!(replayed["replayed"], 4);
    for sub in ["fits", "plans", "songs"] {
        let mut names: Vec<_> = std::fs::read_dir(source.join(sub)).unwrap().map(|e| e.unwrap().file_name()).collect();
        let mut again: Vec<_> =
            std::fs::read_dir(target.path().join("store").join(sub)).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        again.sort();
        assert_eq!(names, again, "{sub}");
    }
    let copy = target.path().join("store").join("fits").join(fit_id).join("fit.json");
    assert_eq!(
        std::fs::read(copy).unwrap(),
        std::fs::read(source.join("fits").join(fit_id).join("fit.json")).unwrap()
    );
}

#[test]
fn fit_adsr_recovers_generator_knots() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = serde_json::json!({ "songs": [{
        "kind": "envelope",
        "song_id": "clean",
        "artist_id": "art",
        "release_date": "2024-01-05",
        "horizon": 40,
        "changepoints": [6, 14, 27, 38],
        "nodes": [1.0e6, 7.0e5, 3.0e5]
    }]});
    std::fs::write(dir.path().join("scenario.json"), scenario.to_string()).unwrap();
    let csv = ok(dir.path(), &["--output-format", "csv", "simulate", "--scenario", "scenario.json"]);
    std::fs::write(dir.path().join("clean.csv"), csv).unwrap();
    ok(dir.path(), &["ingest", "clean.csv"]);
    let fit = json(&ok(dir.path(), &["fit-adsr", "--song", "clean"]));
    let cp = &fit["envelope"]["changepoints"];
    let found: Vec<u64> = ["attack", "sustain", "decay", "release"].iter().map(|k| cp[k].as_u64().unwrap()).collect();
    assert_eq!(found, [6, 14, 27, 38]);
}

#[test]
fn zero_budget_null_plan_spends_nothing() {
    let dir = tempfile::tempdir().unwrap();
    simulate_and_ingest(dir.path());
    std::fs::write(
        dir.path().join("small.json"),
        r#"{ "mcmc": { "chains": 2, "warmup": 100, "samples": 100 } }"#,
    )
    .unwrap();
    let fit = json(&ok(dir.path(), &["--config", "small.json", "fit-null", "--song", "song-a"]));
    let fit_id = fit["fit_id"].as_str().unwrap();
    let plan = json(&ok(dir.path(), &["optimize", "--fit", fit_id, "--scheme", "null", "--budget", "0", "--horizon", "12"]));
    let spend = plan["plan"]["spend"].as_array().unwrap();
    assert_eq!(spend.len(), 12);
    for v in spend.iter().flat_map(|t| t.as_array().unwrap()).flat_map(|j| j.as_array().unwrap()) {
        assert_eq!(v.as_f64(), Some(0.0));
    }
    let out = run(dir.path(), &["optimize", "--fit", fit_id, "--scheme", "forced", "--budget", "1"]);
    assert_eq!(out.status.code(), Some(1));
}
