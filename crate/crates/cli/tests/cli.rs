use std::path::PathBuf;
use std::process::{Command, Output};

fn xtalk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xtalk"))
        .args(args)
        .env("RUST_BACKTRACE", "0")
        .env("XTALK_LOG_LEVEL", "warn")
        .output()
        .expect("run xtalk")
}

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn empty_scenario_replays_to_nothing() {
    let o = xtalk(&["replay", "--scenario", scenarios().join("empty").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "");
}

#[test]
fn replay_matches_the_golden_log() {
    let dir = scenarios().join("basic_turn");
    let o = xtalk(&["replay", "--scenario", dir.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), std::fs::read_to_string(dir.join("golden.log")).unwrap());
}

#[test]
fn wrong_typed_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[rules]\nfiller_words = 3\n").unwrap();
    let o = xtalk(&["check-config", "--config", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("rules.filler_words"));
}

#[test]
fn check_config_prints_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("partial.toml");
    std::fs::write(&path, "[asr]\nmode = \"streaming\"\n").unwrap();
    let o = xtalk(&["check-config", "--config", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let full = dir.path().join("full.toml");
    std::fs::write(&full, stdout(&o)).unwrap();
    let again = xtalk(&["check-config", "--config", full.to_str().unwrap()]);
    assert_eq!(stdout(&again), stdout(&o));
    assert!(stdout(&o).contains("streaming"));
}

#[test]
fn bench_subset_prints_table_and_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.jsonl");
    let o = xtalk(&[
        "bench", "--lengths", "5,10", "--langs", "cn", "--combos", "streaming,offline", "--runs", "1", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 3, "{table}");
    assert!(table.lines().any(|l| l.starts_with("streaming")));
    let lines = std::fs::read_to_string(&out).unwrap();
    assert_eq!(lines.lines().count(), 4);
    for l in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["e2e_ms"].as_u64().unwrap() > 0);
    }
}

#[test]
fn gen_scenarios_writes_loadable_directories() {
    let dir = tempfile::tempdir().unwrap();
    let o = xtalk(&["gen-scenarios", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    for name in ["corpus", "basic_turn", "barge_in", "empty"] {
        assert!(dir.path().join(name).is_dir(), "{name}");
    }
    let replayed = xtalk(&["replay", "--scenario", dir.path().join("basic_turn").to_str().unwrap()]);
    let golden = std::fs::read_to_string(scenarios().join("basic_turn/golden.log")).unwrap();
    assert_eq!(stdout(&replayed), golden);
}
