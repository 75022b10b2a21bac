mod common;

use common::paused;
use xtalk_core::config::AppConfig;
use xtalk_core::corpus::generate_corpus;
use xtalk_core::scenario::Lang;
use xtalk_core::telemetry::bench::{run_bench, standard_combos, BenchError, BenchGrid};

fn grid(lengths_s: Vec<u64>) -> BenchGrid {
    BenchGrid {
        lengths_s,
        langs: vec![Lang::Cn],
        runs: 2,
    }
}

#[test]
fn subset_grid_yields_one_cell_per_combo_and_length() {
    let combos = standard_combos(&AppConfig::default());
    let report = paused(run_bench(&generate_corpus(), &combos, &grid(vec![5, 10]))).unwrap();
    assert_eq!(report.cells.len(), combos.len() * 2);
    for c in &combos {
        for len in [5, 10] {
            let cell = report.cell(&c.name, Lang::Cn, len).unwrap();
            assert_eq!(cell.runs_ms.len(), 2);
            assert!(cell.e2e_ms > 0);
        }
    }
    assert_eq!(report.table().lines().count(), combos.len() + 1);
}

#[test]
fn bench_output_is_reproducible() {
    let combos = standard_combos(&AppConfig::default());
    let a = paused(run_bench(&generate_corpus(), &combos, &grid(vec![5]))).unwrap();
    let b = paused(run_bench(&generate_corpus(), &combos, &grid(vec![5]))).unwrap();
    assert_eq!(a.jsonl(), b.jsonl());
}

#[test]
fn offline_grows_with_length_while_streaming_stays_flat() {
    let combos = standard_combos(&AppConfig::default());
    let report = paused(run_bench(&generate_corpus(), &combos, &grid(vec![5, 60]))).unwrap();
    let e2e = |name: &str, len| report.cell(name, Lang::Cn, len).unwrap().e2e_ms;
    assert!(e2e("offline", 60) > e2e("offline", 5) + 100);
    assert!(e2e("streaming", 60).abs_diff(e2e("streaming", 5)) < 50);
}

#[test]
fn missing_length_is_reported() {
    let combos = standard_combos(&AppConfig::default());
    let err = paused(run_bench(&generate_corpus(), &combos, &grid(vec![7]))).unwrap_err();
    assert!(matches!(err, BenchError::ScenarioMissing { length_s: 7, .. }), "{err}");
}
