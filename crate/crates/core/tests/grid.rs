mod common;

use common::{injected_record, plan_path, TINY_PLAN};
use viny::checkpoint::load_checkpoint;
use viny::exprunner::store::Status;
use viny::exprunner::{
    emit_plot, emit_table, plan_cells, run_grid, ExperimentPlan, GridOptions, PlotKind, Store, TableSelect,
};
use viny::Error;

fn opts(resume: bool) -> GridOptions {
    GridOptions { resume, jobs: 1 }
}

#[test]
fn full_plan_enumerates_every_cell_once() {
    let plan = ExperimentPlan::load(&plan_path("full.toml")).unwrap();
    let cells = plan_cells(&plan);
    assert_eq!(cells.len(), 144);
    let mut hashes: Vec<_> = cells.iter().map(|c| c.config_hash.clone()).collect();
    hashes.sort();
    hashes.dedup();
    assert_eq!(hashes.len(), 144);
    let pretrain_runs: std::collections::BTreeSet<_> = cells.iter().map(|c| &c.pretrain_hash).collect();
    assert_eq!(pretrain_runs.len(), 4 * 3);
}

#[test]
fn desk_plan_is_valid() {
    let plan = ExperimentPlan::load(&plan_path("desk.toml")).unwrap();
    assert_eq!(plan_cells(&plan).len(), 12);
}

#[test]
fn tiny_plan_runs_resumes_and_retrains_one() {
    let dir = tempfile::tempdir().unwrap();
    let plan = ExperimentPlan::from_toml_str(TINY_PLAN).unwrap();
    let store = Store::open(dir.path()).unwrap();

    let first = run_grid(&plan, &store, opts(true)).unwrap();
    assert_eq!((first.trained, first.skipped, first.failed), (1, 0, 0));
    assert_eq!(first.pretrain_runs, 1);
    let records = store.records().unwrap();
    assert_eq!(records.len(), 1);
    let rec = &records[0];
    assert_eq!(rec.status, Status::Complete);
    assert!(rec.metrics.as_ref().unwrap().miou.is_finite());
    assert_eq!(rec.history.len(), 4);
    assert!(store.history_path(&rec.config_hash).exists());

    let ckpt = rec
        .checkpoints
        .iter()
        .find(|c| c.contains("pretrain"))
        .expect("pre-training checkpoint");
    let loaded = load_checkpoint(&store.resolve(ckpt)).unwrap();
    assert_eq!(loaded.manifest.config, plan.model);

    let again = run_grid(&plan, &store, opts(true)).unwrap();
    assert_eq!((again.trained, again.skipped), (0, 1));

    store.delete_record(&rec.config_hash).unwrap();
    let redo = run_grid(&plan, &store, opts(true)).unwrap();
    assert_eq!((redo.trained, redo.skipped), (1, 0));
    assert_eq!(redo.pretrain_runs, 0, "pre-training comes from the cached checkpoint");
    let after = store.read_record(&rec.config_hash).unwrap().unwrap();
    assert_eq!(after.metrics, rec.metrics);
}

#[test]
fn missing_folder_fails_the_cell_not_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY_PLAN.replace(
        "source = { synthetic = 8 }\nkind = \"segmentation\"",
        "source = { folder = \"/nonexistent/pets\" }\nkind = \"segmentation\"",
    );
    let plan = ExperimentPlan::from_toml_str(&text).unwrap();
    let store = Store::open(dir.path()).unwrap();
    let summary = run_grid(&plan, &store, opts(false)).unwrap();
    assert_eq!(summary.failed, 1);
    let rec = &store.records().unwrap()[0];
    assert_eq!(rec.status, Status::Failed);
    assert!(rec.failure.is_some());
}

#[test]
fn reports_from_injected_records() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    assert!(matches!(emit_table(&store, TableSelect::All), Err(Error::Empty(_))));
    assert!(matches!(emit_plot(&store, PlotKind::Delta), Err(Error::Empty(_))));

    store
        .write_record(&injected_record(45000, true, 250, 0, 74.65, 48.92))
        .unwrap();
    store
        .write_record(&injected_record(45000, false, 250, 0, 77.44, 52.73))
        .unwrap();
    let plot = emit_plot(&store, PlotKind::Delta).unwrap();
    assert_eq!(format!("{:.2}", plot.series[0].points[0].mean), "-3.81");
    let (md, csv) = emit_table(&store, TableSelect::All).unwrap();
    assert!(md.contains("52.73"), "{md}");
    assert_eq!(csv.lines().count(), 3);
}
