//! End-to-end harness flow on a tiny stacking configuration.

use ntg::harness::acceptance::repro_config;
use ntg::harness::{
    build_dataset, evaluate, export, load_dataset, load_runs, save_run, train_all, write_dataset, AblationFlags, HarnessError, ResetMode,
    RunRecord, TrainedModels, METRICS_HEADER,
};

#[test]
fn dataset_models_and_reports_round_trip() {
    let cfg = repro_config().unwrap();
    let dir = tempfile::tempdir().unwrap();

    let ds = build_dataset(&cfg).unwrap();
    assert_eq!((ds.seen.len(), ds.unseen.len()), (cfg.seen_tasks, cfg.unseen_tasks));
    write_dataset(&ds, &dir.path().join("dataset")).unwrap();
    assert_eq!(load_dataset(&dir.path().join("dataset")).unwrap(), ds);

    let models = train_all(&cfg, &ds).unwrap();
    let ckpt = dir.path().join("checkpoints");
    models.save(&ckpt).unwrap();
    let loaded = TrainedModels::load(&ckpt).unwrap();
    assert_eq!(loaded.executor, models.executor);
    assert_eq!(loaded.gcn, models.gcn);
    assert!(loaded.no_graph.is_some());

    let mut run = RunRecord::new("eval", &cfg);
    run.runs
        .push(evaluate(&cfg, &loaded, &ds.world, &ds.unseen, &AblationFlags::default(), ResetMode::Fresh).unwrap());
    let c = &run.runs[0];
    assert_eq!(c.episodes.len(), cfg.unseen_tasks);
    assert_eq!(c.retention_violations(), 0);
    assert!(c.edges.is_some());

    save_run(dir.path(), &run).unwrap();
    assert_eq!(load_runs(dir.path()).unwrap(), vec![run]);
    let rows = export(dir.path()).unwrap();
    assert_eq!(rows.len(), 1);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(fields[..5], ["repro", "full", "stacking", "30", "10"]);
    assert_eq!(fields[8], "0.000");
    assert!(dir.path().join("summary.txt").exists());
}

#[test]
fn export_without_runs_reports_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(export(dir.path()), Err(HarnessError::Missing(_))));
    assert!(matches!(TrainedModels::load(dir.path()), Err(HarnessError::Missing(p)) if p.len() == 3));
}
