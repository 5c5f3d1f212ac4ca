use edgetp::harness::*;
use edgetp::runtime::SyncMode;
use edgetp::scheduler::DeviceProfile;

fn small() -> ExperimentConfig {
    ExperimentConfig {
        devices: vec![
            DeviceProfile::new(0, 1e6, 1.0, 0.0),
            DeviceProfile::new(1, 1e6, 1.5, 0.0),
            DeviceProfile::new(2, 1e6, 1.0, 0.0),
        ],
        prompt_len: 4,
        num_tokens: 4,
        seeds: vec![0, 1, 2],
        ..Default::default()
    }
}

fn records_bytes(r: &Report) -> Vec<u8> {
    let mut buf = Vec::new();
    r.write_records(&mut buf).unwrap();
    buf
}

#[test]
fn one_cell_matrix_equals_single_runs() {
    let cfg = small();
    let prepared = Prepared::new(&cfg).unwrap();
    let report = prepared.run_all();
    let cells = prepared.cells();
    assert_eq!(cells.len(), 1);
    assert_eq!(report.records.len(), 3);
    for rec in &report.records {
        let g = prepared.run(&cells[0], &cfg.devices, rec.seed).unwrap();
        assert_eq!(rec.tokens, g.tokens);
        assert_eq!(rec.mean_tpt, Some(g.metrics.mean_tpt()));
        assert_eq!(rec.messages, g.messages);
    }
    assert_eq!(report.summary.len(), 1);
    assert_eq!(report.summary[0].runs, 3);
}

#[test]
fn output_is_byte_identical_across_thread_counts() {
    let mut cfg = small();
    cfg.matrix.plr = vec![0.0, 0.1, 0.3];
    cfg.matrix.sync = vec![SyncMode::Relaxed, SyncMode::Reliable];
    cfg.threads = 1;
    let a = run_matrix(&cfg).unwrap();
    cfg.threads = 5;
    let b = run_matrix(&cfg).unwrap();
    assert_eq!(records_bytes(&a), records_bytes(&b));
    let (mut sa, mut sb) = (Vec::new(), Vec::new());
    a.write_summary_csv(&mut sa).unwrap();
    b.write_summary_csv(&mut sb).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(a.config_hash, b.config_hash);
}

#[test]
fn summary_regenerates_from_saved_records() {
    let mut cfg = small();
    cfg.matrix.plr = vec![0.0, 0.2];
    cfg.matrix.sync = vec![SyncMode::Relaxed, SyncMode::Reliable];
    cfg.matrix.baseline = Some(BaselineSelector {
        sync: Some(SyncMode::Reliable),
        ..Default::default()
    });
    let report = run_matrix(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    report.save(dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("records.jsonl")).unwrap();
    let records = read_records(&text).unwrap();
    assert_eq!(records, report.records);
    let rows = summarize(&records, cfg.matrix.baseline.as_ref());
    assert_eq!(rows, report.summary);
    let mut csv = Vec::new();
    write_summary_csv(&rows, &mut csv).unwrap();
    assert_eq!(csv, std::fs::read(dir.path().join("summary.csv")).unwrap());
    for row in rows.iter().filter(|r| r.cell.sync == SyncMode::Reliable) {
        assert_eq!(row.speedup, Some(1.0));
    }
}

#[test]
fn failed_runs_are_recorded_and_the_matrix_continues() {
    let mut cfg = small();
    cfg.devices[0].memory_mb = 300.0;
    cfg.devices[1].memory_mb = 5700.0;
    cfg.devices[2].memory_mb = 300.0;
    cfg.total_memory_mb = Some(6000.0);
    cfg.matrix.scheduler = vec![SchedulerKind::MinMax, SchedulerKind::VanillaEven];
    let report = run_matrix(&cfg).unwrap();
    assert_eq!(report.records.len(), 6);
    for rec in &report.records {
        match rec.cell.scheduler {
            SchedulerKind::VanillaEven => {
                let err = rec.error.as_deref().unwrap();
                assert!(err.contains("out of memory"), "{err}");
                assert!(rec.mean_tpt.is_none());
            }
            _ => assert!(rec.error.is_none(), "{:?}", rec.error),
        }
    }
    let vanilla = report.summary.iter().find(|r| r.cell.scheduler == SchedulerKind::VanillaEven).unwrap();
    assert_eq!((vanilla.runs, vanilla.errors, vanilla.mean_tpt), (3, 3, None));
}

#[test]
fn config_overrides_and_hash() {
    let cfg = small();
    let text = cfg.to_toml();
    let back = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    let changed = ExperimentConfig::from_toml_with(&text, &["model.num_layers=2".into(), "sync=reliable".into()]).unwrap();
    assert_eq!(changed.model.num_layers, 2);
    assert_eq!(changed.sync, SyncMode::Reliable);
    assert_ne!(changed.hash(), cfg.hash());
    assert!(ExperimentConfig::from_toml_with(&text, &["bogus=1".into()]).is_err());
    assert!(ExperimentConfig::from_toml_with(&text, &["no_equals_sign".into()]).is_err());
}

#[test]
fn scenario_matrix_runs_every_set() {
    let cfg = presets::heterogeneous_schedulers(4, 3, 5);
    let report = run_matrix(&ExperimentConfig { num_tokens: 2, ..cfg }).unwrap();
    assert_eq!(report.records.len(), 9);
    let scenarios: std::collections::BTreeSet<_> = report.records.iter().map(|r| r.scenario).collect();
    assert_eq!(scenarios.len(), 3);
    for r in report.records.iter().filter(|r| r.cell.scheduler != SchedulerKind::VanillaEven) {
        assert_eq!(r.missing_groups, 0);
        assert!(r.error.is_none());
    }
}
