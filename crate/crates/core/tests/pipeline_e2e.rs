//! Small end-to-end runs: caching, resume and fingerprint handling.

use std::fs;
use std::path::Path;

use leaffew_core::backbones::AdaptationConfig;
use leaffew_core::corpus::QueryCount;
use leaffew_core::heads::{HeadConfig, HeadKind};
use leaffew_core::pipeline::{self, PipelineError, RunConfig, RunOptions, Stage};
use leaffew_core::synthetic::{self, SynthSpec};

fn tiny_config(root: &Path) -> RunConfig {
    let corpus = root.join("corpus");
    if !corpus.join("manifest.csv").exists() {
        synthetic::generate(&SynthSpec::smoke(12, 40, 3), &corpus).unwrap();
    }
    let mut cfg = RunConfig::smoke(corpus.join("manifest.csv"), root.join("out"));
    cfg.init.surrogate = None;
    cfg.resolution = 32;
    cfg.adapt = AdaptationConfig {
        epochs: 1,
        batch_size: 16,
        learning_rate: 1e-2,
        holdout_fraction: 0.2,
        ..AdaptationConfig::default()
    };
    cfg.data.query_per_class = QueryCount::All;
    cfg.heads = vec![
        HeadConfig { epochs: 4, ..HeadConfig::new(HeadKind::Dense) },
        HeadConfig { epochs: 2, hidden_dim: 8, ..HeadConfig::new(HeadKind::Bilstm) },
    ];
    cfg.k_shots = vec![1, 2];
    cfg.repetitions = 3;
    cfg
}

fn opts(cache: &Path) -> RunOptions {
    RunOptions {
        cache_dir: Some(cache.to_path_buf()),
        ..RunOptions::default()
    }
}

fn report_bytes(out: &Path) -> Vec<u8> {
    fs::read(out.join("report/report.json")).unwrap()
}

#[test]
fn rerun_skips_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cache = dir.path().join("cache");
    let first = pipeline::run(&cfg, &opts(&cache)).unwrap();
    assert_eq!(first.executed, Stage::ALL.to_vec());
    let report = first.report.unwrap();
    assert_eq!(report.reports.len(), 4);
    for r in &report.reports {
        assert_eq!(r.n_reps, 3);
        assert!((0.0..=100.0).contains(&r.mean_accuracy));
    }
    for k in [1, 2] {
        assert!((report.majority(k).unwrap() - 100.0 / 6.0).abs() < 1e-9);
    }
    for f in ["tables.md", "tables.csv", "curves.csv", "footprint.md", "report.json"] {
        assert!(dir.path().join("out/report").join(f).is_file(), "{f}");
    }
    let bytes = report_bytes(&cfg.output_dir);

    let second = pipeline::run(&cfg, &opts(&cache)).unwrap();
    assert!(second.executed.is_empty(), "{:?}", second.executed);
    assert_eq!(second.skipped, Stage::ALL.to_vec());
    assert_eq!(report_bytes(&cfg.output_dir), bytes);

    // A damaged repetition file is detected and recomputed identically.
    let cell = fs::read_dir(cfg.output_dir.join("episodes")).unwrap().next().unwrap().unwrap().path();
    fs::remove_file(cell.join("rep-0001.json")).unwrap();
    let third = pipeline::run(&cfg, &opts(&cache)).unwrap();
    assert!(third.executed.contains(&Stage::Episodes));
    assert!(!third.executed.contains(&Stage::Finetune));
    assert_eq!(report_bytes(&cfg.output_dir), bytes);
}

#[test]
fn interrupted_run_resumes_to_the_same_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cache = dir.path().join("cache");
    pipeline::run(&cfg, &opts(&cache)).unwrap();
    let reference = report_bytes(&cfg.output_dir);

    let mut resumed = cfg.clone();
    resumed.output_dir = dir.path().join("out-b");
    resumed.workers = 2;
    let limited = RunOptions {
        max_new_episodes: Some(5),
        ..opts(&cache)
    };
    match pipeline::run(&resumed, &limited) {
        Err(PipelineError::Interrupted { completed }) => assert_eq!(completed, 5),
        other => panic!("expected an interruption, got {other:?}"),
    }
    let finished = pipeline::run(&resumed, &RunOptions { resume: true, ..opts(&cache) }).unwrap();
    assert!(finished.executed.contains(&Stage::Episodes));
    assert_eq!(report_bytes(&resumed.output_dir), reference);
}

#[test]
fn changed_config_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.heads.truncate(1);
    cfg.k_shots = vec![1];
    let cache = dir.path().join("cache");
    pipeline::run(&cfg, &RunOptions { until: Stage::Prepare, ..opts(&cache) }).unwrap();
    cfg.seed = 9;
    let err = pipeline::run(&cfg, &RunOptions { until: Stage::Prepare, ..opts(&cache) }).unwrap_err();
    assert!(matches!(err, PipelineError::FingerprintMismatch { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
    let forced = pipeline::run(&cfg, &RunOptions { until: Stage::Prepare, force: true, ..opts(&cache) }).unwrap();
    assert_eq!(forced.executed, vec![Stage::Prepare]);
}

#[test]
fn resume_without_state_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let err = pipeline::run(&cfg, &RunOptions { resume: true, ..opts(&dir.path().join("cache")) }).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn invalid_config_reports_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.k_shots = vec![1, 50];
    match pipeline::run(&cfg, &opts(&dir.path().join("cache"))) {
        Err(PipelineError::Config(diags)) => {
            assert!(diags.iter().any(|d| d.path == "k_shots[1]" && d.message.contains("Tomato")), "{diags:?}")
        }
        other => panic!("expected a config error, got {other:?}"),
    }
    assert!(!cfg.output_dir.join("state.json").exists());
}
