use super::*;
use crate::corpus::{Background, EpisodeItem, ImageRecord};
use crate::reference::PLANT_VILLAGE;

/// Manifest with the given (crop, label, count) rows; image files need not exist.
fn fake_manifest(dir: &Path, rows: &[(&str, &str, usize)]) -> PathBuf {
    let mut records = Vec::new();
    for (crop, label, n) in rows {
        for i in 0..*n {
            records.push(ImageRecord {
                image_id: format!("{label}-{i}"),
                path: dir.join(format!("{label}/{i}.png")),
                class_label: label.to_string(),
                crop: crop.to_string(),
                background: Background::Lab,
            });
        }
    }
    let m = DatasetManifest::from_records("fake", dir, records, None).unwrap();
    let path = dir.join("manifest.csv");
    m.write(&path).unwrap();
    path
}

fn plant_village(dir: &Path) -> PathBuf {
    fake_manifest(dir, &PLANT_VILLAGE)
}

fn has_path(diags: &[Diagnostic], prefix: &str) -> bool {
    diags.iter().any(|d| d.path.starts_with(prefix))
}

#[test]
fn s1_preset_on_full_roster_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::preset(SetupId::S1);
    cfg.data.manifest = plant_village(dir.path());
    let diags = validate_config(&cfg);
    assert!(diags.is_empty(), "{diags:?}");
}

#[test]
fn s2_rejects_adaptation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::preset(SetupId::S2);
    cfg.data.manifest = plant_village(dir.path());
    assert!(validate_config(&cfg).is_empty());
    cfg.adaptation = true;
    assert!(has_path(&validate_config(&cfg), "adaptation"));
}

#[test]
fn nonstandard_repetitions_need_opt_in() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::preset(SetupId::S1);
    cfg.data.manifest = plant_village(dir.path());
    cfg.repetitions = 7;
    assert!(has_path(&validate_config(&cfg), "repetitions"));
    cfg.allow_nonstandard_repetitions = true;
    assert!(validate_config(&cfg).is_empty());
}

#[test]
fn oversized_k_names_the_class() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::preset(SetupId::S1);
    cfg.data.manifest = fake_manifest(
        dir.path(),
        &[
            ("Apple", "Apple___healthy", 200),
            ("Corn", "Corn___healthy", 200),
            ("Tomato", "Tomato___healthy", 200),
            ("Tomato", "Tomato___Leaf_Mold", 50),
        ],
    );
    cfg.data.roster = Some(SetupRoster::relaxed(SetupId::S1));
    cfg.data.query_per_class = QueryCount::All;
    cfg.k_shots = vec![5, 80];
    let diags = validate_config(&cfg);
    assert_eq!(diags.len(), 1, "{diags:?}");
    assert_eq!(diags[0].path, "k_shots[1]");
    assert!(diags[0].message.contains("Tomato___Leaf_Mold"), "{}", diags[0].message);
    assert!(diags[0].message.contains("40 images"), "{}", diags[0].message);
}

#[test]
fn query_capacity_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::preset(SetupId::S1);
    cfg.data.manifest = fake_manifest(
        dir.path(),
        &[("Apple", "Apple___healthy", 20), ("Corn", "Corn___healthy", 20), ("Tomato", "Tomato___healthy", 100)],
    );
    cfg.data.roster = Some(SetupRoster::relaxed(SetupId::S1));
    cfg.k_shots = vec![1];
    let diags = validate_config(&cfg);
    assert!(has_path(&diags, "data.query_per_class"), "{diags:?}");
}

#[test]
fn static_checks_collect_every_problem() {
    let mut cfg = RunConfig::preset(SetupId::S1);
    cfg.k_shots = vec![0, 5, 5];
    cfg.backbones = vec![Architecture::Mnv2, Architecture::Mnv2];
    cfg.data.split_ratio = 1.0;
    cfg.resolution = 16;
    let diags = validate_config(&cfg);
    for p in ["k_shots[0]", "k_shots[2]", "backbones[1]", "data.split_ratio", "resolution"] {
        assert!(diags.iter().any(|d| d.path == p), "missing {p}: {diags:?}");
    }
}

#[test]
fn fingerprint_ignores_paths_name_and_workers() {
    let mut a = RunConfig::preset(SetupId::S1);
    a.data.manifest = "/x/manifest.csv".into();
    let mut b = a.clone();
    b.name = "other".into();
    b.output_dir = "/elsewhere".into();
    b.workers = 3;
    b.data.manifest = "/y/manifest.csv".into();
    assert_eq!(a.scientific(), b.scientific());
    b.seed = 1;
    assert_ne!(a.scientific(), b.scientific());
}

#[test]
fn config_round_trips_and_rejects_unknown_fields() {
    let cfg = RunConfig::smoke("m.csv", "out");
    let text = serde_json::to_string(&cfg).unwrap();
    let back: RunConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    assert!(serde_json::from_str::<RunConfig>(r#"{"k_shot": [1]}"#).is_err());
    let partial: RunConfig = serde_json::from_str(r#"{"setup": "s3"}"#).unwrap();
    assert_eq!(partial.setup, SetupId::S3);
}

#[test]
fn load_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    fs::write(&path, r#"{"data": {"manifest": "data/m.csv"}, "output_dir": "out"}"#).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.data.manifest, dir.path().join("data/m.csv"));
    assert_eq!(cfg.output_dir, dir.path().join("out"));
}

#[test]
fn exit_codes() {
    assert_eq!(PipelineError::Config(vec![]).exit_code(), 2);
    let mismatch = PipelineError::FingerprintMismatch { path: "s".into(), found: "a".into(), expected: "b".into() };
    assert_eq!(mismatch.exit_code(), 2);
    let failed = PipelineError::Stage { stage: Stage::Extract, message: "x".into() };
    assert_eq!(failed.exit_code(), 3);
}

#[test]
fn majority_share_counts_the_largest_class() {
    let q: Vec<EpisodeItem> = ["a", "b", "b", "c"]
        .iter()
        .enumerate()
        .map(|(i, c)| EpisodeItem { image_id: i.to_string(), class_label: c.to_string() })
        .collect();
    assert!((majority_share(&q) - 0.5).abs() < 1e-12);
}
