//! Run configuration, presets, validation and the resumable stage runner
//! (prepare → finetune → extract → episodes → report).
//!
//! Expensive artifacts live under a cache root (`LEAFFEW_CACHE_DIR`, or
//! `<output_dir>/cache`) in directories named by a fingerprint of everything
//! that determines them, so changing a hyperparameter invalidates exactly the
//! downstream artifacts. Each repetition is written to its own file by a
//! worker; only the orchestrator writes `state.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use leaffew_mobilenet::{weights, Architecture};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbones::{
    self, cache_file_name, finetune_backbone, initial_backbone, write_atomic, AdaptationConfig, AdaptationTag,
    AdaptedBackbone, FeatureCache, PreprocessSpec,
};
use crate::corpus::{
    load_manifest_with, make_class_split_with, partition_filtered, sample_episode, ClassSplit, DatasetManifest,
    EpisodeItem, EpisodeSpec, ImageCheck, PartitionedClass, QueryCount, SetupId, SetupRoster,
};
use crate::footprint::{footprint_with_head, BackboneSpec, FootprintSummary};
use crate::fusion::{FusedFeature, FusionLayout, SequenceMode};
use crate::heads::{self, HeadConfig, HeadKind, InputLayout, Prediction};
use crate::metrics::{self, AggregateReport, CiMethod, EpisodeResult, ReportContext, TableFormat};
use crate::reference;
use crate::seeds::{derive_seed, fingerprint, sha256_hex};
use crate::synthetic::{self, SynthSpec};

/// Environment variable naming the shared artifact cache.
pub const CACHE_ENV: &str = "LEAFFEW_CACHE_DIR";
pub const STATE_FILE: &str = "state.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prepare,
    Finetune,
    Extract,
    Episodes,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Prepare, Stage::Finetune, Stage::Extract, Stage::Episodes, Stage::Report];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Finetune => "finetune",
            Stage::Extract => "extract",
            Stage::Episodes => "episodes",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One configuration problem, located by a dotted path into the config.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn diag(path: impl Into<String>, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        path: path.into(),
        message: message.into(),
    }
}

fn join_diagnostics(d: &[Diagnostic]) -> String {
    d.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration:\n{}", join_diagnostics(.0))]
    Config(Vec<Diagnostic>),
    #[error("{path} belongs to configuration {found}, not {expected}; rerun with --force to discard it")]
    FingerprintMismatch { path: PathBuf, found: String, expected: String },
    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: Stage, message: String },
    #[error("stopped after {completed} new episodes as requested")]
    Interrupted { completed: usize },
}

impl PipelineError {
    /// 2 for configuration problems, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::FingerprintMismatch { .. } => 2,
            PipelineError::Stage { .. } | PipelineError::Interrupted { .. } => 3,
        }
    }
}

fn stage_err(stage: Stage) -> impl Fn(String) -> PipelineError {
    move |message| PipelineError::Stage { stage, message }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Evaluation manifest (meta-test classes come from here).
    pub manifest: PathBuf,
    /// Manifest the backbones adapt on; defaults to `manifest`.
    pub adapt_manifest: Option<PathBuf>,
    /// Class roster; defaults to the setup preset.
    pub roster: Option<SetupRoster>,
    /// Fraction of each meta-test class in the support pool.
    pub split_ratio: f64,
    pub query_per_class: QueryCount,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::new(),
            adapt_manifest: None,
            roster: None,
            split_ratio: 0.8,
            query_per_class: QueryCount::Count(50),
        }
    }
}

/// Procedural pretraining that stands in for ImageNet weights when none are
/// supplied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub classes: usize,
    pub per_class: usize,
    pub training: AdaptationConfig,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            classes: 24,
            per_class: 40,
            training: AdaptationConfig {
                epochs: 8,
                batch_size: 32,
                learning_rate: 1e-2,
                patience: 0,
                ..AdaptationConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Directory of `<arch>.safetensors` ImageNet weights (torchvision names).
    pub weights_dir: Option<PathBuf>,
    /// Used for any backbone without a weights file.
    pub surrogate: Option<SurrogateConfig>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: SequenceMode,
    pub d_tok: usize,
    /// L2-normalize each backbone slice before fusion.
    pub l2_normalize: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: SequenceMode::PerBackbone,
            d_tok: 256,
            l2_normalize: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub setup: SetupId,
    pub data: DataConfig,
    pub backbones: Vec<Architecture>,
    pub adaptation: bool,
    pub adapt: AdaptationConfig,
    pub init: InitConfig,
    /// Square input side fed to the backbones.
    pub resolution: u32,
    pub fusion: FusionConfig,
    pub heads: Vec<HeadConfig>,
    pub k_shots: Vec<usize>,
    pub repetitions: usize,
    pub allow_nonstandard_repetitions: bool,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Episode worker threads (0 = one per core).
    pub workers: usize,
    pub ci_method: CiMethod,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(SetupId::S1)
    }
}

/// Repetitions each setup is averaged over.
pub fn standard_repetitions(setup: SetupId) -> usize {
    match setup {
        SetupId::S1 | SetupId::S3 => 100,
        SetupId::S2 => 20,
    }
}

impl RunConfig {
    /// Reproduction preset: every head kind at the published shot counts.
    /// Data paths are left empty.
    pub fn preset(setup: SetupId) -> Self {
        Self {
            name: setup.as_str().to_string(),
            setup,
            data: DataConfig::default(),
            backbones: Architecture::ALL.to_vec(),
            adaptation: setup != SetupId::S2,
            adapt: AdaptationConfig::default(),
            init: InitConfig::default(),
            resolution: 224,
            fusion: FusionConfig::default(),
            heads: HeadKind::ALL.iter().map(|&k| HeadConfig::new(k)).collect(),
            k_shots: reference::published_shots(setup).to_vec(),
            repetitions: standard_repetitions(setup),
            allow_nonstandard_repetitions: false,
            seed: 0,
            output_dir: PathBuf::from(format!("runs/{}", setup.as_str())),
            workers: 0,
            ci_method: CiMethod::Normal,
        }
    }

    /// Desk-scale Setup-1-style run on a ten-class corpus such as
    /// [`SynthSpec::smoke`]: 64-pixel inputs, surrogate pretraining, a
    /// three-epoch adaptation and Bi-LSTM heads at 1, 5 and 15 shots.
    pub fn smoke(manifest: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        let base = Self::preset(SetupId::S1);
        Self {
            name: "smoke".into(),
            data: DataConfig {
                manifest: manifest.into(),
                roster: Some(SetupRoster::relaxed(SetupId::S1)),
                query_per_class: QueryCount::All,
                ..DataConfig::default()
            },
            adapt: AdaptationConfig {
                epochs: 3,
                batch_size: 32,
                learning_rate: 1e-2,
                ..AdaptationConfig::default()
            },
            init: InitConfig {
                surrogate: Some(SurrogateConfig::default()),
                ..InitConfig::default()
            },
            resolution: 64,
            heads: vec![HeadConfig::new(HeadKind::Bilstm)],
            k_shots: vec![1, 5, 15],
            repetitions: 10,
            allow_nonstandard_repetitions: true,
            output_dir: output_dir.into(),
            ..base
        }
    }

    /// Reads a JSON config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(vec![diag("config", format!("cannot read {}: {e}", path.display()))]))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(vec![diag("config", format!("{}: {e}", path.display()))]))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.manifest);
        if let Some(p) = &mut self.data.adapt_manifest {
            fix(p);
        }
        if let Some(p) = &mut self.init.weights_dir {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn roster(&self) -> SetupRoster {
        self.data.roster.clone().unwrap_or_else(|| SetupRoster::preset(self.setup))
    }

    pub fn preprocess(&self) -> PreprocessSpec {
        PreprocessSpec::for_resolution(self.resolution)
    }

    pub fn input_layout(&self) -> InputLayout {
        InputLayout::new(FusionLayout::of(&self.backbones), self.fusion.mode, self.fusion.d_tok)
    }

    /// The fields that determine results: paths, worker count and the run
    /// name are dropped (data enters through manifest digests instead).
    fn scientific(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("serializable config");
        let obj = v.as_object_mut().expect("object");
        for k in ["name", "output_dir", "workers"] {
            obj.remove(k);
        }
        if let Some(d) = obj.get_mut("data").and_then(|d| d.as_object_mut()) {
            d.remove("manifest");
            d.remove("adapt_manifest");
        }
        if let Some(i) = obj.get_mut("init").and_then(|d| d.as_object_mut()) {
            i.remove("weights_dir");
        }
        v
    }
}

/// Loaded manifests and the derived split.
#[derive(Clone, Debug)]
pub struct RunData {
    pub evaluation: DatasetManifest,
    pub adaptation: Option<DatasetManifest>,
    pub split: ClassSplit,
    pub partitions: Vec<PartitionedClass>,
}

impl RunData {
    pub fn load(cfg: &RunConfig, check: ImageCheck) -> Result<Self, Diagnostic> {
        let load = |path: &Path, field: &str| {
            if path.as_os_str().is_empty() {
                return Err(diag(field, "no manifest given"));
            }
            if !path.exists() {
                return Err(diag(field, format!("{} does not exist", path.display())));
            }
            load_manifest_with(path, check).map_err(|e| diag(field, e.to_string()))
        };
        let evaluation = load(&cfg.data.manifest, "data.manifest")?;
        let adaptation = match &cfg.data.adapt_manifest {
            Some(p) => Some(load(p, "data.adapt_manifest")?),
            None => None,
        };
        let split = make_class_split_with(&evaluation, adaptation.as_ref(), cfg.setup, &cfg.roster())
            .map_err(|e| diag("data.roster", e.to_string()))?;
        let partitions = partition_filtered(
            &evaluation,
            &split.meta_test_classes,
            cfg.data.split_ratio,
            cfg.seed,
            split.test_background,
        )
        .map_err(|e| diag("data.split_ratio", e.to_string()))?;
        Ok(Self {
            evaluation,
            adaptation,
            split,
            partitions,
        })
    }

    pub fn adaptation_manifest(&self) -> &DatasetManifest {
        self.adaptation.as_ref().unwrap_or(&self.evaluation)
    }

    /// Records of the meta-test classes, the only ones ever embedded.
    pub fn test_manifest(&self) -> DatasetManifest {
        self.evaluation
            .restrict(&self.split.meta_test_classes)
            .expect("split classes come from the manifest")
    }

    pub fn train_manifest(&self) -> DatasetManifest {
        self.adaptation_manifest()
            .restrict(&self.split.meta_train_classes)
            .expect("split classes come from the manifest")
    }
}

/// Every invariant violation in `cfg`, including capacity checks against the
/// data when the manifests can be read. Empty means runnable.
pub fn validate_config(cfg: &RunConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if cfg.setup == SetupId::S2 && cfg.adaptation {
        out.push(diag(
            "adaptation",
            "setup s2 evaluates the ImageNet-only backbones; the feature extractors must not be fine-tuned",
        ));
    }
    let standard = standard_repetitions(cfg.setup);
    if cfg.repetitions == 0 {
        out.push(diag("repetitions", "must be positive"));
    } else if cfg.repetitions != standard && !cfg.allow_nonstandard_repetitions {
        out.push(diag(
            "repetitions",
            format!(
                "setup {} averages over {standard} repetitions, got {}; set allow_nonstandard_repetitions to override",
                cfg.setup, cfg.repetitions
            ),
        ));
    }
    if cfg.backbones.is_empty() {
        out.push(diag("backbones", "at least one backbone is required"));
    }
    let mut seen = BTreeSet::new();
    for (i, b) in cfg.backbones.iter().enumerate() {
        if !seen.insert(*b) {
            out.push(diag(format!("backbones[{i}]"), format!("{b} listed twice")));
        }
    }
    if cfg.heads.is_empty() {
        out.push(diag("heads", "at least one head is required"));
    }
    let mut kinds = BTreeSet::new();
    for (i, h) in cfg.heads.iter().enumerate() {
        if let Err(e) = h.validate() {
            out.push(diag(format!("heads[{i}]"), e.to_string()));
        }
        if !kinds.insert(h.kind.as_str()) {
            out.push(diag(format!("heads[{i}].kind"), format!("{} listed twice", h.kind)));
        }
    }
    if cfg.k_shots.is_empty() {
        out.push(diag("k_shots", "at least one shot count is required"));
    }
    let mut ks = BTreeSet::new();
    for (i, &k) in cfg.k_shots.iter().enumerate() {
        if k == 0 {
            out.push(diag(format!("k_shots[{i}]"), "must be positive"));
        }
        if !ks.insert(k) {
            out.push(diag(format!("k_shots[{i}]"), format!("{k} listed twice")));
        }
    }
    if !(cfg.data.split_ratio > 0.0 && cfg.data.split_ratio < 1.0) {
        out.push(diag("data.split_ratio", format!("must lie in (0, 1), got {}", cfg.data.split_ratio)));
    }
    if cfg.data.query_per_class == QueryCount::Count(0) {
        out.push(diag("data.query_per_class", "must be positive"));
    }
    if cfg.fusion.d_tok == 0 {
        out.push(diag("fusion.d_tok", "must be positive"));
    }
    if cfg.resolution < 32 {
        out.push(diag("resolution", format!("must be at least 32, got {}", cfg.resolution)));
    }
    if cfg.adaptation {
        if cfg.adapt.batch_size < 2 {
            out.push(diag("adapt.batch_size", "must be at least 2"));
        }
        if !(cfg.adapt.holdout_fraction >= 0.0 && cfg.adapt.holdout_fraction < 1.0) {
            out.push(diag("adapt.holdout_fraction", "must lie in [0, 1)"));
        }
    }
    if let Some(s) = &cfg.init.surrogate {
        if s.classes < 2 || s.per_class < 2 {
            out.push(diag("init.surrogate", "needs at least two classes of two images"));
        }
        if s.training.batch_size < 2 {
            out.push(diag("init.surrogate.training.batch_size", "must be at least 2"));
        }
    }
    if let Some(d) = &cfg.init.weights_dir {
        if !d.is_dir() {
            out.push(diag("init.weights_dir", format!("{} is not a directory", d.display())));
        }
    }
    if !out.is_empty() {
        return out;
    }
    match RunData::load(cfg, ImageCheck::Skip) {
        Err(d) => out.push(d),
        Ok(data) => {
            if cfg.adaptation && data.split.meta_train_classes.len() < 2 {
                out.push(diag("data.roster", "adaptation needs at least two meta-train classes"));
            }
            for (i, &k) in cfg.k_shots.iter().enumerate() {
                for p in &data.partitions {
                    if k > p.support_pool.len() {
                        out.push(diag(
                            format!("k_shots[{i}]"),
                            format!(
                                "k={k} exceeds the support pool of class `{}` ({} images)",
                                p.class_label,
                                p.support_pool.len()
                            ),
                        ));
                    }
                }
            }
            if let QueryCount::Count(q) = cfg.data.query_per_class {
                for p in &data.partitions {
                    if q > p.query_pool.len() {
                        out.push(diag(
                            "data.query_per_class",
                            format!(
                                "{q} exceeds the query pool of class `{}` ({} images)",
                                p.class_label,
                                p.query_pool.len()
                            ),
                        ));
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub path: PathBuf,
}

/// Progress record; written only by the orchestrator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub fingerprint: String,
    pub completed_stages: Vec<Stage>,
    /// Backbone artifacts and feature caches in use.
    pub caches: BTreeMap<String, CacheEntry>,
    /// Per-cell repetition bitmap (`1` = result file verified).
    pub episodes: BTreeMap<String, String>,
}

impl RunState {
    pub fn is_complete(&self, stage: Stage) -> bool {
        self.completed_stages.contains(&stage)
    }

    fn mark(&mut self, stage: Stage) {
        if !self.is_complete(stage) {
            self.completed_stages.push(stage);
            self.completed_stages.sort();
        }
    }

    fn unmark_from(&mut self, stage: Stage) {
        self.completed_stages.retain(|s| *s < stage);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub rep_index: usize,
    pub head: HeadKind,
    pub k_shot: usize,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
    pub predictions: Vec<Prediction>,
    pub result: EpisodeResult,
    pub final_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub k_shot: usize,
    /// Mean over repetitions of the largest query-class share, percent.
    pub majority_accuracy: f64,
}

/// Everything a finished run reports; free of paths and timestamps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub setup_id: SetupId,
    pub config_fingerprint: String,
    pub dataset: String,
    pub dataset_digest: String,
    pub ensemble: Vec<String>,
    pub adaptation_tag: AdaptationTag,
    pub meta_train_classes: Vec<String>,
    pub meta_test_classes: Vec<String>,
    pub reports: Vec<AggregateReport>,
    pub majority_baseline: Vec<BaselineRow>,
    pub footprint: FootprintSummary,
}

impl RunReport {
    pub fn cell(&self, head: HeadKind, k_shot: usize) -> Option<&AggregateReport> {
        self.reports.iter().find(|r| r.head == head && r.k_shot == k_shot)
    }

    pub fn majority(&self, k_shot: usize) -> Option<f64> {
        self.majority_baseline.iter().find(|b| b.k_shot == k_shot).map(|b| b.majority_accuracy)
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Discard a state file written for a different configuration.
    pub force: bool,
    /// Require an existing state file.
    pub resume: bool,
    /// Overrides `LEAFFEW_CACHE_DIR`.
    pub cache_dir: Option<PathBuf>,
    /// Last stage to execute.
    pub until: Stage,
    /// Stop with [`PipelineError::Interrupted`] after this many new episodes.
    pub max_new_episodes: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            force: false,
            resume: false,
            cache_dir: None,
            until: Stage::Report,
            max_new_episodes: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
    pub report: Option<RunReport>,
    pub output_dir: PathBuf,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Option<T> {
    fs::read(path).ok().and_then(|b| serde_json::from_slice(&b).ok())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| e.to_string())?;
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(|e| e.to_string())
}

fn short(key: &str) -> &str {
    &key[..16.min(key.len())]
}

/// The pipeline for one configuration.
pub struct Runner {
    pub cfg: RunConfig,
    pub data: RunData,
    pub fingerprint: String,
    pub cache_root: PathBuf,
    state_path: PathBuf,
    state: RunState,
    keys: Keys,
}

/// Content keys, computed once per run.
struct Keys {
    init: BTreeMap<Architecture, (String, InitSource)>,
    backbone: BTreeMap<Architecture, String>,
    features: BTreeMap<Architecture, String>,
    partitions: String,
}

impl Keys {
    fn compute(cfg: &RunConfig, data: &RunData) -> Result<Self, String> {
        let test_digest = data.test_manifest().digest();
        let adapt = cfg
            .adaptation
            .then(|| (&cfg.adapt, data.adaptation_manifest().digest(), &data.split.meta_train_classes));
        let mut keys = Keys {
            init: BTreeMap::new(),
            backbone: BTreeMap::new(),
            features: BTreeMap::new(),
            partitions: fingerprint(&data.partitions),
        };
        for &arch in &cfg.backbones {
            let init = init_key(cfg, arch)?;
            let backbone = fingerprint(&(arch, &init.0, cfg.resolution, &adapt));
            keys.features.insert(arch, fingerprint(&(&backbone, &test_digest, cfg.preprocess())));
            keys.backbone.insert(arch, backbone);
            keys.init.insert(arch, init);
        }
        Ok(keys)
    }
}

/// Key and source of the starting weights of `arch`.
fn init_key(cfg: &RunConfig, arch: Architecture) -> Result<(String, InitSource), String> {
    if let Some(dir) = &cfg.init.weights_dir {
        let path = dir.join(format!("{}.safetensors", arch.name()));
        if path.exists() {
            let bytes = fs::read(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            return Ok((format!("file:{}", sha256_hex(&bytes)), InitSource::File(dir.clone())));
        }
    }
    let seed = derive_seed("backbone-init", &[cfg.seed.into(), cfg.init.seed.into(), arch.name().into()]);
    match &cfg.init.surrogate {
        Some(s) => {
            let key = fingerprint(&("surrogate", arch, seed, cfg.resolution, s));
            Ok((format!("surrogate:{key}"), InitSource::Surrogate { seed, key }))
        }
        None => Ok((format!("seeded:{seed}:{}", cfg.resolution), InitSource::Seeded(seed))),
    }
}

/// Runs missing stages up to `opts.until`, resuming from `state.json`.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome, PipelineError> {
    let mut runner = Runner::open(cfg, opts)?;
    runner.run(opts)
}

impl Runner {
    pub fn open(cfg: &RunConfig, opts: &RunOptions) -> Result<Self, PipelineError> {
        let diags = validate_config(cfg);
        if !diags.is_empty() {
            return Err(PipelineError::Config(diags));
        }
        let data = RunData::load(cfg, ImageCheck::Header).map_err(|d| PipelineError::Config(vec![d]))?;
        let fingerprint = fingerprint(&(
            cfg.scientific(),
            data.evaluation.digest(),
            data.adaptation.as_ref().map(DatasetManifest::digest),
        ));
        let cache_root = opts
            .cache_dir
            .clone()
            .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
            .unwrap_or_else(|| cfg.output_dir.join("cache"));
        let state_path = cfg.output_dir.join(STATE_FILE);
        let state = match fs::read(&state_path) {
            Ok(bytes) => {
                let old: RunState = serde_json::from_slice(&bytes).map_err(|e| {
                    PipelineError::Config(vec![diag("output_dir", format!("unreadable {}: {e}", state_path.display()))])
                })?;
                if old.fingerprint == fingerprint {
                    old
                } else if opts.force {
                    let _ = fs::remove_dir_all(cfg.output_dir.join("report"));
                    RunState {
                        fingerprint: fingerprint.clone(),
                        ..RunState::default()
                    }
                } else {
                    return Err(PipelineError::FingerprintMismatch {
                        path: state_path,
                        found: old.fingerprint,
                        expected: fingerprint,
                    });
                }
            }
            Err(_) if opts.resume => {
                return Err(PipelineError::Config(vec![diag(
                    "output_dir",
                    format!("nothing to resume: {} does not exist", state_path.display()),
                )]))
            }
            Err(_) => RunState {
                fingerprint: fingerprint.clone(),
                ..RunState::default()
            },
        };
        let keys = Keys::compute(cfg, &data).map_err(|m| PipelineError::Config(vec![diag("init.weights_dir", m)]))?;
        Ok(Self {
            cfg: cfg.clone(),
            data,
            fingerprint,
            cache_root,
            state_path,
            state,
            keys,
        })
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    fn save_state(&self) -> Result<(), PipelineError> {
        write_json(&self.state_path, &self.state).map_err(|m| PipelineError::Config(vec![diag("output_dir", m)]))
    }

    pub fn run(&mut self, opts: &RunOptions) -> Result<RunOutcome, PipelineError> {
        let mut executed = Vec::new();
        let mut skipped = Vec::new();
        let mut report = None;
        for stage in Stage::ALL {
            if stage > opts.until {
                break;
            }
            let verified = self.state.is_complete(stage) && self.verify(stage);
            if verified {
                skipped.push(stage);
            } else {
                self.state.unmark_from(stage);
                log::info!("stage {stage}");
                match stage {
                    Stage::Prepare => self.prepare()?,
                    Stage::Finetune => self.finetune()?,
                    Stage::Extract => self.extract()?,
                    Stage::Episodes => self.episodes(opts.max_new_episodes)?,
                    Stage::Report => report = Some(self.report()?),
                }
                if !self.verify(stage) {
                    return Err(stage_err(stage)("outputs did not verify after the stage ran".into()));
                }
                self.state.mark(stage);
                self.save_state()?;
                executed.push(stage);
            }
            if stage == Stage::Report && report.is_none() {
                report = read_json(&self.report_dir().join(REPORT_FILE));
            }
        }
        Ok(RunOutcome {
            executed,
            skipped,
            report,
            output_dir: self.cfg.output_dir.clone(),
        })
    }

    fn verify(&self, stage: Stage) -> bool {
        match stage {
            Stage::Prepare => {
                read_json::<ClassSplit>(&self.prepare_dir().join("split.json")).as_ref() == Some(&self.data.split)
                    && read_json::<Vec<PartitionedClass>>(&self.prepare_dir().join("partitions.json")).as_ref()
                        == Some(&self.data.partitions)
            }
            Stage::Finetune => self.cfg.backbones.iter().all(|&a| AdaptedBackbone::verify(&self.backbone_dir(a))),
            Stage::Extract => self.cfg.backbones.iter().all(|&a| FeatureCache::verify(&self.feature_path(a))),
            Stage::Episodes => self.cells().iter().all(|(h, k)| {
                (0..self.cfg.repetitions).all(|r| self.read_episode(h, *k, r).is_some())
            }),
            Stage::Report => read_json::<RunReport>(&self.report_dir().join(REPORT_FILE))
                .is_some_and(|r| r.config_fingerprint == self.fingerprint),
        }
    }

    fn prepare_dir(&self) -> PathBuf {
        self.cfg.output_dir.join("prepare")
    }

    fn report_dir(&self) -> PathBuf {
        self.cfg.output_dir.join("report")
    }

    fn prepare(&mut self) -> Result<(), PipelineError> {
        let err = stage_err(Stage::Prepare);
        backbones_verify_train(self).map_err(&err)?;
        write_json(&self.prepare_dir().join("split.json"), &self.data.split).map_err(&err)?;
        write_json(&self.prepare_dir().join("partitions.json"), &self.data.partitions).map_err(&err)
    }

    fn backbone_dir(&self, arch: Architecture) -> PathBuf {
        self.cache_root
            .join("backbones")
            .join(format!("{}-{}", arch.name(), short(&self.keys.backbone[&arch])))
    }

    fn feature_path(&self, arch: Architecture) -> PathBuf {
        let tag = if self.cfg.adaptation {
            AdaptationTag::DomainAdapted
        } else {
            AdaptationTag::ImagenetOnly
        };
        let name = cache_file_name(&self.data.evaluation.name, arch, tag, self.cfg.resolution);
        self.cache_root.join("features").join(format!("{}-{name}", short(&self.keys.features[&arch])))
    }

    /// Starting weights, running surrogate pretraining if needed.
    fn starting_backbone(&self, arch: Architecture) -> Result<(leaffew_mobilenet::Backbone, String), String> {
        let res = self.cfg.resolution;
        match self.keys.init[&arch].1.clone() {
            InitSource::File(dir) => initial_backbone(arch, 0, Some(&dir), res).map_err(|e| e.to_string()),
            InitSource::Seeded(seed) => initial_backbone(arch, seed, None, res).map_err(|e| e.to_string()),
            InitSource::Surrogate { seed, key } => {
                let surrogate = self.cfg.init.surrogate.as_ref().expect("surrogate source");
                let dir = self.cache_root.join("pretrained").join(format!("{}-{}", arch.name(), short(&key)));
                let file = dir.join(format!("{}.safetensors", arch.name()));
                if !file.exists() {
                    let corpus = self.surrogate_corpus(surrogate)?;
                    let (net, init) = initial_backbone(arch, seed, None, res).map_err(|e| e.to_string())?;
                    log::info!("{arch}: surrogate pretraining on {} images", corpus.len());
                    let cfg = AdaptationConfig {
                        seed: derive_seed("surrogate-training", &[seed.into()]),
                        ..surrogate.training.clone()
                    };
                    let mut trained =
                        finetune_backbone(net, init, &corpus, &cfg, &self.cfg.preprocess()).map_err(|e| e.to_string())?;
                    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
                    let bytes = weights::to_bytes(&mut trained.net, &BTreeMap::new());
                    write_atomic(&file, &bytes).map_err(|e| e.to_string())?;
                    write_json(&dir.join("training_log.json"), &trained.log)?;
                }
                let (net, _) = initial_backbone(arch, 0, Some(&dir), res).map_err(|e| e.to_string())?;
                Ok((net, format!("surrogate:{}", short(&key))))
            }
        }
    }

    fn surrogate_corpus(&self, s: &SurrogateConfig) -> Result<DatasetManifest, String> {
        let size = self.cfg.preprocess().resize;
        let spec = SynthSpec::surrogate(s.classes, s.per_class, size, self.cfg.init.seed);
        let dir = self.cache_root.join("pretrained").join(format!("corpus-{}", short(&fingerprint(&spec))));
        let manifest = dir.join("manifest.csv");
        if let Ok(m) = load_manifest_with(&manifest, ImageCheck::Skip) {
            if m.len() == s.classes * s.per_class && m.records.iter().all(|r| r.path.exists()) {
                return Ok(m);
            }
        }
        synthetic::generate(&spec, &dir).map_err(|e| e.to_string())
    }

    fn finetune(&mut self) -> Result<(), PipelineError> {
        let err = stage_err(Stage::Finetune);
        let train = self.data.train_manifest();
        for &arch in &self.cfg.backbones.clone() {
            let dir = self.backbone_dir(arch);
            if !AdaptedBackbone::verify(&dir) {
                let (net, init) = self.starting_backbone(arch).map_err(&err)?;
                let mut model = if self.cfg.adaptation {
                    log::info!("{arch}: adapting on {} images of {} classes", train.len(), train.classes.len());
                    let cfg = AdaptationConfig {
                        seed: derive_seed("adaptation", &[self.cfg.seed.into(), self.cfg.adapt.seed.into(), arch.name().into()]),
                        ..self.cfg.adapt.clone()
                    };
                    finetune_backbone(net, init, &train, &cfg, &self.cfg.preprocess()).map_err(|e| err(e.to_string()))?
                } else {
                    AdaptedBackbone::imagenet_only(net, init, 224)
                };
                model.save(&dir).map_err(|e| err(e.to_string()))?;
            }
            let key = self.keys.backbone[&arch].clone();
            self.state.caches.insert(format!("backbone/{}", arch.name()), CacheEntry { key, path: dir });
        }
        Ok(())
    }

    fn extract(&mut self) -> Result<(), PipelineError> {
        let err = stage_err(Stage::Extract);
        let test = self.data.test_manifest();
        let prep = self.cfg.preprocess();
        for &arch in &self.cfg.backbones.clone() {
            let path = self.feature_path(arch);
            if !FeatureCache::verify(&path) {
                let mut model = AdaptedBackbone::load(&self.backbone_dir(arch)).map_err(|e| err(e.to_string()))?;
                if let Some(dir) = path.parent() {
                    fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
                }
                log::info!("{arch}: embedding {} images", test.len());
                backbones::build_feature_cache(&mut model, &test, &prep, &path).map_err(|e| err(e.to_string()))?;
            }
            self.state
                .caches
                .insert(format!("features/{}", arch.name()), CacheEntry {
                    key: self.keys.features[&arch].clone(),
                    path,
                });
        }
        Ok(())
    }

    /// (head config, k) in config order.
    fn cells(&self) -> Vec<(HeadConfig, usize)> {
        self.cfg
            .heads
            .iter()
            .flat_map(|h| self.cfg.k_shots.iter().map(move |&k| (h.clone(), k)))
            .collect()
    }

    fn cell_name(head: &HeadConfig, k: usize) -> String {
        format!("{}-k{k}", head.kind.as_str())
    }

    fn cell_dir(&self, head: &HeadConfig, k: usize) -> PathBuf {
        let features: Vec<&String> = self.cfg.backbones.iter().map(|a| &self.keys.features[a]).collect();
        let key = fingerprint(&(
            features,
            &self.keys.partitions,
            head,
            &self.cfg.fusion,
            k,
            self.cfg.data.query_per_class,
            self.cfg.seed,
            self.cfg.setup,
        ));
        self.cfg
            .output_dir
            .join("episodes")
            .join(format!("{}-{}", Self::cell_name(head, k), short(&key)))
    }

    fn episode_path(&self, head: &HeadConfig, k: usize, rep: usize) -> PathBuf {
        self.cell_dir(head, k).join(format!("rep-{rep:04}.json"))
    }

    fn read_episode(&self, head: &HeadConfig, k: usize, rep: usize) -> Option<EpisodeRecord> {
        read_json::<EpisodeRecord>(&self.episode_path(head, k, rep))
            .filter(|r| r.rep_index == rep && r.k_shot == k && r.head == head.kind)
    }

    fn episodes(&mut self, budget: Option<usize>) -> Result<(), PipelineError> {
        let err = stage_err(Stage::Episodes);
        let caches: Vec<FeatureCache> = self
            .cfg
            .backbones
            .iter()
            .map(|&a| FeatureCache::read(&self.feature_path(a)).map_err(|e| err(e.to_string())))
            .collect::<Result<_, _>>()?;
        let features = FeatureTable {
            layout: FusionLayout::of(&self.cfg.backbones),
            caches,
            l2_normalize: self.cfg.fusion.l2_normalize,
        };
        let layout = self.cfg.input_layout();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.workers)
            .build()
            .map_err(|e| err(e.to_string()))?;
        let mut remaining = budget;
        let mut completed = 0;
        for (head, k) in self.cells() {
            let dir = self.cell_dir(&head, k);
            fs::create_dir_all(&dir).map_err(|e| err(format!("cannot create {}: {e}", dir.display())))?;
            let mut pending: Vec<usize> =
                (0..self.cfg.repetitions).filter(|&r| self.read_episode(&head, k, r).is_none()).collect();
            if let Some(n) = remaining {
                pending.truncate(n);
                remaining = Some(n - pending.len());
            }
            let spec = EpisodeSpec {
                k_shot: k,
                query_per_class: self.cfg.data.query_per_class,
                repetitions: self.cfg.repetitions,
                seed: self.cfg.seed,
                setup: self.cfg.setup,
            };
            let job = EpisodeJob {
                partitions: &self.data.partitions,
                spec: &spec,
                head: &head,
                layout: &layout,
                features: &features,
                master_seed: self.cfg.seed,
            };
            let results: Vec<Result<(), String>> = pool.install(|| {
                pending
                    .par_iter()
                    .map(|&rep| {
                        let record = job.run(rep)?;
                        write_json(&dir.join(format!("rep-{rep:04}.json")), &record)
                    })
                    .collect()
            });
            completed += results.iter().filter(|r| r.is_ok()).count();
            let bitmap: String = (0..self.cfg.repetitions)
                .map(|r| if self.read_episode(&head, k, r).is_some() { '1' } else { '0' })
                .collect();
            self.state.episodes.insert(Self::cell_name(&head, k), bitmap);
            self.save_state()?;
            if let Some(e) = results.into_iter().find_map(Result::err) {
                return Err(err(e));
            }
            if remaining == Some(0) && !self.verify(Stage::Episodes) {
                return Err(PipelineError::Interrupted { completed });
            }
        }
        Ok(())
    }

    fn report(&mut self) -> Result<RunReport, PipelineError> {
        let err = stage_err(Stage::Report);
        let mut specs = Vec::new();
        let mut tag = AdaptationTag::ImagenetOnly;
        for &arch in &self.cfg.backbones {
            let model = AdaptedBackbone::load(&self.backbone_dir(arch)).map_err(|e| err(e.to_string()))?;
            tag = model.adaptation_tag;
            specs.push(BackboneSpec::of(&model.net, 224));
        }
        let layout = self.cfg.input_layout();
        let n_way = self.data.partitions.len();
        let mut reports = Vec::new();
        let mut baseline: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (head, k) in self.cells() {
            let records: Vec<EpisodeRecord> = (0..self.cfg.repetitions)
                .map(|r| {
                    self.read_episode(&head, k, r)
                        .ok_or_else(|| err(format!("missing repetition {r} of {}", Self::cell_name(&head, k))))
                })
                .collect::<Result<_, _>>()?;
            baseline.entry(k).or_insert_with(|| records.iter().map(|r| majority_share(&r.query)).collect());
            let head_macs = heads::build_head(&head, n_way, &layout)
                .map(|h| h.net.inference_macs())
                .map_err(|e| err(e.to_string()))?;
            let ctx = ReportContext {
                setup_id: Some(self.cfg.setup),
                head: Some(head.kind),
                k_shot: k,
                ensemble: self.cfg.backbones.iter().map(|a| a.name().to_string()).collect(),
                footprint: Some(footprint_with_head(&specs, head_macs as f64 / 1e9)),
                config_fingerprint: self.fingerprint.clone(),
                ci_method: self.cfg.ci_method,
                header: self.header(&head),
            };
            let results: Vec<EpisodeResult> = records.into_iter().map(|r| r.result).collect();
            reports.push(metrics::aggregate(&results, &ctx).map_err(|e| err(e.to_string()))?);
        }
        let report = RunReport {
            setup_id: self.cfg.setup,
            config_fingerprint: self.fingerprint.clone(),
            dataset: self.data.evaluation.name.clone(),
            dataset_digest: self.data.evaluation.digest(),
            ensemble: self.cfg.backbones.iter().map(|a| a.name().to_string()).collect(),
            adaptation_tag: tag,
            meta_train_classes: self.data.split.meta_train_classes.iter().cloned().collect(),
            meta_test_classes: self.data.split.meta_test_classes.iter().cloned().collect(),
            reports,
            majority_baseline: baseline
                .into_iter()
                .map(|(k_shot, v)| BaselineRow {
                    k_shot,
                    majority_accuracy: 100.0 * v.iter().sum::<f64>() / v.len().max(1) as f64,
                })
                .collect(),
            footprint: footprint_with_head(&specs, 0.0),
        };
        let dir = self.report_dir();
        let write = |name: &str, text: String| {
            write_atomic(&dir.join(name), text.as_bytes()).map_err(|e| err(e.to_string()))
        };
        fs::create_dir_all(&dir).map_err(|e| err(e.to_string()))?;
        write("tables.md", metrics::render_tables(&report.reports, TableFormat::Markdown))?;
        write("tables.csv", metrics::render_tables(&report.reports, TableFormat::Csv))?;
        write("curves.csv", metrics::render_curves(&report.reports))?;
        write("footprint.md", report.footprint.to_markdown())?;
        write_json(&dir.join(REPORT_FILE), &report).map_err(&err)?;
        Ok(report)
    }

    fn header(&self, head: &HeadConfig) -> BTreeMap<String, String> {
        let mut h = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            h.insert(k.to_string(), v);
        };
        put("sequence_mode", self.cfg.fusion.mode.as_str().to_string());
        put("d_tok", self.cfg.fusion.d_tok.to_string());
        put("l2_normalize", self.cfg.fusion.l2_normalize.to_string());
        put("query_per_class", self.cfg.data.query_per_class.to_string());
        put("split_ratio", self.cfg.data.split_ratio.to_string());
        put("adaptation", self.cfg.adaptation.to_string());
        put("resolution", self.cfg.resolution.to_string());
        put("seed", self.cfg.seed.to_string());
        put("hidden_dim", head.hidden_dim.to_string());
        put("head_epochs", head.epochs.to_string());
        put("learning_rate", head.learning_rate.to_string());
        put("dropout", head.dropout.to_string());
        h
    }
}

/// Adaptation classes must be decodable before any training starts.
fn backbones_verify_train(runner: &Runner) -> Result<(), String> {
    if runner.cfg.adaptation {
        let train = runner.data.train_manifest();
        crate::corpus::verify_images(&train).map_err(|e| e.to_string())?;
    }
    crate::corpus::verify_images(&runner.data.test_manifest()).map_err(|e| e.to_string())
}

#[derive(Clone)]
enum InitSource {
    File(PathBuf),
    Seeded(u64),
    Surrogate { seed: u64, key: String },
}

/// Fused features looked up by image id.
struct FeatureTable {
    layout: FusionLayout,
    caches: Vec<FeatureCache>,
    l2_normalize: bool,
}

impl FeatureTable {
    fn get(&self, image_id: &str) -> Result<FusedFeature, String> {
        let parts: Vec<&[f32]> = self
            .caches
            .iter()
            .map(|c| c.get(image_id).ok_or_else(|| format!("`{image_id}` missing from the {} cache", c.header.backbone)))
            .collect::<Result<_, _>>()?;
        let f = self.layout.fuse(&parts).map_err(|e| e.to_string())?;
        Ok(if self.l2_normalize { f.l2_normalized() } else { f })
    }
}

struct EpisodeJob<'a> {
    partitions: &'a [PartitionedClass],
    spec: &'a EpisodeSpec,
    head: &'a HeadConfig,
    layout: &'a InputLayout,
    features: &'a FeatureTable,
    master_seed: u64,
}

impl EpisodeJob<'_> {
    fn run(&self, rep: usize) -> Result<EpisodeRecord, String> {
        let episode = sample_episode(self.partitions, self.spec, rep).map_err(|e| e.to_string())?;
        let classes = episode.classes();
        let support: Vec<(FusedFeature, String)> = episode
            .support
            .iter()
            .map(|i| Ok((self.features.get(&i.image_id)?, i.class_label.clone())))
            .collect::<Result<_, String>>()?;
        let query: Vec<(String, FusedFeature)> = episode
            .query
            .iter()
            .map(|i| Ok((i.image_id.clone(), self.features.get(&i.image_id)?)))
            .collect::<Result<_, String>>()?;
        let cfg = HeadConfig {
            seed: derive_seed(
                "episode-head",
                &[self.master_seed.into(), self.head.seed.into(), self.head.kind.as_str().into(), self.spec.k_shot.into(), rep.into()],
            ),
            ..self.head.clone()
        };
        let head = heads::build_head(&cfg, classes.len(), self.layout).map_err(|e| e.to_string())?;
        let head = heads::train_episode(head, &support, &classes).map_err(|e| e.to_string())?;
        let predictions = heads::predict(&head, &query).map_err(|e| e.to_string())?;
        let result = metrics::score_episode(rep, &predictions, &episode.query).map_err(|e| e.to_string())?;
        Ok(EpisodeRecord {
            rep_index: rep,
            head: self.head.kind,
            k_shot: self.spec.k_shot,
            support: episode.support,
            query: episode.query,
            predictions,
            result,
            final_loss: head.train_log.losses.last().copied(),
        })
    }
}

/// Accuracy of always predicting the most frequent query class.
pub fn majority_share(query: &[EpisodeItem]) -> f64 {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for q in query {
        *counts.entry(q.class_label.as_str()).or_default() += 1;
    }
    counts.values().max().copied().unwrap_or(0) as f64 / query.len().max(1) as f64
}

#[cfg(test)]
mod tests;
