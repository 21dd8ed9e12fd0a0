//! Dataset manifests, per-setup class splits, support/query partitions and
//! episode sampling.
//!
//! A manifest file is one JSON header line followed by CSV rows:
//!
//! ```text
//! {"name":"plantvillage","format_version":1,"classes":["Apple___Apple_scab", ...]}
//! image_id,path,class_label,crop,background
//! pv-00001,images/Apple___Apple_scab/0001.jpg,Apple___Apple_scab,Apple,lab
//! ```
//!
//! `classes` in the header is optional; when given, every record label must be
//! drawn from it. Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::seeds::{fingerprint, rng_for};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
const CSV_COLUMNS: [&str; 5] = ["image_id", "path", "class_label", "crop", "background"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
    #[error("empty manifest")]
    EmptyManifest,
    #[error("duplicate image_id `{0}`")]
    DuplicateId(String),
    #[error("duplicate class `{0}` in the declared class list")]
    DuplicateClass(String),
    #[error("record `{id}` carries undeclared class `{label}`")]
    UndeclaredClass { id: String, label: String },
    #[error("unreadable image paths: {}", .0.join("; "))]
    UnreadableImages(Vec<String>),
    #[error("setup {setup}: {message}")]
    Config { setup: SetupId, message: String },
    #[error("class `{0}` is not in the manifest")]
    UnknownClass(String),
    #[error("partition ratio {0} is outside (0, 1)")]
    BadRatio(f64),
    #[error("class `{class}` has {count} image(s); both support and query pools need at least one")]
    ClassTooSmall { class: String, count: usize },
    #[error("sampling: {0}")]
    Sampling(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Lab,
    Field,
}

impl Background {
    pub fn as_str(self) -> &'static str {
        match self {
            Background::Lab => "lab",
            Background::Field => "field",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lab" => Some(Background::Lab),
            "field" => Some(Background::Field),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetupId {
    S1,
    S2,
    S3,
}

impl SetupId {
    pub const ALL: [SetupId; 3] = [SetupId::S1, SetupId::S2, SetupId::S3];

    pub fn as_str(self) -> &'static str {
        match self {
            SetupId::S1 => "s1",
            SetupId::S2 => "s2",
            SetupId::S3 => "s3",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "s1" | "1" => Some(SetupId::S1),
            "s2" | "2" => Some(SetupId::S2),
            "s3" | "3" => Some(SetupId::S3),
            _ => None,
        }
    }
}

impl fmt::Display for SetupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    /// Resolved path (relative entries are joined onto the manifest directory).
    pub path: PathBuf,
    pub class_label: String,
    pub crop: String,
    pub background: Background,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestHeader {
    name: String,
    #[serde(default = "default_format_version")]
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classes: Option<Vec<String>>,
}

fn default_format_version() -> u32 {
    MANIFEST_FORMAT_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    /// Directory relative record paths were resolved against.
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
    /// Sorted, duplicate-free, with per-class record counts.
    pub classes: Vec<ClassEntry>,
}

/// How thoroughly image files are checked at ingestion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageCheck {
    /// Open each distinct file and parse its header.
    Header,
    /// Trust the paths (used for synthetic in-memory manifests).
    Skip,
}

impl DatasetManifest {
    /// Validates `records` and computes the sorted class list. `declared`, when
    /// given, is the closed set of admissible labels; declared classes without
    /// records are kept with count 0.
    pub fn from_records(
        name: impl Into<String>,
        root: impl Into<PathBuf>,
        records: Vec<ImageRecord>,
        declared: Option<&[String]>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(CorpusError::EmptyManifest);
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.image_id.as_str()) {
                return Err(CorpusError::DuplicateId(r.image_id.clone()));
            }
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        if let Some(decl) = declared {
            for c in decl {
                if counts.insert(c.clone(), 0).is_some() {
                    return Err(CorpusError::DuplicateClass(c.clone()));
                }
            }
        }
        for r in &records {
            match counts.get_mut(&r.class_label) {
                Some(n) => *n += 1,
                None if declared.is_some() => {
                    return Err(CorpusError::UndeclaredClass {
                        id: r.image_id.clone(),
                        label: r.class_label.clone(),
                    })
                }
                None => {
                    counts.insert(r.class_label.clone(), 1);
                }
            }
        }
        let classes = counts.into_iter().map(|(name, count)| ClassEntry { name, count }).collect();
        Ok(Self {
            name: name.into(),
            root: root.into(),
            records,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn class_count(&self, class: &str) -> Option<usize> {
        self.classes.iter().find(|c| c.name == class).map(|c| c.count)
    }

    pub fn has_class(&self, class: &str) -> bool {
        self.class_count(class).is_some()
    }

    /// The crop of a class (taken from its first record).
    pub fn crop_of(&self, class: &str) -> Option<&str> {
        self.records.iter().find(|r| r.class_label == class).map(|r| r.crop.as_str())
    }

    pub fn record(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    /// A manifest restricted to records whose class is in `classes`.
    pub fn restrict(&self, classes: &BTreeSet<String>) -> Result<Self> {
        let records: Vec<_> = self.records.iter().filter(|r| classes.contains(&r.class_label)).cloned().collect();
        Self::from_records(self.name.clone(), self.root.clone(), records, None)
    }

    /// Records sorted by image id.
    pub fn sorted_records(&self) -> Vec<&ImageRecord> {
        let mut v: Vec<_> = self.records.iter().collect();
        v.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        v
    }

    fn display_path(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().into_owned()
    }

    /// Order-independent digest of the manifest content (paths taken relative
    /// to the manifest root so relocating a dataset tree keeps its identity).
    pub fn digest(&self) -> String {
        let mut rows: Vec<(&str, String, &str, &str, &str)> = self
            .records
            .iter()
            .map(|r| {
                (
                    r.image_id.as_str(),
                    self.display_path(&r.path),
                    r.class_label.as_str(),
                    r.crop.as_str(),
                    r.background.as_str(),
                )
            })
            .collect();
        rows.sort();
        fingerprint(&(&self.name, &self.classes, rows))
    }

    /// Serializes in the manifest file format.
    pub fn to_manifest_string(&self) -> String {
        let header = ManifestHeader {
            name: self.name.clone(),
            format_version: MANIFEST_FORMAT_VERSION,
            classes: Some(self.class_names()),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_COLUMNS).expect("in-memory csv");
        for r in &self.records {
            w.write_record([
                r.image_id.as_str(),
                &self.display_path(&r.path),
                &r.class_label,
                &r.crop,
                r.background.as_str(),
            ])
            .expect("in-memory csv");
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8"));
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |source| CorpusError::Io { path: path.to_path_buf(), source };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(self.to_manifest_string().as_bytes()).map_err(io)?;
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest_with(path, ImageCheck::Header)
}

pub fn load_manifest_with(path: &Path, check: ImageCheck) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, path, &root, check)
}

/// Parses manifest text; `source` is used in error messages only.
pub fn parse_manifest(text: &str, source: &Path, root: &Path, check: ImageCheck) -> Result<DatasetManifest> {
    let format = |line: usize, message: String| CorpusError::Format {
        path: source.to_path_buf(),
        line,
        message,
    };
    let (head, body) = text.split_once('\n').unwrap_or((text, ""));
    let header: ManifestHeader =
        serde_json::from_str(head.trim()).map_err(|e| format(1, format!("invalid JSON header: {e}")))?;
    if header.format_version != MANIFEST_FORMAT_VERSION {
        return Err(format(1, format!("unsupported format_version {}", header.format_version)));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(body.as_bytes());
    let cols = reader.headers().map_err(|e| format(2, e.to_string()))?.clone();
    if cols.iter().collect::<Vec<_>>() != CSV_COLUMNS {
        return Err(format(2, format!("expected columns {}", CSV_COLUMNS.join(","))));
    }
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 3;
        let row = row.map_err(|e| format(line, e.to_string()))?;
        if row.len() != CSV_COLUMNS.len() {
            return Err(format(line, format!("expected 5 fields, found {}", row.len())));
        }
        if let Some((j, _)) = row.iter().enumerate().find(|(_, v)| v.is_empty()) {
            return Err(format(line, format!("empty `{}`", CSV_COLUMNS[j])));
        }
        let background =
            Background::parse(&row[4]).ok_or_else(|| format(line, format!("unknown background `{}`", &row[4])))?;
        let raw = Path::new(&row[1]);
        records.push(ImageRecord {
            image_id: row[0].to_string(),
            path: if raw.is_absolute() { raw.to_path_buf() } else { root.join(raw) },
            class_label: row[2].to_string(),
            crop: row[3].to_string(),
            background,
        });
    }
    let manifest = DatasetManifest::from_records(header.name, root, records, header.classes.as_deref())?;
    if check == ImageCheck::Header {
        verify_images(&manifest)?;
    }
    Ok(manifest)
}

/// Checks that every distinct image path opens and has a decodable header.
pub fn verify_images(manifest: &DatasetManifest) -> Result<()> {
    let mut status: HashMap<&Path, bool> = HashMap::new();
    let mut bad = Vec::new();
    for r in &manifest.records {
        let ok = *status.entry(r.path.as_path()).or_insert_with(|| image_readable(&r.path));
        if !ok {
            bad.push(format!("{} ({})", r.image_id, r.path.display()));
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CorpusError::UnreadableImages(bad))
    }
}

fn image_readable(path: &Path) -> bool {
    image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map(|r| r.into_dimensions().is_ok())
        .unwrap_or(false)
}

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

/// Indexes a `<tree>/<class folder>/<image>` layout. The crop is the folder
/// name up to `___` unless `crop` overrides it. Image ids are the paths
/// relative to `tree`; records refer to files by absolute path.
pub fn index_folder(tree: &Path, name: &str, background: Background, crop: Option<&str>) -> Result<DatasetManifest> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CorpusError::Io { path, source }
    };
    let tree = fs::canonicalize(tree).map_err(io(tree))?;
    let sorted_entries = |dir: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> =
            fs::read_dir(dir).map_err(io(dir))?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>().map_err(io(dir))?;
        v.sort();
        Ok(v)
    };
    let mut records = Vec::new();
    for class_dir in sorted_entries(&tree)?.into_iter().filter(|p| p.is_dir()) {
        let label = class_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let class_crop = crop.map(str::to_string).unwrap_or_else(|| label.split("___").next().unwrap_or(&label).to_string());
        for file in sorted_entries(&class_dir)? {
            let is_image = file
                .extension()
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_string_lossy().to_ascii_lowercase().as_str()));
            if !file.is_file() || !is_image {
                continue;
            }
            let rel = file.strip_prefix(&tree).unwrap_or(&file).to_string_lossy().into_owned();
            records.push(ImageRecord {
                image_id: rel,
                path: file,
                class_label: label.clone(),
                crop: class_crop.clone(),
                background,
            });
        }
    }
    DatasetManifest::from_records(name, tree, records, None)
}

/// Which classes of a manifest a setup evaluates on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "by", rename_all = "snake_case")]
pub enum TestSelector {
    /// Every class whose crop is listed.
    Crops { crops: Vec<String> },
    /// An explicit roster; every name must exist.
    Names { classes: Vec<String> },
}

/// Which classes of the adaptation manifest the backbones are fine-tuned on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "by", rename_all = "snake_case")]
pub enum TrainSelector {
    /// No fine-tuning.
    None,
    /// Every class except those of the listed crops.
    ExcludeCrops { crops: Vec<String> },
    Names { classes: Vec<String> },
}

/// Class-selection rules for one experimental setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetupRoster {
    pub test: TestSelector,
    pub train: TrainSelector,
    /// Restrict meta-test records to one background condition.
    #[serde(default)]
    pub test_background: Option<Background>,
    #[serde(default)]
    pub expected_train: Option<usize>,
    #[serde(default)]
    pub expected_test: Option<usize>,
}

/// Default Setup-2 roster. Table I offers seven apple/blueberry/cherry
/// classes; Cherry healthy is the one left out.
pub const S2_DEFAULT_CLASSES: [&str; 6] = [
    "Apple___Apple_scab",
    "Apple___Black_rot",
    "Apple___Cedar_apple_rust",
    "Apple___healthy",
    "Blueberry___healthy",
    "Cherry_(including_sour)___Powdery_mildew",
];

pub const RICE_CLASSES: [&str; 5] = ["Brown Spot", "Leaf Scaled", "Rice Blast", "Rice Turngo", "Steath Blight"];

impl SetupRoster {
    pub fn preset(setup: SetupId) -> Self {
        let tomato = || vec!["Tomato".to_string()];
        match setup {
            SetupId::S1 => Self {
                test: TestSelector::Crops { crops: tomato() },
                train: TrainSelector::ExcludeCrops { crops: tomato() },
                test_background: None,
                expected_train: Some(28),
                expected_test: Some(10),
            },
            SetupId::S2 => Self {
                test: TestSelector::Names {
                    classes: S2_DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
                },
                train: TrainSelector::None,
                test_background: None,
                expected_train: Some(0),
                expected_test: Some(6),
            },
            SetupId::S3 => Self {
                test: TestSelector::Names {
                    classes: RICE_CLASSES.iter().map(|s| s.to_string()).collect(),
                },
                train: TrainSelector::ExcludeCrops { crops: tomato() },
                test_background: Some(Background::Field),
                expected_train: Some(28),
                expected_test: Some(5),
            },
        }
    }

    /// The preset with cardinality expectations removed (for subsets).
    pub fn relaxed(setup: SetupId) -> Self {
        Self {
            expected_train: None,
            expected_test: None,
            ..Self::preset(setup)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub setup_id: SetupId,
    pub meta_train_classes: BTreeSet<String>,
    pub meta_test_classes: BTreeSet<String>,
    #[serde(default)]
    pub test_background: Option<Background>,
}

/// Split for `setup` using its preset roster, with the evaluation manifest
/// also serving as the adaptation manifest.
pub fn make_class_split(manifest: &DatasetManifest, setup: SetupId) -> Result<ClassSplit> {
    make_class_split_with(manifest, None, setup, &SetupRoster::preset(setup))
}

/// Split with explicit roster; `adaptation` defaults to `evaluation`.
pub fn make_class_split_with(
    evaluation: &DatasetManifest,
    adaptation: Option<&DatasetManifest>,
    setup: SetupId,
    roster: &SetupRoster,
) -> Result<ClassSplit> {
    let config = |message: String| CorpusError::Config { setup, message };
    let mut test = BTreeSet::new();
    match &roster.test {
        TestSelector::Crops { crops } => {
            for crop in crops {
                let before = test.len();
                for c in &evaluation.classes {
                    if evaluation.crop_of(&c.name) == Some(crop.as_str()) {
                        test.insert(c.name.clone());
                    }
                }
                if test.len() == before {
                    return Err(config(format!("no class of crop `{crop}` in manifest `{}`", evaluation.name)));
                }
            }
        }
        TestSelector::Names { classes } => {
            for c in classes {
                if !evaluation.has_class(c) {
                    return Err(config(format!("required class `{c}` absent from manifest `{}`", evaluation.name)));
                }
                test.insert(c.clone());
            }
        }
    }
    if let Some(bg) = roster.test_background {
        for c in &test {
            if !evaluation.records.iter().any(|r| &r.class_label == c && r.background == bg) {
                return Err(config(format!("class `{c}` has no `{}` background records", bg.as_str())));
            }
        }
    }
    let adapt = adaptation.unwrap_or(evaluation);
    let same_source = adaptation.is_none() || adapt.name == evaluation.name;
    let mut train = BTreeSet::new();
    match &roster.train {
        TrainSelector::None => {}
        TrainSelector::ExcludeCrops { crops } => {
            for c in &adapt.classes {
                let crop = adapt.crop_of(&c.name).unwrap_or_default();
                if c.count > 0 && !crops.iter().any(|x| x == crop) && !(same_source && test.contains(&c.name)) {
                    train.insert(c.name.clone());
                }
            }
        }
        TrainSelector::Names { classes } => {
            for c in classes {
                if !adapt.has_class(c) {
                    return Err(config(format!("required class `{c}` absent from manifest `{}`", adapt.name)));
                }
                train.insert(c.clone());
            }
        }
    }
    if let Some(c) = train.intersection(&test).next() {
        return Err(config(format!("class `{c}` is in both meta-train and meta-test")));
    }
    if let Some(n) = roster.expected_train {
        if train.len() != n {
            return Err(config(format!("expected {n} meta-train classes, found {}", train.len())));
        }
    }
    if let Some(n) = roster.expected_test {
        if test.len() != n {
            return Err(config(format!("expected {n} meta-test classes, found {}", test.len())));
        }
    }
    Ok(ClassSplit {
        setup_id: setup,
        meta_train_classes: train,
        meta_test_classes: test,
        test_background: roster.test_background,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionedClass {
    pub class_label: String,
    pub support_pool: Vec<String>,
    pub query_pool: Vec<String>,
    pub ratio: f64,
}

/// Support-pool size for a class of `n` images: round-half-up of `ratio * n`,
/// clamped so both pools are nonempty.
pub fn support_size(n: usize, ratio: f64) -> usize {
    let s = (ratio * n as f64 + 0.5 + 1e-9).floor() as usize;
    s.clamp(1, n.saturating_sub(1).max(1))
}

pub fn partition_support_query(
    manifest: &DatasetManifest,
    classes: &BTreeSet<String>,
    ratio: f64,
    seed: u64,
) -> Result<Vec<PartitionedClass>> {
    partition_filtered(manifest, classes, ratio, seed, None)
}

/// Fixed per (dataset, seed, class): ids are sorted before a class-specific
/// shuffle, so the pools do not depend on record order.
pub fn partition_filtered(
    manifest: &DatasetManifest,
    classes: &BTreeSet<String>,
    ratio: f64,
    seed: u64,
    background: Option<Background>,
) -> Result<Vec<PartitionedClass>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::BadRatio(ratio));
    }
    let mut by_class: BTreeMap<&str, Vec<&str>> = classes.iter().map(|c| (c.as_str(), Vec::new())).collect();
    for r in &manifest.records {
        if background.is_some_and(|b| b != r.background) {
            continue;
        }
        if let Some(v) = by_class.get_mut(r.class_label.as_str()) {
            v.push(r.image_id.as_str());
        }
    }
    let mut out = Vec::with_capacity(by_class.len());
    for (class, mut ids) in by_class {
        if !manifest.has_class(class) {
            return Err(CorpusError::UnknownClass(class.to_string()));
        }
        if ids.len() < 2 {
            return Err(CorpusError::ClassTooSmall {
                class: class.to_string(),
                count: ids.len(),
            });
        }
        ids.sort_unstable();
        let mut rng = rng_for("partition", &[manifest.name.as_str().into(), seed.into(), class.into()]);
        ids.shuffle(&mut rng);
        let s = support_size(ids.len(), ratio);
        out.push(PartitionedClass {
            class_label: class.to_string(),
            support_pool: ids[..s].iter().map(|s| s.to_string()).collect(),
            query_pool: ids[s..].iter().map(|s| s.to_string()).collect(),
            ratio,
        });
    }
    Ok(out)
}

/// Query items per class: a count, or the whole query pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QueryCount {
    Count(usize),
    All,
}

impl fmt::Display for QueryCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueryCount::Count(n) => write!(f, "{n}"),
            QueryCount::All => f.write_str("all"),
        }
    }
}

impl std::str::FromStr for QueryCount {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(QueryCount::All);
        }
        s.parse().map(QueryCount::Count).map_err(|_| format!("query count must be a positive integer or `all`, got `{s}`"))
    }
}

impl Serialize for QueryCount {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            QueryCount::Count(n) => s.serialize_u64(*n as u64),
            QueryCount::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for QueryCount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(QueryCount::Count(n)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub k_shot: usize,
    pub query_per_class: QueryCount,
    pub repetitions: usize,
    pub seed: u64,
    pub setup: SetupId,
}

impl EpisodeSpec {
    /// Checks the spec against the pools it will sample from.
    pub fn check(&self, partitions: &[PartitionedClass]) -> Result<()> {
        let err = |m: String| Err(CorpusError::Sampling(m));
        if partitions.is_empty() {
            return err("no classes to sample".into());
        }
        if self.k_shot == 0 {
            return err("k_shot must be positive".into());
        }
        if self.query_per_class == QueryCount::Count(0) {
            return err("query_per_class must be positive".into());
        }
        for p in partitions {
            if self.k_shot > p.support_pool.len() {
                return err(format!(
                    "k_shot {} exceeds the support pool of class `{}` ({} images)",
                    self.k_shot,
                    p.class_label,
                    p.support_pool.len()
                ));
            }
            if let QueryCount::Count(q) = self.query_per_class {
                if q > p.query_pool.len() {
                    return err(format!(
                        "query_per_class {q} exceeds the query pool of class `{}` ({} images)",
                        p.class_label,
                        p.query_pool.len()
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EpisodeItem {
    pub image_id: String,
    pub class_label: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub index: usize,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

impl Episode {
    /// Way labels in sorted order.
    pub fn classes(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.support.iter().map(|i| i.class_label.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }
}

/// Draws repetition `rep_index`. The stream depends only on
/// (`spec.seed`, `spec.setup`, `rep_index`).
pub fn sample_episode(partitions: &[PartitionedClass], spec: &EpisodeSpec, rep_index: usize) -> Result<Episode> {
    spec.check(partitions)?;
    let mut rng = rng_for("episode", &[spec.seed.into(), spec.setup.as_str().into(), rep_index.into()]);
    let mut support = Vec::new();
    let mut query = Vec::new();
    let mut ordered: Vec<&PartitionedClass> = partitions.iter().collect();
    ordered.sort_by(|a, b| a.class_label.cmp(&b.class_label));
    for p in ordered {
        let item = |id: &String| EpisodeItem {
            image_id: id.clone(),
            class_label: p.class_label.clone(),
        };
        for i in rand::seq::index::sample(&mut rng, p.support_pool.len(), spec.k_shot) {
            support.push(item(&p.support_pool[i]));
        }
        match spec.query_per_class {
            QueryCount::All => query.extend(p.query_pool.iter().map(item)),
            QueryCount::Count(q) => {
                for i in rand::seq::index::sample(&mut rng, p.query_pool.len(), q) {
                    query.push(item(&p.query_pool[i]));
                }
            }
        }
    }
    Ok(Episode {
        index: rep_index,
        support,
        query,
    })
}

/// The image ids referenced by a set of partitions.
pub fn partition_ids(partitions: &[PartitionedClass]) -> BTreeSet<&str> {
    partitions
        .iter()
        .flat_map(|p| p.support_pool.iter().chain(&p.query_pool))
        .map(String::as_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, class: &str, crop: &str) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            path: PathBuf::from(format!("{id}.png")),
            class_label: class.into(),
            crop: crop.into(),
            background: Background::Lab,
        }
    }

    fn toy(counts: &[(&str, &str, usize)]) -> DatasetManifest {
        let mut records = Vec::new();
        for (class, crop, n) in counts {
            for i in 0..*n {
                records.push(rec(&format!("{class}-{i:04}"), class, crop));
            }
        }
        DatasetManifest::from_records("toy", "", records, None).unwrap()
    }

    #[test]
    fn classes_sorted_with_counts() {
        let m = toy(&[("b", "x", 2), ("a", "x", 3)]);
        assert_eq!(
            m.classes,
            vec![ClassEntry { name: "a".into(), count: 3 }, ClassEntry { name: "b".into(), count: 2 }]
        );
    }

    #[test]
    fn empty_and_duplicate_rejected() {
        let e = DatasetManifest::from_records("x", "", vec![], None).unwrap_err();
        assert_eq!(e.to_string(), "empty manifest");
        let e = DatasetManifest::from_records("x", "", vec![rec("a", "c", "x"), rec("a", "c", "x")], None).unwrap_err();
        assert!(matches!(e, CorpusError::DuplicateId(ref id) if id == "a"), "{e}");
    }

    #[test]
    fn undeclared_label_rejected() {
        let decl = vec!["c".to_string()];
        let e = DatasetManifest::from_records("x", "", vec![rec("a", "d", "x")], Some(&decl)).unwrap_err();
        assert!(matches!(e, CorpusError::UndeclaredClass { .. }));
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = toy(&[("Apple___healthy", "Apple", 2), ("Tomato___healthy", "Tomato", 1)]);
        let text = m.to_manifest_string();
        let back = parse_manifest(&text, Path::new("mem"), Path::new(""), ImageCheck::Skip).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.digest(), m.digest());
    }

    #[test]
    fn malformed_rows_report_line() {
        let text = "{\"name\":\"x\"}\nimage_id,path,class_label,crop,background\na,p.png,c,x,lab\nb,p.png,c,x,moon\n";
        let e = parse_manifest(text, Path::new("m.csv"), Path::new(""), ImageCheck::Skip).unwrap_err();
        assert!(matches!(e, CorpusError::Format { line: 4, .. }), "{e}");
    }

    #[test]
    fn digest_ignores_record_order() {
        let m = toy(&[("a", "x", 3), ("b", "y", 3)]);
        let mut r = m.records.clone();
        r.reverse();
        let m2 = DatasetManifest::from_records("toy", "", r, None).unwrap();
        assert_eq!(m.digest(), m2.digest());
    }

    #[test]
    fn s1_split_takes_tomato_crop() {
        let m = toy(&[("Tomato___a", "Tomato", 3), ("Tomato___b", "Tomato", 3), ("Apple___a", "Apple", 3)]);
        let split = make_class_split_with(&m, None, SetupId::S1, &SetupRoster::relaxed(SetupId::S1)).unwrap();
        assert_eq!(split.meta_test_classes.len(), 2);
        assert_eq!(split.meta_train_classes.iter().collect::<Vec<_>>(), vec!["Apple___a"]);
        let e = make_class_split(&m, SetupId::S1).unwrap_err();
        assert!(e.to_string().contains("expected 28 meta-train classes"), "{e}");
    }

    #[test]
    fn missing_roster_class_is_named() {
        let m = toy(&[("Apple___Apple_scab", "Apple", 3)]);
        let e = make_class_split(&m, SetupId::S2).unwrap_err();
        assert!(e.to_string().contains("Apple___Black_rot"), "{e}");
    }

    #[test]
    fn support_size_rounds_half_up_and_clamps() {
        assert_eq!(support_size(100, 0.8), 80);
        assert_eq!(support_size(535, 0.8), 428);
        assert_eq!(support_size(5, 0.5), 3);
        assert_eq!(support_size(2, 0.8), 1);
        assert_eq!(support_size(2, 0.1), 1);
    }

    #[test]
    fn partition_and_episode_counts() {
        let m = toy(&[("a", "x", 100), ("b", "x", 535)]);
        let classes: BTreeSet<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let p = partition_support_query(&m, &classes, 0.8, 1).unwrap();
        assert_eq!((p[0].support_pool.len(), p[0].query_pool.len()), (80, 20));
        assert_eq!((p[1].support_pool.len(), p[1].query_pool.len()), (428, 107));
        assert_eq!(p, partition_support_query(&m, &classes, 0.8, 1).unwrap());
        let spec = EpisodeSpec {
            k_shot: 15,
            query_per_class: QueryCount::All,
            repetitions: 1,
            seed: 3,
            setup: SetupId::S3,
        };
        let e = sample_episode(&p, &spec, 0).unwrap();
        assert_eq!(e.support.len(), 30);
        assert_eq!(e.query.len(), 127);
        let e = sample_episode(&p, &EpisodeSpec { k_shot: 0, ..spec.clone() }, 0).unwrap_err();
        assert!(matches!(e, CorpusError::Sampling(_)));
        let e = sample_episode(&p, &EpisodeSpec { k_shot: 81, ..spec }, 0).unwrap_err();
        assert!(e.to_string().contains("class `a`"), "{e}");
    }

    #[test]
    fn folder_index_reads_class_folders() {
        let dir = tempfile::tempdir().unwrap();
        for (class, files) in [("Apple___healthy", ["b.JPG", "a.png"]), ("Brown Spot", ["x.jpg", "notes.txt"])] {
            fs::create_dir_all(dir.path().join(class)).unwrap();
            for f in files {
                fs::write(dir.path().join(class).join(f), b"").unwrap();
            }
        }
        let m = index_folder(dir.path(), "tree", Background::Field, None).unwrap();
        assert_eq!(m.class_names(), ["Apple___healthy", "Brown Spot"]);
        let ids: Vec<&str> = m.records.iter().map(|r| r.image_id.as_str()).collect();
        assert_eq!(ids, ["Apple___healthy/a.png", "Apple___healthy/b.JPG", "Brown Spot/x.jpg"]);
        assert_eq!(m.records[0].crop, "Apple");
        assert_eq!(m.records[2].crop, "Brown Spot");
        assert!(m.records.iter().all(|r| r.path.is_absolute() && r.background == Background::Field));
        let rice = index_folder(dir.path(), "tree", Background::Field, Some("Rice")).unwrap();
        assert!(rice.records.iter().all(|r| r.crop == "Rice"));
    }

    #[test]
    fn tiny_class_cannot_partition() {
        let m = toy(&[("a", "x", 1)]);
        let classes: BTreeSet<String> = ["a".to_string()].into();
        assert!(matches!(
            partition_support_query(&m, &classes, 0.8, 0),
            Err(CorpusError::ClassTooSmall { count: 1, .. })
        ));
        assert!(matches!(partition_support_query(&m, &classes, 1.0, 0), Err(CorpusError::BadRatio(_))));
    }

    #[test]
    fn query_count_serde() {
        assert_eq!(serde_json::to_string(&QueryCount::All).unwrap(), "\"all\"");
        assert_eq!(serde_json::from_str::<QueryCount>("50").unwrap(), QueryCount::Count(50));
        assert_eq!(serde_json::from_str::<QueryCount>("\"ALL\"").unwrap(), QueryCount::All);
    }
}
