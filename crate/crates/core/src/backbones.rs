//! Backbone adaptation, embedding extraction and the on-disk feature cache.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use leaffew_mobilenet::weights::{self, HeadPolicy};
use leaffew_mobilenet::{cosine_lr, softmax_cross_entropy, Architecture, Backbone, Optimizer, OptimizerKind, Tensor, WeightsError};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DatasetManifest, ImageRecord};
use crate::footprint::{BackboneSpec, GFLOPS_CONVENTION, SIZE_CONVENTION};
use crate::seeds::{rng_for, sha256_hex};

pub const CACHE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{backbone}: training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { backbone: String, epoch: usize },
    #[error("cannot decode image `{image_id}` ({path}): {message}")]
    Decode {
        image_id: String,
        path: String,
        message: String,
    },
    #[error("unreadable images: {}", .0.join(", "))]
    Unreadable(Vec<String>),
    #[error("non-finite activation extracting `{image_id}`")]
    NonFinite { image_id: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("feature cache {path}: {message}")]
    Cache { path: String, message: String },
    #[error(transparent)]
    Weights(#[from] WeightsError),
}

type Result<T, E = BackboneError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BackboneError + '_ {
    move |source| BackboneError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Resize-shorter-side, center-crop, per-channel normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub resize: u32,
    pub crop: u32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    /// Pretraining recipe the constants belong to.
    pub normalization: String,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self::for_resolution(224)
    }
}

impl PreprocessSpec {
    /// Keeps the 256/224 resize-to-crop ratio at other resolutions.
    pub fn for_resolution(crop: u32) -> Self {
        Self {
            resize: (crop as f64 * 256.0 / 224.0).round() as u32,
            crop,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            normalization: "imagenet".into(),
        }
    }

    fn resize_shorter(&self, img: &RgbImage) -> RgbImage {
        let (w, h) = img.dimensions();
        let s = self.resize.max(self.crop);
        let (nw, nh) = if w <= h {
            (s, ((h as u64 * s as u64 + w as u64 / 2) / w as u64).max(s as u64) as u32)
        } else {
            (((w as u64 * s as u64 + h as u64 / 2) / h as u64).max(s as u64) as u32, s)
        };
        if (nw, nh) == (w, h) {
            img.clone()
        } else {
            imageops::resize(img, nw, nh, FilterType::Triangle)
        }
    }

    fn to_chw(&self, img: &RgbImage, x0: u32, y0: u32, flip: bool, out: &mut [f32]) {
        let c = self.crop;
        let plane = (c * c) as usize;
        for y in 0..c {
            for x in 0..c {
                let sx = if flip { x0 + c - 1 - x } else { x0 + x };
                let p = img.get_pixel(sx, y0 + y);
                let i = (y * c + x) as usize;
                for ch in 0..3 {
                    out[ch * plane + i] = (p[ch] as f32 / 255.0 - self.mean[ch]) / self.std[ch];
                }
            }
        }
    }

    /// Inference transform: center crop.
    pub fn apply(&self, img: &RgbImage, out: &mut [f32]) {
        let r = self.resize_shorter(img);
        let (w, h) = r.dimensions();
        self.to_chw(&r, (w - self.crop) / 2, (h - self.crop) / 2, false, out);
    }

    /// Training transform: random crop plus horizontal flip.
    pub fn augment(&self, img: &RgbImage, rng: &mut impl Rng, out: &mut [f32]) {
        let r = self.resize_shorter(img);
        let (w, h) = r.dimensions();
        let x0 = rng.random_range(0..=w - self.crop);
        let y0 = rng.random_range(0..=h - self.crop);
        self.to_chw(&r, x0, y0, rng.random_bool(0.5), out);
    }

    pub fn item_len(&self) -> usize {
        3 * (self.crop * self.crop) as usize
    }
}

pub fn decode(record: &ImageRecord) -> Result<RgbImage> {
    image::open(&record.path).map(|i| i.to_rgb8()).map_err(|e| BackboneError::Decode {
        image_id: record.image_id.clone(),
        path: record.path.display().to_string(),
        message: e.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationTag {
    ImagenetOnly,
    DomainAdapted,
}

impl AdaptationTag {
    pub fn as_str(self) -> &'static str {
        match self {
            AdaptationTag::ImagenetOnly => "imagenet_only",
            AdaptationTag::DomainAdapted => "domain_adapted",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the cosine schedule.
    pub learning_rate: f32,
    pub optimizer: OptimizerKind,
    /// Stratified fraction of meta-train images held out for early stopping.
    pub holdout_fraction: f64,
    /// Epochs without held-out loss improvement before stopping (0 = off).
    pub patience: usize,
    pub augment: bool,
    pub expected_classes: Option<usize>,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
            holdout_fraction: 0.1,
            patience: 5,
            augment: true,
            expected_classes: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f32,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose weights were kept (by held-out loss), if any training ran.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    /// Inference-mode accuracy on the training portion with the kept weights.
    pub final_train_accuracy: Option<f64>,
}

/// A backbone plus its provenance. The N-way head stays attached but
/// extraction never reads it.
#[derive(Clone, Debug)]
pub struct AdaptedBackbone {
    pub spec: BackboneSpec,
    pub adaptation_tag: AdaptationTag,
    pub train_class_count: usize,
    pub classes: Vec<String>,
    /// Where the starting weights came from.
    pub init: String,
    pub log: TrainingLog,
    pub net: Backbone,
}

#[derive(Serialize, Deserialize)]
struct ArtifactMeta {
    spec: BackboneSpec,
    adaptation_tag: AdaptationTag,
    train_class_count: usize,
    classes: Vec<String>,
    init: String,
    head_classes: Option<usize>,
    weights_digest: String,
}

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const ARTIFACT_FILE: &str = "artifact.json";
pub const TRAINING_LOG_FILE: &str = "training_log.json";

/// Starting weights: `<weights_dir>/<arch>.safetensors` when present
/// (ImageNet weights exported under torchvision names), otherwise a seeded
/// initialization whose batch-norm statistics are calibrated on procedural
/// images at `resolution` (see [`calibration_batches`]).
pub fn initial_backbone(
    arch: Architecture,
    seed: u64,
    weights_dir: Option<&Path>,
    resolution: u32,
) -> Result<(Backbone, String)> {
    let mut net = Backbone::new(arch, 1000, seed);
    if let Some(dir) = weights_dir {
        let path = dir.join(format!("{}.safetensors", arch.name()));
        if path.exists() {
            weights::load(&mut net, &path, HeadPolicy::Ignore)?;
            return Ok((net, format!("file:{}", path.display())));
        }
    }
    net.calibrate_batch_norm(&calibration_batches(&PreprocessSpec::for_resolution(resolution), seed));
    Ok((net, format!("seeded:{seed}:calibrated@{resolution}")))
}

/// Two batches of 16 smooth random colour fields, normalized like real
/// inputs. Without this, the default running statistics (mean 0, var 1) make
/// inference-mode activations of a fresh network vanish layer by layer.
pub fn calibration_batches(prep: &PreprocessSpec, seed: u64) -> Vec<Tensor> {
    let c = prep.crop as usize;
    let mut rng = rng_for("bn-calibration", &[seed.into(), c.into()]);
    (0..2)
        .map(|_| {
            let mut data = vec![0.0f32; 16 * prep.item_len()];
            for item in data.chunks_mut(prep.item_len()) {
                let waves: Vec<[f32; 5]> = (0..4)
                    .map(|_| {
                        [
                            rng.random_range(0.5..4.0),
                            rng.random_range(0.5..4.0),
                            rng.random_range(0.0..6.3),
                            rng.random_range(0.05..0.25),
                            rng.random_range(0.0..3.0),
                        ]
                    })
                    .collect();
                let base: [f32; 3] = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
                for ch in 0..3 {
                    for y in 0..c {
                        for x in 0..c {
                            let (u, v) = (x as f32 / c as f32, y as f32 / c as f32);
                            let mut val = base[ch];
                            for w in &waves {
                                val += w[3] * ((w[0] * u + w[1] * v) * std::f32::consts::TAU + w[2] + w[4] * ch as f32).sin();
                            }
                            val += rng.random_range(-0.03..0.03);
                            item[ch * c * c + y * c + x] = (val.clamp(0.0, 1.0) - prep.mean[ch]) / prep.std[ch];
                        }
                    }
                }
            }
            batch_tensor(16, prep, data)
        })
        .collect()
}

impl AdaptedBackbone {
    /// Wraps unmodified starting weights.
    pub fn imagenet_only(net: Backbone, init: String, resolution: usize) -> Self {
        Self {
            spec: BackboneSpec::of(&net, resolution),
            adaptation_tag: AdaptationTag::ImagenetOnly,
            train_class_count: 0,
            classes: Vec::new(),
            init,
            log: TrainingLog::default(),
            net,
        }
    }

    pub fn arch(&self) -> Architecture {
        self.net.arch
    }

    pub fn weights_digest(&mut self) -> String {
        sha256_hex(&weights::to_bytes(&mut self.net, &BTreeMap::new()))
    }

    /// Writes weights, metadata and the training log into `dir`.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let meta_map = BTreeMap::from([
            ("architecture".to_string(), self.arch().name().to_string()),
            ("adaptation_tag".to_string(), self.adaptation_tag.as_str().to_string()),
        ]);
        let bytes = weights::to_bytes(&mut self.net, &meta_map);
        let meta = ArtifactMeta {
            spec: self.spec.clone(),
            adaptation_tag: self.adaptation_tag,
            train_class_count: self.train_class_count,
            classes: self.classes.clone(),
            init: self.init.clone(),
            head_classes: self.net.num_classes(),
            weights_digest: sha256_hex(&bytes),
        };
        write_atomic(&dir.join(WEIGHTS_FILE), &bytes)?;
        write_atomic(&dir.join(TRAINING_LOG_FILE), &to_json(&self.log))?;
        write_atomic(&dir.join(ARTIFACT_FILE), &to_json(&meta))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(ARTIFACT_FILE);
        let text = fs::read(&meta_path).map_err(io_err(&meta_path))?;
        let meta: ArtifactMeta = serde_json::from_slice(&text).map_err(|e| BackboneError::Cache {
            path: meta_path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut net = Backbone::new(meta.spec.name, meta.head_classes.unwrap_or(1000), 0);
        if meta.head_classes.is_none() {
            net.strip_head();
        }
        weights::load(&mut net, &dir.join(WEIGHTS_FILE), HeadPolicy::Require)?;
        let log_path = dir.join(TRAINING_LOG_FILE);
        let log = match fs::read(&log_path) {
            Ok(b) => serde_json::from_slice(&b).unwrap_or_default(),
            Err(_) => TrainingLog::default(),
        };
        Ok(Self {
            spec: meta.spec,
            adaptation_tag: meta.adaptation_tag,
            train_class_count: meta.train_class_count,
            classes: meta.classes,
            init: meta.init,
            log,
            net,
        })
    }

    /// True when `dir` holds a loadable artifact whose weights match its recorded digest.
    pub fn verify(dir: &Path) -> bool {
        let Ok(text) = fs::read(dir.join(ARTIFACT_FILE)) else {
            return false;
        };
        let Ok(meta) = serde_json::from_slice::<ArtifactMeta>(&text) else {
            return false;
        };
        fs::read(dir.join(WEIGHTS_FILE)).is_ok_and(|b| sha256_hex(&b) == meta.weights_digest)
    }
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializable");
    b.push(b'\n');
    b
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension(format!(
        "{}tmp",
        path.extension().map(|e| format!("{}.", e.to_string_lossy())).unwrap_or_default()
    ));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn batch_tensor(n: usize, prep: &PreprocessSpec, data: Vec<f32>) -> Tensor {
    let c = prep.crop as usize;
    Tensor::from_vec([n, 3, c, c], data)
}

/// Stratified holdout: per class, ids sorted then shuffled, the first
/// `round(fraction * n)` held out (never the whole class).
fn holdout_split(records: &[&ImageRecord], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.class_label.as_str()).or_default().push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (class, mut idx) in by_class {
        idx.sort_by(|&a, &b| records[a].image_id.cmp(&records[b].image_id));
        idx.shuffle(&mut rng_for("holdout", &[seed.into(), class.into()]));
        let n_val = ((fraction * idx.len() as f64).round() as usize).min(idx.len() - 1);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Training images used to re-estimate batch-norm statistics before each
/// held-out evaluation.
const CALIBRATION_PROBE: usize = 256;

/// Re-estimates batch-norm statistics on clean images `idx` (which should be
/// in shuffled order). After a short
/// schedule the running averages lag far behind the weights (momentum 0.01
/// in the MobileNetV3 blocks) and inference-mode activations blow up.
fn recalibrate(net: &mut Backbone, images: &[RgbImage], idx: &[usize], prep: &PreprocessSpec, batch: usize) {
    let batches: Vec<Tensor> = idx
        .chunks(batch.max(2))
        .filter(|c| c.len() > 1)
        .map(|chunk| {
            let mut data = vec![0.0; chunk.len() * prep.item_len()];
            for (slot, &i) in data.chunks_mut(prep.item_len()).zip(chunk) {
                prep.apply(&images[i], slot);
            }
            batch_tensor(chunk.len(), prep, data)
        })
        .collect();
    net.calibrate_batch_norm(&batches);
}

/// Mean loss and accuracy in inference mode.
fn evaluate(
    net: &mut Backbone,
    images: &[RgbImage],
    labels: &[usize],
    idx: &[usize],
    prep: &PreprocessSpec,
    batch: usize,
) -> (f64, f64) {
    let (mut loss, mut correct) = (0.0, 0);
    for chunk in idx.chunks(batch.max(1)) {
        let mut data = vec![0.0; chunk.len() * prep.item_len()];
        for (slot, &i) in data.chunks_mut(prep.item_len()).zip(chunk) {
            prep.apply(&images[i], slot);
        }
        let feats = net.forward_features(&batch_tensor(chunk.len(), prep, data), false);
        let logits = net.forward_logits(&feats, false);
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let (l, _, c) = softmax_cross_entropy(&logits, &y);
        loss += l as f64 * chunk.len() as f64;
        correct += c;
    }
    let n = idx.len().max(1) as f64;
    (loss / n, correct as f64 / n)
}

/// Full fine-tune on every record of `train_set` with a fresh N-way head.
/// Classes are indexed in sorted order.
pub fn finetune_backbone(
    mut net: Backbone,
    init: String,
    train_set: &DatasetManifest,
    cfg: &AdaptationConfig,
    prep: &PreprocessSpec,
) -> Result<AdaptedBackbone> {
    let classes = train_set.class_names();
    if let Some(n) = cfg.expected_classes {
        if n != classes.len() {
            return Err(BackboneError::Config(format!(
                "expected {n} meta-train classes, found {}",
                classes.len()
            )));
        }
    }
    if classes.len() < 2 {
        return Err(BackboneError::Config("fine-tuning needs at least two classes".into()));
    }
    if cfg.batch_size < 2 {
        return Err(BackboneError::Config("batch_size must be at least 2".into()));
    }
    let name = net.arch.name().to_string();
    net.replace_head(classes.len());
    let mut log = TrainingLog::default();
    if cfg.epochs > 0 {
        train(&mut net, &name, train_set, &classes, cfg, prep, &mut log)?;
    }
    Ok(AdaptedBackbone {
        spec: BackboneSpec::of(&net, 224),
        adaptation_tag: AdaptationTag::DomainAdapted,
        train_class_count: classes.len(),
        classes,
        init,
        log,
        net,
    })
}

fn train(
    net: &mut Backbone,
    name: &str,
    train_set: &DatasetManifest,
    classes: &[String],
    cfg: &AdaptationConfig,
    prep: &PreprocessSpec,
    log: &mut TrainingLog,
) -> Result<()> {
    let records = train_set.sorted_records();
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let labels: Vec<usize> = records.iter().map(|r| index[r.class_label.as_str()]).collect();
    let mut images = Vec::with_capacity(records.len());
    let mut bad = Vec::new();
    for r in &records {
        match decode(r) {
            Ok(i) => images.push(i),
            Err(_) => {
                bad.push(r.image_id.clone());
                images.push(RgbImage::new(1, 1));
            }
        }
    }
    if !bad.is_empty() {
        return Err(BackboneError::Unreadable(bad));
    }
    let (mut train_idx, val_idx) = holdout_split(&records, cfg.holdout_fraction, cfg.seed);
    let mut rng = rng_for("finetune", &[cfg.seed.into(), name.into()]);
    let mut opt = Optimizer::new(cfg.optimizer);
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut best: Option<(f64, Vec<u8>)> = None;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        let lr = cosine_lr(cfg.learning_rate, step, total_steps);
        for chunk in train_idx.chunks(cfg.batch_size) {
            // batch norm needs more than one sample per batch
            if chunk.len() < 2 {
                continue;
            }
            let mut data = vec![0.0; chunk.len() * prep.item_len()];
            for (slot, &i) in data.chunks_mut(prep.item_len()).zip(chunk) {
                if cfg.augment {
                    prep.augment(&images[i], &mut rng, slot);
                } else {
                    prep.apply(&images[i], slot);
                }
            }
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let feats = net.forward_features(&batch_tensor(chunk.len(), prep, data), true);
            let logits = net.forward_logits(&feats, true);
            let (loss, dlogits, c) = softmax_cross_entropy(&logits, &y);
            if !loss.is_finite() {
                return Err(BackboneError::Diverged {
                    backbone: name.to_string(),
                    epoch,
                });
            }
            net.zero_grad();
            net.backward(&dlogits);
            opt.step(net, cosine_lr(cfg.learning_rate, step, total_steps));
            step += 1;
            loss_sum += loss as f64 * chunk.len() as f64;
            correct += c;
            seen += chunk.len();
        }
        let (val_loss, val_accuracy) = if val_idx.is_empty() {
            (None, None)
        } else {
            let probe = &train_idx[..train_idx.len().min(CALIBRATION_PROBE)];
            recalibrate(net, &images, probe, prep, cfg.batch_size);
            let (l, a) = evaluate(net, &images, &labels, &val_idx, prep, cfg.batch_size);
            if !l.is_finite() {
                return Err(BackboneError::Diverged {
                    backbone: name.to_string(),
                    epoch,
                });
            }
            (Some(l), Some(a))
        };
        log.epochs.push(EpochLog {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / seen.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            val_loss,
            val_accuracy,
        });
        log::info!(
            "{name} epoch {epoch}: loss {:.4} acc {:.3} val {:?}",
            loss_sum / seen.max(1) as f64,
            correct as f64 / seen.max(1) as f64,
            val_accuracy
        );
        match val_loss {
            Some(l) if best.as_ref().is_none_or(|(b, _)| l < *b) => {
                best = Some((l, weights::to_bytes(net, &BTreeMap::new())));
                log.best_epoch = Some(epoch);
                stale = 0;
            }
            Some(_) => {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    log.stopped_early = true;
                    break;
                }
            }
            None => log.best_epoch = Some(epoch),
        }
    }
    if let Some((_, bytes)) = best {
        if log.best_epoch != log.epochs.last().map(|e| e.epoch) {
            weights::from_bytes(net, &bytes, HeadPolicy::Require)?;
        }
    }
    // batches must mix classes, or the averaged batch variances miss the
    // between-class spread
    let mut all_train = train_idx.clone();
    all_train.sort_unstable();
    all_train.shuffle(&mut rng_for("bn-recalibration", &[cfg.seed.into(), name.into()]));
    recalibrate(net, &images, &all_train, prep, cfg.batch_size);
    log.final_train_accuracy = Some(evaluate(net, &images, &labels, &all_train, prep, cfg.batch_size).1);
    Ok(())
}

/// Inference-mode pooled embedding of one image.
pub fn extract_embedding(model: &mut AdaptedBackbone, record: &ImageRecord, prep: &PreprocessSpec) -> Result<Vec<f32>> {
    let img = decode(record)?;
    let mut data = vec![0.0; prep.item_len()];
    prep.apply(&img, &mut data);
    let out = model.net.embed(&batch_tensor(1, prep, data));
    if !out.all_finite() {
        return Err(BackboneError::NonFinite {
            image_id: record.image_id.clone(),
        });
    }
    Ok(out.data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub format_version: u32,
    pub dataset: String,
    pub dataset_digest: String,
    pub backbone: Architecture,
    pub adaptation_tag: AdaptationTag,
    pub weights_digest: String,
    pub dim: usize,
    pub count: usize,
    pub preprocessing: PreprocessSpec,
    pub conventions: Vec<String>,
    pub complete: bool,
}

/// Embeddings in image_id-sorted row order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    pub header: CacheHeader,
    pub ids: Vec<String>,
    pub data: Vec<f32>,
}

/// File name encoding the cache key.
pub fn cache_file_name(dataset: &str, backbone: Architecture, tag: AdaptationTag, resolution: u32) -> String {
    let safe: String = dataset
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}__{}__{}__{resolution}.features", backbone.name(), tag.as_str())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

fn partial(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

impl FeatureCache {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.header.dim;
        &self.data[i * d..(i + 1) * d]
    }

    pub fn get(&self, image_id: &str) -> Option<&[f32]> {
        self.ids.binary_search_by(|x| x.as_str().cmp(image_id)).ok().map(|i| self.row(i))
    }

    pub fn payload_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header).expect("serializable header");
        out.push(b'\n');
        out.extend(self.payload_bytes());
        out
    }

    /// Writes the cache and its `.ids` sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut ids = String::new();
        for id in &self.ids {
            ids.push_str(id);
            ids.push('\n');
        }
        write_atomic(&sidecar(path), ids.as_bytes())?;
        write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bad = |message: String| BackboneError::Cache {
            path: path.display().to_string(),
            message,
        };
        let bytes = fs::read(path).map_err(io_err(path))?;
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line".into()))?;
        let header: CacheHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(e.to_string()))?;
        if header.format_version != CACHE_FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        let payload = &bytes[nl + 1..];
        if payload.len() != header.count * header.dim * 4 {
            return Err(bad(format!(
                "payload of {} bytes does not hold {} x {} floats",
                payload.len(),
                header.count,
                header.dim
            )));
        }
        let data: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let side = sidecar(path);
        let ids: Vec<String> = fs::read_to_string(&side).map_err(io_err(&side))?.lines().map(str::to_string).collect();
        if ids.len() != header.count {
            return Err(bad(format!("{} ids for {} rows", ids.len(), header.count)));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("ids are not sorted and unique".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite value".into()));
        }
        Ok(Self { header, ids, data })
    }

    /// A readable cache that is flagged complete.
    pub fn verify(path: &Path) -> bool {
        Self::read(path).is_ok_and(|c| c.header.complete)
    }
}

/// Embeds every record of `manifest` (sorted by id) and writes the cache to
/// `out`. On any failure the rows that did succeed go to `<out>.partial`
/// with the completeness flag unset.
pub fn build_feature_cache(
    model: &mut AdaptedBackbone,
    manifest: &DatasetManifest,
    prep: &PreprocessSpec,
    out: &Path,
) -> Result<FeatureCache> {
    let dim = model.net.embedding_dim();
    let weights_digest = model.weights_digest();
    let mut ids = Vec::with_capacity(manifest.len());
    let mut data = Vec::with_capacity(manifest.len() * dim);
    let mut failed = Vec::new();
    let mut first_error = None;
    for r in manifest.sorted_records() {
        match extract_embedding(model, r, prep) {
            Ok(v) => {
                ids.push(r.image_id.clone());
                data.extend(v);
            }
            Err(e) => {
                failed.push(r.image_id.clone());
                first_error.get_or_insert(e);
            }
        }
    }
    let mut cache = FeatureCache {
        header: CacheHeader {
            format_version: CACHE_FORMAT_VERSION,
            dataset: manifest.name.clone(),
            dataset_digest: manifest.digest(),
            backbone: model.arch(),
            adaptation_tag: model.adaptation_tag,
            weights_digest,
            dim,
            count: ids.len(),
            preprocessing: prep.clone(),
            conventions: vec![SIZE_CONVENTION.to_string(), GFLOPS_CONVENTION.to_string()],
            complete: false,
        },
        ids,
        data,
    };
    if !failed.is_empty() {
        cache.write(&partial(out))?;
        return Err(match first_error {
            Some(e @ BackboneError::NonFinite { .. }) if failed.len() == 1 => e,
            _ => BackboneError::Unreadable(failed),
        });
    }
    cache.header.complete = true;
    let _ = fs::remove_file(partial(out));
    let _ = fs::remove_file(sidecar(&partial(out)));
    cache.write(out)?;
    Ok(cache)
}
