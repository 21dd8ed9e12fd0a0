//! Episodic classifier heads over fused features: dense, LSTM, Bi-LSTM,
//! self-attention, Bi-LSTM + self-attention and Bi-LSTM + multi-head
//! attention. Each episode trains a fresh head on its support set only.

mod net;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use net::{argmax, softmax_rows, HeadNet};

use crate::fusion::{FusedFeature, FusionLayout, SequenceMode};
use crate::seeds::rng_for;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("inference: {0}")]
    Layout(String),
    #[error("{0} head has no attention weights")]
    Unsupported(HeadKind),
    #[error("cannot write checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Dense,
    Lstm,
    Bilstm,
    SelfAttn,
    BilstmSelfAttn,
    BilstmMha,
}

impl HeadKind {
    pub const ALL: [HeadKind; 6] = [
        HeadKind::Dense,
        HeadKind::Lstm,
        HeadKind::Bilstm,
        HeadKind::SelfAttn,
        HeadKind::BilstmSelfAttn,
        HeadKind::BilstmMha,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Dense => "dense",
            HeadKind::Lstm => "lstm",
            HeadKind::Bilstm => "bilstm",
            HeadKind::SelfAttn => "self_attn",
            HeadKind::BilstmSelfAttn => "bilstm_self_attn",
            HeadKind::BilstmMha => "bilstm_mha",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            HeadKind::Dense => "Dense",
            HeadKind::Lstm => "LSTM",
            HeadKind::Bilstm => "Bi-LSTM",
            HeadKind::SelfAttn => "Self-Attention",
            HeadKind::BilstmSelfAttn => "Bi-LSTM + Self-Attention",
            HeadKind::BilstmMha => "Bi-LSTM + Multi-head Attention",
        }
    }

    pub fn recurrent(self) -> bool {
        matches!(self, HeadKind::Lstm | HeadKind::Bilstm | HeadKind::BilstmSelfAttn | HeadKind::BilstmMha)
    }

    pub fn bidirectional(self) -> bool {
        matches!(self, HeadKind::Bilstm | HeadKind::BilstmSelfAttn | HeadKind::BilstmMha)
    }

    pub fn attention(self) -> bool {
        matches!(self, HeadKind::SelfAttn | HeadKind::BilstmSelfAttn | HeadKind::BilstmMha)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = HeadError;

    fn from_str(s: &str) -> Result<Self, HeadError> {
        let t = s.trim();
        HeadKind::ALL
            .into_iter()
            .find(|k| k.as_str() == t || k.display_name().eq_ignore_ascii_case(t))
            .ok_or_else(|| HeadError::Config(format!("unknown head kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// LSTM state width and attention width.
    pub hidden_dim: usize,
    /// Multi-head attention only; must divide `hidden_dim`.
    pub attn_heads: usize,
    pub dropout: f64,
    pub epochs: usize,
    /// Stop after this many epochs without support-loss improvement (0 = off).
    pub patience: usize,
    pub min_delta: f64,
    pub learning_rate: f64,
    /// Mini-batch size when the support set is larger than `full_batch_max`.
    pub batch_size: usize,
    pub full_batch_max: usize,
    /// Layer normalization on tokens (sequence heads) or the fused vector (dense).
    pub input_norm: bool,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::Bilstm,
            hidden_dim: 256,
            attn_heads: 4,
            dropout: 0.1,
            epochs: 50,
            patience: 10,
            min_delta: 1e-4,
            learning_rate: 1e-3,
            batch_size: 64,
            full_batch_max: 64,
            input_norm: true,
            seed: 0,
        }
    }
}

impl HeadConfig {
    pub fn new(kind: HeadKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        let err = |m: String| Err(HeadError::Config(m));
        if self.epochs == 0 {
            return err("epochs must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.hidden_dim == 0 {
            return err("hidden_dim must be positive".into());
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.kind == HeadKind::BilstmMha && (self.attn_heads == 0 || !self.hidden_dim.is_multiple_of(self.attn_heads)) {
            return err(format!(
                "attn_heads {} does not divide the attention width {}",
                self.attn_heads, self.hidden_dim
            ));
        }
        Ok(())
    }
}

/// What a head consumes: the fused layout plus how it becomes tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputLayout {
    pub fusion: FusionLayout,
    pub mode: SequenceMode,
    pub d_tok: usize,
}

impl InputLayout {
    pub fn new(fusion: FusionLayout, mode: SequenceMode, d_tok: usize) -> Self {
        Self { fusion, mode, d_tok }
    }

    /// Default ensemble, per-backbone tokens of width 256.
    pub fn default_ensemble() -> Self {
        Self::new(FusionLayout::default_ensemble(), SequenceMode::PerBackbone, 256)
    }

    pub fn token_width(&self) -> usize {
        self.d_tok
    }

    pub fn tokens(&self) -> usize {
        self.mode.tokens(&self.fusion, self.d_tok)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    /// Running minimum of `losses`.
    pub smoothed: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub probs: Vec<f64>,
    pub argmax_label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedHead {
    pub config: HeadConfig,
    pub n_classes: usize,
    pub input_layout: InputLayout,
    /// Class names in index order, fixed by training.
    pub labels: Vec<String>,
    pub trained: bool,
    pub train_log: TrainLog,
    pub net: HeadNet,
}

pub fn build_head(config: &HeadConfig, n_classes: usize, layout: &InputLayout) -> Result<TrainedHead, HeadError> {
    config.validate()?;
    if n_classes == 0 {
        return Err(HeadError::Config("n_classes must be positive".into()));
    }
    if layout.fusion.dim() == 0 || layout.fusion.is_empty() {
        return Err(HeadError::Config("empty input layout".into()));
    }
    if config.kind != HeadKind::Dense && layout.d_tok == 0 {
        return Err(HeadError::Config("token width must be positive".into()));
    }
    Ok(TrainedHead {
        config: config.clone(),
        n_classes,
        input_layout: layout.clone(),
        labels: Vec::new(),
        trained: false,
        train_log: TrainLog::default(),
        net: HeadNet::new(config, n_classes, layout),
    })
}

/// Stacks fused vectors into an `n x D` matrix after checking their layout.
pub fn stack(layout: &FusionLayout, rows: &[&FusedFeature]) -> Result<Array2<f64>, HeadError> {
    let d = layout.dim();
    let mut x = Array2::zeros((rows.len(), d));
    for (i, f) in rows.iter().enumerate() {
        if &f.layout != layout || f.vector.len() != d {
            return Err(HeadError::Layout(format!(
                "input {i} has layout of width {} but the head expects {d}",
                f.vector.len()
            )));
        }
        for (dst, &v) in x.row_mut(i).iter_mut().zip(&f.vector) {
            *dst = v as f64;
        }
    }
    Ok(x)
}

/// Trains on support items only. `classes` fixes the label order and must
/// list exactly `n_classes` names, each present in the support set.
pub fn train_episode(
    mut head: TrainedHead,
    support: &[(FusedFeature, String)],
    classes: &[String],
) -> Result<TrainedHead, HeadError> {
    if support.is_empty() {
        return Err(HeadError::Protocol("empty support set".into()));
    }
    if classes.len() != head.n_classes {
        return Err(HeadError::Protocol(format!(
            "head has {} classes but the episode has {}",
            head.n_classes,
            classes.len()
        )));
    }
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut labels = Vec::with_capacity(support.len());
    for (_, l) in support {
        labels.push(*index.get(l.as_str()).ok_or_else(|| HeadError::Protocol(format!("support label `{l}` is not an episode class")))?);
    }
    for (i, c) in classes.iter().enumerate() {
        if !labels.contains(&i) {
            return Err(HeadError::Protocol(format!("class `{c}` missing from the support set")));
        }
    }
    let rows: Vec<&FusedFeature> = support.iter().map(|(f, _)| f).collect();
    let x = stack(&head.input_layout.fusion, &rows)?;
    head.labels = classes.to_vec();
    fit(&mut head, &x, &labels)?;
    Ok(head)
}

/// Adam on softmax cross-entropy; full batch for small support sets.
pub fn fit(head: &mut TrainedHead, x: &Array2<f64>, labels: &[usize]) -> Result<(), HeadError> {
    let cfg = head.config.clone();
    let n = x.nrows();
    let mut rng = rng_for("head-train", &[cfg.seed.into(), cfg.kind.as_str().into()]);
    let mut opt = net::Adam::new(&head.net.store, cfg.learning_rate);
    let batch = if n <= cfg.full_batch_max { n } else { cfg.batch_size };
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        let mut total_loss = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(batch) {
            let xb = x.select(ndarray::Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (logits, cache) = head.net.forward(&xb, Some(&mut rng));
            let (loss, dlogits, hits) = HeadNet::loss(&logits, &yb);
            if !loss.is_finite() {
                return Err(HeadError::Diverged { epoch });
            }
            head.net.store.zero_grad();
            head.net.backward(&cache, &dlogits);
            opt.step(&mut head.net.store);
            total_loss += loss * chunk.len() as f64;
            correct += hits;
        }
        let loss = total_loss / n as f64;
        log.losses.push(loss);
        log.smoothed.push(loss.min(log.smoothed.last().copied().unwrap_or(f64::INFINITY)));
        log.accuracies.push(correct as f64 / n as f64);
        if loss < best - cfg.min_delta {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    head.train_log = log;
    head.trained = true;
    Ok(())
}

impl TrainedHead {
    fn check_ready(&self) -> Result<(), HeadError> {
        if !self.trained || self.labels.len() != self.n_classes {
            return Err(HeadError::Layout("head has not been trained".into()));
        }
        Ok(())
    }

    /// Class probabilities for each row of `x`.
    pub fn probs(&self, x: &Array2<f64>) -> Array2<f64> {
        softmax_rows(&self.net.logits(x))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), HeadError> {
        let err = |message: String| HeadError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let json = serde_json::to_vec(self).map_err(|e| err(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| err(e.to_string()))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, HeadError> {
        let err = |message: String| HeadError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))
    }
}

/// One prediction per query item, in input order.
pub fn predict(head: &TrainedHead, query: &[(String, FusedFeature)]) -> Result<Vec<Prediction>, HeadError> {
    head.check_ready()?;
    if query.is_empty() {
        return Ok(Vec::new());
    }
    let rows: Vec<&FusedFeature> = query.iter().map(|(_, f)| f).collect();
    let x = stack(&head.input_layout.fusion, &rows)?;
    let probs = head.probs(&x);
    Ok(query
        .iter()
        .zip(probs.rows())
        .map(|((id, _), p)| {
            let p = p.to_vec();
            Prediction {
                image_id: id.clone(),
                argmax_label: head.labels[argmax(&p)].clone(),
                probs: p,
            }
        })
        .collect())
}

/// Per-token attention weights for one query (nonnegative, summing to 1).
pub fn attention_weights(head: &TrainedHead, query: &FusedFeature) -> Result<Vec<f64>, HeadError> {
    if !head.config.kind.attention() {
        return Err(HeadError::Unsupported(head.config.kind));
    }
    let x = stack(&head.input_layout.fusion, &[query])?;
    let w = head.net.token_weights(&x).ok_or(HeadError::Unsupported(head.config.kind))?;
    Ok(w.row(0).to_vec())
}

/// Attention weights for an explicit token matrix (`T x d_tok`), bypassing
/// the input projection.
pub fn attention_weights_for_tokens(head: &TrainedHead, tokens: &Array2<f64>) -> Result<Vec<f64>, HeadError> {
    if !head.config.kind.attention() {
        return Err(HeadError::Unsupported(head.config.kind));
    }
    if tokens.ncols() != head.input_layout.d_tok {
        return Err(HeadError::Layout(format!(
            "token width {} but the head expects {}",
            tokens.ncols(),
            head.input_layout.d_tok
        )));
    }
    let per_token: Vec<Array2<f64>> = tokens.rows().into_iter().map(|r| r.to_owned().insert_axis(ndarray::Axis(0))).collect();
    let w = head.net.token_weights_from_tokens(&per_token).ok_or(HeadError::Unsupported(head.config.kind))?;
    Ok(w.row(0).to_vec())
}

#[cfg(test)]
mod tests;
