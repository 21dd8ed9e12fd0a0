//! Concatenative fusion of per-backbone embeddings and the token-sequence
//! views fed to recurrent and attention heads.

use leaffew_mobilenet::Architecture;
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::rng_for;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FusionError {
    #[error("expected {expected} embeddings, found {found}")]
    Arity { expected: usize, found: usize },
    #[error("embedding for `{backbone}` has length {found}, expected {expected}")]
    Dimension {
        backbone: String,
        expected: usize,
        found: usize,
    },
    #[error("token width must be positive")]
    ZeroTokenWidth,
    #[error("projection does not match the fusion layout")]
    ProjectionLayout,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub backbone: String,
    pub offset: usize,
    pub length: usize,
}

/// Ordered (backbone, offset, length) slices of a fused vector.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FusionLayout {
    pub segments: Vec<Segment>,
}

impl FusionLayout {
    pub fn new<S: Into<String>>(parts: impl IntoIterator<Item = (S, usize)>) -> Self {
        let mut offset = 0;
        let segments = parts
            .into_iter()
            .map(|(name, length)| {
                let s = Segment {
                    backbone: name.into(),
                    offset,
                    length,
                };
                offset += length;
                s
            })
            .collect();
        Self { segments }
    }

    /// mnv2, mnv3_small, mnv3_large at their pooled tap-point widths.
    pub fn default_ensemble() -> Self {
        Self::of(&Architecture::ALL)
    }

    pub fn of(archs: &[Architecture]) -> Self {
        Self::new(archs.iter().map(|a| (a.name(), a.embedding_dim())))
    }

    pub fn dim(&self) -> usize {
        self.segments.iter().map(|s| s.length).sum()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Concatenates embeddings in layout order.
    pub fn fuse(&self, parts: &[&[f32]]) -> Result<FusedFeature, FusionError> {
        if parts.len() != self.segments.len() {
            return Err(FusionError::Arity {
                expected: self.segments.len(),
                found: parts.len(),
            });
        }
        let mut vector = Vec::with_capacity(self.dim());
        for (seg, part) in self.segments.iter().zip(parts) {
            if part.len() != seg.length {
                return Err(FusionError::Dimension {
                    backbone: seg.backbone.clone(),
                    expected: seg.length,
                    found: part.len(),
                });
            }
            vector.extend_from_slice(part);
        }
        Ok(FusedFeature {
            vector,
            layout: self.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedFeature {
    pub vector: Vec<f32>,
    pub layout: FusionLayout,
}

impl FusedFeature {
    pub fn slice(&self, i: usize) -> &[f32] {
        let s = &self.layout.segments[i];
        &self.vector[s.offset..s.offset + s.length]
    }

    /// Scales each slice to unit L2 norm (zero slices are left untouched).
    pub fn l2_normalized(mut self) -> Self {
        for s in &self.layout.segments {
            let v = &mut self.vector[s.offset..s.offset + s.length];
            let n = v.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt();
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x = (*x as f64 / n) as f32);
            }
        }
        self
    }
}

/// Concatenation of three embeddings with a layout inferred from their
/// lengths, named in the fixed ensemble order.
pub fn fuse(e1: &[f32], e2: &[f32], e3: &[f32]) -> FusedFeature {
    let names = Architecture::ALL.map(|a| a.name());
    let layout = FusionLayout::new(names.into_iter().zip([e1.len(), e2.len(), e3.len()]));
    layout.fuse(&[e1, e2, e3]).expect("layout built from the inputs")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceMode {
    /// One token per backbone: an affine projection of its slice.
    #[default]
    PerBackbone,
    /// Consecutive `d_tok`-wide chunks of the fused vector, zero-padded.
    Chunked,
}

impl SequenceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SequenceMode::PerBackbone => "per_backbone",
            SequenceMode::Chunked => "chunked",
        }
    }

    /// Number of tokens for a layout.
    pub fn tokens(self, layout: &FusionLayout, d_tok: usize) -> usize {
        match self {
            SequenceMode::PerBackbone => layout.len(),
            SequenceMode::Chunked => layout.dim().div_ceil(d_tok),
        }
    }
}

/// Per-token affine maps `slice_t · W_t + b_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenProjection {
    pub layout: FusionLayout,
    pub d_tok: usize,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl TokenProjection {
    /// Uniform(±1/sqrt(fan_in)) weights and zero biases.
    pub fn seeded(layout: &FusionLayout, d_tok: usize, seed: u64) -> Result<Self, FusionError> {
        if d_tok == 0 {
            return Err(FusionError::ZeroTokenWidth);
        }
        let mut rng = rng_for("token-projection", &[seed.into()]);
        let weights = layout
            .segments
            .iter()
            .map(|s| {
                let bound = 1.0 / (s.length.max(1) as f64).sqrt();
                Array2::from_shape_fn((s.length, d_tok), |_| rng.random_range(-bound..bound))
            })
            .collect();
        let biases = layout.segments.iter().map(|_| Array1::zeros(d_tok)).collect();
        Ok(Self {
            layout: layout.clone(),
            d_tok,
            weights,
            biases,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceView {
    /// T x d_tok.
    pub tokens: Array2<f64>,
    pub mode: SequenceMode,
    /// Fused length before padding (chunked mode).
    pub source_len: usize,
}

/// Default per-backbone projection is seeded with 0; heads learn their own.
pub fn to_sequence(f: &FusedFeature, mode: SequenceMode, d_tok: usize) -> Result<SequenceView, FusionError> {
    match mode {
        SequenceMode::PerBackbone => to_sequence_with(f, &TokenProjection::seeded(&f.layout, d_tok, 0)?),
        SequenceMode::Chunked => chunk(f, d_tok),
    }
}

pub fn to_sequence_with(f: &FusedFeature, proj: &TokenProjection) -> Result<SequenceView, FusionError> {
    if proj.layout != f.layout {
        return Err(FusionError::ProjectionLayout);
    }
    let mut tokens = Array2::zeros((f.layout.len(), proj.d_tok));
    for t in 0..f.layout.len() {
        let x = Array1::from_iter(f.slice(t).iter().map(|&v| v as f64));
        tokens.row_mut(t).assign(&(x.dot(&proj.weights[t]) + &proj.biases[t]));
    }
    Ok(SequenceView {
        tokens,
        mode: SequenceMode::PerBackbone,
        source_len: f.vector.len(),
    })
}

fn chunk(f: &FusedFeature, d_tok: usize) -> Result<SequenceView, FusionError> {
    if d_tok == 0 {
        return Err(FusionError::ZeroTokenWidth);
    }
    let n = f.vector.len();
    let t = n.div_ceil(d_tok).max(1);
    let mut flat = vec![0.0; t * d_tok];
    for (dst, &v) in flat.iter_mut().zip(&f.vector) {
        *dst = v as f64;
    }
    Ok(SequenceView {
        tokens: Array2::from_shape_vec((t, d_tok), flat).expect("sized above"),
        mode: SequenceMode::Chunked,
        source_len: n,
    })
}

/// Row-major flattening truncated to the unpadded prefix.
pub fn dechunk(view: &SequenceView) -> Vec<f64> {
    view.tokens.iter().take(view.source_len).copied().collect()
}
