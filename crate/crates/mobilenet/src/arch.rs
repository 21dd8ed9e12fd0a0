//! MobileNetV2, MobileNetV3-Small and MobileNetV3-Large at width 1.0.
//!
//! Layer configurations, initialization and tensor names follow the
//! torchvision reference definitions so that exported `state_dict`s load
//! directly (see [`crate::weights`]).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{ConvBnAct, InvertedResidual, NamingStyle, NormConfig, SqueezeExcite};
use crate::layers::{
    global_avg_pool, global_avg_pool_backward, join, Activation, ActivationKind, BatchNorm2d, Cost, Dropout,
    Layer, Linear, Param, Visitor,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mnv2,
    Mnv3Small,
    Mnv3Large,
}

impl Architecture {
    /// Canonical ensemble order.
    pub const ALL: [Architecture; 3] = [Self::Mnv2, Self::Mnv3Small, Self::Mnv3Large];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mnv2 => "mnv2",
            Self::Mnv3Small => "mnv3_small",
            Self::Mnv3Large => "mnv3_large",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    /// Width of the globally pooled penultimate feature.
    pub fn embedding_dim(self) -> usize {
        match self {
            Self::Mnv2 => 1280,
            Self::Mnv3Small => 576,
            Self::Mnv3Large => 960,
        }
    }

    fn norm(self) -> NormConfig {
        match self {
            Self::Mnv2 => NormConfig { eps: 1e-5, momentum: 0.1 },
            _ => NormConfig { eps: 1e-3, momentum: 0.01 },
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub(crate) fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut new_v = (((v + d / 2.0) / d).floor() * d).max(d);
    if new_v < 0.9 * v {
        new_v += d;
    }
    new_v as usize
}

/// One MobileNetV3 bottleneck row: (in, kernel, expanded, out, se, hardswish, stride).
type V3Row = (usize, usize, usize, usize, bool, bool, usize);

const V3_LARGE: [V3Row; 15] = [
    (16, 3, 16, 16, false, false, 1),
    (16, 3, 64, 24, false, false, 2),
    (24, 3, 72, 24, false, false, 1),
    (24, 5, 72, 40, true, false, 2),
    (40, 5, 120, 40, true, false, 1),
    (40, 5, 120, 40, true, false, 1),
    (40, 3, 240, 80, false, true, 2),
    (80, 3, 200, 80, false, true, 1),
    (80, 3, 184, 80, false, true, 1),
    (80, 3, 184, 80, false, true, 1),
    (80, 3, 480, 112, true, true, 1),
    (112, 3, 672, 112, true, true, 1),
    (112, 5, 672, 160, true, true, 2),
    (160, 5, 960, 160, true, true, 1),
    (160, 5, 960, 160, true, true, 1),
];

const V3_SMALL: [V3Row; 11] = [
    (16, 3, 16, 16, true, false, 2),
    (16, 3, 72, 24, false, false, 2),
    (24, 3, 88, 24, false, false, 1),
    (24, 5, 96, 40, true, true, 2),
    (40, 5, 240, 40, true, true, 1),
    (40, 5, 240, 40, true, true, 1),
    (40, 5, 120, 48, true, true, 1),
    (48, 5, 144, 48, true, true, 1),
    (48, 5, 288, 96, true, true, 2),
    (96, 5, 576, 96, true, true, 1),
    (96, 5, 576, 96, true, true, 1),
];

/// (expansion t, channels c, repeats n, first stride s).
const V2_SETTINGS: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

// One instance per network; boxing buys nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
pub enum Classifier {
    /// dropout → linear
    V2 { dropout: Dropout, fc: Linear },
    /// linear → hardswish → dropout → linear
    V3 {
        fc1: Linear,
        act: Activation,
        dropout: Dropout,
        fc2: Linear,
    },
}

impl Classifier {
    fn new(arch: Architecture, num_classes: usize, rng: &mut ChaCha8Rng, dropout_rng: ChaCha8Rng) -> Self {
        let emb = arch.embedding_dim();
        match arch {
            Architecture::Mnv2 => Self::V2 {
                dropout: Dropout::new(0.2, dropout_rng),
                fc: Linear::classifier(emb, num_classes, rng),
            },
            Architecture::Mnv3Small | Architecture::Mnv3Large => {
                let hidden = if arch == Architecture::Mnv3Small { 1024 } else { 1280 };
                Self::V3 {
                    fc1: Linear::classifier(emb, hidden, rng),
                    act: Activation::new(ActivationKind::Hardswish),
                    dropout: Dropout::new(0.2, dropout_rng),
                    fc2: Linear::classifier(hidden, num_classes, rng),
                }
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Self::V2 { fc, .. } => fc.out_features,
            Self::V3 { fc2, .. } => fc2.out_features,
        }
    }
}

impl Layer for Classifier {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        match self {
            Self::V2 { dropout, fc } => fc.forward(&dropout.forward(x, train), train),
            Self::V3 { fc1, act, dropout, fc2 } => {
                let h = act.forward(&fc1.forward(x, train), train);
                fc2.forward(&dropout.forward(&h, train), train)
            }
        }
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        match self {
            Self::V2 { dropout, fc } => dropout.backward(&fc.backward(grad)),
            Self::V3 { fc1, act, dropout, fc2 } => {
                let g = dropout.backward(&fc2.backward(grad));
                fc1.backward(&act.backward(&g))
            }
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        match self {
            Self::V2 { fc, .. } => fc.visit(&join(prefix, "1"), f),
            Self::V3 { fc1, fc2, .. } => {
                fc1.visit(&join(prefix, "0"), f);
                fc2.visit(&join(prefix, "3"), f);
            }
        }
    }

    fn profile(&self, shape: [usize; 4]) -> ([usize; 4], Cost) {
        match self {
            Self::V2 { fc, .. } => fc.profile(shape),
            Self::V3 { fc1, fc2, .. } => {
                let (s, mut c) = fc1.profile(shape);
                let (s, c2) = fc2.profile(s);
                c += c2;
                (s, c)
            }
        }
    }
}

/// Parameter count and multiply-accumulate cost of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub params: u64,
    pub macs: u64,
    pub resolution: usize,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub arch: Architecture,
    pub stem: ConvBnAct,
    pub blocks: Vec<InvertedResidual>,
    pub last: ConvBnAct,
    /// `None` once the classification head has been stripped.
    pub classifier: Option<Classifier>,
    head_rng: ChaCha8Rng,
    feature_shape: Option<[usize; 4]>,
}

impl Backbone {
    /// A freshly initialized network with a `num_classes`-way head.
    pub fn new(arch: Architecture, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_D80F);
        let norm = arch.norm();
        let (stem, blocks, last) = match arch {
            Architecture::Mnv2 => build_v2(norm, &mut rng),
            Architecture::Mnv3Small => build_v3(&V3_SMALL, norm, &mut rng),
            Architecture::Mnv3Large => build_v3(&V3_LARGE, norm, &mut rng),
        };
        let dropout_rng = ChaCha8Rng::seed_from_u64(rand::Rng::random(&mut head_rng));
        let classifier = Classifier::new(arch, num_classes, &mut rng, dropout_rng);
        Self {
            arch,
            stem,
            blocks,
            last,
            classifier: Some(classifier),
            head_rng,
            feature_shape: None,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.last.conv.out_ch
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.classifier.as_ref().map(Classifier::num_classes)
    }

    /// Replaces the head with a freshly initialized `num_classes`-way one.
    pub fn replace_head(&mut self, num_classes: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(rand::Rng::random(&mut self.head_rng));
        let dropout_rng = ChaCha8Rng::seed_from_u64(rand::Rng::random(&mut self.head_rng));
        self.classifier = Some(Classifier::new(self.arch, num_classes, &mut rng, dropout_rng));
    }

    pub fn strip_head(&mut self) -> Option<Classifier> {
        self.classifier.take()
    }

    /// Pooled penultimate features, `[n, embedding_dim, 1, 1]`.
    pub fn forward_features(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut y = self.stem.forward(x, train);
        for b in &mut self.blocks {
            y = b.forward(&y, train);
        }
        y = self.last.forward(&y, train);
        if train {
            self.feature_shape = Some(y.shape);
        }
        global_avg_pool(&y)
    }

    pub fn forward_logits(&mut self, pooled: &Tensor, train: bool) -> Tensor {
        self.classifier
            .as_mut()
            .expect("classification head has been stripped")
            .forward(pooled, train)
    }

    /// Inference-mode embedding.
    pub fn embed(&mut self, x: &Tensor) -> Tensor {
        self.forward_features(x, false)
    }

    /// Back-propagates a logits gradient through the whole network.
    pub fn backward(&mut self, dlogits: &Tensor) {
        let dpooled = self
            .classifier
            .as_mut()
            .expect("classification head has been stripped")
            .backward(dlogits);
        let shape = self.feature_shape.take().expect("backward without training forward");
        let mut g = global_avg_pool_backward(&dpooled, shape);
        g = self.last.backward(&g);
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        self.stem.backward(&g);
    }

    /// Visits the feature extractor's tensors (everything except the head).
    pub fn visit_features(&mut self, f: &mut Visitor<'_>) {
        self.stem.visit("features.0", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("features.{}", i + 1), f);
        }
        let last = format!("features.{}", self.blocks.len() + 1);
        self.last.visit(&last, f);
    }

    /// Visits every tensor under its torchvision `state_dict` name.
    pub fn visit(&mut self, f: &mut Visitor<'_>) {
        self.visit_features(f);
        if let Some(c) = &mut self.classifier {
            c.visit("classifier", f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit(&mut |_, p: &mut Param| p.zero_grad());
    }

    fn for_each_norm(&mut self, f: &mut dyn FnMut(&mut BatchNorm2d)) {
        f(&mut self.stem.bn);
        for b in &mut self.blocks {
            if let Some(e) = &mut b.expand {
                f(&mut e.bn);
            }
            f(&mut b.depthwise.bn);
            f(&mut b.project.bn);
        }
        f(&mut self.last.bn);
    }

    /// Replaces batch-norm running statistics with the cumulative average of
    /// the training-mode batch statistics over `batches`. Weights are untouched.
    pub fn calibrate_batch_norm(&mut self, batches: &[Tensor]) {
        let mut saved = Vec::new();
        self.for_each_norm(&mut |bn| saved.push(bn.momentum));
        for (i, x) in batches.iter().enumerate() {
            let m = 1.0 / (i + 1) as f32;
            self.for_each_norm(&mut |bn| {
                bn.momentum = m;
                bn.unbiased = false;
            });
            self.forward_features(x, true);
        }
        let mut it = saved.into_iter();
        self.for_each_norm(&mut |bn| {
            bn.momentum = it.next().expect("same layer count");
            bn.unbiased = true;
        });
        self.feature_shape = None;
    }

    /// Static parameter count and MACs at `resolution`×`resolution` input.
    pub fn profile(&self, resolution: usize) -> Profile {
        let mut shape = [1, 3, resolution, resolution];
        let mut cost = Cost::default();
        let (s, c) = self.stem.profile(shape);
        shape = s;
        cost += c;
        for b in &self.blocks {
            let (s, c) = b.profile(shape);
            shape = s;
            cost += c;
        }
        let (s, c) = self.last.profile(shape);
        cost += c;
        if let Some(cls) = &self.classifier {
            cost += cls.profile([1, s[1], 1, 1]).1;
        }
        Profile {
            params: cost.params,
            macs: cost.macs,
            resolution,
        }
    }
}

type Built = (ConvBnAct, Vec<InvertedResidual>, ConvBnAct);

fn build_v2(norm: NormConfig, rng: &mut ChaCha8Rng) -> Built {
    let relu6 = Some(ActivationKind::Relu6);
    let stem = ConvBnAct::new(3, 32, 3, 2, 1, relu6, norm, rng);
    let mut blocks = Vec::new();
    let mut input = 32;
    for (t, c, n, s) in V2_SETTINGS {
        for i in 0..n {
            let stride = if i == 0 { s } else { 1 };
            let hidden = input * t;
            let expand = (t != 1).then(|| ConvBnAct::new(input, hidden, 1, 1, 1, relu6, norm, rng));
            let depthwise = ConvBnAct::new(hidden, hidden, 3, stride, hidden, relu6, norm, rng);
            let project = ConvBnAct::new(hidden, c, 1, 1, 1, None, norm, rng);
            blocks.push(InvertedResidual {
                expand,
                depthwise,
                se: None,
                project,
                residual: stride == 1 && input == c,
                naming: NamingStyle::V2,
            });
            input = c;
        }
    }
    let last = ConvBnAct::new(input, 1280, 1, 1, 1, relu6, norm, rng);
    (stem, blocks, last)
}

fn build_v3(rows: &[V3Row], norm: NormConfig, rng: &mut ChaCha8Rng) -> Built {
    let stem = ConvBnAct::new(3, 16, 3, 2, 1, Some(ActivationKind::Hardswish), norm, rng);
    let mut blocks = Vec::new();
    for &(input, k, exp, out, use_se, hs, stride) in rows {
        let act = Some(if hs { ActivationKind::Hardswish } else { ActivationKind::Relu });
        let expand = (exp != input).then(|| ConvBnAct::new(input, exp, 1, 1, 1, act, norm, rng));
        let depthwise = ConvBnAct::new(exp, exp, k, stride, exp, act, norm, rng);
        let se = use_se.then(|| SqueezeExcite::new(exp, make_divisible(exp as f64 / 4.0, 8), rng));
        let project = ConvBnAct::new(exp, out, 1, 1, 1, None, norm, rng);
        blocks.push(InvertedResidual {
            expand,
            depthwise,
            se,
            project,
            residual: stride == 1 && input == out,
            naming: NamingStyle::V3,
        });
    }
    let last_in = rows.last().map(|r| r.3).expect("non-empty configuration");
    let last = ConvBnAct::new(last_in, 6 * last_in, 1, 1, 1, Some(ActivationKind::Hardswish), norm, rng);
    (stem, blocks, last)
}

/// Mean softmax cross-entropy; returns (loss, dlogits, correct predictions).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f32, Tensor, usize) {
    let n = logits.batch();
    let k = logits.item_len();
    assert_eq!(labels.len(), n);
    let mut grad = Tensor::zeros(logits.shape);
    let mut loss = 0.0f64;
    let mut correct = 0;
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.item(b);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|v| ((v - max) as f64).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss -= (exps[label] / sum).ln();
        let argmax = row
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
        if argmax == label {
            correct += 1;
        }
        let g = grad.item_mut(b);
        for i in 0..k {
            g[i] = ((exps[i] / sum) as f32 - if i == label { 1.0 } else { 0.0 }) / n as f32;
        }
    }
    ((loss / n as f64) as f32, grad, correct)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn make_divisible_matches_reference_rounding() {
        assert_eq!(make_divisible(16.0 / 4.0, 8), 8);
        assert_eq!(make_divisible(72.0 / 4.0, 8), 24);
        assert_eq!(make_divisible(96.0 / 4.0, 8), 24);
        assert_eq!(make_divisible(240.0 / 4.0, 8), 64);
        assert_eq!(make_divisible(120.0 / 4.0, 8), 32);
        assert_eq!(make_divisible(672.0 / 4.0, 8), 168);
    }

    // Published parameter counts of the 1000-class reference models.
    #[test]
    fn parameter_counts_match_reference_models() {
        for (arch, want) in [
            (Architecture::Mnv2, 3_504_872u64),
            (Architecture::Mnv3Small, 2_542_856),
            (Architecture::Mnv3Large, 5_483_032),
        ] {
            let net = Backbone::new(arch, 1000, 0);
            assert_eq!(net.profile(224).params, want, "{arch}");
            let mut counted = 0u64;
            let mut net = net;
            net.visit(&mut |_, p| {
                if p.trainable {
                    counted += p.len() as u64;
                }
            });
            assert_eq!(counted, want, "{arch} visitor");
        }
    }

    #[test]
    fn pooled_width_matches_embedding_dim() {
        for arch in Architecture::ALL {
            let mut net = Backbone::new(arch, 10, 1);
            let x = Tensor::zeros([1, 3, 32, 32]);
            let y = net.embed(&x);
            assert_eq!(y.shape, [1, arch.embedding_dim(), 1, 1]);
            assert_eq!(net.embedding_dim(), arch.embedding_dim());
        }
    }

    #[test]
    fn calibrated_statistics_match_the_batch() {
        let x = Tensor::from_vec([4, 3, 32, 32], (0..4 * 3 * 1024).map(|i| ((i * 7919) % 101) as f32 / 50.0 - 1.0).collect());
        for arch in Architecture::ALL {
            let mut net = Backbone::new(arch, 10, 3);
            net.calibrate_batch_norm(std::slice::from_ref(&x));
            let eval = net.embed(&x);
            let train = net.clone().forward_features(&x, true);
            let diff: f32 = eval.data.iter().zip(&train.data).map(|(a, b)| (a - b).powi(2)).sum::<f32>().sqrt();
            let norm: f32 = train.data.iter().map(|a| a * a).sum::<f32>().sqrt();
            assert!(diff <= 0.05 * norm, "{arch}: {diff} vs {norm}");
        }
    }

    #[test]
    fn tensor_names_follow_reference_layout() {
        let mut names = Vec::new();
        Backbone::new(Architecture::Mnv2, 1000, 0).visit(&mut |n, _| names.push(n.to_string()));
        for want in [
            "features.0.0.weight",
            "features.0.1.running_var",
            "features.1.conv.0.0.weight",
            "features.1.conv.1.weight",
            "features.1.conv.2.bias",
            "features.2.conv.3.running_mean",
            "features.18.0.weight",
            "classifier.1.weight",
        ] {
            assert!(names.iter().any(|n| n == want), "missing {want}");
        }
        let mut names = Vec::new();
        Backbone::new(Architecture::Mnv3Small, 1000, 0).visit(&mut |n, _| names.push(n.to_string()));
        for want in [
            "features.1.block.0.0.weight",
            "features.1.block.1.fc1.weight",
            "features.1.block.2.1.bias",
            "features.4.block.2.fc2.bias",
            "features.12.0.weight",
            "classifier.0.weight",
            "classifier.3.bias",
        ] {
            assert!(names.iter().any(|n| n == want), "missing {want}");
        }
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]);
        let (loss, g, _) = softmax_cross_entropy(&logits, &[1]);
        assert!((loss - 3f32.ln()).abs() < 1e-6);
        assert!((g.data[1] + 2.0 / 3.0).abs() < 1e-6);
        assert!((g.data[0] - 1.0 / 3.0).abs() < 1e-6);
    }
}
