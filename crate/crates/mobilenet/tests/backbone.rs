//! Public-API behaviour of the three backbones.

use leaffew_mobilenet::weights::{self, HeadPolicy};
use leaffew_mobilenet::{softmax_cross_entropy, Architecture, Backbone, Optimizer, OptimizerKind, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(shape: [usize; 4], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
}

fn calibrated(arch: Architecture, classes: usize, seed: u64) -> Backbone {
    let mut net = Backbone::new(arch, classes, seed);
    net.calibrate_batch_norm(&[noise([4, 3, 32, 32], 99)]);
    net
}

#[test]
fn embeddings_are_deterministic_in_the_seed() {
    let x = noise([2, 3, 32, 32], 1);
    for arch in Architecture::ALL {
        let a = calibrated(arch, 3, 7).embed(&x);
        let b = calibrated(arch, 3, 7).embed(&x);
        let c = calibrated(arch, 3, 8).embed(&x);
        assert_eq!(a.shape, [2, arch.embedding_dim(), 1, 1]);
        assert_eq!(a.data, b.data, "{arch}");
        assert_ne!(a.data, c.data, "{arch}");
    }
}

#[test]
fn inference_does_not_depend_on_batch_company() {
    let x = noise([3, 3, 32, 32], 2);
    for arch in Architecture::ALL {
        let mut net = calibrated(arch, 3, 0);
        let batch = net.embed(&x);
        let single = net.embed(&Tensor::from_vec([1, 3, 32, 32], x.item(1).to_vec()));
        for (p, q) in batch.item(1).iter().zip(&single.data) {
            assert!((p - q).abs() <= 1e-4 * (1.0 + p.abs()), "{arch}: {p} vs {q}");
        }
    }
}

#[test]
fn weight_file_round_trip_preserves_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let x = noise([2, 3, 32, 32], 3);
    for arch in Architecture::ALL {
        let mut net = calibrated(arch, 5, 11);
        let path = dir.path().join(format!("{}.safetensors", arch.name()));
        weights::save(&mut net, &path, &Default::default()).unwrap();
        let mut other = Backbone::new(arch, 5, 12);
        weights::load(&mut other, &path, HeadPolicy::Require).unwrap();
        assert_eq!(net.embed(&x).data, other.embed(&x).data, "{arch}");

        // A feature-only load ignores a classifier of another width.
        let mut stripped = Backbone::new(arch, 2, 13);
        weights::load(&mut stripped, &path, HeadPolicy::Ignore).unwrap();
        assert_eq!(net.embed(&x).data, stripped.embed(&x).data, "{arch}");
    }
}

#[test]
fn a_few_steps_fit_a_tiny_batch() {
    let x = noise([4, 3, 32, 32], 4);
    let labels = [0, 1, 0, 1];
    for arch in Architecture::ALL {
        let mut net = calibrated(arch, 2, 5);
        let mut opt = Optimizer::new(OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 });
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..15 {
            net.zero_grad();
            let pooled = net.forward_features(&x, true);
            let logits = net.forward_logits(&pooled, true);
            let (loss, dlogits, _) = softmax_cross_entropy(&logits, &labels);
            net.backward(&dlogits);
            opt.step(&mut net, 1e-3);
            first.get_or_insert(loss);
            last = loss;
        }
        let first = first.unwrap();
        assert!(last.is_finite() && last < 0.5 * first, "{arch}: {first} -> {last}");
    }
}

#[test]
fn stripping_the_head_removes_its_parameters() {
    for arch in Architecture::ALL {
        let mut net = Backbone::new(arch, 1000, 0);
        let full = net.profile(224);
        net.strip_head();
        let bare = net.profile(224);
        assert!(bare.params < full.params && bare.macs < full.macs, "{arch}");
        assert_eq!(net.num_classes(), None);
        net.replace_head(4);
        assert_eq!(net.num_classes(), Some(4));
    }
}

#[test]
fn multiply_accumulates_at_224_match_reference_models() {
    // Reference MAC counts of the torchvision models, within 3 %.
    for (arch, reference) in [
        (Architecture::Mnv2, 300.8e6),
        (Architecture::Mnv3Small, 56.5e6),
        (Architecture::Mnv3Large, 216.6e6),
    ] {
        let macs = Backbone::new(arch, 1000, 0).profile(224).macs as f64;
        assert!((macs / reference - 1.0).abs() < 0.03, "{arch}: {macs}");
    }
}
