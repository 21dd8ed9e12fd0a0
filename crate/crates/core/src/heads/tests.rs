use super::*;
use crate::fusion::fuse;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn tiny_layout(mode: SequenceMode) -> InputLayout {
    InputLayout::new(FusionLayout::new([("a", 5), ("b", 3), ("c", 6)]), mode, 4)
}

fn tiny_config(kind: HeadKind, seed: u64) -> HeadConfig {
    HeadConfig {
        kind,
        hidden_dim: 4,
        attn_heads: 2,
        seed,
        ..HeadConfig::default()
    }
}

fn normal_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_for("test-matrix", &[seed.into()]);
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
}

/// Normwise relative error between the analytic gradient and central differences.
fn grad_error(kind: HeadKind, mode: SequenceMode, seed: u64) -> f64 {
    let layout = tiny_layout(mode);
    let mut net = HeadNet::new(&tiny_config(kind, seed), 3, &layout);
    let x = normal_matrix(4, layout.fusion.dim(), seed);
    let labels = [0, 2, 1, 2];
    let dropout = Some(seed);
    let (_, g) = net.loss_and_grad(&x, &labels, dropout);
    let theta = net.params();
    let h = 1e-5;
    let mut num = vec![0.0; theta.len()];
    let mut p = theta.clone();
    for i in 0..theta.len() {
        p[i] = theta[i] + h;
        net.set_params(&p);
        let up = net.loss_at(&x, &labels, dropout);
        p[i] = theta[i] - h;
        net.set_params(&p);
        let down = net.loss_at(&x, &labels, dropout);
        p[i] = theta[i];
        num[i] = (up - down) / (2.0 * h);
    }
    let diff: f64 = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt() + num.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

#[test]
fn gradients_match_finite_differences() {
    for kind in HeadKind::ALL {
        for mode in [SequenceMode::PerBackbone, SequenceMode::Chunked] {
            for seed in 0..5 {
                let e = grad_error(kind, mode, seed);
                assert!(e <= 1e-4, "{kind} {mode:?} seed {seed}: relative error {e:e}");
            }
        }
    }
}

#[test]
fn kind_names_round_trip() {
    for k in HeadKind::ALL {
        assert_eq!(k.as_str().parse::<HeadKind>().unwrap(), k);
        assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.as_str()));
    }
    assert_eq!("Bi-LSTM".parse::<HeadKind>().unwrap(), HeadKind::Bilstm);
    assert!("gru".parse::<HeadKind>().is_err());
}

#[test]
fn config_validation() {
    assert!(HeadConfig::default().validate().is_ok());
    let bad = [
        HeadConfig { epochs: 0, ..HeadConfig::default() },
        HeadConfig { dropout: 1.0, ..HeadConfig::default() },
        HeadConfig {
            kind: HeadKind::BilstmMha,
            attn_heads: 3,
            ..HeadConfig::default()
        },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(HeadError::Config(_))), "{c:?}");
    }
}

fn feature(layout: &FusionLayout, v: Vec<f32>) -> FusedFeature {
    layout.fuse(&layout.segments.iter().map(|s| &v[s.offset..s.offset + s.length]).collect::<Vec<_>>()).unwrap()
}

fn blobs(layout: &FusionLayout, n_per: usize, seed: u64) -> Vec<(FusedFeature, String)> {
    let d = layout.dim();
    let mut rng = rng_for("blobs", &[seed.into()]);
    let mut out = Vec::new();
    for c in 0..3 {
        for _ in 0..n_per {
            let v: Vec<f32> = (0..d)
                .map(|j| {
                    let mean = if j % 3 == c { 1.0 } else { 0.0 };
                    mean + 0.05 * rng.random::<f32>()
                })
                .collect();
            out.push((feature(layout, v), format!("class{c}")));
        }
    }
    out
}

#[test]
fn every_kind_fits_separable_support() {
    let layout = tiny_layout(SequenceMode::PerBackbone);
    let classes: Vec<String> = (0..3).map(|c| format!("class{c}")).collect();
    let support = blobs(&layout.fusion, 2, 1);
    let query: Vec<(String, FusedFeature)> =
        blobs(&layout.fusion, 5, 2).into_iter().enumerate().map(|(i, (f, _))| (format!("q{i}"), f)).collect();
    for kind in HeadKind::ALL {
        let cfg = HeadConfig {
            kind,
            hidden_dim: 16,
            attn_heads: 4,
            epochs: 200,
            learning_rate: 1e-2,
            patience: 0,
            ..HeadConfig::default()
        };
        let head = build_head(&cfg, 3, &layout).unwrap();
        let head = train_episode(head, &support, &classes).unwrap();
        let preds = predict(&head, &query).unwrap();
        let hits = preds.iter().enumerate().filter(|(i, p)| p.argmax_label == format!("class{}", i / 5)).count();
        assert_eq!(hits, 15, "{kind}");
        for p in &preds {
            assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let layout = tiny_layout(SequenceMode::PerBackbone);
    let classes: Vec<String> = (0..3).map(|c| format!("class{c}")).collect();
    let support = blobs(&layout.fusion, 3, 4);
    let cfg = HeadConfig {
        epochs: 5,
        ..tiny_config(HeadKind::BilstmMha, 9)
    };
    let a = train_episode(build_head(&cfg, 3, &layout).unwrap(), &support, &classes).unwrap();
    let b = train_episode(build_head(&cfg, 3, &layout).unwrap(), &support, &classes).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.train_log.losses.len(), 5);
}

#[test]
fn protocol_errors() {
    let layout = tiny_layout(SequenceMode::PerBackbone);
    let cfg = tiny_config(HeadKind::Dense, 0);
    let classes: Vec<String> = (0..3).map(|c| format!("class{c}")).collect();
    let support = blobs(&layout.fusion, 1, 0);
    let missing: Vec<_> = support.iter().filter(|(_, l)| l != "class1").cloned().collect();
    let e = train_episode(build_head(&cfg, 3, &layout).unwrap(), &missing, &classes).unwrap_err();
    assert!(e.to_string().contains("class1"), "{e}");
    let untrained = build_head(&cfg, 3, &layout).unwrap();
    assert!(predict(&untrained, &[("q".into(), support[0].0.clone())]).is_err());
    let trained = train_episode(untrained, &support, &classes).unwrap();
    let wrong = fuse(&[0.0; 5], &[0.0; 3], &[0.0; 5]);
    assert!(matches!(predict(&trained, &[("q".into(), wrong)]), Err(HeadError::Layout(_))));
    assert!(matches!(attention_weights(&trained, &support[0].0), Err(HeadError::Unsupported(_))));
}

#[test]
fn attention_weights_are_a_distribution() {
    let layout = tiny_layout(SequenceMode::PerBackbone);
    let classes: Vec<String> = (0..3).map(|c| format!("class{c}")).collect();
    let support = blobs(&layout.fusion, 2, 3);
    for kind in [HeadKind::SelfAttn, HeadKind::BilstmSelfAttn, HeadKind::BilstmMha] {
        let head = train_episode(build_head(&tiny_config(kind, 2), 3, &layout).unwrap(), &support, &classes).unwrap();
        let w = attention_weights(&head, &support[0].0).unwrap();
        assert_eq!(w.len(), 3);
        assert!(w.iter().all(|&v| v >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{w:?}");
    }
}

#[test]
fn identical_tokens_get_uniform_attention() {
    let layout = tiny_layout(SequenceMode::PerBackbone);
    let head = build_head(&tiny_config(HeadKind::SelfAttn, 5), 3, &layout).unwrap();
    let row = normal_matrix(1, 4, 7);
    let tokens = ndarray::concatenate![ndarray::Axis(0), row, row, row];
    let w = attention_weights_for_tokens(&head, &tokens).unwrap();
    for v in w {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip() {
    let layout = tiny_layout(SequenceMode::Chunked);
    let classes: Vec<String> = (0..3).map(|c| format!("class{c}")).collect();
    let support = blobs(&layout.fusion, 1, 5);
    let head = train_episode(build_head(&tiny_config(HeadKind::Lstm, 1), 3, &layout).unwrap(), &support, &classes).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("head.json");
    head.save_checkpoint(&path).unwrap();
    let back = TrainedHead::load_checkpoint(&path).unwrap();
    let q = vec![("q".to_string(), support[0].0.clone())];
    assert_eq!(predict(&head, &q).unwrap(), predict(&back, &q).unwrap());
}

#[test]
fn argmax_prefers_lowest_index_on_ties() {
    assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    assert_eq!(argmax(&[1.0, 1.0]), 0);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let m = Array2::from_shape_vec((1, v.len()), v.clone()).unwrap();
            let p = softmax_rows(&m);
            prop_assert!((p.sum() - 1.0).abs() < 1e-9);
            prop_assert_eq!(argmax(p.row(0).as_slice().unwrap()), argmax(&v));
        }

        #[test]
        fn predictions_invariant_to_positive_logit_scaling(v in proptest::collection::vec(-5.0f64..5.0, 2..8), c in 0.1f64..10.0) {
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert_eq!(argmax(&v), argmax(&scaled));
        }
    }
}
