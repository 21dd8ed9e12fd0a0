//! Oracles for the episode protocol and scoring, shared by the property
//! tests and the acceptance target.


use std::collections::{BTreeMap, BTreeSet};

use leaffew_core::corpus::{
    partition_support_query, sample_episode, Background, DatasetManifest, EpisodeItem, EpisodeSpec, ImageRecord,
    QueryCount, SetupId,
};
use leaffew_core::heads::Prediction;
use leaffew_core::metrics::{per_class_metrics, score_episode, support_weighted_recall, ConfusionMatrix};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One randomized sampling scenario.
#[derive(Clone, Debug)]
pub struct ProtocolCase {
    pub counts: Vec<usize>,
    pub ratio: f64,
    pub k_shot: usize,
    pub query: QueryCount,
    pub seed: u64,
    pub reps: usize,
}

impl ProtocolCase {
    /// Draws a feasible case from `rng`.
    pub fn random(rng: &mut impl Rng) -> Self {
        let n_classes = rng.random_range(2..=8);
        let counts: Vec<usize> = (0..n_classes).map(|_| rng.random_range(4..=120)).collect();
        let ratio = rng.random_range(0.5..0.9);
        let support_min = counts.iter().map(|&n| leaffew_core::corpus::support_size(n, ratio)).min().unwrap();
        let query_min = counts.iter().map(|&n| n - leaffew_core::corpus::support_size(n, ratio)).min().unwrap();
        let k_shot = rng.random_range(1..=support_min.min(20));
        let query = if rng.random_bool(0.5) {
            QueryCount::All
        } else {
            QueryCount::Count(rng.random_range(1..=query_min.min(50)))
        };
        Self {
            counts,
            ratio,
            k_shot,
            query,
            seed: rng.random(),
            reps: rng.random_range(1..=4),
        }
    }
}

pub fn manifest(counts: &[usize], shuffle_seed: Option<u64>) -> DatasetManifest {
    let mut records = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        for i in 0..n {
            records.push(ImageRecord {
                image_id: format!("c{c}-img{i:03}"),
                path: format!("c{c}/{i}.png").into(),
                class_label: format!("Crop{c}___disease"),
                crop: format!("Crop{c}"),
                background: Background::Lab,
            });
        }
    }
    if let Some(s) = shuffle_seed {
        records.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }
    DatasetManifest::from_records("props", "/nonexistent", records, None).unwrap()
}

/// Verifies the sampling invariants for one case; returns the first violation.
pub fn check_protocol(case: &ProtocolCase) -> Result<(), String> {
    let m = manifest(&case.counts, None);
    let classes: BTreeSet<String> = m.class_names().into_iter().collect();
    let parts = partition_support_query(&m, &classes, case.ratio, case.seed).map_err(|e| e.to_string())?;

    // Stability: record order and repeated calls do not move images between pools.
    let shuffled = manifest(&case.counts, Some(case.seed ^ 0x5eed));
    let again = partition_support_query(&shuffled, &classes, case.ratio, case.seed).map_err(|e| e.to_string())?;
    if again != parts {
        return Err("partition depends on record order".into());
    }
    for p in &parts {
        let s: BTreeSet<&String> = p.support_pool.iter().collect();
        let q: BTreeSet<&String> = p.query_pool.iter().collect();
        if !s.is_disjoint(&q) {
            return Err(format!("{}: pools overlap", p.class_label));
        }
        if s.len() + q.len() != m.class_count(&p.class_label).unwrap() {
            return Err(format!("{}: pools do not cover the class", p.class_label));
        }
    }

    let spec = EpisodeSpec {
        k_shot: case.k_shot,
        query_per_class: case.query,
        repetitions: case.reps,
        seed: case.seed,
        setup: SetupId::S1,
    };
    let pools: BTreeMap<&str, _> = parts.iter().map(|p| (p.class_label.as_str(), p)).collect();
    for rep in 0..case.reps {
        let ep = sample_episode(&parts, &spec, rep).map_err(|e| e.to_string())?;
        if sample_episode(&again, &spec, rep).map_err(|e| e.to_string())? != ep {
            return Err(format!("rep {rep}: not deterministic"));
        }
        let support: BTreeSet<&str> = ep.support.iter().map(|i| i.image_id.as_str()).collect();
        let query: BTreeSet<&str> = ep.query.iter().map(|i| i.image_id.as_str()).collect();
        if support.len() != ep.support.len() || query.len() != ep.query.len() {
            return Err(format!("rep {rep}: repeated image"));
        }
        if !support.is_disjoint(&query) {
            return Err(format!("rep {rep}: support and query overlap"));
        }
        for (label, p) in &pools {
            let s: Vec<&EpisodeItem> = ep.support.iter().filter(|i| i.class_label == *label).collect();
            let q: Vec<&EpisodeItem> = ep.query.iter().filter(|i| i.class_label == *label).collect();
            if s.len() != case.k_shot {
                return Err(format!("rep {rep} {label}: {} support items, want {}", s.len(), case.k_shot));
            }
            let want = match case.query {
                QueryCount::All => p.query_pool.len(),
                QueryCount::Count(n) => n,
            };
            if q.len() != want {
                return Err(format!("rep {rep} {label}: {} query items, want {want}", q.len()));
            }
            if !s.iter().all(|i| p.support_pool.contains(&i.image_id)) {
                return Err(format!("rep {rep} {label}: support item outside the support pool"));
            }
            if !q.iter().all(|i| p.query_pool.contains(&i.image_id)) {
                return Err(format!("rep {rep} {label}: query item outside the query pool"));
            }
        }
    }
    Ok(())
}

/// A random labelled query set with random predictions over `n` classes.
pub fn random_scoring_instance(rng: &mut impl Rng) -> (Vec<EpisodeItem>, Vec<Prediction>) {
    let n = rng.random_range(1..=8);
    let items = rng.random_range(n..=80);
    let labels: Vec<String> = (0..n).map(|c| format!("class{c}")).collect();
    let mut truth = Vec::with_capacity(items);
    let mut preds = Vec::with_capacity(items);
    for i in 0..items {
        // Every class appears at least once among the true labels.
        let t = if i < n { i } else { rng.random_range(0..n) };
        let p = if rng.random_bool(0.6) { t } else { rng.random_range(0..n) };
        truth.push(EpisodeItem {
            image_id: format!("q{i:03}"),
            class_label: labels[t].clone(),
        });
        preds.push(Prediction {
            image_id: format!("q{i:03}"),
            probs: vec![1.0 / n as f64; n],
            argmax_label: labels[p].clone(),
        });
    }
    preds.shuffle(rng);
    (truth, preds)
}

/// Compares scoring against item-by-item recounting, with exact equality.
pub fn check_scoring(truth: &[EpisodeItem], preds: &[Prediction]) -> Result<(), String> {
    let r = score_episode(0, preds, truth).map_err(|e| e.to_string())?;
    let predicted: BTreeMap<&str, &str> = preds.iter().map(|p| (p.image_id.as_str(), p.argmax_label.as_str())).collect();
    let labels: Vec<String> =
        truth.iter().map(|t| t.class_label.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if r.confusion.labels != labels {
        return Err("label order".into());
    }
    let hits = truth.iter().filter(|t| predicted[t.image_id.as_str()] == t.class_label).count();
    if r.accuracy != hits as f64 / truth.len() as f64 {
        return Err(format!("accuracy {} vs {}", r.accuracy, hits as f64 / truth.len() as f64));
    }
    for m in &r.per_class {
        let tp = truth.iter().filter(|t| t.class_label == m.label && predicted[t.image_id.as_str()] == m.label).count();
        let actual = truth.iter().filter(|t| t.class_label == m.label).count();
        let called = truth.iter().filter(|t| predicted[t.image_id.as_str()] == m.label).count();
        let precision = if called == 0 { 0.0 } else { tp as f64 / called as f64 };
        let recall = if actual == 0 { 0.0 } else { tp as f64 / actual as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        if m.precision != precision || m.recall != recall || m.f1 != f1 || m.support != actual as u64 {
            return Err(format!("{}: per-class metrics differ from recount", m.label));
        }
        if m.precision_undefined != (called == 0) {
            return Err(format!("{}: undefined-precision flag", m.label));
        }
    }
    if support_weighted_recall(&r.confusion) != r.accuracy {
        return Err("support-weighted recall differs from accuracy".into());
    }
    if per_class_metrics(&r.confusion) != r.per_class {
        return Err("per_class_metrics disagrees with score_episode".into());
    }
    let rebuilt = ConfusionMatrix::from_counts(r.confusion.labels.clone(), r.confusion.counts.clone());
    if rebuilt.trace() as usize != hits || rebuilt.total() as usize != truth.len() {
        return Err("confusion totals".into());
    }
    Ok(())
}
