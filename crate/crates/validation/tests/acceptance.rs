//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs sequentially (no libtest harness) so timings are not distorted by
//! concurrent tests. Pass criterion ids (`c1` .. `c9`) to run a subset.

use leaffew_validation as common;

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use leaffew_core::corpus::QueryCount;
use leaffew_core::footprint::{footprint_report, measured_ensemble};
use leaffew_core::fusion::{dechunk, to_sequence, FusedFeature, FusionLayout, SequenceMode};
use leaffew_core::heads::{build_head, predict, train_episode, HeadConfig, HeadKind, HeadNet, InputLayout};
use leaffew_core::metrics::{per_class_metrics, summarize, support_weighted_recall, CiMethod};
use leaffew_core::pipeline::{self, PipelineError, RunConfig, RunOptions, RunReport};
use leaffew_core::reference::{self, CITED_BACKBONES, CITED_ENSEMBLE_SIZE_MB, CITED_PIPELINE_GFLOPS};
use leaffew_core::corpus::SetupId;
use leaffew_core::synthetic::{self, SynthSpec};
use leaffew_mobilenet::{Architecture, Backbone, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- c1

fn c1_episode_protocol() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut violations = Vec::new();
    let cases = 1000;
    for i in 0..cases {
        let case = common::ProtocolCase::random(&mut rng);
        if let Err(e) = common::check_protocol(&case) {
            violations.push(format!("case {i}: {e}"));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        violations.is_empty() && secs < 60.0,
        format!(
            "{cases} randomized manifests, {} violations{}, {secs:.1} s (limit 60 s)",
            violations.len(),
            violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- c2

fn c2_metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    let mut first = None;
    let instances = 1000;
    for i in 0..instances {
        let (truth, preds) = common::random_scoring_instance(&mut rng);
        if let Err(e) = common::check_scoring(&truth, &preds) {
            mismatches += 1;
            first.get_or_insert(format!("instance {i}: {e}"));
        }
    }
    let s = summarize(&[0.8, 0.9, 1.0], CiMethod::Normal).unwrap();
    let ci_oracle = 1.96 * 10.0 / 3f64.sqrt();
    let mean_ok = (s.mean_accuracy - 90.0).abs() <= 1e-9;
    let ci_ok = (s.ci95 - ci_oracle).abs() <= 1e-9 && (s.ci95 - 11.32).abs() < 0.005;

    // Support-weighted recall against accuracy on the same instances.
    let mut weighted_ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..instances {
        let (truth, preds) = common::random_scoring_instance(&mut rng);
        let r = leaffew_core::metrics::score_episode(0, &preds, &truth).unwrap();
        weighted_ok &= support_weighted_recall(&r.confusion) == r.accuracy;
        weighted_ok &= per_class_metrics(&r.confusion) == r.per_class;
    }
    outcome(
        mismatches == 0 && mean_ok && ci_ok && weighted_ok,
        format!(
            "{instances} instances, {mismatches} mismatches{}; mean {:.2}% ci95 {:.4} pp (oracle {ci_oracle:.4}); weighted recall == accuracy: {weighted_ok}",
            first.map(|f| format!(" ({f})")).unwrap_or_default(),
            s.mean_accuracy,
            s.ci95
        ),
    )
}

// ---------------------------------------------------------------- c3

fn c3_fusion() -> Outcome {
    let mut widths = Vec::new();
    for arch in Architecture::ALL {
        let mut net = Backbone::new(arch, 10, 0);
        net.calibrate_batch_norm(&[Tensor::from_vec([2, 3, 32, 32], vec![0.5; 2 * 3 * 32 * 32])]);
        let e = net.embed(&Tensor::zeros([1, 3, 32, 32]));
        widths.push((arch.name(), e.item_len()));
    }
    let layout = FusionLayout::default_ensemble();
    let instantiated = FusionLayout::new(widths.iter().copied());
    let dim_ok = layout == instantiated && layout.dim() == 2816;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut round_trip_ok = true;
    let mut dechunk_ok = true;
    for _ in 0..200 {
        let parts: Vec<Vec<f32>> =
            layout.segments.iter().map(|s| (0..s.length).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let refs: Vec<&[f32]> = parts.iter().map(Vec::as_slice).collect();
        let f = layout.fuse(&refs).unwrap();
        round_trip_ok &= (0..layout.len()).all(|i| f.slice(i) == parts[i].as_slice());
        let three = leaffew_core::fusion::fuse(&parts[0], &parts[1], &parts[2]);
        round_trip_ok &= three == f;
        let d_tok = rng.random_range(1..=300);
        let view = to_sequence(&f, SequenceMode::Chunked, d_tok).unwrap();
        dechunk_ok &= dechunk(&view) == f.vector.iter().map(|&v| v as f64).collect::<Vec<_>>();
    }
    outcome(
        dim_ok && round_trip_ok && dechunk_ok,
        format!(
            "instantiated widths {:?} -> fused dim {}; slicing round-trip exact: {round_trip_ok}; de-chunk identity: {dechunk_ok}",
            widths.iter().map(|w| w.1).collect::<Vec<_>>(),
            instantiated.dim()
        ),
    )
}

// ---------------------------------------------------------------- c4

/// Normwise relative error ||g - g_fd|| / (||g|| + ||g_fd||).
fn gradient_error(kind: HeadKind, draw: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(draw.wrapping_mul(31).wrapping_add(kind as u64));
    let mode = if draw.is_multiple_of(2) { SequenceMode::PerBackbone } else { SequenceMode::Chunked };
    let dims: Vec<usize> = (0..3).map(|_| rng.random_range(2..=7)).collect();
    let d_tok = rng.random_range(2..=8);
    let layout = InputLayout::new(FusionLayout::new([("a", dims[0]), ("b", dims[1]), ("c", dims[2])]), mode, d_tok);
    let hidden = 2 * rng.random_range(1..=3);
    let cfg = HeadConfig {
        kind,
        hidden_dim: hidden,
        attn_heads: 2,
        seed: draw,
        ..HeadConfig::default()
    };
    let n_classes = rng.random_range(2..=4);
    let mut net = HeadNet::new(&cfg, n_classes, &layout);
    let rows = rng.random_range(2..=5);
    let x = Array2::from_shape_fn((rows, layout.fusion.dim()), |_| StandardNormal.sample(&mut rng));
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..n_classes)).collect();
    let dropout = Some(draw);
    let (_, g) = net.loss_and_grad(&x, &labels, dropout);
    let theta = net.params();
    let h = 1e-5;
    let mut p = theta.clone();
    let mut num = vec![0.0; theta.len()];
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
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = g.iter().zip(&num).map(|(a, b)| a - b).collect();
    norm(&diff) / (norm(&g) + norm(&num)).max(1e-12)
}

fn c4_gradients() -> Outcome {
    let draws = 100;
    let mut worst = Vec::new();
    let mut pass = true;
    for kind in HeadKind::ALL {
        let w = (0..draws).map(|d| gradient_error(kind, d)).fold(0.0, f64::max);
        pass &= w <= 1e-4;
        worst.push(format!("{kind} {w:.1e}"));
    }
    outcome(pass, format!("{draws} draws per head, token width <= 8; worst relative error: {}", worst.join(", ")))
}

// ---------------------------------------------------------------- c5

fn orthonormal(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    basis
}

fn c5_separability() -> Outcome {
    let t = Instant::now();
    let (n_classes, queries, reps, sigma) = (10, 50, 20, 0.01);
    let layout = InputLayout::default_ensemble();
    let dim = layout.fusion.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    // Orthonormal directions scaled by 1/sqrt(2): every pair of centroids is 1 apart.
    let centroids: Vec<Vec<f64>> = orthonormal(n_classes, dim, &mut rng)
        .into_iter()
        .map(|v| v.into_iter().map(|x| x / 2f64.sqrt()).collect())
        .collect();
    let noise = Normal::new(0.0, sigma).unwrap();
    let classes: Vec<String> = (0..n_classes).map(|c| format!("class{c}")).collect();
    let fuse = |v: Vec<f32>| -> FusedFeature {
        let parts: Vec<&[f32]> = layout.fusion.segments.iter().map(|s| &v[s.offset..s.offset + s.length]).collect();
        layout.fusion.fuse(&parts).unwrap()
    };
    let mut per_kind: Vec<(HeadKind, Vec<f64>)> = HeadKind::ALL.iter().map(|&k| (k, Vec::new())).collect();
    let mut oracle = Vec::new();
    for rep in 0..reps {
        let draw = |c: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
            centroids[c].iter().map(|&m| (m + noise.sample(rng)) as f32).collect()
        };
        let support: Vec<(FusedFeature, String)> =
            (0..n_classes).map(|c| (fuse(draw(c, &mut rng)), classes[c].clone())).collect();
        let query: Vec<(usize, FusedFeature)> =
            (0..n_classes).flat_map(|c| (0..queries).map(move |_| c)).map(|c| (c, fuse(draw(c, &mut rng)))).collect();

        // Nearest support prototype.
        let hits = query
            .iter()
            .filter(|(c, q)| {
                let d = |s: &FusedFeature| s.vector.iter().zip(&q.vector).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
                let best = (0..n_classes).min_by(|&a, &b| d(&support[a].0).total_cmp(&d(&support[b].0))).unwrap();
                best == *c
            })
            .count();
        oracle.push(hits as f64 / query.len() as f64);

        let named: Vec<(String, FusedFeature)> = query.iter().enumerate().map(|(i, (_, f))| (format!("q{i}"), f.clone())).collect();
        for (kind, accs) in per_kind.iter_mut() {
            let cfg = HeadConfig {
                seed: rep as u64,
                ..HeadConfig::new(*kind)
            };
            let head = train_episode(build_head(&cfg, n_classes, &layout).unwrap(), &support, &classes).unwrap();
            let preds = predict(&head, &named).unwrap();
            let hits = preds.iter().zip(&query).filter(|(p, (c, _))| p.argmax_label == classes[*c]).count();
            accs.push(hits as f64 / query.len() as f64);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let oracle_mean = oracle.iter().sum::<f64>() / reps as f64 * 100.0;
    let mut pass = oracle_mean == 100.0 && secs < 300.0;
    let mut parts = Vec::new();
    for (kind, accs) in &per_kind {
        let mean = accs.iter().sum::<f64>() / reps as f64 * 100.0;
        pass &= mean >= 99.0;
        parts.push(format!("{kind} {mean:.2}%"));
    }
    outcome(
        pass,
        format!(
            "K=1, {queries} queries/class, {reps} reps: {}; nearest-centroid oracle {oracle_mean:.2}%; {secs:.0} s (limit 300 s)",
            parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- c6

fn c6_footprint() -> Outcome {
    let summary = footprint_report(&measured_ensemble());
    let size_err = (summary.total_size_mb - CITED_ENSEMBLE_SIZE_MB) / CITED_ENSEMBLE_SIZE_MB;
    let size_ok = size_err.abs() <= 0.05;
    let mut gflops_ok = true;
    let mut per_model = Vec::new();
    for (row, cited) in summary.rows.iter().zip(CITED_BACKBONES.iter()) {
        let c = cited.gflops;
        let err = (row.gflops - c) / c;
        gflops_ok &= err.abs() <= 0.10;
        per_model.push(format!("{} {:.3} vs {c} ({:+.1}%)", row.backbone, row.gflops, err * 100.0));
    }
    let md = summary.to_markdown();
    let cited_printed = md.contains(&format!("{CITED_PIPELINE_GFLOPS:.2}")) && md.contains(&format!("{:.3}", summary.pipeline_gflops));
    outcome(
        size_ok && gflops_ok && cited_printed,
        format!(
            "ensemble size {:.2} MB vs {CITED_ENSEMBLE_SIZE_MB} ({:+.1}%, limit ±5%); GFLOPs {}; cited pipeline {CITED_PIPELINE_GFLOPS} printed beside measured {:.3}: {cited_printed}",
            summary.total_size_mb,
            size_err * 100.0,
            per_model.join(", "),
            summary.pipeline_gflops
        ),
    )
}

// ---------------------------------------------------------------- c7 / c9

struct Smoke {
    root: PathBuf,
    corpus: PathBuf,
    report_a: Option<Vec<u8>>,
    report: Option<RunReport>,
    elapsed: Duration,
    error: Option<String>,
}

impl Smoke {
    fn config(&self, out: &str) -> RunConfig {
        RunConfig::smoke(self.corpus.join("manifest.csv"), self.root.join(out))
    }

    fn run_a(root: &Path) -> Smoke {
        let corpus = root.join("corpus");
        let t = Instant::now();
        let mut smoke = Smoke {
            root: root.to_path_buf(),
            corpus: corpus.clone(),
            report_a: None,
            report: None,
            elapsed: Duration::ZERO,
            error: None,
        };
        if let Err(e) = synthetic::generate(&SynthSpec::smoke(100, 74, 0), &corpus) {
            smoke.error = Some(e.to_string());
            return smoke;
        }
        let cfg = smoke.config("run-a");
        match pipeline::run(&cfg, &cache_opts(&root.join("cache-a"))) {
            Ok(outcome) => {
                smoke.report = outcome.report;
                smoke.report_a = fs::read(cfg.output_dir.join("report/report.json")).ok();
            }
            Err(e) => smoke.error = Some(e.to_string()),
        }
        smoke.elapsed = t.elapsed();
        smoke
    }
}

fn cache_opts(cache: &Path) -> RunOptions {
    RunOptions {
        cache_dir: Some(cache.to_path_buf()),
        ..RunOptions::default()
    }
}

fn c7_smoke(smoke: &Smoke) -> Outcome {
    let Some(report) = &smoke.report else {
        return outcome(false, format!("smoke run failed: {}", smoke.error.as_deref().unwrap_or("no report")));
    };
    let cfg = smoke.config("run-a");
    let acc = |k| report.cell(HeadKind::Bilstm, k).map(|r| r.mean_accuracy).unwrap_or(f64::NAN);
    let (a1, a5, a15) = (acc(1), acc(5), acc(15));
    let majority = report.majority(15).unwrap_or(f64::NAN);
    let minutes = smoke.elapsed.as_secs_f64() / 60.0;
    let classes = report.meta_train_classes.len() + report.meta_test_classes.len();
    let subset_ok = classes == 10 && cfg.adapt.epochs == 3;
    let pass = subset_ok && a15 - a1 >= 15.0 && a15 - majority >= 40.0 && minutes <= 30.0;
    outcome(
        pass,
        format!(
            "{classes} classes x 100 images, {} adaptation epochs, Bi-LSTM over {} reps: 1-shot {a1:.2}%, 5-shot {a5:.2}%, 15-shot {a15:.2}%, majority {majority:.2}%; 15-1 = {:.2} pp (>= 15), 15-majority = {:.2} pp (>= 40); {minutes:.1} min (limit 30)",
            cfg.adapt.epochs,
            cfg.repetitions,
            a15 - a1,
            a15 - majority
        ),
    )
}

fn digest(bytes: &[u8]) -> u64 {
    let mut h = DefaultHasher::new();
    bytes.hash(&mut h);
    h.finish()
}

fn c9_determinism(smoke: &Smoke) -> Outcome {
    let Some(a) = &smoke.report_a else {
        return outcome(false, format!("smoke run failed: {}", smoke.error.as_deref().unwrap_or("no report")));
    };
    // A second full run in a fresh cache.
    let cfg_b = smoke.config("run-b");
    let b = pipeline::run(&cfg_b, &cache_opts(&smoke.root.join("cache-b")))
        .map_err(|e| e.to_string())
        .and_then(|_| fs::read(cfg_b.output_dir.join("report/report.json")).map_err(|e| e.to_string()));
    let same_b = matches!(&b, Ok(b) if b == a);

    // Stopped partway through the episodes, then resumed.
    let cfg_c = smoke.config("run-c");
    let total_episodes = cfg_c.repetitions * cfg_c.k_shots.len() * cfg_c.heads.len();
    let stop_after = total_episodes / 2 + 1;
    let limited = RunOptions {
        max_new_episodes: Some(stop_after),
        ..cache_opts(&smoke.root.join("cache-a"))
    };
    let interrupted = matches!(pipeline::run(&cfg_c, &limited), Err(PipelineError::Interrupted { .. }));
    let resumed = pipeline::run(&cfg_c, &RunOptions { resume: true, ..cache_opts(&smoke.root.join("cache-a")) })
        .map_err(|e| e.to_string())
        .and_then(|_| fs::read(cfg_c.output_dir.join("report/report.json")).map_err(|e| e.to_string()));
    let same_c = matches!(&resumed, Ok(c) if c == a);
    outcome(
        same_b && interrupted && same_c,
        format!(
            "report.json digest {:016x}; second fresh run identical: {same_b}{}; stopped after {stop_after}/{total_episodes} episodes: {interrupted}; resumed output identical: {same_c}{}",
            digest(a),
            b.err().map(|e| format!(" ({e})")).unwrap_or_default(),
            resumed.err().map(|e| format!(" ({e})")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- c8

fn c8_recipe() -> Outcome {
    let readme = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md")).unwrap_or_default();
    let s1 = reference::published(SetupId::S1, HeadKind::BilstmSelfAttn, 15).unwrap();
    let s2 = reference::published(SetupId::S2, HeadKind::Bilstm, 15).unwrap();
    let targets_ok = (s1.mean, s1.ci95) == (98.23, 0.33) && (s2.mean, s2.ci95) == (99.72, 0.12);
    let documented = ["98.23 ± 0.33", "99.72 ± 0.12", "Hardware", "overlap"].iter().all(|s| readme.contains(s));
    let p1 = RunConfig::preset(SetupId::S1);
    let p2 = RunConfig::preset(SetupId::S2);
    let presets_ok = p1.heads.iter().any(|h| h.kind == HeadKind::BilstmSelfAttn)
        && p1.k_shots.contains(&15)
        && p1.repetitions == 100
        && p1.adaptation
        && p1.data.query_per_class == QueryCount::Count(50)
        && !p2.adaptation
        && p2.repetitions == 20
        && p2.heads.iter().any(|h| h.kind == HeadKind::Bilstm)
        && p2.k_shots.contains(&15);
    outcome(
        targets_ok && documented && presets_ok,
        format!(
            "targets S1 {}±{} / S2 {}±{} in reference table: {targets_ok}; README recipe with targets, hardware and overlap rule: {documented}; presets match recipe: {presets_ok}",
            s1.mean, s1.ci95, s2.mean, s2.ci95
        ),
    )
}

fn main() {
    const IDS: [&str; 9] = ["c1", "c2", "c3", "c4", "c5", "c6", "c7", "c8", "c9"];
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for id in IDS {
            println!("{id}: test");
        }
        return;
    }
    // Free arguments filter by substring, as libtest does.
    let wanted: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let run = |id: &str| wanted.is_empty() || wanted.iter().any(|w| id.contains(w.as_str()));
    let mut results: Vec<(&str, &str, Outcome)> = Vec::new();
    let mut record = |id: &'static str, name: &'static str, o: Outcome| {
        println!("{} {id} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    if run("c1") {
        record("c1", "episode protocol", c1_episode_protocol());
    }
    if run("c2") {
        record("c2", "metrics oracle", c2_metrics_oracle());
    }
    if run("c3") {
        record("c3", "fusion", c3_fusion());
    }
    if run("c4") {
        record("c4", "head gradients", c4_gradients());
    }
    if run("c5") {
        record("c5", "synthetic separability", c5_separability());
    }
    if run("c6") {
        record("c6", "footprint", c6_footprint());
    }
    if run("c7") || run("c9") {
        let dir = tempfile::tempdir().unwrap();
        let smoke = Smoke::run_a(dir.path());
        if run("c7") {
            record("c7", "smoke experiment", c7_smoke(&smoke));
        }
        if run("c8") {
            record("c8", "reproduction recipe", c8_recipe());
        }
        if run("c9") {
            record("c9", "determinism and resume", c9_determinism(&smoke));
        }
    } else if run("c8") {
        record("c8", "reproduction recipe", c8_recipe());
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
