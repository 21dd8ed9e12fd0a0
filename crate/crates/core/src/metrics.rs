//! Episode scoring, per-class metrics, aggregation across repetitions with a
//! 95% confidence half-width, and result-table rendering.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::corpus::{EpisodeItem, SetupId};
use crate::footprint::FootprintSummary;
use crate::heads::{HeadKind, Prediction};
use crate::reference;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("query item `{0}` has no prediction")]
    MissingPrediction(String),
    #[error("query item `{0}` has more than one prediction")]
    DuplicatePrediction(String),
    #[error("prediction for `{0}`, which is not a query item")]
    UnexpectedPrediction(String),
    #[error("predicted label `{label}` for `{id}` is not an episode class")]
    UnknownLabel { id: String, label: String },
    #[error("cannot aggregate an empty result list")]
    NoResults,
    #[error("confusion matrices disagree on labels")]
    LabelMismatch,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// Rows are true classes, columns predicted classes.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let n = labels.len();
        Self {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn from_counts(labels: Vec<String>, counts: Vec<Vec<u64>>) -> Self {
        assert!(counts.len() == labels.len() && counts.iter().all(|r| r.len() == labels.len()));
        Self { labels, counts }
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// trace / total; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            self.trace() as f64 / t as f64
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), ScoringError> {
        if self.labels != other.labels {
            return Err(ScoringError::LabelMismatch);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a denominator was zero and the metric defaulted to 0.
    #[serde(default)]
    pub precision_undefined: bool,
    #[serde(default)]
    pub recall_undefined: bool,
    #[serde(default)]
    pub f1_undefined: bool,
}

pub fn per_class_metrics(confusion: &ConfusionMatrix) -> Vec<ClassMetrics> {
    (0..confusion.n())
        .map(|c| {
            let tp = confusion.counts[c][c] as f64;
            let col = confusion.col_sum(c);
            let row = confusion.row_sum(c);
            let precision = if col == 0 { 0.0 } else { tp / col as f64 };
            let recall = if row == 0 { 0.0 } else { tp / row as f64 };
            let denom = precision + recall;
            ClassMetrics {
                label: confusion.labels[c].clone(),
                precision,
                recall,
                f1: if denom == 0.0 { 0.0 } else { 2.0 * precision * recall / denom },
                support: row,
                precision_undefined: col == 0,
                recall_undefined: row == 0,
                f1_undefined: denom == 0.0,
            }
        })
        .collect()
}

/// Recall averaged with support weights. Each term `(n_c / N) * (tp_c / n_c)`
/// is reduced to `tp_c / N` before summing, so the result is exactly accuracy.
pub fn support_weighted_recall(confusion: &ConfusionMatrix) -> f64 {
    let total = confusion.total();
    if total == 0 {
        return 0.0;
    }
    let weighted: u64 = (0..confusion.n()).filter(|&c| confusion.row_sum(c) > 0).map(|c| confusion.counts[c][c]).sum();
    weighted as f64 / total as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub rep_index: usize,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
}

/// Scores one episode. Labels are the sorted set of true query labels.
pub fn score_episode(
    rep_index: usize,
    predictions: &[Prediction],
    truth: &[EpisodeItem],
) -> Result<EpisodeResult, ScoringError> {
    let labels: Vec<String> = truth
        .iter()
        .map(|t| t.class_label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut by_id: HashMap<&str, &Prediction> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_id.insert(p.image_id.as_str(), p).is_some() {
            return Err(ScoringError::DuplicatePrediction(p.image_id.clone()));
        }
    }
    let mut confusion = ConfusionMatrix::new(labels.clone());
    for t in truth {
        let p = by_id
            .remove(t.image_id.as_str())
            .ok_or_else(|| ScoringError::MissingPrediction(t.image_id.clone()))?;
        let col = *index.get(p.argmax_label.as_str()).ok_or_else(|| ScoringError::UnknownLabel {
            id: p.image_id.clone(),
            label: p.argmax_label.clone(),
        })?;
        confusion.counts[index[t.class_label.as_str()]][col] += 1;
    }
    if let Some(id) = by_id.keys().min() {
        return Err(ScoringError::UnexpectedPrediction(id.to_string()));
    }
    let per_class = per_class_metrics(&confusion);
    Ok(EpisodeResult {
        rep_index,
        accuracy: confusion.accuracy(),
        confusion,
        per_class,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    /// 1.96 * s / sqrt(n).
    #[default]
    Normal,
    /// t(0.975, n-1) * s / sqrt(n).
    StudentT,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub n_reps: usize,
    /// Percent.
    pub mean_accuracy: f64,
    /// Percentage-point half-width.
    pub ci95: f64,
    /// Sample standard deviation (n-1), percentage points.
    pub std_dev: f64,
    pub ci_method: CiMethod,
    pub degenerate_ci: bool,
}

/// Summarizes per-repetition accuracies given as fractions.
pub fn summarize(accuracies: &[f64], method: CiMethod) -> Result<AccuracySummary, ScoringError> {
    let n = accuracies.len();
    if n == 0 {
        return Err(ScoringError::NoResults);
    }
    let pct: Vec<f64> = accuracies.iter().map(|a| a * 100.0).collect();
    let mean = pct.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok(AccuracySummary {
            n_reps: 1,
            mean_accuracy: mean,
            ci95: 0.0,
            std_dev: 0.0,
            ci_method: method,
            degenerate_ci: true,
        });
    }
    let var = pct.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let s = var.sqrt();
    let z = match method {
        CiMethod::Normal => 1.96,
        CiMethod::StudentT => StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("positive degrees of freedom")
            .inverse_cdf(0.975),
    };
    Ok(AccuracySummary {
        n_reps: n,
        mean_accuracy: mean,
        ci95: z * s / (n as f64).sqrt(),
        std_dev: s,
        ci_method: method,
        degenerate_ci: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// A reported reference cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublishedCell {
    pub mean: f64,
    pub ci95: f64,
}

/// Identity of an aggregate and the run context embedded in it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportContext {
    pub setup_id: Option<SetupId>,
    pub head: Option<HeadKind>,
    pub k_shot: usize,
    pub ensemble: Vec<String>,
    pub footprint: Option<FootprintSummary>,
    pub config_fingerprint: String,
    pub ci_method: CiMethod,
    /// Free-form header entries (sequence mode, head hyperparameters, seeds).
    pub header: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub setup_id: SetupId,
    pub head: HeadKind,
    pub k_shot: usize,
    pub ensemble: Vec<String>,
    pub n_reps: usize,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub std_dev: f64,
    pub ci_method: CiMethod,
    pub degenerate_ci: bool,
    pub accuracies: Vec<f64>,
    /// Pooled over repetitions.
    pub per_class: Vec<ClassSummary>,
    pub footprint: Option<FootprintSummary>,
    pub published: Option<PublishedCell>,
    pub config_fingerprint: String,
    pub header: BTreeMap<String, String>,
}

/// Aggregates repetitions. Per-class figures come from the confusion matrix
/// pooled over all repetitions.
pub fn aggregate(results: &[EpisodeResult], ctx: &ReportContext) -> Result<AggregateReport, ScoringError> {
    let first = results.first().ok_or(ScoringError::NoResults)?;
    let accuracies: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    let summary = summarize(&accuracies, ctx.ci_method)?;
    let mut pooled = ConfusionMatrix::new(first.confusion.labels.clone());
    for r in results {
        pooled.merge(&r.confusion)?;
    }
    let per_class = per_class_metrics(&pooled)
        .into_iter()
        .map(|m| ClassSummary {
            label: m.label,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            support: m.support,
        })
        .collect();
    let setup_id = ctx.setup_id.unwrap_or(SetupId::S1);
    let head = ctx.head.unwrap_or(HeadKind::Bilstm);
    Ok(AggregateReport {
        setup_id,
        head,
        k_shot: ctx.k_shot,
        ensemble: ctx.ensemble.clone(),
        n_reps: summary.n_reps,
        mean_accuracy: summary.mean_accuracy,
        ci95: summary.ci95,
        std_dev: summary.std_dev,
        ci_method: summary.ci_method,
        degenerate_ci: summary.degenerate_ci,
        accuracies,
        per_class,
        footprint: ctx.footprint.clone(),
        published: reference::published(setup_id, head, ctx.k_shot).map(|p| PublishedCell {
            mean: p.mean,
            ci95: p.ci95,
        }),
        config_fingerprint: ctx.config_fingerprint.clone(),
        header: ctx.header.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Markdown,
    Csv,
}

pub fn cell(mean: f64, ci95: f64) -> String {
    format!("{mean:.2} ± {ci95:.2}")
}

struct Grid<'a> {
    setup: SetupId,
    shots: Vec<usize>,
    /// (ensemble, head) → k → report
    rows: BTreeMap<(String, HeadKind), BTreeMap<usize, &'a AggregateReport>>,
}

fn grids(reports: &[AggregateReport]) -> Vec<Grid<'_>> {
    let mut by_setup: BTreeMap<SetupId, Vec<&AggregateReport>> = BTreeMap::new();
    for r in reports {
        by_setup.entry(r.setup_id).or_default().push(r);
    }
    by_setup
        .into_iter()
        .map(|(setup, rs)| {
            let shots: BTreeSet<usize> = rs.iter().map(|r| r.k_shot).collect();
            let mut rows: BTreeMap<(String, HeadKind), BTreeMap<usize, &AggregateReport>> = BTreeMap::new();
            for r in rs {
                rows.entry((r.ensemble.join("+"), r.head)).or_default().insert(r.k_shot, r);
            }
            Grid {
                setup,
                shots: shots.into_iter().collect(),
                rows,
            }
        })
        .collect()
}

/// One row per (ensemble, head) with a column per K, followed by a `published`
/// row wherever reference values exist.
pub fn render_tables(reports: &[AggregateReport], format: TableFormat) -> String {
    match format {
        TableFormat::Markdown => render_markdown(reports),
        TableFormat::Csv => render_csv(reports),
    }
}

fn footprint_cells(r: Option<&&AggregateReport>) -> (String, String) {
    match r.and_then(|r| r.footprint.as_ref()) {
        Some(f) => (format!("{:.2}", f.total_size_mb), format!("{:.2}", f.pipeline_gflops)),
        None => ("—".into(), "—".into()),
    }
}

fn render_markdown(reports: &[AggregateReport]) -> String {
    let header = |shots: &[usize]| {
        let mut h = String::from("| Feature extractor | Size (MB) | GFLOPs | Classifier | Source |");
        let mut sep = String::from("|---|---|---|---|---|");
        for k in shots {
            h.push_str(&format!(" {k} Shot |"));
            sep.push_str("---|");
        }
        format!("{h}\n{sep}\n")
    };
    if reports.is_empty() {
        return header(&[]);
    }
    let mut out = String::new();
    for g in grids(reports) {
        out.push_str(&format!("### Setup {}\n\n", g.setup.as_str().to_uppercase()));
        out.push_str(&header(&g.shots));
        for ((ensemble, head), cells) in &g.rows {
            let (size, gflops) = footprint_cells(cells.values().next());
            let mut line = format!("| {ensemble} | {size} | {gflops} | {} | measured |", head.display_name());
            for k in &g.shots {
                match cells.get(k) {
                    Some(r) => line.push_str(&format!(" {} |", cell(r.mean_accuracy, r.ci95))),
                    None => line.push_str(" — |"),
                }
            }
            out.push_str(&line);
            out.push('\n');
            if g.shots.iter().any(|&k| reference::published(g.setup, *head, k).is_some()) {
                let mut line = format!(
                    "| {ensemble} | {:.2} | {:.2} | {} | published |",
                    reference::CITED_ENSEMBLE_SIZE_MB,
                    reference::CITED_PIPELINE_GFLOPS,
                    head.display_name()
                );
                for &k in &g.shots {
                    match reference::published(g.setup, *head, k) {
                        Some(p) => line.push_str(&format!(" {} |", cell(p.mean, p.ci95))),
                        None => line.push_str(" — |"),
                    }
                }
                out.push_str(&line);
                out.push('\n');
            }
        }
        out.push('\n');
    }
    out
}

fn render_csv(reports: &[AggregateReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let all_shots: BTreeSet<usize> = reports.iter().map(|r| r.k_shot).collect();
    let mut head = vec!["setup", "feature_extractor", "size_mb", "gflops", "classifier", "source"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    for k in &all_shots {
        head.push(format!("k{k}_mean"));
        head.push(format!("k{k}_ci95"));
    }
    w.write_record(&head).expect("in-memory csv");
    for g in grids(reports) {
        for ((ensemble, kind), cells) in &g.rows {
            let (size, gflops) = footprint_cells(cells.values().next());
            let mut row = vec![g.setup.as_str().to_string(), ensemble.clone(), size, gflops, kind.as_str().into(), "measured".into()];
            for k in &all_shots {
                match cells.get(k) {
                    Some(r) => {
                        row.push(format!("{:.2}", r.mean_accuracy));
                        row.push(format!("{:.2}", r.ci95));
                    }
                    None => row.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&row).expect("in-memory csv");
            if all_shots.iter().any(|&k| reference::published(g.setup, *kind, k).is_some()) {
                let mut row = vec![
                    g.setup.as_str().to_string(),
                    ensemble.clone(),
                    format!("{:.2}", reference::CITED_ENSEMBLE_SIZE_MB),
                    format!("{:.2}", reference::CITED_PIPELINE_GFLOPS),
                    kind.as_str().into(),
                    "published".into(),
                ];
                for &k in &all_shots {
                    match reference::published(g.setup, *kind, k) {
                        Some(p) => {
                            row.push(format!("{:.2}", p.mean));
                            row.push(format!("{:.2}", p.ci95));
                        }
                        None => row.extend([String::new(), String::new()]),
                    }
                }
                w.write_record(&row).expect("in-memory csv");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

/// Long-form accuracy-vs-K curve for external plotting.
pub fn render_curves(reports: &[AggregateReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["setup", "classifier", "k_shot", "mean_accuracy", "ci95", "n_reps", "published_mean", "published_ci95"])
        .expect("in-memory csv");
    let mut sorted: Vec<&AggregateReport> = reports.iter().collect();
    sorted.sort_by_key(|r| (r.setup_id, r.head, r.k_shot));
    for r in sorted {
        let (pm, pc) = r.published.map_or((String::new(), String::new()), |p| (format!("{:.2}", p.mean), format!("{:.2}", p.ci95)));
        w.write_record([
            r.setup_id.as_str().to_string(),
            r.head.as_str().to_string(),
            r.k_shot.to_string(),
            format!("{:.4}", r.mean_accuracy),
            format!("{:.4}", r.ci95),
            r.n_reps.to_string(),
            pm,
            pc,
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}
