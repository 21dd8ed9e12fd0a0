//! Model footprint accounting: parameter bytes and multiply-accumulate counts
//! of the backbone ensemble, set beside the cited figures.

use leaffew_mobilenet::{Architecture, Backbone};
use serde::{Deserialize, Serialize};

use crate::reference::{CITED_BACKBONES, CITED_ENSEMBLE_SIZE_MB, CITED_PIPELINE_GFLOPS};

pub const SIZE_CONVENTION: &str = "size_mb = 4-byte parameters / 2^20 (batch-norm running statistics excluded)";
pub const GFLOPS_CONVENTION: &str =
    "gflops = multiply-accumulates / 1e9 at 224x224 (one MAC counted as one FLOP); gflops_2x = 2 x MACs / 1e9";

/// Relative deviation beyond which a measured figure is flagged.
pub const DISCREPANCY_TOLERANCE: f64 = 0.10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: Architecture,
    pub embedding_dim: usize,
    pub param_count: u64,
    pub size_mb: f64,
    /// MAC count / 1e9 at `resolution`.
    pub gflops: f64,
    pub resolution: usize,
    /// Classifier width the counts include (1000 for the ImageNet head).
    pub head_classes: usize,
}

impl BackboneSpec {
    /// Measures an instantiated model with a `head_classes`-way classifier.
    pub fn measure(arch: Architecture, head_classes: usize, resolution: usize) -> Self {
        Self::of(&Backbone::new(arch, head_classes, 0), resolution)
    }

    pub fn of(net: &Backbone, resolution: usize) -> Self {
        let p = net.profile(resolution);
        Self {
            name: net.arch,
            embedding_dim: net.embedding_dim(),
            param_count: p.params,
            size_mb: p.params as f64 * 4.0 / (1u64 << 20) as f64,
            gflops: p.macs as f64 / 1e9,
            resolution,
            head_classes: net.num_classes().unwrap_or(0),
        }
    }

    pub fn gflops_2x(&self) -> f64 {
        2.0 * self.gflops
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FootprintRow {
    pub backbone: String,
    pub embedding_dim: usize,
    pub param_count: u64,
    pub size_mb: f64,
    pub gflops: f64,
    pub gflops_2x: f64,
    pub cited_size_mb: Option<f64>,
    pub cited_size_mb_alt: Option<f64>,
    pub cited_gflops: Option<f64>,
    pub size_flagged: bool,
    pub gflops_flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FootprintSummary {
    pub rows: Vec<FootprintRow>,
    pub total_params: u64,
    pub total_size_mb: f64,
    /// Ensemble forward cost (sum of backbone figures).
    pub total_gflops: f64,
    pub total_gflops_2x: f64,
    /// Classifier-head MACs / 1e9 per query, when known.
    pub head_gflops: f64,
    /// Backbones plus head.
    pub pipeline_gflops: f64,
    pub cited_total_size_mb: f64,
    pub cited_pipeline_gflops: f64,
    pub size_flagged: bool,
    pub pipeline_flagged: bool,
    pub conventions: Vec<String>,
    pub notes: Vec<String>,
}

fn flagged(measured: f64, cited: f64) -> bool {
    cited > 0.0 && ((measured - cited) / cited).abs() > DISCREPANCY_TOLERANCE
}

/// Totals are plain sums; an empty list gives zero totals.
pub fn footprint_report(specs: &[BackboneSpec]) -> FootprintSummary {
    footprint_with_head(specs, 0.0)
}

pub fn footprint_with_head(specs: &[BackboneSpec], head_gflops: f64) -> FootprintSummary {
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    for s in specs {
        let cited = CITED_BACKBONES.iter().find(|c| c.name == s.name.name());
        let row = FootprintRow {
            backbone: s.name.name().to_string(),
            embedding_dim: s.embedding_dim,
            param_count: s.param_count,
            size_mb: s.size_mb,
            gflops: s.gflops,
            gflops_2x: s.gflops_2x(),
            cited_size_mb: cited.map(|c| c.size_mb),
            cited_size_mb_alt: cited.map(|c| c.size_mb_alt),
            cited_gflops: cited.map(|c| c.gflops),
            size_flagged: cited.is_some_and(|c| flagged(s.size_mb, c.size_mb)),
            gflops_flagged: cited.is_some_and(|c| flagged(s.gflops, c.gflops)),
        };
        if let Some(c) = cited {
            if (c.size_mb - c.size_mb_alt).abs() > 0.5 {
                notes.push(format!(
                    "{}: cited sizes disagree ({:.2} MB vs {:.2} MB); measured {:.2} MB",
                    row.backbone, c.size_mb, c.size_mb_alt, s.size_mb
                ));
            }
        }
        rows.push(row);
    }
    let total_params = specs.iter().map(|s| s.param_count).sum();
    let total_size_mb: f64 = specs.iter().map(|s| s.size_mb).sum();
    let total_gflops: f64 = specs.iter().map(|s| s.gflops).sum();
    let pipeline_gflops = total_gflops + head_gflops;
    let full_ensemble = specs.len() == 3 && Architecture::ALL.iter().all(|a| specs.iter().any(|s| s.name == *a));
    let size_flagged = full_ensemble && flagged(total_size_mb, CITED_ENSEMBLE_SIZE_MB);
    let pipeline_flagged = full_ensemble && flagged(pipeline_gflops, CITED_PIPELINE_GFLOPS);
    if full_ensemble {
        let cited_sum: f64 = CITED_BACKBONES.iter().map(|c| c.gflops).sum();
        notes.push(format!(
            "cited per-model GFLOPs sum to {cited_sum:.2}; cited pipeline figure is {CITED_PIPELINE_GFLOPS:.2}; measured ensemble {total_gflops:.3}, pipeline {pipeline_gflops:.3}"
        ));
    }
    FootprintSummary {
        rows,
        total_params,
        total_size_mb,
        total_gflops,
        total_gflops_2x: 2.0 * total_gflops,
        head_gflops,
        pipeline_gflops,
        cited_total_size_mb: CITED_ENSEMBLE_SIZE_MB,
        cited_pipeline_gflops: CITED_PIPELINE_GFLOPS,
        size_flagged,
        pipeline_flagged,
        conventions: vec![SIZE_CONVENTION.to_string(), GFLOPS_CONVENTION.to_string()],
        notes,
    }
}

/// The three backbones measured with their 1000-way ImageNet classifiers at
/// 224x224, the configuration the cited figures describe.
pub fn measured_ensemble() -> Vec<BackboneSpec> {
    Architecture::ALL.iter().map(|&a| BackboneSpec::measure(a, 1000, 224)).collect()
}

impl FootprintSummary {
    pub fn to_markdown(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("—".to_string(), |v| format!("{v:.2}"));
        let mut s = String::from(
            "| Backbone | Dim | Params | Size (MB) | Cited size (MB) | GFLOPs | GFLOPs (2xMAC) | Cited GFLOPs |\n|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let size_cited = match (r.cited_size_mb, r.cited_size_mb_alt) {
                (Some(a), Some(b)) if (a - b).abs() > 1e-9 => format!("{a:.2} / {b:.2}"),
                (a, _) => opt(a),
            };
            s.push_str(&format!(
                "| {} | {} | {} | {:.2}{} | {} | {:.3}{} | {:.3} | {} |\n",
                r.backbone,
                r.embedding_dim,
                r.param_count,
                r.size_mb,
                if r.size_flagged { " ⚠" } else { "" },
                size_cited,
                r.gflops,
                if r.gflops_flagged { " ⚠" } else { "" },
                r.gflops_2x,
                opt(r.cited_gflops),
            ));
        }
        s.push_str(&format!(
            "| **total** | {} | {} | {:.2}{} | {:.2} | {:.3} | {:.3} | — |\n",
            self.rows.iter().map(|r| r.embedding_dim).sum::<usize>(),
            self.total_params,
            self.total_size_mb,
            if self.size_flagged { " ⚠" } else { "" },
            self.cited_total_size_mb,
            self.total_gflops,
            self.total_gflops_2x,
        ));
        s.push_str(&format!(
            "\nPipeline (backbones + head): {:.3} GFLOPs measured vs {:.2} cited{}\n",
            self.pipeline_gflops,
            self.cited_pipeline_gflops,
            if self.pipeline_flagged { " ⚠ discrepancy" } else { "" }
        ));
        for c in &self.conventions {
            s.push_str(&format!("\n- {c}"));
        }
        for n in &self.notes {
            s.push_str(&format!("\n- {n}"));
        }
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(arch: Architecture, size_mb: f64, gflops: f64) -> BackboneSpec {
        BackboneSpec {
            name: arch,
            embedding_dim: arch.embedding_dim(),
            param_count: 0,
            size_mb,
            gflops,
            resolution: 224,
            head_classes: 1000,
        }
    }

    #[test]
    fn totals_are_sums() {
        let specs = [
            spec(Architecture::Mnv2, 13.37, 0.3),
            spec(Architecture::Mnv3Small, 6.08, 0.06),
            spec(Architecture::Mnv3Large, 20.92, 0.22),
        ];
        let f = footprint_report(&specs);
        assert!((f.total_size_mb - 40.37).abs() < 1e-9);
        assert!((f.total_gflops - 0.58).abs() < 1e-9);
        assert!(!f.size_flagged);
        assert!(f.pipeline_flagged, "0.58 vs 1.12 must be flagged");
        let md = f.to_markdown();
        assert!(md.contains("1.12") && md.contains("0.580"), "{md}");
    }

    #[test]
    fn empty_list_gives_zero_totals() {
        let f = footprint_report(&[]);
        assert_eq!(f.total_params, 0);
        assert_eq!(f.total_size_mb, 0.0);
        assert_eq!(f.total_gflops, 0.0);
        assert!(f.rows.is_empty());
    }
}
