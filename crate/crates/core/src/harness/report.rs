//! Machine-readable run reports and report-to-report comparison.
//!
//! Reports are JSON with struct fields serialized in declaration order, so
//! identical runs produce byte-identical documents. Everything derived from
//! wall clocks lives under `timing` keys; strip those and two runs of the
//! same config compare equal byte for byte.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CacheEstimate, FlopsLedger, ReconcileReport};
use crate::rater::RaterSet;

use super::config::RunConfig;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("reports describe different workloads: {0}")]
    WorkloadMismatch(String),
    #[error("cannot parse report: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("cannot read report {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Fixed conventions that shaped every decision in the run; echoed so a
/// report is self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub flops_unit: String,
    pub prune_tie_break: String,
    pub topk_tie_break: String,
    pub recycle_rounding: String,
    pub cluster_assignment: String,
    pub timing_method: String,
    pub checksum_domain: String,
}

impl Default for Conventions {
    fn default() -> Self {
        Self {
            flops_unit: "multiply-add (one multiply-accumulate = one unit)".into(),
            prune_tie_break: "equal significance prunes the lower position id first".into(),
            topk_tie_break: "selection complements pruning; result listed score-descending, index-ascending".into(),
            recycle_rounding: "round half up; centers clamped to at least 1 for nonempty pools".into(),
            cluster_assignment: "nearest center by cosine similarity, ties to the lower center index".into(),
            timing_method: "monotonic clock around prefill only; median of repetitions, first discarded as warm-up when repetitions >= 3".into(),
            checksum_domain: "fnv1a64 over rater positions, per-layer plans, and final positions; floats excluded".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RaterReport {
    pub threshold: f64,
    pub scores: Vec<f64>,
    /// Indices into the question block.
    pub selected: Vec<usize>,
    /// Absolute sequence positions used as rating rows.
    pub positions: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerPlanReport {
    pub layer: usize,
    pub active: bool,
    pub skipped: bool,
    pub rank_of_p: usize,
    pub deletion_count: usize,
    pub pool_size: usize,
    pub reconstructed_count: usize,
    pub visual_before: usize,
    pub visual_after: usize,
    pub len_after: usize,
    pub pruned: Vec<usize>,
    pub retained: Vec<usize>,
    pub recycled: Vec<usize>,
    pub reconstructed_positions: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub significance: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinalCounts {
    pub visual: usize,
    pub text: usize,
    pub total: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimingReport {
    pub repetitions: usize,
    pub warmup_discarded: bool,
    pub prefill_ms: Vec<f64>,
    pub median_prefill_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_prefill_ms: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_baseline_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceReport {
    pub index: usize,
    pub seed: u64,
    pub initial_counts: FinalCounts,
    pub raters: Option<RaterReport>,
    pub layers: Vec<LayerPlanReport>,
    pub final_counts: FinalCounts,
    pub ledger: FlopsLedger,
    pub cache: CacheEstimate,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconcile: Option<ReconcileReport>,
    pub checksum: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AggregateReport {
    pub num_sequences: usize,
    pub mean_net_savings_exact: f64,
    pub mean_cache_ratio: f64,
    pub total_deleted: usize,
    pub total_reconstructed: usize,
    pub checksum: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<AggregateTiming>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AggregateTiming {
    pub mean_speedup: Option<f64>,
    pub total_wall_ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub report_version: u32,
    pub config: RunConfig,
    pub conventions: Conventions,
    pub sequences: Vec<SequenceReport>,
    pub aggregate: AggregateReport,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<RunReport, ReportError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: &std::path::Path) -> Result<RunReport, ReportError> {
        let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}

pub fn rater_report(set: &RaterSet, positions: &[usize]) -> RaterReport {
    RaterReport {
        threshold: set.threshold,
        scores: set.scores.clone(),
        selected: set.selected.clone(),
        positions: positions.to_vec(),
    }
}

// --- comparison ---

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerDiff {
    pub layer: usize,
    pub retained_jaccard: f64,
    pub deletion_count_a: usize,
    pub deletion_count_b: usize,
    pub rank_a: usize,
    pub rank_b: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SequenceDiff {
    pub index: usize,
    pub layers: Vec<LayerDiff>,
    pub identical_decisions: bool,
    pub net_savings_delta: i64,
    pub cache_ratio_delta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median_prefill_ms_delta: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareReport {
    pub checksums_equal: bool,
    pub mean_retained_jaccard: f64,
    pub sequences: Vec<SequenceDiff>,
}

fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let sa: std::collections::BTreeSet<usize> = a.iter().copied().collect();
    let sb: std::collections::BTreeSet<usize> = b.iter().copied().collect();
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    inter as f64 / union as f64
}

/// Survivor sets per layer: the retained-plus-reconstructed positions for
/// sparsifying layers, carried forward through skipped ones.
fn survivor_sets(seq: &SequenceReport) -> Vec<Vec<usize>> {
    seq.layers
        .iter()
        .map(|l| {
            let mut set = l.retained.clone();
            set.extend(l.reconstructed_positions.iter().copied());
            set.sort_unstable();
            set
        })
        .collect()
}

/// Structural diff of two runs over the same workload.
pub fn compare_reports(a: &RunReport, b: &RunReport) -> Result<CompareReport, ReportError> {
    let workload_a = serde_json::to_string(&a.config.workload).expect("serializes");
    let workload_b = serde_json::to_string(&b.config.workload).expect("serializes");
    if workload_a != workload_b {
        return Err(ReportError::WorkloadMismatch(format!(
            "{workload_a} vs {workload_b}"
        )));
    }
    if a.sequences.len() != b.sequences.len() {
        return Err(ReportError::WorkloadMismatch(format!(
            "{} vs {} sequences",
            a.sequences.len(),
            b.sequences.len()
        )));
    }
    let mut sequences = Vec::with_capacity(a.sequences.len());
    let mut jaccard_sum = 0.0;
    let mut jaccard_count = 0usize;
    for (sa, sb) in a.sequences.iter().zip(&b.sequences) {
        if sa.seed != sb.seed {
            return Err(ReportError::WorkloadMismatch(format!(
                "sequence {} seeds differ: {} vs {}",
                sa.index, sa.seed, sb.seed
            )));
        }
        let sets_a = survivor_sets(sa);
        let sets_b = survivor_sets(sb);
        let mut layers = Vec::new();
        for (la, lb) in sa.layers.iter().zip(&sb.layers) {
            let idx = layers.len();
            let j = jaccard(&sets_a[idx], &sets_b[idx]);
            jaccard_sum += j;
            jaccard_count += 1;
            layers.push(LayerDiff {
                layer: la.layer,
                retained_jaccard: j,
                deletion_count_a: la.deletion_count,
                deletion_count_b: lb.deletion_count,
                rank_a: la.rank_of_p,
                rank_b: lb.rank_of_p,
            });
        }
        let identical = sa.checksum == sb.checksum;
        let timing_delta = match (&sa.timing, &sb.timing) {
            (Some(ta), Some(tb)) => Some(ta.median_prefill_ms - tb.median_prefill_ms),
            _ => None,
        };
        sequences.push(SequenceDiff {
            index: sa.index,
            layers,
            identical_decisions: identical,
            net_savings_delta: sa.ledger.totals.net_savings_exact
                - sb.ledger.totals.net_savings_exact,
            cache_ratio_delta: sa.cache.ratio - sb.cache.ratio,
            median_prefill_ms_delta: timing_delta,
        });
    }
    Ok(CompareReport {
        checksums_equal: a.aggregate.checksum == b.aggregate.checksum,
        mean_retained_jaccard: if jaccard_count == 0 {
            1.0
        } else {
            jaccard_sum / jaccard_count as f64
        },
        sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jaccard_cases() {
        assert_eq!(jaccard(&[], &[]), 1.0);
        assert_eq!(jaccard(&[1, 2], &[1, 2]), 1.0);
        assert_eq!(jaccard(&[1, 2], &[3, 4]), 0.0);
        assert!((jaccard(&[1, 2, 3], &[2, 3, 4]) - 0.5).abs() < 1e-12);
    }
}
