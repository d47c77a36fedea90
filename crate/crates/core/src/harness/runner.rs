//! Benchmark execution: build the model, run every workload sequence with the
//! configured backend (and a no-pruning baseline when requested), and
//! assemble the report.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::cost::{build_ledger, cache_estimate, reconcile, CostError};
use crate::model::{build_model, AttentionBackend, DecoderModel, ModelError, TokenSequence};
use crate::numerics::OpCounter;
use crate::pipeline::{prefill, PipelineError, PrefillOptions, RunTrace, TraceDetail};

use super::config::{BackendConfig, ConfigError, RunConfig};
use super::report::{
    rater_report, AggregateReport, AggregateTiming, Conventions, FinalCounts, LayerPlanReport,
    ReportError, RunReport, SequenceReport, TimingReport,
};
use super::workload::{build_workload, Workload, WorkloadError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("cannot write report {path}: {source}")]
    WriteReport {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    /// POSIX exit code: 1 for configuration/input problems, 2 for runtime
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Workload(_) => 1,
            _ => 2,
        }
    }
}

fn backend(config: &RunConfig) -> AttentionBackend {
    match config.attention_backend {
        BackendConfig::Dense => AttentionBackend::Dense,
        BackendConfig::Blockwise { block_size } => AttentionBackend::Blockwise { block_size },
    }
}

fn median(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

struct TimedRuns {
    trace: RunTrace,
    wall_ms: Vec<f64>,
}

/// Run the same prefill `repetitions` times; all repetitions produce
/// bit-identical traces, so only the last is kept.
fn timed_prefill(
    model: &DecoderModel,
    seq: &TokenSequence,
    options: &PrefillOptions,
    repetitions: usize,
) -> Result<TimedRuns, PipelineError> {
    let mut wall_ms = Vec::with_capacity(repetitions);
    let mut last = None;
    for _ in 0..repetitions {
        let mut counter = OpCounter::new();
        let trace = prefill(model, seq, options, &mut counter)?;
        wall_ms.push(trace.wall_time.as_secs_f64() * 1e3);
        last = Some(trace);
    }
    Ok(TimedRuns {
        trace: last.expect("at least one repetition"),
        wall_ms,
    })
}

/// Median over the measured repetitions, discarding the first as warm-up when
/// three or more ran.
fn timing_stats(wall_ms: &[f64]) -> (f64, bool) {
    if wall_ms.len() >= 3 {
        (median(&wall_ms[1..]), true)
    } else {
        (median(wall_ms), false)
    }
}

fn run_sequence(
    model: &DecoderModel,
    config: &RunConfig,
    index: usize,
    seed: u64,
    seq: &TokenSequence,
) -> Result<SequenceReport, HarnessError> {
    let repetitions = if config.measure_time {
        config.repetitions
    } else {
        1
    };
    let options = PrefillOptions {
        sparsify: Some(config.sparsify.clone()),
        backend: backend(config),
        trace_detail: TraceDetail::Decisions,
    };
    let runs = timed_prefill(model, seq, &options, repetitions)?;
    let trace = runs.trace;

    let baseline = if config.include_baseline {
        let baseline_options = PrefillOptions {
            sparsify: None,
            backend: backend(config),
            trace_detail: TraceDetail::Decisions,
        };
        Some(timed_prefill(model, seq, &baseline_options, repetitions)?)
    } else {
        None
    };

    let ledger = build_ledger(&trace, baseline.as_ref().map(|b| &b.trace));
    let cache = cache_estimate(&trace, config.cache_bytes_per_element);
    let reconcile_report = match &baseline {
        Some(b) => Some(reconcile(&trace, &b.trace)?),
        None => None,
    };

    let timing = if config.measure_time {
        let (median_prefill_ms, warmup_discarded) = timing_stats(&runs.wall_ms);
        let (baseline_ms, median_baseline) = match &baseline {
            Some(b) => {
                let (m, _) = timing_stats(&b.wall_ms);
                (Some(b.wall_ms.clone()), Some(m))
            }
            None => (None, None),
        };
        let speedup = median_baseline
            .filter(|_| median_prefill_ms > 0.0)
            .map(|b| b / median_prefill_ms);
        Some(TimingReport {
            repetitions,
            warmup_discarded,
            prefill_ms: runs.wall_ms.clone(),
            median_prefill_ms,
            baseline_prefill_ms: baseline_ms,
            median_baseline_ms: median_baseline,
            speedup,
        })
    } else {
        None
    };

    let layers = trace
        .layers
        .iter()
        .map(|record| {
            let (skipped, rank, n, l_r, c, pruned, retained, recycled, recon, sig) =
                match &record.plan {
                    Some(p) => (
                        p.skipped,
                        p.rank_of_p,
                        p.deletion_count,
                        p.pool_size,
                        p.reconstructed_count,
                        p.pruned.clone(),
                        p.retained.clone(),
                        p.recycled.clone(),
                        p.reconstructed_positions.clone(),
                        p.significance.clone(),
                    ),
                    None => (
                        false,
                        0,
                        0,
                        0,
                        0,
                        Vec::new(),
                        Vec::new(),
                        Vec::new(),
                        Vec::new(),
                        None,
                    ),
                };
            LayerPlanReport {
                layer: record.layer_index,
                active: record.plan.is_some(),
                skipped,
                rank_of_p: rank,
                deletion_count: n,
                pool_size: l_r,
                reconstructed_count: c,
                visual_before: record.visual_before,
                visual_after: record.visual_after,
                len_after: record.len_after,
                pruned,
                retained,
                recycled,
                reconstructed_positions: recon,
                significance: sig,
            }
        })
        .collect();

    Ok(SequenceReport {
        index,
        seed,
        initial_counts: FinalCounts {
            visual: seq.visual_len(),
            text: seq.pre_text_ids.len() + seq.question_len(),
            total: seq.len(),
        },
        raters: trace
            .rater
            .as_ref()
            .map(|set| rater_report(set, &trace.rater_positions)),
        layers,
        final_counts: FinalCounts {
            visual: trace.final_visual_count(),
            text: trace.final_text_count(),
            total: trace.final_positions.len(),
        },
        ledger,
        cache,
        reconcile: reconcile_report,
        checksum: format!("{:016x}", trace.checksum),
        timing,
    })
}

fn combine_checksums(sequences: &[SequenceReport]) -> String {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for seq in sequences {
        for byte in seq.checksum.bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    format!("{hash:016x}")
}

/// Run a resolved config end to end and assemble the report.
pub fn run(config: &RunConfig) -> Result<RunReport, HarnessError> {
    let started = Instant::now();
    let model = build_model(&config.model)?;
    let workload: Workload = build_workload(config)?;

    let execute = |(index, (seq, seed)): (usize, (&TokenSequence, &u64))| {
        run_sequence(&model, config, index, *seed, seq)
    };
    let items: Vec<(usize, (&TokenSequence, &u64))> = workload
        .sequences
        .iter()
        .zip(&workload.seeds)
        .enumerate()
        .collect();

    let sequences: Result<Vec<SequenceReport>, HarnessError> = match config.workers {
        Some(workers) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .expect("thread pool builds");
            pool.install(|| items.into_par_iter().map(execute).collect())
        }
        None => items.into_par_iter().map(execute).collect(),
    };
    let sequences = sequences?;

    let num = sequences.len();
    let mean_net = sequences
        .iter()
        .map(|s| s.ledger.totals.net_savings_exact as f64)
        .sum::<f64>()
        / num as f64;
    let mean_cache = sequences.iter().map(|s| s.cache.ratio).sum::<f64>() / num as f64;
    let total_deleted: usize = sequences
        .iter()
        .flat_map(|s| s.layers.iter().map(|l| l.deletion_count))
        .sum();
    let total_reconstructed: usize = sequences
        .iter()
        .flat_map(|s| s.layers.iter().map(|l| l.reconstructed_count))
        .sum();
    let timing = if config.measure_time {
        let speedups: Vec<f64> = sequences
            .iter()
            .filter_map(|s| s.timing.as_ref().and_then(|t| t.speedup))
            .collect();
        Some(AggregateTiming {
            mean_speedup: if speedups.is_empty() {
                None
            } else {
                Some(speedups.iter().sum::<f64>() / speedups.len() as f64)
            },
            total_wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    } else {
        None
    };

    let checksum = combine_checksums(&sequences);
    Ok(RunReport {
        report_version: 1,
        config: config.clone(),
        conventions: Conventions::default(),
        sequences,
        aggregate: AggregateReport {
            num_sequences: num,
            mean_net_savings_exact: mean_net,
            mean_cache_ratio: mean_cache,
            total_deleted,
            total_reconstructed,
            checksum,
            timing,
        },
    })
}

/// Run and write the report where the config says (stdout when unset).
pub fn run_to_report_path(config: &RunConfig) -> Result<RunReport, HarnessError> {
    let report = run(config)?;
    if let Some(path) = &config.report_path {
        std::fs::write(path, report.to_json()).map_err(|source| HarnessError::WriteReport {
            path: path.clone(),
            source,
        })?;
    }
    Ok(report)
}
