//! The prefill loop: embed, select raters once, then run every decoder layer
//! and apply the per-layer sparsification hook that scores, prunes, and
//! recycles visual tokens.

use thiserror::Error;

use crate::flash::FlashError;
use crate::model::{
    build_model, embed_sequence, forward_layer, AttentionBackend, DecoderModel, LayerAttentionView,
    ModelConfig, ModelError, ScoreRequest, TokenSequence,
};
use crate::numerics::{NumericsError, OpCounter, RealMatrix};
use crate::rater::{rater_scores, select_raters, RaterSet};
use crate::recycle::{
    cluster, distance_indicator, local_density, reconstruct, recycle_pool, RecycleError,
};
use crate::sparsify::{
    budget_schedule, deletion_count, prune, significance, slice_priority, HeadMode, PriorityMatrix,
    RaterMode, SparsifyConfig, SparsifyError, SparsifyPlan,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sparsify(#[from] SparsifyError),
    #[error(transparent)]
    Recycle(#[from] RecycleError),
    #[error(transparent)]
    Flash(#[from] FlashError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// How much of each layer to keep in the trace. Full retains attention maps
/// and hidden states for inspection; Decisions keeps only plans and counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TraceDetail {
    #[default]
    Decisions,
    Full,
}

#[derive(Clone, Debug)]
pub struct PrefillOptions {
    pub sparsify: Option<SparsifyConfig>,
    pub backend: AttentionBackend,
    pub trace_detail: TraceDetail,
}

impl Default for PrefillOptions {
    fn default() -> Self {
        Self {
            sparsify: None,
            backend: AttentionBackend::Dense,
            trace_detail: TraceDetail::Decisions,
        }
    }
}

/// Multiply-adds attributed to each hook stage at one layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct StageMadds {
    pub significance: u64,
    pub rank: u64,
    pub aggregation: u64,
    pub reconstruction: u64,
}

#[derive(Clone, Debug)]
pub struct LayerRecord {
    pub layer_index: usize,
    pub len_before: usize,
    pub len_after: usize,
    pub visual_before: usize,
    pub visual_after: usize,
    /// Attention + FFN multiply-adds for this layer's forward pass.
    pub layer_madds: u64,
    /// Everything the sparsification hook added on top.
    pub hook_madds: u64,
    pub stage_madds: StageMadds,
    pub plan: Option<SparsifyPlan>,
    pub view: Option<LayerAttentionView>,
}

#[derive(Clone, Debug)]
pub struct RunTrace {
    pub model_config: ModelConfig,
    pub sparsify_config: Option<SparsifyConfig>,
    pub backend: AttentionBackend,
    pub pre_len: usize,
    pub initial_visual_len: usize,
    pub question_len: usize,
    pub visual_range: std::ops::Range<usize>,
    pub rater: Option<RaterSet>,
    /// Original sequence positions of the rating rows.
    pub rater_positions: Vec<usize>,
    pub rater_selection_madds: u64,
    pub layers: Vec<LayerRecord>,
    pub final_hidden: RealMatrix,
    pub final_positions: Vec<usize>,
    pub counter: OpCounter,
    /// Wall-clock time of this prefill (monotonic clock around the layer
    /// loop, embedding included). Everything else in the trace is
    /// deterministic; this field is not.
    pub wall_time: std::time::Duration,
    pub checksum: u64,
}

impl RunTrace {
    pub fn final_visual_count(&self) -> usize {
        self.final_positions
            .iter()
            .filter(|p| self.visual_range.contains(p))
            .count()
    }

    pub fn final_text_count(&self) -> usize {
        self.final_positions.len() - self.final_visual_count()
    }

    pub fn plans(&self) -> impl Iterator<Item = &SparsifyPlan> {
        self.layers.iter().filter_map(|l| l.plan.as_ref())
    }
}

/// Convenience: build the model and run one prefill.
pub fn run_prefill(
    config: &ModelConfig,
    seq: &TokenSequence,
    options: &PrefillOptions,
    counter: &mut OpCounter,
) -> Result<RunTrace, PipelineError> {
    let model = build_model(config)?;
    prefill(&model, seq, options, counter)
}

/// Run all decoder layers over the sequence, applying the sparsification hook
/// after each active layer. Text positions are never pruned.
pub fn prefill(
    model: &DecoderModel,
    seq: &TokenSequence,
    options: &PrefillOptions,
    counter: &mut OpCounter,
) -> Result<RunTrace, PipelineError> {
    let started = std::time::Instant::now();
    let embedded = embed_sequence(model, seq, counter)?;
    let visual_range = seq.visual_range();
    let question_range = seq.question_range();

    // Stage (a): pick the raters once, on the pre-positional embeddings.
    let mut rater = None;
    let mut rater_positions = Vec::new();
    let mut rater_selection_madds = 0;
    if let Some(cfg) = &options.sparsify {
        if cfg.enabled {
            let visual_rows: Vec<usize> = visual_range.clone().collect();
            let question_rows: Vec<usize> = question_range.clone().collect();
            let h_v = embedded.select_rows(&visual_rows);
            let h_q = embedded.select_rows(&question_rows);
            let before = counter.multiply_adds;
            let scores = rater_scores(&h_v, &h_q, cfg.rater_softmax_axis, counter)?;
            rater_selection_madds = counter.multiply_adds - before;
            let set = select_raters(&scores);
            rater_positions = match cfg.rater_mode {
                RaterMode::Selected => set
                    .selected
                    .iter()
                    .map(|&i| question_range.start + i)
                    .collect(),
                RaterMode::AllText => question_range.clone().collect(),
            };
            rater = Some(set);
        }
    }

    // Positional terms are indexed by original position ids, so surviving
    // tokens keep their offsets after pruning.
    let mut hidden = embedded;
    for i in 0..hidden.rows() {
        let pos = model.positional_embedding(i);
        for (h, p) in hidden.row_mut(i).iter_mut().zip(&pos) {
            *h += p;
        }
    }
    let mut positions: Vec<usize> = (0..hidden.rows()).collect();

    let active_layers: Vec<usize> = (0..model.config.num_layers)
        .filter(|&l| {
            options
                .sparsify
                .as_ref()
                .is_some_and(|c| c.layer_is_active(l))
        })
        .collect();

    let mut layers = Vec::with_capacity(model.config.num_layers);
    for layer_index in 0..model.config.num_layers {
        let len_before = hidden.rows();
        let visual_before = positions
            .iter()
            .filter(|p| visual_range.contains(p))
            .count();
        let hook_active = active_layers.contains(&layer_index) && visual_before > 0;

        let score_request = if hook_active {
            let cfg = options
                .sparsify
                .as_ref()
                .expect("hook active implies config");
            let needs_probs = matches!(options.backend, AttentionBackend::Blockwise { .. })
                || cfg.head_mode == HeadMode::Max;
            if needs_probs {
                let rater_rows: Vec<usize> = rater_positions
                    .iter()
                    .map(|p| {
                        positions
                            .binary_search(p)
                            .expect("text rows always survive")
                    })
                    .collect();
                Some(ScoreRequest {
                    rater_rows,
                    head_mode: cfg.head_mode,
                })
            } else {
                None
            }
        } else {
            None
        };

        let before_layer = counter.multiply_adds;
        let view = forward_layer(
            model,
            layer_index,
            &hidden,
            &positions,
            options.backend,
            score_request.as_ref(),
            counter,
        )?;
        let layer_madds = counter.multiply_adds - before_layer;

        let stored_view = match options.trace_detail {
            TraceDetail::Full => Some(view.clone()),
            TraceDetail::Decisions => None,
        };

        let mut record = LayerRecord {
            layer_index,
            len_before,
            len_after: len_before,
            visual_before,
            visual_after: visual_before,
            layer_madds,
            hook_madds: 0,
            stage_madds: StageMadds::default(),
            plan: None,
            view: stored_view,
        };

        if hook_active {
            let cfg = options
                .sparsify
                .as_ref()
                .expect("hook active implies config");
            let remaining = active_layers.iter().filter(|&&l| l >= layer_index).count();
            let before_hook = counter.multiply_adds;
            let outcome = apply_hook(
                model,
                cfg,
                &view,
                &positions,
                &rater_positions,
                &visual_range,
                remaining,
                counter,
                &mut record.stage_madds,
            )?;
            record.hook_madds = counter.multiply_adds - before_hook;
            match outcome {
                HookOutcome::Skip(plan) => {
                    record.plan = Some(plan);
                    hidden = view.hidden;
                }
                HookOutcome::Pruned {
                    plan,
                    new_hidden,
                    new_positions,
                } => {
                    record.plan = Some(plan);
                    hidden = new_hidden;
                    positions = new_positions;
                }
            }
        } else {
            hidden = view.hidden;
        }

        record.len_after = hidden.rows();
        record.visual_after = positions
            .iter()
            .filter(|p| visual_range.contains(p))
            .count();
        layers.push(record);
    }

    let mut trace = RunTrace {
        model_config: model.config.clone(),
        sparsify_config: options.sparsify.clone(),
        backend: options.backend,
        pre_len: seq.pre_text_ids.len(),
        initial_visual_len: seq.visual_len(),
        question_len: seq.question_len(),
        visual_range,
        rater,
        rater_positions,
        rater_selection_madds,
        layers,
        final_hidden: hidden,
        final_positions: positions,
        counter: counter.snapshot(),
        wall_time: started.elapsed(),
        checksum: 0,
    };
    trace.checksum = decision_checksum(&trace);
    Ok(trace)
}

enum HookOutcome {
    Skip(SparsifyPlan),
    Pruned {
        plan: SparsifyPlan,
        new_hidden: RealMatrix,
        new_positions: Vec<usize>,
    },
}

#[allow(clippy::too_many_arguments)]
fn apply_hook(
    model: &DecoderModel,
    cfg: &SparsifyConfig,
    view: &LayerAttentionView,
    positions: &[usize],
    rater_positions: &[usize],
    visual_range: &std::ops::Range<usize>,
    active_layers_remaining: usize,
    counter: &mut OpCounter,
    stages: &mut StageMadds,
) -> Result<HookOutcome, PipelineError> {
    let visual_positions: Vec<usize> = positions
        .iter()
        .copied()
        .filter(|p| visual_range.contains(p))
        .collect();
    let l_v = visual_positions.len();
    let l_t = rater_positions.len();
    let d = model.config.hidden_dim;

    let priority = build_priority(view, positions, rater_positions, &visual_positions)?;

    // Rank-based level adaptation. The rank stage is costed analytically:
    // the decomposition work is modeled, not iterated, by the counter.
    let before = counter.multiply_adds;
    counter.add_multiply_adds((l_t * l_v * l_t.min(l_v)) as u64);
    let (rank, adaptive_n) = deletion_count(&priority, cfg.lambda, cfg.rank_rel_tol)?;
    stages.rank = counter.multiply_adds - before;

    let n = budget_schedule(cfg, l_v, active_layers_remaining, adaptive_n)?;
    if n == 0 {
        return Ok(HookOutcome::Skip(SparsifyPlan::skipped(
            view.layer_index,
            rank,
            visual_positions,
        )));
    }

    let before = counter.multiply_adds;
    let sig = significance(&priority, counter)?;
    stages.significance = counter.multiply_adds - before;

    let (pruned, retained) = prune(&sig, &visual_positions, n)?;

    // Recycle the most significant fraction of what was just pruned.
    let index_of = |position: usize| {
        positions
            .binary_search(&position)
            .expect("position present")
    };
    let pruned_rows: Vec<usize> = pruned.iter().map(|&p| index_of(p)).collect();
    let pruned_states = view.hidden.select_rows(&pruned_rows);
    let sig_of = |position: usize| {
        let slot = visual_positions
            .binary_search(&position)
            .expect("pruned position is visual");
        sig[slot]
    };
    let pruned_sig: Vec<f64> = pruned.iter().map(|&p| sig_of(p)).collect();
    let (pool, pool_positions) = recycle_pool(&pruned_states, &pruned_sig, &pruned, cfg.tau);
    let l_r = pool.rows();

    let before = counter.multiply_adds;
    let (reconstructed, center_positions) = if l_r == 0 {
        (RealMatrix::zeros(0, d), Vec::new())
    } else {
        let (rho, delta) = if l_r >= 2 {
            let rho = local_density(&pool, cfg.knn_k, counter)?;
            let delta = distance_indicator(&pool, &rho);
            counter.add_multiply_adds((l_r * l_r * 2 * d) as u64); // indicator stage
            counter.add_multiply_adds(l_r as u64); // center selection
            (rho, delta)
        } else {
            // Single-token pool: it is its own center; charge the stage's
            // closed-form cost.
            counter.add_multiply_adds((l_r * (3 * l_r - 1) * 2 * d + l_r) as u64);
            (vec![1.0], vec![0.0])
        };
        let model_c = cluster(&pool, &rho, &delta, cfg.theta);
        stages.aggregation = counter.multiply_adds - before;

        let before_recon = counter.multiply_adds;
        let (tokens, centers) = reconstruct(&pool, &model_c, counter);
        stages.reconstruction = counter.multiply_adds - before_recon;
        let center_positions: Vec<usize> = centers.iter().map(|&c| pool_positions[c]).collect();
        (tokens, center_positions)
    };
    if l_r == 0 {
        stages.aggregation = counter.multiply_adds - before;
    }
    let c = reconstructed.rows();

    // Rebuild the sequence: every non-pruned row survives in order, and the
    // reconstructed tokens slot in at their centers' positions.
    let pruned_set: std::collections::BTreeSet<usize> = pruned.iter().copied().collect();
    let mut merged: Vec<(usize, Vec<f64>)> = Vec::with_capacity(positions.len() - n + c);
    for (row, &pos) in positions.iter().enumerate() {
        if !pruned_set.contains(&pos) {
            merged.push((pos, view.hidden.row(row).to_vec()));
        }
    }
    for (slot, &pos) in center_positions.iter().enumerate() {
        merged.push((pos, reconstructed.row(slot).to_vec()));
    }
    merged.sort_by_key(|(pos, _)| *pos);

    let mut new_hidden = RealMatrix::zeros(merged.len(), d);
    let mut new_positions = Vec::with_capacity(merged.len());
    for (row, (pos, data)) in merged.into_iter().enumerate() {
        new_hidden.row_mut(row).copy_from_slice(&data);
        new_positions.push(pos);
    }

    let mut recycled = pool_positions;
    recycled.sort_unstable();
    let mut reconstructed_positions = center_positions;
    reconstructed_positions.sort_unstable();

    let plan = SparsifyPlan {
        layer_index: view.layer_index,
        skipped: false,
        rank_of_p: rank,
        deletion_count: n,
        pool_size: l_r,
        reconstructed_count: c,
        pruned,
        retained,
        recycled,
        reconstructed_positions,
        significance: cfg.emit_significance.then_some(sig),
    };
    Ok(HookOutcome::Pruned {
        plan,
        new_hidden,
        new_positions,
    })
}

/// Assemble the priority matrix from whatever evidence the backend produced:
/// the mean attention map (dense) or the extracted rater rows (block-wise or
/// max-over-heads).
fn build_priority(
    view: &LayerAttentionView,
    positions: &[usize],
    rater_positions: &[usize],
    visual_positions: &[usize],
) -> Result<PriorityMatrix, PipelineError> {
    if let Some(probs) = &view.rater_probs {
        let mut matrix = RealMatrix::zeros(rater_positions.len(), visual_positions.len());
        for r in 0..rater_positions.len() {
            for (c, &pos) in visual_positions.iter().enumerate() {
                let col = positions
                    .binary_search(&pos)
                    .expect("visual position present");
                matrix.set(r, c, probs.get(r, col));
            }
        }
        return Ok(PriorityMatrix {
            matrix,
            rater_positions: rater_positions.to_vec(),
            visual_positions: visual_positions.to_vec(),
        });
    }
    Ok(slice_priority(view, rater_positions, visual_positions)?)
}

/// FNV-1a over the decision structure: rater positions, per-layer plans, and
/// final positions. Floats are deliberately excluded so dense and block-wise
/// backends that make identical decisions hash identically.
pub fn decision_checksum(trace: &RunTrace) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    let feed_u64 = |hash: &mut u64, v: u64| {
        for byte in v.to_le_bytes() {
            *hash ^= byte as u64;
            *hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
        }
    };
    for &p in &trace.rater_positions {
        feed_u64(&mut hash, p as u64);
    }
    for record in &trace.layers {
        feed_u64(&mut hash, record.layer_index as u64);
        match &record.plan {
            None => feed_u64(&mut hash, u64::MAX),
            Some(plan) => {
                feed_u64(&mut hash, plan.skipped as u64);
                feed_u64(&mut hash, plan.rank_of_p as u64);
                feed_u64(&mut hash, plan.deletion_count as u64);
                feed_u64(&mut hash, plan.pool_size as u64);
                feed_u64(&mut hash, plan.reconstructed_count as u64);
                for set in [&plan.pruned, &plan.recycled, &plan.reconstructed_positions] {
                    feed_u64(&mut hash, set.len() as u64);
                    for &p in set {
                        feed_u64(&mut hash, p as u64);
                    }
                }
            }
        }
    }
    for &p in &trace.final_positions {
        feed_u64(&mut hash, p as u64);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShift64;

    fn test_config(seed: u64) -> ModelConfig {
        ModelConfig {
            num_layers: 4,
            num_heads: 2,
            hidden_dim: 16,
            ffn_dim: 16,
            vocab_size: 100,
            seed,
        }
    }

    fn test_sequence(
        seed: u64,
        config: &ModelConfig,
        l_v: usize,
        pre: usize,
        q: usize,
    ) -> TokenSequence {
        let mut rng = XorShift64::new(seed);
        let d = config.hidden_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let visual = RealMatrix::from_vec(
            l_v,
            d,
            (0..l_v * d).map(|_| rng.next_symmetric(scale)).collect(),
        )
        .unwrap();
        let pre_ids = (0..pre)
            .map(|_| rng.next_below(config.vocab_size as u64) as u32)
            .collect();
        let post_ids = (0..q)
            .map(|_| rng.next_below(config.vocab_size as u64) as u32)
            .collect();
        TokenSequence::new(pre_ids, visual, post_ids).unwrap()
    }

    #[test]
    fn disabled_hooks_keep_length_constant() {
        let config = test_config(1);
        let seq = test_sequence(2, &config, 12, 2, 4);
        let mut c = OpCounter::new();
        let trace = run_prefill(&config, &seq, &PrefillOptions::default(), &mut c).unwrap();
        for record in &trace.layers {
            assert_eq!(record.len_before, seq.len());
            assert_eq!(record.len_after, seq.len());
        }
        assert_eq!(trace.final_positions.len(), seq.len());
    }

    #[test]
    fn text_positions_always_survive() {
        let config = test_config(3);
        let seq = test_sequence(4, &config, 16, 3, 5);
        let mut c = OpCounter::new();
        let options = PrefillOptions {
            sparsify: Some(SparsifyConfig::default()),
            ..Default::default()
        };
        let trace = run_prefill(&config, &seq, &options, &mut c).unwrap();
        let visual = seq.visual_range();
        for p in 0..seq.len() {
            if !visual.contains(&p) {
                assert!(
                    trace.final_positions.contains(&p),
                    "text position {p} missing"
                );
            }
        }
        assert!(trace.final_visual_count() <= seq.visual_len());
    }

    #[test]
    fn token_count_never_grows() {
        for seed in 0..5 {
            let config = test_config(seed);
            let seq = test_sequence(seed + 100, &config, 14, 2, 6);
            let mut c = OpCounter::new();
            let options = PrefillOptions {
                sparsify: Some(SparsifyConfig::default()),
                ..Default::default()
            };
            let trace = run_prefill(&config, &seq, &options, &mut c).unwrap();
            let mut len = seq.len();
            for record in &trace.layers {
                assert!(record.len_after <= record.len_before);
                assert_eq!(record.len_before, len);
                len = record.len_after;
            }
        }
    }

    #[test]
    fn prefill_is_deterministic() {
        let config = test_config(7);
        let seq = test_sequence(8, &config, 10, 2, 4);
        let options = PrefillOptions {
            sparsify: Some(SparsifyConfig::default()),
            trace_detail: TraceDetail::Full,
            ..Default::default()
        };
        let mut c1 = OpCounter::new();
        let t1 = run_prefill(&config, &seq, &options, &mut c1).unwrap();
        let mut c2 = OpCounter::new();
        let t2 = run_prefill(&config, &seq, &options, &mut c2).unwrap();
        assert_eq!(t1.checksum, t2.checksum);
        assert_eq!(t1.final_hidden, t2.final_hidden);
        assert_eq!(t1.final_positions, t2.final_positions);
        assert_eq!(c1, c2);
    }

    #[test]
    fn stored_attention_rows_are_stochastic_and_causal() {
        let config = test_config(9);
        let seq = test_sequence(10, &config, 8, 1, 3);
        let options = PrefillOptions {
            sparsify: Some(SparsifyConfig::default()),
            trace_detail: TraceDetail::Full,
            ..Default::default()
        };
        let mut c = OpCounter::new();
        let trace = run_prefill(&config, &seq, &options, &mut c).unwrap();
        for record in &trace.layers {
            let view = record.view.as_ref().unwrap();
            let logits = view.logits.as_ref().unwrap();
            for i in 0..logits.rows() {
                let sum: f64 = logits.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                for j in (i + 1)..logits.cols() {
                    assert_eq!(logits.get(i, j), 0.0);
                }
            }
            // Positions strictly increasing.
            for w in view.position_ids.windows(2) {
                assert!(w[0] < w[1]);
            }
        }
    }

    #[test]
    fn disabled_run_layer_madds_match_closed_form() {
        let config = ModelConfig {
            num_layers: 3,
            num_heads: 2,
            hidden_dim: 16,
            ffn_dim: 24,
            vocab_size: 100,
            seed: 5,
        };
        let seq = test_sequence(6, &config, 9, 2, 4);
        let mut c = OpCounter::new();
        let trace = run_prefill(&config, &seq, &PrefillOptions::default(), &mut c).unwrap();
        let l = seq.len() as u64;
        let d = 16u64;
        let ff = 24u64;
        let want = 4 * l * d * d + 2 * l * l * d + 2 * l * d * ff;
        for record in &trace.layers {
            assert_eq!(record.layer_madds, want, "layer {}", record.layer_index);
            assert_eq!(record.hook_madds, 0);
        }
    }

    #[test]
    fn deletion_counts_respect_rank_bounds_on_real_runs() {
        // With lambda 1 and no budget, every non-skipped layer's deletion
        // count sits between the rank bounds implied by the priority slice
        // shape: l_v - raters <= n <= l_v - 1.
        for seed in 0..6u64 {
            let config = test_config(seed + 40);
            let seq = test_sequence(seed + 50, &config, 22, 2, 7);
            let options = PrefillOptions {
                sparsify: Some(SparsifyConfig::default()),
                ..Default::default()
            };
            let mut c = OpCounter::new();
            let trace = run_prefill(&config, &seq, &options, &mut c).unwrap();
            let raters = trace.rater_positions.len();
            for (record, plan) in trace.layers.iter().filter_map(|r| r.plan.as_ref().map(|p| (r, p))) {
                let l_v = record.visual_before;
                assert!(plan.rank_of_p <= raters.min(l_v), "seed {seed}");
                if plan.skipped {
                    continue;
                }
                assert!(plan.deletion_count <= l_v - 1, "seed {seed}");
                if raters < l_v {
                    assert!(
                        plan.deletion_count >= l_v - raters,
                        "seed {seed} layer {}: n {} below rank bound {}",
                        plan.layer_index,
                        plan.deletion_count,
                        l_v - raters
                    );
                }
            }
        }
    }

    #[test]
    fn head_max_mode_agrees_across_backends() {
        let config = test_config(15);
        let seq = test_sequence(16, &config, 18, 2, 6);
        let sparsify = SparsifyConfig {
            head_mode: crate::sparsify::HeadMode::Max,
            ..Default::default()
        };
        let mut c1 = OpCounter::new();
        let dense = run_prefill(
            &config,
            &seq,
            &PrefillOptions {
                sparsify: Some(sparsify.clone()),
                backend: AttentionBackend::Dense,
                trace_detail: TraceDetail::Decisions,
            },
            &mut c1,
        )
        .unwrap();
        let mut c2 = OpCounter::new();
        let block = run_prefill(
            &config,
            &seq,
            &PrefillOptions {
                sparsify: Some(sparsify),
                backend: AttentionBackend::Blockwise { block_size: 5 },
                trace_detail: TraceDetail::Decisions,
            },
            &mut c2,
        )
        .unwrap();
        assert_eq!(dense.checksum, block.checksum);
        assert!(dense.plans().any(|p| !p.skipped));
    }

    #[test]
    fn all_text_mode_rates_with_every_question_token() {
        let config = test_config(17);
        let seq = test_sequence(18, &config, 10, 3, 5);
        let sparsify = SparsifyConfig {
            rater_mode: crate::sparsify::RaterMode::AllText,
            ..Default::default()
        };
        let mut c = OpCounter::new();
        let trace = run_prefill(
            &config,
            &seq,
            &PrefillOptions {
                sparsify: Some(sparsify),
                ..Default::default()
            },
            &mut c,
        )
        .unwrap();
        let want: Vec<usize> = seq.question_range().collect();
        assert_eq!(trace.rater_positions, want);
    }

    #[test]
    fn monotone_survival_of_retained_sets() {
        let config = test_config(11);
        let seq = test_sequence(12, &config, 20, 2, 6);
        let options = PrefillOptions {
            sparsify: Some(SparsifyConfig::default()),
            ..Default::default()
        };
        let mut c = OpCounter::new();
        let trace = run_prefill(&config, &seq, &options, &mut c).unwrap();
        let mut alive: std::collections::BTreeSet<usize> = seq.visual_range().collect();
        for plan in trace.plans() {
            if plan.skipped {
                continue;
            }
            for p in &plan.retained {
                assert!(alive.contains(p), "retained {p} was not alive");
            }
            alive = plan.retained.iter().copied().collect();
            alive.extend(plan.reconstructed_positions.iter().copied());
        }
        let final_visual: std::collections::BTreeSet<usize> = trace
            .final_positions
            .iter()
            .copied()
            .filter(|p| trace.visual_range.contains(p))
            .collect();
        assert_eq!(final_visual, alive);
    }

    #[test]
    fn plan_counts_are_consistent() {
        let config = test_config(13);
        let seq = test_sequence(14, &config, 24, 2, 8);
        let options = PrefillOptions {
            sparsify: Some(SparsifyConfig::default()),
            ..Default::default()
        };
        let mut c = OpCounter::new();
        let trace = run_prefill(&config, &seq, &options, &mut c).unwrap();
        let mut pruned_any = false;
        for plan in trace.plans() {
            if plan.skipped {
                assert_eq!(plan.deletion_count, 0);
                assert!(plan.pruned.is_empty());
                continue;
            }
            pruned_any = true;
            assert_eq!(plan.pruned.len(), plan.deletion_count);
            assert_eq!(
                plan.pool_size,
                crate::recycle::pool_size(0.25, plan.deletion_count).min(plan.deletion_count)
            );
            assert!(plan.recycled.iter().all(|p| plan.pruned.contains(p)));
            assert_eq!(plan.reconstructed_positions.len(), plan.reconstructed_count);
        }
        assert!(pruned_any, "expected at least one pruning layer");
    }
}
