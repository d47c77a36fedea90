//! Deterministic toy multimodal decoder.
//!
//! Weights come from a seeded xorshift64* stream scaled to +/-1/sqrt(D), so a
//! config builds bit-identical models on every platform. Layers are causal
//! multi-head self-attention plus a two-layer FFN, both with residual
//! connections and no normalization; the model is untrained on purpose — the
//! pipeline's contracts are about shapes, decisions, and counts, not answer
//! quality.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flash::{blockwise_attention_with_stats, rater_rows_probs, BlockSpec, FlashError};
use crate::numerics::{matmul, softmax_row_in_place, NumericsError, OpCounter, RealMatrix};
use crate::rng::{substream, XorShift64};
use crate::sparsify::HeadMode;

const STREAM_EMBEDDING: u64 = 1;
const STREAM_VISUAL_PROJ: u64 = 2;
const STREAM_LAYER: u64 = 3;
const STREAM_POSITION: u64 = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {field}: {message}")]
    InvalidConfig {
        field: &'static str,
        message: String,
    },
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenIdOutOfRange { id: u32, vocab: usize },
    #[error("invalid token sequence: {0}")]
    BadSequence(String),
    #[error("visual embedding width {got} does not match hidden dim {expected}")]
    VisualDimMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Flash(#[from] FlashError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    /// FFN intermediate width. Defaults to `hidden_dim`, which is also what
    /// the analytic reduction formula assumes.
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            num_heads: 4,
            hidden_dim: 64,
            ffn_dim: 64,
            vocab_size: 1000,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(ModelError::InvalidConfig {
                    field,
                    message: "must be at least 1".into(),
                });
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(ModelError::InvalidConfig {
                field: "hidden_dim",
                message: format!(
                    "must be divisible by num_heads ({} % {} != 0)",
                    self.hidden_dim, self.num_heads
                ),
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Mixed text/visual prompt. Layout: pre-text block, contiguous visual block,
/// question block. The question tokens are the rater candidates; the pre-text
/// block is exempt from both rating and pruning.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub pre_text_ids: Vec<u32>,
    pub visual_embeddings: RealMatrix,
    pub post_text_ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(
        pre_text_ids: Vec<u32>,
        visual_embeddings: RealMatrix,
        post_text_ids: Vec<u32>,
    ) -> Result<Self, ModelError> {
        if visual_embeddings.rows() == 0 {
            return Err(ModelError::BadSequence(
                "need at least one visual token".into(),
            ));
        }
        if post_text_ids.is_empty() {
            return Err(ModelError::BadSequence(
                "need at least one question token".into(),
            ));
        }
        Ok(Self {
            pre_text_ids,
            visual_embeddings,
            post_text_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.pre_text_ids.len() + self.visual_embeddings.rows() + self.post_text_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn visual_len(&self) -> usize {
        self.visual_embeddings.rows()
    }

    pub fn question_len(&self) -> usize {
        self.post_text_ids.len()
    }

    /// Positions of the visual block in the original sequence.
    pub fn visual_range(&self) -> std::ops::Range<usize> {
        let start = self.pre_text_ids.len();
        start..start + self.visual_embeddings.rows()
    }

    /// Positions of the question block in the original sequence.
    pub fn question_range(&self) -> std::ops::Range<usize> {
        let start = self.pre_text_ids.len() + self.visual_embeddings.rows();
        start..start + self.post_text_ids.len()
    }
}

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub wq: RealMatrix,
    pub wk: RealMatrix,
    pub wv: RealMatrix,
    pub wo: RealMatrix,
    pub w_ff1: RealMatrix,
    pub w_ff2: RealMatrix,
}

/// Immutable decoder: embedding table, visual projection, per-layer weights.
#[derive(Clone, Debug)]
pub struct DecoderModel {
    pub config: ModelConfig,
    embedding: RealMatrix,
    visual_proj: RealMatrix,
    layers: Vec<LayerWeights>,
}

fn seeded_matrix(seed: u64, rows: usize, cols: usize, scale: f64) -> RealMatrix {
    let mut rng = XorShift64::new(seed);
    let data = (0..rows * cols)
        .map(|_| rng.next_symmetric(scale))
        .collect();
    RealMatrix::from_vec(rows, cols, data).expect("shape matches generated data")
}

/// Build all weights from the config seed. Same config, same bits.
pub fn build_model(config: &ModelConfig) -> Result<DecoderModel, ModelError> {
    config.validate()?;
    let d = config.hidden_dim;
    let scale = 1.0 / (d as f64).sqrt();
    let embedding = seeded_matrix(
        substream(config.seed, STREAM_EMBEDDING, 0),
        config.vocab_size,
        d,
        scale,
    );
    let visual_proj = seeded_matrix(substream(config.seed, STREAM_VISUAL_PROJ, 0), d, d, scale);
    let layers = (0..config.num_layers)
        .map(|l| {
            let base = substream(config.seed, STREAM_LAYER, l as u64);
            LayerWeights {
                wq: seeded_matrix(substream(base, 0, 0), d, d, scale),
                wk: seeded_matrix(substream(base, 1, 0), d, d, scale),
                wv: seeded_matrix(substream(base, 2, 0), d, d, scale),
                wo: seeded_matrix(substream(base, 3, 0), d, d, scale),
                w_ff1: seeded_matrix(substream(base, 4, 0), d, config.ffn_dim, scale),
                w_ff2: seeded_matrix(substream(base, 5, 0), config.ffn_dim, d, scale),
            }
        })
        .collect();
    Ok(DecoderModel {
        config: config.clone(),
        embedding,
        visual_proj,
        layers,
    })
}

impl DecoderModel {
    pub fn layer(&self, index: usize) -> &LayerWeights {
        &self.layers[index]
    }

    pub fn visual_projection(&self) -> &RealMatrix {
        &self.visual_proj
    }

    /// Additive positional embedding for an original position id.
    pub fn positional_embedding(&self, position: usize) -> Vec<f64> {
        let d = self.config.hidden_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let mut rng = XorShift64::new(substream(
            self.config.seed,
            STREAM_POSITION,
            position as u64,
        ));
        (0..d).map(|_| rng.next_symmetric(scale)).collect()
    }

    /// FNV-1a over all weight bits; used to check build determinism.
    pub fn weight_checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |m: &RealMatrix| {
            for v in m.data() {
                for byte in v.to_bits().to_le_bytes() {
                    hash ^= byte as u64;
                    hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
                }
            }
        };
        feed(&self.embedding);
        feed(&self.visual_proj);
        for layer in &self.layers {
            for m in [
                &layer.wq,
                &layer.wk,
                &layer.wv,
                &layer.wo,
                &layer.w_ff1,
                &layer.w_ff2,
            ] {
                feed(m);
            }
        }
        hash
    }
}

/// Embed a sequence: text rows from the embedding table, visual rows through
/// the visual projection. No positional terms here; the prefill loop adds
/// them from original position ids.
pub fn embed_sequence(
    model: &DecoderModel,
    seq: &TokenSequence,
    counter: &mut OpCounter,
) -> Result<RealMatrix, ModelError> {
    let d = model.config.hidden_dim;
    if seq.visual_embeddings.cols() != d {
        return Err(ModelError::VisualDimMismatch {
            got: seq.visual_embeddings.cols(),
            expected: d,
        });
    }
    let mut out = RealMatrix::zeros(seq.len(), d);
    let mut row = 0;
    for &id in &seq.pre_text_ids {
        if id as usize >= model.config.vocab_size {
            return Err(ModelError::TokenIdOutOfRange {
                id,
                vocab: model.config.vocab_size,
            });
        }
        out.row_mut(row)
            .copy_from_slice(model.embedding.row(id as usize));
        row += 1;
    }
    let projected = matmul(
        &seq.visual_embeddings,
        &model.visual_proj.transpose(),
        counter,
    )?;
    for v in 0..projected.rows() {
        out.row_mut(row).copy_from_slice(projected.row(v));
        row += 1;
    }
    for &id in &seq.post_text_ids {
        if id as usize >= model.config.vocab_size {
            return Err(ModelError::TokenIdOutOfRange {
                id,
                vocab: model.config.vocab_size,
            });
        }
        out.row_mut(row)
            .copy_from_slice(model.embedding.row(id as usize));
        row += 1;
    }
    Ok(out)
}

/// Attention execution strategy for the prefill.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionBackend {
    Dense,
    Blockwise { block_size: usize },
}

/// Request to expose attention probabilities for specific query rows
/// (current row indices) alongside the forward pass.
#[derive(Clone, Debug)]
pub struct ScoreRequest {
    pub rater_rows: Vec<usize>,
    pub head_mode: HeadMode,
}

/// Per-layer attention summary. `logits` is the head-averaged post-softmax
/// map (dense backend only); `rater_probs` holds the requested rater-row
/// probabilities condensed across heads. `hidden` is the layer output.
#[derive(Clone, Debug)]
pub struct LayerAttentionView {
    pub layer_index: usize,
    pub logits: Option<RealMatrix>,
    pub rater_probs: Option<RealMatrix>,
    pub hidden: RealMatrix,
    pub position_ids: Vec<usize>,
}

fn extract_head(m: &RealMatrix, head: usize, head_dim: usize) -> RealMatrix {
    let start = head * head_dim;
    let mut out = RealMatrix::zeros(m.rows(), head_dim);
    for i in 0..m.rows() {
        out.row_mut(i)
            .copy_from_slice(&m.row(i)[start..start + head_dim]);
    }
    out
}

/// One decoder layer: causal multi-head attention, output projection, then a
/// two-layer ReLU FFN, with residual connections around both.
pub fn forward_layer(
    model: &DecoderModel,
    layer_index: usize,
    hidden: &RealMatrix,
    positions: &[usize],
    backend: AttentionBackend,
    score_request: Option<&ScoreRequest>,
    counter: &mut OpCounter,
) -> Result<LayerAttentionView, ModelError> {
    let weights = model.layer(layer_index);
    let l = hidden.rows();
    let d = model.config.hidden_dim;
    let heads = model.config.num_heads;
    let head_dim = model.config.head_dim();

    let q = matmul(hidden, &weights.wq, counter)?;
    let k = matmul(hidden, &weights.wk, counter)?;
    let v = matmul(hidden, &weights.wv, counter)?;

    let mut concat = RealMatrix::zeros(l, d);
    let mut mean_logits: Option<RealMatrix> = None;
    let mut rater_probs: Option<RealMatrix> = None;

    match backend {
        AttentionBackend::Dense => {
            let mut sum_logits = RealMatrix::zeros(l, l);
            for h in 0..heads {
                let qh = extract_head(&q, h, head_dim);
                let kh = extract_head(&k, h, head_dim);
                let vh = extract_head(&v, h, head_dim);
                let mut scores = matmul(&qh, &kh.transpose(), counter)?;
                let scale = 1.0 / (head_dim as f64).sqrt();
                for i in 0..l {
                    let row = scores.row_mut(i);
                    for (j, s) in row.iter_mut().enumerate() {
                        if j > i {
                            *s = f64::NEG_INFINITY;
                        } else {
                            *s *= scale;
                        }
                    }
                }
                for i in 0..l {
                    softmax_row_in_place(scores.row_mut(i), counter);
                }
                let out_h = matmul(&scores, &vh, counter)?;
                for i in 0..l {
                    concat.row_mut(i)[h * head_dim..(h + 1) * head_dim]
                        .copy_from_slice(out_h.row(i));
                }
                if let Some(req) = score_request {
                    if req.head_mode == HeadMode::Max {
                        let probs = rater_probs.get_or_insert_with(|| {
                            RealMatrix::from_vec(
                                req.rater_rows.len(),
                                l,
                                vec![f64::NEG_INFINITY; req.rater_rows.len() * l],
                            )
                            .expect("shape matches")
                        });
                        for (r, &row) in req.rater_rows.iter().enumerate() {
                            for j in 0..l {
                                let val = scores.get(row, j);
                                if val > probs.get(r, j) {
                                    probs.set(r, j, val);
                                }
                            }
                        }
                    }
                }
                for (acc, &s) in sum_logits.data_mut().iter_mut().zip(scores.data()) {
                    *acc += s;
                }
            }
            for v in sum_logits.data_mut() {
                *v /= heads as f64;
            }
            mean_logits = Some(sum_logits);
        }
        AttentionBackend::Blockwise { block_size } => {
            let spec = BlockSpec::new(block_size)?;
            for h in 0..heads {
                let qh = extract_head(&q, h, head_dim);
                let kh = extract_head(&k, h, head_dim);
                let vh = extract_head(&v, h, head_dim);
                let (out_h, stats) =
                    blockwise_attention_with_stats(&qh, &kh, &vh, spec, true, counter)?;
                for i in 0..l {
                    concat.row_mut(i)[h * head_dim..(h + 1) * head_dim]
                        .copy_from_slice(out_h.row(i));
                }
                if let Some(req) = score_request {
                    let head_probs = rater_rows_probs(
                        &qh,
                        &kh,
                        &req.rater_rows,
                        spec,
                        true,
                        Some(&stats),
                        counter,
                    )?;
                    match (&mut rater_probs, req.head_mode) {
                        (None, _) => rater_probs = Some(head_probs),
                        (Some(acc), HeadMode::Average) => {
                            for (a, &p) in acc.data_mut().iter_mut().zip(head_probs.data()) {
                                *a += p;
                            }
                        }
                        (Some(acc), HeadMode::Max) => {
                            for (a, &p) in acc.data_mut().iter_mut().zip(head_probs.data()) {
                                if p > *a {
                                    *a = p;
                                }
                            }
                        }
                    }
                }
            }
            if let (Some(acc), Some(req)) = (&mut rater_probs, score_request) {
                if req.head_mode == HeadMode::Average {
                    for a in acc.data_mut() {
                        *a /= heads as f64;
                    }
                }
            }
        }
    }

    // Dense + average mode exposes rater rows by slicing the mean map, so
    // both backends hand the caller the same shape of evidence.
    if let (Some(req), Some(mean), None) = (score_request, &mean_logits, &rater_probs) {
        if req.head_mode == HeadMode::Average {
            let mut probs = RealMatrix::zeros(req.rater_rows.len(), l);
            for (r, &row) in req.rater_rows.iter().enumerate() {
                probs.row_mut(r).copy_from_slice(mean.row(row));
            }
            rater_probs = Some(probs);
        }
    }

    let attn_out = matmul(&concat, &weights.wo, counter)?;
    let mut h1 = hidden.clone();
    for (a, &b) in h1.data_mut().iter_mut().zip(attn_out.data()) {
        *a += b;
    }

    let mut ff = matmul(&h1, &weights.w_ff1, counter)?;
    for v in ff.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let ff_out = matmul(&ff, &weights.w_ff2, counter)?;
    let mut h_next = h1;
    for (a, &b) in h_next.data_mut().iter_mut().zip(ff_out.data()) {
        *a += b;
    }

    Ok(LayerAttentionView {
        layer_index,
        logits: mean_logits,
        rater_probs,
        hidden: h_next,
        position_ids: positions.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            hidden_dim: 8,
            ffn_dim: 16,
            vocab_size: 50,
            seed,
        }
    }

    fn sample_sequence(
        rng: &mut XorShift64,
        config: &ModelConfig,
        l_v: usize,
        pre: usize,
        q: usize,
    ) -> TokenSequence {
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
    fn same_config_same_weights() {
        let config = small_config(9);
        let a = build_model(&config).unwrap();
        let b = build_model(&config).unwrap();
        assert_eq!(a.weight_checksum(), b.weight_checksum());
    }

    #[test]
    fn different_seed_different_weights() {
        let a = build_model(&small_config(1)).unwrap();
        let b = build_model(&small_config(2)).unwrap();
        assert_ne!(a.weight_checksum(), b.weight_checksum());
    }

    #[test]
    fn head_dim_arithmetic() {
        let config = ModelConfig {
            hidden_dim: 64,
            num_heads: 4,
            ..small_config(0)
        };
        assert_eq!(config.head_dim(), 16);
    }

    #[test]
    fn config_validation_errors() {
        let bad = ModelConfig {
            hidden_dim: 10,
            num_heads: 4,
            ..small_config(0)
        };
        assert!(matches!(
            bad.validate(),
            Err(ModelError::InvalidConfig {
                field: "hidden_dim",
                ..
            })
        ));
        let zero = ModelConfig {
            num_layers: 0,
            ..small_config(0)
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn zero_visual_row_projects_to_zero() {
        let config = small_config(3);
        let model = build_model(&config).unwrap();
        let mut visual = RealMatrix::zeros(2, config.hidden_dim);
        for j in 0..config.hidden_dim {
            visual.set(1, j, 0.5);
        }
        let seq = TokenSequence::new(vec![1], visual, vec![2]).unwrap();
        let mut c = OpCounter::new();
        let embedded = embed_sequence(&model, &seq, &mut c).unwrap();
        assert!(embedded.row(1).iter().all(|&v| v == 0.0));
        assert!(embedded.row(2).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn duplicate_ids_duplicate_rows() {
        let config = small_config(4);
        let model = build_model(&config).unwrap();
        let mut rng = XorShift64::new(0);
        let seq = sample_sequence(&mut rng, &config, 1, 0, 1);
        let seq = TokenSequence::new(vec![7, 7], seq.visual_embeddings, vec![7]).unwrap();
        let mut c = OpCounter::new();
        let embedded = embed_sequence(&model, &seq, &mut c).unwrap();
        assert_eq!(embedded.row(0), embedded.row(1));
        assert_eq!(embedded.row(0), embedded.row(3));
    }

    #[test]
    fn visual_block_matches_projection_oracle() {
        let config = small_config(5);
        let model = build_model(&config).unwrap();
        let mut rng = XorShift64::new(1);
        let seq = sample_sequence(&mut rng, &config, 3, 2, 2);
        let mut c = OpCounter::new();
        let embedded = embed_sequence(&model, &seq, &mut c).unwrap();
        let w = model.visual_projection();
        for v in 0..3 {
            for out_dim in 0..config.hidden_dim {
                let want: f64 = (0..config.hidden_dim)
                    .map(|k| w.get(out_dim, k) * seq.visual_embeddings.get(v, k))
                    .sum();
                let got = embedded.get(2 + v, out_dim);
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_token_id() {
        let config = small_config(6);
        let model = build_model(&config).unwrap();
        let visual = RealMatrix::zeros(1, config.hidden_dim);
        let seq = TokenSequence::new(vec![], visual, vec![99]).unwrap();
        let mut c = OpCounter::new();
        assert!(matches!(
            embed_sequence(&model, &seq, &mut c),
            Err(ModelError::TokenIdOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let config = small_config(7);
        let model = build_model(&config).unwrap();
        let hidden = RealMatrix::from_vec(1, 8, vec![0.2; 8]).unwrap();
        let mut c = OpCounter::new();
        let view = forward_layer(
            &model,
            0,
            &hidden,
            &[0],
            AttentionBackend::Dense,
            None,
            &mut c,
        )
        .unwrap();
        let logits = view.logits.unwrap();
        assert_eq!(logits.rows(), 1);
        assert_eq!(logits.get(0, 0), 1.0);
    }

    #[test]
    fn causal_mask_zeroes_upper_triangle() {
        let config = small_config(8);
        let model = build_model(&config).unwrap();
        let mut rng = XorShift64::new(2);
        let hidden =
            RealMatrix::from_vec(5, 8, (0..40).map(|_| rng.next_symmetric(1.0)).collect()).unwrap();
        let mut c = OpCounter::new();
        let positions: Vec<usize> = (0..5).collect();
        let view = forward_layer(
            &model,
            0,
            &hidden,
            &positions,
            AttentionBackend::Dense,
            None,
            &mut c,
        )
        .unwrap();
        let logits = view.logits.unwrap();
        for i in 0..5 {
            let row_sum: f64 = logits.row(i).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-9);
            for j in (i + 1)..5 {
                assert_eq!(logits.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn two_token_attention_matches_scalar_oracle() {
        let config = ModelConfig {
            num_heads: 1,
            hidden_dim: 4,
            ffn_dim: 4,
            ..small_config(10)
        };
        let model = build_model(&config).unwrap();
        let mut rng = XorShift64::new(3);
        let hidden =
            RealMatrix::from_vec(2, 4, (0..8).map(|_| rng.next_symmetric(1.0)).collect()).unwrap();
        let mut c = OpCounter::new();
        let view = forward_layer(
            &model,
            0,
            &hidden,
            &[0, 1],
            AttentionBackend::Dense,
            None,
            &mut c,
        )
        .unwrap();
        let logits = view.logits.unwrap();

        let weights = model.layer(0);
        let q = matmul(&hidden, &weights.wq, &mut OpCounter::new()).unwrap();
        let k = matmul(&hidden, &weights.wk, &mut OpCounter::new()).unwrap();
        let scale = 1.0 / 2.0; // 1/sqrt(4)
        let s10: f64 = (0..4).map(|t| q.get(1, t) * k.get(0, t)).sum::<f64>() * scale;
        let s11: f64 = (0..4).map(|t| q.get(1, t) * k.get(1, t)).sum::<f64>() * scale;
        let m = s10.max(s11);
        let (e0, e1) = ((s10 - m).exp(), (s11 - m).exp());
        let total = e0 + e1;
        assert!((logits.get(1, 0) - e0 / total).abs() < 1e-12);
        assert!((logits.get(1, 1) - e1 / total).abs() < 1e-12);
    }

    #[test]
    fn layer_counter_matches_closed_form() {
        let config = ModelConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_dim: 8,
            ffn_dim: 12,
            vocab_size: 10,
            seed: 1,
        };
        let model = build_model(&config).unwrap();
        let mut rng = XorShift64::new(4);
        let l = 6;
        let hidden =
            RealMatrix::from_vec(l, 8, (0..l * 8).map(|_| rng.next_symmetric(1.0)).collect())
                .unwrap();
        let positions: Vec<usize> = (0..l).collect();
        let mut c = OpCounter::new();
        forward_layer(
            &model,
            0,
            &hidden,
            &positions,
            AttentionBackend::Dense,
            None,
            &mut c,
        )
        .unwrap();
        let d = 8u64;
        let ff = 12u64;
        let lu = l as u64;
        let want = 4 * lu * d * d + 2 * lu * lu * d + 2 * lu * d * ff;
        assert_eq!(c.multiply_adds, want);
    }

    #[test]
    fn blockwise_layer_tracks_dense_layer() {
        let config = small_config(11);
        let model = build_model(&config).unwrap();
        let mut rng = XorShift64::new(5);
        let l = 9;
        let hidden =
            RealMatrix::from_vec(l, 8, (0..l * 8).map(|_| rng.next_symmetric(1.0)).collect())
                .unwrap();
        let positions: Vec<usize> = (0..l).collect();
        let mut c = OpCounter::new();
        let dense = forward_layer(
            &model,
            0,
            &hidden,
            &positions,
            AttentionBackend::Dense,
            None,
            &mut c,
        )
        .unwrap();
        let block = forward_layer(
            &model,
            0,
            &hidden,
            &positions,
            AttentionBackend::Blockwise { block_size: 4 },
            None,
            &mut c,
        )
        .unwrap();
        let max_diff = dense
            .hidden
            .data()
            .iter()
            .zip(block.hidden.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-10, "max diff {max_diff}");
        assert!(block.logits.is_none());
    }

    #[test]
    fn rater_probs_agree_across_backends() {
        let config = small_config(12);
        let model = build_model(&config).unwrap();
        let mut rng = XorShift64::new(6);
        let l = 10;
        let hidden =
            RealMatrix::from_vec(l, 8, (0..l * 8).map(|_| rng.next_symmetric(1.0)).collect())
                .unwrap();
        let positions: Vec<usize> = (0..l).collect();
        let req = ScoreRequest {
            rater_rows: vec![7, 9],
            head_mode: HeadMode::Average,
        };
        let mut c = OpCounter::new();
        let dense = forward_layer(
            &model,
            0,
            &hidden,
            &positions,
            AttentionBackend::Dense,
            Some(&req),
            &mut c,
        )
        .unwrap();
        let block = forward_layer(
            &model,
            0,
            &hidden,
            &positions,
            AttentionBackend::Blockwise { block_size: 3 },
            Some(&req),
            &mut c,
        )
        .unwrap();
        let dp = dense.rater_probs.unwrap();
        let bp = block.rater_probs.unwrap();
        for r in 0..2 {
            for j in 0..l {
                assert!((dp.get(r, j) - bp.get(r, j)).abs() < 1e-10);
            }
        }
    }
}
