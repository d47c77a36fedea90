//! Block-wise streaming-softmax attention and rater-mean score extraction.
//!
//! The streaming path tiles the key dimension, keeps a running row maximum
//! and denominator, and rescales the accumulated output when the maximum
//! moves, so no L x L score matrix is ever materialized. A second pass with a
//! uniform weight of 1/n on the selected rater rows recovers the mean
//! attention each key position receives from the raters; its visual slice is
//! exactly the significance vector the dense path computes by slicing the
//! attention matrix.
//!
//! When a query row's visible keys fit inside a single block, the streaming
//! path degenerates to the dense arithmetic (softmax then weighted sum), so a
//! block size of at least the sequence length reproduces dense output bit for
//! bit.

use thiserror::Error;

use crate::numerics::{NumericsError, OpCounter, RealMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlashError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("block size must be at least 1")]
    ZeroBlockSize,
    #[error("rater set is empty")]
    EmptyRaterSet,
    #[error("rater row {row} out of range for sequence length {len}")]
    RaterRowOutOfRange { row: usize, len: usize },
    #[error("top-k of {k} exceeds span length {span}")]
    TopKOutOfRange { k: usize, span: usize },
}

/// Key-dimension tiling. Blocks cover the key axis exactly; the last block
/// may be short.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    block_size: usize,
}

impl BlockSpec {
    pub fn new(block_size: usize) -> Result<Self, FlashError> {
        if block_size == 0 {
            return Err(FlashError::ZeroBlockSize);
        }
        Ok(Self { block_size })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self, len: usize) -> usize {
        len.div_ceil(self.block_size)
    }

    fn block_range(&self, index: usize, len: usize) -> std::ops::Range<usize> {
        let start = index * self.block_size;
        start..((start + self.block_size).min(len))
    }
}

/// Per-query-row running softmax statistics from a streaming pass: the row
/// maximum and the normalizing denominator. A second extraction pass can
/// reuse them instead of re-deriving.
#[derive(Clone, Debug)]
pub struct RowStats {
    pub max: Vec<f64>,
    pub denom: Vec<f64>,
}

/// Peak transient buffer occupancy, recorded by the probed entry points. The
/// score buffer is the only per-block scratch; its peak stays at one block of
/// entries per live row.
#[derive(Clone, Copy, Debug, Default)]
pub struct BufferProbe {
    pub peak_score_elems: usize,
}

impl BufferProbe {
    fn observe(&mut self, len: usize) {
        if len > self.peak_score_elems {
            self.peak_score_elems = len;
        }
    }
}

/// The uniform rater-weight matrix: one column, 1/n at each selected rater
/// row and 0 elsewhere. Multiplying the attention map against it aggregates
/// the rater rows.
pub fn special_v(seq_len: usize, raters: &[usize]) -> Result<RealMatrix, FlashError> {
    if raters.is_empty() {
        return Err(FlashError::EmptyRaterSet);
    }
    let mut v = RealMatrix::zeros(seq_len, 1);
    let w = 1.0 / raters.len() as f64;
    for &r in raters {
        if r >= seq_len {
            return Err(FlashError::RaterRowOutOfRange {
                row: r,
                len: seq_len,
            });
        }
        v.set(r, 0, w);
    }
    Ok(v)
}

fn check_attention_shapes(
    q: &RealMatrix,
    k: &RealMatrix,
    v: &RealMatrix,
    causal: bool,
) -> Result<(), FlashError> {
    if q.cols() != k.cols() || k.rows() != v.rows() || (causal && q.rows() != k.rows()) {
        return Err(FlashError::Numerics(NumericsError::DimensionMismatch {
            left_rows: q.rows(),
            left_cols: q.cols(),
            right_rows: k.rows(),
            right_cols: k.cols(),
        }));
    }
    if q.is_empty() || k.is_empty() {
        return Err(FlashError::Numerics(NumericsError::EmptyMatrix));
    }
    Ok(())
}

/// Streaming block-wise attention: `softmax(q k^T / sqrt(d)) v` under an
/// optional causal mask, computed one key block at a time.
pub fn blockwise_attention(
    q: &RealMatrix,
    k: &RealMatrix,
    v: &RealMatrix,
    spec: BlockSpec,
    causal: bool,
    counter: &mut OpCounter,
) -> Result<RealMatrix, FlashError> {
    let mut probe = BufferProbe::default();
    blockwise_attention_probed(q, k, v, spec, causal, counter, &mut probe).map(|(o, _)| o)
}

/// As [`blockwise_attention`] but also returns the per-row softmax statistics
/// for reuse by an extraction pass.
pub fn blockwise_attention_with_stats(
    q: &RealMatrix,
    k: &RealMatrix,
    v: &RealMatrix,
    spec: BlockSpec,
    causal: bool,
    counter: &mut OpCounter,
) -> Result<(RealMatrix, RowStats), FlashError> {
    let mut probe = BufferProbe::default();
    blockwise_attention_probed(q, k, v, spec, causal, counter, &mut probe)
}

/// Probed variant used by the memory-contract tests.
pub fn blockwise_attention_probed(
    q: &RealMatrix,
    k: &RealMatrix,
    v: &RealMatrix,
    spec: BlockSpec,
    causal: bool,
    counter: &mut OpCounter,
    probe: &mut BufferProbe,
) -> Result<(RealMatrix, RowStats), FlashError> {
    check_attention_shapes(q, k, v, causal)?;
    let l_q = q.rows();
    let l_k = k.rows();
    let d = q.cols();
    let d_out = v.cols();
    let scale = 1.0 / (d as f64).sqrt();

    let mut out = RealMatrix::zeros(l_q, d_out);
    let mut stats = RowStats {
        max: vec![f64::NEG_INFINITY; l_q],
        denom: vec![0.0; l_q],
    };
    let mut scores: Vec<f64> = Vec::with_capacity(spec.block_size.min(l_k));

    for i in 0..l_q {
        let visible = if causal { i + 1 } else { l_k };
        let q_row = q.row(i);

        if visible <= spec.block_size {
            // Single visible block: mirror the dense arithmetic (max-shift,
            // exponentiate in order, normalize, then the weighted sum).
            scores.clear();
            for j in 0..visible {
                scores.push(dot(q_row, k.row(j)) * scale);
            }
            probe.observe(scores.len());
            counter.add_multiply_adds((visible * d) as u64);
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            counter.add_comparisons(scores.len().saturating_sub(1) as u64);
            let mut l = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - m).exp();
                l += *s;
            }
            counter.add_exps(scores.len() as u64);
            let out_row = out.row_mut(i);
            for (j, &e) in scores.iter().enumerate() {
                let p = e / l;
                let v_row = v.row(j);
                for (o, &vv) in out_row.iter_mut().zip(v_row) {
                    *o += p * vv;
                }
            }
            counter.add_multiply_adds((visible * d_out) as u64);
            stats.max[i] = m;
            stats.denom[i] = l;
            continue;
        }

        let mut m = f64::NEG_INFINITY;
        let mut l = 0.0;
        let mut acc = vec![0.0; d_out];
        for b in 0..spec.num_blocks(visible) {
            let range = spec.block_range(b, visible);
            if range.is_empty() {
                continue;
            }
            scores.clear();
            for j in range.clone() {
                scores.push(dot(q_row, k.row(j)) * scale);
            }
            probe.observe(scores.len());
            counter.add_multiply_adds((range.len() * d) as u64);

            let block_max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            counter.add_comparisons(scores.len().saturating_sub(1) as u64);
            let new_max = m.max(block_max);
            let correction = if m == f64::NEG_INFINITY {
                0.0
            } else {
                (m - new_max).exp()
            };
            let mut block_sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - new_max).exp();
                block_sum += *s;
            }
            counter.add_exps(scores.len() as u64);
            l = l * correction + block_sum;
            for a in acc.iter_mut() {
                *a *= correction;
            }
            for (offset, j) in range.enumerate() {
                let p = scores[offset];
                let v_row = v.row(j);
                for (a, &vv) in acc.iter_mut().zip(v_row) {
                    *a += p * vv;
                }
            }
            counter.add_multiply_adds((scores.len() * d_out) as u64);
            m = new_max;
        }
        let out_row = out.row_mut(i);
        for (o, a) in out_row.iter_mut().zip(&acc) {
            *o = a / l;
        }
        stats.max[i] = m;
        stats.denom[i] = l;
    }
    Ok((out, stats))
}

/// Softmax statistics (row max and denominator) for a subset of query rows,
/// derived by streaming over key blocks.
fn subset_row_stats(
    q: &RealMatrix,
    k: &RealMatrix,
    rows: &[usize],
    spec: BlockSpec,
    causal: bool,
    counter: &mut OpCounter,
    probe: &mut BufferProbe,
) -> (Vec<f64>, Vec<f64>) {
    let l_k = k.rows();
    let d = q.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut maxes = Vec::with_capacity(rows.len());
    let mut denoms = Vec::with_capacity(rows.len());
    let mut scores: Vec<f64> = Vec::with_capacity(spec.block_size.min(l_k));
    for &i in rows {
        let visible = if causal { i + 1 } else { l_k };
        let q_row = q.row(i);
        let mut m = f64::NEG_INFINITY;
        let mut l = 0.0;
        for b in 0..spec.num_blocks(visible) {
            let range = spec.block_range(b, visible);
            if range.is_empty() {
                continue;
            }
            scores.clear();
            for j in range {
                scores.push(dot(q_row, k.row(j)) * scale);
            }
            probe.observe(scores.len());
            counter.add_multiply_adds((scores.len() * d) as u64);
            let block_max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let new_max = m.max(block_max);
            let correction = if m == f64::NEG_INFINITY {
                0.0
            } else {
                (m - new_max).exp()
            };
            let mut block_sum = 0.0;
            for &s in scores.iter() {
                block_sum += (s - new_max).exp();
            }
            counter.add_exps(scores.len() as u64);
            l = l * correction + block_sum;
            m = new_max;
        }
        maxes.push(m);
        denoms.push(l);
    }
    (maxes, denoms)
}

/// Mean attention score each key position receives from the selected rater
/// rows: entry `j` is the average over raters `i` of `A[i, j]`. The visual
/// slice of this vector is the significance vector.
///
/// Implemented as the extraction pass with the uniform 1/n rater weight:
/// once each rater row's softmax statistics are known, its normalized
/// probabilities are streamed block by block and accumulated into the output
/// with weight 1/n.
pub fn rater_mean_scores(
    q: &RealMatrix,
    k: &RealMatrix,
    raters: &[usize],
    spec: BlockSpec,
    causal: bool,
    counter: &mut OpCounter,
) -> Result<Vec<f64>, FlashError> {
    rater_mean_scores_probed(
        q,
        k,
        raters,
        spec,
        causal,
        None,
        counter,
        &mut BufferProbe::default(),
    )
}

/// As [`rater_mean_scores`], optionally reusing row statistics from a prior
/// streaming pass and recording buffer occupancy.
#[allow(clippy::too_many_arguments)]
pub fn rater_mean_scores_probed(
    q: &RealMatrix,
    k: &RealMatrix,
    raters: &[usize],
    spec: BlockSpec,
    causal: bool,
    stats: Option<&RowStats>,
    counter: &mut OpCounter,
    probe: &mut BufferProbe,
) -> Result<Vec<f64>, FlashError> {
    let weights = special_v(q.rows(), raters)?;
    check_attention_shapes(q, k, q, causal)?;
    let l_k = k.rows();
    let d = q.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let n_inv = weights.get(raters[0], 0);

    let (maxes, denoms) = match stats {
        Some(s) => (
            raters.iter().map(|&i| s.max[i]).collect::<Vec<_>>(),
            raters.iter().map(|&i| s.denom[i]).collect::<Vec<_>>(),
        ),
        None => subset_row_stats(q, k, raters, spec, causal, counter, probe),
    };

    let mut out = vec![0.0; l_k];
    let mut scores: Vec<f64> = Vec::with_capacity(spec.block_size.min(l_k));
    for (idx, &i) in raters.iter().enumerate() {
        let visible = if causal { i + 1 } else { l_k };
        let q_row = q.row(i);
        let (m, l) = (maxes[idx], denoms[idx]);
        for b in 0..spec.num_blocks(visible) {
            let range = spec.block_range(b, visible);
            if range.is_empty() {
                continue;
            }
            scores.clear();
            for j in range.clone() {
                scores.push(dot(q_row, k.row(j)) * scale);
            }
            probe.observe(scores.len());
            counter.add_multiply_adds((scores.len() * d) as u64);
            counter.add_exps(scores.len() as u64);
            for (offset, j) in range.enumerate() {
                out[j] += n_inv * ((scores[offset] - m).exp() / l);
            }
        }
    }
    Ok(out)
}

/// Normalized attention probabilities for a subset of query rows, as a dense
/// `rows.len() x L_k` matrix. Used by the block-wise backend to expose the
/// priority slice without materializing the full map.
pub fn rater_rows_probs(
    q: &RealMatrix,
    k: &RealMatrix,
    rows: &[usize],
    spec: BlockSpec,
    causal: bool,
    stats: Option<&RowStats>,
    counter: &mut OpCounter,
) -> Result<RealMatrix, FlashError> {
    if rows.is_empty() {
        return Err(FlashError::EmptyRaterSet);
    }
    for &r in rows {
        if r >= q.rows() {
            return Err(FlashError::RaterRowOutOfRange {
                row: r,
                len: q.rows(),
            });
        }
    }
    check_attention_shapes(q, k, q, causal)?;
    let l_k = k.rows();
    let d = q.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut probe = BufferProbe::default();

    let (maxes, denoms) = match stats {
        Some(s) => (
            rows.iter().map(|&i| s.max[i]).collect::<Vec<_>>(),
            rows.iter().map(|&i| s.denom[i]).collect::<Vec<_>>(),
        ),
        None => subset_row_stats(q, k, rows, spec, causal, counter, &mut probe),
    };

    let mut out = RealMatrix::zeros(rows.len(), l_k);
    let mut scores: Vec<f64> = Vec::with_capacity(spec.block_size.min(l_k));
    for (idx, &i) in rows.iter().enumerate() {
        let visible = if causal { i + 1 } else { l_k };
        let q_row = q.row(i);
        let (m, l) = (maxes[idx], denoms[idx]);
        for b in 0..spec.num_blocks(visible) {
            let range = spec.block_range(b, visible);
            if range.is_empty() {
                continue;
            }
            scores.clear();
            for j in range.clone() {
                scores.push(dot(q_row, k.row(j)) * scale);
            }
            counter.add_multiply_adds((scores.len() * d) as u64);
            counter.add_exps(scores.len() as u64);
            for (offset, j) in range.enumerate() {
                out.set(idx, j, (scores[offset] - m).exp() / l);
            }
        }
    }
    Ok(out)
}

/// Indices of the `k` largest scores inside `span`, descending by score and
/// ascending by index among exact ties. Selection resolves boundary ties so
/// the result is always the exact complement of pruning the
/// `span length - k` smallest under the lowest-position-first rule.
pub fn topk_visual(
    scores: &[f64],
    span: std::ops::Range<usize>,
    k: usize,
) -> Result<Vec<usize>, FlashError> {
    let span_len = span.len();
    if k > span_len || span.end > scores.len() {
        return Err(FlashError::TopKOutOfRange { k, span: span_len });
    }
    let mut order: Vec<usize> = span.collect();
    // Reversed pruning order: higher scores first, higher index wins ties.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(b.cmp(&a)));
    let mut selected = order[..k].to_vec();
    selected.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    Ok(selected)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
