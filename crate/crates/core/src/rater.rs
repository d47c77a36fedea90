//! Selection of visually relevant question tokens ("raters").
//!
//! Runs once on the pre-decoder embeddings: each visual token distributes a
//! unit of attention mass over the question tokens, the per-token masses are
//! averaged into a score vector, and tokens at or above the mean score become
//! raters. Only raters get a say in visual-token significance later.

use serde::{Deserialize, Serialize};

use crate::numerics::{matmul, stable_softmax_rows, NumericsError, OpCounter, RealMatrix};

/// Which axis of the visual/text affinity matrix the softmax normalizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaterSoftmaxAxis {
    /// Each visual row distributes unit mass over text tokens (default). The
    /// score vector then sums to exactly 1.
    #[default]
    Text,
    /// Each text column distributes unit mass over visual tokens. Scores all
    /// collapse to 1/L_v up to rounding, which makes selection degenerate;
    /// kept as an ablation switch.
    Visual,
}

/// Scores, threshold, and the selected rater indices (into the question token
/// list, ascending).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RaterSet {
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub selected: Vec<usize>,
}

/// Mean attention mass each question token receives from the visual block.
///
/// Counts `l_t * l_v * 2 * d` multiply-adds, the cost of the underlying
/// affinity product under the two-per-element convention used by the cost
/// ledger for this stage.
pub fn rater_scores(
    h_v: &RealMatrix,
    h_q: &RealMatrix,
    axis: RaterSoftmaxAxis,
    counter: &mut OpCounter,
) -> Result<Vec<f64>, NumericsError> {
    if h_v.is_empty() || h_q.is_empty() {
        return Err(NumericsError::EmptyMatrix);
    }
    if h_v.cols() != h_q.cols() {
        return Err(NumericsError::DimensionMismatch {
            left_rows: h_v.rows(),
            left_cols: h_v.cols(),
            right_rows: h_q.rows(),
            right_cols: h_q.cols(),
        });
    }
    let l_v = h_v.rows();
    let l_t = h_q.rows();
    let d = h_v.cols();

    let mut scratch = OpCounter::new();
    let affinity = matmul(h_v, &h_q.transpose(), &mut scratch)?; // l_v x l_t
    counter.add_multiply_adds((l_t * l_v * 2 * d) as u64);

    let probs = match axis {
        RaterSoftmaxAxis::Text => stable_softmax_rows(&affinity, counter)?,
        RaterSoftmaxAxis::Visual => {
            stable_softmax_rows(&affinity.transpose(), counter)?.transpose()
        }
    };

    let mut scores = vec![0.0; l_t];
    for i in 0..l_v {
        for (j, s) in scores.iter_mut().enumerate() {
            *s += probs.get(i, j);
        }
    }
    for s in scores.iter_mut() {
        *s /= l_v as f64;
    }
    Ok(scores)
}

/// Keep every index whose score is at or above the mean. Never empty: the
/// maximum is always >= the mean.
pub fn select_raters(scores: &[f64]) -> RaterSet {
    let threshold = scores.iter().sum::<f64>() / scores.len() as f64;
    let selected: Vec<usize> = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= threshold)
        .map(|(i, _)| i)
        .collect();
    RaterSet {
        scores: scores.to_vec(),
        threshold,
        selected,
    }
}
