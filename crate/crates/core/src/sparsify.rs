//! Per-layer pruning decisions: priority slicing, significance, rank-adaptive
//! deletion counts, pruning, and budget scheduling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::LayerAttentionView;
use crate::numerics::{matrix_rank, NumericsError, OpCounter, RealMatrix};
use crate::rater::RaterSoftmaxAxis;
use crate::recycle::{center_count, pool_size};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparsifyError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("no rater rows survive in the current sequence")]
    NoRaterRows,
    #[error("priority matrix is empty")]
    EmptyPriority,
    #[error("deletion count {n} out of range for {len} visual tokens")]
    DeletionOutOfRange { n: usize, len: usize },
    #[error(
        "budget {budget} unreachable from {current} visual tokens with tau {tau} and theta {theta}"
    )]
    BudgetUnreachable {
        budget: usize,
        current: usize,
        tau: f64,
        theta: f64,
    },
    #[error("attention view carries no summary usable for priority slicing")]
    MissingAttentionSummary,
}

/// Which rows of the attention map rate the visual tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaterMode {
    /// Only the pre-selected raters (default).
    #[default]
    Selected,
    /// Every question token, selection ignored (ablation).
    AllText,
}

/// How per-head attention is condensed before slicing the priority matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    #[default]
    Average,
    Max,
}

/// Hyperparameters for the per-layer sparsification stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparsifyConfig {
    pub enabled: bool,
    /// Scaling factor on the rank deficiency of the priority matrix.
    pub lambda: f64,
    /// Fraction of pruned tokens recycled for reconstruction.
    pub tau: f64,
    /// Fraction of the recycled pool promoted to cluster centers.
    pub theta: f64,
    /// Neighbor count for local densities (clamped to pool size - 1).
    pub knn_k: usize,
    /// Relative singular-value tolerance for the rank of the priority matrix.
    pub rank_rel_tol: f64,
    /// Layers that sparsify; `None` means every layer from index 1 on.
    pub active_layers: Option<Vec<usize>>,
    /// Exact final visual-token count to hit, if set.
    pub budget: Option<usize>,
    pub rater_mode: RaterMode,
    pub rater_softmax_axis: RaterSoftmaxAxis,
    pub head_mode: HeadMode,
    /// Include per-layer significance vectors in reports.
    pub emit_significance: bool,
}

impl Default for SparsifyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda: 1.0,
            tau: 0.25,
            theta: 0.25,
            knn_k: 5,
            rank_rel_tol: 1e-10,
            active_layers: None,
            budget: None,
            rater_mode: RaterMode::default(),
            rater_softmax_axis: RaterSoftmaxAxis::default(),
            head_mode: HeadMode::default(),
            emit_significance: false,
        }
    }
}

impl SparsifyConfig {
    pub fn layer_is_active(&self, layer_index: usize) -> bool {
        if !self.enabled {
            return false;
        }
        match &self.active_layers {
            Some(layers) => layers.contains(&layer_index),
            None => layer_index >= 1,
        }
    }

    pub fn last_active_layer(&self, num_layers: usize) -> Option<usize> {
        (0..num_layers).rev().find(|&l| self.layer_is_active(l))
    }
}

/// The rater-row x visual-column slice of the condensed attention map.
#[derive(Clone, Debug)]
pub struct PriorityMatrix {
    pub matrix: RealMatrix,
    /// Original sequence positions of the rater rows.
    pub rater_positions: Vec<usize>,
    /// Original position ids of the visual columns, in sequence order.
    pub visual_positions: Vec<usize>,
}

/// One layer's sparsification record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SparsifyPlan {
    pub layer_index: usize,
    pub skipped: bool,
    pub rank_of_p: usize,
    /// Tokens deleted at this layer.
    pub deletion_count: usize,
    /// Pool size actually recycled at this layer.
    pub pool_size: usize,
    /// Reconstructed token count at this layer.
    pub reconstructed_count: usize,
    /// Position ids pruned at this layer.
    pub pruned: Vec<usize>,
    /// Position ids of visual tokens that survive this layer (pre-reconstruction).
    pub retained: Vec<usize>,
    /// Position ids of the recycled subset of `pruned`.
    pub recycled: Vec<usize>,
    /// Position ids carried by the reconstructed tokens (their cluster centers).
    pub reconstructed_positions: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub significance: Option<Vec<f64>>,
}

impl SparsifyPlan {
    pub fn skipped(layer_index: usize, rank_of_p: usize, retained: Vec<usize>) -> Self {
        Self {
            layer_index,
            skipped: true,
            rank_of_p,
            deletion_count: 0,
            pool_size: 0,
            reconstructed_count: 0,
            pruned: Vec::new(),
            retained,
            recycled: Vec::new(),
            reconstructed_positions: Vec::new(),
            significance: None,
        }
    }
}

/// Slice the priority matrix out of a dense attention view: rows are the
/// rater positions, columns the surviving visual positions.
pub fn slice_priority(
    view: &LayerAttentionView,
    rater_positions: &[usize],
    visual_positions: &[usize],
) -> Result<PriorityMatrix, SparsifyError> {
    let logits = view
        .logits
        .as_ref()
        .ok_or(SparsifyError::MissingAttentionSummary)?;
    if rater_positions.is_empty() {
        return Err(SparsifyError::NoRaterRows);
    }
    let index_of =
        |position: usize| -> Option<usize> { view.position_ids.binary_search(&position).ok() };
    let mut matrix = RealMatrix::zeros(rater_positions.len(), visual_positions.len());
    for (r, &rater_pos) in rater_positions.iter().enumerate() {
        let row = index_of(rater_pos).ok_or(SparsifyError::NoRaterRows)?;
        for (c, &vis_pos) in visual_positions.iter().enumerate() {
            let col = index_of(vis_pos).ok_or(SparsifyError::EmptyPriority)?;
            matrix.set(r, c, logits.get(row, col));
        }
    }
    Ok(PriorityMatrix {
        matrix,
        rater_positions: rater_positions.to_vec(),
        visual_positions: visual_positions.to_vec(),
    })
}

/// Column means of the priority matrix; counts one multiply-add per entry.
pub fn significance(
    p: &PriorityMatrix,
    counter: &mut OpCounter,
) -> Result<Vec<f64>, SparsifyError> {
    let m = &p.matrix;
    if m.is_empty() {
        return Err(SparsifyError::EmptyPriority);
    }
    counter.add_multiply_adds((m.rows() * m.cols()) as u64);
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (j, s) in out.iter_mut().enumerate() {
            *s += m.get(i, j);
        }
    }
    for s in out.iter_mut() {
        *s /= m.rows() as f64;
    }
    Ok(out)
}

/// Rank of the priority matrix and the adaptive deletion count
/// `floor(lambda * (l_v - rank))`, clamped so at least one visual token
/// survives. A zero count means the caller skips the layer.
pub fn deletion_count(
    p: &PriorityMatrix,
    lambda: f64,
    rank_rel_tol: f64,
) -> Result<(usize, usize), SparsifyError> {
    let rank = matrix_rank(&p.matrix, rank_rel_tol)?;
    let l_v = p.matrix.cols();
    let raw = (lambda * (l_v.saturating_sub(rank)) as f64).floor();
    let n = if raw <= 0.0 {
        0
    } else {
        (raw as usize).min(l_v.saturating_sub(1))
    };
    Ok((rank, n))
}

/// Indices of the `n` smallest significance values (ties toward the lower
/// position id), plus the order-preserving complement.
pub fn prune(
    significance: &[f64],
    positions: &[usize],
    n: usize,
) -> Result<(Vec<usize>, Vec<usize>), SparsifyError> {
    if n >= significance.len().max(1) && !(n == 0 && significance.is_empty()) {
        return Err(SparsifyError::DeletionOutOfRange {
            n,
            len: significance.len(),
        });
    }
    let mut order: Vec<usize> = (0..significance.len()).collect();
    order.sort_by(|&a, &b| {
        significance[a]
            .partial_cmp(&significance[b])
            .unwrap()
            .then(positions[a].cmp(&positions[b]))
    });
    let mut pruned: Vec<usize> = order[..n].iter().map(|&i| positions[i]).collect();
    pruned.sort_unstable();
    let retained: Vec<usize> = positions
        .iter()
        .copied()
        .filter(|p| !pruned.contains(p))
        .collect();
    Ok((pruned, retained))
}

/// Tokens a deletion of `n` nets out to after recycling: `n` minus the
/// reconstructed count for that `n`.
pub fn net_removal(tau: f64, theta: f64, n: usize) -> usize {
    n - center_count(theta, pool_size(tau, n).min(n)).min(n)
}

/// Clamp the adaptive deletion count against a retained-token budget.
///
/// Intermediate active layers never let the post-reconstruction count drop
/// below the budget; the last active layer picks the deletion count whose net
/// effect lands the visual count exactly on the budget (reconstruction
/// included). Without a budget the adaptive count passes through.
pub fn budget_schedule(
    config: &SparsifyConfig,
    current_visual: usize,
    active_layers_remaining: usize,
    adaptive_n: usize,
) -> Result<usize, SparsifyError> {
    let Some(budget) = config.budget else {
        return Ok(adaptive_n);
    };
    if budget > current_visual {
        return Err(SparsifyError::BudgetUnreachable {
            budget,
            current: current_visual,
            tau: config.tau,
            theta: config.theta,
        });
    }
    let gap = current_visual - budget;
    if active_layers_remaining > 1 {
        return Ok(adaptive_n.min(gap));
    }
    // Final active layer: forced prune. Scan upward from the raw gap until
    // the net removal (deletions minus reconstructed tokens) closes it; the
    // net moves by at most one per step, so the first hit is exact.
    for n in gap..current_visual.max(1) {
        match net_removal(config.tau, config.theta, n).cmp(&gap) {
            std::cmp::Ordering::Equal => return Ok(n),
            std::cmp::Ordering::Greater => break,
            std::cmp::Ordering::Less => {}
        }
    }
    Err(SparsifyError::BudgetUnreachable {
        budget,
        current: current_visual,
        tau: config.tau,
        theta: config.theta,
    })
}
