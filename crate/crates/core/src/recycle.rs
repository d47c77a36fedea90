//! Recycling of pruned tokens: k-NN density peaks, clustering, and
//! reconstruction into compact tokens.
//!
//! The most informative fraction of each layer's pruned tokens forms a pool.
//! Pool tokens get a local density (Gaussian kernel over squared distances to
//! the k nearest neighbors) and a distance indicator (distance to the nearest
//! strictly denser token, or the pool diameter for the density maximum).
//! Tokens with the largest density x indicator products become cluster
//! centers; everything else joins the center it is most cosine-similar to,
//! and each group is reconstructed into one token by element-wise summation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{cosine_similarity, pairwise_sq_dists, sq_dist, OpCounter, RealMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecycleError {
    #[error("recycling pool has {0} tokens; need at least 2 for density estimation")]
    PoolTooSmall(usize),
}

/// Clustering state over one layer's recycled pool.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterModel {
    /// Pool row index of each center, highest score first.
    pub centers: Vec<usize>,
    /// For every pool row, the pool row index of its assigned center.
    pub assignment: Vec<usize>,
    pub densities: Vec<f64>,
    pub indicators: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Round half away from zero for non-negative inputs.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Pool size for a deletion count: `round(tau * n)`.
pub fn pool_size(tau: f64, n: usize) -> usize {
    round_half_up(tau * n as f64)
}

/// Center count for a pool: `max(1, round(theta * l_r))`, zero for an empty
/// pool.
pub fn center_count(theta: f64, l_r: usize) -> usize {
    if l_r == 0 {
        0
    } else {
        round_half_up(theta * l_r as f64).max(1)
    }
}

/// Rows of the pruned tokens whose significance ranks in the top
/// `round(tau * n)`, ties broken toward lower position ids. Returns the pool
/// matrix and the chosen pruned-token positions, ordered by rank.
pub fn recycle_pool(
    pruned_states: &RealMatrix,
    pruned_significance: &[f64],
    pruned_positions: &[usize],
    tau: f64,
) -> (RealMatrix, Vec<usize>) {
    let n = pruned_states.rows();
    let l_r = pool_size(tau, n).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        pruned_significance[b]
            .partial_cmp(&pruned_significance[a])
            .unwrap()
            .then(pruned_positions[a].cmp(&pruned_positions[b]))
    });
    order.truncate(l_r);
    let pool = pruned_states.select_rows(&order);
    let positions = order.iter().map(|&i| pruned_positions[i]).collect();
    (pool, positions)
}

/// Local densities `rho_i = exp(-(1/k) * sum of squared distances to the k
/// nearest neighbors)`, neighbors excluding the token itself, ties broken by
/// lower index. `k` is clamped to the pool size minus one.
///
/// Counts the neighbor-search and density work of the aggregation stage.
pub fn local_density(
    pool: &RealMatrix,
    k: usize,
    counter: &mut OpCounter,
) -> Result<Vec<f64>, RecycleError> {
    let l_r = pool.rows();
    if l_r < 2 {
        return Err(RecycleError::PoolTooSmall(l_r));
    }
    let d = pool.cols();
    counter.add_multiply_adds((l_r * (l_r - 1) * 2 * d) as u64);
    counter.add_multiply_adds((l_r * l_r * 2 * d) as u64);
    let k = k.clamp(1, l_r - 1);
    let dists = pairwise_sq_dists(pool);
    let mut rho = Vec::with_capacity(l_r);
    for i in 0..l_r {
        let mut neighbors: Vec<usize> = (0..l_r).filter(|&j| j != i).collect();
        neighbors.sort_by(|&a, &b| {
            dists
                .get(i, a)
                .partial_cmp(&dists.get(i, b))
                .unwrap()
                .then(a.cmp(&b))
        });
        counter.add_comparisons((l_r - 1) as u64);
        let mean_sq: f64 = neighbors[..k].iter().map(|&j| dists.get(i, j)).sum::<f64>() / k as f64;
        rho.push((-mean_sq).exp());
    }
    counter.add_exps(l_r as u64);
    Ok(rho)
}

/// Distance indicators: for each token, the Euclidean distance to the nearest
/// strictly denser token; the density maximum (and any token with no strictly
/// denser peer) instead gets its distance to the farthest token.
pub fn distance_indicator(pool: &RealMatrix, rho: &[f64]) -> Vec<f64> {
    let l_r = pool.rows();
    let mut delta = Vec::with_capacity(l_r);
    for i in 0..l_r {
        let mut nearest_denser = f64::INFINITY;
        let mut farthest = 0.0f64;
        for j in 0..l_r {
            if j == i {
                continue;
            }
            let dist = sq_dist(pool.row(i), pool.row(j)).sqrt();
            if rho[j] > rho[i] && dist < nearest_denser {
                nearest_denser = dist;
            }
            if dist > farthest {
                farthest = dist;
            }
        }
        delta.push(if nearest_denser.is_finite() {
            nearest_denser
        } else {
            farthest
        });
    }
    delta
}

/// Pick the `max(1, round(theta * l_r))` highest `rho * delta` tokens as
/// centers (ties toward lower index) and assign every other token to the
/// center with the highest cosine similarity (ties toward the lower center
/// index).
pub fn cluster(pool: &RealMatrix, rho: &[f64], delta: &[f64], theta: f64) -> ClusterModel {
    let l_r = pool.rows();
    let scores: Vec<f64> = rho.iter().zip(delta).map(|(r, d)| r * d).collect();
    let c = center_count(theta, l_r).min(l_r);
    let mut order: Vec<usize> = (0..l_r).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let centers: Vec<usize> = order[..c].to_vec();

    let mut assignment = vec![0usize; l_r];
    for (i, slot) in assignment.iter_mut().enumerate() {
        if centers.contains(&i) {
            *slot = i;
            continue;
        }
        let mut best_center = centers[0];
        let mut best_sim = f64::NEG_INFINITY;
        for &center in &centers {
            let sim =
                cosine_similarity(pool.row(i), pool.row(center)).expect("pool rows share a width");
            if sim > best_sim || (sim == best_sim && center < best_center) {
                best_sim = sim;
                best_center = center;
            }
        }
        *slot = best_center;
    }
    ClusterModel {
        centers,
        assignment,
        densities: rho.to_vec(),
        indicators: delta.to_vec(),
        scores,
    }
}

/// Element-wise sum of each group into one token per center; group members
/// are added in ascending pool order with the center included. Returns the
/// reconstructed rows (one per center, in center order) and, for each, the
/// pool row index of its center.
pub fn reconstruct(
    pool: &RealMatrix,
    model: &ClusterModel,
    counter: &mut OpCounter,
) -> (RealMatrix, Vec<usize>) {
    let d = pool.cols();
    let c = model.centers.len();
    let l_r = pool.rows();
    let mut tokens = RealMatrix::zeros(c, d);
    for (slot, &center) in model.centers.iter().enumerate() {
        let row = tokens.row_mut(slot);
        for member in 0..l_r {
            if model.assignment[member] == center {
                for (acc, &v) in row.iter_mut().zip(pool.row(member)) {
                    *acc += v;
                }
            }
        }
    }
    counter.add_multiply_adds((d * (l_r - c)) as u64);
    (tokens, model.centers.clone())
}
