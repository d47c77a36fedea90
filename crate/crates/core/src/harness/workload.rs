//! Workload construction: seeded synthetic prompts or visual embeddings from
//! a binary file, with synthetic text around them either way.

use crate::model::TokenSequence;
use crate::numerics::RealMatrix;
use crate::rng::{substream, XorShift64};

use super::config::{ConfigError, RunConfig, WorkloadConfig};
use super::embeddings::{read_embeddings, EmbeddingsError};

const STREAM_SEQUENCE: u64 = 0x5e9;

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Embeddings(#[from] EmbeddingsError),
}

#[derive(Debug)]
pub struct Workload {
    pub sequences: Vec<TokenSequence>,
    /// Per-sequence seeds used for text (and synthetic visuals).
    pub seeds: Vec<u64>,
}

fn text_ids(rng: &mut XorShift64, len: usize, vocab: usize) -> Vec<u32> {
    (0..len)
        .map(|_| rng.next_below(vocab as u64) as u32)
        .collect()
}

fn synthetic_visual(rng: &mut XorShift64, l_v: usize, d: usize) -> RealMatrix {
    let scale = 1.0 / (d as f64).sqrt();
    let data = (0..l_v * d).map(|_| rng.next_symmetric(scale)).collect();
    RealMatrix::from_vec(l_v, d, data).expect("shape matches data")
}

/// Materialize the workload for a resolved config.
pub fn build_workload(config: &RunConfig) -> Result<Workload, WorkloadError> {
    let model = &config.model;
    let base_seed = config.workload_seed();
    match &config.workload {
        WorkloadConfig::Synthetic(w) => {
            let mut sequences = Vec::with_capacity(w.num_sequences);
            let mut seeds = Vec::with_capacity(w.num_sequences);
            for i in 0..w.num_sequences {
                let seed = substream(base_seed, STREAM_SEQUENCE, i as u64);
                let mut rng = XorShift64::new(seed);
                let pre = text_ids(&mut rng, w.pre_text_len, model.vocab_size);
                let visual = synthetic_visual(&mut rng, w.l_v, model.hidden_dim);
                let post = text_ids(&mut rng, w.question_len, model.vocab_size);
                sequences.push(
                    TokenSequence::new(pre, visual, post)
                        .map_err(|e| ConfigError::Invalid(e.to_string()))?,
                );
                seeds.push(seed);
            }
            Ok(Workload { sequences, seeds })
        }
        WorkloadConfig::File(w) => {
            let matrices = read_embeddings(&w.path)?;
            if matrices.is_empty() {
                return Err(ConfigError::Invalid(format!(
                    "embeddings file {} holds no matrices",
                    w.path.display()
                ))
                .into());
            }
            let mut sequences = Vec::with_capacity(matrices.len());
            let mut seeds = Vec::with_capacity(matrices.len());
            for (i, visual) in matrices.into_iter().enumerate() {
                if visual.cols() != model.hidden_dim {
                    return Err(ConfigError::Invalid(format!(
                        "embeddings matrix {i} has dim {} but the model expects {}",
                        visual.cols(),
                        model.hidden_dim
                    ))
                    .into());
                }
                if let Some(budget) = config.sparsify.budget {
                    if budget > visual.rows() {
                        return Err(ConfigError::Invalid(format!(
                            "budget {budget} out of [1, l_v={}] for embeddings matrix {i}",
                            visual.rows()
                        ))
                        .into());
                    }
                }
                let seed = substream(base_seed, STREAM_SEQUENCE, i as u64);
                let mut rng = XorShift64::new(seed);
                let pre = text_ids(&mut rng, w.pre_text_len, model.vocab_size);
                let post = text_ids(&mut rng, w.question_len, model.vocab_size);
                sequences.push(
                    TokenSequence::new(pre, visual, post)
                        .map_err(|e| ConfigError::Invalid(e.to_string()))?,
                );
                seeds.push(seed);
            }
            Ok(Workload { sequences, seeds })
        }
    }
}

/// Seeded random embedding matrices for `gen-workload`; values are generated
/// at f32 precision so the file round-trips bit-exactly.
pub fn generate_embedding_matrices(
    count: usize,
    l_v: usize,
    d: usize,
    seed: u64,
) -> Vec<RealMatrix> {
    let scale = 1.0 / (d as f64).sqrt();
    (0..count)
        .map(|i| {
            let mut rng = XorShift64::new(substream(seed, STREAM_SEQUENCE, i as u64));
            let data = (0..l_v * d)
                .map(|_| (rng.next_symmetric(scale) as f32) as f64)
                .collect();
            RealMatrix::from_vec(l_v, d, data).expect("shape matches data")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::config::SyntheticWorkload;
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn synthetic_workload_is_deterministic() {
        let config = RunConfig {
            seed: Some(3),
            workload: WorkloadConfig::Synthetic(SyntheticWorkload {
                num_sequences: 3,
                l_v: 8,
                ..Default::default()
            }),
            ..Default::default()
        }
        .resolve()
        .unwrap();
        let a = build_workload(&config).unwrap();
        let b = build_workload(&config).unwrap();
        assert_eq!(a.seeds, b.seeds);
        for (x, y) in a.sequences.iter().zip(&b.sequences) {
            assert_eq!(x.pre_text_ids, y.pre_text_ids);
            assert_eq!(x.post_text_ids, y.post_text_ids);
            assert_eq!(x.visual_embeddings, y.visual_embeddings);
        }
        // Sequences differ from each other.
        assert_ne!(
            a.sequences[0].visual_embeddings,
            a.sequences[1].visual_embeddings
        );
    }

    #[test]
    fn file_workload_checks_model_dim() {
        let dir = std::env::temp_dir().join(format!("stk-wl-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("emb.spvt");
        let matrices = generate_embedding_matrices(2, 6, 32, 9);
        super::super::embeddings::write_embeddings(&path, &matrices).unwrap();

        let good = RunConfig {
            model: ModelConfig {
                hidden_dim: 32,
                ffn_dim: 32,
                num_heads: 4,
                ..Default::default()
            },
            workload: WorkloadConfig::File(super::super::config::FileWorkload {
                path: path.clone(),
                pre_text_len: 2,
                question_len: 3,
                seed: Some(1),
            }),
            ..Default::default()
        }
        .resolve()
        .unwrap();
        let workload = build_workload(&good).unwrap();
        assert_eq!(workload.sequences.len(), 2);
        assert_eq!(workload.sequences[0].visual_len(), 6);

        let bad = RunConfig {
            model: ModelConfig {
                hidden_dim: 64,
                ..Default::default()
            },
            workload: good.workload.clone(),
            ..Default::default()
        }
        .resolve()
        .unwrap();
        let err = build_workload(&bad).unwrap_err();
        assert!(err.to_string().contains("dim 32"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }
}
