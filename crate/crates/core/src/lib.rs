//! Token-sparsification inference engine on a deterministic toy multimodal
//! decoder.
//!
//! The pipeline prunes visual tokens during prefill, guided by the question
//! prompt: selected text tokens ("raters") score each visual token from the
//! self-attention map, a rank-based rule adapts how many tokens each layer
//! drops, and the most informative pruned tokens are recycled into compact
//! reconstructed tokens via density-peak clustering. A streaming block-wise
//! attention backend reproduces the dense decisions without materializing the
//! full attention matrix, and an analytic cost ledger is reconciled against
//! instrumented multiply-add counts.
//!
//! ```
//! use sparsetok::model::{ModelConfig, TokenSequence};
//! use sparsetok::numerics::{OpCounter, RealMatrix};
//! use sparsetok::pipeline::{run_prefill, PrefillOptions};
//! use sparsetok::sparsify::SparsifyConfig;
//!
//! let config = ModelConfig { num_layers: 3, num_heads: 2, hidden_dim: 16,
//!                            ffn_dim: 16, vocab_size: 64, seed: 7 };
//! let visual = RealMatrix::from_vec(12, 16, vec![0.05; 12 * 16]).unwrap();
//! let seq = TokenSequence::new(vec![1, 2], visual, vec![9, 4, 4, 30]).unwrap();
//!
//! let options = PrefillOptions {
//!     sparsify: Some(SparsifyConfig::default()),
//!     ..Default::default()
//! };
//! let mut counter = OpCounter::new();
//! let trace = run_prefill(&config, &seq, &options, &mut counter).unwrap();
//!
//! assert!(trace.final_visual_count() <= 12);
//! assert_eq!(trace.final_text_count(), 6); // text always survives
//! ```

pub mod cost;
pub mod flash;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod rater;
pub mod recycle;
pub mod rng;
pub mod sparsify;

pub use numerics::{OpCounter, RealMatrix};
