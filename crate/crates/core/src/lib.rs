//! Compact word embeddings built from one shared base vector.
//!
//! Every word's embedding is `FFN(m_w ⊙ o)`: a shared base embedding `o` is
//! filtered element-wise by a word-specific, non-trainable filter vector `m_w`
//! (assembled from a handful of small random codebooks) and expanded by a
//! bias-free two-layer feed-forward network shared by all words.
//!
//! Modules:
//! - [`filter_bank`]: random source matrices, word assignments and filter vectors.
//! - [`composer`]: the model parameters and the feed-forward composition.
//! - [`trainer`]: reconstruction loss, hand-written backward pass and Adam.
//! - [`eval`]: cosine similarity, Spearman's rho and word-similarity evaluation.
//! - [`footprint`]: exact element counts for each storage scheme.
//! - [`model_io`]: embedding text files, the model container and exports.

pub mod composer;
pub mod error;
pub mod eval;
pub mod filter_bank;
pub mod footprint;
pub mod model_io;
pub mod rng;
pub mod trainer;

pub use composer::{embed_batch, embed_word, ffn_forward, AloneModel, FfnCache};
pub use error::{Error, Result};
pub use eval::{
    cosine_similarity, evaluate_similarity, spearman_rho, ComposedEmbeddings, DatasetFormat,
    Delimiter, EmbeddingLookup, SimilarityReport, WordPairDataset,
};
pub use filter_bank::{
    build_filter_bank, clip, collision_probability, detect_assignment_collisions, filter_vector,
    FilterBank, FilterConfig, FilterKind,
};
pub use footprint::{footprint, FootprintInputs, FootprintReport, Method};
pub use model_io::{
    export_embeddings, load_embedding_text, load_model, store_model, LoadedModel, Precision,
    StoreOptions,
};
pub use rng::{SeedPlan, SeededRng};
pub use trainer::{
    adam_step, backward, forward_batch, reconstruction_loss, train, BatchCache, Gradients,
    Sampling, TargetEmbeddingTable, TrainerConfig, TrainerState,
};
