//! Metric learning with the scalable NCA objective.
//!
//! Trains a neural encoder so that cosine neighborhoods in the embedding
//! space follow class structure, using a leave-one-out softmax over pairwise
//! similarities. The whole-dataset term is made affordable by a
//! non-parametric memory bank of offline embeddings with momentum updates.
//! Learned embeddings are evaluated with weighted k-nearest-neighbor
//! classification, sub-category induction, and episodic few-shot recognition.

pub mod bank;
pub mod benchmark;
pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod eval;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod loss;
pub mod trainer;

pub use bank::{BankError, BankSnapshot, MemoryBank};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use data::{DataError, LabelHierarchy, LabeledDataset, SyntheticSpec};
pub use embedding::{
    cosine_similarity, l2_normalize, l2_normalize_backward, EmbeddingError, EmbeddingStore,
    EmbeddingVector, RawFeature,
};
pub use encoder::{EncoderError, EncoderNetwork, SoftmaxHead};
pub use eval::{EvalError, EvalReport, Gallery, KnnConfig};
pub use loss::{ClassIndexSets, LossError, NcaConfig, NeighborDistribution};
pub use trainer::{TrainConfig, TrainError, TrainMode, TrainReport};
