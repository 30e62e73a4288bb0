//! Regional contrast for semantic segmentation, at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`contrast`] — dense representations, class means, the relation graph
//!   and the regional contrastive loss with analytic query gradients.
//! * [`sampling`] — hard-query selection, relation-weighted negative keys and
//!   pseudo-label gating.
//! * [`model`] — a two-layer convolutional segmenter with hand-written
//!   backward pass, momentum SGD with polynomial decay and an EMA teacher.
//! * [`trainer`] — supervised and mean-teacher training steps.
//! * [`data`] — synthetic shapes, benchmark partitions and mixing augmentations.
//! * [`eval`] — confusion matrices, mIoU, class embeddings and dendrograms.
//! * [`pipeline`] — config-driven generate / partition / train / eval commands.

pub mod checkpoint;
pub mod contrast;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod trainer;

pub use contrast::{
    class_mean, negative_class_distribution, normalize_pixels, reco_loss, relation_graph,
    ClassMean, DenseRepresentation, KeyPool, LossConfig, QueryBundle, RecoOutput, RelationGraph,
};
pub use error::{Error, Result};
pub use model::{ModelShape, OptimConfig, TeacherState, ToyModelParams};
pub use rng::RngStream;
pub use sampling::{SamplerConfig, SamplingStrategy};
pub use trainer::{LossBreakdown, TrainConfig, TrainMode, TrainerState};


/// Label value marking pixels without ground truth.
pub const IGNORE_LABEL: u8 = 255;
