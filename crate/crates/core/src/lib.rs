//! Goal-consistent short-term action anticipation.
//!
//! A shared trunk feeds a fine-action head and one goal head per goal level.
//! Training combines the branch cross-entropies with a consistency loss that
//! maps the fine-action distribution onto goals through training-set
//! co-occurrence statistics. Evaluation scores the fine branch alone with
//! class-mean top-k recall.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod hierarchy;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optim;
pub mod training;

pub use dataset::{generate_synthetic, Dataset, DatasetManifest, FeatureSequence, SegmentRecord, Split, SyntheticConfig};
pub use error::{Error, Result};
pub use evaluation::{evaluate, EvalReport};
pub use hierarchy::{build_cooccurrence, build_hierarchy, derive_conditional, CooccurrenceModel, LabelSpace};
pub use losses::{ConsistencyVariant, LossConfig};
pub use model::{backward, forward, init_params, ModelParams};
pub use training::{train, TrainConfig, TrainHistory};
