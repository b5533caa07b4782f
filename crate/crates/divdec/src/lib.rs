pub mod beam;
pub mod candidate;
pub mod cluster;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod sampler;

pub use candidate::{CandidateSet, ScoredHypothesis};
pub use error::{Error, Result};
pub use model::{ConditionalModel, NgramModel, StepDistribution, TableModel, TokenId, Vocabulary};
