//! Contrastive clustering: a feature head and a bank of cluster subheads on a
//! shared backbone, trained with probability and feature contrastive losses.

// `!(x > 0.0)` style checks deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod critics;
pub mod data;
pub mod error;
pub mod losses;
pub mod memory_bank;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod seed;

pub use critics::{CriticConfig, CriticKind, ProbVector};
pub use data::{Dataset, ViewConfig};
pub use error::{CrlcError, Result};
pub use losses::LossWeights;
pub use memory_bank::MemoryBank;
pub use metrics::Partition;
pub use model::{ModelSpec, SgdConfig, TwoHeadModel};
pub use pipeline::{RunConfig, RunReport, TrainOutcome};
