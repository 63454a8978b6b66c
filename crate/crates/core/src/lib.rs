//! Model merging with shared and exclusive knowledge: checkpoints, task-vector
//! compression, static merge baselines, a routing network, and a toy model zoo
//! to run experiments on.

pub mod checkpoint;
pub mod compress;
pub mod container;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod merge;
pub mod router;
pub mod selftest;
pub mod toyzoo;

pub use checkpoint::{Checkpoint, Delta};
pub use compress::TwinVector;
pub use error::{Error, Result};
pub use linalg::{SvdFactors, Tensor};
pub use merge::{MergeMethod, MergeRecipe};
pub use router::{Router, RouterConfig, RoutingDecision};
