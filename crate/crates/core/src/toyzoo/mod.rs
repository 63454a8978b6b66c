//! Desk-scale models and data: synthetic multi-task suites and tiny MLP
//! experts with optional low-rank adapters.

pub mod model;
pub mod suite;

pub use model::{argmax, softmax, Adapter, AdapterConfig, ToyModel, TrainConfig};
pub use suite::{gen_suite, Dataset, SuiteConfig, TaskData, TaskSuite};
