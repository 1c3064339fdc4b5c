//! Quantized CNN engine with single-event-upset fault injection.
//!
//! Every quantized layer runs the five-site pipeline
//! `I8 → W8 → B32 → O32 → O8`; a [`FaultPlan`] flips individual bits of the
//! integer codes at any of those sites for one forward pass. The
//! [`harness`] module drives fault-count sweeps, per-site sweeps and the
//! fault-aware-training comparison on MNIST.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fault;
mod gemm;
pub mod harness;
pub mod layers;
pub mod model;
pub mod par;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use data::{LabeledDataset, Split};
pub use error::{Error, Result};
pub use fault::{BitBudget, FaultPlan, FaultSite, FaultTarget};
pub use harness::{ci95, CIStat, ResultRow, SweepConfig};
pub use model::{build_ccdf, count_vulnerable_bits, ModelGraph, Plans};
pub use par::Parallelism;
pub use quant::{QuantParams, QuantizedTensor, RangeObserver};
pub use tensor::{FloatTensor, IntTensor, Shape};
pub use train::{evaluate, train, FaultSpec, TrainConfig};
