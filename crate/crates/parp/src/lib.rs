//! Sparse subnetwork discovery and finetuning on deterministic synthetic
//! sequence tasks.
//!
//! The crate provides a small f64 training stack (encoder blocks, CE/CTC/
//! masked-reconstruction/contrastive losses, Adam, tri-phase LR schedule),
//! unstructured magnitude and random pruning with a bit-exact mask format,
//! the pruning-method family (MPI, OMP, IMP with rewinding, subnetwork
//! finetuning, PARP, PARP-P, joint multi-task discovery), mask analytics
//! (IOU, overlap, layerwise profiles), and an experiment harness with a
//! CLI front end. Every run is bit-reproducible from its config digest.

pub mod analytics;
pub mod ckpt;
pub mod error;
pub mod fdcheck;
pub mod harness;
pub mod loss;
pub mod methods;
pub mod nn;
pub mod optim;
pub mod pruning;
pub mod rng;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
