//! Dense tensors with reverse-mode gradients, parameter storage, optimisers
//! and checkpoint persistence.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;

pub use checkpoint::Checkpoint;
pub use graph::{Graph, Mode, Var};
pub use optim::{NoamSchedule, Optimizer, OptimizerKind};
pub use params::{Gradients, Init, ParamId, ParamStore};
