//! Deterministic `f64` tensor engine: values, a reverse-mode graph, Adam, and
//! the warmup learning-rate schedule.

pub mod graph;
pub mod optim;
pub mod params;
pub mod schedule;
pub mod tensor;

pub use graph::{Graph, Var};
pub use optim::{adam_step, AdamState};
pub use params::{ParamId, ParamKind, ParamStore, Parameter};
pub use schedule::LrSchedule;
pub use tensor::Tensor;
