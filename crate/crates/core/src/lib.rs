//! All-pairs compute runtime: a three-level software cache, hierarchical
//! work stealing over a divide-and-conquer task tree, asynchronous
//! processing lanes and an analytical performance model.

pub mod app;
pub mod cache;
pub mod cluster;
pub mod dist;
pub mod harness;
pub mod model;
pub mod runtime;
pub mod sched;
pub mod util;

pub use app::{
    AppDescriptor, AppError, Application, ItemData, ItemKey, PairResult, PairValue, Stage,
};
