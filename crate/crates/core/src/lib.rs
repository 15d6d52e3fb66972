pub mod autodiff;
pub mod baselines;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod optim;
pub mod search;
pub mod training;

pub use autodiff::{NodeId, Tape, Tensor};
pub use error::{DashError, Result};
