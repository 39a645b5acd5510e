pub mod rng;
pub mod substrate;
pub mod synthgen;
pub mod model;
pub mod training;
pub mod streaming;
pub mod eval;
pub mod pipeline;
