pub mod corpus;
pub mod features;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod trace;
pub mod train;
