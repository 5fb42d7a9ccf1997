pub mod model;
pub mod task;
pub mod textcodec;
pub mod corpus;
pub mod distiller;
pub mod trainer;
pub mod inference;
pub mod evaluator;
pub mod config;
pub mod pipeline;
