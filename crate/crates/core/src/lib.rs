pub mod data;
pub mod distill;
pub mod experiment;
pub mod forecaster;
pub mod gaussian;
pub mod metrics;
pub mod tensor;
