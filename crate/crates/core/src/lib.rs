pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod experiment;
pub mod metrics;
pub mod mocha;
pub mod model;
pub mod objectives;
pub mod plot;
pub mod tensor;
pub mod training;
