pub mod autograd;
pub mod error;
pub mod params;
pub mod tensor;
pub mod nn;
pub mod data;
pub mod cda;
pub mod prosody;
pub mod cad;
pub mod model;
pub mod metrics;
pub mod checkpoint;
pub mod training;
pub mod config;
pub mod experiment;
