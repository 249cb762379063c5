pub mod autodiff;
pub mod error;
pub mod rng;
pub mod tensor;
pub mod nn;
pub mod params;
pub mod optim;
pub mod metrics;
pub mod data;
pub mod augment;
pub mod models;
pub mod checkpoint;
pub mod synth;
