pub mod autodiff;
pub mod cloud;
pub mod config;
pub mod container;
pub mod dataset;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod fpd;
pub mod generator;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod trainer;
