pub mod arnet;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod lstm;
pub mod metrics;
pub mod params;
pub mod pmnist;
pub mod seq2seq;
pub mod tensor;
