//! Model optimization: hyperparameter search, projection pruning and int8
//! post-training quantization.

pub mod hpo;
pub mod prune;
pub mod quant;
