//! The corrector network: topology, inference and training.

pub mod model;
pub mod train;

pub use model::{
    build_tinyfc, Activation, BranchArch, Dense, LayerSpec, Normalization, TinyFCModel,
    TinyFcWidths,
};
pub use train::{
    fine_tune, mse, split_dataset, split_indices, train, train_records, Samples, TrainConfig,
    TrainReport,
};
