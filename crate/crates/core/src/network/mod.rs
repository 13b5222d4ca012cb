//! Residual sub-task units, novel-view-synthesis stages, the deeply supervised cascade with
//! multi-scale fusion, training, and model persistence.

mod cascade;
mod io;
mod train;
mod unit;

pub use cascade::{
    deep_supervised_loss, stage_factors_for, CascadeModel, CascadeTrace, ModelConfig, NvsStage, StageTrace,
    SUPPORTED_FACTORS,
};
pub use io::{load_model, model_from_bytes, model_to_bytes, save_model, write_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use train::{prepare_samples, train, train_samples, TrainConfig, TrainReport, TrainingSample};
pub use unit::{DcnnUnit, DcnnUnitConfig, UnitTrace};
