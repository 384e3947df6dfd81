//! Group-wise trajectory forecaster: a small masked transformer encoder
//! trained per motion group and rolled out autoregressively.

pub mod model;
pub mod tape;
pub mod train;

pub use model::{
    instance_normalize, loss_group, mask_span, ForecasterConfig, ForecasterModel, Frame, LossParts,
    NormalizationState,
};
pub use train::{
    check_model_gradients, forecast_bank, forward, predict, rollout, train_bank, train_group,
    BankModels, ModelGradientCheck, TrainReport, TrainingSet,
};
