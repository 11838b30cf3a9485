//! Error maps, the anomaly-suppression loss, training, inference and thresholding.

pub mod infer;
pub mod knee;
pub mod maps;
pub mod train;

pub use infer::{average_maps, detect, infer, plan_for, Detection, InferConfig};
pub use knee::{difference_curve, knee_threshold, KneeThreshold, SENSITIVITY_FLOOR};
pub use maps::{
    asl_weight_map, binarize, weighted_loss, weighted_loss_node, AnomalyMap, BinaryMask,
    ErrorMap, LossForm, WeightMap, WeightScaling,
};
pub use train::{
    compute_weight_maps, train, train_with, training_mask, unmasked_errors, EpochStats,
    LossSupport, TrainConfig, TrainState,
};
