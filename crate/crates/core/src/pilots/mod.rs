//! The three pilot networks, their preprocessing and training, throttle
//! smoothing and the scripted expert used to generate demonstrations.

mod expert;
mod models;
mod preprocess;
mod train;

pub use expert::{expert_driver, steer_for_angle, ExpertConfig, SteerNoise};
pub use models::{
    bin_to_steer, sensor_features, smooth_throttle, steer_to_bin, SteeringConfig, SteeringModel,
    SteeringOutput, ThrottleConfig, ThrottleModel, TrafficConfig, TrafficModel, SENSOR_FEATURES,
    STEERING_BINS,
};
pub use preprocess::{
    frame_tensor, frame_to_chw, preprocess_frame, resize_area, rgb_to_hsv, MaskBands,
    PreprocessMode,
};
pub use train::{evaluate_loss, split_indices, train, Sample, TrainHyper, TrainReport};
