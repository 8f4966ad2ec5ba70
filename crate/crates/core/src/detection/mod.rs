//! Target assignment, losses, decoding, suppression, evaluation and training.

mod assign;
mod decode;
mod eval;
mod loss;
mod nms;
mod train;

pub use assign::{
    assign_targets, centerness, location_center, regression_ranges, AssignmentTargets, GroundTruthBox,
    LevelGeometry, LevelTargets, PyramidGeometry, REFERENCE_SIZE,
};
pub use decode::{decode_boxes, postprocess, distances_to_box, DecodeConfig};
pub use eval::{average_precision, evaluate_ap, ApMetrics, IOU_THRESHOLDS};
pub use loss::{centerness_loss, focal_loss, iou_loss, total_loss, LossConfig, LossTerms};
pub use nms::{compute_iou, nms, nms_indices, Detection};
pub use train::{
    detect_all, evaluate, learning_rate, loss_for_batch, train, train_step, LogRow, Sample, Sgd, TrainConfig,
    TrainingSet,
};
