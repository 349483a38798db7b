//! Set-prediction detector, matching, losses and training.

pub mod geometry;
pub mod hungarian;
pub mod loss;
pub mod model;
pub mod train;

pub use geometry::giou;
pub use loss::{detections, detr_loss, hungarian_match, Detection, LossBreakdown, LossWeights, MatchResult, OutputGrad};
pub use model::{Detector, DetectorConfig, DetectorOutput};
pub use train::{predict, LrSchedule, Trainer};

use crate::data::ImageRecord;
use crate::error::Result;

/// Anything that turns an image into scored final detections.
pub trait DetectionModel {
    fn detect(&self, image: &ImageRecord, score_threshold: f64) -> Result<Vec<Detection>>;
}

impl DetectionModel for Detector {
    fn detect(&self, image: &ImageRecord, score_threshold: f64) -> Result<Vec<Detection>> {
        predict(self, image, score_threshold)
    }
}
