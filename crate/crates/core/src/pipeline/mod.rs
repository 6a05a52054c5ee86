//! The detection pass: rejection of easy proposals, per-box scoring,
//! sub-box features, context fusion, box refinement and NMS.

mod boxes;
pub mod context;
pub mod detect;
pub mod features;
pub mod fit;
pub mod linear;
pub mod nms;
pub mod refine;
pub mod rejection;
mod warp;

pub use boxes::BoundingBox;
pub use context::{context_fuse_train, context_scores, ContextFusion};
pub use detect::{
    detect, detect_batch, finalize_image, score_image, DetectOptions, DetectStats, DetectorModels, EmitMode, ImageInput, ImageScores,
};
pub use features::{score_box, subbox_features, subbox_geometry, FeatureRecord, FeatureStore};
pub use linear::{train_linear_ova, LinearOva, LinearTrainConfig};
pub use nms::{nms, DEFAULT_NMS_IOU};
pub use refine::{refine_box, train_box_regressor, BoxRegressor};
pub use rejection::{reject_proposals, ScoredProposal, DEFAULT_REJECTION_THRESHOLD};
pub use warp::{crop_warp, resize};
