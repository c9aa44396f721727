//! The recalibration, transfer and pooling blocks that sit on top of the tape.

pub mod head;
pub(crate) mod pooling;
pub mod se;

pub use head::{
    class_wise_avg, global_max_reference, head_forward, max_min_pool, multi_map_transfer, ClassScores,
    HeadConfig, HeadOutput, HeadParams, HeadVars,
};
pub use pooling::max_min_score;
pub use se::{excite, recalibrate, se_block, squeeze, GateVector, SeParams, SeVars};
