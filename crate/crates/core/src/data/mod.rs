//! Trajectory records, windowing, normalization, splits, batching, and the
//! synthetic dataset generator.

mod record;
mod split;
mod synthetic;
mod window;

pub use record::{read_jsonl, write_jsonl, BBox, LabelPolicy, TrajectoryRecord, Vocabulary, UNLABELED};
pub use split::{eval_batches, make_batches, Split, SplitSpec};
pub use synthetic::{gen_synthetic, MotionKind, SyntheticConfig, JITTER_SIGMA};
pub use window::{
    denormalize_boxes, extract_all, extract_windows, majority_action, normalize_boxes, TrajectoryWindow,
};
