//! Action-class contrastive loss, the instance-discrimination baseline, and
//! construction of positive/negative sets (augmented and decoded members).

mod batch;
mod loss;

pub use batch::{
    augment_anchor, partition, synth_samples, ContrastiveBatch, LossWeights, Origin, SyntheticSample,
};
pub use loss::{action_contrastive_loss, combined_loss, simclr_loss, ContrastiveOptions, ContrastiveOutput};
