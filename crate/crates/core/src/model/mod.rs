//! CVAE trajectory predictor: encoders, latent heads, decoders, and losses.

mod config;
mod cvae;
mod loss;

pub use config::{DecoderMode, ModelConfig};
pub use cvae::{stack_boxes, standard_normal, PredictionSet, TrainForward, TrajectoryModel};
pub use loss::{bom_l2, kl_gaussian, repeat_rows, reparameterize, traj_loss, LatentGaussian};
