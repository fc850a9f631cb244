//! The DCGAN pair: a latent-to-chip generator and a realness discriminator
//! whose block activations double as a feature extractor.

mod loss;
mod nets;
mod train;

pub use loss::{d_loss_grads, g_loss_grad, gan_losses, GanLosses, EPS};
pub use nets::{
    cast_state, pooled_features, sample_latent, Discriminator, GanArch, Generator, LatentVector, CHIP_SIDE,
    FEATURE_GRID, LATENT_DIM,
};
pub use train::{checkpoint_path, train_gan, write_gan_log, GanCheckpoint, GanLogRow, GanTrainConfig, GanTrainOutput};
