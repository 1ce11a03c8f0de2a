//! Noise schedules, toy denoisers, latent autoencoders and unguided samplers.

pub mod autoencoder;
pub mod denoiser;
pub mod sampler;
pub mod schedule;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use autoencoder::{Autoencoder, Direction};
pub use denoiser::{noise_loss, train_denoiser, DenoiserModel, TrainReport};
pub use sampler::{initial_latent, sample_vanilla, sampler_step, LatentTrajectory, SamplerKind};
pub use schedule::NoiseSchedule;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid training config {self:?}"
            )));
        }
        Ok(())
    }
}

pub(crate) fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

pub(crate) fn gather_rows(x: &Tensor, rows: &[usize]) -> Tensor {
    let cols = x.cols();
    let mut out = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        out.extend_from_slice(x.row(r));
    }
    Tensor::new(vec![rows.len(), cols], out).expect("gathered shape")
}
