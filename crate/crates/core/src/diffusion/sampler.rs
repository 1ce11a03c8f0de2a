use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, normal_tensor, Rng};
use crate::tensor::Tensor;

use super::denoiser::DenoiserModel;
use super::schedule::{predict_z0_with, NoiseSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Deterministic DDIM (eta = 0).
    #[default]
    Ddim,
    /// Ancestral sampling with the fixed posterior variance.
    Ddpm,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(SamplerKind::Ddim),
            "ddpm" => Ok(SamplerKind::Ddpm),
            other => Err(Error::Config(format!("unknown sampler {other:?}"))),
        }
    }
}

/// Latents from `z_T` down to `z_0`; `timesteps[i]` is the step of `latents[i]`
/// (the final entry is step 0).
#[derive(Clone, Debug)]
pub struct LatentTrajectory {
    pub timesteps: Vec<usize>,
    pub latents: Vec<Tensor>,
}

impl LatentTrajectory {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn final_latent(&self) -> &Tensor {
        self.latents.last().expect("trajectory is never empty")
    }
}

/// Starting noise and the stream that continues to drive DDPM noise.
pub fn initial_latent(latent_dim: usize, seed: u64) -> (Tensor, Rng) {
    let mut r = rng::rng(seed);
    let z = normal_tensor(&mut r, &[1, latent_dim]);
    (z, r)
}

/// Moves `z_t` to step `t_prev < t` given the predicted noise.
pub fn sampler_step(
    kind: SamplerKind,
    schedule: &NoiseSchedule,
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!(
            "step {t} -> {t_prev} is not a descent"
        )));
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let z0 = predict_z0_with(z_t, eps_hat, ab_t)?;
    match kind {
        SamplerKind::Ddim => {
            let (a, b) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
            z0.zip_map(eps_hat, |z, e| a * z + b * e)
        }
        SamplerKind::Ddpm => {
            // posterior q(z_prev | z_t, z0) over the strided step
            let alpha = ab_t / ab_prev;
            let beta = 1.0 - alpha;
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
            let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
            let mean = z0.zip_map(z_t, |a, b| c0 * a + ct * b)?;
            if t_prev == 0 {
                return Ok(mean);
            }
            let var = (1.0 - ab_prev) / (1.0 - ab_t) * beta;
            let noise = normal_tensor(rng, z_t.shape());
            mean.zip_map(&noise, |m, n| m + var.sqrt() * n)
        }
    }
}

/// Unguided sampling of one latent from the prompt embedding `y` (`[1, cond]`).
pub fn sample_vanilla(
    model: &DenoiserModel,
    y: &Tensor,
    schedule: &NoiseSchedule,
    n_steps: usize,
    kind: SamplerKind,
    seed: u64,
) -> Result<LatentTrajectory> {
    let steps = schedule.inference_steps(n_steps)?;
    let (mut z, mut r) = initial_latent(model.latent_dim(), seed);
    let mut traj = LatentTrajectory {
        timesteps: vec![steps[0]],
        latents: vec![z.clone()],
    };
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let eps = model.predict(&z, t, y)?;
        z = sampler_step(kind, schedule, &z, &eps, t, t_prev, &mut r)?;
        traj.timesteps.push(t_prev);
        traj.latents.push(z.clone());
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (DenoiserModel, NoiseSchedule) {
        (
            DenoiserModel::new(4, 2, 3),
            NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap(),
        )
    }

    #[test]
    fn ddim_is_deterministic_and_sized() {
        let (m, s) = setup();
        let y = m.prompt_embedding(Some(0)).unwrap();
        let a = sample_vanilla(&m, &y, &s, 30, SamplerKind::Ddim, 9).unwrap();
        let b = sample_vanilla(&m, &y, &s, 30, SamplerKind::Ddim, 9).unwrap();
        assert_eq!(a.len(), 31);
        assert_eq!(*a.timesteps.last().unwrap(), 0);
        assert!(a.latents.iter().zip(&b.latents).all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn ddpm_depends_on_seed() {
        let (m, s) = setup();
        let y = m.prompt_embedding(None).unwrap();
        let a = sample_vanilla(&m, &y, &s, 10, SamplerKind::Ddpm, 1).unwrap();
        let b = sample_vanilla(&m, &y, &s, 10, SamplerKind::Ddpm, 2).unwrap();
        let c = sample_vanilla(&m, &y, &s, 10, SamplerKind::Ddpm, 1).unwrap();
        assert!(!a.final_latent().bit_eq(b.final_latent()));
        assert!(a.final_latent().bit_eq(c.final_latent()));
    }

    #[test]
    fn too_many_steps_is_an_error() {
        let (m, s) = setup();
        let y = m.prompt_embedding(None).unwrap();
        assert!(sample_vanilla(&m, &y, &s, 1001, SamplerKind::Ddim, 1).is_err());
    }

    #[test]
    fn ddpm_full_schedule_variance_is_beta_tilde() {
        // with unit stride the strided posterior variance reduces to
        // ((1 - ab_{t-1}) / (1 - ab_t)) * beta_t
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let t = 20;
        let ab_t = s.alpha_bar(t);
        let ab_prev = s.alpha_bar(t - 1);
        let strided = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev);
        let tilde = (1.0 - ab_prev) / (1.0 - ab_t) * s.beta(t);
        assert!((strided - tilde).abs() < 1e-15);
    }
}
