use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::binder::Modality;
use crate::diffusion::SamplerKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Generate modality A conditioned on a modality-V sample.
    V2a,
    /// Generate modality V conditioned on a modality-A sample.
    A2v,
    /// Generate modality A conditioned on a single still frame.
    I2a,
    /// Generate both modalities from a class prompt.
    Joint,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::V2a, Task::A2v, Task::I2a, Task::Joint];

    /// `(condition, generated)` modalities for cross-modal tasks.
    pub fn cross_modalities(self) -> Option<(Modality, Modality)> {
        match self {
            Task::V2a => Some((Modality::V, Modality::A)),
            Task::A2v => Some((Modality::A, Modality::V)),
            Task::I2a => Some((Modality::I, Modality::A)),
            Task::Joint => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::V2a => "v2a",
            Task::A2v => "a2v",
            Task::I2a => "i2a",
            Task::Joint => "joint",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown task {s:?} (expected v2a, a2v, i2a or joint)"
                ))
            })
    }
}

/// Knobs of one guided generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub task: Task,
    /// Latent step size. In joint mode this is the V branch.
    pub lambda1: f64,
    /// Latent step size of the A branch in joint mode; unused otherwise.
    pub lambda1_audio: f64,
    /// Prompt-embedding step size.
    pub lambda2: f64,
    /// Inner optimization iterations per guided denoising step.
    pub num_optim_steps: usize,
    pub inf_steps: usize,
    /// Fraction of denoising steps, counted from the start, left unguided.
    pub optim_start: f64,
    pub prompt_tuning: bool,
    /// Differentiate through the noise prediction (otherwise treat it as constant).
    pub grad_through_denoiser: bool,
    pub sampler: SamplerKind,
    pub seed: u64,
}

pub const DEFAULT_SEED: u64 = 33;
pub const DEFAULT_LAMBDA2: f64 = 0.01;

impl GuidanceConfig {
    /// Per-task defaults (Lr, Inf_steps, num_optim_steps, optim_start, seed).
    pub fn for_task(task: Task) -> Self {
        let (lambda1, lambda1_audio, optim_start, prompt_tuning) = match task {
            Task::V2a => (0.1, 0.1, 0.2, false),
            Task::A2v => (0.01, 0.01, 0.0, true),
            Task::I2a => (0.1, 0.1, 0.2, false),
            Task::Joint => (0.01, 0.1, 0.0, true),
        };
        GuidanceConfig {
            task,
            lambda1,
            lambda1_audio,
            lambda2: DEFAULT_LAMBDA2,
            num_optim_steps: 1,
            inf_steps: 30,
            optim_start,
            prompt_tuning,
            grad_through_denoiser: true,
            sampler: SamplerKind::Ddim,
            seed: DEFAULT_SEED,
        }
    }

    /// Same configuration with every step size zeroed.
    pub fn without_guidance(&self) -> Self {
        GuidanceConfig {
            lambda1: 0.0,
            lambda1_audio: 0.0,
            lambda2: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda1_audio", self.lambda1_audio),
            ("lambda2", self.lambda2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.optim_start) {
            return Err(Error::Config(format!(
                "optim_start must be in [0, 1], got {}",
                self.optim_start
            )));
        }
        if self.inf_steps == 0 {
            return Err(Error::Config("inf_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Index (from the start of denoising) of the first guided step.
    pub fn first_guided_step(&self) -> usize {
        // small slack so that e.g. 0.2 * 30 lands on 6 regardless of rounding
        ((self.optim_start * self.inf_steps as f64) + 1e-9).floor() as usize
    }

    pub fn guided_step_count(&self) -> usize {
        self.inf_steps - self.first_guided_step().min(self.inf_steps)
    }

    /// Effective prompt step size (zero when tuning is disabled).
    pub fn prompt_rate(&self) -> f64 {
        if self.prompt_tuning {
            self.lambda2
        } else {
            0.0
        }
    }
}
