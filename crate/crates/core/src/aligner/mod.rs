//! Inference-time latent alignment.
//!
//! At a guided step the current latent `z_t` is mapped to a clean-sample
//! estimate, decoded, embedded by the frozen binder and scored against the
//! condition (and optionally a class prompt). The latent then takes plain
//! gradient steps on that score; optionally the prompt embedding does too.

pub mod config;
pub mod guide;
pub mod loss;
pub mod run;

pub use config::{GuidanceConfig, Task};
pub use guide::{guide_step, optimize, prompt_tune_step, Evaluation, Outcome};
pub use loss::{cross_guidance_loss, joint_guidance_loss};
pub use run::{
    joint_audio_seed, run_cross_modal, run_joint, GenerationResult, ModelSet, StepRecord,
};
