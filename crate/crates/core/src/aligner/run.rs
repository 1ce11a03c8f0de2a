//! Guided sampling loops.
//!
//! Both loops walk the inference step grid from `T` down. At step index `i`
//! (counted from the start of denoising) the current latent is first
//! optimized when `i >= first_guided_step`, then denoised one step. With all
//! step sizes zero this reproduces [`sample_vanilla`](crate::diffusion::sample_vanilla)
//! bit for bit.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::binder::{BinderModel, Modality};
use crate::diffusion::{
    initial_latent, sampler_step, Autoencoder, DenoiserModel, Direction, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

use super::config::{GuidanceConfig, Task};
use super::guide::{optimize, Evaluation};
use super::loss::{cross_guidance_loss_graph, joint_guidance_loss_graph};

/// Everything a generation needs: the shared step grid, one denoiser and
/// autoencoder per modality, and the frozen binder.
#[derive(Clone, Debug)]
pub struct ModelSet {
    pub schedule: NoiseSchedule,
    pub denoiser_v: DenoiserModel,
    pub denoiser_a: DenoiserModel,
    pub ae_v: Autoencoder,
    pub ae_a: Autoencoder,
    pub binder: BinderModel,
}

struct Branch<'a> {
    denoiser: &'a DenoiserModel,
    ae: &'a Autoencoder,
    modality: Modality,
}

impl ModelSet {
    fn branch(&self, m: Modality) -> Branch<'_> {
        match m {
            Modality::A => Branch {
                denoiser: &self.denoiser_a,
                ae: &self.ae_a,
                modality: m,
            },
            _ => Branch {
                denoiser: &self.denoiser_v,
                ae: &self.ae_v,
                modality: Modality::V,
            },
        }
    }

    /// Decodes a final latent of the given generative modality.
    pub fn decode(&self, m: Modality, z: &Tensor) -> Result<Tensor> {
        self.branch(m).ae.decode(z)
    }

    /// Binder embedding of the clean-sample estimate at step `t`:
    /// `z_t -> eps(z_t, t, y) -> z0 estimate -> decode -> embed`.
    /// Without `through_denoiser` the noise prediction is a constant.
    fn predicted_embedding(
        &self,
        g: &mut Graph,
        m: Modality,
        z: Var,
        y: Var,
        t: usize,
        through_denoiser: bool,
    ) -> Result<Var> {
        let b = self.branch(m);
        let bound = b.denoiser.bind(g, false);
        let (z_in, y_in) = if through_denoiser {
            (z, y)
        } else {
            (g.detach(z), g.detach(y))
        };
        let eps = b.denoiser.forward(g, &bound, z_in, &[t], y_in)?;
        let z0 = self.schedule.predict_z0_graph(g, z, eps, t)?;
        let x0 = b.ae.apply_graph(g, z0, Direction::Decode)?;
        self.binder.embed_graph(g, b.modality, x0)
    }

    /// Full cross-modal guidance objective at one state, with gradients with
    /// respect to the latent and the prompt embedding.
    pub fn cross_objective(
        &self,
        task: Task,
        z: &Tensor,
        y: &Tensor,
        t: usize,
        e_cond: &Tensor,
        e_prompt: Option<&Tensor>,
        through_denoiser: bool,
        need_grads: bool,
    ) -> Result<Evaluation> {
        let (_, gen) = task
            .cross_modalities()
            .ok_or_else(|| Error::Config(format!("{task} is not a cross-modal task")))?;
        let mut g = Graph::new();
        let zv = g.leaf(z.clone());
        let yv = g.leaf(y.clone());
        let e_gen = self.predicted_embedding(&mut g, gen, zv, yv, t, through_denoiser)?;
        let ec = g.constant(e_cond.clone());
        let ep = e_prompt.map(|p| g.constant(p.clone()));
        let (loss, terms) = cross_guidance_loss_graph(&mut g, e_gen, ec, ep)?;
        finish(&g, loss, &terms, &[zv], &[yv], need_grads)
    }

    /// Triangle objective over both branches.
    pub fn joint_objective(
        &self,
        latents: &[Tensor],
        prompts: &[Tensor],
        t: usize,
        e_prompt: &Tensor,
        through_denoiser: bool,
        need_grads: bool,
    ) -> Result<Evaluation> {
        let mut g = Graph::new();
        let zv = g.leaf(latents[0].clone());
        let za = g.leaf(latents[1].clone());
        let yv = g.leaf(prompts[0].clone());
        let ya = g.leaf(prompts[1].clone());
        let ev = self.predicted_embedding(&mut g, Modality::V, zv, yv, t, through_denoiser)?;
        let ea = self.predicted_embedding(&mut g, Modality::A, za, ya, t, through_denoiser)?;
        let ep = g.constant(e_prompt.clone());
        let (loss, terms) = joint_guidance_loss_graph(&mut g, ev, ea, ep)?;
        finish(&g, loss, &terms, &[zv, za], &[yv, ya], need_grads)
    }
}

fn finish(
    g: &Graph,
    loss: Var,
    terms: &[Var],
    latents: &[Var],
    prompts: &[Var],
    need_grads: bool,
) -> Result<Evaluation> {
    let mut ev = Evaluation {
        loss: g.value(loss).item(),
        terms: terms.iter().map(|&t| g.value(t).item()).collect(),
        latent_grads: vec![],
        prompt_grads: vec![],
    };
    if need_grads {
        let grads = g.backward(loss)?;
        ev.latent_grads = latents.iter().map(|&v| grads.get(v)).collect();
        ev.prompt_grads = prompts.iter().map(|&v| grads.get(v)).collect();
    }
    Ok(ev)
}

/// Trace of one guided denoising step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Position in the denoising loop, 0 = first step (pure noise).
    pub step_index: usize,
    pub timestep: usize,
    /// Objective before each inner iteration and after the last one.
    pub losses: Vec<f64>,
    /// Individual loss terms for each entry of `losses`.
    pub terms: Vec<Vec<f64>>,
    /// Binder-space cosine between the generated estimate and its target
    /// (condition, or the other branch in joint mode) after the inner loop.
    pub alignment: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub task: Task,
    pub seed: u64,
    pub lambda1: f64,
    pub lambda1_audio: f64,
    pub lambda2: f64,
    /// Decoded modality-V sample, when generated.
    pub v: Option<Vec<f64>>,
    /// Decoded modality-A sample, when generated.
    pub a: Option<Vec<f64>>,
    pub steps: Vec<StepRecord>,
    /// Final prompt embedding(s): one for cross-modal tasks, `[y_v, y_a]` for joint.
    pub prompts: Vec<Vec<f64>>,
    #[serde(skip)]
    pub duration_ms: f64,
}

impl GenerationResult {
    pub fn sample(&self, m: Modality) -> Option<&[f64]> {
        match m {
            Modality::A => self.a.as_deref(),
            _ => self.v.as_deref(),
        }
    }
}

/// Generates the modality implied by `cfg.task`, steered toward `condition`
/// (`[1, width]` of the conditioning modality; a still frame for i2a).
pub fn run_cross_modal(
    condition: &Tensor,
    class_prompt: Option<usize>,
    models: &ModelSet,
    cfg: &GuidanceConfig,
) -> Result<GenerationResult> {
    cfg.validate()?;
    let (cond_m, gen_m) = cfg
        .task
        .cross_modalities()
        .ok_or_else(|| Error::Config("run_cross_modal needs task v2a, a2v or i2a".into()))?;
    let started = Instant::now();
    let e_cond = models.binder.embed(cond_m, condition)?;
    let e_prompt = class_prompt
        .map(|c| models.binder.embed_prompt(c))
        .transpose()?;
    let branch = models.branch(gen_m);
    let steps = models.schedule.inference_steps(cfg.inf_steps)?;
    let first = cfg.first_guided_step();

    let mut y = branch.denoiser.prompt_embedding(class_prompt)?;
    let (mut z, mut rng) = initial_latent(branch.denoiser.latent_dim(), cfg.seed);
    let mut records = Vec::with_capacity(cfg.guided_step_count());

    for (i, &t) in steps.iter().enumerate() {
        if i >= first {
            let out = optimize(
                vec![z],
                vec![y],
                &[cfg.lambda1],
                cfg.prompt_rate(),
                cfg.num_optim_steps,
                |zs, ys, need| {
                    models.cross_objective(
                        cfg.task,
                        &zs[0],
                        &ys[0],
                        t,
                        &e_cond,
                        e_prompt.as_ref(),
                        cfg.grad_through_denoiser,
                        need,
                    )
                },
            )?;
            let last = out.evaluations.last().unwrap();
            records.push(StepRecord {
                step_index: i,
                timestep: t,
                losses: out.evaluations.iter().map(|e| e.loss).collect(),
                terms: out.evaluations.iter().map(|e| e.terms.clone()).collect(),
                alignment: 1.0 - last.terms[0],
            });
            z = out.latents.into_iter().next().unwrap();
            y = out.prompts.into_iter().next().unwrap();
        }
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let eps = branch.denoiser.predict(&z, t, &y)?;
        z = sampler_step(cfg.sampler, &models.schedule, &z, &eps, t, t_prev, &mut rng)?;
    }

    let x = branch.ae.decode(&z)?.into_data();
    let (v, a) = match gen_m {
        Modality::A => (None, Some(x)),
        _ => (Some(x), None),
    };
    Ok(GenerationResult {
        task: cfg.task,
        seed: cfg.seed,
        lambda1: cfg.lambda1,
        lambda1_audio: cfg.lambda1_audio,
        lambda2: cfg.lambda2,
        v,
        a,
        steps: records,
        prompts: vec![y.into_data()],
        duration_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Seed of the A branch in joint mode (the V branch uses `cfg.seed`).
pub fn joint_audio_seed(seed: u64) -> u64 {
    derive_seed(seed, 1)
}

/// Joint generation of both modalities from a class prompt, guided by the
/// triangle loss. Each branch keeps its own prompt embedding.
pub fn run_joint(
    class_prompt: usize,
    models: &ModelSet,
    cfg: &GuidanceConfig,
) -> Result<GenerationResult> {
    cfg.validate()?;
    if cfg.task != Task::Joint {
        return Err(Error::Config(format!(
            "run_joint needs task joint, got {}",
            cfg.task
        )));
    }
    let started = Instant::now();
    let e_prompt = models.binder.embed_prompt(class_prompt)?;
    let steps = models.schedule.inference_steps(cfg.inf_steps)?;
    let first = cfg.first_guided_step();
    let (dv, da) = (&models.denoiser_v, &models.denoiser_a);

    let mut ys = vec![
        dv.prompt_embedding(Some(class_prompt))?,
        da.prompt_embedding(Some(class_prompt))?,
    ];
    let (zv, mut rng_v) = initial_latent(dv.latent_dim(), cfg.seed);
    let (za, mut rng_a) = initial_latent(da.latent_dim(), joint_audio_seed(cfg.seed));
    let mut zs = vec![zv, za];
    let mut records = Vec::with_capacity(cfg.guided_step_count());

    for (i, &t) in steps.iter().enumerate() {
        if i >= first {
            let out = optimize(
                zs,
                ys,
                &[cfg.lambda1, cfg.lambda1_audio],
                cfg.prompt_rate(),
                cfg.num_optim_steps,
                |z, y, need| {
                    models.joint_objective(z, y, t, &e_prompt, cfg.grad_through_denoiser, need)
                },
            )?;
            let last = out.evaluations.last().unwrap();
            records.push(StepRecord {
                step_index: i,
                timestep: t,
                losses: out.evaluations.iter().map(|e| e.loss).collect(),
                terms: out.evaluations.iter().map(|e| e.terms.clone()).collect(),
                alignment: 1.0 - last.terms[1],
            });
            zs = out.latents;
            ys = out.prompts;
        }
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let eps_v = dv.predict(&zs[0], t, &ys[0])?;
        let eps_a = da.predict(&zs[1], t, &ys[1])?;
        zs[0] = sampler_step(
            cfg.sampler,
            &models.schedule,
            &zs[0],
            &eps_v,
            t,
            t_prev,
            &mut rng_v,
        )?;
        zs[1] = sampler_step(
            cfg.sampler,
            &models.schedule,
            &zs[1],
            &eps_a,
            t,
            t_prev,
            &mut rng_a,
        )?;
    }

    Ok(GenerationResult {
        task: cfg.task,
        seed: cfg.seed,
        lambda1: cfg.lambda1,
        lambda1_audio: cfg.lambda1_audio,
        lambda2: cfg.lambda2,
        v: Some(models.ae_v.decode(&zs[0])?.into_data()),
        a: Some(models.ae_a.decode(&zs[1])?.into_data()),
        steps: records,
        prompts: ys.into_iter().map(Tensor::into_data).collect(),
        duration_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}
