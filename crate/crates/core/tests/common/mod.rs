#![allow(dead_code)]

use latent_aligner::aligner::{Evaluation, ModelSet, Task};
use latent_aligner::autodiff::{finite_diff_grad, max_relative_error, Graph, Var};
use latent_aligner::binder::{BinderModel, Modality};
use latent_aligner::diffusion::{Autoencoder, DenoiserModel, NoiseSchedule};
use latent_aligner::rng::{normal_tensor, rng};
use latent_aligner::{Result, Tensor};
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;

/// A random computation over four leaves: `x`, `y` (`[n, d]`), `w` (`[d, d]`)
/// and `c` (`[1, d]`). The op sequence is fixed by `seed`.
pub struct RandomGraph {
    pub leaves: Vec<Tensor>,
    ops: Vec<(u8, usize, usize, f64)>,
    tail: Vec<(u8, usize, usize)>,
}

impl RandomGraph {
    /// Draws graphs until one evaluates cleanly (e.g. no normalization of an
    /// exactly-zero row such as `x - x`).
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        loop {
            let g = Self::draw(&mut r);
            if g.loss(&g.leaves).is_ok_and(f64::is_finite) {
                return g;
            }
        }
    }

    fn draw(r: &mut latent_aligner::rng::Rng) -> Self {
        let n = r.random_range(2..5);
        let d = r.random_range(2..5);
        let leaves = vec![
            normal_tensor(r, &[n, d]),
            normal_tensor(r, &[n, d]),
            normal_tensor(r, &[d, d]).scale(0.7),
            normal_tensor(r, &[1, d]),
        ];
        let ops = (0..r.random_range(3..9))
            .map(|_| {
                (
                    r.random_range(0..10u8),
                    r.random_range(0..64),
                    r.random_range(0..64),
                    r.random_range(-1.5..1.5),
                )
            })
            .collect();
        let tail = (0..r.random_range(1..4))
            .map(|_| {
                (
                    r.random_range(0..6u8),
                    r.random_range(0..64),
                    r.random_range(0..64),
                )
            })
            .collect();
        RandomGraph { leaves, ops, tail }
    }

    /// Records the graph; returns the scalar loss and the leaf handles.
    pub fn build(&self, g: &mut Graph, leaves: &[Tensor]) -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let (w, c) = (vars[2], vars[3]);
        let n = leaves[0].rows();
        let mut pool = vec![vars[0], vars[1]];
        for &(op, i, j, s) in &self.ops {
            let a = pool[i % pool.len()];
            let b = pool[j % pool.len()];
            let out = match op {
                0 => g.matmul(a, w)?,
                1 => g.add(a, b)?,
                2 => g.sub(a, b)?,
                3 => g.mul(a, b)?,
                4 => g.scale(a, s),
                5 => g.tanh(a),
                6 => g.softplus(a),
                7 => g.l2_normalize(a)?,
                8 => {
                    let rc = g.repeat_rows(c, n)?;
                    g.add(a, rc)?
                }
                _ => {
                    let bt = g.transpose(b)?;
                    let sq = g.matmul(a, bt)?;
                    let sq = g.tanh(sq);
                    let two = g.concat(&[a, b])?;
                    let back = g.reshape(two, &[n, 2, leaves[0].cols()])?;
                    let back = g.reshape(back, &[n, 2 * leaves[0].cols()])?;
                    let left = g.matmul(sq, back)?;
                    let l = g.l2_normalize(left)?;
                    let cols = leaves[0].cols();
                    let proj = g.constant(Tensor::filled(&[2 * cols, cols], 0.5));
                    g.matmul(l, proj)?
                }
            };
            pool.push(out);
        }
        let mut loss: Option<Var> = None;
        for &(op, i, j) in &self.tail {
            let a = pool[i % pool.len()];
            let b = pool[j % pool.len()];
            let term = match op {
                0 => g.sum(a),
                1 => g.mean(a),
                2 => g.squared_error(a, b)?,
                3 => {
                    let cs = g.cosine_similarity(a, b)?;
                    g.sum(cs)
                }
                4 => {
                    let l = g.logsumexp_rows(a)?;
                    g.sum(l)
                }
                _ => {
                    let bt = g.transpose(b)?;
                    let m = g.matmul(a, bt)?;
                    let d = g.diag(m)?;
                    g.mean(d)
                }
            };
            loss = Some(match loss {
                Some(l) => g.add(l, term)?,
                None => term,
            });
        }
        Ok((loss.unwrap(), vars))
    }

    pub fn loss(&self, leaves: &[Tensor]) -> Result<f64> {
        let mut g = Graph::new();
        let (l, _) = self.build(&mut g, leaves)?;
        Ok(g.value(l).item())
    }

    /// Largest relative error between reverse-mode and central-difference
    /// gradients over all leaves.
    pub fn max_error(&self) -> Result<f64> {
        let mut g = Graph::new();
        let (loss, vars) = self.build(&mut g, &self.leaves)?;
        let grads = g.backward(loss)?;
        let mut worst: f64 = 0.0;
        for (k, &v) in vars.iter().enumerate() {
            let fd = finite_diff_grad(
                |x| {
                    let mut ls = self.leaves.clone();
                    ls[k] = x.clone();
                    self.loss(&ls)
                },
                &self.leaves[k],
                FD_STEP,
            )?;
            worst = worst.max(max_relative_error(&grads.get(v), &fd));
        }
        Ok(worst)
    }
}

/// Small untrained model set with affine latents.
pub fn untrained_models(seed: u64) -> ModelSet {
    let (d, latent, classes, frame) = (32, 16, 8, 8);
    ModelSet {
        schedule: NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap(),
        denoiser_v: DenoiserModel::new(latent, classes, seed),
        denoiser_a: DenoiserModel::new(latent, classes, seed + 1),
        ae_v: Autoencoder::affine(d, latent, seed + 2),
        ae_a: Autoencoder::affine(d, latent, seed + 3),
        binder: BinderModel::new(d, d, classes, frame, 0.07, seed + 4),
    }
}

/// A random guidance state: task, step, latents, prompts and target embeddings.
pub struct GuidanceState {
    pub task: Task,
    pub t: usize,
    pub latents: Vec<Tensor>,
    pub prompts: Vec<Tensor>,
    pub e_cond: Tensor,
    pub e_prompt: Option<Tensor>,
    pub through_denoiser: bool,
}

impl GuidanceState {
    pub fn random(models: &ModelSet, seed: u64) -> Self {
        let mut r = rng(seed);
        let task = Task::ALL[r.random_range(0..4)];
        let t = r.random_range(1..=1000);
        let n_branch = if task == Task::Joint { 2 } else { 1 };
        let latents = (0..n_branch)
            .map(|_| normal_tensor(&mut r, &[1, 16]))
            .collect();
        let prompts = (0..n_branch)
            .map(|_| normal_tensor(&mut r, &[1, 8]))
            .collect();
        let class = r.random_range(0..8);
        let e_prompt = models.binder.embed_prompt(class).unwrap();
        let cond_m = task
            .cross_modalities()
            .map(|(c, _)| c)
            .unwrap_or(Modality::V);
        let width = models.binder.input_dim(cond_m);
        let e_cond = models
            .binder
            .embed(cond_m, &normal_tensor(&mut r, &[1, width]))
            .unwrap();
        let with_prompt = task == Task::Joint || r.random_bool(0.5);
        GuidanceState {
            task,
            t,
            latents,
            prompts,
            e_cond,
            e_prompt: with_prompt.then_some(e_prompt),
            through_denoiser: true,
        }
    }

    pub fn evaluate(
        &self,
        models: &ModelSet,
        latents: &[Tensor],
        prompts: &[Tensor],
        need: bool,
    ) -> Result<Evaluation> {
        match self.task {
            Task::Joint => models.joint_objective(
                latents,
                prompts,
                self.t,
                self.e_prompt.as_ref().unwrap(),
                self.through_denoiser,
                need,
            ),
            task => models.cross_objective(
                task,
                &latents[0],
                &prompts[0],
                self.t,
                &self.e_cond,
                self.e_prompt.as_ref(),
                self.through_denoiser,
                need,
            ),
        }
    }

    /// Largest relative error of the latent and prompt gradients against
    /// central differences of the full objective. Only meaningful when
    /// differentiating through the denoiser.
    pub fn max_error(&self, models: &ModelSet) -> Result<f64> {
        let ev = self.evaluate(models, &self.latents, &self.prompts, true)?;
        let mut worst: f64 = 0.0;
        for k in 0..self.latents.len() {
            let fd = finite_diff_grad(
                |x| {
                    let mut zs = self.latents.clone();
                    zs[k] = x.clone();
                    Ok(self.evaluate(models, &zs, &self.prompts, false)?.loss)
                },
                &self.latents[k],
                FD_STEP,
            )?;
            worst = worst.max(max_relative_error(&ev.latent_grads[k], &fd));
            let fd = finite_diff_grad(
                |y| {
                    let mut ys = self.prompts.clone();
                    ys[k] = y.clone();
                    Ok(self.evaluate(models, &self.latents, &ys, false)?.loss)
                },
                &self.prompts[k],
                FD_STEP,
            )?;
            worst = worst.max(max_relative_error(&ev.prompt_grads[k], &fd));
        }
        Ok(worst)
    }
}
