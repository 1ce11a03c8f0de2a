//! The latent update and prompt tuning.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One evaluation of the guidance objective at the current state.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub terms: Vec<f64>,
    /// Gradient per latent; empty when gradients were not requested.
    pub latent_grads: Vec<Tensor>,
    /// Gradient per prompt embedding; empty when not requested.
    pub prompt_grads: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub latents: Vec<Tensor>,
    pub prompts: Vec<Tensor>,
    /// `N + 1` evaluations: one before each iteration plus the final state.
    pub evaluations: Vec<Evaluation>,
}

/// Runs `n` iterations of `z <- z - rate * grad_z L` on every latent and
/// `y <- y - lambda2 * grad_y L` on every prompt embedding, re-evaluating the
/// objective (a fresh tape) each iteration. `eval(latents, prompts,
/// need_grads)` computes the objective.
///
/// A zero rate leaves its tensors bit-identical.
pub fn optimize<F>(
    mut latents: Vec<Tensor>,
    mut prompts: Vec<Tensor>,
    rates: &[f64],
    lambda2: f64,
    n: usize,
    mut eval: F,
) -> Result<Outcome>
where
    F: FnMut(&[Tensor], &[Tensor], bool) -> Result<Evaluation>,
{
    assert_eq!(rates.len(), latents.len(), "one rate per latent");
    let mut evaluations = Vec::with_capacity(n + 1);
    for _ in 0..n {
        let ev = eval(&latents, &prompts, true)?;
        check_finite(&ev)?;
        for ((z, g), &rate) in latents.iter_mut().zip(&ev.latent_grads).zip(rates) {
            *z = latent_update(z, g, rate)?;
        }
        if lambda2 != 0.0 {
            for (y, g) in prompts.iter_mut().zip(&ev.prompt_grads) {
                *y = prompt_tune_step(y, g, lambda2)?;
            }
        }
        evaluations.push(Evaluation {
            latent_grads: vec![],
            prompt_grads: vec![],
            ..ev
        });
    }
    let last = eval(&latents, &prompts, false)?;
    if !last.loss.is_finite() {
        return Err(Error::NonFinite(format!("guidance loss {}", last.loss)));
    }
    evaluations.push(last);
    Ok(Outcome {
        latents,
        prompts,
        evaluations,
    })
}

fn check_finite(ev: &Evaluation) -> Result<()> {
    if !ev.loss.is_finite() {
        return Err(Error::NonFinite(format!("guidance loss {}", ev.loss)));
    }
    if ev
        .latent_grads
        .iter()
        .chain(&ev.prompt_grads)
        .any(|g| !g.all_finite())
    {
        return Err(Error::NonFinite(format!(
            "guidance gradient at loss {}",
            ev.loss
        )));
    }
    Ok(())
}

fn latent_update(z: &Tensor, grad: &Tensor, rate: f64) -> Result<Tensor> {
    if rate == 0.0 {
        return Ok(z.clone());
    }
    z.zip_map(grad, |z, g| z - rate * g)
}

/// Single-latent guidance: `n` steps of `z <- z - lambda1 * grad L(z)`.
/// Returns the final latent and the `n + 1` loss values.
pub fn guide_step<F>(
    z: &Tensor,
    lambda1: f64,
    n: usize,
    mut loss_grad: F,
) -> Result<(Tensor, Vec<f64>)>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    let out = optimize(vec![z.clone()], vec![], &[lambda1], 0.0, n, |zs, _, _| {
        let (loss, g) = loss_grad(&zs[0])?;
        Ok(Evaluation {
            loss,
            terms: vec![loss],
            latent_grads: vec![g],
            prompt_grads: vec![],
        })
    })?;
    let losses = out.evaluations.iter().map(|e| e.loss).collect();
    Ok((out.latents.into_iter().next().unwrap(), losses))
}

/// `y - lambda2 * grad`.
pub fn prompt_tune_step(y: &Tensor, grad: &Tensor, lambda2: f64) -> Result<Tensor> {
    if y.shape() != grad.shape() {
        return Err(Error::shape(
            "prompt_tune_step",
            format!("{:?} vs {:?}", y.shape(), grad.shape()),
        ));
    }
    if lambda2 == 0.0 {
        return Ok(y.clone());
    }
    y.zip_map(grad, |y, g| y - lambda2 * g)
}
