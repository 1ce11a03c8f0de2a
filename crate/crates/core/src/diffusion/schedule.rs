use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Forward-process variance table. Step indices are 1-based: `t` ranges over
/// `1..=T`, and `alpha_bar(0)` is defined as 1 (clean data).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Guard against dividing by a vanishing `sqrt(alpha_bar)`.
pub const MIN_ALPHA_BAR: f64 = 1e-12;

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs T >= 2, got {steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let span = beta_end - beta_start;
        let betas = (0..steps)
            .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidArgument(
                "betas must be in (0, 1), at least two".into(),
            ));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `n` evenly spaced step indices from `T` down to 1.
    pub fn inference_steps(&self, n: usize) -> Result<Vec<usize>> {
        let big_t = self.steps();
        if n == 0 || n > big_t {
            return Err(Error::InvalidArgument(format!(
                "inference steps must be in 1..={big_t}, got {n}"
            )));
        }
        if n == 1 {
            return Ok(vec![big_t]);
        }
        let span = (big_t - 1) as f64 / (n - 1) as f64;
        Ok((0..n)
            .rev()
            .map(|i| 1 + (i as f64 * span).round() as usize)
            .collect())
    }

    /// Closed-form noisy latent `sqrt(ab) z0 + sqrt(1 - ab) eps`.
    pub fn q_sample(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        if z0.shape() != eps.shape() {
            return Err(Error::shape(
                "q_sample",
                format!("{:?} vs {:?}", z0.shape(), eps.shape()),
            ));
        }
        let ab = self.alpha_bar(t);
        q_sample_with(z0, eps, ab)
    }

    /// Clean-latent estimate `z_t / sqrt(ab) - sqrt((1 - ab) / ab) eps_hat`.
    pub fn predict_z0(&self, z_t: &Tensor, eps_hat: &Tensor, t: usize) -> Result<Tensor> {
        self.check(t)?;
        predict_z0_with(z_t, eps_hat, self.alpha_bar(t))
    }

    /// [`NoiseSchedule::predict_z0`] recorded on a graph.
    pub fn predict_z0_graph(&self, g: &mut Graph, z_t: Var, eps_hat: Var, t: usize) -> Result<Var> {
        self.check(t)?;
        let (inv, c) = z0_coefficients(self.alpha_bar(t))?;
        let a = g.scale(z_t, inv);
        let b = g.scale(eps_hat, c);
        g.sub(a, b)
    }
}

pub(crate) fn q_sample_with(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

pub(crate) fn z0_coefficients(alpha_bar: f64) -> Result<(f64, f64)> {
    if !(alpha_bar >= MIN_ALPHA_BAR) {
        return Err(Error::InvalidArgument(format!(
            "alpha_bar {alpha_bar:e} too small to invert"
        )));
    }
    Ok((
        1.0 / alpha_bar.sqrt(),
        ((1.0 - alpha_bar) / alpha_bar).sqrt(),
    ))
}

pub(crate) fn predict_z0_with(z_t: &Tensor, eps_hat: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let (inv, c) = z0_coefficients(alpha_bar)?;
    z_t.scale(inv).sub(&eps_hat.scale(c))
}
