use rand::Rng as _;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BoundMlp, Mlp};
use crate::optim::{adam_step, OptimizerState};
use crate::rng::{self, normal_tensor};
use crate::tensor::Tensor;

use super::autoencoder::Autoencoder;
use super::schedule::NoiseSchedule;
use super::{gather_rows, shuffled, TrainConfig};

pub const TIME_DIM: usize = 16;
pub const COND_DIM: usize = 8;
pub const HIDDEN: usize = 64;
pub const HIDDEN_LAYERS: usize = 3;

/// Noise predictor `eps(z_t, t, y)`: an MLP over `[z_t, time features, y]`
/// plus a learned class-embedding table. Row `classes` of the table is the
/// null (unconditional) prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    mlp: Mlp,
    class_table: Tensor,
    latent_dim: usize,
}

pub struct BoundDenoiser {
    mlp: BoundMlp,
    table: Var,
}

impl BoundDenoiser {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.mlp.vars();
        v.push(self.table);
        v
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Sinusoidal features of a step index.
pub fn time_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    out.extend(freqs.iter().map(|f| (t as f64 * f).sin()));
    out.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
    out
}

impl DenoiserModel {
    pub fn new(latent_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut r = rng::rng(seed);
        let mut sizes = vec![latent_dim + TIME_DIM + COND_DIM];
        sizes.extend(std::iter::repeat_n(HIDDEN, HIDDEN_LAYERS));
        sizes.push(latent_dim);
        let mlp = Mlp::new(&sizes, &mut r);
        let class_table = normal_tensor(&mut r, &[num_classes + 1, COND_DIM]);
        DenoiserModel {
            mlp,
            class_table,
            latent_dim,
        }
    }

    pub fn from_parts(mlp: Mlp, class_table: Tensor) -> Result<Self> {
        if class_table.ndim() != 2 || class_table.shape()[0] < 3 {
            return Err(Error::shape(
                "denoiser",
                format!("class table {:?}", class_table.shape()),
            ));
        }
        let cond = class_table.shape()[1];
        let latent_dim = mlp.out_dim();
        if mlp.in_dim() != latent_dim + TIME_DIM + cond {
            return Err(Error::shape(
                "denoiser",
                format!(
                    "mlp input {} != {} + {} + {}",
                    mlp.in_dim(),
                    latent_dim,
                    TIME_DIM,
                    cond
                ),
            ));
        }
        Ok(DenoiserModel {
            mlp,
            class_table,
            latent_dim,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn class_table(&self) -> &Tensor {
        &self.class_table
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn cond_dim(&self) -> usize {
        self.class_table.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.class_table.shape()[0] - 1
    }

    /// Prompt embedding `y` for a class, or the null prompt for `None`, as `[1, cond]`.
    pub fn prompt_embedding(&self, class: Option<usize>) -> Result<Tensor> {
        let row = match class {
            Some(c) if c < self.num_classes() => c,
            Some(c) => {
                return Err(Error::InvalidArgument(format!(
                    "class {c} out of range 0..{}",
                    self.num_classes()
                )))
            }
            None => self.num_classes(),
        };
        Tensor::new(vec![1, self.cond_dim()], self.class_table.row(row).to_vec())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundDenoiser {
        let mlp = self.mlp.bind(g, trainable);
        let table = if trainable {
            g.leaf(self.class_table.clone())
        } else {
            g.constant(self.class_table.clone())
        };
        BoundDenoiser { mlp, table }
    }

    /// Predicted noise for latents `z` (`[n, latent]`) at per-row steps `ts`
    /// with per-row prompt embeddings `y` (`[n, cond]`).
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundDenoiser,
        z: Var,
        ts: &[usize],
        y: Var,
    ) -> Result<Var> {
        let zs = g.value(z).shape().to_vec();
        if zs.len() != 2 || zs[1] != self.latent_dim {
            return Err(Error::shape(
                "denoiser",
                format!("latent {zs:?}, width {}", self.latent_dim),
            ));
        }
        let n = zs[0];
        if g.value(y).shape() != [n, self.cond_dim()] || ts.len() != n {
            return Err(Error::shape(
                "denoiser",
                format!(
                    "prompt {:?} / {} steps for {n} rows",
                    g.value(y).shape(),
                    ts.len()
                ),
            ));
        }
        let mut tf = Vec::with_capacity(n * TIME_DIM);
        for &t in ts {
            tf.extend(time_features(t, TIME_DIM));
        }
        let tf = g.constant(Tensor::new(vec![n, TIME_DIM], tf)?);
        let input = g.concat(&[z, tf, y])?;
        bound.mlp.forward(g, input)
    }

    /// Gathers prompt embeddings for class labels (`None` entries take the null row).
    pub fn lookup(
        &self,
        g: &mut Graph,
        bound: &BoundDenoiser,
        classes: &[Option<usize>],
    ) -> Result<Var> {
        let width = self.num_classes() + 1;
        let mut onehot = vec![0.0; classes.len() * width];
        for (i, c) in classes.iter().enumerate() {
            let col = c.unwrap_or(self.num_classes());
            if col >= width {
                return Err(Error::InvalidArgument(format!("class {col} out of range")));
            }
            onehot[i * width + col] = 1.0;
        }
        let oh = g.constant(Tensor::new(vec![classes.len(), width], onehot)?);
        g.matmul(oh, bound.table)
    }

    /// Untaped noise prediction for a single latent row.
    pub fn predict(&self, z: &Tensor, t: usize, y: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let yv = g.constant(y.clone());
        let out = self.forward(&mut g, &bound, zv, &vec![t; z.rows()], yv)?;
        Ok(g.value(out).clone())
    }

    fn set_params(&mut self, params: &[Tensor]) {
        let k = self.mlp.num_tensors();
        self.mlp.set_params(&params[..k]);
        self.class_table = params[k].clone();
    }

    fn params(&self) -> Vec<Tensor> {
        let mut p = self.mlp.params();
        p.push(self.class_table.clone());
        p
    }
}

/// Mean per-sample `||eps - eps_hat||^2` over fresh `(t, eps)` draws.
pub fn noise_loss(
    model: &DenoiserModel,
    latents: &Tensor,
    classes: &[Option<usize>],
    schedule: &NoiseSchedule,
    seed: u64,
    zero_predictor: bool,
) -> Result<f64> {
    let mut r = rng::rng(seed);
    let n = latents.rows();
    let ts: Vec<usize> = (0..n)
        .map(|_| r.random_range(1..=schedule.steps()))
        .collect();
    let eps = normal_tensor(&mut r, latents.shape());
    let zt = noisy_rows(latents, &eps, &ts, schedule)?;
    let pred = if zero_predictor {
        Tensor::zeros(latents.shape())
    } else {
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let z = g.constant(zt);
        let y = model.lookup(&mut g, &b, classes)?;
        let out = model.forward(&mut g, &b, z, &ts, y)?;
        g.value(out).clone()
    };
    let d = pred.sub(&eps)?;
    Ok(d.data().iter().map(|x| x * x).sum::<f64>() / n as f64)
}

fn noisy_rows(z0: &Tensor, eps: &Tensor, ts: &[usize], schedule: &NoiseSchedule) -> Result<Tensor> {
    let cols = z0.cols();
    let mut out = Vec::with_capacity(z0.len());
    for (i, &t) in ts.iter().enumerate() {
        let row = Tensor::vector(z0.row(i).to_vec());
        let e = Tensor::vector(eps.row(i).to_vec());
        out.extend(schedule.q_sample(&row, t, &e)?.into_data());
    }
    Tensor::new(vec![ts.len(), cols], out)
}

/// Fits the denoiser on the noise-estimation objective. Each example's class
/// is replaced by the null prompt with probability `uncond_prob`, so the model
/// also supports prompt-free sampling.
pub fn train_denoiser(
    mut model: DenoiserModel,
    xs: &Tensor,
    classes: &[usize],
    ae: &Autoencoder,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    uncond_prob: f64,
) -> Result<(DenoiserModel, TrainReport)> {
    cfg.validate()?;
    if xs.ndim() != 2 || classes.is_empty() {
        return Err(Error::Empty("denoiser training set"));
    }
    if xs.rows() != classes.len() {
        return Err(Error::shape(
            "train_denoiser",
            format!("{} rows, {} labels", xs.rows(), classes.len()),
        ));
    }
    let latents = ae.encode(xs)?;
    let n = latents.rows();
    let mut params = model.params();
    let mut state = OptimizerState::new(&params);
    let mut r = rng::rng(cfg.seed);
    let mut report = TrainReport::default();

    for _ in 0..cfg.epochs {
        let order = shuffled(n, &mut r);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let z0 = gather_rows(&latents, chunk);
            let ts: Vec<usize> = chunk
                .iter()
                .map(|_| r.random_range(1..=schedule.steps()))
                .collect();
            let labels: Vec<Option<usize>> = chunk
                .iter()
                .map(|&i| (r.random::<f64>() >= uncond_prob).then_some(classes[i]))
                .collect();
            let eps = normal_tensor(&mut r, z0.shape());
            let zt = noisy_rows(&z0, &eps, &ts, schedule)?;

            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let z = g.constant(zt);
            let y = model.lookup(&mut g, &bound, &labels)?;
            let pred = model.forward(&mut g, &bound, z, &ts, y)?;
            let target = g.constant(eps);
            let se = g.squared_error(pred, target)?;
            let loss = g.scale(se, 1.0 / chunk.len() as f64);
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("denoiser loss {lv}")));
            }
            total += lv;
            batches += 1;
            let grads = g.backward(loss)?;
            let gs: Vec<Tensor> = bound.vars().iter().map(|&v| grads.get(v)).collect();
            adam_step(&mut params, &gs, &mut state, cfg.lr)?;
            model.set_params(&params);
        }
        report.epoch_losses.push(total / batches as f64);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_matches_latent_shape_and_is_deterministic() {
        let m = DenoiserModel::new(6, 3, 5);
        let z = Tensor::matrix(&[vec![0.1, 0.2, -0.3, 0.0, 1.0, -1.0]]);
        let y = m.prompt_embedding(Some(1)).unwrap();
        let a = m.predict(&z, 17, &y).unwrap();
        let b = m.predict(&z, 17, &y).unwrap();
        assert_eq!(a.shape(), z.shape());
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn width_mismatch_errors() {
        let m = DenoiserModel::new(6, 3, 5);
        let y = m.prompt_embedding(None).unwrap();
        assert!(m.predict(&Tensor::zeros(&[1, 5]), 3, &y).is_err());
        assert!(m
            .predict(&Tensor::zeros(&[1, 6]), 3, &Tensor::zeros(&[1, 4]))
            .is_err());
        assert!(m.prompt_embedding(Some(3)).is_err());
    }

    #[test]
    fn time_features_are_bounded() {
        let f = time_features(999, TIME_DIM);
        assert_eq!(f.len(), TIME_DIM);
        assert!(f.iter().all(|x| x.abs() <= 1.0));
        assert_eq!(time_features(0, 4), vec![0.0, 0.0, 1.0, 1.0]);
    }
}
