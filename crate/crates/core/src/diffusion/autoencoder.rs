use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::{adam_step, OptimizerState};
use crate::rng::{self, normal_tensor};
use crate::tensor::Tensor;

use super::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Encode,
    Decode,
}

/// Map between data space and latent space.
#[derive(Clone, Debug, PartialEq)]
pub enum Autoencoder {
    Identity {
        dim: usize,
    },
    /// `z = x W_e + b_e`, `x = z W_d + b_d`.
    Affine {
        enc_w: Tensor,
        enc_b: Tensor,
        dec_w: Tensor,
        dec_b: Tensor,
    },
}

impl Autoencoder {
    pub fn identity(dim: usize) -> Self {
        Autoencoder::Identity { dim }
    }

    /// Untrained affine map with small random weights.
    pub fn affine(data_dim: usize, latent_dim: usize, seed: u64) -> Self {
        let mut r = rng::rng(seed);
        let s = (1.0 / data_dim as f64).sqrt();
        Autoencoder::Affine {
            enc_w: normal_tensor(&mut r, &[data_dim, latent_dim]).scale(s),
            enc_b: Tensor::zeros(&[latent_dim]),
            dec_w: normal_tensor(&mut r, &[latent_dim, data_dim]).scale(s),
            dec_b: Tensor::zeros(&[data_dim]),
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            Autoencoder::Identity { dim } => *dim,
            Autoencoder::Affine { enc_w, .. } => enc_w.shape()[0],
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Autoencoder::Identity { dim } => *dim,
            Autoencoder::Affine { enc_w, .. } => enc_w.shape()[1],
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        match self {
            Autoencoder::Identity { .. } => vec![],
            Autoencoder::Affine {
                enc_w,
                enc_b,
                dec_w,
                dec_b,
            } => {
                vec![enc_w.clone(), enc_b.clone(), dec_w.clone(), dec_b.clone()]
            }
        }
    }

    fn width_for(&self, dir: Direction) -> usize {
        match dir {
            Direction::Encode => self.data_dim(),
            Direction::Decode => self.latent_dim(),
        }
    }

    /// Applies the encoder or decoder to `x` (`[n, width]`) on the graph.
    /// Weights enter as constants; the map stays differentiable in `x`.
    pub fn apply_graph(&self, g: &mut Graph, x: Var, dir: Direction) -> Result<Var> {
        let width = g.value(x).cols();
        if g.value(x).ndim() != 2 || width != self.width_for(dir) {
            return Err(Error::shape(
                "autoencode",
                format!(
                    "{:?} input {:?}, expected width {}",
                    dir,
                    g.value(x).shape(),
                    self.width_for(dir)
                ),
            ));
        }
        match self {
            Autoencoder::Identity { .. } => Ok(x),
            Autoencoder::Affine {
                enc_w,
                enc_b,
                dec_w,
                dec_b,
            } => {
                let (w, b) = match dir {
                    Direction::Encode => (enc_w, enc_b),
                    Direction::Decode => (dec_w, dec_b),
                };
                let w = g.constant(w.clone());
                let b = g.constant(b.clone());
                affine(g, x, w, b)
            }
        }
    }

    pub fn autoencode(&self, x: &Tensor, dir: Direction) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = self.apply_graph(&mut g, v, dir)?;
        Ok(g.value(out).clone())
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.autoencode(x, Direction::Encode)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.autoencode(z, Direction::Decode)
    }

    /// Root-mean-square reconstruction error over all entries of `x`.
    pub fn reconstruction_rms(&self, x: &Tensor) -> Result<f64> {
        let r = self.decode(&self.encode(x)?)?;
        let d = r.sub(x)?;
        Ok((d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt())
    }

    /// Fits an affine autoencoder by minimizing mean squared reconstruction
    /// error. Identity autoencoders are returned unchanged.
    pub fn train(self, x: &Tensor, cfg: &TrainConfig) -> Result<(Self, Vec<f64>)> {
        cfg.validate()?;
        let Autoencoder::Affine { .. } = &self else {
            return Ok((self, vec![]));
        };
        if x.rows() == 0 || x.ndim() != 2 {
            return Err(Error::Empty("autoencoder training data"));
        }
        if x.cols() != self.data_dim() {
            return Err(Error::shape(
                "autoencoder train",
                format!("{:?}", x.shape()),
            ));
        }
        let mut params = self.params();
        let mut state = OptimizerState::new(&params);
        let mut r = rng::rng(cfg.seed);
        let n = x.rows();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            let order = super::shuffled(n, &mut r);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let xb = super::gather_rows(x, chunk);
                let mut g = Graph::new();
                let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
                let xv = g.constant(xb);
                let z = affine(&mut g, xv, vars[0], vars[1])?;
                let rec = affine(&mut g, z, vars[2], vars[3])?;
                let se = g.squared_error(rec, xv)?;
                let loss = g.scale(se, 1.0 / g.value(xv).len() as f64);
                total += g.value(loss).item();
                batches += 1;
                let grads = g.backward(loss)?;
                let gs: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
                adam_step(&mut params, &gs, &mut state, cfg.lr)?;
            }
            epoch_losses.push(total / batches as f64);
        }
        let mut it = params.into_iter();
        let ae = Autoencoder::Affine {
            enc_w: it.next().unwrap(),
            enc_b: it.next().unwrap(),
            dec_w: it.next().unwrap(),
            dec_b: it.next().unwrap(),
        };
        Ok((ae, epoch_losses))
    }
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let rows = g.value(x).rows();
    let xw = g.matmul(x, w)?;
    let bb = g.repeat_rows(b, rows)?;
    g.add(xw, bb)
}
