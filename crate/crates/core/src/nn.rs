//! Small feed-forward networks on top of the tape.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, Rng};
use crate::tensor::Tensor;

/// Fully connected tanh network. Layer `i` maps `sizes[i] -> sizes[i+1]`;
/// the last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// An [`Mlp`] whose parameters have been placed on a graph.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
}

impl Mlp {
    pub fn new(sizes: &[usize], rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "an mlp needs at least one layer");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let std = (1.0 / w[0] as f64).sqrt();
            weights.push(normal_tensor(rng, &[w[0], w[1]]).scale(std));
            biases.push(Tensor::zeros(&[w[1]]));
        }
        Mlp { weights, biases }
    }

    /// Rebuilds from tensors in [`Mlp::params`] order.
    pub fn from_params(params: Vec<Tensor>) -> Result<Self> {
        if params.is_empty() || !params.len().is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "mlp needs weight/bias pairs, got {}",
                params.len()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut it = params.into_iter();
        while let (Some(w), Some(b)) = (it.next(), it.next()) {
            if w.ndim() != 2 || b.shape() != [w.shape()[1]] {
                return Err(Error::shape(
                    "mlp",
                    format!("weight {:?} bias {:?}", w.shape(), b.shape()),
                ));
            }
            if let Some(prev) = weights.last().map(|p: &Tensor| p.shape()[1]) {
                if prev != w.shape()[0] {
                    return Err(Error::shape(
                        "mlp",
                        format!("layer width {prev} feeds {:?}", w.shape()),
                    ));
                }
            }
            weights.push(w);
            biases.push(b);
        }
        Ok(Mlp { weights, biases })
    }

    pub fn in_dim(&self) -> usize {
        self.weights[0].shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.last().unwrap().shape()[1]
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.clone(), b.clone()])
            .collect()
    }

    pub fn set_params(&mut self, params: &[Tensor]) {
        for (i, (w, b)) in self
            .weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .enumerate()
        {
            *w = params[2 * i].clone();
            *b = params[2 * i + 1].clone();
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("{prefix}.{i}.weight"), w.clone()));
            out.push((format!("{prefix}.{i}.bias"), b.clone()));
        }
        out
    }

    pub fn num_tensors(&self) -> usize {
        2 * self.weights.len()
    }

    /// Places parameters on `g`, as roots when `trainable` and as constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let put = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let layers = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| (put(g, w), put(g, b)))
            .collect();
        BoundMlp { layers }
    }
}

impl BoundMlp {
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// `x` is `[n, in]`; returns `[n, out]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let rows = g.value(x).shape().first().copied().unwrap_or(1);
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let xw = g.matmul(h, w)?;
            let bias = g.repeat_rows(b, rows)?;
            h = g.add(xw, bias)?;
            if i + 1 < self.layers.len() {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    #[test]
    fn param_round_trip() {
        let m = Mlp::new(&[3, 5, 2], &mut rng(1));
        let back = Mlp::from_params(m.params()).unwrap();
        assert_eq!(m, back);
        assert_eq!((back.in_dim(), back.out_dim()), (3, 2));
    }

    #[test]
    fn rejects_mismatched_layers() {
        let m = Mlp::new(&[3, 5, 2], &mut rng(1));
        let mut p = m.params();
        p.swap(0, 2);
        assert!(Mlp::from_params(p).is_err());
    }

    #[test]
    fn forward_shape() {
        let m = Mlp::new(&[3, 4, 4, 2], &mut rng(2));
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let x = g.constant(Tensor::ones(&[5, 3]));
        let y = b.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).shape(), &[5, 2]);
    }
}
