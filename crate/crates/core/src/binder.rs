//! Shared embedding space for the two modalities, their still frames and
//! class prompts.
//!
//! Every encoder ends in an L2 normalization, so embeddings live on the unit
//! sphere and `1 - cosine` is a distance in `[0, 2]`. Training uses InfoNCE
//! averaged over both retrieval directions.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::diffusion::{gather_rows, shuffled, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::optim::{adam_step, OptimizerState};
use crate::rng;
use crate::tensor::Tensor;
use crate::world::{still_frame, Dataset};

pub const EMBED_DIM: usize = 16;
pub const HIDDEN: usize = 64;
pub const DEFAULT_TAU: f64 = 0.07;
/// Tolerance for treating an input as unit norm.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    /// The "visual" analog.
    V,
    /// The "audio" analog.
    A,
    /// Class prompt (one-hot text stand-in).
    P,
    /// Single still frame of a modality-V sample.
    I,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::V, Modality::A, Modality::P, Modality::I];

    fn index(self) -> usize {
        match self {
            Modality::V => 0,
            Modality::A => 1,
            Modality::P => 2,
            Modality::I => 3,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::V => "v",
            Modality::A => "a",
            Modality::P => "p",
            Modality::I => "i",
        }
    }
}

/// Contrastive pairs optimized by [`train_binder`].
pub const TRAIN_PAIRS: [(Modality, Modality); 5] = [
    (Modality::V, Modality::A),
    (Modality::V, Modality::P),
    (Modality::A, Modality::P),
    (Modality::I, Modality::A),
    (Modality::I, Modality::P),
];

#[derive(Clone, Debug, PartialEq)]
pub struct BinderModel {
    encoders: Vec<Mlp>,
    tau: f64,
}

#[derive(Clone, Debug, Default)]
pub struct BinderReport {
    pub epoch_losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl BinderModel {
    /// Untrained encoders for modality widths `d_v`, `d_a`, `classes` (prompt)
    /// and `frame_width` (still frame).
    pub fn new(
        d_v: usize,
        d_a: usize,
        classes: usize,
        frame_width: usize,
        tau: f64,
        seed: u64,
    ) -> Self {
        let mut r = rng::rng(seed);
        let encoders = [d_v, d_a, classes, frame_width]
            .iter()
            .map(|&d| Mlp::new(&[d, HIDDEN, HIDDEN, EMBED_DIM], &mut r))
            .collect();
        BinderModel { encoders, tau }
    }

    pub fn from_parts(encoders: Vec<Mlp>, tau: f64) -> Result<Self> {
        if encoders.len() != 4
            || encoders
                .iter()
                .any(|e| e.out_dim() != encoders[0].out_dim())
        {
            return Err(Error::InvalidArgument(
                "binder needs four encoders of equal output width".into(),
            ));
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        Ok(BinderModel { encoders, tau })
    }

    pub fn encoder(&self, m: Modality) -> &Mlp {
        &self.encoders[m.index()]
    }

    pub fn encoders(&self) -> &[Mlp] {
        &self.encoders
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn embed_dim(&self) -> usize {
        self.encoders[0].out_dim()
    }

    pub fn input_dim(&self, m: Modality) -> usize {
        self.encoder(m).in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.input_dim(Modality::P)
    }

    /// One-hot prompt input `[1, classes]`.
    pub fn prompt_input(&self, class: usize) -> Result<Tensor> {
        let n = self.num_classes();
        if class >= n {
            return Err(Error::InvalidArgument(format!(
                "class {class} out of range 0..{n}"
            )));
        }
        let mut d = vec![0.0; n];
        d[class] = 1.0;
        Tensor::new(vec![1, n], d)
    }

    /// Embeds rows of `x` (`[n, width]`) with frozen weights; differentiable in `x`.
    pub fn embed_graph(&self, g: &mut Graph, m: Modality, x: Var) -> Result<Var> {
        let enc = self.encoder(m);
        let xs = g.value(x).shape();
        if xs.len() != 2 || xs[1] != enc.in_dim() {
            return Err(Error::shape(
                "embed",
                format!(
                    "{} input {:?}, expected width {}",
                    m.tag(),
                    xs,
                    enc.in_dim()
                ),
            ));
        }
        let bound = enc.bind(g, false);
        let h = bound.forward(g, x)?;
        g.l2_normalize(h)
    }

    pub fn embed(&self, m: Modality, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let e = self.embed_graph(&mut g, m, xv)?;
        Ok(g.value(e).clone())
    }

    pub fn embed_prompt(&self, class: usize) -> Result<Tensor> {
        self.embed(Modality::P, &self.prompt_input(class)?)
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for m in Modality::ALL {
            out.extend(self.encoder(m).named_params(m.tag()));
        }
        out.push(("tau".into(), Tensor::scalar(self.tau)));
        out
    }

    fn set_params(&mut self, params: &[Tensor]) {
        let mut off = 0;
        for enc in &mut self.encoders {
            let k = enc.num_tensors();
            enc.set_params(&params[off..off + k]);
            off += k;
        }
    }

    fn params(&self) -> Vec<Tensor> {
        self.encoders.iter().flat_map(|e| e.params()).collect()
    }
}

/// Symmetrized InfoNCE between row-paired embedding batches `q` and `k`.
pub fn contrastive_loss_graph(g: &mut Graph, q: Var, k: Var, tau: f64) -> Result<Var> {
    let (qs, ks) = (g.value(q).shape().to_vec(), g.value(k).shape().to_vec());
    if qs != ks || qs.len() != 2 {
        return Err(Error::shape(
            "contrastive_loss",
            format!("{qs:?} vs {ks:?}"),
        ));
    }
    if qs[0] < 2 {
        return Err(Error::InvalidArgument(
            "contrastive loss needs at least two pairs".into(),
        ));
    }
    let kt = g.transpose(k)?;
    let sim = g.matmul(q, kt)?;
    let logits = g.scale(sim, 1.0 / tau);
    let forward = row_nll(g, logits)?;
    let lt = g.transpose(logits)?;
    let backward = row_nll(g, lt)?;
    let total = g.add(forward, backward)?;
    Ok(g.scale(total, 0.5))
}

fn row_nll(g: &mut Graph, logits: Var) -> Result<Var> {
    let lse = g.logsumexp_rows(logits)?;
    let pos = g.diag(logits)?;
    let nll = g.sub(lse, pos)?;
    Ok(g.mean(nll))
}

/// [`contrastive_loss_graph`] on plain tensors; rows must be unit norm.
pub fn contrastive_loss(q: &Tensor, k: &Tensor, tau: f64) -> Result<f64> {
    for t in [q, k] {
        for r in 0..t.rows() {
            check_unit(t.row(r))?;
        }
    }
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
    let l = contrastive_loss_graph(&mut g, qv, kv, tau)?;
    Ok(g.value(l).item())
}

fn check_unit(e: &[f64]) -> Result<()> {
    let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NotUnitNorm { norm: n });
    }
    Ok(())
}

/// `1 - e1 . e2` for unit vectors, in `[0, 2]`.
pub fn embedding_distance(e1: &Tensor, e2: &Tensor) -> Result<f64> {
    check_unit(e1.data())?;
    check_unit(e2.data())?;
    Ok(1.0 - e1.dot(e2)?)
}

/// `1 - cosine(a, b)` per row, recorded on the graph.
pub fn distance_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let cos = g.cosine_similarity(a, b)?;
    let one = g.constant(Tensor::ones(g.value(cos).shape()));
    g.sub(one, cos)
}

/// Per-modality inputs of a dataset, in sample order.
pub fn modality_inputs(ds: &Dataset, classes: usize) -> [Tensor; 4] {
    let v = ds.v_matrix();
    let a = ds.a_matrix();
    let mut p = vec![0.0; ds.len() * classes];
    for (i, s) in ds.samples.iter().enumerate() {
        p[i * classes + s.class] = 1.0;
    }
    let p = Tensor::new(vec![ds.len(), classes], p).expect("prompt matrix");
    let frames: Vec<Vec<f64>> = ds
        .samples
        .iter()
        .map(|s| still_frame(&s.v, ds.spec.frame_width))
        .collect();
    [v, a, p, Tensor::matrix(&frames)]
}

fn batch_loss(
    binder: &BinderModel,
    g: &mut Graph,
    inputs: &[Tensor; 4],
    trainable: bool,
) -> Result<(Var, Vec<Var>)> {
    let mut embeds = Vec::new();
    let mut vars = Vec::new();
    for m in Modality::ALL {
        let bound = binder.encoder(m).bind(g, trainable);
        vars.extend(bound.vars());
        let x = g.constant(inputs[m.index()].clone());
        let h = bound.forward(g, x)?;
        embeds.push(g.l2_normalize(h)?);
    }
    let mut total: Option<Var> = None;
    for (a, b) in TRAIN_PAIRS {
        let l = contrastive_loss_graph(g, embeds[a.index()], embeds[b.index()], binder.tau)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok((total.expect("at least one pair"), vars))
}

/// Mean summed pair loss over a dataset, evaluated in batches of `batch`.
pub fn dataset_loss(binder: &BinderModel, ds: &Dataset, batch: usize) -> Result<f64> {
    let inputs = modality_inputs(ds, binder.num_classes());
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    let mut count = 0;
    for chunk in idx.chunks(batch.max(2)) {
        if chunk.len() < 2 {
            continue;
        }
        let b = inputs.clone().map(|t| gather_rows(&t, chunk));
        let mut g = Graph::new();
        let (l, _) = batch_loss(binder, &mut g, &b, false)?;
        total += g.value(l).item();
        count += 1;
    }
    Ok(total / count as f64)
}

pub fn train_binder(
    ds: &Dataset,
    cfg: &TrainConfig,
    tau: f64,
) -> Result<(BinderModel, BinderReport)> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Empty("binder training set"));
    }
    if cfg.batch_size < 2 {
        return Err(Error::InvalidArgument(
            "binder batch size must be >= 2".into(),
        ));
    }
    let spec = &ds.spec;
    let mut binder = BinderModel::new(
        spec.d_v,
        spec.d_a,
        spec.classes,
        spec.frame_width,
        tau,
        cfg.seed,
    );
    let inputs = modality_inputs(ds, spec.classes);
    let mut params = binder.params();
    let mut state = OptimizerState::new(&params);
    let mut r = rng::rng(rng::derive_seed(cfg.seed, 1));
    let mut report = BinderReport {
        initial_loss: dataset_loss(&binder, ds, cfg.batch_size)?,
        ..Default::default()
    };

    for _ in 0..cfg.epochs {
        let order = shuffled(ds.len(), &mut r);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let b = inputs.clone().map(|t| gather_rows(&t, chunk));
            let mut g = Graph::new();
            let (loss, vars) = batch_loss(&binder, &mut g, &b, true)?;
            total += g.value(loss).item();
            batches += 1;
            let grads = g.backward(loss)?;
            let gs: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
            adam_step(&mut params, &gs, &mut state, cfg.lr)?;
            binder.set_params(&params);
        }
        report.epoch_losses.push(total / batches.max(1) as f64);
    }
    report.final_loss = dataset_loss(&binder, ds, cfg.batch_size)?;
    Ok((binder, report))
}

/// Held-out quality of the `from -> to` retrieval direction.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RetrievalStats {
    pub matched_cosine: f64,
    pub mismatched_cosine: f64,
    pub top1_accuracy: f64,
}

impl RetrievalStats {
    pub fn gap(&self) -> f64 {
        self.matched_cosine - self.mismatched_cosine
    }
}

pub fn retrieval_stats(
    binder: &BinderModel,
    ds: &Dataset,
    from: Modality,
    to: Modality,
) -> Result<RetrievalStats> {
    if ds.len() < 2 {
        return Err(Error::Empty("retrieval set"));
    }
    let inputs = modality_inputs(ds, binder.num_classes());
    let q = binder.embed(from, &inputs[from.index()])?;
    let k = binder.embed(to, &inputs[to.index()])?;
    let n = ds.len();
    let (mut matched, mut mismatched, mut hits) = (0.0, 0.0, 0usize);
    for i in 0..n {
        let qi = q.row(i);
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for j in 0..n {
            let s: f64 = qi.iter().zip(k.row(j)).map(|(x, y)| x * y).sum();
            if i == j {
                matched += s;
            } else {
                mismatched += s;
            }
            if s > best.0 {
                best = (s, j);
            }
        }
        hits += usize::from(best.1 == i);
    }
    Ok(RetrievalStats {
        matched_cosine: matched / n as f64,
        mismatched_cosine: mismatched / (n * (n - 1)) as f64,
        top1_accuracy: hits as f64 / n as f64,
    })
}
