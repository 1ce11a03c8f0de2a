//! Synthetic paired two-modality data.
//!
//! Each sample draws a factor vector `c` near its class prototype and renders
//! it through two fixed random maps `g(c) = W2 sin(W1 c + b1) + b2`, one per
//! modality, plus Gaussian observation noise.
//!
//! # Dataset file (`SHDS`)
//!
//! All integers and floats little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic `"SHDS"` | 4 bytes |
//! | version (1) | u16 |
//! | factor_dim, classes, d_v, d_a, map_hidden, frame_width | u32 each |
//! | sigma, jitter, prototype_scale | f64 each |
//! | map_seed, world_seed | u64 each |
//! | sample count | u64 |
//! | per sample: class | u32 |
//! | per sample: c, then v, then a | f64 × (factor_dim + d_v + d_a) |

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, derive_seed, normal, normal_tensor, Rng};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"SHDS";
pub const DATASET_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub factor_dim: usize,
    pub classes: usize,
    pub d_v: usize,
    pub d_a: usize,
    pub sigma: f64,
    /// Std of the per-sample factor offset around the class prototype.
    pub jitter: f64,
    /// Std of the prototype factors.
    pub prototype_scale: f64,
    /// Width of the sine layer inside each rendering map.
    pub map_hidden: usize,
    /// Width of one frame of a modality-V sample (`d_v` is a whole number of frames).
    pub frame_width: usize,
    pub map_seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            factor_dim: 4,
            classes: 8,
            d_v: 32,
            d_a: 32,
            sigma: 0.05,
            jitter: 0.2,
            prototype_scale: 1.5,
            map_hidden: 16,
            frame_width: 8,
            map_seed: 33,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.factor_dim < 1 {
            return bad("factor_dim must be >= 1".into());
        }
        if self.classes < 2 {
            return bad("need at least two classes".into());
        }
        if self.d_v < self.factor_dim || self.d_a < self.factor_dim {
            return bad(format!(
                "modality widths must be >= factor_dim {}",
                self.factor_dim
            ));
        }
        if !(self.sigma >= 0.0) || !(self.jitter >= 0.0) || !(self.prototype_scale > 0.0) {
            return bad("sigma and jitter must be >= 0, prototype_scale > 0".into());
        }
        if self.map_hidden == 0 || self.frame_width == 0 || !self.d_v.is_multiple_of(self.frame_width) {
            return bad(format!(
                "frame_width {} must divide d_v {}",
                self.frame_width, self.d_v
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct RenderMap {
    w1: Tensor,
    b1: Vec<f64>,
    w2: Tensor,
    b2: Vec<f64>,
}

impl RenderMap {
    fn new(k: usize, hidden: usize, out: usize, r: &mut Rng) -> Self {
        let w1 = normal_tensor(r, &[k, hidden]);
        let b1 = (0..hidden)
            .map(|_| r.random_range(0.0..std::f64::consts::TAU))
            .collect();
        let w2 = normal_tensor(r, &[hidden, out]).scale((1.0 / hidden as f64).sqrt());
        let b2 = (0..out).map(|_| 0.1 * normal(r)).collect();
        RenderMap { w1, b1, w2, b2 }
    }

    fn apply(&self, c: &[f64]) -> Vec<f64> {
        let hidden = self.b1.len();
        let out = self.b2.len();
        let mut h = self.b1.clone();
        for (i, ci) in c.iter().enumerate() {
            for (j, hj) in h.iter_mut().enumerate() {
                *hj += ci * self.w1.data()[i * hidden + j];
            }
        }
        let mut y = self.b2.clone();
        for (j, hj) in h.iter().enumerate() {
            let s = hj.sin();
            for (o, yo) in y.iter_mut().enumerate() {
                *yo += s * self.w2.data()[j * out + o];
            }
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    spec: WorldSpec,
    seed: u64,
    g_v: RenderMap,
    g_a: RenderMap,
    prototypes: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    pub class: usize,
    pub c: Vec<f64>,
}

impl World {
    /// Builds the rendering maps (from `spec.map_seed`) and class prototypes
    /// (from `seed`). Prototypes are redrawn until every pair is at least one
    /// prototype-scale apart.
    pub fn new(spec: WorldSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut mr = rng::rng(derive_seed(spec.map_seed, rng::stream::WORLD));
        let g_v = RenderMap::new(spec.factor_dim, spec.map_hidden, spec.d_v, &mut mr);
        let g_a = RenderMap::new(spec.factor_dim, spec.map_hidden, spec.d_a, &mut mr);

        let mut pr = rng::rng(derive_seed(seed, rng::stream::WORLD));
        let min_sep = spec.prototype_scale;
        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
        let mut attempts = 0;
        while prototypes.len() < spec.classes {
            let p: Vec<f64> = (0..spec.factor_dim)
                .map(|_| spec.prototype_scale * normal(&mut pr))
                .collect();
            attempts += 1;
            let far = prototypes.iter().all(|q| dist(q, &p) >= min_sep);
            // give up on separation for pathological specs rather than spin
            if far || attempts > 10_000 {
                prototypes.push(p);
            }
        }
        Ok(World {
            spec,
            seed,
            g_v,
            g_a,
            prototypes,
        })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        &self.prototypes[class]
    }

    pub fn render_v(&self, c: &[f64]) -> Vec<f64> {
        self.g_v.apply(c)
    }

    pub fn render_a(&self, c: &[f64]) -> Vec<f64> {
        self.g_a.apply(c)
    }

    pub fn sample_pair(&self, class: usize, seed: u64) -> Result<PairedSample> {
        if class >= self.spec.classes {
            return Err(Error::InvalidArgument(format!(
                "class {class} out of range 0..{}",
                self.spec.classes
            )));
        }
        let mut r = rng::rng(seed);
        let c: Vec<f64> = self.prototypes[class]
            .iter()
            .map(|p| p + self.spec.jitter * normal(&mut r))
            .collect();
        let sigma = self.spec.sigma;
        let v = self
            .g_v
            .apply(&c)
            .into_iter()
            .map(|x| x + sigma * normal(&mut r))
            .collect();
        let a = self
            .g_a
            .apply(&c)
            .into_iter()
            .map(|x| x + sigma * normal(&mut r))
            .collect();
        Ok(PairedSample { v, a, class, c })
    }

    /// `n_per_class` samples of every class, shuffled.
    pub fn generate_dataset(&self, n_per_class: usize, seed: u64) -> Result<Dataset> {
        if n_per_class == 0 {
            return Err(Error::InvalidArgument("n_per_class must be >= 1".into()));
        }
        let mut samples = Vec::with_capacity(n_per_class * self.spec.classes);
        for class in 0..self.spec.classes {
            for i in 0..n_per_class {
                let idx = (class * n_per_class + i) as u64;
                samples.push(self.sample_pair(class, derive_seed(seed, idx))?);
            }
        }
        let mut r = rng::rng(derive_seed(seed, u64::MAX));
        let order = crate::diffusion::shuffled(samples.len(), &mut r);
        let samples = order.into_iter().map(|i| samples[i].clone()).collect();
        Ok(Dataset {
            spec: self.spec.clone(),
            world_seed: self.seed,
            samples,
        })
    }
}

/// The first frame of a modality-V sample, used as the still-image condition.
pub fn still_frame(v: &[f64], frame_width: usize) -> Vec<f64> {
    v[..frame_width].to_vec()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: WorldSpec,
    pub world_seed: u64,
    pub samples: Vec<PairedSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.class).collect()
    }

    pub fn v_matrix(&self) -> Tensor {
        Tensor::matrix(&self.samples.iter().map(|s| s.v.clone()).collect::<Vec<_>>())
    }

    pub fn a_matrix(&self) -> Tensor {
        Tensor::matrix(&self.samples.iter().map(|s| s.a.clone()).collect::<Vec<_>>())
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.spec.classes];
        for s in &self.samples {
            h[s.class] += 1;
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.spec;
        let mut b = Vec::new();
        b.extend_from_slice(DATASET_MAGIC);
        b.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for d in [
            s.factor_dim,
            s.classes,
            s.d_v,
            s.d_a,
            s.map_hidden,
            s.frame_width,
        ] {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for f in [s.sigma, s.jitter, s.prototype_scale] {
            b.extend_from_slice(&f.to_le_bytes());
        }
        b.extend_from_slice(&s.map_seed.to_le_bytes());
        b.extend_from_slice(&self.world_seed.to_le_bytes());
        b.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for smp in &self.samples {
            b.extend_from_slice(&(smp.class as u32).to_le_bytes());
            for x in smp.c.iter().chain(&smp.v).chain(&smp.a) {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor {
            bytes,
            pos: 0,
            path,
        };
        if cur.take(4)? != DATASET_MAGIC {
            return Err(cur.err("bad magic"));
        }
        let version = cur.u16()?;
        if version != DATASET_VERSION {
            return Err(cur.err(&format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = cur.u32()? as usize;
        }
        let [factor_dim, classes, d_v, d_a, map_hidden, frame_width] = dims;
        let (sigma, jitter, prototype_scale) = (cur.f64()?, cur.f64()?, cur.f64()?);
        let map_seed = cur.u64()?;
        let world_seed = cur.u64()?;
        let spec = WorldSpec {
            factor_dim,
            classes,
            d_v,
            d_a,
            sigma,
            jitter,
            prototype_scale,
            map_hidden,
            frame_width,
            map_seed,
        };
        spec.validate().map_err(|e| cur.err(&e.to_string()))?;
        let count = cur.u64()? as usize;
        let per = 4 + 8 * (factor_dim + d_v + d_a);
        if bytes.len() - cur.pos != count.saturating_mul(per) {
            return Err(cur.err(&format!("expected {count} samples of {per} bytes")));
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let class = cur.u32()? as usize;
            if class >= classes {
                return Err(cur.err(&format!("class {class} out of range")));
            }
            let c = cur.f64s(factor_dim)?;
            let v = cur.f64s(d_v)?;
            let a = cur.f64s(d_a)?;
            samples.push(PairedSample { v, a, class, c });
        }
        Ok(Dataset {
            spec,
            world_seed,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::harness::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, path)
    }
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub path: &'a Path,
}

impl Cursor<'_> {
    pub fn err(&self, reason: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: format!("{reason} (offset {})", self.pos),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_world() {
        let a = World::new(WorldSpec::default(), 33).unwrap();
        let b = World::new(WorldSpec::default(), 33).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn map_seed_changes_renderings() {
        let a = World::new(WorldSpec::default(), 33).unwrap();
        let b = World::new(
            WorldSpec {
                map_seed: 34,
                ..WorldSpec::default()
            },
            33,
        )
        .unwrap();
        let c = [0.3, -0.2, 1.0, 0.5];
        assert_ne!(a.render_v(&c), b.render_v(&c));
    }

    #[test]
    fn noiseless_sample_is_deterministic_rendering() {
        let spec = WorldSpec {
            sigma: 0.0,
            jitter: 0.0,
            ..WorldSpec::default()
        };
        let w = World::new(spec, 5).unwrap();
        let s = w.sample_pair(3, 99).unwrap();
        assert_eq!(s.v, w.render_v(w.prototype(3)));
        assert_eq!(s.a, w.render_a(w.prototype(3)));
        assert_eq!(s, w.sample_pair(3, 99).unwrap());
    }

    #[test]
    fn rejects_bad_spec_and_class() {
        assert!(World::new(
            WorldSpec {
                classes: 1,
                ..WorldSpec::default()
            },
            1
        )
        .is_err());
        assert!(World::new(
            WorldSpec {
                d_v: 2,
                ..WorldSpec::default()
            },
            1
        )
        .is_err());
        assert!(World::new(
            WorldSpec {
                sigma: -1.0,
                ..WorldSpec::default()
            },
            1
        )
        .is_err());
        let w = World::new(WorldSpec::default(), 1).unwrap();
        assert!(w.sample_pair(8, 0).is_err());
    }

    #[test]
    fn dataset_is_stratified() {
        let w = World::new(WorldSpec::default(), 2).unwrap();
        let d = w.generate_dataset(5, 7).unwrap();
        assert_eq!(d.len(), 40);
        assert_eq!(d.class_histogram(), vec![5; 8]);
        assert!(w.generate_dataset(0, 7).is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let w = World::new(WorldSpec::default(), 2).unwrap();
        let bytes = w.generate_dataset(2, 7).unwrap().to_bytes();
        let p = Path::new("mem");
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Dataset::from_bytes(&bad, p).is_err());
        assert_eq!(Dataset::from_bytes(&bytes, p).unwrap().len(), 16);
    }
}
