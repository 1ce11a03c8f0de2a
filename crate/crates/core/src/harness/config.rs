//! Flat `key = value` experiment configuration.
//!
//! Resolution order: built-in defaults, then the config file, then flags.
//! `lambda1`, `lambda1_audio`, `optim_start` and `prompt_tuning` default to
//! the per-task values of [`GuidanceConfig::for_task`] unless set. Setting
//! `lambda1` without `lambda1_audio` sets both.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::aligner::{GuidanceConfig, Task};
use crate::diffusion::schedule::{DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T};
use crate::diffusion::{NoiseSchedule, SamplerKind, TrainConfig};
use crate::error::{Error, Result};
use crate::world::WorldSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

trait Value: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! simple_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
simple_value!(f64, usize, u64, bool, String);

impl Value for Task {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: Error| e.to_string())
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for SamplerKind {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: Error| e.to_string())
    }
    fn render(&self) -> String {
        match self {
            SamplerKind::Ddim => "ddim".into(),
            SamplerKind::Ddpm => "ddpm".into(),
        }
    }
}

impl<T: Value> Value for Vec<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(|p| T::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(Value::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! config_fields {
    ($($(#[$doc:meta])* $name:ident : $ty:ty = $default:expr;)*) => {
        /// Every knob of an experiment. Field names are the config keys.
        #[derive(Clone, Debug, PartialEq)]
        pub struct ExperimentConfig {
            $($(#[$doc])* pub $name: $ty,)*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                ExperimentConfig { $($name: $default,)* }
            }
        }

        /// All config keys in declaration order.
        pub const KEYS: &[&str] = &[$(stringify!($name)),*];

        impl ExperimentConfig {
            fn set_raw(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => {
                        self.$name = <$ty as Value>::parse_value(value)
                            .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))?;
                    })*
                    _ => return Err(unknown_key(key)),
                }
                Ok(())
            }

            /// Rendered value of a key.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($name) => Some(Value::render(&self.$name)),)*
                    _ => None,
                }
            }
        }
    };
}

config_fields! {
    // world
    factor_dim: usize = 4;
    classes: usize = 8;
    d_v: usize = 32;
    d_a: usize = 32;
    sigma: f64 = 0.05;
    jitter: f64 = 0.2;
    prototype_scale: f64 = 1.5;
    map_hidden: usize = 16;
    frame_width: usize = 8;
    map_seed: u64 = 33;
    train_per_class: usize = 256;
    heldout_per_class: usize = 32;
    // training
    /// Autoencoder latent width; 0 selects the identity map.
    latent_dim: usize = 16;
    diffusion_steps: usize = DEFAULT_T;
    beta_start: f64 = DEFAULT_BETA_START;
    beta_end: f64 = DEFAULT_BETA_END;
    batch_size: usize = 128;
    ae_epochs: usize = 200;
    ae_lr: f64 = 5e-3;
    denoiser_epochs: usize = 200;
    denoiser_lr: f64 = 2e-3;
    /// Probability of training the denoiser on the null prompt.
    uncond_prob: f64 = 0.2;
    binder_epochs: usize = 100;
    binder_lr: f64 = 2e-3;
    tau: f64 = crate::binder::DEFAULT_TAU;
    // guidance
    task: Task = Task::V2a;
    lambda1: f64 = 0.1;
    lambda1_audio: f64 = 0.1;
    lambda2: f64 = crate::aligner::config::DEFAULT_LAMBDA2;
    num_optim_steps: usize = 1;
    inf_steps: usize = 30;
    optim_start: f64 = 0.2;
    prompt_tuning: bool = false;
    grad_through_denoiser: bool = true;
    sampler: SamplerKind = SamplerKind::Ddim;
    /// Condition cross-modal runs on the class prompt as well.
    use_class_prompt: bool = false;
    seed: u64 = crate::aligner::config::DEFAULT_SEED;
    // harness
    runs: usize = 64;
    out: String = "out".to_string();
    /// Dataset directory; empty means `<out>/data`.
    data_dir: String = String::new();
    /// Checkpoint directory; empty means `<out>/checkpoints`.
    checkpoint_dir: String = String::new();
    /// Worker threads for run and sweep; 0 uses every core.
    threads: usize = 0;
    sweep_lambda1: Vec<f64> = vec![0.0, 0.01, 0.1];
    sweep_optim_start: Vec<f64> = vec![0.0, 0.2];
    sweep_num_optim_steps: Vec<usize> = vec![1];
}

fn unknown_key(key: &str) -> Error {
    let near: Vec<&str> = KEYS
        .iter()
        .copied()
        .filter(|k| edit_distance(k, key) <= 2)
        .collect();
    if near.is_empty() {
        Error::Config(format!("unknown key {key:?}"))
    } else {
        Error::Config(format!(
            "unknown key {key:?} (did you mean {}?)",
            near.join(" or ")
        ))
    }
}

fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut prev = row[0];
        row[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let cur = row[j + 1];
            row[j + 1] = (prev + usize::from(ca != cb)).min(row[j] + 1).min(cur + 1);
            prev = cur;
        }
    }
    row[b.len()]
}

/// A resolved configuration and where each value came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedConfig {
    pub config: ExperimentConfig,
    pub provenance: BTreeMap<&'static str, Source>,
}

impl ResolvedConfig {
    pub fn source(&self, key: &str) -> Source {
        self.provenance.get(key).copied().unwrap_or(Source::Default)
    }

    /// `key = value  (source)` lines for every key.
    pub fn describe(&self) -> String {
        KEYS.iter()
            .map(|k| {
                format!(
                    "{k} = {}  ({})\n",
                    self.config.get(k).unwrap(),
                    self.source(k)
                )
            })
            .collect()
    }
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_file_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected key = value, got {line:?}",
                n + 1
            ))
        })?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(Error::Config(format!(
                "line {}: duplicate key {k:?}",
                n + 1
            )));
        }
        out.push((k, v));
    }
    Ok(out)
}

/// Resolves defaults, file entries and flag entries (flags win).
pub fn resolve(file: &[(String, String)], flags: &[(String, String)]) -> Result<ResolvedConfig> {
    let mut config = ExperimentConfig::default();
    let mut provenance = BTreeMap::new();
    for (entries, src) in [(file, Source::File), (flags, Source::Flag)] {
        for (k, v) in entries {
            config.set_raw(k, v)?;
            let key = KEYS
                .iter()
                .copied()
                .find(|x| x == k)
                .expect("set_raw accepted the key");
            provenance.insert(key, src);
        }
    }
    let task_cfg = GuidanceConfig::for_task(config.task);
    let explicit = |k: &str| provenance.contains_key(k);
    if !explicit("lambda1") {
        config.lambda1 = task_cfg.lambda1;
    }
    if !explicit("lambda1_audio") {
        config.lambda1_audio = if explicit("lambda1") {
            config.lambda1
        } else {
            task_cfg.lambda1_audio
        };
    }
    if !explicit("optim_start") {
        config.optim_start = task_cfg.optim_start;
    }
    if !explicit("prompt_tuning") {
        config.prompt_tuning = task_cfg.prompt_tuning;
    }
    config.validate()?;
    Ok(ResolvedConfig { config, provenance })
}

/// Reads the optional config file and applies flags.
pub fn parse_config(path: Option<&Path>, flags: &[(String, String)]) -> Result<ResolvedConfig> {
    let file = match path {
        Some(p) => parse_file_text(&std::fs::read_to_string(p)?)?,
        None => vec![],
    };
    resolve(&file, flags)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.guidance().validate()?;
        self.world_spec().validate()?;
        for (k, v) in [("sigma", self.sigma), ("tau", self.tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.uncond_prob) {
            return Err(Error::Config(format!(
                "uncond_prob must be in [0, 1], got {}",
                self.uncond_prob
            )));
        }
        for (k, n) in [
            ("train_per_class", self.train_per_class),
            ("heldout_per_class", self.heldout_per_class),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{k} must be >= 1")));
            }
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be >= 1".into()));
        }
        if self.sweep_lambda1.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Config("sweep_lambda1 values must be >= 0".into()));
        }
        if self
            .sweep_optim_start
            .iter()
            .any(|s| !(0.0..=1.0).contains(s))
        {
            return Err(Error::Config(
                "sweep_optim_start values must be in [0, 1]".into(),
            ));
        }
        self.autoencoder_train().validate()?;
        self.denoiser_train().validate()?;
        self.binder_train().validate()?;
        Ok(())
    }

    pub fn world_spec(&self) -> WorldSpec {
        WorldSpec {
            factor_dim: self.factor_dim,
            classes: self.classes,
            d_v: self.d_v,
            d_a: self.d_a,
            sigma: self.sigma,
            jitter: self.jitter,
            prototype_scale: self.prototype_scale,
            map_hidden: self.map_hidden,
            frame_width: self.frame_width,
            map_seed: self.map_seed,
        }
    }

    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            task: self.task,
            lambda1: self.lambda1,
            lambda1_audio: self.lambda1_audio,
            lambda2: self.lambda2,
            num_optim_steps: self.num_optim_steps,
            inf_steps: self.inf_steps,
            optim_start: self.optim_start,
            prompt_tuning: self.prompt_tuning,
            grad_through_denoiser: self.grad_through_denoiser,
            sampler: self.sampler,
            seed: self.seed,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn denoiser_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.denoiser_epochs,
            batch_size: self.batch_size,
            lr: self.denoiser_lr,
            seed: self.seed,
        }
    }

    pub fn binder_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.binder_epochs,
            batch_size: self.batch_size,
            lr: self.binder_lr,
            seed: self.seed,
        }
    }

    pub fn autoencoder_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.ae_epochs,
            batch_size: self.batch_size,
            lr: self.ae_lr,
            seed: self.seed,
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out)
    }

    pub fn data_dir(&self) -> PathBuf {
        if self.data_dir.is_empty() {
            self.out_dir().join("data")
        } else {
            PathBuf::from(&self.data_dir)
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        if self.checkpoint_dir.is_empty() {
            self.out_dir().join("checkpoints")
        } else {
            PathBuf::from(&self.checkpoint_dir)
        }
    }

    /// `(key, value)` for every key, in declaration order, preceded by the
    /// software version.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut out = vec![("version".to_string(), crate::VERSION.to_string())];
        out.extend(KEYS.iter().map(|k| (k.to_string(), self.get(k).unwrap())));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn defaults_follow_task() {
        let r = resolve(&[], &[]).unwrap();
        assert_eq!(r.config.guidance(), GuidanceConfig::for_task(Task::V2a));
        assert!(r.provenance.is_empty());
        for task in Task::ALL {
            let r = resolve(&[], &kv(&[("task", task.as_str())])).unwrap();
            assert_eq!(r.config.guidance(), GuidanceConfig::for_task(task));
        }
    }

    #[test]
    fn flag_overrides_file() {
        let file = parse_file_text("# comment\nlambda2 = 0.5\nruns=3\n").unwrap();
        let r = resolve(&file, &kv(&[("lambda2", "0.25")])).unwrap();
        assert_eq!(r.config.lambda2, 0.25);
        assert_eq!(r.config.runs, 3);
        assert_eq!(r.source("lambda2"), Source::Flag);
        assert_eq!(r.source("runs"), Source::File);
        assert_eq!(r.source("seed"), Source::Default);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = resolve(&kv(&[("lambd1", "0.1")]), &[])
            .unwrap_err()
            .to_string();
        assert!(err.contains("lambd1") && err.contains("lambda1"), "{err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(resolve(&kv(&[("lambda1", "-0.1")]), &[]).is_err());
        assert!(resolve(&kv(&[("lambda2", "abc")]), &[]).is_err());
        assert!(resolve(&kv(&[("task", "t2v")]), &[]).is_err());
        assert!(parse_file_text("lambda1 0.1").is_err());
        assert!(parse_file_text("seed = 1\nseed = 2").is_err());
    }

    #[test]
    fn lambda1_sets_both_branches_unless_audio_given() {
        let r = resolve(&[], &kv(&[("task", "joint"), ("lambda1", "0")])).unwrap();
        assert_eq!((r.config.lambda1, r.config.lambda1_audio), (0.0, 0.0));
        let r = resolve(
            &kv(&[("lambda1_audio", "0.3")]),
            &kv(&[("task", "joint"), ("lambda1", "0")]),
        )
        .unwrap();
        assert_eq!((r.config.lambda1, r.config.lambda1_audio), (0.0, 0.3));
    }

    #[test]
    fn echo_round_trips() {
        let r = resolve(&[], &kv(&[("task", "a2v"), ("sweep_lambda1", "0.5, 1")])).unwrap();
        let echo = r.config.echo();
        assert_eq!(echo[0].0, "version");
        let back = resolve(&echo[1..], &[]).unwrap();
        assert_eq!(back.config, r.config);
    }
}
