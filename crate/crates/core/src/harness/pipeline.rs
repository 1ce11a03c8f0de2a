//! The five subcommands: gen-data, train, run, eval and sweep.
//!
//! Seeding: everything derives from the master `seed`. The world uses
//! `derive_seed(seed, WORLD)`, the splits `TRAIN_SPLIT`/`HELDOUT_SPLIT`, each
//! trained model its own stream, and generation run `i` uses
//! `derive_seed(seed, RUNS + i)` with held-out sample `i mod n` as its
//! condition. Vanilla and guided runs share seeds and conditions.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aligner::{
    joint_guidance_loss, run_cross_modal, run_joint, GenerationResult, GuidanceConfig, ModelSet,
    Task,
};
use crate::binder::{retrieval_stats, train_binder, BinderModel, Modality, RetrievalStats};
use crate::diffusion::{noise_loss, train_denoiser, Autoencoder, DenoiserModel};
use crate::error::{Error, Result};
use crate::metrics::{
    alignment_score, compare_runs, echo_header, EvalReport, MetricKind, RunRecord, RunSet,
};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;
use crate::world::{still_frame, Dataset, PairedSample, World};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::ExperimentConfig;
use super::write_atomic;

/// Artifact locations for a configuration.
#[derive(Clone, Debug)]
pub struct Paths {
    pub train: PathBuf,
    pub heldout: PathBuf,
    pub data_echo: PathBuf,
    pub ae_v: PathBuf,
    pub ae_a: PathBuf,
    pub denoiser_v: PathBuf,
    pub denoiser_a: PathBuf,
    pub binder: PathBuf,
    pub train_report: PathBuf,
    pub results: PathBuf,
    pub runtime: PathBuf,
    pub eval_csv: PathBuf,
    pub eval_summary: PathBuf,
    pub sweep_csv: PathBuf,
}

impl Paths {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let data = cfg.data_dir();
        let ck = cfg.checkpoint_dir();
        let out = cfg.out_dir();
        let task = cfg.task.as_str();
        Paths {
            train: data.join("train.shds"),
            heldout: data.join("heldout.shds"),
            data_echo: data.join("dataset.config"),
            ae_v: ck.join("ae_v.shla"),
            ae_a: ck.join("ae_a.shla"),
            denoiser_v: ck.join("denoiser_v.shla"),
            denoiser_a: ck.join("denoiser_a.shla"),
            binder: ck.join("binder.shla"),
            train_report: ck.join("train_report.json"),
            results: out.join("results").join(format!("{task}.json")),
            runtime: out.join("results").join(format!("{task}.runtime.json")),
            eval_csv: out.join("eval").join(format!("{task}.csv")),
            eval_summary: out.join("eval").join(format!("{task}.summary.txt")),
            sweep_csv: out.join("sweep").join(format!("{task}.csv")),
        }
    }

    fn checkpoints(&self) -> [&PathBuf; 5] {
        [
            &self.ae_v,
            &self.ae_a,
            &self.denoiser_v,
            &self.denoiser_a,
            &self.binder,
        ]
    }
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite(format!(
            "{} not found (run `{hint}` first)",
            path.display()
        )))
    }
}

fn echo_text(cfg: &ExperimentConfig) -> String {
    cfg.echo()
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

// ---------------------------------------------------------------- gen-data

/// Builds the world and samples the training and held-out splits.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let world = World::new(cfg.world_spec(), derive_seed(cfg.seed, stream::WORLD))?;
    let train = world.generate_dataset(
        cfg.train_per_class,
        derive_seed(cfg.seed, stream::TRAIN_SPLIT),
    )?;
    let heldout = world.generate_dataset(
        cfg.heldout_per_class,
        derive_seed(cfg.seed, stream::HELDOUT_SPLIT),
    )?;
    Ok((train, heldout))
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let p = Paths::new(cfg);
    let (train, heldout) = generate_data(cfg)?;
    train.save(&p.train)?;
    heldout.save(&p.heldout)?;
    write_atomic(&p.data_echo, echo_text(cfg).as_bytes())?;
    Ok(vec![p.train, p.heldout, p.data_echo])
}

// ------------------------------------------------------------------- train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub ae_rms_v: f64,
    pub ae_rms_a: f64,
    pub denoiser_loss_v: f64,
    pub denoiser_loss_a: f64,
    /// Held-out noise-prediction loss of the V denoiser and of the zero predictor.
    pub heldout_noise_loss_v: (f64, f64),
    pub heldout_noise_loss_a: (f64, f64),
    pub binder_initial_loss: f64,
    pub binder_final_loss: f64,
    /// Held-out retrieval, keyed `"v->a"` etc.
    pub retrieval: Vec<(String, RetrievalStats)>,
}

struct Branch {
    ae: Autoencoder,
    denoiser: DenoiserModel,
    final_loss: f64,
}

fn train_branch(
    cfg: &ExperimentConfig,
    x: &Tensor,
    classes: &[usize],
    ae_stream: u64,
    den_stream: u64,
) -> Result<Branch> {
    let schedule = cfg.schedule()?;
    let ae_seed = derive_seed(cfg.seed, ae_stream);
    let ae = if cfg.latent_dim == 0 {
        Autoencoder::identity(x.cols())
    } else {
        let tc = crate::diffusion::TrainConfig {
            seed: derive_seed(ae_seed, 1),
            ..cfg.autoencoder_train()
        };
        Autoencoder::affine(x.cols(), cfg.latent_dim, ae_seed)
            .train(x, &tc)?
            .0
    };
    let den_seed = derive_seed(cfg.seed, den_stream);
    let model = DenoiserModel::new(ae.latent_dim(), cfg.classes, den_seed);
    let tc = crate::diffusion::TrainConfig {
        seed: derive_seed(den_seed, 1),
        ..cfg.denoiser_train()
    };
    let (denoiser, report) =
        train_denoiser(model, x, classes, &ae, &schedule, &tc, cfg.uncond_prob)?;
    Ok(Branch {
        ae,
        denoiser,
        final_loss: report.final_loss(),
    })
}

/// Trains both autoencoders, both denoisers and the binder.
pub fn train_models(
    cfg: &ExperimentConfig,
    train: &Dataset,
    heldout: &Dataset,
) -> Result<(ModelSet, TrainSummary)> {
    let classes = train.classes();
    let (xv, xa) = (train.v_matrix(), train.a_matrix());
    let binder_cfg = crate::diffusion::TrainConfig {
        seed: derive_seed(cfg.seed, stream::BINDER),
        ..cfg.binder_train()
    };
    let ((bv, ba), binder) = rayon::join(
        || {
            rayon::join(
                || train_branch(cfg, &xv, &classes, stream::AE_V, stream::DENOISER_V),
                || train_branch(cfg, &xa, &classes, stream::AE_A, stream::DENOISER_A),
            )
        },
        || train_binder(train, &binder_cfg, cfg.tau),
    );
    let (bv, ba, (binder, binder_report)) = (bv?, ba?, binder?);

    let schedule = cfg.schedule()?;
    let held_classes: Vec<Option<usize>> = heldout.classes().into_iter().map(Some).collect();
    let held_loss = |b: &Branch, x: &Tensor| -> Result<(f64, f64)> {
        let z = b.ae.encode(x)?;
        let seed = derive_seed(cfg.seed, stream::HELDOUT_SPLIT);
        Ok((
            noise_loss(&b.denoiser, &z, &held_classes, &schedule, seed, false)?,
            noise_loss(&b.denoiser, &z, &held_classes, &schedule, seed, true)?,
        ))
    };
    let (hv, ha) = (heldout.v_matrix(), heldout.a_matrix());
    let mut retrieval = Vec::new();
    for (from, to) in [
        (Modality::V, Modality::A),
        (Modality::A, Modality::V),
        (Modality::I, Modality::A),
        (Modality::V, Modality::P),
    ] {
        retrieval.push((
            format!("{}->{}", from.tag(), to.tag()),
            retrieval_stats(&binder, heldout, from, to)?,
        ));
    }
    let summary = TrainSummary {
        ae_rms_v: bv.ae.reconstruction_rms(&hv)?,
        ae_rms_a: ba.ae.reconstruction_rms(&ha)?,
        denoiser_loss_v: bv.final_loss,
        denoiser_loss_a: ba.final_loss,
        heldout_noise_loss_v: held_loss(&bv, &hv)?,
        heldout_noise_loss_a: held_loss(&ba, &ha)?,
        binder_initial_loss: binder_report.initial_loss,
        binder_final_loss: binder_report.final_loss,
        retrieval,
    };
    let models = ModelSet {
        schedule,
        denoiser_v: bv.denoiser,
        denoiser_a: ba.denoiser,
        ae_v: bv.ae,
        ae_a: ba.ae,
        binder,
    };
    Ok((models, summary))
}

#[derive(Serialize, Deserialize)]
struct TrainReportFile {
    version: String,
    config: Vec<(String, String)>,
    summary: TrainSummary,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let p = Paths::new(cfg);
    require(&p.train, "gen-data")?;
    require(&p.heldout, "gen-data")?;
    let train = Dataset::load(&p.train)?;
    let heldout = Dataset::load(&p.heldout)?;
    if train.spec != cfg.world_spec() {
        return Err(Error::Config(format!(
            "{} was generated with a different world spec",
            p.train.display()
        )));
    }
    let (models, summary) = train_models(cfg, &train, &heldout)?;
    let meta = echo_text(cfg);
    save_checkpoint(&models.ae_v, &meta, &p.ae_v)?;
    save_checkpoint(&models.ae_a, &meta, &p.ae_a)?;
    save_checkpoint(&models.denoiser_v, &meta, &p.denoiser_v)?;
    save_checkpoint(&models.denoiser_a, &meta, &p.denoiser_a)?;
    save_checkpoint(&models.binder, &meta, &p.binder)?;
    let report = TrainReportFile {
        version: crate::VERSION.into(),
        config: cfg.echo(),
        summary: summary.clone(),
    };
    write_atomic(&p.train_report, &serde_json::to_vec_pretty(&report)?)?;
    Ok(summary)
}

/// Loads every checkpoint written by `train`.
pub fn load_models(cfg: &ExperimentConfig) -> Result<ModelSet> {
    let p = Paths::new(cfg);
    for ck in p.checkpoints() {
        require(ck, "train")?;
    }
    let (ae_v, _) = load_checkpoint::<Autoencoder>(&p.ae_v)?;
    let (ae_a, _) = load_checkpoint::<Autoencoder>(&p.ae_a)?;
    let (denoiser_v, _) = load_checkpoint::<DenoiserModel>(&p.denoiser_v)?;
    let (denoiser_a, _) = load_checkpoint::<DenoiserModel>(&p.denoiser_a)?;
    let (binder, _) = load_checkpoint::<BinderModel>(&p.binder)?;
    Ok(ModelSet {
        schedule: cfg.schedule()?,
        denoiser_v,
        denoiser_a,
        ae_v,
        ae_a,
        binder,
    })
}

// --------------------------------------------------------------------- run

/// Seed of generation run `index`.
pub fn run_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, stream::RUNS + index as u64)
}

/// Condition input for a cross-modal task: the V sample, the A sample or a still frame.
pub fn condition_input(
    task: Task,
    s: &PairedSample,
    frame_width: usize,
) -> Result<(Modality, Tensor)> {
    let (m, _) = task
        .cross_modalities()
        .ok_or_else(|| Error::Config(format!("task {task} has no condition")))?;
    let row = match m {
        Modality::V => s.v.clone(),
        Modality::A => s.a.clone(),
        _ => still_frame(&s.v, frame_width),
    };
    Ok((m, Tensor::matrix(&[row])))
}

/// One generation for run `index`.
pub fn generate_one(
    models: &ModelSet,
    heldout: &Dataset,
    cfg: &ExperimentConfig,
    guidance: &GuidanceConfig,
    index: usize,
) -> Result<GenerationResult> {
    if heldout.is_empty() {
        return Err(Error::Empty("held-out set"));
    }
    let s = &heldout.samples[index % heldout.len()];
    let g = GuidanceConfig {
        seed: run_seed(cfg.seed, index),
        ..guidance.clone()
    };
    match g.task {
        Task::Joint => run_joint(s.class, models, &g),
        task => {
            let (_, cond) = condition_input(task, s, cfg.frame_width)?;
            let prompt = cfg.use_class_prompt.then_some(s.class);
            run_cross_modal(&cond, prompt, models, &g)
        }
    }
}

fn unit_row(e: &Tensor, i: usize) -> Tensor {
    Tensor::vector(e.row(i).to_vec())
}

/// Scores generations into per-run records.
pub fn score_runs(
    models: &ModelSet,
    heldout: &Dataset,
    cfg: &ExperimentConfig,
    guidance: &GuidanceConfig,
    results: &[GenerationResult],
) -> Result<RunSet> {
    let binder = &models.binder;
    let n = results.len();
    let samples: Vec<&PairedSample> = (0..n)
        .map(|i| &heldout.samples[i % heldout.len()])
        .collect();
    let pairing: Vec<usize> = (0..n).collect();
    let prompts = samples
        .iter()
        .map(|s| binder.prompt_input(s.class).map(Tensor::into_data))
        .collect::<Result<Vec<_>>>()?;
    let e_p = binder.embed(Modality::P, &Tensor::matrix(&prompts))?;
    let rows = |m: Modality| -> Vec<Vec<f64>> {
        results
            .iter()
            .map(|r| r.sample(m).expect("generated modality present").to_vec())
            .collect()
    };

    let (alignment, e_x, e_y, sample_rows) = match guidance.task {
        Task::Joint => {
            let (vs, as_) = (
                Tensor::matrix(&rows(Modality::V)),
                Tensor::matrix(&rows(Modality::A)),
            );
            let al = alignment_score(binder, (Modality::V, &vs), (Modality::A, &as_), &pairing)?;
            let joined = rows(Modality::V)
                .into_iter()
                .zip(rows(Modality::A))
                .map(|(mut v, a)| {
                    v.extend(a);
                    v
                })
                .collect();
            (
                al,
                binder.embed(Modality::V, &vs)?,
                binder.embed(Modality::A, &as_)?,
                joined,
            )
        }
        task => {
            let (cm, gm) = task.cross_modalities().unwrap();
            let gen = rows(gm);
            let conds = samples
                .iter()
                .map(|s| condition_input(task, s, cfg.frame_width).map(|(_, t)| t.into_data()))
                .collect::<Result<Vec<_>>>()?;
            let (gt, ct) = (Tensor::matrix(&gen), Tensor::matrix(&conds));
            let al = alignment_score(binder, (gm, &gt), (cm, &ct), &pairing)?;
            (al, binder.embed(gm, &gt)?, binder.embed(cm, &ct)?, gen)
        }
    };

    let records = (0..n)
        .map(|i| {
            Ok(RunRecord {
                run_index: i,
                seed: results[i].seed,
                condition_index: (guidance.task != Task::Joint).then_some(i % heldout.len()),
                class: samples[i].class,
                alignment: alignment.per_pair[i],
                triangle_final: joint_guidance_loss(
                    &unit_row(&e_x, i),
                    &unit_row(&e_y, i),
                    &unit_row(&e_p, i),
                )?,
                sample: sample_rows[i].clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunSet {
        task: guidance.task,
        lambda1: guidance.lambda1,
        lambda2: guidance.lambda2,
        inf_steps: guidance.inf_steps,
        optim_start: guidance.optim_start,
        records,
    })
}

fn pool(cfg: &ExperimentConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

/// Runs `cfg.runs` generations in parallel; results come back in run order.
pub fn generate_runs(
    models: &ModelSet,
    heldout: &Dataset,
    cfg: &ExperimentConfig,
    guidance: &GuidanceConfig,
) -> Result<(RunSet, Vec<GenerationResult>)> {
    let results = pool(cfg)?.install(|| {
        (0..cfg.runs)
            .into_par_iter()
            .map(|i| generate_one(models, heldout, cfg, guidance, i))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok((
        score_runs(models, heldout, cfg, guidance, &results)?,
        results,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub version: String,
    pub config: Vec<(String, String)>,
    pub vanilla: RunSet,
    pub guided: RunSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeFile {
    pub vanilla_ms: Vec<f64>,
    pub guided_ms: Vec<f64>,
}

/// Vanilla and guided runs for the configured task, in memory.
pub fn run_experiment(
    models: &ModelSet,
    heldout: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<(ResultsFile, RuntimeFile)> {
    let guidance = cfg.guidance();
    guidance.validate()?;
    let (vanilla, vr) = generate_runs(models, heldout, cfg, &guidance.without_guidance())?;
    let (guided, gr) = generate_runs(models, heldout, cfg, &guidance)?;
    let ms = |rs: &[GenerationResult]| rs.iter().map(|r| r.duration_ms).collect();
    Ok((
        ResultsFile {
            version: crate::VERSION.into(),
            config: cfg.echo(),
            vanilla,
            guided,
        },
        RuntimeFile {
            vanilla_ms: ms(&vr),
            guided_ms: ms(&gr),
        },
    ))
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let p = Paths::new(cfg);
    let models = load_models(cfg)?;
    require(&p.heldout, "gen-data")?;
    let heldout = Dataset::load(&p.heldout)?;
    let (results, runtime) = run_experiment(&models, &heldout, cfg)?;
    write_atomic(&p.results, &serde_json::to_vec_pretty(&results)?)?;
    write_atomic(&p.runtime, &serde_json::to_vec_pretty(&runtime)?)?;
    Ok(p.results)
}

// -------------------------------------------------------------------- eval

/// Real samples of the generated modality (`v` then `a` for joint).
pub fn reference_set(task: Task, heldout: &Dataset) -> Tensor {
    let rows: Vec<Vec<f64>> = heldout
        .samples
        .iter()
        .map(|s| match task {
            Task::Joint => s.v.iter().chain(&s.a).copied().collect(),
            Task::A2v => s.v.clone(),
            Task::V2a | Task::I2a => s.a.clone(),
        })
        .collect();
    Tensor::matrix(&rows)
}

pub fn evaluate(
    results: &ResultsFile,
    runtime: Option<&RuntimeFile>,
    heldout: &Dataset,
) -> Result<EvalReport> {
    let reference = reference_set(results.guided.task, heldout);
    let mut report = compare_runs(
        &results.vanilla,
        &results.guided,
        &reference,
        runtime.map(|r| r.guided_ms.as_slice()),
    )?;
    report.config_echo = results.config.clone();
    Ok(report)
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let p = Paths::new(cfg);
    require(&p.results, "run")?;
    require(&p.heldout, "gen-data")?;
    let results: ResultsFile = serde_json::from_slice(&std::fs::read(&p.results)?)?;
    let runtime: Option<RuntimeFile> = match std::fs::read(&p.runtime) {
        Ok(b) => Some(serde_json::from_slice(&b)?),
        Err(_) => None,
    };
    let heldout = Dataset::load(&p.heldout)?;
    let report = evaluate(&results, runtime.as_ref(), &heldout)?;
    write_atomic(&p.eval_csv, report.to_csv()?.as_bytes())?;
    write_atomic(&p.eval_summary, report.summary_text().as_bytes())?;
    Ok(report)
}

// ------------------------------------------------------------------- sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub task: Task,
    pub lambda1: f64,
    pub optim_start: f64,
    pub num_optim_steps: usize,
    pub runs: usize,
    pub align_vanilla: f64,
    pub align_guided: f64,
    pub align_p: f64,
    pub mmd_vanilla: f64,
    pub mmd_guided: f64,
    pub triangle_final_vanilla: f64,
    pub triangle_final_guided: f64,
    pub triangle_p: f64,
    pub runtime_ms: f64,
}

/// One row per cell of `sweep_lambda1 x sweep_optim_start x sweep_num_optim_steps`.
/// In joint mode a cell's `lambda1` applies to both branches.
pub fn sweep(
    models: &ModelSet,
    heldout: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<Vec<SweepRow>> {
    let base = cfg.guidance();
    let (vanilla, _) = generate_runs(models, heldout, cfg, &base.without_guidance())?;
    let reference = reference_set(cfg.task, heldout);
    let mut rows = Vec::new();
    for &lambda1 in &cfg.sweep_lambda1 {
        for &optim_start in &cfg.sweep_optim_start {
            for &num_optim_steps in &cfg.sweep_num_optim_steps {
                let g = GuidanceConfig {
                    lambda1,
                    lambda1_audio: lambda1,
                    optim_start,
                    num_optim_steps,
                    ..base.clone()
                };
                g.validate()?;
                let (guided, results) = generate_runs(models, heldout, cfg, &g)?;
                let rep = compare_runs(&vanilla, &guided, &reference, None)?;
                let (al, tri) = (
                    rep.summary_for(MetricKind::Alignment),
                    rep.summary_for(MetricKind::TriangleFinal),
                );
                rows.push(SweepRow {
                    task: cfg.task,
                    lambda1,
                    optim_start,
                    num_optim_steps,
                    runs: cfg.runs,
                    align_vanilla: al.vanilla_mean,
                    align_guided: al.guided_mean,
                    align_p: al.sign.p_value,
                    mmd_vanilla: rep.mmd_vanilla.value,
                    mmd_guided: rep.mmd_guided.value,
                    triangle_final_vanilla: tri.vanilla_mean,
                    triangle_final_guided: tri.guided_mean,
                    triangle_p: tri.sign.p_value,
                    runtime_ms: results.iter().map(|r| r.duration_ms).sum::<f64>()
                        / results.len() as f64,
                });
            }
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow], cfg: &ExperimentConfig) -> Result<String> {
    let mut out = echo_header(&cfg.echo());
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let body = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    out.push_str(&String::from_utf8_lossy(&body));
    Ok(out)
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<(PathBuf, Vec<SweepRow>)> {
    let p = Paths::new(cfg);
    let models = load_models(cfg)?;
    require(&p.heldout, "gen-data")?;
    let heldout = Dataset::load(&p.heldout)?;
    let rows = sweep(&models, &heldout, cfg)?;
    write_atomic(&p.sweep_csv, sweep_csv(&rows, cfg)?.as_bytes())?;
    Ok((p.sweep_csv, rows))
}
