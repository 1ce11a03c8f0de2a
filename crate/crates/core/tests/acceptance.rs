//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use latent_aligner::aligner::{
    joint_audio_seed, run_cross_modal, run_joint, GuidanceConfig, ModelSet, Task,
};
use latent_aligner::binder::{retrieval_stats, BinderModel, Modality};
use latent_aligner::diffusion::{sample_vanilla, Autoencoder, DenoiserModel, NoiseSchedule};
use latent_aligner::harness::pipeline::{self, condition_input, run_seed, Paths, ResultsFile};
use latent_aligner::harness::{load_checkpoint, save_checkpoint, Checkpoint, ExperimentConfig};
use latent_aligner::metrics::{read_csv_rows, MetricKind};
use latent_aligner::rng::{normal_tensor, rng};
use latent_aligner::world::Dataset;
use rand::Rng as _;

use common::{untrained_models, GuidanceState, RandomGraph};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut graph_worst: f64 = 0.0;
    for seed in 0..100 {
        graph_worst = graph_worst.max(
            RandomGraph::new(seed)
                .max_error()
                .map_err(|e| e.to_string())?,
        );
    }
    let models = untrained_models(5);
    let mut state_worst: f64 = 0.0;
    for seed in 0..20 {
        state_worst = state_worst.max(
            GuidanceState::random(&models, 1000 + seed)
                .max_error(&models)
                .map_err(|e| e.to_string())?,
        );
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        graph_worst < 1e-5 && state_worst < 1e-4 && secs < 30.0,
        format!("graphs max rel err {graph_worst:.2e} (< 1e-5), guidance states {state_worst:.2e} (< 1e-4), {secs:.1} s (< 30 s)"),
    )
}

fn diffusion_identities() -> Outcome {
    let start = Instant::now();
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let mut prod = 1.0;
    let mut ab_err: f64 = 0.0;
    for t in 1..=1000 {
        prod *= 1.0 - s.beta(t);
        ab_err = ab_err.max((s.alpha_bar(t) - prod).abs());
    }
    let mut r = rng(2);
    let mut rt_err: f64 = 0.0;
    for _ in 0..100 {
        let d = r.random_range(1..33);
        let t = r.random_range(1..=1000);
        let z0 = normal_tensor(&mut r, &[1, d]);
        let eps = normal_tensor(&mut r, &[1, d]);
        let zt = s.q_sample(&z0, t, &eps).map_err(|e| e.to_string())?;
        let back = s.predict_z0(&zt, &eps, t).map_err(|e| e.to_string())?;
        for (a, b) in back.data().iter().zip(z0.data()) {
            rt_err = rt_err.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        ab_err < 1e-12 && rt_err < 1e-9 && secs < 1.0,
        format!("alpha_bar err {ab_err:.1e} (< 1e-12), round trip err {rt_err:.1e} (< 1e-9), {secs:.3} s (< 1 s)"),
    )
}

fn no_op_equivalence(models: &ModelSet, heldout: &Dataset) -> Outcome {
    let mut identical = 0;
    let mut total = 0;
    for task in Task::ALL {
        for i in 0..8 {
            let s = &heldout.samples[i];
            let seed = run_seed(33, i);
            let g = GuidanceConfig {
                lambda1: 0.0,
                lambda1_audio: 0.0,
                lambda2: 0.0,
                seed,
                ..GuidanceConfig::for_task(task)
            };
            let vanilla =
                |d: &DenoiserModel, class: Option<usize>, seed: u64, m: Modality| -> Vec<f64> {
                    let y = d.prompt_embedding(class).unwrap();
                    let traj =
                        sample_vanilla(d, &y, &models.schedule, g.inf_steps, g.sampler, seed)
                            .unwrap();
                    models.decode(m, traj.final_latent()).unwrap().into_data()
                };
            let same = match task {
                Task::Joint => {
                    let r = run_joint(s.class, models, &g).map_err(|e| e.to_string())?;
                    r.v.unwrap() == vanilla(&models.denoiser_v, Some(s.class), seed, Modality::V)
                        && r.a.unwrap()
                            == vanilla(
                                &models.denoiser_a,
                                Some(s.class),
                                joint_audio_seed(seed),
                                Modality::A,
                            )
                }
                _ => {
                    let (_, cond) = condition_input(task, s, 8).map_err(|e| e.to_string())?;
                    let r = run_cross_modal(&cond, None, models, &g).map_err(|e| e.to_string())?;
                    let (d, m) = if task == Task::A2v {
                        (&models.denoiser_v, Modality::V)
                    } else {
                        (&models.denoiser_a, Modality::A)
                    };
                    r.sample(m).unwrap() == vanilla(d, None, seed, m).as_slice()
                }
            };
            identical += usize::from(same);
            total += 1;
        }
    }
    check(
        identical == total,
        format!("{identical}/{total} zero-rate runs bit-identical to vanilla DDIM"),
    )
}

fn binder_quality(binder: &BinderModel, heldout: &Dataset, train_secs: f64) -> Outcome {
    let mut parts = vec![format!("{} held-out pairs", heldout.len())];
    let mut pass = heldout.len() >= 256 && train_secs < 180.0;
    for (from, to) in [(Modality::V, Modality::A), (Modality::A, Modality::V)] {
        let r = retrieval_stats(binder, heldout, from, to).map_err(|e| e.to_string())?;
        pass &= r.gap() >= 0.3 && r.top1_accuracy >= 0.8;
        parts.push(format!(
            "{}->{} gap {:.3} (>= 0.3) top1 {:.3} (>= 0.8)",
            from.tag(),
            to.tag(),
            r.gap(),
            r.top1_accuracy
        ));
    }
    parts.push(format!("train step {train_secs:.1} s (< 180 s)"));
    check(pass, parts.join(", "))
}

fn efficacy(
    v2a: &ResultsFile,
    models: &ModelSet,
    heldout: &Dataset,
    cfg: &ExperimentConfig,
) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let a2v_cfg = task_config(cfg, Task::A2v, 64);
    let (a2v, _) =
        pipeline::run_experiment(models, heldout, &a2v_cfg).map_err(|e| e.to_string())?;
    for res in [v2a, &a2v] {
        let g = &res.guided;
        let report = pipeline::evaluate(res, None, heldout).map_err(|e| e.to_string())?;
        let a = report.summary_for(MetricKind::Alignment);
        pass &= g.records.len() == 64
            && a.guided_mean > a.vanilla_mean
            && a.sign.p_value < 0.01
            && a.relative_improvement >= 0.10;
        parts.push(format!(
            "{} (lambda1 {}, optim_start {}): {:.4} -> {:.4}, p {:.1e} (< 0.01), rel {:+.1}% (>= 10%)",
            g.task,
            g.lambda1,
            g.optim_start,
            a.vanilla_mean,
            a.guided_mean,
            a.sign.p_value,
            100.0 * a.relative_improvement
        ));
    }
    check(pass, parts.join("; "))
}

fn triangle_reduction(models: &ModelSet, heldout: &Dataset, cfg: &ExperimentConfig) -> Outcome {
    let c = task_config(cfg, Task::Joint, 32);
    let (res, _) = pipeline::run_experiment(models, heldout, &c).map_err(|e| e.to_string())?;
    let report = pipeline::evaluate(&res, None, heldout).map_err(|e| e.to_string())?;
    let t = report.summary_for(MetricKind::TriangleFinal);
    check(
        (c.lambda1, c.lambda1_audio) == (0.01, 0.1)
            && t.guided_mean < t.vanilla_mean
            && t.sign.p_value < 0.01,
        format!(
            "joint rates v {} a {}: triangle {:.4} -> {:.4}, {} of {} lower, p {:.1e} (< 0.01)",
            c.lambda1,
            c.lambda1_audio,
            t.vanilla_mean,
            t.guided_mean,
            t.sign.negative,
            res.guided.records.len(),
            t.sign.p_value
        ),
    )
}

fn guided_step_accounting(models: &ModelSet, heldout: &Dataset, cfg: &ExperimentConfig) -> Outcome {
    let g = GuidanceConfig {
        optim_start: 0.2,
        inf_steps: 30,
        ..cfg.guidance()
    };
    let r = pipeline::generate_one(models, heldout, cfg, &g, 0).map_err(|e| e.to_string())?;
    let first = r.steps.first().map_or(usize::MAX, |s| s.step_index);
    check(
        r.steps.len() == 24 && g.guided_step_count() == 24 && first == 6,
        format!(
            "{} guided steps recorded (24), first at step index {first} (6)",
            r.steps.len()
        ),
    )
}

fn determinism(
    out: &Path,
    cfg: &ExperimentConfig,
    models: &ModelSet,
    heldout: &Dataset,
) -> Outcome {
    let p = Paths::new(cfg);
    let written = std::fs::read(&p.results).map_err(|e| e.to_string())?;
    let (again, _) = pipeline::run_experiment(models, heldout, cfg).map_err(|e| e.to_string())?;
    let results_same = serde_json::to_vec_pretty(&again).map_err(|e| e.to_string())? == written;

    let scratch = out.join("roundtrip");
    std::fs::create_dir_all(&scratch).map_err(|e| e.to_string())?;
    let mut ck_same = true;
    for path in [&p.ae_v, &p.ae_a, &p.denoiser_v, &p.denoiser_a, &p.binder] {
        let ck = Checkpoint::load(path).map_err(|e| e.to_string())?;
        let copy = scratch.join(path.file_name().unwrap());
        ck.save(&copy).map_err(|e| e.to_string())?;
        ck_same &= std::fs::read(&copy).map_err(|e| e.to_string())?
            == std::fs::read(path).map_err(|e| e.to_string())?;
    }
    let (ae, meta) = load_checkpoint::<Autoencoder>(&p.ae_v).map_err(|e| e.to_string())?;
    let model_copy = scratch.join("ae_v_model.shla");
    save_checkpoint(&ae, &meta, &model_copy).map_err(|e| e.to_string())?;
    ck_same &= std::fs::read(&model_copy).ok() == std::fs::read(&p.ae_v).ok();

    let mut ds_same = true;
    for path in [&p.train, &p.heldout] {
        let ds = Dataset::load(path).map_err(|e| e.to_string())?;
        let copy = scratch.join(path.file_name().unwrap());
        ds.save(&copy).map_err(|e| e.to_string())?;
        ds_same &= std::fs::read(&copy).ok() == std::fs::read(path).ok();
    }

    let bytes = std::fs::read(&p.denoiser_v).map_err(|e| e.to_string())?;
    let mut rejected = 0;
    let probes = [8, bytes.len() / 3, bytes.len() / 2, bytes.len() - 3];
    for &at in &probes {
        let mut bad = bytes.clone();
        bad[at] ^= 0x01;
        let path = scratch.join("corrupt.shla");
        std::fs::write(&path, &bad).map_err(|e| e.to_string())?;
        rejected += usize::from(load_checkpoint::<DenoiserModel>(&path).is_err());
    }
    let path = scratch.join("truncated.shla");
    std::fs::write(&path, &bytes[..bytes.len() - 100]).map_err(|e| e.to_string())?;
    rejected += usize::from(load_checkpoint::<DenoiserModel>(&path).is_err());

    check(
        results_same && ck_same && ds_same && rejected == probes.len() + 1,
        format!(
            "results payload identical: {results_same}, checkpoint round trip exact: {ck_same}, dataset round trip exact: {ds_same}, corrupted checkpoints rejected {rejected}/{}",
            probes.len() + 1
        ),
    )
}

fn task_config(base: &ExperimentConfig, task: Task, runs: usize) -> ExperimentConfig {
    let g = GuidanceConfig::for_task(task);
    ExperimentConfig {
        task,
        runs,
        lambda1: g.lambda1,
        lambda1_audio: g.lambda1_audio,
        optim_start: g.optim_start,
        prompt_tuning: g.prompt_tuning,
        ..base.clone()
    }
}

struct Pipeline {
    cfg: ExperimentConfig,
    stages: Vec<(&'static str, f64)>,
    eval_rows: usize,
}

fn end_to_end(out: &Path) -> Result<Pipeline, String> {
    let out_s = out.to_string_lossy().into_owned();
    let mut stages = Vec::new();
    for stage in ["gen-data", "train", "run", "eval"] {
        let start = Instant::now();
        let o = Command::new(env!("CARGO_BIN_EXE_latent-aligner"))
            .args([stage, "--task", "v2a", "--runs", "64", "--out", &out_s])
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!(
                "{stage} failed: {}",
                String::from_utf8_lossy(&o.stderr)
            ));
        }
        stages.push((stage, start.elapsed().as_secs_f64()));
    }
    let cfg = ExperimentConfig {
        task: Task::V2a,
        runs: 64,
        out: out_s,
        ..ExperimentConfig::default()
    };
    let csv = std::fs::read_to_string(Paths::new(&cfg).eval_csv).map_err(|e| e.to_string())?;
    let eval_rows = read_csv_rows(&csv).map_err(|e| e.to_string())?.len();
    Ok(Pipeline {
        cfg,
        stages,
        eval_rows,
    })
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        let (tag, detail) = match &o {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} [{n}] {name}: {detail}");
        results.push((n, name, o));
    };

    report(1, "gradient fidelity", gradient_fidelity());
    report(2, "diffusion identities", diffusion_identities());

    let dir = tempfile::tempdir().expect("tempdir");
    let start = Instant::now();
    let pipe = end_to_end(dir.path());
    let total = start.elapsed().as_secs_f64();
    let loaded = pipe.as_ref().map_err(Clone::clone).and_then(|p| {
        let models = pipeline::load_models(&p.cfg).map_err(|e| e.to_string())?;
        let heldout = Dataset::load(&Paths::new(&p.cfg).heldout).map_err(|e| e.to_string())?;
        let v2a: ResultsFile = serde_json::from_slice(
            &std::fs::read(Paths::new(&p.cfg).results).map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        Ok((models, heldout, v2a))
    });

    match (&pipe, &loaded) {
        (Ok(p), Ok((models, heldout, v2a))) => {
            let train_secs = p
                .stages
                .iter()
                .find(|s| s.0 == "train")
                .map_or(f64::NAN, |s| s.1);
            report(3, "no-op equivalence", no_op_equivalence(models, heldout));
            report(
                4,
                "binder quality",
                binder_quality(&models.binder, heldout, train_secs),
            );
            report(
                5,
                "guidance efficacy",
                efficacy(v2a, models, heldout, &p.cfg),
            );
            report(
                6,
                "joint triangle reduction",
                triangle_reduction(models, heldout, &p.cfg),
            );
            report(
                7,
                "guided-step accounting",
                guided_step_accounting(models, heldout, &p.cfg),
            );
            report(
                8,
                "determinism and persistence",
                determinism(dir.path(), &p.cfg, models, heldout),
            );
        }
        (Err(e), _) | (_, Err(e)) => {
            for (n, name) in [
                (3, "no-op equivalence"),
                (4, "binder quality"),
                (5, "guidance efficacy"),
                (6, "joint triangle reduction"),
                (7, "guided-step accounting"),
                (8, "determinism and persistence"),
            ] {
                report(n, name, Err(format!("pipeline unavailable: {e}")));
            }
        }
    }
    let e2e = pipe.and_then(|p| {
        let stages = p
            .stages
            .iter()
            .map(|(s, t)| format!("{s} {t:.1} s"))
            .collect::<Vec<_>>()
            .join(", ");
        check(
            total < 600.0 && p.eval_rows == 64,
            format!(
                "{stages}; total {total:.1} s (< 600 s), {} eval rows (64), {} core(s)",
                p.eval_rows,
                std::thread::available_parallelism().map_or(1, |n| n.get())
            ),
        )
    });
    report(9, "end-to-end budget", e2e);

    let failed: Vec<usize> = results
        .iter()
        .filter(|r| r.2.is_err())
        .map(|r| r.0)
        .collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
