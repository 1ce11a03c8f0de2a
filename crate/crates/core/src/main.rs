use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use latent_aligner::harness::config::KEYS;
use latent_aligner::harness::{parse_config, pipeline};
use latent_aligner::metrics::MetricKind;

#[derive(Parser)]
#[command(
    name = "latent-aligner",
    version,
    about = "Guided paired-modality diffusion on a synthetic world"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic training and held-out datasets.
    GenData,
    /// Train autoencoders, denoisers and the binder; write checkpoints.
    Train,
    /// Run matched vanilla and guided generations for the task.
    Run,
    /// Compare the run's vanilla and guided results; write the CSV report.
    Eval,
    /// Grid over lambda1, optim_start and num_optim_steps.
    Sweep,
    /// Print the resolved configuration with the source of each value.
    Config,
}

#[derive(Args)]
struct Flags {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    task: Option<String>,
    #[arg(long, global = true)]
    lambda1: Option<f64>,
    #[arg(long, global = true)]
    lambda2: Option<f64>,
    #[arg(long, global = true)]
    optim_start: Option<f64>,
    #[arg(long, global = true)]
    inf_steps: Option<usize>,
    #[arg(long, global = true)]
    num_optim_steps: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<String>,
    #[arg(long, global = true)]
    no_prompt_tuning: bool,
    #[arg(long, global = true)]
    stop_grad_denoiser: bool,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Flags {
    fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("task", self.task.clone());
        push("lambda1", self.lambda1.map(|v| v.to_string()));
        push("lambda2", self.lambda2.map(|v| v.to_string()));
        push("optim_start", self.optim_start.map(|v| v.to_string()));
        push("inf_steps", self.inf_steps.map(|v| v.to_string()));
        push(
            "num_optim_steps",
            self.num_optim_steps.map(|v| v.to_string()),
        );
        push("seed", self.seed.map(|v| v.to_string()));
        push("runs", self.runs.map(|v| v.to_string()));
        push("out", self.out.clone());
        push(
            "prompt_tuning",
            self.no_prompt_tuning.then(|| "false".to_string()),
        );
        push(
            "grad_through_denoiser",
            self.stop_grad_denoiser.then(|| "false".to_string()),
        );
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let resolved = parse_config(cli.flags.config.as_deref(), &cli.flags.pairs()?)?;
    let cfg = &resolved.config;
    let started = Instant::now();
    for k in KEYS {
        let src = resolved.source(k);
        if src != latent_aligner::harness::Source::Default {
            eprintln!("{k} = {} ({src})", cfg.get(k).unwrap());
        }
    }
    match cli.command {
        Command::Config => print!("{}", resolved.describe()),
        Command::GenData => {
            for p in pipeline::cmd_gen_data(cfg)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train => {
            let s = pipeline::cmd_train(cfg)?;
            println!("autoencoder rms: v {:.4} a {:.4}", s.ae_rms_v, s.ae_rms_a);
            println!(
                "held-out noise loss: v {:.4} (zero {:.4}) a {:.4} (zero {:.4})",
                s.heldout_noise_loss_v.0,
                s.heldout_noise_loss_v.1,
                s.heldout_noise_loss_a.0,
                s.heldout_noise_loss_a.1
            );
            println!(
                "binder loss {:.4} -> {:.4}",
                s.binder_initial_loss, s.binder_final_loss
            );
            for (k, r) in &s.retrieval {
                println!(
                    "retrieval {k}: top1 {:.3} gap {:.3}",
                    r.top1_accuracy,
                    r.gap()
                );
            }
            println!("wrote checkpoints to {}", cfg.checkpoint_dir().display());
        }
        Command::Run => {
            let p = pipeline::cmd_run(cfg)?;
            println!("wrote {}", p.display());
        }
        Command::Eval => {
            let report = pipeline::cmd_eval(cfg)?;
            print!(
                "{}",
                report
                    .summary_text()
                    .lines()
                    .filter(|l| !l.starts_with('#'))
                    .map(|l| format!("{l}\n"))
                    .collect::<String>()
            );
            let a = report.summary_for(MetricKind::Alignment);
            println!(
                "alignment relative improvement {:+.1}%",
                100.0 * a.relative_improvement
            );
            println!("wrote {}", pipeline::Paths::new(cfg).eval_csv.display());
        }
        Command::Sweep => {
            let (p, rows) = pipeline::cmd_sweep(cfg)?;
            for r in &rows {
                println!(
                    "lambda1 {} optim_start {} N {}: align {:.4} -> {:.4} (p {:.2e}) triangle {:.4} -> {:.4}",
                    r.lambda1,
                    r.optim_start,
                    r.num_optim_steps,
                    r.align_vanilla,
                    r.align_guided,
                    r.align_p,
                    r.triangle_final_vanilla,
                    r.triangle_final_guided
                );
            }
            println!("wrote {}", p.display());
        }
    }
    eprintln!("done in {:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}
