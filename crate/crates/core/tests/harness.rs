use std::path::Path;
use std::process::Command;

use latent_aligner::diffusion::DenoiserModel;
use latent_aligner::harness::pipeline::{self, Paths};
use latent_aligner::harness::{load_checkpoint, parse_config, ExperimentConfig};
use latent_aligner::metrics::{read_csv_rows, MetricKind};
use latent_aligner::Error;

const SMALL: &str = "\
# tiny world for fast pipeline checks
train_per_class = 16
heldout_per_class = 2
ae_epochs = 5
denoiser_epochs = 5
binder_epochs = 5
batch_size = 32
inf_steps = 10
runs = 4
threads = 1
sweep_lambda1 = 0, 0.1, 0.5
";

fn cli(dir: &Path, args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_latent-aligner"))
        .current_dir(dir)
        .args(["--config", "small.conf", "--out", "out"])
        .args(args)
        .output()
        .unwrap();
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cli(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small(dir: &Path) -> ExperimentConfig {
    std::fs::write(dir.join("small.conf"), SMALL).unwrap();
    let out = dir.join("out").to_string_lossy().into_owned();
    parse_config(Some(&dir.join("small.conf")), &[("out".into(), out)])
        .unwrap()
        .config
}

#[test]
fn cli_chain_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small(d);
    let err = cli(d, &["run"]);
    assert!(!err.status.success());
    assert!(String::from_utf8_lossy(&err.stderr).contains("train"));

    ok(d, &["gen-data"]);
    let p = Paths::new(&cfg);
    assert!(p.train.exists() && p.heldout.exists() && p.data_echo.exists());
    let stdout = ok(d, &["train"]);
    assert!(stdout.contains("retrieval v->a"));
    ok(d, &["run"]);
    let first = std::fs::read(&p.results).unwrap();
    ok(d, &["run"]);
    assert_eq!(std::fs::read(&p.results).unwrap(), first);
    let stdout = ok(d, &["eval"]);
    assert!(stdout.contains("alignment"));

    let text = std::fs::read_to_string(&p.eval_csv).unwrap();
    assert!(text.starts_with("# version = "));
    assert!(text.contains("# lambda1 = 0.1"));
    let rows = read_csv_rows(&text).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(std::fs::read_to_string(&p.eval_summary)
        .unwrap()
        .contains("alignment"));

    ok(d, &["sweep"]);
    let sweep = std::fs::read_to_string(&p.sweep_csv).unwrap();
    let body: Vec<&str> = sweep.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body.len(), 1 + 6);

    let described = ok(d, &["--lambda2", "0.5", "config"]);
    assert!(described.contains("lambda2 = 0.5  (flag)"));
    assert!(described.contains("runs = 4  (file)"));
    assert!(described.contains("seed = 33  (default)"));
    assert!(!cli(d, &["--set", "lambd2=1", "config"]).status.success());
}

#[test]
fn pipeline_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    assert!(matches!(
        pipeline::load_models(&cfg),
        Err(Error::MissingPrerequisite(_))
    ));
    assert!(matches!(
        pipeline::cmd_train(&cfg),
        Err(Error::MissingPrerequisite(_))
    ));
    assert!(matches!(
        pipeline::cmd_eval(&cfg),
        Err(Error::MissingPrerequisite(_))
    ));

    pipeline::cmd_gen_data(&cfg).unwrap();
    pipeline::cmd_train(&cfg).unwrap();
    let p = Paths::new(&cfg);
    let models = pipeline::load_models(&cfg).unwrap();
    let heldout = latent_aligner::world::Dataset::load(&p.heldout).unwrap();

    // zero rates: guided == vanilla for every record
    let off = ExperimentConfig {
        lambda1: 0.0,
        lambda1_audio: 0.0,
        lambda2: 0.0,
        ..cfg.clone()
    };
    let (res, _) = pipeline::run_experiment(&models, &heldout, &off).unwrap();
    assert_eq!(res.vanilla.records, res.guided.records);
    let report = pipeline::evaluate(&res, None, &heldout).unwrap();
    for k in MetricKind::ALL {
        assert_eq!(report.summary_for(k).mean_diff, 0.0);
    }
    assert!(report
        .rows
        .iter()
        .all(|r| r.align_guided == r.align_vanilla));

    // checkpoints survive a round trip and reject damage
    let (d, meta) = load_checkpoint::<DenoiserModel>(&p.denoiser_v).unwrap();
    assert_eq!(d, models.denoiser_v);
    assert!(meta.contains("seed = 33"));
    let mut bytes = std::fs::read(&p.denoiser_v).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&p.denoiser_v, &bytes).unwrap();
    assert!(matches!(
        load_checkpoint::<DenoiserModel>(&p.denoiser_v),
        Err(Error::Checksum { .. })
    ));
    std::fs::write(&p.denoiser_v, &bytes[..mid]).unwrap();
    assert!(load_checkpoint::<DenoiserModel>(&p.denoiser_v).is_err());
    assert!(matches!(
        load_checkpoint::<DenoiserModel>(&p.binder),
        Err(Error::KindMismatch { .. })
    ));
}

#[test]
fn config_file_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.conf");
    std::fs::write(&path, "seed = 1\nlambda_1 = 0.2\n").unwrap();
    let err = parse_config(Some(&path), &[]).unwrap_err().to_string();
    assert!(err.contains("lambda_1") && err.contains("lambda1"), "{err}");
    std::fs::write(&path, "task = joint\n").unwrap();
    let cfg = parse_config(Some(&path), &[]).unwrap().config;
    assert_eq!(
        (cfg.lambda1, cfg.lambda1_audio, cfg.prompt_tuning),
        (0.01, 0.1, true)
    );
    assert!(parse_config(Some(&dir.path().join("missing.conf")), &[]).is_err());
}
