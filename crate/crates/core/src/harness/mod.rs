//! Experiment orchestration: configuration, checkpoints and subcommands.

pub mod checkpoint;
pub mod config;
pub mod pipeline;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelKind, Persist};
pub use config::{parse_config, ExperimentConfig, ResolvedConfig, Source};
pub use pipeline::Paths;

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}
