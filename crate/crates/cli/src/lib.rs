//! Experiment pipelines behind the `lorakey` binary: configuration,
//! artifact bookkeeping, the subcommands and report emission.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use error::{CliError, CliResult};

/// Environment variable naming the default artifact directory.
pub const ARTIFACTS_ENV: &str = "LORAKEY_ARTIFACTS";

/// `--artifacts` flag, then the config's `output_dir`, then
/// `$LORAKEY_ARTIFACTS`, then `./artifacts`.
pub fn resolve_artifacts(
    flag: Option<&std::path::Path>,
    cfg: &config::ExperimentConfig,
    env: Option<std::ffi::OsString>,
) -> std::path::PathBuf {
    flag.map(std::path::Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| env.filter(|v| !v.is_empty()).map(Into::into))
        .unwrap_or_else(|| "artifacts".into())
}
