use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lorakey_cli::artifacts::Artifacts;
use lorakey_cli::commands::{self, ImageSource, ModelChoice, ProtectArgs};
use lorakey_cli::config::{config_schema, ExperimentConfig};
use lorakey_cli::{report, resolve_artifacts, CliError, ARTIFACTS_ENV};

/// Watermark key adapters for a desk-scale latent diffusion model.
#[derive(Parser)]
#[command(name = "lorakey", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set prior.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Artifact directory. Precedence: this flag, `output_dir` in the config,
    /// then the `LORAKEY_ARTIFACTS` environment variable, then `./artifacts`.
    #[arg(long, global = true)]
    artifacts: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base denoiser and the latent watermark prior.
    TrainPrior,
    /// Train the key adapter for the owner message.
    TrainKey,
    /// Train a style adapter (`style.*` in the config).
    TrainStyle {
        /// Shorthand for `--set style.name=NAME`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Superpose the key with a style adapter: base + α·style + γ·key.
    Protect {
        /// Style adapter file instead of `styles/<deploy.style>.lkw`.
        #[arg(long)]
        style: Option<PathBuf>,
        /// Key adapter file instead of `key/key.lkw`.
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        /// Shorthand for `--set deploy.name=NAME`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Sample images from the protected model (or a control model).
    Generate {
        /// Number of images (default `verify.n_images`).
        #[arg(long)]
        n: Option<usize>,
        /// Sample the same superposition without the key.
        #[arg(long, conflicts_with = "base")]
        unwatermarked: bool,
        /// Sample the base denoiser alone.
        #[arg(long)]
        base: bool,
        /// Skip writing PPM files.
        #[arg(long)]
        no_ppm: bool,
    },
    /// Check images for the registered watermark.
    Verify {
        /// Generated image tag (default: the protected model's).
        #[arg(long, conflicts_with = "path")]
        images: Option<String>,
        /// A PPM file or a directory of PPM files.
        #[arg(long)]
        path: Option<PathBuf>,
        /// Tag of an unwatermarked set for the empirical false-positive rate.
        #[arg(long)]
        control: Option<String>,
    },
    /// Run the robustness suite and parameter-space attacks.
    Attack {
        /// Shorthand for `--set attack.n_images=N`.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Write reports/summary.md and reports/summary.csv.
    Report,
    /// Print the effective configuration.
    Config,
    /// Print the JSON Schema of the configuration.
    Schema,
}

fn emit<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut overrides = cli.global.set.clone();
    match &cli.command {
        Command::TrainStyle { name: Some(n) } => overrides.push(format!("style.name={}", json_str(n))),
        Command::Protect { alpha, gamma, name, .. } => {
            if let Some(a) = alpha {
                overrides.push(format!("deploy.alpha={a}"));
            }
            if let Some(g) = gamma {
                overrides.push(format!("deploy.gamma={g}"));
            }
            if let Some(n) = name {
                overrides.push(format!("deploy.name={}", json_str(n)));
            }
        }
        Command::Attack { n: Some(n) } => overrides.push(format!("attack.n_images={n}")),
        _ => {}
    }
    let cfg = ExperimentConfig::load(cli.global.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Config => return emit(&cfg),
        Command::Schema => return emit(&config_schema()),
        _ => {}
    }
    let root = resolve_artifacts(cli.global.artifacts.as_deref(), &cfg, std::env::var_os(ARTIFACTS_ENV));
    let mut arts = Artifacts::open(&root)?;
    let started = Instant::now();
    eprintln!("artifacts: {}", root.display());
    match cli.command {
        Command::TrainPrior => emit(&commands::train_prior_cmd(&mut arts, &cfg)?)?,
        Command::TrainKey => emit(&commands::train_key_cmd(&mut arts, &cfg)?)?,
        Command::TrainStyle { .. } => {
            let path = commands::train_style_cmd(&mut arts, &cfg)?;
            println!("{}", path.display());
        }
        Command::Protect { style, key, .. } => emit(&commands::protect_cmd(&mut arts, &cfg, &ProtectArgs { style, key })?)?,
        Command::Generate {
            n,
            unwatermarked,
            base,
            no_ppm,
        } => {
            let model = if base {
                ModelChoice::Base
            } else if unwatermarked {
                ModelChoice::Unwatermarked(cfg.deploy.name.clone())
            } else {
                ModelChoice::Protected(cfg.deploy.name.clone())
            };
            let n = n.unwrap_or(cfg.verify.n_images);
            emit(&commands::generate_cmd(&mut arts, &cfg, &model, n, !no_ppm)?)?
        }
        Command::Verify { images, path, control } => {
            let src = match (images, path) {
                (_, Some(p)) => ImageSource::Path(p),
                (Some(t), None) => ImageSource::Tag(t),
                (None, None) => ImageSource::Tag(cfg.deploy.name.clone()),
            };
            let control = control.map(ImageSource::Tag);
            let r = commands::verify_cmd(&mut arts, &cfg, &src, control.as_ref())?;
            emit(&serde_json::json!({
                "images": r.entries.len(),
                "tau": r.policy.tau,
                "fpr_at_tau": r.fpr_at_tau,
                "mean_bit_accuracy": r.mean_bit_accuracy,
                "acceptance_rate": r.acceptance_rate,
                "empirical_fpr": r.empirical_fpr,
            }))?
        }
        Command::Attack { .. } => {
            let r = commands::attack_cmd(&mut arts, &cfg)?;
            print!("{}", r.to_csv());
            print!("{}", r.curves_csv());
        }
        Command::Report => {
            report::report_cmd(&mut arts, &cfg)?;
            println!("{}", arts.path("reports/summary.md").display());
        }
        Command::Config | Command::Schema => unreachable!("handled above"),
    }
    eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn json_str(s: &str) -> String {
    serde_json::Value::String(s.to_string()).to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).context("lorakey failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.chain().find_map(|c| c.downcast_ref::<CliError>()).map_or(1, CliError::exit_code);
            ExitCode::from(code)
        }
    }
}
