//! The experiment pipeline, one function per subcommand.
//!
//! Dependency order: `train-prior` → `train-key` → {`protect`, `generate`,
//! `verify`, `attack`}; `train-style` needs only the base from `train-prior`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use lorakey::attacks::{
    control_row, curve, finetune_attack, fusion_attack, prune_attack, run_robustness_suite, AttackReport,
    FinetuneConfig, ImageAttack,
};
use lorakey::container::{Container, Dtype};
use lorakey::diffusion::{train_base_denoiser, Denoiser, NoisePredictor, NoiseSchedule};
use lorakey::lora::{merge_adapters, LoraAdapter, MergedModel};
use lorakey::numerics::{Rng, Tensor};
use lorakey::pipeline::Deployment;
use lorakey::ppm::read_ppm;
use lorakey::stage1::{
    evaluate_prior, extract_logits, residual_rms, train_prior, Message, MessageEncoder, WatermarkDecoder,
    PRIOR_LOG_HEADER,
};
use lorakey::stage2::{train_style_lora, train_watermark_lora, KeyContext, StyleSpec, KEY_LOG_HEADER};
use lorakey::verify::{verify_logits, VerificationPolicy, VerificationReport};
use lorakey::world::{build_codec, LatentCodec, PerceptionNet, SyntheticWorld};

use crate::artifacts::{sha256_hex, Artifacts};
use crate::config::{ExperimentConfig, StyleTarget};
use crate::error::{CliError, CliResult};

pub const BASE: &str = "base/denoiser.lkw";
pub const ENCODER: &str = "prior/encoder.lkw";
pub const DECODER: &str = "prior/decoder.lkw";
pub const KEY: &str = "key/key.lkw";
pub const REGISTRATION: &str = "key/registration.json";

const PRIOR_HINT: &str = "lorakey train-prior";
const KEY_HINT: &str = "lorakey train-key";
const PROTECT_HINT: &str = "lorakey protect";

/// Largest prediction gap tolerated between the flat merged model and the
/// lazily merged adapters it was folded from.
pub const MERGE_TOLERANCE: f64 = 1e-10;

/// The frozen, seed-determined components every command rebuilds.
pub struct Lab {
    pub world: SyntheticWorld,
    pub codec: LatentCodec,
    pub perception: PerceptionNet,
    pub schedule: NoiseSchedule,
}

impl Lab {
    pub fn build(cfg: &ExperimentConfig) -> CliResult<Self> {
        Ok(Self {
            world: SyntheticWorld::generate(cfg.seed, &cfg.world)?,
            codec: build_codec(cfg.seed, cfg.codec.clone())?,
            perception: PerceptionNet::build(cfg.seed, cfg.codec.image, &cfg.perception)?,
            schedule: NoiseSchedule::from_config(&cfg.schedule)?,
        })
    }
}

fn rng(cfg: &ExperimentConfig, label: &str) -> Rng {
    Rng::new(cfg.seed, label)
}

fn style_rel(name: &str) -> String {
    format!("styles/{name}.lkw")
}

fn protected_rel(name: &str) -> (String, String) {
    (format!("protected/{name}.lkw"), format!("protected/{name}.json"))
}

fn images_rel(tag: &str) -> String {
    format!("images/{tag}/images.lkw")
}

fn loss_csv(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut out = format!("{header}\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

fn invariant(ok: bool, msg: impl FnOnce() -> String) -> CliResult<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Invariant(msg()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSummary {
    pub base_final_loss: f64,
    pub clean_bit_accuracy: f64,
    pub distorted_bit_accuracy: f64,
    pub residual_rms: f64,
}

/// Train the base denoiser and the Stage-1 prior.
pub fn train_prior_cmd(arts: &mut Artifacts, cfg: &ExperimentConfig) -> CliResult<PriorSummary> {
    arts.check_foundation(cfg)?;
    let lab = Lab::build(cfg)?;
    let (base, base_log) = train_base_denoiser(&lab.world, &lab.schedule, &cfg.denoiser, &cfg.base, &rng(cfg, "base"))?;
    arts.write_container(BASE, &base.to_container()?)?;
    arts.write(
        "base/log.csv",
        loss_csv("step,loss", base_log.iter().enumerate().map(|(i, l)| format!("{i},{l}"))).as_bytes(),
    )?;

    let prior = train_prior(&lab.world, &lab.codec, &lab.perception, &cfg.prior, &rng(cfg, "prior"))?;
    arts.write_container(ENCODER, &prior.encoder.to_container()?)?;
    arts.write_container(DECODER, &prior.decoder.to_container()?)?;
    arts.write(
        "prior/log.csv",
        loss_csv(PRIOR_LOG_HEADER, prior.log.iter().map(|r| r.csv())).as_bytes(),
    )?;

    let mut eval = rng(cfg, "prior-eval");
    let tail = base_log.len().min(100).max(1);
    let summary = PriorSummary {
        base_final_loss: base_log.iter().rev().take(tail).sum::<f64>() / tail as f64,
        clean_bit_accuracy: evaluate_prior(&lab.world, &lab.codec, &prior.encoder, &prior.decoder, None, 1000, &mut eval)?,
        distorted_bit_accuracy: evaluate_prior(
            &lab.world,
            &lab.codec,
            &prior.encoder,
            &prior.decoder,
            Some(&cfg.prior.distortion),
            1000,
            &mut eval,
        )?,
        residual_rms: residual_rms(&prior.encoder, 1000, &mut eval)?,
    };
    arts.write_json("prior/summary.json", &summary)?;
    arts.commit("train-prior", "train-prior", cfg)?;
    Ok(summary)
}

/// The owner's message: configured, or drawn from the seed.
pub fn owner_message(cfg: &ExperimentConfig) -> CliResult<Message> {
    match &cfg.message {
        Some(m) => Ok(m.clone()),
        None => Ok(Message::random(cfg.prior.message_len, &mut rng(cfg, "message"))?),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Registration {
    pub message: Message,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeySummary {
    pub final_l_wm: f64,
    pub final_l_sem: f64,
    /// Mean |cos| between the applied watermark update and the semantic
    /// gradient over all logged micro-steps.
    pub mean_abs_cos_applied: f64,
}

fn load_base(arts: &Artifacts) -> CliResult<Denoiser> {
    arts.load(BASE, "base denoiser", PRIOR_HINT, Denoiser::from_container)
}

fn load_decoder(arts: &Artifacts) -> CliResult<WatermarkDecoder> {
    arts.load(DECODER, "watermark decoder", PRIOR_HINT, WatermarkDecoder::from_container)
}

fn load_registration(arts: &Artifacts) -> CliResult<Message> {
    let bytes = arts.read(REGISTRATION, "key registration", KEY_HINT)?;
    let r: Registration = serde_json::from_slice(&bytes).map_err(|e| CliError::Corrupt {
        path: arts.path(REGISTRATION),
        source: lorakey::Error::Corrupt(e.to_string()),
    })?;
    Ok(r.message)
}

/// Train the key adapter for the owner message.
pub fn train_key_cmd(arts: &mut Artifacts, cfg: &ExperimentConfig) -> CliResult<KeySummary> {
    arts.check_foundation(cfg)?;
    let base = load_base(arts)?;
    let encoder = arts.load(ENCODER, "message encoder", PRIOR_HINT, MessageEncoder::from_container)?;
    let lab = Lab::build(cfg)?;
    let message = owner_message(cfg)?;
    let ctx = KeyContext::new(&base, &lab.codec, &lab.perception, &lab.schedule, &encoder, &message)?;
    let trained = train_watermark_lora(&ctx, &lab.world, &cfg.key, &rng(cfg, "key"))?;
    arts.write_container(KEY, &trained.adapter.to_container()?)?;
    arts.write("key/log.csv", loss_csv(KEY_LOG_HEADER, trained.log.iter().map(|r| r.csv())).as_bytes())?;
    arts.write_json(REGISTRATION, &Registration { message })?;
    let tail = &trained.log[trained.log.len().saturating_sub(100)..];
    let n = tail.len().max(1) as f64;
    let summary = KeySummary {
        final_l_wm: tail.iter().map(|r| r.l_wm).sum::<f64>() / n,
        final_l_sem: tail.iter().map(|r| r.l_sem).sum::<f64>() / n,
        mean_abs_cos_applied: trained.log.iter().map(|r| r.cos_proj_sem.abs()).sum::<f64>()
            / trained.log.len().max(1) as f64,
    };
    arts.write_json("key/summary.json", &summary)?;
    arts.commit("train-key", "train-key", cfg)?;
    Ok(summary)
}

fn style_spec(cfg: &ExperimentConfig) -> StyleSpec {
    let d = cfg.world.latent_dim;
    match &cfg.style.target {
        StyleTarget::ShiftCoord { coord, delta } => StyleSpec::shift_coord(d, *coord, *delta),
        StyleTarget::RandomShift { magnitude } => {
            StyleSpec::random_shift(d, *magnitude, &mut rng(cfg, &format!("style-spec:{}", cfg.style.name)))
        }
        StyleTarget::Explicit { spec } => spec.clone(),
    }
}

/// Train the configured style adapter on the frozen base.
pub fn train_style_cmd(arts: &mut Artifacts, cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    arts.check_foundation(cfg)?;
    let base = load_base(arts)?;
    let lab = Lab::build(cfg)?;
    let name = &cfg.style.name;
    let spec = style_spec(cfg);
    let (adapter, log) = train_style_lora(
        &base,
        &lab.world,
        &spec,
        &lab.schedule,
        &cfg.style.train,
        name,
        &rng(cfg, &format!("style:{name}")),
    )?;
    let path = arts.write_container(&style_rel(name), &adapter.to_container()?)?;
    arts.write_json(&format!("styles/{name}.spec.json"), &spec)?;
    arts.write(
        &format!("styles/{name}.log.csv"),
        loss_csv("step,loss", log.iter().enumerate().map(|(i, l)| format!("{i},{l}"))).as_bytes(),
    )?;
    arts.commit(&format!("train-style:{name}"), "train-style", cfg)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRef {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterRef {
    pub file: FileRef,
    pub name: String,
    pub coefficient: f64,
}

/// How a protected model was assembled; loading it re-merges lazily.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtectedManifest {
    pub format: String,
    pub base: FileRef,
    pub adapters: Vec<AdapterRef>,
    pub merged: FileRef,
    /// Largest |prediction difference| between the two load paths on a probe batch.
    pub max_prediction_gap: f64,
}

const PROTECTED_FORMAT: &str = "lorakey-protected/1";

/// Resolve a user path: absolute as given, otherwise relative to the cwd.
/// Paths inside the artifact directory are recorded relative to it.
fn file_ref(arts: &Artifacts, path: &Path, bytes: &[u8]) -> FileRef {
    let rel = path.strip_prefix(arts.root()).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf());
    FileRef {
        path: rel,
        sha256: sha256_hex(bytes),
    }
}

fn read_external(arts: &Artifacts, r: &FileRef, what: &str, hint: &str) -> CliResult<Vec<u8>> {
    let path = if r.path.is_absolute() { r.path.clone() } else { arts.root().join(&r.path) };
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            what: what.into(),
            path,
            hint: hint.into(),
        });
    }
    let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    if sha256_hex(&bytes) != r.sha256 {
        return Err(CliError::Corrupt {
            path,
            source: lorakey::Error::Corrupt("checksum differs from the protected manifest".into()),
        });
    }
    Ok(bytes)
}

fn adapter_from_bytes(path: &Path, bytes: &[u8]) -> CliResult<LoraAdapter> {
    Container::from_bytes(bytes)
        .and_then(|c| LoraAdapter::from_container(&c))
        .map_err(|source| CliError::Corrupt {
            path: path.to_path_buf(),
            source,
        })
}

/// Deterministic probe inputs covering every timestep band and class.
fn probe_batch(model: &dyn NoisePredictor, t_max: usize, seed: u64) -> (Tensor, Vec<usize>, Vec<usize>) {
    let mut r = Rng::new(seed, "probe");
    let n = 32;
    let d = model.latent_dim();
    let z = Tensor::new(vec![n, d], (0..n * d).map(|_| 2.0 * r.normal()).collect()).expect("probe shape");
    let t = (0..n).map(|i| 1 + (i * t_max) / n).collect();
    let c = (0..n).map(|i| i % (model.num_classes() + 1)).collect();
    (z, t, c)
}

fn max_gap(a: &dyn NoisePredictor, b: &dyn NoisePredictor, t_max: usize, seed: u64) -> CliResult<f64> {
    let (z, t, c) = probe_batch(a, t_max, seed);
    let pa = a.predict(&z, &t, &c)?;
    let pb = b.predict(&z, &t, &c)?;
    Ok(pa.data().iter().zip(pb.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

#[derive(Clone, Debug, Default)]
pub struct ProtectArgs {
    /// Style adapter file; defaults to `styles/<deploy.style>.lkw`.
    pub style: Option<PathBuf>,
    /// Key adapter file; defaults to `key/key.lkw`.
    pub key: Option<PathBuf>,
}

/// Superpose the key with a style adapter. No training happens here.
pub fn protect_cmd(arts: &mut Artifacts, cfg: &ExperimentConfig, args: &ProtectArgs) -> CliResult<ProtectedManifest> {
    arts.check_foundation(cfg)?;
    let base_bytes = arts.read(BASE, "base denoiser", PRIOR_HINT)?;
    let base = Denoiser::from_container(&Container::from_bytes(&base_bytes)?).map_err(|source| CliError::Corrupt {
        path: arts.path(BASE),
        source,
    })?;

    let mut sources: Vec<(PathBuf, f64, &str, &str)> = Vec::new();
    let style_path = match (&args.style, &cfg.deploy.style) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(name)) => Some(arts.path(&style_rel(name))),
        (None, None) => None,
    };
    if let Some(p) = style_path {
        sources.push((p, cfg.deploy.alpha, "style adapter", "lorakey train-style"));
    }
    let key_path = args.key.clone().unwrap_or_else(|| arts.path(KEY));
    sources.push((key_path, cfg.deploy.gamma, "key adapter", KEY_HINT));

    let mut pairs = Vec::new();
    let mut refs = Vec::new();
    for (path, coef, what, hint) in sources {
        if !path.exists() {
            return Err(CliError::MissingArtifact {
                what: what.into(),
                path,
                hint: hint.into(),
            });
        }
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        let adapter = adapter_from_bytes(&path, &bytes)?;
        refs.push(AdapterRef {
            file: file_ref(arts, &path, &bytes),
            name: adapter.name().to_string(),
            coefficient: coef,
        });
        pairs.push((adapter, coef));
    }
    let merged = merge_adapters(&base, pairs)?;
    let flat = merged.materialize()?;
    let (model_rel, manifest_rel) = protected_rel(&cfg.deploy.name);
    let flat_bytes = flat.to_container_as(Dtype::F64)?.to_bytes()?;
    arts.write(&model_rel, &flat_bytes)?;

    // Reload the flat file so the check covers the stored bytes.
    let reloaded = Denoiser::from_container(&Container::from_bytes(&flat_bytes)?)?;
    let gap = max_gap(&reloaded, &merged, base.t_max(), cfg.seed)?;
    invariant(gap <= MERGE_TOLERANCE, || {
        format!("flat and adapter load paths differ by {gap:e} (> {MERGE_TOLERANCE:e})")
    })?;
    let manifest = ProtectedManifest {
        format: PROTECTED_FORMAT.into(),
        base: FileRef {
            path: BASE.into(),
            sha256: sha256_hex(&base_bytes),
        },
        adapters: refs,
        merged: FileRef {
            path: model_rel.into(),
            sha256: sha256_hex(&flat_bytes),
        },
        max_prediction_gap: gap,
    };
    arts.write_json(&manifest_rel, &manifest)?;
    arts.commit(&format!("protect:{}", cfg.deploy.name), "protect", cfg)?;
    Ok(manifest)
}

/// A protected deployment rebuilt from its manifest, with the flat model.
pub struct Protected {
    pub manifest: ProtectedManifest,
    pub merged: MergedModel,
    pub flat: Denoiser,
}

pub fn load_protected(arts: &Artifacts, name: &str) -> CliResult<Protected> {
    let (model_rel, manifest_rel) = protected_rel(name);
    let bytes = arts.read(&manifest_rel, "protected model manifest", PROTECT_HINT)?;
    let manifest: ProtectedManifest = serde_json::from_slice(&bytes).map_err(|e| CliError::Corrupt {
        path: arts.path(&manifest_rel),
        source: lorakey::Error::Corrupt(e.to_string()),
    })?;
    let base_bytes = read_external(arts, &manifest.base, "base denoiser", PRIOR_HINT)?;
    let base = Denoiser::from_container(&Container::from_bytes(&base_bytes)?)?;
    let mut pairs = Vec::new();
    for a in &manifest.adapters {
        let bytes = read_external(arts, &a.file, "adapter", PROTECT_HINT)?;
        pairs.push((adapter_from_bytes(&a.file.path, &bytes)?, a.coefficient));
    }
    let merged = merge_adapters(&base, pairs)?;
    let flat = arts.load(&model_rel, "protected model", PROTECT_HINT, Denoiser::from_container)?;
    Ok(Protected { manifest, merged, flat })
}

/// Which model `generate` samples from.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelChoice {
    /// `protected/<name>.lkw`.
    Protected(String),
    /// The same superposition without the key: the unwatermarked control.
    Unwatermarked(String),
    /// The base denoiser alone.
    Base,
}

impl ModelChoice {
    pub fn tag(&self) -> String {
        match self {
            ModelChoice::Protected(n) => n.clone(),
            ModelChoice::Unwatermarked(n) => format!("{n}-control"),
            ModelChoice::Base => "base".into(),
        }
    }
}

fn key_free(p: &Protected) -> CliResult<MergedModel> {
    let pairs = p
        .merged
        .pairs()
        .iter()
        .filter(|(a, _)| a.role() != lorakey::lora::AdapterRole::Watermark)
        .cloned()
        .collect();
    Ok(merge_adapters(p.merged.base(), pairs)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub tag: String,
    pub n_images: usize,
    pub dir: PathBuf,
}

/// Sample `n` images and write them as PPM files plus one tensor container.
pub fn generate_cmd(arts: &mut Artifacts, cfg: &ExperimentConfig, model: &ModelChoice, n: usize, ppm: bool) -> CliResult<GenerateSummary> {
    arts.check_foundation(cfg)?;
    invariant(n > 0, || "generate needs at least one image".into())?;
    let lab = Lab::build(cfg)?;
    let decoder = load_decoder(arts)?;
    let tag = model.tag();
    let (images, classes) = {
        let run = |m: &dyn NoisePredictor| -> CliResult<(Tensor, Vec<usize>)> {
            let dep = Deployment {
                model: m,
                schedule: &lab.schedule,
                codec: &lab.codec,
                decoder: &decoder,
                sampler: &cfg.sampler,
            };
            Ok(dep.generate(n, &rng(cfg, "generate"))?)
        };
        match model {
            ModelChoice::Protected(name) => run(&load_protected(arts, name)?.flat)?,
            ModelChoice::Unwatermarked(name) => run(&key_free(&load_protected(arts, name)?)?)?,
            ModelChoice::Base => run(&load_base(arts)?)?,
        }
    };
    invariant(images.is_finite(), || "generated images are not finite".into())?;
    let shape = lab.codec.image_shape();
    let mut c = Container::new(json!({
        "format": "lorakey.images",
        "tag": tag,
        "image": shape,
    }));
    c.push("images", &images)?;
    c.push("classes", &Tensor::vector(classes.iter().map(|&k| k as f64).collect()))?;
    arts.write_container(&images_rel(&tag), &c)?;
    if ppm {
        for i in 0..n {
            let rel = format!("images/{tag}/img_{i:05}.ppm");
            arts.write(&rel, &lorakey::ppm::encode_ppm(shape, images.row(i))?)?;
        }
    }
    arts.commit(&format!("generate:{tag}"), "generate", cfg)?;
    Ok(GenerateSummary {
        tag: tag.clone(),
        n_images: n,
        dir: arts.path(&format!("images/{tag}")),
    })
}

/// Images from a generated tag, a directory of PPM files, or one PPM file.
pub fn load_images(arts: &Artifacts, source: &ImageSource, codec: &LatentCodec) -> CliResult<Tensor> {
    let d = codec.image_dim();
    let rows: Vec<Vec<f64>> = match source {
        ImageSource::Tag(tag) => {
            let rel = images_rel(tag);
            let t = arts.load(&rel, &format!("images `{tag}`"), "lorakey generate", |c| c.tensor("images"))?;
            invariant(t.ndim() == 2 && t.cols() == d, || format!("images `{tag}` do not match the codec"))?;
            return Ok(t);
        }
        ImageSource::Path(p) if p.is_dir() => {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| CliError::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "ppm"))
                .collect();
            files.sort();
            files.iter().map(|f| read_one_ppm(f, codec)).collect::<CliResult<_>>()?
        }
        ImageSource::Path(p) => vec![read_one_ppm(p, codec)?],
    };
    if rows.is_empty() {
        return Err(CliError::MissingArtifact {
            what: "PPM images".into(),
            path: match source {
                ImageSource::Path(p) => p.clone(),
                ImageSource::Tag(t) => arts.path(&images_rel(t)),
            },
            hint: "lorakey generate".into(),
        });
    }
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Ok(Tensor::stack_rows(&refs)?)
}

fn read_one_ppm(path: &Path, codec: &LatentCodec) -> CliResult<Vec<f64>> {
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            what: "PPM image".into(),
            path: path.to_path_buf(),
            hint: "lorakey generate".into(),
        });
    }
    let (shape, img) = read_ppm(path).map_err(|source| CliError::Corrupt {
        path: path.to_path_buf(),
        source,
    })?;
    invariant(shape == codec.image_shape(), || {
        format!("{} is {:?}, the codec expects {:?}", path.display(), shape.dims(), codec.image_shape().dims())
    })?;
    Ok(img)
}

#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    Tag(String),
    Path(PathBuf),
}

impl ImageSource {
    fn label(&self) -> String {
        match self {
            ImageSource::Tag(t) => t.clone(),
            ImageSource::Path(p) => p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("images")
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                .collect(),
        }
    }
}

fn check_rates(what: &str, rates: &[f64]) -> CliResult<()> {
    for &r in rates {
        invariant((0.0..=1.0).contains(&r), || format!("{what} rate {r} outside [0, 1]"))?;
    }
    Ok(())
}

/// Verify images against the registered message. A control set, when given,
/// supplies the empirical false-positive rate.
pub fn verify_cmd(
    arts: &mut Artifacts,
    cfg: &ExperimentConfig,
    images: &ImageSource,
    control: Option<&ImageSource>,
) -> CliResult<VerificationReport> {
    arts.check_foundation(cfg)?;
    let lab = Lab::build(cfg)?;
    let decoder = load_decoder(arts)?;
    let message = load_registration(arts)?;
    let policy = VerificationPolicy::new(message, cfg.verify.target_fpr)?;
    let run = |src: &ImageSource| -> CliResult<VerificationReport> {
        let x = load_images(arts, src, &lab.codec)?;
        Ok(verify_logits(&policy, &extract_logits(&decoder, &lab.codec, &x)?, cfg.verify.averaging)?)
    };
    let mut report = run(images)?;
    if let Some(c) = control {
        report = report.with_control(&run(c)?);
    }
    check_rates(
        "verification",
        &[report.acceptance_rate, report.mean_bit_accuracy, report.empirical_fpr.unwrap_or(0.0)],
    )?;
    let label = images.label();
    arts.write(&format!("reports/verify_{label}.json"), report.to_json()?.as_bytes())?;
    arts.write(&format!("reports/verify_{label}.csv"), report.to_csv().as_bytes())?;
    arts.commit(&format!("verify:{label}"), "verify", cfg)?;
    Ok(report)
}

/// Style adapters available for fusion, sorted by file name.
fn available_styles(arts: &Artifacts) -> CliResult<Vec<LoraAdapter>> {
    let dir = arts.path("styles");
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| CliError::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|f| f.extension().is_some_and(|x| x == "lkw"))
        .collect();
    files.sort();
    files
        .iter()
        .map(|f| {
            let rel = f.strip_prefix(arts.root()).expect("inside root").to_string_lossy().into_owned();
            arts.load(&rel, "style adapter", "lorakey train-style", LoraAdapter::from_container)
        })
        .collect()
}

/// Image-space suite, unwatermarked control, and parameter-space curves.
pub fn attack_cmd(arts: &mut Artifacts, cfg: &ExperimentConfig) -> CliResult<AttackReport> {
    arts.check_foundation(cfg)?;
    let lab = Lab::build(cfg)?;
    let decoder = load_decoder(arts)?;
    let message = load_registration(arts)?;
    let policy = VerificationPolicy::new(message, cfg.verify.target_fpr)?;
    let protected = load_protected(arts, &cfg.deploy.name)?;
    let clean = key_free(&protected)?;
    let dep = Deployment {
        model: &protected.merged,
        schedule: &lab.schedule,
        codec: &lab.codec,
        decoder: &decoder,
        sampler: &cfg.sampler,
    };
    let n = cfg.attack.n_images;
    let suite_rng = rng(cfg, "attack");
    let mut report = run_robustness_suite(&policy, &dep, &cfg.attack.suite, n, &suite_rng)?;
    report.control = Some(control_row(&policy, &Deployment { model: &clean, ..dep }, n, &suite_rng)?);

    if cfg.attack.check_neutral {
        let neutral = run_robustness_suite(&policy, &dep, &ImageAttack::neutral_suite(), n, &suite_rng)?;
        let reference = &neutral.rows[0];
        for r in &neutral.rows {
            invariant(r.bit_accuracy == reference.bit_accuracy && r.tpr == reference.tpr, || {
                format!("neutral {} changed the result: {} vs {}", r.name, r.bit_accuracy, reference.bit_accuracy)
            })?;
        }
    }

    let curve_rng = rng(cfg, "attack-curves");
    if !cfg.attack.prune_fractions.is_empty() {
        let mut models = vec![(0.0, protected.merged.clone())];
        for &p in &cfg.attack.prune_fractions {
            models.push((p, prune_attack(&protected.merged, p)?));
        }
        report
            .curves
            .push(curve("prune", &policy, &dep, models.iter().map(|(x, m)| (*x, m)), n, &curve_rng)?);
    }
    if !cfg.attack.finetune_steps.is_empty() {
        let mut models = vec![(0.0, protected.merged.clone())];
        for &steps in &cfg.attack.finetune_steps {
            let ft = FinetuneConfig {
                steps,
                ..cfg.attack.finetune.clone()
            };
            models.push((
                steps as f64,
                finetune_attack(&protected.merged, &lab.world, &lab.schedule, &ft, &rng(cfg, "finetune"))?,
            ));
        }
        report
            .curves
            .push(curve("finetune", &policy, &dep, models.iter().map(|(x, m)| (*x, m)), n, &curve_rng)?);
    }
    let key = protected
        .merged
        .pairs()
        .iter()
        .find(|(a, _)| a.role() == lorakey::lora::AdapterRole::Watermark)
        .cloned();
    if let (Some((key, gamma)), true) = (key, cfg.attack.fusion_max > 0) {
        let styles = available_styles(arts)?;
        let count = styles.len().min(cfg.attack.fusion_max);
        let mut models = Vec::new();
        for k in 0..=count {
            let extras: Vec<_> = styles[..k].iter().map(|a| (a.clone(), cfg.attack.fusion_coef)).collect();
            models.push((k as f64, fusion_attack(protected.merged.base(), &key, gamma, &extras)?));
        }
        report
            .curves
            .push(curve("fusion", &policy, &dep, models.iter().map(|(x, m)| (*x, m)), n, &curve_rng)?);
    }

    let mut rates = Vec::new();
    for r in report.rows.iter().chain(&report.average).chain(&report.control) {
        rates.extend([r.bit_accuracy, r.tpr]);
    }
    for c in &report.curves {
        for p in &c.points {
            rates.extend([p.bit_accuracy, p.tpr]);
        }
    }
    check_rates("attack", &rates)?;
    arts.write("reports/attack.json", report.to_json()?.as_bytes())?;
    arts.write("reports/attack.csv", report.to_csv().as_bytes())?;
    arts.write("reports/attack_curves.csv", report.curves_csv().as_bytes())?;
    arts.commit("attack", "attack", cfg)?;
    Ok(report)
}
