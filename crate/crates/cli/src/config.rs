//! Experiment configuration: one JSON document, dotted-key overrides, and a
//! JSON Schema generated from the same types that parse it.

use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use lorakey::attacks::{FinetuneConfig, ImageAttack};
use lorakey::diffusion::{BaseTrainConfig, DenoiserConfig, SamplerConfig, ScheduleConfig};
use lorakey::stage1::{Message, PriorConfig};
use lorakey::stage2::{KeyTrainConfig, StyleSpec, StyleTrainConfig};
use lorakey::verify::Averaging;
use lorakey::world::{CodecConfig, PerceptionConfig, WorldConfig};

use crate::error::{CliError, CliResult};

/// Everything a run depends on. Missing keys take their defaults; unknown
/// keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every component derives a labelled stream from it.
    pub seed: u64,
    pub world: WorldConfig,
    pub codec: CodecConfig,
    pub perception: PerceptionConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub base: BaseTrainConfig,
    /// Stage-1 prior; `prior.message_len` is the message length L.
    pub prior: PriorConfig,
    /// Owner message as a bit string. Drawn from the seed when absent.
    pub message: Option<Message>,
    pub key: KeyTrainConfig,
    pub style: StyleConfig,
    pub deploy: DeployConfig,
    pub sampler: SamplerConfig,
    pub verify: VerifyConfig,
    pub attack: AttackConfig,
    /// Artifact directory. Overridden by `--artifacts`; falls back to
    /// `$LORAKEY_ARTIFACTS`, then `./artifacts`.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            world: WorldConfig::default(),
            codec: CodecConfig::default(),
            perception: PerceptionConfig::default(),
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            base: BaseTrainConfig::default(),
            prior: PriorConfig::default(),
            message: None,
            key: KeyTrainConfig::default(),
            style: StyleConfig::default(),
            deploy: DeployConfig::default(),
            sampler: SamplerConfig::default(),
            verify: VerifyConfig::default(),
            attack: AttackConfig::default(),
            output_dir: None,
        }
    }
}

/// The style adapter that `train-style` produces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct StyleConfig {
    /// File stem under `styles/`.
    pub name: String,
    pub target: StyleTarget,
    pub train: StyleTrainConfig,
}

impl Default for StyleConfig {
    fn default() -> Self {
        Self {
            name: "style".into(),
            target: StyleTarget::ShiftCoord { coord: 0, delta: 2.0 },
            train: StyleTrainConfig::default(),
        }
    }
}

/// Affine latent transform the style adapter learns to apply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StyleTarget {
    /// Shift one latent coordinate by `delta`.
    ShiftCoord { coord: usize, delta: f64 },
    /// Shift by a seeded random direction of norm `magnitude`.
    RandomShift { magnitude: f64 },
    /// Explicit shift vector and row-major `D_z × D_z` transform.
    Explicit { spec: StyleSpec },
}

/// Superposition `base + α·style + γ·key`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct DeployConfig {
    /// File stem under `protected/`.
    pub name: String,
    /// Style adapter name under `styles/`; `null` deploys the key alone.
    pub style: Option<String>,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for DeployConfig {
    fn default() -> Self {
        Self {
            name: "protected".into(),
            style: Some("style".into()),
            alpha: 1.0,
            gamma: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub target_fpr: f64,
    pub n_images: usize,
    pub averaging: Option<Averaging>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            target_fpr: 1e-3,
            n_images: 200,
            averaging: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub suite: Vec<ImageAttack>,
    pub n_images: usize,
    /// Also run every attack at its neutral parameters and fail unless the
    /// result equals the clean column.
    pub check_neutral: bool,
    pub prune_fractions: Vec<f64>,
    pub finetune_steps: Vec<usize>,
    pub finetune: FinetuneConfig,
    /// Largest number of extra style adapters fused with the deployment.
    pub fusion_max: usize,
    pub fusion_coef: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            suite: ImageAttack::paper_suite(),
            n_images: 200,
            check_neutral: true,
            prune_fractions: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            finetune_steps: vec![100, 500],
            finetune: FinetuneConfig::default(),
            fusion_max: 5,
            fusion_coef: 1.0,
        }
    }
}

fn schema_err(msg: impl Into<String>) -> CliError {
    CliError::Schema(msg.into())
}

impl ExperimentConfig {
    /// Parse a JSON document, apply `key=value` overrides and validate.
    pub fn from_value(doc: Value, overrides: &[String]) -> CliResult<Self> {
        if !doc.is_object() {
            return Err(schema_err("config root must be a JSON object"));
        }
        let file: Self = serde_json::from_value(doc).map_err(|e| schema_err(e.to_string()))?;
        // Overrides apply to the defaulted document, so a nested key can be
        // set without restating its siblings.
        let mut doc = serde_json::to_value(&file).map_err(|e| schema_err(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| schema_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from `path` (or defaults when `None`) with overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| schema_err(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        Self::from_value(doc, overrides)
    }

    /// Value ranges and cross-field consistency that serde cannot express.
    pub fn validate(&self) -> CliResult<()> {
        let core = |r: lorakey::Result<()>| r.map_err(|e| schema_err(e.to_string()));
        if self.world.latent_dim != self.codec.latent_dim {
            return Err(schema_err(format!(
                "world.latent_dim {} differs from codec.latent_dim {}",
                self.world.latent_dim, self.codec.latent_dim
            )));
        }
        if self.perception.features == 0 || self.perception.hidden == 0 {
            return Err(schema_err("perception sizes must be positive"));
        }
        if self.schedule.steps == 0 {
            return Err(schema_err("schedule.steps must be positive"));
        }
        core(self.prior.validate())?;
        core(self.key.gop.validate())?;
        core(self.sampler.validate())?;
        if let Some(m) = &self.message {
            if m.len() != self.prior.message_len {
                return Err(schema_err(format!(
                    "message has {} bits, prior.message_len is {}",
                    m.len(),
                    self.prior.message_len
                )));
            }
        }
        for (what, n) in [
            ("key.steps", self.key.steps),
            ("key.batch", self.key.batch),
            ("key.rank", self.key.rank),
            ("base.batch", self.base.batch),
            ("style.train.batch", self.style.train.batch),
            ("style.train.rank", self.style.train.rank),
            ("verify.n_images", self.verify.n_images),
            ("attack.n_images", self.attack.n_images),
        ] {
            if n == 0 {
                return Err(schema_err(format!("{what} must be positive")));
            }
        }
        if !(self.verify.target_fpr > 0.0 && self.verify.target_fpr < 1.0) {
            return Err(schema_err("verify.target_fpr must lie in (0, 1)"));
        }
        if let Some(a) = &self.verify.averaging {
            if a.count == 0 {
                return Err(schema_err("verify.averaging.count must be positive"));
            }
        }
        for c in [self.deploy.alpha, self.deploy.gamma, self.attack.fusion_coef] {
            if !c.is_finite() {
                return Err(schema_err("deployment coefficients must be finite"));
            }
        }
        for name in std::iter::once(&self.style.name)
            .chain(self.deploy.style.iter())
            .chain(std::iter::once(&self.deploy.name))
        {
            check_name(name)?;
        }
        for a in &self.attack.suite {
            core(a.validate())?;
        }
        if self.attack.prune_fractions.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(schema_err("attack.prune_fractions must lie in [0, 1]"));
        }
        if let StyleTarget::ShiftCoord { coord, delta } = self.style.target {
            if coord >= self.world.latent_dim || !delta.is_finite() {
                return Err(schema_err("style.target coordinate out of range or shift not finite"));
            }
        }
        if let StyleTarget::Explicit { spec } = &self.style.target {
            core(spec.validate(self.world.latent_dim))?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        hash_json(&serde_json::to_value(self).expect("config serializes"))
    }

    /// Hash of the settings every artifact depends on: world, codec,
    /// perception, schedule, denoiser shape and message length. Artifacts
    /// built under a different foundation cannot be mixed.
    pub fn foundation_hash(&self) -> String {
        hash_json(&serde_json::json!({
            "seed": self.seed,
            "world": self.world,
            "codec": self.codec,
            "perception": self.perception,
            "schedule": self.schedule,
            "denoiser": self.denoiser,
            "message_len": self.prior.message_len,
        }))
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Names become file stems, so keep them to a safe alphabet.
fn check_name(name: &str) -> CliResult<()> {
    let ok = !name.is_empty()
        && name.len() <= 64
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(schema_err(format!("name `{name}` must be 1-64 characters of [A-Za-z0-9_-]")))
    }
}

/// `serde_json` with sorted object keys, so equal values hash equally.
pub fn hash_json(v: &Value) -> String {
    hex::encode(Sha256::digest(canonical(v).as_bytes()))
}

fn canonical(v: &Value) -> String {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<_> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .iter()
                .map(|k| format!("{}:{}", Value::String((*k).clone()), canonical(&map[*k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// Apply `a.b.c=value`. The value is parsed as JSON when possible and taken
/// as a string otherwise. Intermediate objects are created as needed, so the
/// key is checked by the typed parse that follows.
pub fn apply_override(doc: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| schema_err(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(schema_err(format!("override key `{key}` has an empty segment")));
    }
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| schema_err(format!("override `{key}`: `{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        // Defaults are filled in by serde, so an override into a section the
        // file left out starts from an empty object.
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
    }
    unreachable!("loop returns on the last segment")
}

/// JSON Schema of [`ExperimentConfig`].
pub fn config_schema() -> Value {
    serde_json::to_value(schemars::schema_for!(ExperimentConfig)).expect("schema serializes")
}
