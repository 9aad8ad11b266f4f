//! Key-adapter training: a watermark-consistency loss that teaches the
//! adapter to reproduce the encoder residual, a semantic-consistency loss
//! through the one-step clean-latent estimate, and the orthogonal
//! projection that removes the conflicting part of the watermark gradient.
//! Also the plain style-adapter trainer used for composition experiments.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diffusion::{cosine_lr, estimate_z0, forward_diffuse, Denoiser, NoisePredictor, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::lora::{init_lora, AdapterRole, LoraAdapter};
use crate::numerics::{loss_cosine_distance, loss_mse, AdamW, GradRequest, GradVector, MlpCache, Rng, Tensor};
use crate::stage1::{Message, MessageEncoder};
use crate::world::{LatentCodec, PerceptionNet, SyntheticWorld};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum ProjectionScope {
    /// One coefficient over the whole concatenated adapter gradient.
    Global,
    /// One coefficient per target layer (its `A` and `B` together).
    PerLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default, deny_unknown_fields)]
pub struct GopConfig {
    /// Apply the projection at all. Off gives the unprojected baseline.
    pub enabled: bool,
    pub eps_proj: f64,
    pub lambda_sem: f64,
    pub include_sem_update: bool,
    pub accumulation: usize,
    pub lr: f64,
    pub scope: ProjectionScope,
}

impl Default for GopConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            eps_proj: 1e-8,
            lambda_sem: 1.0,
            include_sem_update: true,
            accumulation: 4,
            lr: 2e-3,
            scope: ProjectionScope::Global,
        }
    }
}

impl GopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_proj > 0.0) {
            return Err(Error::Invalid("eps_proj must be positive".into()));
        }
        if self.accumulation == 0 {
            return Err(Error::Invalid("accumulation must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.lambda_sem.is_finite()) {
            return Err(Error::Invalid("lr and lambda_sem must be finite, lr non-negative".into()));
        }
        Ok(())
    }
}

/// `α = ⟨g_wm, g_sem⟩ / (‖g_sem‖² + ε)`, `g_proj = g_wm − α·g_sem`.
pub fn gop_project(g_wm: &GradVector, g_sem: &GradVector, eps_proj: f64) -> Result<(GradVector, f64)> {
    let alpha = g_wm.dot(g_sem)? / (g_sem.dot(g_sem)? + eps_proj);
    let mut out = g_wm.clone();
    out.axpy(-alpha, g_sem)?;
    Ok((out, alpha))
}

/// Layer of a `{layer}.A` / `{layer}.B` entry name.
fn layer_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(l, _)| l)
}

/// Projection applied separately within each layer's group of entries.
pub fn gop_project_per_layer(g_wm: &GradVector, g_sem: &GradVector, eps_proj: f64) -> Result<(GradVector, Vec<f64>)> {
    g_wm.dot(g_sem)?;
    let mut groups: Vec<&str> = Vec::new();
    for (n, _) in g_wm.entries() {
        let l = layer_of(n);
        if !groups.contains(&l) {
            groups.push(l);
        }
    }
    let mut out = g_wm.clone();
    let mut alphas = Vec::with_capacity(groups.len());
    for l in groups {
        let (mut num, mut den) = (0.0, 0.0);
        for ((n, a), (_, b)) in g_wm.entries().iter().zip(g_sem.entries()) {
            if layer_of(n) == l {
                num += crate::numerics::dot(a.data(), b.data())?;
                den += crate::numerics::dot(b.data(), b.data())?;
            }
        }
        let alpha = num / (den + eps_proj);
        for ((n, o), (_, b)) in out.entries_mut().iter_mut().zip(g_sem.entries()) {
            if layer_of(n) == l {
                o.axpy(-alpha, b)?;
            }
        }
        alphas.push(alpha);
    }
    Ok((out, alphas))
}

/// Cosine that reads as 0 when either side has zero norm.
fn cos_or_zero(a: &GradVector, b: &GradVector) -> f64 {
    a.cosine(b).unwrap_or(0.0)
}

/// Frozen pieces shared by both Stage-2 losses.
pub struct KeyContext<'a> {
    pub base: &'a Denoiser,
    pub codec: &'a LatentCodec,
    pub perception: &'a PerceptionNet,
    pub schedule: &'a NoiseSchedule,
    /// `𝓔_ψ(m)` for the registered message.
    pub residual: Tensor,
}

impl<'a> KeyContext<'a> {
    pub fn new(
        base: &'a Denoiser,
        codec: &'a LatentCodec,
        perception: &'a PerceptionNet,
        schedule: &'a NoiseSchedule,
        encoder: &MessageEncoder,
        message: &Message,
    ) -> Result<Self> {
        Ok(Self {
            base,
            codec,
            perception,
            schedule,
            residual: encoder.residual(message)?,
        })
    }
}

/// One Stage-2 minibatch of clean latents with their noising draws.
#[derive(Clone, Debug)]
pub struct KeyBatch {
    pub z0: Tensor,
    pub t: Vec<usize>,
    pub eps: Tensor,
    pub c: Vec<usize>,
}

impl KeyBatch {
    pub fn sample(world: &SyntheticWorld, schedule: &NoiseSchedule, n: usize, class_dropout: f64, rng: &mut Rng) -> Result<Self> {
        let classes = world.sample_classes(n, rng);
        let z0 = world.sample_latents(&classes, rng)?;
        let t = (0..n).map(|_| 1 + rng.below(schedule.steps())).collect();
        let eps = rng.normal_tensor(&[n, world.latent_dim()], 1.0);
        let c = classes
            .iter()
            .map(|&c| if rng.uniform() < class_dropout { world.num_classes() } else { c })
            .collect();
        Ok(Self { z0, t, eps, c })
    }
}

/// Forward record of the keyed prediction, reused by the semantic loss.
pub struct KeyForward {
    pub z_wm_t: Tensor,
    pub eps_key: Tensor,
    cache: MlpCache,
}

fn add_row_to_all(z: &Tensor, r: &Tensor) -> Result<Tensor> {
    if z.cols() != r.len() {
        return Err(shape_err("residual width differs from latent width"));
    }
    let mut out = z.clone();
    out.add_row(r.data())?;
    Ok(out)
}

/// `L_wm = MSE(ε_{θ+γΔ}(z_wm,t), ε_θ(z_t))` with the base prediction held
/// constant, and its gradient over the key adapter's factors. `others` are
/// extra adapters active on both sides (empty during training).
pub fn watermark_consistency_loss(
    ctx: &KeyContext<'_>,
    key: &LoraAdapter,
    batch: &KeyBatch,
) -> Result<(f64, GradVector, KeyForward)> {
    let z_t = forward_diffuse(ctx.schedule, &batch.z0, &batch.t, &batch.eps)?;
    let z_wm0 = add_row_to_all(&batch.z0, &ctx.residual)?;
    let z_wm_t = forward_diffuse(ctx.schedule, &z_wm0, &batch.t, &batch.eps)?;
    let (eps_base, _) = ctx.base.predict_eps(&[], &z_t, &batch.t, &batch.c)?;
    let adapters = [(key, 1.0)];
    let (eps_key, cache) = ctx.base.predict_eps(&adapters, &z_wm_t, &batch.t, &batch.c)?;
    let (l, g) = loss_mse(&eps_key, &eps_base)?;
    let grads = ctx.base.backward(&cache, &g, &adapters, GradRequest::LORA)?;
    let g_wm = grads.lora.into_iter().next().expect("one adapter");
    Ok((l, g_wm, KeyForward { z_wm_t, eps_key, cache }))
}

/// `L_sem = mean_i 1 − cos(F(decode(z₀,i)), F(decode(ẑ₀,i)))` where `ẑ₀`
/// is estimated from the keyed prediction; the reference feature is a
/// constant. Gradient flows through `ε̂_key → ẑ₀ → decode → F` only.
pub fn semantic_consistency_loss(
    ctx: &KeyContext<'_>,
    key: &LoraAdapter,
    batch: &KeyBatch,
    fwd: &KeyForward,
) -> Result<(f64, GradVector)> {
    let (l, g_eps) = semantic_loss_and_eps_grad(ctx, &batch.z0, &batch.t, &fwd.z_wm_t, &fwd.eps_key)?;
    let adapters = [(key, 1.0)];
    let grads = ctx.base.backward(&fwd.cache, &g_eps, &adapters, GradRequest::LORA)?;
    Ok((l, grads.lora.into_iter().next().expect("one adapter")))
}

/// Semantic loss of a noise prediction and its gradient wrt that prediction.
pub fn semantic_loss_and_eps_grad(
    ctx: &KeyContext<'_>,
    z0: &Tensor,
    t: &[usize],
    z_wm_t: &Tensor,
    eps_key: &Tensor,
) -> Result<(f64, Tensor)> {
    let n = z0.rows();
    let z0_hat = estimate_z0(ctx.schedule, z_wm_t, t, eps_key)?;
    let (f_ref, _) = ctx.perception.perceive(&ctx.codec.decode(z0)?)?;
    let (f_wm, f_cache) = ctx.perception.perceive(&ctx.codec.decode(&z0_hat)?)?;
    let mut total = 0.0;
    let mut g_f = Tensor::zeros(f_wm.shape());
    for i in 0..n {
        let (l, g) = loss_cosine_distance(&Tensor::vector(f_ref.row(i).to_vec()), &Tensor::vector(f_wm.row(i).to_vec()))?;
        total += l / n as f64;
        for (o, v) in g_f.row_mut(i).iter_mut().zip(g.data()) {
            *o = v / n as f64;
        }
    }
    let g_x = ctx.perception.backward(&f_cache, &g_f)?;
    let mut g_eps = ctx.codec.decode_backward(&g_x)?;
    for i in 0..n {
        let ab = ctx.schedule.alpha_bar(if t.len() == 1 { t[0] } else { t[i] });
        let k = -(1.0 - ab).sqrt() / ab.sqrt();
        g_eps.row_mut(i).iter_mut().for_each(|v| *v *= k);
    }
    Ok((total, g_eps))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default, deny_unknown_fields)]
pub struct KeyTrainConfig {
    /// Micro-steps; the optimizer steps every `gop.accumulation` of them.
    pub steps: usize,
    pub batch: usize,
    pub rank: usize,
    pub scale: f64,
    pub targets: Vec<String>,
    pub class_dropout: f64,
    pub gop: GopConfig,
}

impl Default for KeyTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 16,
            rank: 8,
            scale: 1.0,
            targets: crate::diffusion::DENOISER_LAYERS.iter().map(|s| s.to_string()).collect(),
            class_dropout: 0.1,
            gop: GopConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KeyLogRow {
    pub step: usize,
    pub l_wm: f64,
    pub l_sem: f64,
    pub alpha: f64,
    pub cos_wm_sem: f64,
    /// Cosine between the watermark update actually applied (projected or
    /// not) and the semantic gradient.
    pub cos_proj_sem: f64,
}

pub const KEY_LOG_HEADER: &str = "step,l_wm,l_sem,alpha,cos_wm_sem,cos_proj_sem";

impl KeyLogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.l_wm, self.l_sem, self.alpha, self.cos_wm_sem, self.cos_proj_sem
        )
    }
}

/// One micro-step's contribution to the accumulated update.
pub struct MicroStep {
    pub row: KeyLogRow,
    pub update: GradVector,
}

pub fn key_micro_step(ctx: &KeyContext<'_>, key: &LoraAdapter, batch: &KeyBatch, gop: &GopConfig) -> Result<MicroStep> {
    let (l_wm, g_wm, fwd) = watermark_consistency_loss(ctx, key, batch)?;
    let (l_sem, g_sem) = semantic_consistency_loss(ctx, key, batch, &fwd)?;
    let (g_proj, alpha) = if gop.enabled {
        match gop.scope {
            ProjectionScope::Global => gop_project(&g_wm, &g_sem, gop.eps_proj)?,
            ProjectionScope::PerLayer => {
                let (g, alphas) = gop_project_per_layer(&g_wm, &g_sem, gop.eps_proj)?;
                (g, alphas.iter().sum::<f64>() / alphas.len().max(1) as f64)
            }
        }
    } else {
        let alpha = g_wm.dot(&g_sem)? / (g_sem.dot(&g_sem)? + gop.eps_proj);
        (g_wm.clone(), alpha)
    };
    let row = KeyLogRow {
        step: 0,
        l_wm,
        l_sem,
        alpha,
        cos_wm_sem: cos_or_zero(&g_wm, &g_sem),
        cos_proj_sem: cos_or_zero(&g_proj, &g_sem),
    };
    let mut update = g_proj;
    if gop.include_sem_update {
        update.axpy(gop.lambda_sem, &g_sem)?;
    }
    if !(l_wm.is_finite() && l_sem.is_finite() && update.is_finite()) {
        return Err(Error::NonFinite("Stage-2 losses or gradients".into()));
    }
    Ok(MicroStep { row, update })
}

pub struct TrainedKey {
    pub adapter: LoraAdapter,
    pub log: Vec<KeyLogRow>,
}

/// Train the key adapter on the frozen base. The Stage-1 encoder only
/// supplies the residual of the registered message.
pub fn train_watermark_lora(
    ctx: &KeyContext<'_>,
    world: &SyntheticWorld,
    config: &KeyTrainConfig,
    rng: &Rng,
) -> Result<TrainedKey> {
    config.gop.validate()?;
    let mut key = init_lora(
        ctx.base.mlp(),
        &config.targets,
        config.rank,
        config.scale,
        AdapterRole::Watermark,
        "key",
        &mut rng.derive("init"),
    )?;
    key.config = json!(config);
    let mut opt = AdamW::new(config.gop.lr).with_weight_decay(0.0);
    let mut data = rng.derive("data");
    let mut acc = key.grad_layout();
    let mut pending = 0usize;
    let opt_steps = config.steps.div_ceil(config.gop.accumulation);
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = KeyBatch::sample(world, ctx.schedule, config.batch, config.class_dropout, &mut data)?;
        let ms = key_micro_step(ctx, &key, &batch, &config.gop).map_err(|e| match e {
            Error::NonFinite(what) => Error::Diverged { step, what },
            other => other,
        })?;
        acc.axpy(1.0, &ms.update)?;
        pending += 1;
        log.push(KeyLogRow { step, ..ms.row });
        if pending == config.gop.accumulation || step + 1 == config.steps {
            opt.lr = cosine_lr(config.gop.lr, opt.steps_taken() as usize, opt_steps);
            opt.step(&mut key.params_mut(), &acc)?;
            acc = key.grad_layout();
            pending = 0;
            if !key.is_finite() {
                return Err(Error::Diverged {
                    step,
                    what: "key adapter factors".into(),
                });
            }
        }
    }
    Ok(TrainedKey { adapter: key, log })
}

/// Mean semantic loss of an arbitrary deployed model on a held-out batch:
/// the watermark residual is applied to the noised latent and the model's
/// prediction drives the clean-latent estimate.
pub fn evaluate_semantic_loss(ctx: &KeyContext<'_>, model: &dyn NoisePredictor, batch: &KeyBatch) -> Result<f64> {
    let z_wm0 = add_row_to_all(&batch.z0, &ctx.residual)?;
    let z_wm_t = forward_diffuse(ctx.schedule, &z_wm0, &batch.t, &batch.eps)?;
    let eps = model.predict(&z_wm_t, &batch.t, &batch.c)?;
    Ok(semantic_loss_and_eps_grad(ctx, &batch.z0, &batch.t, &z_wm_t, &eps)?.0)
}

/// A target transformation of the world, `z ↦ T·z + shift`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct StyleSpec {
    /// Added to every latent; empty means no shift.
    pub shift: Vec<f64>,
    /// Row-major `D × D` linear map; empty means identity.
    pub transform: Vec<f64>,
}

impl StyleSpec {
    pub fn identity() -> Self {
        Self {
            shift: Vec::new(),
            transform: Vec::new(),
        }
    }

    /// Shift a single latent coordinate by `delta`.
    pub fn shift_coord(dim: usize, coord: usize, delta: f64) -> Self {
        let mut shift = vec![0.0; dim];
        shift[coord] = delta;
        Self {
            shift,
            transform: Vec::new(),
        }
    }

    /// Random shift of norm `magnitude`, for fusion experiments.
    pub fn random_shift(dim: usize, magnitude: f64, rng: &mut Rng) -> Self {
        let v = rng.normal_vec(dim, 1.0);
        let n = crate::numerics::norm(&v);
        Self {
            shift: v.iter().map(|x| x * magnitude / n).collect(),
            transform: Vec::new(),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !self.shift.is_empty() && self.shift.len() != dim {
            return Err(shape_err(format!("style shift has {} entries for {dim} dims", self.shift.len())));
        }
        if !self.transform.is_empty() {
            if self.transform.len() != dim * dim {
                return Err(shape_err("style transform must be D × D"));
            }
            if !invertible(&self.transform, dim) {
                return Err(Error::Invalid("style transform is singular".into()));
            }
        }
        if self.shift.iter().chain(&self.transform).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("style spec".into()));
        }
        Ok(())
    }

    pub fn apply(&self, z: &Tensor) -> Result<Tensor> {
        let d = z.cols();
        self.validate(d)?;
        let mut out = if self.transform.is_empty() {
            z.clone()
        } else {
            let t = Tensor::matrix(d, d, self.transform.clone())?;
            crate::numerics::matmul_nt(&z.clone().as_matrix(), &t)?
        };
        if !self.shift.is_empty() {
            out.add_row(&self.shift)?;
        }
        Ok(out)
    }

    pub fn is_identity(&self) -> bool {
        self.shift.iter().all(|v| *v == 0.0)
            && (self.transform.is_empty()
                || self.transform.iter().enumerate().all(|(k, v)| {
                    let d = (self.transform.len() as f64).sqrt() as usize;
                    *v == if k / d == k % d { 1.0 } else { 0.0 }
                }))
    }
}

/// Gaussian elimination with partial pivoting.
fn invertible(m: &[f64], d: usize) -> bool {
    let mut a = m.to_vec();
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1e-300);
    for col in 0..d {
        let piv = (col..d).max_by(|&i, &j| a[i * d + col].abs().total_cmp(&a[j * d + col].abs())).expect("non-empty");
        if a[piv * d + col].abs() <= 1e-12 * scale {
            return false;
        }
        for k in 0..d {
            a.swap(col * d + k, piv * d + k);
        }
        for r in col + 1..d {
            let f = a[r * d + col] / a[col * d + col];
            for k in col..d {
                a[r * d + k] -= f * a[col * d + k];
            }
        }
    }
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default, deny_unknown_fields)]
pub struct StyleTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub rank: usize,
    pub scale: f64,
    pub lr: f64,
    /// Decoupled AdamW decay on the adapter factors. Keeps the factors from
    /// random-walking along directions the style loss does not constrain.
    pub weight_decay: f64,
    pub class_dropout: f64,
    pub targets: Vec<String>,
}

impl Default for StyleTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 32,
            rank: 8,
            scale: 1.0,
            lr: 2e-3,
            weight_decay: 5.0,
            class_dropout: 0.1,
            targets: crate::diffusion::DENOISER_LAYERS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// ε-MSE fine-tuning of a fresh adapter toward the style-transformed world.
pub fn train_style_lora(
    base: &Denoiser,
    world: &SyntheticWorld,
    style: &StyleSpec,
    schedule: &NoiseSchedule,
    config: &StyleTrainConfig,
    name: &str,
    rng: &Rng,
) -> Result<(LoraAdapter, Vec<f64>)> {
    style.validate(world.latent_dim())?;
    if !(config.lr >= 0.0 && config.lr.is_finite() && config.weight_decay >= 0.0 && config.weight_decay.is_finite()) {
        return Err(Error::Invalid("style lr and weight decay must be finite and non-negative".into()));
    }
    let mut adapter = init_lora(
        base.mlp(),
        &config.targets,
        config.rank,
        config.scale,
        AdapterRole::Style,
        name,
        &mut rng.derive("init"),
    )?;
    adapter.config = json!({"train": config, "style": style});
    let mut opt = AdamW::new(config.lr).with_weight_decay(config.weight_decay);
    let mut data = rng.derive("data");
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let b = KeyBatch::sample(world, schedule, config.batch, config.class_dropout, &mut data)?;
        let z0 = style.apply(&b.z0)?;
        let z_t = forward_diffuse(schedule, &z0, &b.t, &b.eps)?;
        let adapters = [(&adapter, 1.0)];
        let (pred, cache) = base.predict_eps(&adapters, &z_t, &b.t, &b.c)?;
        let (l, g) = loss_mse(&pred, &b.eps)?;
        if !l.is_finite() {
            return Err(Error::Diverged {
                step,
                what: "style loss".into(),
            });
        }
        log.push(l);
        let grads = base.backward(&cache, &g, &adapters, GradRequest::LORA)?;
        let g = grads.lora.into_iter().next().expect("one adapter");
        opt.lr = cosine_lr(config.lr, step, config.steps);
        opt.step(&mut adapter.params_mut(), &g)?;
    }
    Ok((adapter, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gv(v: &[f64]) -> GradVector {
        GradVector::from_entries(vec![("l.A".into(), Tensor::vector(v.to_vec()))]).unwrap()
    }

    #[test]
    fn hand_projections() {
        let (p, a) = gop_project(&gv(&[1.0, 1.0]), &gv(&[0.0, 2.0]), 0.0).unwrap();
        assert_eq!((p.flatten().into_data(), a), (vec![1.0, 0.0], 0.5));
        let (p, a) = gop_project(&gv(&[2.0, 0.0]), &gv(&[1.0, 0.0]), 0.0).unwrap();
        assert_eq!((p.flatten().into_data(), a), (vec![0.0, 0.0], 2.0));
        let (p, a) = gop_project(&gv(&[0.0, 3.0]), &gv(&[1.0, 0.0]), 1e-8).unwrap();
        assert_eq!((p.flatten().into_data(), a), (vec![0.0, 3.0], 0.0));
    }

    #[test]
    fn zero_semantic_gradient_is_guarded() {
        let (p, a) = gop_project(&gv(&[1.0, 2.0]), &gv(&[0.0, 0.0]), 1e-8).unwrap();
        assert_eq!(a, 0.0);
        assert_eq!(p.flatten().into_data(), vec![1.0, 2.0]);
    }

    #[test]
    fn per_layer_projection_is_orthogonal_within_each_layer() {
        let mut rng = Rng::new(1, "p");
        let mk = |rng: &mut Rng| {
            GradVector::from_entries(vec![
                ("a.A".into(), rng.normal_tensor(&[2, 3], 1.0)),
                ("a.B".into(), rng.normal_tensor(&[3, 2], 1.0)),
                ("b.A".into(), rng.normal_tensor(&[2, 2], 1.0)),
                ("b.B".into(), rng.normal_tensor(&[2, 2], 1.0)),
            ])
            .unwrap()
        };
        let (w, s) = (mk(&mut rng), mk(&mut rng));
        let (p, alphas) = gop_project_per_layer(&w, &s, 0.0).unwrap();
        assert_eq!(alphas.len(), 2);
        for l in ["a", "b"] {
            let d: f64 = p
                .entries()
                .iter()
                .zip(s.entries())
                .filter(|((n, _), _)| n.starts_with(l))
                .map(|((_, x), (_, y))| crate::numerics::dot(x.data(), y.data()).unwrap())
                .sum();
            assert!(d.abs() < 1e-12);
        }
    }

    #[test]
    fn style_spec_validation() {
        let s = StyleSpec::shift_coord(3, 0, 2.0);
        let z = Tensor::matrix(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(s.apply(&z).unwrap().data(), &[3.0, 1.0, 1.0]);
        assert!(StyleSpec::identity().is_identity());
        let singular = StyleSpec {
            shift: vec![],
            transform: vec![1.0, 2.0, 2.0, 4.0],
        };
        assert!(singular.validate(2).is_err());
        let swap = StyleSpec {
            shift: vec![],
            transform: vec![0.0, 1.0, 1.0, 0.0],
        };
        assert!(swap.validate(2).is_ok());
        assert!(!swap.is_identity());
    }
}
