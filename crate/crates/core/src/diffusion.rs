//! Noise schedule, forward process, the class-conditional denoiser, an
//! analytic Bayes-optimal reference predictor and the ancestral sampler.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{expect_format, mlp_from_container, mlp_to_container_as, Container, Dtype};
use crate::error::{shape_err, Error, Result};
use crate::lora::LoraAdapter;
use crate::numerics::{
    loss_mse, mlp_backward, mlp_forward, Activation, AdamW, GradRequest, GradVector, LayerSpec, MlpCache, MlpGrads,
    MlpParams, Rng, Tensor,
};
use crate::world::SyntheticWorld;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    /// 100 steps with the usual 1000-step linear range stretched by 10, so
    /// that `ᾱ_T` is close to zero and `z_T ~ N(0, I)` is a valid start.
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

/// `β_t`, `α_t = 1 − β_t`, `ᾱ_t = Π α_s` for `t ∈ 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        Self::linear(c.steps, c.beta_start, c.beta_end)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Invalid("every β must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Invalid("β must be non-decreasing".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        if !(alpha_bars[alpha_bars.len() - 1] > 0.0) {
            return Err(Error::Invalid("ᾱ_T underflowed to zero".into()));
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior variance `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

fn per_row<'a>(t: &'a [usize], n: usize, what: &str) -> Result<impl Fn(usize) -> usize + 'a> {
    if t.len() != 1 && t.len() != n {
        return Err(shape_err(format!("{} {what} values for {n} rows", t.len())));
    }
    Ok(move |i| if t.len() == 1 { t[0] } else { t[i] })
}

/// `z_t = √ᾱ_t·z₀ + √(1 − ᾱ_t)·ε`, rowwise with one `t` per row (or one for all).
pub fn forward_diffuse(s: &NoiseSchedule, z0: &Tensor, t: &[usize], eps: &Tensor) -> Result<Tensor> {
    z0.check_same_shape(eps, "forward_diffuse")?;
    let n = z0.rows();
    let tt = per_row(t, n, "timestep")?;
    let mut out = z0.clone();
    let d = z0.cols();
    for i in 0..n {
        s.check_t(tt(i))?;
        let ab = s.alpha_bar(tt(i));
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for j in 0..d {
            let k = i * d + j;
            out.data_mut()[k] = a * z0.data()[k] + b * eps.data()[k];
        }
    }
    Ok(out)
}

/// `ẑ₀ = (z_t − √(1 − ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn estimate_z0(s: &NoiseSchedule, z_t: &Tensor, t: &[usize], eps_hat: &Tensor) -> Result<Tensor> {
    z_t.check_same_shape(eps_hat, "estimate_z0")?;
    let n = z_t.rows();
    let tt = per_row(t, n, "timestep")?;
    let d = z_t.cols();
    let mut out = z_t.clone();
    for i in 0..n {
        s.check_t(tt(i))?;
        let ab = s.alpha_bar(tt(i));
        if ab <= 0.0 {
            return Err(Error::Invalid(format!("ᾱ_{} is not positive", tt(i))));
        }
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for j in 0..d {
            let k = i * d + j;
            out.data_mut()[k] = (z_t.data()[k] - b * eps_hat.data()[k]) / a;
        }
    }
    Ok(out)
}

/// Anything that predicts the noise in `z_t`. Class index `num_classes()`
/// is the unconditional (null) class.
pub trait NoisePredictor {
    fn latent_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// `z_t` is `[n × D_z]`; `t` and `c` hold one value per row or one for all.
    fn predict(&self, z_t: &Tensor, t: &[usize], c: &[usize]) -> Result<Tensor>;
}

/// Bayes-optimal `E[ε | z_t, c]` for a world of diagonal Gaussians.
#[derive(Clone, Debug)]
pub struct AnalyticOracle<'a> {
    pub world: &'a SyntheticWorld,
    pub schedule: &'a NoiseSchedule,
}

impl AnalyticOracle<'_> {
    fn eps_component(&self, z: &[f64], ab: f64, c: usize, out: &mut [f64]) {
        let (mu, var) = (self.world.mean(c), self.world.var(c));
        let s = (1.0 - ab).sqrt();
        let a = ab.sqrt();
        for j in 0..z.len() {
            out[j] = s * (z[j] - a * mu[j]) / (ab * var[j] + 1.0 - ab);
        }
    }

    fn log_marginal(&self, z: &[f64], ab: f64, c: usize) -> f64 {
        let (mu, var) = (self.world.mean(c), self.world.var(c));
        let a = ab.sqrt();
        let mut acc = 0.0;
        for j in 0..z.len() {
            let v = ab * var[j] + 1.0 - ab;
            let d = z[j] - a * mu[j];
            acc -= 0.5 * (d * d / v + v.ln());
        }
        acc
    }
}

impl NoisePredictor for AnalyticOracle<'_> {
    fn latent_dim(&self) -> usize {
        self.world.latent_dim()
    }

    fn num_classes(&self) -> usize {
        self.world.num_classes()
    }

    fn predict(&self, z_t: &Tensor, t: &[usize], c: &[usize]) -> Result<Tensor> {
        let z_t = z_t.clone().as_matrix();
        if z_t.cols() != self.latent_dim() {
            return Err(shape_err("oracle latent width"));
        }
        let n = z_t.rows();
        let tt = per_row(t, n, "timestep")?;
        let cc = per_row(c, n, "class")?;
        let k = self.num_classes();
        let d = self.latent_dim();
        let mut out = Tensor::zeros(&[n, d]);
        let mut tmp = vec![0.0; d];
        for i in 0..n {
            self.schedule.check_t(tt(i))?;
            let ab = self.schedule.alpha_bar(tt(i));
            if ab >= 1.0 {
                return Err(Error::Invalid("oracle is singular at ᾱ = 1".into()));
            }
            let z = z_t.row(i);
            let c = cc(i);
            if c < k {
                self.eps_component(z, ab, c, out.row_mut(i));
            } else if c == k {
                let logs: Vec<f64> = (0..k)
                    .map(|c| self.world.weights()[c].ln() + self.log_marginal(z, ab, c))
                    .collect();
                let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ws: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
                let total: f64 = ws.iter().sum();
                for (c, w) in ws.iter().enumerate() {
                    if *w == 0.0 {
                        continue;
                    }
                    self.eps_component(z, ab, c, &mut tmp);
                    for (o, v) in out.row_mut(i).iter_mut().zip(&tmp) {
                        *o += w / total * v;
                    }
                }
            } else {
                return Err(Error::Invalid(format!("class {c} out of range 0..={k}")));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub hidden: usize,
    pub time_dim: usize,
    pub class_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            time_dim: 16,
            class_dim: 16,
        }
    }
}

/// `ε_θ(z_t, t, c)`: an MLP over `[z_t ‖ sinusoidal(t) ‖ embed(c)]` with
/// layers `fc1`, `fc2`, `fc3`. Adapters attach to those layers by name.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    mlp: MlpParams,
    /// `[(K + 1) × class_dim]`, last row is the null class.
    class_embed: Tensor,
    time_dim: usize,
    latent_dim: usize,
    t_max: usize,
    frozen: bool,
}

pub const DENOISER_LAYERS: [&str; 3] = ["fc1", "fc2", "fc3"];
const DENOISER_FORMAT: &str = "lorakey.denoiser";

/// Sinusoidal embedding with frequencies `π·2^i / (2T)`.
pub fn time_embedding(t: usize, t_max: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let w = std::f64::consts::PI * 2f64.powi(i as i32) / (2.0 * t_max as f64);
        out[i] = (w * t as f64).sin();
        out[half + i] = (w * t as f64).cos();
    }
    out
}

impl Denoiser {
    pub fn init(config: &DenoiserConfig, latent_dim: usize, num_classes: usize, t_max: usize, rng: &mut Rng) -> Result<Self> {
        if config.time_dim % 2 != 0 || config.time_dim == 0 {
            return Err(Error::Invalid("time embedding width must be even and positive".into()));
        }
        let input = latent_dim + config.time_dim + config.class_dim;
        let mlp = MlpParams::init(
            &[
                LayerSpec::new("fc1", input, config.hidden, Activation::Tanh),
                LayerSpec::new("fc2", config.hidden, config.hidden, Activation::Tanh),
                LayerSpec::new("fc3", config.hidden, latent_dim, Activation::Identity),
            ],
            &mut rng.derive("mlp"),
        )?;
        let class_embed = rng.derive("class").normal_tensor(&[num_classes + 1, config.class_dim], 1.0);
        Self::from_parts(mlp, class_embed, config.time_dim, t_max)
    }

    pub fn from_parts(mlp: MlpParams, class_embed: Tensor, time_dim: usize, t_max: usize) -> Result<Self> {
        let latent_dim = mlp.out_dim();
        if class_embed.ndim() != 2 || class_embed.rows() < 2 {
            return Err(shape_err("class embedding needs at least one class and the null row"));
        }
        if mlp.in_dim() != latent_dim + time_dim + class_embed.cols() {
            return Err(shape_err(format!(
                "denoiser input {} != latent {latent_dim} + time {time_dim} + class {}",
                mlp.in_dim(),
                class_embed.cols()
            )));
        }
        if t_max == 0 {
            return Err(Error::Invalid("denoiser needs T ≥ 1".into()));
        }
        Ok(Self {
            mlp,
            class_embed,
            time_dim,
            latent_dim,
            t_max,
            frozen: false,
        })
    }

    pub fn mlp(&self) -> &MlpParams {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut MlpParams {
        &mut self.mlp
    }

    pub fn class_embed(&self) -> &Tensor {
        &self.class_embed
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn time_dim(&self) -> usize {
        self.time_dim
    }

    pub fn null_class(&self) -> usize {
        self.class_embed.rows() - 1
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.mlp.layer_names()
    }

    /// `[z_t ‖ time(t) ‖ embed(c)]` per row.
    pub fn build_input(&self, z_t: &Tensor, t: &[usize], c: &[usize]) -> Result<Tensor> {
        let z = z_t.clone().as_matrix();
        if z.cols() != self.latent_dim {
            return Err(shape_err(format!("denoiser expects latents of width {}, got {:?}", self.latent_dim, z_t.shape())));
        }
        let n = z.rows();
        let tt = per_row(t, n, "timestep")?;
        let cc = per_row(c, n, "class")?;
        let width = self.mlp.in_dim();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            let (ti, ci) = (tt(i), cc(i));
            if ti == 0 || ti > self.t_max {
                return Err(Error::Invalid(format!("timestep {ti} outside 1..={}", self.t_max)));
            }
            if ci > self.null_class() {
                return Err(Error::Invalid(format!("class {ci} out of range 0..={}", self.null_class())));
            }
            data.extend_from_slice(z.row(i));
            data.extend(time_embedding(ti, self.t_max, self.time_dim));
            data.extend_from_slice(self.class_embed.row(ci));
        }
        Tensor::new(vec![n, width], data)
    }

    /// Noise prediction with superposed adapters; `[n × D_z]` in and out
    /// (a single latent vector gives a vector back).
    pub fn predict_eps(
        &self,
        adapters: &[(&LoraAdapter, f64)],
        z_t: &Tensor,
        t: &[usize],
        c: &[usize],
    ) -> Result<(Tensor, MlpCache)> {
        let input = self.build_input(z_t, t, c)?;
        let (y, cache) = mlp_forward(&self.mlp, &input, adapters)?;
        let y = if z_t.ndim() == 1 { y.flatten() } else { y };
        Ok((y, cache))
    }

    pub fn backward(
        &self,
        cache: &MlpCache,
        upstream: &Tensor,
        adapters: &[(&LoraAdapter, f64)],
        want: GradRequest,
    ) -> Result<MlpGrads> {
        mlp_backward(cache, &upstream.clone().as_matrix(), &self.mlp, adapters, want)
    }

    pub fn to_container(&self) -> Result<Container> {
        self.to_container_as(Dtype::F32)
    }

    /// Like [`to_container`](Self::to_container) at a chosen precision.
    pub fn to_container_as(&self, dtype: Dtype) -> Result<Container> {
        let mut c = mlp_to_container_as(
            &self.mlp,
            json!({
                "format": DENOISER_FORMAT,
                "time_dim": self.time_dim,
                "t_max": self.t_max,
                "frozen": self.frozen,
            }),
            dtype,
        )?;
        c.push("class_embed", &self.class_embed)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            time_dim: usize,
            t_max: usize,
            frozen: bool,
        }
        expect_format(c, DENOISER_FORMAT)?;
        let meta: Meta =
            serde_json::from_value(c.metadata.clone()).map_err(|e| Error::Corrupt(format!("denoiser metadata: {e}")))?;
        let mlp = mlp_from_container(c)?;
        let mut d = Self::from_parts(mlp, c.tensor("class_embed")?, meta.time_dim, meta.t_max)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        d.frozen = meta.frozen;
        Ok(d)
    }
}

impl NoisePredictor for Denoiser {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn num_classes(&self) -> usize {
        self.null_class()
    }

    fn predict(&self, z_t: &Tensor, t: &[usize], c: &[usize]) -> Result<Tensor> {
        Ok(self.predict_eps(&[], z_t, t, c)?.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default, deny_unknown_fields)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the class with the null class.
    pub class_dropout: f64,
    pub weight_decay: f64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 64,
            lr: 1e-3,
            class_dropout: 0.1,
            weight_decay: 0.0,
        }
    }
}

/// Cosine decay from `lr` to `lr/20` over `steps`.
pub fn cosine_lr(lr: f64, step: usize, steps: usize) -> f64 {
    if steps <= 1 {
        return lr;
    }
    let p = step as f64 / (steps - 1) as f64;
    let floor = lr / 20.0;
    floor + (lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// One ε-MSE minibatch: `z₀ ~ world`, `t ~ U{1..T}`, `ε ~ N(0, I)`.
pub struct EpsBatch {
    pub z_t: Tensor,
    pub eps: Tensor,
    pub t: Vec<usize>,
    pub c: Vec<usize>,
}

pub fn sample_eps_batch(
    z0: &Tensor,
    classes: &[usize],
    schedule: &NoiseSchedule,
    null_class: usize,
    class_dropout: f64,
    rng: &mut Rng,
) -> Result<EpsBatch> {
    let n = z0.rows();
    let t: Vec<usize> = (0..n).map(|_| 1 + rng.below(schedule.steps())).collect();
    let eps = rng.normal_tensor(&[n, z0.cols()], 1.0);
    let c: Vec<usize> = classes
        .iter()
        .map(|&c| if rng.uniform() < class_dropout { null_class } else { c })
        .collect();
    let z_t = forward_diffuse(schedule, z0, &t, &eps)?;
    Ok(EpsBatch { z_t, eps, t, c })
}

/// Gradient of a loss on the denoiser output wrt every base parameter and
/// the class table, laid out as `fc*.weight`, `fc*.bias`, `class_embed`.
fn base_grads(d: &Denoiser, cache: &MlpCache, upstream: &Tensor, c: &[usize]) -> Result<GradVector> {
    let g = d.backward(cache, upstream, &[], GradRequest::PARAMS)?;
    let mut gv = g.params.expect("requested");
    let offset = d.latent_dim + d.time_dim;
    let mut ge = Tensor::zeros(d.class_embed.shape());
    let k = d.class_embed.cols();
    for (i, &ci) in c.iter().enumerate() {
        let src = &g.input.row(i)[offset..offset + k];
        for (o, v) in ge.row_mut(ci).iter_mut().zip(src) {
            *o += v;
        }
    }
    gv.push("class_embed", ge)?;
    Ok(gv)
}

/// Standard ε-prediction training. Returns the frozen denoiser and the
/// per-step loss.
pub fn train_base_denoiser(
    world: &SyntheticWorld,
    schedule: &NoiseSchedule,
    arch: &DenoiserConfig,
    config: &BaseTrainConfig,
    rng: &Rng,
) -> Result<(Denoiser, Vec<f64>)> {
    let mut d = Denoiser::init(arch, world.latent_dim(), world.num_classes(), schedule.steps(), &mut rng.derive("init"))?;
    let mut opt = AdamW::new(config.lr).with_weight_decay(config.weight_decay);
    let mut data = rng.derive("data");
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let classes = world.sample_classes(config.batch, &mut data);
        let z0 = world.sample_latents(&classes, &mut data)?;
        let b = sample_eps_batch(&z0, &classes, schedule, d.null_class(), config.class_dropout, &mut data)?;
        let (pred, cache) = d.predict_eps(&[], &b.z_t, &b.t, &b.c)?;
        let (loss, g) = loss_mse(&pred, &b.eps)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                what: "base denoiser loss".into(),
            });
        }
        log.push(loss);
        let grads = base_grads(&d, &cache, &g, &b.c)?;
        opt.lr = cosine_lr(config.lr, step, config.steps);
        let mut params = d.mlp.params_mut();
        params.push(&mut d.class_embed);
        opt.step(&mut params, &grads)?;
    }
    d.freeze();
    Ok((d, log))
}

/// Mean over rows of `‖ε̂ − ε*‖² / D` on fresh noisy latents from the world.
pub fn oracle_mse(
    model: &dyn NoisePredictor,
    world: &SyntheticWorld,
    schedule: &NoiseSchedule,
    n: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let oracle = AnalyticOracle { world, schedule };
    let classes = world.sample_classes(n, rng);
    let z0 = world.sample_latents(&classes, rng)?;
    let b = sample_eps_batch(&z0, &classes, schedule, world.num_classes(), 0.0, rng)?;
    let pred = model.predict(&b.z_t, &b.t, &b.c)?;
    let star = oracle.predict(&b.z_t, &b.t, &b.c)?;
    Ok(loss_mse(&pred, &star)?.0)
}

fn guided_eps(model: &dyn NoisePredictor, z: &Tensor, t: usize, c: &[usize], w: Option<f64>) -> Result<Tensor> {
    let cond = model.predict(z, &[t], c)?;
    match w {
        None => Ok(cond),
        Some(w) if w == 1.0 => Ok(cond),
        Some(w) => {
            let null = model.predict(z, &[t], &[model.num_classes()])?;
            null.zip_map(&cond, |u, c| u + w * (c - u))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Null-class weight `w` in `ε_null + w(ε_c − ε_null)`; `None` and
    /// `Some(1.0)` are plain conditional sampling.
    pub guidance: Option<f64>,
    /// Per-coordinate bound on the clean-latent estimate at every step. The
    /// prediction is re-derived from the clipped estimate, which keeps rare
    /// trajectories from running away where the learned model extrapolates.
    pub clip_z0: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            guidance: None,
            clip_z0: Some(20.0),
        }
    }
}

impl SamplerConfig {
    /// No guidance and no clipping.
    pub fn plain() -> Self {
        Self {
            guidance: None,
            clip_z0: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.guidance.is_some_and(|w| !w.is_finite()) {
            return Err(Error::Invalid("guidance weight must be finite".into()));
        }
        if self.clip_z0.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Invalid("clip_z0 must be positive".into()));
        }
        Ok(())
    }
}

/// Ancestral DDPM chain from `z_T ~ N(0, I)`. Row `i` draws all its noise
/// from the stream `rng/sample#i`, so a row's trajectory depends only on the
/// seed, its index and its class.
pub fn sample(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    classes: &[usize],
    rng: &Rng,
    config: &SamplerConfig,
) -> Result<Tensor> {
    config.validate()?;
    let n = classes.len();
    if n == 0 {
        return Err(Error::Invalid("sample needs at least one class label".into()));
    }
    let d = model.latent_dim();
    let mut streams: Vec<Rng> = (0..n).map(|i| rng.stream("sample", i as u64)).collect();
    let mut z = Tensor::zeros(&[n, d]);
    for (i, s) in streams.iter_mut().enumerate() {
        z.row_mut(i).copy_from_slice(&s.normal_vec(d, 1.0));
    }
    for t in (1..=schedule.steps()).rev() {
        let mut eps = guided_eps(model, &z, t, classes, config.guidance)?;
        if let Some(c) = config.clip_z0 {
            let ab = schedule.alpha_bar(t);
            let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
            if sb > 0.0 {
                for (e, zv) in eps.data_mut().iter_mut().zip(z.data()) {
                    let z0 = ((zv - sb * *e) / sa).clamp(-c, c);
                    *e = (zv - sa * z0) / sb;
                }
            }
        }
        let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
        let inv = 1.0 / schedule.alpha(t).sqrt();
        let sigma = if t > 1 { schedule.posterior_variance(t).sqrt() } else { 0.0 };
        for (i, s) in streams.iter_mut().enumerate() {
            let e = eps.row(i);
            let noise = if t > 1 { s.normal_vec(d, 1.0) } else { Vec::new() };
            for (j, zv) in z.row_mut(i).iter_mut().enumerate() {
                let mean = inv * (*zv - coef * e[j]);
                *zv = if t > 1 { mean + sigma * noise[j] } else { mean };
            }
        }
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("sampler state at t = {t}")));
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = sched();
        assert_eq!(s.steps(), 100);
        for t in 2..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.beta(t) >= s.beta(t - 1));
        }
        assert!(s.alpha_bar(100) > 0.0 && s.alpha_bar(100) < 1e-3);
        assert!(NoiseSchedule::from_betas(vec![0.2, 0.1]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.0]).is_err());
        assert!(s.check_t(0).is_err() && s.check_t(101).is_err());
    }

    /// One-step schedule with `ᾱ_1 = a`.
    fn single(a: f64) -> NoiseSchedule {
        NoiseSchedule::from_betas(vec![1.0 - a]).unwrap()
    }

    #[test]
    fn hand_forward_and_inverse() {
        let s = single(0.25);
        let z0 = Tensor::vector(vec![2.0]);
        assert_eq!(forward_diffuse(&s, &z0, &[1], &Tensor::vector(vec![0.0])).unwrap().data(), &[1.0]);
        let zt = forward_diffuse(&s, &z0, &[1], &Tensor::vector(vec![1.0])).unwrap();
        assert!((zt.data()[0] - (1.0 + 0.75f64.sqrt())).abs() < 1e-12);
        let back = estimate_z0(&s, &Tensor::vector(vec![1.866025]), &[1], &Tensor::vector(vec![1.0])).unwrap();
        assert!((back.data()[0] - 2.0).abs() < 1e-6);
        let zero = estimate_z0(&s, &Tensor::vector(vec![3.0]), &[1], &Tensor::vector(vec![0.0])).unwrap();
        assert_eq!(zero.data(), &[6.0]);
    }

    #[test]
    fn time_embedding_is_bounded_and_distinct() {
        let a = time_embedding(1, 100, 16);
        let b = time_embedding(2, 100, 16);
        assert_ne!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn oracle_unit_variance_case() {
        let world = SyntheticWorld::new(Tensor::zeros(&[1, 1]), Tensor::filled(&[1, 1], 1.0), vec![1.0], 0).unwrap();
        let s = single(0.75);
        let o = AnalyticOracle { world: &world, schedule: &s };
        let e = o.predict(&Tensor::vector(vec![2.0]), &[1], &[0]).unwrap();
        assert!((e.data()[0] - 1.0).abs() < 1e-12);
        let null = o.predict(&Tensor::vector(vec![2.0]), &[1], &[1]).unwrap();
        assert!((null.data()[0] - 1.0).abs() < 1e-12);
        assert!(o.predict(&Tensor::vector(vec![2.0]), &[1], &[2]).is_err());
    }

    #[test]
    fn denoiser_container_roundtrip() {
        let mut rng = Rng::new(1, "d");
        let cfg = DenoiserConfig {
            hidden: 8,
            time_dim: 4,
            class_dim: 3,
        };
        let mut d = Denoiser::init(&cfg, 5, 2, 10, &mut rng).unwrap();
        d.freeze();
        let c = Container::from_bytes(&d.to_container().unwrap().to_bytes().unwrap()).unwrap();
        let back = Denoiser::from_container(&c).unwrap();
        let z = rng.normal_tensor(&[3, 5], 1.0);
        let p0 = d.predict(&z, &[4], &[1]).unwrap();
        let p1 = back.predict(&z, &[4], &[1]).unwrap();
        assert!(p0.sub(&p1).unwrap().max_abs() < 1e-5);
        assert!(back.is_frozen());
    }

    #[test]
    fn zero_step_training_returns_seeded_init() {
        let world = SyntheticWorld::generate(1, &crate::world::WorldConfig {
            latent_dim: 4,
            ..Default::default()
        })
        .unwrap();
        let s = sched();
        let arch = DenoiserConfig {
            hidden: 8,
            time_dim: 4,
            class_dim: 2,
        };
        let rng = Rng::new(3, "base");
        let cfg = BaseTrainConfig {
            steps: 0,
            ..Default::default()
        };
        let (d, log) = train_base_denoiser(&world, &s, &arch, &cfg, &rng).unwrap();
        let init = Denoiser::init(&arch, 4, 4, 100, &mut rng.derive("init")).unwrap();
        assert_eq!(d.mlp(), init.mlp());
        assert!(log.is_empty());
    }
}
