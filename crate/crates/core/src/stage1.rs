//! Latent watermark prior: a message encoder that produces an additive
//! latent residual, a private decoder that reads the message back from
//! (possibly distorted) images, and their joint training.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{expect_format, mlp_from_container, mlp_to_container, Container};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{
    loss_bce_logits, loss_mse, mlp_backward, mlp_forward, Activation, AdamW, GradRequest, GradVector, Layer, LayerSpec,
    MlpCache, MlpParams, Rng, Tensor,
};
use crate::world::{ImageShape, LatentCodec, PerceptionNet, SyntheticWorld};

/// A binary secret `m ∈ {0,1}^L`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Message {
    bits: Vec<u8>,
}

impl Message {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Invalid("message must have at least one bit".into()));
        }
        if let Some(b) = bits.iter().find(|b| **b > 1) {
            return Err(Error::Invalid(format!("message bit {b} is not binary")));
        }
        Ok(Self { bits })
    }

    pub fn random(len: usize, rng: &mut Rng) -> Result<Self> {
        Self::new((0..len).map(|_| rng.bit()).collect())
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// `s = 2m − 1`
    pub fn signed(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| 2.0 * b as f64 - 1.0).collect()
    }

    pub fn as_targets(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| 1 - b).collect(),
        }
    }

    /// Hard decision `logit > 0` per bit.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        Self::new(logits.iter().map(|&v| u8::from(v > 0.0)).collect())
    }
}

#[cfg(feature = "schema")]
impl schemars::JsonSchema for Message {
    fn schema_name() -> String {
        "Message".into()
    }

    fn json_schema(_: &mut schemars::gen::SchemaGenerator) -> schemars::schema::Schema {
        schemars::schema::SchemaObject {
            instance_type: Some(schemars::schema::InstanceType::String.into()),
            string: Some(Box::new(schemars::schema::StringValidation {
                pattern: Some("^[01]+$".into()),
                min_length: Some(1),
                ..Default::default()
            })),
            ..Default::default()
        }
        .into()
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

impl FromStr for Message {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::Invalid(format!("message character `{other}` is not 0 or 1"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(bits)
    }
}

impl TryFrom<String> for Message {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Message> for String {
    fn from(m: Message) -> String {
        m.to_string()
    }
}

const ENCODER_FORMAT: &str = "lorakey.encoder";
const DECODER_FORMAT: &str = "lorakey.decoder";

/// `𝓔_ψ`: signed message to latent residual, scaled by a fixed output gain.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageEncoder {
    params: MlpParams,
    gain: f64,
}

impl MessageEncoder {
    /// Hidden tanh layer, zero-initialized output layer.
    pub fn init(message_len: usize, hidden: usize, latent_dim: usize, gain: f64, rng: &mut Rng) -> Result<Self> {
        let mut params = MlpParams::init(
            &[
                LayerSpec::new("enc1", message_len, hidden, Activation::Tanh),
                LayerSpec::new("enc2", hidden, latent_dim, Activation::Identity),
            ],
            rng,
        )?;
        params.layer_mut("enc2").expect("declared").weight.fill(0.0);
        Self::from_params(params, gain)
    }

    pub fn from_params(params: MlpParams, gain: f64) -> Result<Self> {
        if !gain.is_finite() {
            return Err(Error::NonFinite("encoder gain".into()));
        }
        Ok(Self { params, gain })
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn message_len(&self) -> usize {
        self.params.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.params.out_dim()
    }

    fn check(&self, m: &Message) -> Result<()> {
        if m.len() != self.message_len() {
            return Err(shape_err(format!(
                "message has {} bits, encoder expects {}",
                m.len(),
                self.message_len()
            )));
        }
        Ok(())
    }

    /// Latent residual `𝓔_ψ(m)`.
    pub fn residual(&self, m: &Message) -> Result<Tensor> {
        self.check(m)?;
        let (y, _) = mlp_forward(&self.params, &Tensor::vector(m.signed()), &[])?;
        Ok(y.scale(self.gain))
    }

    /// Residuals for a batch of messages, `[n × D_z]`.
    pub fn residuals(&self, ms: &[Message]) -> Result<Tensor> {
        Ok(self.forward_batch(ms)?.0)
    }

    fn forward_batch(&self, ms: &[Message]) -> Result<(Tensor, MlpCache)> {
        for m in ms {
            self.check(m)?;
        }
        let rows: Vec<Vec<f64>> = ms.iter().map(Message::signed).collect();
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let (y, cache) = mlp_forward(&self.params, &Tensor::stack_rows(&refs)?, &[])?;
        Ok((y.scale(self.gain), cache))
    }

    /// `z_wm = z + 𝓔_ψ(m)` for a latent or a batch of latents.
    pub fn embed(&self, z: &Tensor, m: &Message) -> Result<Tensor> {
        let r = self.residual(m)?;
        if z.cols() != r.len() {
            return Err(shape_err(format!("latent {:?} vs residual width {}", z.shape(), r.len())));
        }
        let mut out = z.clone();
        let d = r.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += r.data()[i % d];
        }
        Ok(out)
    }

    pub fn to_container(&self) -> Result<Container> {
        mlp_to_container(&self.params, json!({"format": ENCODER_FORMAT, "gain": self.gain}))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        expect_format(c, ENCODER_FORMAT)?;
        let gain = c
            .metadata
            .get("gain")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::Corrupt("encoder gain missing".into()))?;
        Self::from_params(mlp_from_container(c)?, gain)
    }
}

/// `𝓓_φ`: latent to `L` bit logits.
#[derive(Clone, Debug, PartialEq)]
pub struct WatermarkDecoder {
    params: MlpParams,
    frozen: bool,
}

impl WatermarkDecoder {
    pub fn init(latent_dim: usize, hidden: usize, message_len: usize, rng: &mut Rng) -> Result<Self> {
        let params = MlpParams::init(
            &[
                LayerSpec::new("dec1", latent_dim, hidden, Activation::Tanh),
                LayerSpec::new("dec2", hidden, message_len, Activation::Identity),
            ],
            rng,
        )?;
        Ok(Self { params, frozen: false })
    }

    /// Single linear map `logits = W·z + b`.
    pub fn linear(weight: Tensor, bias: Tensor) -> Result<Self> {
        Ok(Self {
            params: MlpParams::new(vec![Layer::new("dec", weight, bias, Activation::Identity)?])?,
            frozen: true,
        })
    }

    /// Unfrozen decoder over existing parameters.
    pub fn from_params(params: MlpParams) -> Self {
        Self { params, frozen: false }
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn message_len(&self) -> usize {
        self.params.out_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.params.in_dim()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Logits for latents `[n × D_z]`.
    pub fn logits(&self, z: &Tensor) -> Result<Tensor> {
        Ok(mlp_forward(&self.params, &z.clone().as_matrix(), &[])?.0)
    }

    pub fn to_container(&self) -> Result<Container> {
        mlp_to_container(&self.params, json!({"format": DECODER_FORMAT}))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        expect_format(c, DECODER_FORMAT)?;
        Ok(Self {
            params: mlp_from_container(c)?,
            frozen: true,
        })
    }
}

/// `m′ = 𝓓_φ(encode(x))` for one image.
pub fn extract_bits(decoder: &WatermarkDecoder, codec: &LatentCodec, x: &Tensor) -> Result<(Tensor, Message)> {
    if x.len() != codec.image_dim() {
        return Err(shape_err(format!("image {:?} does not match codec", x.shape())));
    }
    let logits = decoder.logits(&codec.encode(&x.flatten())?)?.flatten();
    let m = Message::from_logits(logits.data())?;
    Ok((logits, m))
}

/// Logits for a batch of flattened images `[n × D_img]`.
pub fn extract_logits(decoder: &WatermarkDecoder, codec: &LatentCodec, images: &Tensor) -> Result<Tensor> {
    decoder.logits(&codec.encode(images)?)
}

/// Fraction of agreeing bits between hard decisions on `logits` and `m`.
pub fn bit_accuracy(logits: &Tensor, messages: &[Message]) -> Result<f64> {
    let l = logits.clone().as_matrix();
    if l.rows() != messages.len() {
        return Err(shape_err("one message per logit row required"));
    }
    let mut hits = 0usize;
    for (i, m) in messages.iter().enumerate() {
        if m.len() != l.cols() {
            return Err(shape_err("message length differs from logit width"));
        }
        hits += l
            .row(i)
            .iter()
            .zip(m.bits())
            .filter(|(v, b)| u8::from(**v > 0.0) == **b)
            .count();
    }
    Ok(hits as f64 / (l.len() as f64))
}

/// Differentiable image distortions used during training. One enabled
/// distortion is drawn uniformly per image per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default, deny_unknown_fields)]
pub struct DistortionConfig {
    /// Additive Gaussian noise with this standard deviation.
    pub noise_std: Option<f64>,
    /// Zero a random rectangle covering about this fraction of the image.
    pub mask_fraction: Option<f64>,
    /// Round to this many uniformly spaced levels in `[0, 1]`.
    pub quantize_levels: Option<u32>,
    /// Also allow the undistorted image as one of the choices.
    pub include_identity: bool,
}

impl Default for DistortionConfig {
    fn default() -> Self {
        Self {
            noise_std: Some(0.05),
            mask_fraction: None,
            quantize_levels: Some(64),
            include_identity: true,
        }
    }
}

impl DistortionConfig {
    pub fn none() -> Self {
        Self {
            noise_std: None,
            mask_fraction: None,
            quantize_levels: None,
            include_identity: true,
        }
    }

    fn choices(&self) -> Vec<Distortion> {
        let mut out = Vec::new();
        if self.include_identity {
            out.push(Distortion::Identity);
        }
        if let Some(s) = self.noise_std {
            out.push(Distortion::Noise(s));
        }
        if let Some(f) = self.mask_fraction {
            out.push(Distortion::Mask(f));
        }
        if let Some(l) = self.quantize_levels {
            out.push(Distortion::Quantize(l));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_std.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::Invalid("noise_std must be finite and non-negative".into()));
        }
        if self.mask_fraction.is_some_and(|f| !(0.0..=1.0).contains(&f)) {
            return Err(Error::Invalid("mask_fraction must lie in [0, 1]".into()));
        }
        if self.quantize_levels.is_some_and(|l| l < 2) {
            return Err(Error::Invalid("quantize_levels must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distortion {
    Identity,
    Noise(f64),
    Mask(f64),
    Quantize(u32),
}

/// How to map an output gradient back through one distorted batch.
#[derive(Clone, Debug)]
pub struct DistortionRecord {
    /// Per image: `None` passes the gradient through, `Some(mask)` multiplies it.
    pass: Vec<Option<Vec<f64>>>,
    pub applied: Vec<Distortion>,
}

impl DistortionRecord {
    pub fn backward(&self, grad: &Tensor) -> Result<Tensor> {
        let mut g = grad.clone().as_matrix();
        if g.rows() != self.pass.len() {
            return Err(shape_err("distortion backward: batch size changed"));
        }
        for (i, p) in self.pass.iter().enumerate() {
            if let Some(mask) = p {
                for (v, m) in g.row_mut(i).iter_mut().zip(mask) {
                    *v *= m;
                }
            }
        }
        Ok(g)
    }
}

/// Rectangle of roughly `fraction·H·W` pixels at a random position, as a
/// keep-mask (0 inside, 1 outside) over all channels.
fn rect_mask(shape: ImageShape, fraction: f64, rng: &mut Rng) -> Vec<f64> {
    let (h, w) = (shape.height, shape.width);
    let mut mask = vec![1.0; shape.numel()];
    if fraction <= 0.0 {
        return mask;
    }
    let area = fraction * (h * w) as f64;
    let aspect = rng.uniform_range(0.5, 2.0);
    let rh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let rw = ((area / rh as f64).round() as usize).clamp(1, w);
    let (rh, rw) = if fraction >= 1.0 { (h, w) } else { (rh, rw) };
    let top = rng.below(h - rh + 1);
    let left = rng.below(w - rw + 1);
    for c in 0..shape.channels {
        for i in top..top + rh {
            for j in left..left + rw {
                mask[c * h * w + i * w + j] = 0.0;
            }
        }
    }
    mask
}

/// Apply one distortion per image. Outputs are clamped to `[0, 1]`; the
/// clamp is treated as straight-through in the backward record.
pub fn distort(config: &DistortionConfig, shape: ImageShape, x: &Tensor, rng: &mut Rng) -> Result<(Tensor, DistortionRecord)> {
    config.validate()?;
    let choices = config.choices();
    let kinds: Vec<Distortion> = (0..x.rows())
        .map(|_| {
            if choices.is_empty() {
                Distortion::Identity
            } else {
                choices[rng.below(choices.len())]
            }
        })
        .collect();
    distort_with(&kinds, shape, x, rng)
}

/// Apply the given per-image distortions.
pub fn distort_with(kinds: &[Distortion], shape: ImageShape, x: &Tensor, rng: &mut Rng) -> Result<(Tensor, DistortionRecord)> {
    let mut out = x.clone().as_matrix();
    if out.cols() != shape.numel() || out.rows() != kinds.len() {
        return Err(shape_err(format!("distort: batch {:?} vs image {:?}", x.shape(), shape)));
    }
    let mut pass = Vec::with_capacity(kinds.len());
    for (i, kind) in kinds.iter().enumerate() {
        let row = out.row_mut(i);
        match *kind {
            Distortion::Identity => pass.push(None),
            Distortion::Noise(s) => {
                for v in row.iter_mut() {
                    *v = (*v + s * rng.normal()).clamp(0.0, 1.0);
                }
                pass.push(None);
            }
            Distortion::Mask(f) => {
                let mask = rect_mask(shape, f, rng);
                for (v, m) in row.iter_mut().zip(&mask) {
                    *v *= m;
                }
                pass.push(Some(mask));
            }
            Distortion::Quantize(levels) => {
                let q = (levels - 1) as f64;
                for v in row.iter_mut() {
                    *v = (v.clamp(0.0, 1.0) * q).round() / q;
                }
                pass.push(None);
            }
        }
    }
    Ok((
        out,
        DistortionRecord {
            pass,
            applied: kinds.to_vec(),
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub message_len: usize,
    pub lambda_mse: f64,
    pub lambda_feat: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub encoder_gain: f64,
    pub distortion: DistortionConfig,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            message_len: 16,
            lambda_mse: 1.0,
            lambda_feat: 0.1,
            steps: 2000,
            batch: 32,
            lr: 3e-3,
            encoder_hidden: 64,
            decoder_hidden: 128,
            encoder_gain: 1.0,
            distortion: DistortionConfig::default(),
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.message_len == 0 || self.batch == 0 {
            return Err(Error::Invalid("message_len and batch must be positive".into()));
        }
        if !(self.lambda_mse >= 0.0 && self.lambda_feat >= 0.0) {
            return Err(Error::Invalid("λ weights must be non-negative".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid("learning rate must be finite and non-negative".into()));
        }
        self.distortion.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PriorLogRow {
    pub step: usize,
    pub bce: f64,
    pub mse: f64,
    pub feat_mse: f64,
    pub bit_acc: f64,
}

pub const PRIOR_LOG_HEADER: &str = "step,bce,mse,feat_mse,bit_acc";

impl PriorLogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.bce, self.mse, self.feat_mse, self.bit_acc)
    }
}

/// Loss terms and gradients for one Stage-1 batch.
pub struct PriorStep {
    pub row: PriorLogRow,
    pub total: f64,
    /// Encoder then decoder gradients, in parameter declaration order.
    pub encoder_grad: GradVector,
    pub decoder_grad: GradVector,
}

/// Everything the Stage-1 loss needs besides the networks.
pub struct PriorContext<'a> {
    pub codec: &'a LatentCodec,
    pub perception: &'a PerceptionNet,
    pub lambda_mse: f64,
    pub lambda_feat: f64,
}

/// `L_prior = BCE(m, 𝓓(encode(𝓝(decode(z + 𝓔(m)))))) + λ₁·MSE(x, x_wm) +
/// λ₂·MSE(F(x), F(x_wm))` and its exact gradients, with `𝓝` fixed by `kinds`
/// and the `distortion_rng` draws.
pub fn prior_loss(
    ctx: &PriorContext<'_>,
    encoder: &MessageEncoder,
    decoder: &WatermarkDecoder,
    z: &Tensor,
    messages: &[Message],
    kinds: &[Distortion],
    distortion_rng: &mut Rng,
) -> Result<PriorStep> {
    let codec = ctx.codec;
    let (r, enc_cache) = encoder.forward_batch(messages)?;
    let z_wm = z.add(&r)?;
    let x_clean = codec.decode(z)?;
    let x_wm = codec.decode(&z_wm)?;
    let (x_d, record) = distort_with(kinds, codec.image_shape(), &x_wm, distortion_rng)?;
    let z_d = codec.encode(&x_d)?;
    let (logits, dec_cache) = mlp_forward(decoder.params(), &z_d, &[])?;
    let trows: Vec<Vec<f64>> = messages.iter().map(Message::as_targets).collect();
    let trefs: Vec<&[f64]> = trows.iter().map(Vec::as_slice).collect();
    let t = Tensor::stack_rows(&trefs)?;
    let (bce, g_logits) = loss_bce_logits(&logits, &t)?;
    let (mse, g_mse) = loss_mse(&x_wm, &x_clean)?;
    let (f_wm, f_cache) = ctx.perception.perceive(&x_wm)?;
    let (f_clean, _) = ctx.perception.perceive(&x_clean)?;
    let (feat, g_feat) = loss_mse(&f_wm, &f_clean)?;
    let total = bce + ctx.lambda_mse * mse + ctx.lambda_feat * feat;
    if !total.is_finite() {
        return Err(Error::NonFinite("Stage-1 loss".into()));
    }

    let dec = mlp_backward(&dec_cache, &g_logits, decoder.params(), &[], GradRequest::PARAMS)?;
    let g_xd = codec.encode_backward(&dec.input)?;
    let mut g_xwm = record.backward(&g_xd)?;
    g_xwm.axpy(ctx.lambda_mse, &g_mse)?;
    if ctx.lambda_feat != 0.0 {
        let g_fx = ctx.perception.backward(&f_cache, &g_feat)?;
        g_xwm.axpy(ctx.lambda_feat, &g_fx)?;
    }
    let g_r = codec.decode_backward(&g_xwm)?.scale(encoder.gain());
    let enc = mlp_backward(&enc_cache, &g_r, encoder.params(), &[], GradRequest::PARAMS)?;
    Ok(PriorStep {
        row: PriorLogRow {
            step: 0,
            bce,
            mse,
            feat_mse: feat,
            bit_acc: bit_accuracy(&logits, messages)?,
        },
        total,
        encoder_grad: enc.params.expect("requested"),
        decoder_grad: dec.params.expect("requested"),
    })
}

pub struct TrainedPrior {
    pub encoder: MessageEncoder,
    pub decoder: WatermarkDecoder,
    pub log: Vec<PriorLogRow>,
}

/// Joint training of encoder and decoder; the decoder is frozen on return.
pub fn train_prior(
    world: &SyntheticWorld,
    codec: &LatentCodec,
    perception: &PerceptionNet,
    config: &PriorConfig,
    rng: &Rng,
) -> Result<TrainedPrior> {
    config.validate()?;
    let mut encoder = MessageEncoder::init(
        config.message_len,
        config.encoder_hidden,
        codec.latent_dim(),
        config.encoder_gain,
        &mut rng.derive("encoder"),
    )?;
    let mut decoder = WatermarkDecoder::init(
        codec.latent_dim(),
        config.decoder_hidden,
        config.message_len,
        &mut rng.derive("decoder"),
    )?;
    let ctx = PriorContext {
        codec,
        perception,
        lambda_mse: config.lambda_mse,
        lambda_feat: config.lambda_feat,
    };
    let mut enc_opt = AdamW::new(config.lr).with_weight_decay(0.0);
    let mut dec_opt = AdamW::new(config.lr).with_weight_decay(0.0);
    let mut data = rng.derive("data");
    let mut noise = rng.derive("distort");
    let choices = config.distortion.choices();
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let z = world.sample_mixed(codec, &mut data, config.batch)?.z0;
        let messages = (0..config.batch)
            .map(|_| Message::random(config.message_len, &mut data))
            .collect::<Result<Vec<_>>>()?;
        let kinds: Vec<Distortion> = (0..config.batch)
            .map(|_| {
                if choices.is_empty() {
                    Distortion::Identity
                } else {
                    choices[noise.below(choices.len())]
                }
            })
            .collect();
        let out = prior_loss(&ctx, &encoder, &decoder, &z, &messages, &kinds, &mut noise).map_err(|e| match e {
            Error::NonFinite(what) => Error::Diverged { step, what },
            other => other,
        })?;
        let lr = crate::diffusion::cosine_lr(config.lr, step, config.steps);
        enc_opt.lr = lr;
        dec_opt.lr = lr;
        enc_opt.step(&mut encoder.params.params_mut(), &out.encoder_grad)?;
        dec_opt.step(&mut decoder.params.params_mut(), &out.decoder_grad)?;
        log.push(PriorLogRow { step, ..out.row });
    }
    decoder.freeze();
    Ok(TrainedPrior { encoder, decoder, log })
}

/// Held-out bit accuracy of the prior on fresh world latents with random
/// messages, optionally through a distortion.
pub fn evaluate_prior(
    world: &SyntheticWorld,
    codec: &LatentCodec,
    encoder: &MessageEncoder,
    decoder: &WatermarkDecoder,
    distortion: Option<&DistortionConfig>,
    n: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let z = world.sample_mixed(codec, rng, n)?.z0;
    let messages = (0..n)
        .map(|_| Message::random(encoder.message_len(), rng))
        .collect::<Result<Vec<_>>>()?;
    let x = codec.decode(&z.add(&encoder.residuals(&messages)?)?)?;
    let x = match distortion {
        Some(cfg) => distort(cfg, codec.image_shape(), &x, rng)?.0,
        None => x,
    };
    bit_accuracy(&extract_logits(decoder, codec, &x)?, &messages)
}

/// Mean `‖𝓔_ψ(m)‖/√D_z` over `n` random messages.
pub fn residual_rms(encoder: &MessageEncoder, n: usize, rng: &mut Rng) -> Result<f64> {
    let messages = (0..n)
        .map(|_| Message::random(encoder.message_len(), rng))
        .collect::<Result<Vec<_>>>()?;
    let r = encoder.residuals(&messages)?;
    let d = r.cols() as f64;
    Ok((0..r.rows())
        .map(|i| r.row(i).iter().map(|v| v * v).sum::<f64>().sqrt() / d.sqrt())
        .sum::<f64>()
        / n as f64)
}
