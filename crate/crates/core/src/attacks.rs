//! The adversary: image post-processing, parameter-space attacks on the
//! deployed adapters, and the harness that scores both.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::diffusion::{cosine_lr, forward_diffuse, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::lora::{merge_adapters, prune_adapter, LoraAdapter, MergedModel};
use crate::numerics::{loss_mse, AdamW, GradRequest, Rng, Tensor};
use crate::pipeline::Deployment;
use crate::stage2::KeyBatch;
use crate::verify::{verify_logits, VerificationPolicy};
use crate::world::{ImageShape, SyntheticWorld};

/// One image-space post-processing operation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ImageAttack {
    Identity,
    /// Bilinear down-sampling by `scale`, then back up to the input size.
    Resize { scale: f64 },
    GaussianBlur { kernel: usize, sigma: f64 },
    GaussianNoise { std: f64 },
    /// Blockwise 8×8 DCT quantization with the quality-scaled luminance table.
    Jpeg { quality: u32 },
    /// Factors drawn uniformly from `[min, max]` per image.
    Brightness { min: f64, max: f64 },
    Contrast { min: f64, max: f64 },
    Saturation { min: f64, max: f64 },
    Sharpen { factor: f64 },
}

impl ImageAttack {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Resize { .. } => "resize",
            Self::GaussianBlur { .. } => "gaussian_blur",
            Self::GaussianNoise { .. } => "gaussian_noise",
            Self::Jpeg { .. } => "jpeg",
            Self::Brightness { .. } => "brightness",
            Self::Contrast { .. } => "contrast",
            Self::Saturation { .. } => "saturation",
            Self::Sharpen { .. } => "sharpen",
        }
    }

    /// Short parameter summary for report rows.
    pub fn params(&self) -> String {
        match self {
            Self::Identity => String::new(),
            Self::Resize { scale } => format!("scale={scale}"),
            Self::GaussianBlur { kernel, sigma } => format!("kernel={kernel} sigma={sigma}"),
            Self::GaussianNoise { std } => format!("std={std}"),
            Self::Jpeg { quality } => format!("quality={quality}"),
            Self::Brightness { min, max } | Self::Contrast { min, max } | Self::Saturation { min, max } => {
                format!("factor=[{min},{max}]")
            }
            Self::Sharpen { factor } => format!("factor={factor}"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Invalid(format!("{}: {what}", self.name())));
        match *self {
            Self::Identity => Ok(()),
            Self::Resize { scale } if !(scale > 0.0 && scale.is_finite()) => bad("scale must be positive"),
            Self::GaussianBlur { kernel, sigma } if kernel % 2 == 0 || !(sigma >= 0.0 && sigma.is_finite()) => {
                bad("kernel must be odd and sigma non-negative")
            }
            Self::GaussianNoise { std } if !(std >= 0.0 && std.is_finite()) => bad("std must be non-negative"),
            Self::Jpeg { quality } if !(1..=100).contains(&quality) => bad("quality must lie in 1..=100"),
            Self::Brightness { min, max } | Self::Contrast { min, max } | Self::Saturation { min, max }
                if !(min >= 0.0 && min <= max && max.is_finite()) =>
            {
                bad("factor range must satisfy 0 <= min <= max")
            }
            Self::Sharpen { factor } if !(factor >= 0.0 && factor.is_finite()) => bad("factor must be non-negative"),
            _ => Ok(()),
        }
    }

    /// The standard evaluation suite, identity first.
    pub fn paper_suite() -> Vec<ImageAttack> {
        vec![
            Self::Identity,
            Self::Resize { scale: 0.5 },
            Self::GaussianBlur { kernel: 3, sigma: 4.0 },
            Self::GaussianNoise { std: 0.10 },
            Self::Jpeg { quality: 50 },
            Self::Brightness { min: 0.8, max: 1.2 },
            Self::Contrast { min: 0.8, max: 1.2 },
            Self::Saturation { min: 0.8, max: 1.2 },
            Self::Sharpen { factor: 10.0 },
        ]
    }

    /// Every attack at its neutral parameter.
    pub fn neutral_suite() -> Vec<ImageAttack> {
        vec![
            Self::Identity,
            Self::Resize { scale: 1.0 },
            Self::GaussianBlur { kernel: 3, sigma: 0.0 },
            Self::GaussianNoise { std: 0.0 },
            Self::Jpeg { quality: 100 },
            Self::Brightness { min: 1.0, max: 1.0 },
            Self::Contrast { min: 1.0, max: 1.0 },
            Self::Saturation { min: 1.0, max: 1.0 },
            Self::Sharpen { factor: 1.0 },
        ]
    }
}

fn clamp01(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Apply one attack to a single `[C·H·W]` image; the output is in `[0, 1]`.
pub fn apply_attack(attack: &ImageAttack, shape: ImageShape, image: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    attack.validate()?;
    if image.len() != shape.numel() {
        return Err(crate::error::shape_err(format!("image of {} values for shape {shape:?}", image.len())));
    }
    let mut x = image.to_vec();
    match *attack {
        ImageAttack::Identity => {}
        ImageAttack::Resize { scale } => {
            let (h, w) = (shape.height, shape.width);
            let sh = ((h as f64 * scale).round() as usize).max(1);
            let sw = ((w as f64 * scale).round() as usize).max(1);
            for c in 0..shape.channels {
                let plane = &image[c * h * w..(c + 1) * h * w];
                let small = bilinear(plane, h, w, sh, sw);
                x[c * h * w..(c + 1) * h * w].copy_from_slice(&bilinear(&small, sh, sw, h, w));
            }
        }
        ImageAttack::GaussianBlur { kernel, sigma } => {
            let half = (kernel / 2) as isize;
            let mut k: Vec<f64> = (-half..=half)
                .map(|i| if sigma == 0.0 { f64::from(u8::from(i == 0)) } else { (-((i * i) as f64) / (2.0 * sigma * sigma)).exp() })
                .collect();
            let s: f64 = k.iter().sum();
            k.iter_mut().for_each(|v| *v /= s);
            let k2: Vec<f64> = k.iter().flat_map(|a| k.iter().map(move |b| a * b)).collect();
            x = convolve(&x, shape, &k2, kernel, Edge::Reflect);
        }
        ImageAttack::GaussianNoise { std } => {
            if std > 0.0 {
                x.iter_mut().for_each(|v| *v += std * rng.normal());
            }
        }
        ImageAttack::Jpeg { quality } => x = jpeg_proxy(&x, shape, quality),
        ImageAttack::Brightness { min, max } => {
            let f = rng.uniform_range(min, max);
            x.iter_mut().for_each(|v| *v *= f);
        }
        ImageAttack::Contrast { min, max } => {
            let f = rng.uniform_range(min, max);
            let m = x.iter().sum::<f64>() / x.len() as f64;
            x.iter_mut().for_each(|v| *v = m + f * (*v - m));
        }
        ImageAttack::Saturation { min, max } => {
            let f = rng.uniform_range(min, max);
            let hw = shape.height * shape.width;
            for p in 0..hw {
                let g = (0..shape.channels).map(|c| image[c * hw + p]).sum::<f64>() / shape.channels as f64;
                for c in 0..shape.channels {
                    x[c * hw + p] = g + f * (image[c * hw + p] - g);
                }
            }
        }
        ImageAttack::Sharpen { factor } => {
            let smooth_kernel = [1.0, 1.0, 1.0, 1.0, 5.0, 1.0, 1.0, 1.0, 1.0].map(|v| v / 13.0);
            let smooth = convolve(&x, shape, &smooth_kernel, 3, Edge::Keep);
            x.iter_mut().zip(&smooth).for_each(|(v, s)| *v = s + factor * (*v - s));
        }
    }
    clamp01(&mut x);
    Ok(x)
}

/// Bilinear resampling with half-pixel centres and edge clamping.
fn bilinear(src: &[f64], ih: usize, iw: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(n_in - 1), s - lo as f64)
    };
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let (y0, y1, wy) = coord(y, ih, oh);
        for xo in 0..ow {
            let (x0, x1, wx) = coord(xo, iw, ow);
            let top = src[y0 * iw + x0] * (1.0 - wx) + src[y0 * iw + x1] * wx;
            let bot = src[y1 * iw + x0] * (1.0 - wx) + src[y1 * iw + x1] * wx;
            out[y * ow + xo] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Edge {
    /// Mirror without repeating the edge pixel.
    Reflect,
    /// Pixels whose window leaves the image are copied through unfiltered.
    Keep,
}

/// Per-channel `k × k` correlation.
fn convolve(x: &[f64], shape: ImageShape, kernel: &[f64], k: usize, edge: Edge) -> Vec<f64> {
    let (h, w) = (shape.height as isize, shape.width as isize);
    let half = (k / 2) as isize;
    let reflect = |i: isize, n: isize| {
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
            if n == 1 {
                return 0;
            }
        }
        i
    };
    let mut out = x.to_vec();
    for c in 0..shape.channels {
        let base = c * (h * w) as usize;
        for i in 0..h {
            for j in 0..w {
                let inside = i >= half && j >= half && i < h - half && j < w - half;
                if !inside && matches!(edge, Edge::Keep) {
                    continue;
                }
                let mut acc = 0.0;
                for di in -half..=half {
                    for dj in -half..=half {
                        let ii = reflect(i + di, h);
                        let jj = reflect(j + dj, w);
                        acc += kernel[((di + half) * k as isize + dj + half) as usize] * x[base + (ii * w + jj) as usize];
                    }
                }
                out[base + (i * w + j) as usize] = acc;
            }
        }
    }
    out
}

/// Standard JPEG luminance quantization table (quality 50).
const LUMINANCE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57., 69., 56.,
    14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64., 81., 104., 113.,
    92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Quality-scaled table: `s = 5000/q` below 50, `200 − 2q` above, entries
/// `floor((base·s + 50)/100)` clamped to `[1, 255]`. Quality 100 is all ones.
pub fn jpeg_table(quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let s = if q < 50.0 { (5000.0 / q).floor() } else { 200.0 - 2.0 * q };
    LUMINANCE.map(|b| ((b * s + 50.0) / 100.0).floor().clamp(1.0, 255.0))
}

/// Orthonormal 8-point DCT-II basis, `m[u][x]`.
fn dct_matrix() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (((2 * x + 1) * u) as f64 * PI / 16.0).cos();
        }
    }
    m
}

/// 2-D DCT of an 8×8 block (`forward`) or its inverse.
pub fn dct8x8(block: &[f64; 64], forward: bool) -> [f64; 64] {
    let m = dct_matrix();
    let at = |u: usize, x: usize| if forward { m[u][x] } else { m[x][u] };
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for j in 0..8 {
            tmp[u * 8 + j] = (0..8).map(|i| at(u, i) * block[i * 8 + j]).sum();
        }
    }
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            out[u * 8 + v] = (0..8).map(|j| at(v, j) * tmp[u * 8 + j]).sum();
        }
    }
    out
}

/// Every channel goes through the luminance path on the `255·x − 128`
/// scale; sizes that are not multiples of 8 are edge-padded then cropped.
fn jpeg_proxy(x: &[f64], shape: ImageShape, quality: u32) -> Vec<f64> {
    let table = jpeg_table(quality);
    let (h, w) = (shape.height, shape.width);
    let mut out = x.to_vec();
    for c in 0..shape.channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [0.0; 64];
                for i in 0..8 {
                    for j in 0..8 {
                        let (yy, xx) = ((by + i).min(h - 1), (bx + j).min(w - 1));
                        block[i * 8 + j] = 255.0 * plane[yy * w + xx] - 128.0;
                    }
                }
                let mut coef = dct8x8(&block, true);
                for (v, q) in coef.iter_mut().zip(&table) {
                    *v = (*v / q).round() * q;
                }
                let back = dct8x8(&coef, false);
                for i in 0..8.min(h - by) {
                    for j in 0..8.min(w - bx) {
                        out[c * h * w + (by + i) * w + bx + j] = (back[i * 8 + j] + 128.0) / 255.0;
                    }
                }
            }
        }
    }
    out
}

/// Apply an attack to every row of `[n × D_img]`; row `i` draws from the
/// stream `rng/<attack name>#i`.
pub fn apply_attack_batch(attack: &ImageAttack, shape: ImageShape, images: &Tensor, rng: &Rng) -> Result<Tensor> {
    let images = images.clone().as_matrix();
    let mut out = images.clone();
    for i in 0..images.rows() {
        let mut r = rng.stream(attack.name(), i as u64);
        let y = apply_attack(attack, shape, images.row(i), &mut r)?;
        out.row_mut(i).copy_from_slice(&y);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub class_dropout: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-4,
            batch: 32,
            class_dropout: 0.1,
        }
    }
}

/// Continue plain ε-MSE training of every attached adapter on clean world
/// data, base frozen, coefficients fixed.
pub fn finetune_attack(model: &MergedModel, world: &SyntheticWorld, schedule: &NoiseSchedule, config: &FinetuneConfig, rng: &Rng) -> Result<MergedModel> {
    let mut pairs: Vec<(LoraAdapter, f64)> = model.pairs().to_vec();
    let base = model.base();
    let mut opts: Vec<AdamW> = pairs.iter().map(|_| AdamW::new(config.lr).with_weight_decay(0.0)).collect();
    let mut data = rng.derive("finetune");
    for step in 0..config.steps {
        let b = KeyBatch::sample(world, schedule, config.batch, config.class_dropout, &mut data)?;
        let z_t = forward_diffuse(schedule, &b.z0, &b.t, &b.eps)?;
        let refs: Vec<(&LoraAdapter, f64)> = pairs.iter().map(|(a, c)| (a, *c)).collect();
        let (pred, cache) = base.predict_eps(&refs, &z_t, &b.t, &b.c)?;
        let (l, g) = loss_mse(&pred, &b.eps)?;
        if !l.is_finite() {
            return Err(Error::Diverged {
                step,
                what: "fine-tune loss".into(),
            });
        }
        let grads = base.backward(&cache, &g, &refs, GradRequest::LORA)?;
        for ((adapter, _), (opt, g)) in pairs.iter_mut().zip(opts.iter_mut().zip(grads.lora)) {
            opt.lr = cosine_lr(config.lr, step, config.steps);
            opt.step(&mut adapter.params_mut(), &g)?;
            if !adapter.is_finite() {
                return Err(Error::Diverged {
                    step,
                    what: format!("adapter {}", adapter.name()),
                });
            }
        }
    }
    merge_adapters(base, pairs)
}

/// Key adapter at `gamma` plus the given extra adapters at their coefficients.
pub fn fusion_attack(base: &Denoiser, key: &LoraAdapter, gamma: f64, extras: &[(LoraAdapter, f64)]) -> Result<MergedModel> {
    let mut pairs = vec![(key.clone(), gamma)];
    pairs.extend(extras.iter().cloned());
    merge_adapters(base, pairs)
}

/// Prune every attached adapter by the same fraction.
pub fn prune_attack(model: &MergedModel, fraction: f64) -> Result<MergedModel> {
    let pairs = model
        .pairs()
        .iter()
        .map(|(a, c)| Ok((prune_adapter(a, fraction)?, *c)))
        .collect::<Result<Vec<_>>>()?;
    merge_adapters(model.base(), pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub name: String,
    pub params: String,
    pub bit_accuracy: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub x: f64,
    pub bit_accuracy: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackCurve {
    /// `prune`, `finetune` or `fusion`; `x` is the fraction, steps or count.
    pub name: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub n_images: usize,
    pub message_len: usize,
    pub target_fpr: f64,
    pub tau: usize,
    pub rows: Vec<AttackRow>,
    /// Mean over the non-identity rows.
    pub average: Option<AttackRow>,
    /// Unwatermarked control; its TPR is the empirical false-positive rate.
    pub control: Option<AttackRow>,
    pub curves: Vec<AttackCurve>,
}

impl AttackReport {
    pub fn row(&self, name: &str) -> Option<&AttackRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Distortion matrix: one row per attack, then average and control.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("distortion,params,bit_accuracy,tpr\n");
        let extra = self.average.iter().chain(&self.control);
        for r in self.rows.iter().chain(extra) {
            out.push_str(&format!("{},{},{},{}\n", r.name, r.params, r.bit_accuracy, r.tpr));
        }
        out
    }

    /// Parameter-attack curves as `curve,x,bit_accuracy,tpr`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("curve,x,bit_accuracy,tpr\n");
        for c in &self.curves {
            for p in &c.points {
                out.push_str(&format!("{},{},{},{}\n", c.name, p.x, p.bit_accuracy, p.tpr));
            }
        }
        out
    }
}

/// Generate `n_images` once, then score each attack against the policy.
pub fn run_robustness_suite(
    policy: &VerificationPolicy,
    deployment: &Deployment<'_>,
    suite: &[ImageAttack],
    n_images: usize,
    rng: &Rng,
) -> Result<AttackReport> {
    for a in suite {
        a.validate()?;
    }
    let (images, _) = deployment.generate(n_images, &rng.derive("generate"))?;
    let shape = deployment.codec.image_shape();
    let attack_rng = rng.derive("attack");
    let mut rows = Vec::with_capacity(suite.len());
    for a in suite {
        let x = apply_attack_batch(a, shape, &images, &attack_rng)?;
        let r = verify_logits(policy, &deployment.logits(&x)?, None)?;
        rows.push(AttackRow {
            name: a.name().into(),
            params: a.params(),
            bit_accuracy: r.mean_bit_accuracy,
            tpr: r.acceptance_rate,
        });
    }
    let attacked: Vec<&AttackRow> = rows.iter().filter(|r| r.name != "identity").collect();
    let average = (!attacked.is_empty()).then(|| {
        let n = attacked.len() as f64;
        AttackRow {
            name: "average".into(),
            params: String::new(),
            bit_accuracy: attacked.iter().map(|r| r.bit_accuracy).sum::<f64>() / n,
            tpr: attacked.iter().map(|r| r.tpr).sum::<f64>() / n,
        }
    });
    Ok(AttackReport {
        n_images,
        message_len: policy.message_len,
        target_fpr: policy.target_fpr,
        tau: policy.tau,
        rows,
        average,
        control: None,
        curves: Vec::new(),
    })
}

/// Acceptance statistics of an unwatermarked deployment.
pub fn control_row(policy: &VerificationPolicy, clean: &Deployment<'_>, n_images: usize, rng: &Rng) -> Result<AttackRow> {
    let r = clean.evaluate(policy, n_images, &rng.derive("generate"))?;
    Ok(AttackRow {
        name: "control".into(),
        params: "unwatermarked".into(),
        bit_accuracy: r.mean_bit_accuracy,
        tpr: r.acceptance_rate,
    })
}

/// Score a family of models on a shared generation seed.
pub fn curve<'a, I>(name: &str, policy: &VerificationPolicy, template: &Deployment<'_>, models: I, n_images: usize, rng: &Rng) -> Result<AttackCurve>
where
    I: IntoIterator<Item = (f64, &'a MergedModel)>,
{
    let mut points = Vec::new();
    for (x, m) in models {
        let d = Deployment { model: m, ..*template };
        let r = d.evaluate(policy, n_images, &rng.derive("generate"))?;
        points.push(CurvePoint {
            x,
            bit_accuracy: r.mean_bit_accuracy,
            tpr: r.acceptance_rate,
        });
    }
    Ok(AttackCurve { name: name.into(), points })
}
