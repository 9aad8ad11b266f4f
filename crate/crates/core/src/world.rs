//! The frozen environment: a linear latent codec, a class-conditional
//! Gaussian world and a fixed feature extractor.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{
    matmul, matmul_nt, mlp_backward, mlp_forward, Activation, GradRequest, Layer, MlpCache, MlpParams, Rng, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

impl Default for ImageShape {
    fn default() -> Self {
        Self::new(3, 16, 16)
    }
}

/// How the codec's column space is chosen before orthonormalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum CodecBasis {
    /// Orthonormalized seeded Gaussian matrix.
    Gaussian,
    /// Seeded rotation of the lowest-frequency non-constant per-channel DCT
    /// images. Columns are smooth and zero-mean, so blur, resampling and
    /// global intensity changes barely touch the latent.
    LowFrequency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub image: ImageShape,
    pub latent_dim: usize,
    pub basis: CodecBasis,
    /// Pixel value that the zero latent decodes to.
    pub offset: f64,
    /// Pixel-space amplitude per unit of latent.
    pub gain: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            image: ImageShape::default(),
            latent_dim: 64,
            basis: CodecBasis::LowFrequency,
            offset: 0.5,
            gain: 0.2,
        }
    }
}

impl CodecConfig {
    /// Pure orthonormal map `x = V·z` with a Gaussian basis.
    pub fn linear(image: ImageShape, latent_dim: usize) -> Self {
        Self {
            image,
            latent_dim,
            basis: CodecBasis::Gaussian,
            offset: 0.0,
            gain: 1.0,
        }
    }
}

/// `decode(z) = offset + gain·V·z`, `encode(x) = Vᵀ(x − offset)/gain` with
/// `V` having orthonormal columns. Batches are `[n × D]` row matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodec {
    config: CodecConfig,
    seed: u64,
    /// `[D_img × D_z]`
    v: Tensor,
}

/// In-place modified Gram-Schmidt with one re-orthogonalization pass.
fn orthonormalize_columns(m: &mut Tensor) -> Result<()> {
    let (rows, cols) = (m.rows(), m.cols());
    let mut colv: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| m.data()[i * cols + j]).collect())
        .collect();
    for j in 0..cols {
        for _ in 0..2 {
            for k in 0..j {
                let d: f64 = colv[j].iter().zip(&colv[k]).map(|(a, b)| a * b).sum();
                let (head, tail) = colv.split_at_mut(j);
                for (x, y) in tail[0].iter_mut().zip(&head[k]) {
                    *x -= d * y;
                }
            }
        }
        let n = colv[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < 1e-10 {
            return Err(Error::Invalid("codec basis is rank deficient".into()));
        }
        colv[j].iter_mut().for_each(|v| *v /= n);
    }
    let d = m.data_mut();
    for (j, c) in colv.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            d[i * cols + j] = *v;
        }
    }
    Ok(())
}

/// First `k` orthonormal per-channel DCT-II images, ordered by total
/// frequency and with the constant images last.
fn low_frequency_basis(shape: ImageShape, k: usize) -> Tensor {
    let (c, h, w) = (shape.channels, shape.height, shape.width);
    let mut order: Vec<(usize, usize, usize, usize, usize)> = Vec::with_capacity(shape.numel());
    for u in 0..h {
        for v in 0..w {
            for ch in 0..c {
                let dc = usize::from(u == 0 && v == 0);
                order.push((dc, u + v, u.max(v), ch, u * w + v));
            }
        }
    }
    order.sort();
    let norm = |k: usize, n: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
    let mut p = Tensor::zeros(&[shape.numel(), k]);
    let d = p.data_mut();
    for (col, &(_, _, _, ch, uv)) in order.iter().take(k).enumerate() {
        let (u, v) = (uv / w, uv % w);
        for i in 0..h {
            let cu = norm(u, h) * (std::f64::consts::PI * (2 * i + 1) as f64 * u as f64 / (2 * h) as f64).cos();
            for j in 0..w {
                let cv = norm(v, w) * (std::f64::consts::PI * (2 * j + 1) as f64 * v as f64 / (2 * w) as f64).cos();
                d[(ch * h * w + i * w + j) * k + col] = cu * cv;
            }
        }
    }
    p
}

pub fn build_codec(seed: u64, config: CodecConfig) -> Result<LatentCodec> {
    let d_img = config.image.numel();
    let k = config.latent_dim;
    if k == 0 || k > d_img {
        return Err(Error::Invalid(format!("latent_dim {k} must be in [1, {d_img}]")));
    }
    if !(config.gain.is_finite() && config.gain > 0.0 && config.offset.is_finite()) {
        return Err(Error::Invalid("codec gain must be positive and offset finite".into()));
    }
    let mut rng = Rng::new(seed, "codec");
    let mut v = match config.basis {
        CodecBasis::Gaussian => rng.normal_tensor(&[d_img, k], 1.0),
        CodecBasis::LowFrequency => {
            let g = rng.normal_tensor(&[k, k], 1.0);
            matmul(&low_frequency_basis(config.image, k), &g)?
        }
    };
    orthonormalize_columns(&mut v)?;
    Ok(LatentCodec { config, seed, v })
}

impl LatentCodec {
    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn basis(&self) -> &Tensor {
        &self.v
    }

    pub fn image_shape(&self) -> ImageShape {
        self.config.image
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn image_dim(&self) -> usize {
        self.config.image.numel()
    }

    /// Images `[n × D_img]` (or one `[C,H,W]` / `[D_img]` image) to latents.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        if x.len() % self.image_dim() != 0 || x.is_empty() {
            return Err(shape_err(format!("image of {:?} does not match codec", x.shape())));
        }
        if x.ndim() == 2 && x.cols() != self.image_dim() {
            return Err(shape_err(format!("image batch {:?} does not match codec", x.shape())));
        }
        let single = x.ndim() != 2;
        let n = x.len() / self.image_dim();
        let centred = Tensor::new(vec![n, self.image_dim()], x.data().iter().map(|v| v - self.config.offset).collect())?;
        let z = matmul(&centred, &self.v)?.scale(1.0 / self.config.gain);
        Ok(if single { z.flatten() } else { z })
    }

    /// Latents `[n × D_z]` to flattened images `[n × D_img]`; a single
    /// latent vector decodes to a `[C,H,W]` image.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.cols() != self.latent_dim() {
            return Err(shape_err(format!("latent {:?} does not match codec", z.shape())));
        }
        let single = z.ndim() == 1;
        let mut x = matmul_nt(&z.clone().as_matrix(), &self.v)?;
        let (g, o) = (self.config.gain, self.config.offset);
        x.data_mut().iter_mut().for_each(|v| *v = o + g * *v);
        if single {
            x.reshape(self.config.image.dims().to_vec())
        } else {
            Ok(x)
        }
    }

    /// Gradient of a loss wrt `z` given its gradient wrt `decode(z)`.
    pub fn decode_backward(&self, grad_x: &Tensor) -> Result<Tensor> {
        let n = grad_x.len() / self.image_dim();
        let g = grad_x.clone().reshape(vec![n, self.image_dim()])?;
        Ok(matmul(&g, &self.v)?.scale(self.config.gain))
    }

    /// Gradient wrt the image given the gradient wrt `encode(x)`.
    pub fn encode_backward(&self, grad_z: &Tensor) -> Result<Tensor> {
        Ok(matmul_nt(&grad_z.clone().as_matrix(), &self.v)?.scale(1.0 / self.config.gain))
    }
}

/// A labelled batch drawn from the world.
#[derive(Clone, Debug)]
pub struct WorldBatch {
    /// `[n × D_z]`
    pub z0: Tensor,
    /// `[n × D_img]`
    pub x: Tensor,
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub num_classes: usize,
    pub latent_dim: usize,
    /// Class means are drawn from `N(0, mean_std²·I)`.
    pub mean_std: f64,
    pub var_min: f64,
    pub var_max: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            latent_dim: 64,
            mean_std: 2.0,
            var_min: 0.25,
            var_max: 1.0,
        }
    }
}

/// Mixture of diagonal Gaussians over latents, one component per class.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    /// `[K × D_z]`
    means: Tensor,
    /// `[K × D_z]` diagonal variances.
    vars: Tensor,
    weights: Vec<f64>,
    seed: u64,
}

impl SyntheticWorld {
    pub fn generate(seed: u64, config: &WorldConfig) -> Result<Self> {
        if config.num_classes == 0 || config.latent_dim == 0 {
            return Err(Error::Invalid("world needs at least one class and one dimension".into()));
        }
        if !(config.var_min > 0.0 && config.var_max >= config.var_min) {
            return Err(Error::Invalid("world variances must satisfy 0 < min ≤ max".into()));
        }
        let rng = Rng::new(seed, "world");
        let (k, d) = (config.num_classes, config.latent_dim);
        let means = rng.derive("means").normal_tensor(&[k, d], config.mean_std);
        let mut vr = rng.derive("vars");
        let vars = Tensor::new(
            vec![k, d],
            (0..k * d).map(|_| vr.uniform_range(config.var_min, config.var_max)).collect(),
        )?;
        Self::new(means, vars, vec![1.0 / k as f64; k], seed)
    }

    pub fn new(means: Tensor, vars: Tensor, weights: Vec<f64>, seed: u64) -> Result<Self> {
        if means.ndim() != 2 || means.shape() != vars.shape() || weights.len() != means.rows() {
            return Err(shape_err("world means, variances and weights disagree"));
        }
        if vars.data().iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Invalid("world variances must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid("mixture weights must be non-negative and sum to 1".into()));
        }
        means.ensure_finite("world means")?;
        Ok(Self {
            means,
            vars,
            weights,
            seed,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.means.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.means.cols()
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        self.means.row(c)
    }

    pub fn var(&self, c: usize) -> &[f64] {
        self.vars.row(c)
    }

    pub fn means(&self) -> &Tensor {
        &self.means
    }

    pub fn vars(&self) -> &Tensor {
        &self.vars
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn check_class(&self, c: usize) -> Result<()> {
        if c >= self.num_classes() {
            return Err(Error::Invalid(format!("class {c} out of range 0..{}", self.num_classes())));
        }
        Ok(())
    }

    /// Latents for the given class labels.
    pub fn sample_latents(&self, classes: &[usize], rng: &mut Rng) -> Result<Tensor> {
        let d = self.latent_dim();
        let mut z = Tensor::zeros(&[classes.len(), d]);
        for (i, &c) in classes.iter().enumerate() {
            self.check_class(c)?;
            let (mu, var) = (self.mean(c), self.var(c));
            for (j, out) in z.row_mut(i).iter_mut().enumerate() {
                *out = mu[j] + var[j].sqrt() * rng.normal();
            }
        }
        Ok(z)
    }

    /// Class labels drawn from the mixture weights.
    pub fn sample_classes(&self, n: usize, rng: &mut Rng) -> Vec<usize> {
        (0..n)
            .map(|_| {
                let u = rng.uniform();
                let mut acc = 0.0;
                for (c, w) in self.weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        return c;
                    }
                }
                self.weights.len() - 1
            })
            .collect()
    }

    pub fn sample(&self, codec: &LatentCodec, class: usize, rng: &mut Rng, n: usize) -> Result<WorldBatch> {
        self.check_class(class)?;
        let classes = vec![class; n];
        let z0 = self.sample_latents(&classes, rng)?;
        let x = codec.decode(&z0)?;
        Ok(WorldBatch { z0, x, classes })
    }

    pub fn sample_mixed(&self, codec: &LatentCodec, rng: &mut Rng, n: usize) -> Result<WorldBatch> {
        let classes = self.sample_classes(n, rng);
        let z0 = self.sample_latents(&classes, rng)?;
        let x = codec.decode(&z0)?;
        Ok(WorldBatch { z0, x, classes })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionConfig {
    pub hidden: usize,
    pub features: usize,
    /// Multiplier on the `N(0, 1/in)` first-layer weights.
    pub input_scale: f64,
    /// Pixel value that maps to zero pre-activation.
    pub centre: f64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            features: 64,
            input_scale: 6.0,
            centre: 0.5,
        }
    }
}

/// Frozen two-layer tanh feature extractor over flattened images.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionNet {
    params: MlpParams,
}

impl PerceptionNet {
    pub fn build(seed: u64, image: ImageShape, config: &PerceptionConfig) -> Result<Self> {
        let d = image.numel();
        let rng = Rng::new(seed, "perception");
        let w1 = rng.derive("w1").normal_tensor(&[config.hidden, d], config.input_scale / (d as f64).sqrt());
        let mut b1 = rng.derive("b1").normal_tensor(&[config.hidden], 0.1);
        for (i, b) in b1.data_mut().iter_mut().enumerate() {
            *b -= config.centre * w1.row(i).iter().sum::<f64>();
        }
        let w2 = rng
            .derive("w2")
            .normal_tensor(&[config.features, config.hidden], 1.0 / (config.hidden as f64).sqrt());
        let b2 = rng.derive("b2").normal_tensor(&[config.features], 0.1);
        Self::from_params(MlpParams::new(vec![
            Layer::new("p1", w1, b1, Activation::Tanh)?,
            Layer::new("p2", w2, b2, Activation::Tanh)?,
        ])?)
    }

    pub fn from_params(params: MlpParams) -> Result<Self> {
        Ok(Self { params })
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn input_dim(&self) -> usize {
        self.params.in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.params.out_dim()
    }

    /// Features of one image (any shape with `D_img` entries) or a batch `[n × D_img]`.
    pub fn perceive(&self, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        let input = if x.ndim() == 2 {
            x.clone()
        } else {
            if x.len() != self.input_dim() {
                return Err(shape_err(format!("image {:?} does not match perception input", x.shape())));
            }
            x.flatten()
        };
        mlp_forward(&self.params, &input, &[])
    }

    /// Gradient wrt the flattened input image(s).
    pub fn backward(&self, cache: &MlpCache, grad_feature: &Tensor) -> Result<Tensor> {
        Ok(mlp_backward(cache, grad_feature, &self.params, &[], GradRequest::INPUT)?.input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> LatentCodec {
        build_codec(42, CodecConfig::linear(ImageShape::new(3, 4, 4), 8)).unwrap()
    }

    #[test]
    fn columns_are_orthonormal_for_both_bases() {
        for basis in [CodecBasis::Gaussian, CodecBasis::LowFrequency] {
            let mut cfg = CodecConfig::default();
            cfg.basis = basis;
            let c = build_codec(42, cfg).unwrap();
            let vtv = crate::numerics::matmul_tn(c.basis(), c.basis()).unwrap();
            let err = vtv.sub(&Tensor::identity(64)).unwrap().max_abs();
            assert!(err <= 1e-10, "{basis:?}: {err}");
        }
    }

    #[test]
    fn low_frequency_columns_are_zero_mean_per_channel() {
        let c = build_codec(1, CodecConfig::default()).unwrap();
        let v = c.basis();
        for j in 0..v.cols() {
            for ch in 0..3 {
                let s: f64 = (0..256).map(|p| v.data()[(ch * 256 + p) * v.cols() + j]).sum();
                assert!(s.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn latent_roundtrip_and_square_case() {
        let c = small();
        let z = Rng::new(1, "z").normal_tensor(&[5, 8], 2.0);
        let back = c.encode(&c.decode(&z).unwrap()).unwrap();
        assert!(back.sub(&z).unwrap().max_abs() < 1e-8);

        let sq = build_codec(3, CodecConfig::linear(ImageShape::new(1, 2, 2), 4)).unwrap();
        let x = Rng::new(2, "x").normal_tensor(&[3, 4], 1.0);
        let xx = sq.decode(&sq.encode(&x).unwrap()).unwrap();
        assert!(xx.sub(&x).unwrap().max_abs() < 1e-8);
        assert!(build_codec(3, CodecConfig::linear(ImageShape::new(1, 2, 2), 5)).is_err());
    }

    #[test]
    fn affine_codec_roundtrip() {
        let c = build_codec(9, CodecConfig::default()).unwrap();
        let z = Rng::new(1, "z").normal_tensor(&[2, 64], 2.0);
        let back = c.encode(&c.decode(&z).unwrap()).unwrap();
        assert!(back.sub(&z).unwrap().max_abs() < 1e-8);
        let single = c.decode(&Tensor::vector(z.row(0).to_vec())).unwrap();
        assert_eq!(single.shape(), &[3, 16, 16]);
    }

    #[test]
    fn rebuilds_are_bitwise_identical() {
        assert_eq!(small(), small());
        let w1 = SyntheticWorld::generate(4, &WorldConfig::default()).unwrap();
        assert_eq!(w1, SyntheticWorld::generate(4, &WorldConfig::default()).unwrap());
    }

    #[test]
    fn world_validation() {
        let w = SyntheticWorld::generate(4, &WorldConfig::default()).unwrap();
        assert!(w.vars().data().iter().all(|v| (0.25..=1.0).contains(v)));
        assert!(w.sample(&build_codec(1, CodecConfig::default()).unwrap(), 4, &mut Rng::new(1, "s"), 1).is_err());
        assert!(SyntheticWorld::new(Tensor::zeros(&[1, 2]), Tensor::zeros(&[1, 2]), vec![1.0], 0).is_err());
        assert!(SyntheticWorld::new(Tensor::zeros(&[1, 2]), Tensor::filled(&[1, 2], 1.0), vec![0.5], 0).is_err());
    }

    #[test]
    fn perception_is_deterministic() {
        let net = PerceptionNet::build(7, ImageShape::new(3, 4, 4), &PerceptionConfig::default()).unwrap();
        let x = Rng::new(3, "x").normal_tensor(&[3, 4, 4], 0.3);
        assert_eq!(net.perceive(&x).unwrap().0, net.perceive(&x).unwrap().0);
        assert_eq!(net.feature_dim(), 64);
    }
}
