//! Rendering images from a deployed model and measuring what the private
//! decoder recovers from them.

use crate::diffusion::{sample, NoisePredictor, NoiseSchedule, SamplerConfig};
use crate::error::Result;
use crate::numerics::{Rng, Tensor};
use crate::stage1::{extract_logits, WatermarkDecoder};
use crate::verify::{verify_logits, VerificationPolicy, VerificationReport};
use crate::world::LatentCodec;

/// Everything needed to turn a model into images and images into bits.
#[derive(Clone, Copy)]
pub struct Deployment<'a> {
    pub model: &'a dyn NoisePredictor,
    pub schedule: &'a NoiseSchedule,
    pub codec: &'a LatentCodec,
    pub decoder: &'a WatermarkDecoder,
    pub sampler: &'a SamplerConfig,
}

/// Uniform class labels for `n` generations.
pub fn draw_classes(num_classes: usize, n: usize, rng: &Rng) -> Vec<usize> {
    let mut r = rng.derive("classes");
    (0..n).map(|_| r.below(num_classes)).collect()
}

/// Decode latents and clamp to the displayable range `[0, 1]`.
pub fn render(codec: &LatentCodec, z: &Tensor) -> Result<Tensor> {
    Ok(codec.decode(z)?.map(|v| v.clamp(0.0, 1.0)))
}

impl Deployment<'_> {
    /// `n` rendered images `[n × D_img]` and their class labels. The same
    /// `rng` gives the same labels and noise for any model.
    pub fn generate(&self, n: usize, rng: &Rng) -> Result<(Tensor, Vec<usize>)> {
        let classes = draw_classes(self.model.num_classes(), n, rng);
        let z = sample(self.model, self.schedule, &classes, &rng.derive("sample"), self.sampler)?;
        Ok((render(self.codec, &z)?, classes))
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        extract_logits(self.decoder, self.codec, images)
    }

    /// Generate `n` images and verify them against `policy`.
    pub fn evaluate(&self, policy: &VerificationPolicy, n: usize, rng: &Rng) -> Result<VerificationReport> {
        let (x, _) = self.generate(n, rng)?;
        verify_logits(policy, &self.logits(&x)?, None)
    }
}
