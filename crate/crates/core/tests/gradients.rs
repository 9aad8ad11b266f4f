//! Central-difference checks of every hand-written backward pass.

use lorakey::diffusion::{Denoiser, DenoiserConfig, NoiseSchedule, DENOISER_LAYERS};
use lorakey::lora::{init_lora, AdapterRole, LoraAdapter};
use lorakey::numerics::{
    grad_check, loss_mse, mlp_backward, mlp_forward, Activation, GradCheckOptions, GradRequest, LayerSpec, MlpParams,
    Rng, Tensor,
};
use lorakey::stage1::{prior_loss, Distortion, Message, MessageEncoder, PriorContext, WatermarkDecoder};
use lorakey::stage2::{semantic_consistency_loss, watermark_consistency_loss, KeyBatch, KeyContext};
use lorakey::world::{build_codec, CodecConfig, ImageShape, PerceptionConfig, PerceptionNet, SyntheticWorld, WorldConfig};

const TOL: f64 = 1e-4;

fn opts() -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-6,
        samples: Some(200),
    }
}

fn flat(ts: Vec<&mut Tensor>) -> Vec<f64> {
    ts.into_iter().flat_map(|t| t.data().to_vec()).collect()
}

fn set_flat(ts: Vec<&mut Tensor>, v: &[f64]) {
    let mut k = 0;
    for t in ts {
        let n = t.len();
        t.data_mut().copy_from_slice(&v[k..k + n]);
        k += n;
    }
    assert_eq!(k, v.len());
}

/// An adapter with both factors nonzero so every path carries gradient.
fn live_adapter(host: &MlpParams, targets: &[&str], rank: usize, seed: u64) -> LoraAdapter {
    let targets: Vec<String> = targets.iter().map(|s| s.to_string()).collect();
    let mut a = init_lora(host, &targets, rank, 0.7, AdapterRole::Other, "t", &mut Rng::new(seed, "a")).unwrap();
    let mut rng = Rng::new(seed, "b");
    for p in a.params_mut() {
        for v in p.data_mut() {
            *v += rng.normal() * 0.3;
        }
    }
    a
}

fn small_mlp(seed: u64) -> MlpParams {
    MlpParams::init(
        &[
            LayerSpec::new("h1", 5, 7, Activation::Tanh),
            LayerSpec::new("h2", 7, 6, Activation::Relu),
            LayerSpec::new("out", 6, 3, Activation::Identity),
        ],
        &mut Rng::new(seed, "mlp"),
    )
    .unwrap()
}

#[test]
fn mlp_parameter_and_input_gradients() {
    let params = small_mlp(1);
    let x = Rng::new(2, "x").normal_tensor(&[4, 5], 1.0);
    let y = Rng::new(3, "y").normal_tensor(&[4, 3], 1.0);
    let x0 = x.data().to_vec();
    let report = grad_check(
        |v| {
            let mut p = params.clone();
            set_flat(p.params_mut(), v);
            let (out, cache) = mlp_forward(&p, &x, &[])?;
            let (l, g) = loss_mse(&out, &y)?;
            let grads = mlp_backward(&cache, &g, &p, &[], GradRequest::PARAMS)?;
            Ok((l, grads.params.unwrap().flatten().into_data()))
        },
        &flat(params.clone().params_mut()),
        &mut Rng::new(4, "gc"),
        opts(),
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");

    let report = grad_check(
        |v| {
            let xi = Tensor::matrix(4, 5, v.to_vec())?;
            let (out, cache) = mlp_forward(&params, &xi, &[])?;
            let (l, g) = loss_mse(&out, &y)?;
            let grads = mlp_backward(&cache, &g, &params, &[], GradRequest::INPUT)?;
            Ok((l, grads.input.into_data()))
        },
        &x0,
        &mut Rng::new(5, "gc"),
        opts(),
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn lora_factor_gradients_with_two_adapters() {
    let params = small_mlp(6);
    let a1 = live_adapter(&params, &["h1", "out"], 2, 7);
    let a2 = live_adapter(&params, &["h2"], 3, 8);
    let x = Rng::new(9, "x").normal_tensor(&[3, 5], 1.0);
    let y = Rng::new(10, "y").normal_tensor(&[3, 3], 1.0);
    let report = grad_check(
        |v| {
            let mut a = a1.clone();
            set_flat(a.params_mut(), v);
            let ads = [(&a, 0.8), (&a2, 1.3)];
            let (out, cache) = mlp_forward(&params, &x, &ads)?;
            let (l, g) = loss_mse(&out, &y)?;
            let grads = mlp_backward(&cache, &g, &params, &ads, GradRequest::LORA)?;
            Ok((l, grads.lora[0].flatten().into_data()))
        },
        &flat(a1.clone().params_mut()),
        &mut Rng::new(11, "gc"),
        opts(),
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}

struct Lab {
    world: SyntheticWorld,
    codec: lorakey::world::LatentCodec,
    perception: PerceptionNet,
    schedule: NoiseSchedule,
    base: Denoiser,
}

fn lab() -> Lab {
    let image = ImageShape::new(1, 4, 4);
    let world = SyntheticWorld::generate(
        1,
        &WorldConfig {
            num_classes: 2,
            latent_dim: 6,
            ..WorldConfig::default()
        },
    )
    .unwrap();
    let codec = build_codec(
        2,
        CodecConfig {
            image,
            latent_dim: 6,
            ..CodecConfig::default()
        },
    )
    .unwrap();
    let perception = PerceptionNet::build(
        3,
        image,
        &PerceptionConfig {
            hidden: 10,
            features: 5,
            ..PerceptionConfig::default()
        },
    )
    .unwrap();
    let schedule = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
    let base = Denoiser::init(
        &DenoiserConfig {
            hidden: 16,
            time_dim: 4,
            class_dim: 3,
        },
        6,
        2,
        20,
        &mut Rng::new(4, "den"),
    )
    .unwrap();
    Lab {
        world,
        codec,
        perception,
        schedule,
        base,
    }
}

#[test]
fn prior_loss_encoder_and_decoder_gradients() {
    let lab = lab();
    let mut encoder = MessageEncoder::init(5, 8, 6, 1.0, &mut Rng::new(5, "enc")).unwrap();
    let mut ep = encoder.params().clone();
    let mut rng = Rng::new(6, "perturb");
    for p in ep.params_mut() {
        for v in p.data_mut() {
            *v += rng.normal() * 0.2;
        }
    }
    encoder = MessageEncoder::from_params(ep, encoder.gain()).unwrap();
    let decoder = WatermarkDecoder::init(6, 9, 5, &mut Rng::new(7, "dec")).unwrap();
    let ctx = PriorContext {
        codec: &lab.codec,
        perception: &lab.perception,
        lambda_mse: 1.0,
        lambda_feat: 0.5,
    };
    let mut r = Rng::new(8, "data");
    let z = lab.world.sample_latents(&[0, 1, 1], &mut r).unwrap();
    let msgs: Vec<Message> = (0..3).map(|_| Message::random(5, &mut r).unwrap()).collect();
    // Noise and quantization clamp with a straight-through backward, so only
    // the exact distortions are checked here.
    let kinds = [Distortion::Identity, Distortion::Mask(0.25), Distortion::Mask(0.5)];

    let report = grad_check(
        |v| {
            let mut p = encoder.params().clone();
            set_flat(p.params_mut(), v);
            let e = MessageEncoder::from_params(p, encoder.gain())?;
            let s = prior_loss(&ctx, &e, &decoder, &z, &msgs, &kinds, &mut Rng::new(9, "dist"))?;
            Ok((s.total, s.encoder_grad.flatten().into_data()))
        },
        &flat(encoder.params().clone().params_mut()),
        &mut Rng::new(10, "gc"),
        opts(),
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");

    let report = grad_check(
        |v| {
            let mut p = decoder.params().clone();
            set_flat(p.params_mut(), v);
            let d = WatermarkDecoder::from_params(p);
            let s = prior_loss(&ctx, &encoder, &d, &z, &msgs, &kinds, &mut Rng::new(9, "dist"))?;
            Ok((s.total, s.decoder_grad.flatten().into_data()))
        },
        &flat(decoder.params().clone().params_mut()),
        &mut Rng::new(11, "gc"),
        opts(),
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn stage2_watermark_and_semantic_gradients() {
    let lab = lab();
    let mut ep = MessageEncoder::init(5, 8, 6, 1.0, &mut Rng::new(5, "enc")).unwrap().params().clone();
    let mut rng = Rng::new(6, "perturb");
    for p in ep.params_mut() {
        for v in p.data_mut() {
            *v += rng.normal() * 0.2;
        }
    }
    let encoder = MessageEncoder::from_params(ep, 1.0).unwrap();
    let message: Message = "10110".parse().unwrap();
    let ctx = KeyContext::new(&lab.base, &lab.codec, &lab.perception, &lab.schedule, &encoder, &message).unwrap();
    let key = live_adapter(lab.base.mlp(), &DENOISER_LAYERS, 2, 12);
    let mut batch = KeyBatch::sample(&lab.world, &lab.schedule, 4, 0.0, &mut Rng::new(13, "b")).unwrap();
    // Keep the clean-latent estimate well conditioned.
    batch.t = vec![2, 5, 9, 14];
    let x0 = flat(key.clone().params_mut());

    let report = grad_check(
        |v| {
            let mut k = key.clone();
            set_flat(k.params_mut(), v);
            let (l, g, _) = watermark_consistency_loss(&ctx, &k, &batch)?;
            Ok((l, g.flatten().into_data()))
        },
        &x0,
        &mut Rng::new(14, "gc"),
        opts(),
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");

    let report = grad_check(
        |v| {
            let mut k = key.clone();
            set_flat(k.params_mut(), v);
            let (_, _, fwd) = watermark_consistency_loss(&ctx, &k, &batch)?;
            let (l, g) = semantic_consistency_loss(&ctx, &k, &batch, &fwd)?;
            Ok((l, g.flatten().into_data()))
        },
        &x0,
        &mut Rng::new(15, "gc"),
        opts(),
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}
