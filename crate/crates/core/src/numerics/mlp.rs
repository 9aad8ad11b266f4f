//! Fully connected networks with closed-form backward passes and optional
//! low-rank adapter terms on any layer.
//!
//! Each layer computes `act((W₀ + Σ cᵢ·sᵢ·BᵢAᵢ)·x + b)` where `cᵢ` is the
//! deployment coefficient of adapter `i` and `sᵢ` its intrinsic scale. The
//! adapter product is never materialized in the forward pass; the cache keeps
//! `Aᵢ·x` so the backward pass can produce exact gradients for `Aᵢ`, `Bᵢ`,
//! `W₀`, `b` and the input.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::lora::LoraAdapter;

use super::grad::GradVector;
use super::rng::Rng;
use super::tensor::{matmul_acc, matmul_nt, matmul_nt_acc, matmul_tn_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation's output. `relu'(0) = 0`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Invalid(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    /// `[out × in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn new(name: impl Into<String>, weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        let name = name.into();
        if weight.ndim() != 2 {
            return Err(shape_err(format!("layer `{name}` weight must be 2-D")));
        }
        if bias.len() != weight.rows() {
            return Err(shape_err(format!(
                "layer `{name}`: bias has {} entries for {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self {
            name,
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
}

/// Shape of one layer for seeded construction.
#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            name: name.to_string(),
            in_dim,
            out_dim,
            activation,
        }
    }
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(shape_err(format!(
                    "layer `{}` outputs {} but `{}` expects {}",
                    pair[0].name,
                    pair[0].out_dim(),
                    pair[1].name,
                    pair[1].in_dim()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if layers[..i].iter().any(|o| o.name == l.name) {
                return Err(Error::Invalid(format!("duplicate layer name `{}`", l.name)));
            }
        }
        Ok(Self { layers })
    }

    /// Gaussian weights with variance `1/in`, zero biases.
    pub fn init(specs: &[LayerSpec], rng: &mut Rng) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|s| {
                let std = 1.0 / (s.in_dim as f64).sqrt();
                Layer::new(
                    s.name.clone(),
                    rng.normal_tensor(&[s.out_dim, s.in_dim], std),
                    Tensor::zeros(&[s.out_dim]),
                    s.activation,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    /// Parameters in declaration order: `weight`, `bias` per layer.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn param_entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push((format!("{}.weight", l.name), &l.weight));
            out.push((format!("{}.bias", l.name), &l.bias));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Check every adapter targets existing layers with matching shapes.
    pub fn check_adapters(&self, lora: &[(&LoraAdapter, f64)]) -> Result<()> {
        for (adapter, _) in lora {
            for entry in adapter.layers() {
                let layer = self
                    .layer(&entry.layer)
                    .ok_or_else(|| Error::UnknownLayer(entry.layer.clone()))?;
                if entry.a.cols() != layer.in_dim() || entry.b.rows() != layer.out_dim() {
                    return Err(shape_err(format!(
                        "adapter `{}` on `{}`: A is {:?}, B is {:?}, layer is {}x{}",
                        adapter.name(),
                        entry.layer,
                        entry.a.shape(),
                        entry.b.shape(),
                        layer.out_dim(),
                        layer.in_dim()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Activation record of one forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    /// Input to every layer, `[n × in]`.
    inputs: Vec<Tensor>,
    /// Post-activation output of every layer, `[n × out]`.
    outputs: Vec<Tensor>,
    /// `A·x` for every (layer, adapter) pair that has a term on that layer.
    low_rank: Vec<Vec<Option<Tensor>>>,
    fingerprint: Fingerprint,
    input_was_vector: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Fingerprint {
    layers: Vec<(usize, usize)>,
    adapters: Vec<Vec<Option<usize>>>,
}

fn fingerprint(params: &MlpParams, lora: &[(&LoraAdapter, f64)]) -> Fingerprint {
    Fingerprint {
        layers: params.layers.iter().map(|l| (l.out_dim(), l.in_dim())).collect(),
        adapters: lora
            .iter()
            .map(|(a, _)| {
                params
                    .layers
                    .iter()
                    .map(|l| a.layer(&l.name).map(|e| e.a.rows()))
                    .collect()
            })
            .collect(),
    }
}

impl MlpCache {
    pub fn output(&self) -> &Tensor {
        self.outputs.last().expect("non-empty")
    }

    pub fn layer_output(&self, i: usize) -> &Tensor {
        &self.outputs[i]
    }
}

/// Forward pass. `x` may be a single vector `[in]` or a batch `[n × in]`.
pub fn mlp_forward(params: &MlpParams, x: &Tensor, lora: &[(&LoraAdapter, f64)]) -> Result<(Tensor, MlpCache)> {
    if x.cols() != params.in_dim() {
        return Err(shape_err(format!(
            "network expects inputs of width {}, got {:?}",
            params.in_dim(),
            x.shape()
        )));
    }
    params.check_adapters(lora)?;
    let input_was_vector = x.ndim() == 1;
    let mut h = x.clone().as_matrix();
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut outputs = Vec::with_capacity(params.layers.len());
    let mut low_rank = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let mut pre = matmul_nt(&h, &layer.weight)?;
        pre.add_row(layer.bias.data())?;
        let mut terms = Vec::with_capacity(lora.len());
        for (adapter, coef) in lora {
            match adapter.layer(&layer.name) {
                Some(entry) => {
                    let ax = matmul_nt(&h, &entry.a)?;
                    matmul_nt_acc(coef * adapter.scale(), &ax, &entry.b, &mut pre)?;
                    terms.push(Some(ax));
                }
                None => terms.push(None),
            }
        }
        let act = layer.activation;
        let out = pre.map(|v| act.apply(v));
        inputs.push(h);
        h = out.clone();
        outputs.push(out);
        low_rank.push(terms);
    }
    h.ensure_finite("mlp forward")?;
    let y = if input_was_vector {
        Tensor::vector(h.into_data())
    } else {
        h
    };
    Ok((
        y,
        MlpCache {
            inputs,
            outputs,
            low_rank,
            fingerprint: fingerprint(params, lora),
            input_was_vector,
        },
    ))
}

/// Which gradients the backward pass should materialize.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradRequest {
    pub params: bool,
    pub lora: bool,
}

impl GradRequest {
    pub const ALL: GradRequest = GradRequest { params: true, lora: true };
    pub const PARAMS: GradRequest = GradRequest { params: true, lora: false };
    pub const LORA: GradRequest = GradRequest { params: false, lora: true };
    pub const INPUT: GradRequest = GradRequest { params: false, lora: false };
}

#[derive(Clone, Debug)]
pub struct MlpGrads {
    /// `{layer}.weight`, `{layer}.bias` in declaration order, when requested.
    pub params: Option<GradVector>,
    /// One vector per adapter, laid out like [`LoraAdapter::grad_layout`].
    pub lora: Vec<GradVector>,
    pub input: Tensor,
}

pub fn mlp_backward(
    cache: &MlpCache,
    upstream: &Tensor,
    params: &MlpParams,
    lora: &[(&LoraAdapter, f64)],
    want: GradRequest,
) -> Result<MlpGrads> {
    if cache.fingerprint != fingerprint(params, lora) {
        return Err(Error::StaleCache(
            "network or adapter set differs from the forward call".into(),
        ));
    }
    let out = cache.output();
    if upstream.len() != out.len() || upstream.cols() != out.cols() {
        return Err(shape_err(format!(
            "upstream gradient {:?} does not match network output {:?}",
            upstream.shape(),
            out.shape()
        )));
    }
    let nl = params.layers.len();
    let mut param_grads: Vec<(Tensor, Tensor)> = Vec::new();
    let mut lora_grads: Vec<Vec<Option<(Tensor, Tensor)>>> = vec![vec![None; nl]; lora.len()];
    let mut g = upstream.clone().as_matrix();
    for li in (0..nl).rev() {
        let layer = &params.layers[li];
        let x = &cache.inputs[li];
        let y = &cache.outputs[li];
        let act = layer.activation;
        if act != Activation::Identity {
            for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
                *gv *= act.derivative_from_output(yv);
            }
        }
        let g_pre = g;
        if want.params {
            let mut gw = Tensor::zeros(&[layer.out_dim(), layer.in_dim()]);
            matmul_tn_acc(1.0, &g_pre, x, &mut gw)?;
            param_grads.push((gw, g_pre.sum_rows()));
        }
        let mut gx = Tensor::zeros(&[x.rows(), x.cols()]);
        matmul_acc(1.0, &g_pre, &layer.weight, &mut gx)?;
        for (ai, (adapter, coef)) in lora.iter().enumerate() {
            let Some(entry) = adapter.layer(&layer.name) else {
                continue;
            };
            let c = coef * adapter.scale();
            let ax = cache.low_rank[li][ai]
                .as_ref()
                .ok_or_else(|| Error::StaleCache("missing low-rank activation".into()))?;
            // v = g_pre · B, shape [n × r]
            let mut v = Tensor::zeros(&[g_pre.rows(), entry.b.cols()]);
            matmul_acc(1.0, &g_pre, &entry.b, &mut v)?;
            if want.lora {
                let mut gb = Tensor::zeros(entry.b.shape());
                matmul_tn_acc(c, &g_pre, ax, &mut gb)?;
                let mut ga = Tensor::zeros(entry.a.shape());
                matmul_tn_acc(c, &v, x, &mut ga)?;
                lora_grads[ai][li] = Some((ga, gb));
            }
            matmul_acc(c, &v, &entry.a, &mut gx)?;
        }
        g = gx;
    }
    let params_gv = if want.params {
        param_grads.reverse();
        let mut gv = GradVector::new();
        for (layer, (gw, gb)) in params.layers.iter().zip(param_grads) {
            gv.push(format!("{}.weight", layer.name), gw)?;
            gv.push(format!("{}.bias", layer.name), gb)?;
        }
        Some(gv)
    } else {
        None
    };
    let mut lora_out = Vec::new();
    if want.lora {
        for (ai, (adapter, _)) in lora.iter().enumerate() {
            let mut gv = GradVector::new();
            for entry in adapter.layers() {
                let li = params
                    .layers
                    .iter()
                    .position(|l| l.name == entry.layer)
                    .ok_or_else(|| Error::UnknownLayer(entry.layer.clone()))?;
                let (ga, gb) = lora_grads[ai][li]
                    .take()
                    .ok_or_else(|| Error::StaleCache("adapter gradient missing".into()))?;
                gv.push(format!("{}.A", entry.layer), ga)?;
                gv.push(format!("{}.B", entry.layer), gb)?;
            }
            lora_out.push(gv);
        }
    }
    let input = if cache.input_was_vector {
        Tensor::vector(g.into_data())
    } else {
        g
    };
    Ok(MlpGrads {
        params: params_gv,
        lora: lora_out,
        input,
    })
}
