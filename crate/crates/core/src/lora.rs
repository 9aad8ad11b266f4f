//! Low-rank adapters: representation, initialization, superposition,
//! pruning, persistence and update-direction diagnostics.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::container::Container;
use crate::diffusion::{Denoiser, NoisePredictor};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{cosine, matmul, GradVector, MlpParams, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterRole {
    Watermark,
    Style,
    Other,
}

/// Factors for one target layer: `ΔW = scale · B · A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub layer: String,
    /// `[r × in]`
    pub a: Tensor,
    /// `[out × r]`
    pub b: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    name: String,
    role: AdapterRole,
    scale: f64,
    layers: Vec<LoraLayer>,
    pub seed: Option<u64>,
    /// Free-form record of how the adapter was made.
    pub config: Value,
}

const FORMAT: &str = "lorakey.adapter";

impl LoraAdapter {
    pub fn from_layers(name: &str, role: AdapterRole, scale: f64, layers: Vec<LoraLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid(format!("adapter `{name}` targets no layers")));
        }
        if !scale.is_finite() {
            return Err(Error::NonFinite(format!("adapter `{name}` scale")));
        }
        let rank = layers[0].a.rows();
        for (i, l) in layers.iter().enumerate() {
            if l.a.ndim() != 2 || l.b.ndim() != 2 {
                return Err(shape_err(format!("adapter `{name}` on `{}`: factors must be 2-D", l.layer)));
            }
            if l.a.rows() != rank || l.b.cols() != rank {
                return Err(shape_err(format!(
                    "adapter `{name}` on `{}`: A is {:?}, B is {:?}, expected rank {rank}",
                    l.layer,
                    l.a.shape(),
                    l.b.shape()
                )));
            }
            if rank == 0 || rank > l.a.cols().min(l.b.rows()) {
                return Err(Error::Invalid(format!(
                    "adapter `{name}` on `{}`: rank {rank} outside [1, {}]",
                    l.layer,
                    l.a.cols().min(l.b.rows())
                )));
            }
            if layers[..i].iter().any(|o| o.layer == l.layer) {
                return Err(Error::Invalid(format!("adapter `{name}` targets `{}` twice", l.layer)));
            }
        }
        Ok(Self {
            name: name.to_string(),
            role,
            scale,
            layers,
            seed: None,
            config: Value::Null,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn role(&self) -> AdapterRole {
        self.role
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rank(&self) -> usize {
        self.layers[0].a.rows()
    }

    pub fn layers(&self) -> &[LoraLayer] {
        &self.layers
    }

    /// Mutable access for tests and attack harnesses; shapes are not rechecked.
    pub fn layers_mut(&mut self) -> &mut [LoraLayer] {
        &mut self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LoraLayer> {
        self.layers.iter().find(|l| l.layer == name)
    }

    pub fn target_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.layer.clone()).collect()
    }

    /// Factors in gradient order: `A`, `B` per layer.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(&mut l.a);
            out.push(&mut l.b);
        }
        out
    }

    /// Zero gradient with the layout produced by the network backward pass.
    pub fn grad_layout(&self) -> GradVector {
        let mut g = GradVector::new();
        for l in &self.layers {
            g.push(format!("{}.A", l.layer), Tensor::zeros(l.a.shape()))
                .expect("layer names are unique");
            g.push(format!("{}.B", l.layer), Tensor::zeros(l.b.shape()))
                .expect("layer names are unique");
        }
        g
    }

    /// Factors as a gradient-shaped vector.
    pub fn factors(&self) -> GradVector {
        let mut g = GradVector::new();
        for l in &self.layers {
            g.push(format!("{}.A", l.layer), l.a.clone()).expect("unique");
            g.push(format!("{}.B", l.layer), l.b.clone()).expect("unique");
        }
        g
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.a.len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.a.is_finite() && l.b.is_finite())
    }

    /// Copy with every factor multiplied so that `ΔW` scales by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.scale *= c;
        out
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(json!({
            "format": FORMAT,
            "name": self.name,
            "role": self.role,
            "scale": self.scale,
            "rank": self.rank(),
            "layers": self.target_names(),
            "seed": self.seed,
            "config": self.config,
        }));
        for l in &self.layers {
            c.push(format!("{}.A", l.layer), &l.a)?;
            c.push(format!("{}.B", l.layer), &l.b)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            format: String,
            name: String,
            role: AdapterRole,
            scale: f64,
            rank: usize,
            layers: Vec<String>,
            seed: Option<u64>,
            config: Value,
        }
        let meta: Meta = serde_json::from_value(c.metadata.clone())
            .map_err(|e| Error::Corrupt(format!("adapter metadata: {e}")))?;
        if meta.format != FORMAT {
            return Err(Error::Corrupt(format!("not an adapter container (format `{}`)", meta.format)));
        }
        let layers = meta
            .layers
            .iter()
            .map(|name| {
                Ok(LoraLayer {
                    layer: name.clone(),
                    a: c.tensor(&format!("{name}.A"))?,
                    b: c.tensor(&format!("{name}.B"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut adapter = Self::from_layers(&meta.name, meta.role, meta.scale, layers)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        if adapter.rank() != meta.rank {
            return Err(Error::Corrupt("rank metadata disagrees with factor shapes".into()));
        }
        if c.tensors().len() != 2 * adapter.layers.len() {
            return Err(Error::Corrupt("container holds tensors not named in metadata".into()));
        }
        adapter.seed = meta.seed;
        adapter.config = meta.config;
        Ok(adapter)
    }
}

/// Fresh adapter on `targets`: `A ~ N(0, 1/in)`, `B = 0`, so `ΔW = 0`.
pub fn init_lora(
    host: &MlpParams,
    targets: &[String],
    rank: usize,
    scale: f64,
    role: AdapterRole,
    name: &str,
    rng: &mut Rng,
) -> Result<LoraAdapter> {
    let mut layers = Vec::with_capacity(targets.len());
    for t in targets {
        let l = host.layer(t).ok_or_else(|| Error::UnknownLayer(t.clone()))?;
        let std = 1.0 / (l.in_dim() as f64).sqrt();
        layers.push(LoraLayer {
            layer: t.clone(),
            a: rng.derive(t).normal_tensor(&[rank, l.in_dim()], std),
            b: Tensor::zeros(&[l.out_dim(), rank]),
        });
    }
    let mut adapter = LoraAdapter::from_layers(name, role, scale, layers)?;
    host.check_adapters(&[(&adapter, 1.0)])?;
    adapter.seed = Some(rng.seed());
    Ok(adapter)
}

/// `scale · B · A` for one targeted layer.
pub fn materialize_delta(adapter: &LoraAdapter, layer: &str) -> Result<Tensor> {
    let l = adapter
        .layer(layer)
        .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
    Ok(matmul(&l.b, &l.a)?.scale(adapter.scale))
}

fn check_same_targets(a: &LoraAdapter, b: &LoraAdapter) -> Result<()> {
    let mut na = a.target_names();
    let mut nb = b.target_names();
    na.sort();
    nb.sort();
    if na != nb {
        return Err(Error::Invalid(format!(
            "adapters `{}` and `{}` target different layers",
            a.name, b.name
        )));
    }
    Ok(())
}

/// Cosine between the materialized deltas, concatenated in `a`'s layer order.
pub fn delta_cosine(a: &LoraAdapter, b: &LoraAdapter) -> Result<f64> {
    check_same_targets(a, b)?;
    let mut va = Vec::new();
    let mut vb = Vec::new();
    for l in &a.layers {
        va.extend_from_slice(materialize_delta(a, &l.layer)?.data());
        vb.extend_from_slice(materialize_delta(b, &l.layer)?.data());
    }
    cosine(&va, &vb)
}

/// Cosine between the raw concatenated factors `[A, B]` per layer.
pub fn factor_cosine(a: &LoraAdapter, b: &LoraAdapter) -> Result<f64> {
    check_same_targets(a, b)?;
    let mut va = Vec::new();
    let mut vb = Vec::new();
    for l in &a.layers {
        let lb = b.layer(&l.layer).expect("checked");
        if l.a.shape() != lb.a.shape() || l.b.shape() != lb.b.shape() {
            return Err(shape_err("factor cosine needs adapters of equal rank"));
        }
        va.extend(l.a.data().iter().map(|v| v * a.scale));
        va.extend_from_slice(l.b.data());
        vb.extend(lb.a.data().iter().map(|v| v * b.scale));
        vb.extend_from_slice(lb.b.data());
    }
    cosine(&va, &vb)
}

/// Zero the `round(p·N)` smallest-magnitude factor entries, ranked globally
/// across every `A` and `B` of the adapter. Ties break by position.
pub fn prune_adapter(adapter: &LoraAdapter, p: f64) -> Result<LoraAdapter> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Invalid(format!("prune fraction {p} outside [0, 1]")));
    }
    let mut out = adapter.clone();
    let mut mags: Vec<(f64, usize, usize)> = Vec::new();
    for (ti, t) in out.params_mut().iter().enumerate() {
        mags.extend(t.data().iter().enumerate().map(|(i, v)| (v.abs(), ti, i)));
    }
    let k = (p * mags.len() as f64).round() as usize;
    mags.sort_by(|x, y| x.0.total_cmp(&y.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut params = out.params_mut();
    for &(_, ti, i) in &mags[..k] {
        params[ti].data_mut()[i] = 0.0;
    }
    Ok(out)
}

pub fn save_adapter(adapter: &LoraAdapter, path: &Path) -> Result<()> {
    adapter.to_container()?.write(path)
}

pub fn load_adapter(path: &Path) -> Result<LoraAdapter> {
    LoraAdapter::from_container(&Container::read(path)?)
}

/// `Θ₀ + Σ cᵢ·ΔΘᵢ`, evaluated lazily through the adapter factors or eagerly
/// by folding the deltas into the base weights.
#[derive(Clone, Debug)]
pub struct MergedModel {
    base: Denoiser,
    pairs: Vec<(LoraAdapter, f64)>,
}

pub fn merge_adapters(base: &Denoiser, pairs: Vec<(LoraAdapter, f64)>) -> Result<MergedModel> {
    let refs: Vec<(&LoraAdapter, f64)> = pairs.iter().map(|(a, c)| (a, *c)).collect();
    base.mlp().check_adapters(&refs)?;
    for (a, c) in &pairs {
        if !c.is_finite() {
            return Err(Error::NonFinite(format!("coefficient for `{}`", a.name)));
        }
    }
    Ok(MergedModel {
        base: base.clone(),
        pairs,
    })
}

impl MergedModel {
    pub fn base(&self) -> &Denoiser {
        &self.base
    }

    pub fn pairs(&self) -> &[(LoraAdapter, f64)] {
        &self.pairs
    }

    pub fn pair_refs(&self) -> Vec<(&LoraAdapter, f64)> {
        self.pairs.iter().map(|(a, c)| (a, *c)).collect()
    }

    /// Add one more adapter to the superposition.
    pub fn with(&self, adapter: LoraAdapter, coef: f64) -> Result<MergedModel> {
        let mut pairs = self.pairs.clone();
        pairs.push((adapter, coef));
        merge_adapters(&self.base, pairs)
    }

    /// Flat denoiser with `W₀ + Σ cᵢ·sᵢ·BᵢAᵢ` folded into each layer.
    pub fn materialize(&self) -> Result<Denoiser> {
        let mut out = self.base.clone();
        for (adapter, coef) in &self.pairs {
            for l in &adapter.layers {
                let delta = matmul(&l.b, &l.a)?;
                let layer = out
                    .mlp_mut()
                    .layer_mut(&l.layer)
                    .ok_or_else(|| Error::UnknownLayer(l.layer.clone()))?;
                layer.weight.axpy(coef * adapter.scale, &delta)?;
            }
        }
        Ok(out)
    }
}

impl NoisePredictor for MergedModel {
    fn latent_dim(&self) -> usize {
        self.base.latent_dim()
    }

    fn num_classes(&self) -> usize {
        self.base.num_classes()
    }

    fn predict(&self, z_t: &Tensor, t: &[usize], c: &[usize]) -> Result<Tensor> {
        Ok(self.base.predict_eps(&self.pair_refs(), z_t, t, c)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Activation, Layer};

    fn host() -> MlpParams {
        let mut rng = Rng::new(5, "host");
        MlpParams::new(vec![
            Layer::new("l1", rng.normal_tensor(&[6, 4], 0.5), Tensor::zeros(&[6]), Activation::Tanh).unwrap(),
            Layer::new("l2", rng.normal_tensor(&[3, 6], 0.5), Tensor::zeros(&[3]), Activation::Identity).unwrap(),
        ])
        .unwrap()
    }

    fn random_adapter(seed: u64, rank: usize) -> LoraAdapter {
        let h = host();
        let mut rng = Rng::new(seed, "ad");
        let mut a = init_lora(&h, &["l1".into(), "l2".into()], rank, 1.0, AdapterRole::Other, "r", &mut rng).unwrap();
        for l in a.layers_mut() {
            l.b = rng.normal_tensor(l.b.shape(), 1.0);
        }
        a
    }

    #[test]
    fn hand_materialized_delta() {
        let a = LoraAdapter::from_layers(
            "h",
            AdapterRole::Other,
            0.5,
            vec![LoraLayer {
                layer: "fc".into(),
                a: Tensor::matrix(1, 2, vec![0.0, 2.0]).unwrap(),
                b: Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap(),
            }],
        )
        .unwrap();
        assert_eq!(materialize_delta(&a, "fc").unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn fresh_adapter_has_zero_delta_and_replays() {
        let h = host();
        let t = vec!["l1".to_string()];
        let a = init_lora(&h, &t, 2, 1.0, AdapterRole::Watermark, "k", &mut Rng::new(1, "x")).unwrap();
        let b = init_lora(&h, &t, 2, 1.0, AdapterRole::Watermark, "k", &mut Rng::new(1, "x")).unwrap();
        assert_eq!(a, b);
        assert_eq!(materialize_delta(&a, "l1").unwrap().max_abs(), 0.0);
        assert!(init_lora(&h, &t, 5, 1.0, AdapterRole::Other, "k", &mut Rng::new(1, "x")).is_err());
        assert!(matches!(
            init_lora(&h, &["zz".into()], 1, 1.0, AdapterRole::Other, "k", &mut Rng::new(1, "x")),
            Err(Error::UnknownLayer(_))
        ));
    }

    #[test]
    fn prune_hand_example() {
        let a = LoraAdapter::from_layers(
            "p",
            AdapterRole::Other,
            1.0,
            vec![LoraLayer {
                layer: "fc".into(),
                a: Tensor::matrix(1, 2, vec![3.0, -1.0]).unwrap(),
                b: Tensor::matrix(2, 1, vec![0.5, 2.0]).unwrap(),
            }],
        )
        .unwrap();
        let p = prune_adapter(&a, 0.5).unwrap();
        assert_eq!(p.layers()[0].a.data(), &[3.0, 0.0]);
        assert_eq!(p.layers()[0].b.data(), &[0.0, 2.0]);
        assert_eq!(prune_adapter(&a, 0.0).unwrap(), a);
        assert_eq!(prune_adapter(&a, 1.0).unwrap().factors().norm(), 0.0);
        assert!(prune_adapter(&a, 1.5).is_err());
    }

    #[test]
    fn cosine_identities() {
        let a = random_adapter(1, 2);
        let b = random_adapter(2, 2);
        assert!((delta_cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((delta_cosine(&a, &a.scaled(-1.0)).unwrap() + 1.0).abs() < 1e-12);
        let ab = delta_cosine(&a, &b).unwrap();
        assert!((ab - delta_cosine(&b, &a).unwrap()).abs() < 1e-15);
        assert!((ab - delta_cosine(&a.scaled(3.0), &b).unwrap()).abs() < 1e-12);
        assert!((factor_cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn column_orthogonal_deltas_have_zero_cosine() {
        let mk = |col: usize| {
            let mut av = vec![0.0; 4];
            av[col] = 1.0;
            LoraAdapter::from_layers(
                "o",
                AdapterRole::Other,
                1.0,
                vec![LoraLayer {
                    layer: "l1".into(),
                    a: Tensor::matrix(1, 4, av).unwrap(),
                    b: Tensor::matrix(6, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
                }],
            )
            .unwrap()
        };
        assert!(delta_cosine(&mk(0), &mk(2)).unwrap().abs() < 1e-10);
    }

    #[test]
    fn container_roundtrip_keeps_metadata() {
        let mut a = random_adapter(3, 2);
        a.config = json!({"steps": 7});
        let c = a.to_container().unwrap();
        let bytes = c.to_bytes().unwrap();
        let back = LoraAdapter::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back.name(), a.name());
        assert_eq!(back.role(), a.role());
        assert_eq!(back.seed, a.seed);
        assert_eq!(back.config, a.config);
        assert_eq!(back.to_container().unwrap().to_bytes().unwrap(), bytes);
    }
}
