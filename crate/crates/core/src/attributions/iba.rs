//! Information bottleneck attribution at an embedder layer.
//!
//! Features `F` of every instance are replaced by `Z = λF + (1−λ)ε`, with
//! `ε ~ N(μ, σ²)` drawn from per-element statistics of `F` over training
//! bags. The mask `λ = sigmoid(p)` minimises `β·mean KL(P(Z|F) ‖ Q) + CE`,
//! where `Q = N(μ, σ²)` and, per element with `r = (F − μ)/σ`,
//!
//! ```text
//! KL = ½ [ (1−λ)² + λ² r² − 1 − ln (1−λ)² ]
//! ```
//!
//! Written in `p`, `ln (1−λ)² = −2·softplus(p)`, which stays finite as λ → 1.
//!
//! By default each instance gets its own problem, with the rest of the bag
//! replaced by noise; see [`BottleneckScope`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{check_target, AttributionResult, MethodConfig};
use crate::bagdata::Bag;
use crate::milnet::{BagOutput, BlockKind, MilModel};
use crate::nn::{self, sigmoid, softplus};
use crate::optim::Adam;
use crate::rng::{derive_seed, rng_for, standard_normal, Rng};
use crate::tensor::{channel_mean, resize_bilinear};
use crate::{Error, Result, Tensor};

/// Smallest variance kept when estimating noise statistics.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Per-element mean and standard deviation of a layer's activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub layer: String,
    pub shape: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NoiseStats {
    pub fn from_features(layer: impl Into<String>, features: &[Tensor]) -> Result<Self> {
        let first = features.first().ok_or_else(|| Error::Data("noise calibration needs at least one instance".into()))?;
        let shape = first.shape().to_vec();
        let n = features.len() as f64;
        let mut mean = vec![0.0; first.len()];
        for f in features {
            if f.shape() != shape.as_slice() {
                return Err(Error::Shape("calibration features differ in shape".into()));
            }
            mean.iter_mut().zip(f.data()).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; first.len()];
        for f in features {
            var.iter_mut().zip(f.data()).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
        }
        let std = var.into_iter().map(|v| libm::sqrt(v.max(VARIANCE_FLOOR))).collect();
        Ok(NoiseStats { layer: layer.into(), shape, mean, std })
    }

    /// Statistics of `layer` over every instance of `bags`.
    pub fn estimate(model: &MilModel, layer: &str, bags: &[Bag]) -> Result<Self> {
        let b = model.block_index(layer)?;
        let mut features = Vec::new();
        for bag in bags {
            model.check_instance(bag)?;
            features.extend(bag.instances.iter().map(|i| model.run_blocks(0..b + 1, i.pixels.clone())));
        }
        NoiseStats::from_features(layer, &features)
    }

    pub fn sample(&self, rng: &mut Rng) -> Tensor {
        let data = self.mean.iter().zip(&self.std).map(|(m, s)| m + s * standard_normal(rng)).collect();
        Tensor::from_vec(&self.shape, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IbaConfig {
    #[serde(default = "defaults::layer")]
    pub layer: String,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default = "defaults::mask_learning_rate")]
    pub mask_learning_rate: f64,
    /// Pre-sigmoid mask value at the start (3.0 gives λ ≈ 0.95).
    #[serde(default = "defaults::mask_init")]
    pub mask_init: f64,
    #[serde(default)]
    pub scope: BottleneckScope,
    #[serde(default)]
    pub rng_seed: u64,
    /// Calibrated on training bags; not part of the serialized config.
    #[serde(skip)]
    pub noise_stats: Option<NoiseStats>,
}

/// Which instances carry information while one mask is optimised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckScope {
    /// One problem per instance: its own mask is learned while every other
    /// instance is pure noise. A redundant positive then cannot hide behind
    /// another one.
    #[default]
    Instance,
    /// One joint problem over all masks of the bag.
    Bag,
}

mod defaults {
    use alloc::string::String;
    pub fn layer() -> String {
        "backbone.conv3".into()
    }
    pub fn beta() -> f64 {
        10.0
    }
    pub fn steps() -> usize {
        300
    }
    pub fn mask_learning_rate() -> f64 {
        0.1
    }
    pub fn mask_init() -> f64 {
        3.0
    }
}

impl Default for IbaConfig {
    fn default() -> Self {
        IbaConfig {
            layer: defaults::layer(),
            beta: defaults::beta(),
            steps: defaults::steps(),
            mask_learning_rate: defaults::mask_learning_rate(),
            mask_init: defaults::mask_init(),
            scope: BottleneckScope::Instance,
            rng_seed: 0,
            noise_stats: None,
        }
    }
}

impl IbaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::config("beta", "must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if !(self.mask_learning_rate > 0.0) {
            return Err(Error::config("mask_learning_rate", "must be positive"));
        }
        if let Some(s) = &self.noise_stats {
            if s.std.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::config("noise_stats", "variance estimates must be positive"));
            }
        }
        Ok(())
    }

    pub fn calibrated(mut self, stats: NoiseStats) -> Self {
        self.noise_stats = Some(stats);
        self
    }

    /// Calibration statistics matching the configured layer.
    pub(crate) fn stats(&self, model: &MilModel) -> Result<&NoiseStats> {
        let stats = self
            .noise_stats
            .as_ref()
            .ok_or_else(|| Error::config("noise_stats", "not calibrated; estimate them on training bags first"))?;
        if stats.layer != self.layer {
            return Err(Error::config("noise_stats", alloc::format!("estimated at {}, bottleneck is at {}", stats.layer, self.layer)));
        }
        let b = model.block_index(&self.layer)?;
        if !matches!(model.blocks()[b].kind, BlockKind::Conv { .. }) {
            return Err(Error::UnsupportedLayer(alloc::format!("{} (bottleneck needs a convolutional layer)", self.layer)));
        }
        if stats.shape != model.blocks()[b].out_shape {
            return Err(Error::Shape(alloc::format!("noise statistics have shape {:?}, layer has {:?}", stats.shape, model.blocks()[b].out_shape)));
        }
        Ok(stats)
    }
}

/// Per-element KL of the bottleneck from `Q`, in mask logits.
pub fn kl_per_element(logit: f64, r: f64) -> f64 {
    let lambda = sigmoid(logit);
    0.5 * ((1.0 - lambda) * (1.0 - lambda) + lambda * lambda * r * r - 1.0 + 2.0 * softplus(logit))
}

/// Derivative of [`kl_per_element`] with respect to the logit.
pub fn kl_grad(logit: f64, r: f64) -> f64 {
    let lambda = sigmoid(logit);
    lambda * (1.0 - lambda) * (lambda * r * r - (1.0 - lambda)) + lambda
}

/// Mean KL over all elements of all instances.
pub fn mean_kl(logits: &[Tensor], features: &[Tensor], stats: &NoiseStats) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, f) in logits.iter().zip(features) {
        for (((&p, &f), &m), &s) in p.data().iter().zip(f.data()).zip(&stats.mean).zip(&stats.std) {
            total += kl_per_element(p, (f - m) / s);
            count += 1;
        }
    }
    total / count as f64
}

/// `λF + (1−λ)ε` element-wise.
pub fn bottleneck(lambda: &Tensor, features: &Tensor, noise: &Tensor) -> Tensor {
    let data = lambda
        .data()
        .iter()
        .zip(features.data())
        .zip(noise.data())
        .map(|((l, f), e)| l * f + (1.0 - l) * e)
        .collect();
    Tensor::from_vec(features.shape(), data)
}

/// Forward pass with the bottleneck inserted after `layer`, for given masks
/// and noise (one each per instance).
pub fn bottleneck_forward(model: &MilModel, bag: &Bag, layer: &str, lambda: &[Tensor], noise: &[Tensor]) -> Result<BagOutput> {
    model.check_instance(bag)?;
    let b = model.block_index(layer)?;
    let n_blocks = model.blocks().len();
    let mut h = Vec::with_capacity(bag.len());
    for ((inst, l), e) in bag.instances.iter().zip(lambda).zip(noise) {
        let f = model.run_blocks(0..b + 1, inst.pixels.clone());
        if l.shape() != f.shape() || e.shape() != f.shape() {
            return Err(Error::Shape(alloc::format!("mask for instance {} does not match layer {layer}", inst.instance_id)));
        }
        h.push(model.run_blocks(b + 1..n_blocks, bottleneck(l, &f, e)).into_vec());
    }
    Ok(model.head_forward(h)?.into_output())
}

/// Stream id for per-bag noise, so results do not depend on visiting order.
pub(crate) fn bag_stream(bag_id: &str) -> u64 {
    bag_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Optimised mask logits at the bottleneck, per instance, together with the
/// layer's clean features.
pub fn optimize_mask(model: &MilModel, bag: &Bag, target_class: usize, cfg: &IbaConfig) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    cfg.validate()?;
    check_target(model, target_class)?;
    model.check_instance(bag)?;
    let stats = cfg.stats(model)?;
    let b = model.block_index(&cfg.layer)?;
    let n_blocks = model.blocks().len();

    let features: Vec<Tensor> = bag.instances.iter().map(|i| model.run_blocks(0..b + 1, i.pixels.clone())).collect();
    let per = features[0].len();
    let total = per * features.len();
    let mut logits: Vec<Tensor> = features.iter().map(|f| Tensor::filled(f.shape(), cfg.mask_init)).collect();
    let r: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.data().iter().zip(&stats.mean).zip(&stats.std).map(|((f, m), s)| (f - m) / s).collect())
        .collect();
    let mut adam = Adam::new(total, cfg.mask_learning_rate);
    let mut rng = rng_for(derive_seed(cfg.rng_seed, &[0x1ba]), &[bag_stream(&bag.bag_id)]);
    let suffix = b + 1..n_blocks;

    for step in 1..=cfg.steps {
        let noise: Vec<Tensor> = features.iter().map(|_| stats.sample(&mut rng)).collect();
        let lambdas: Vec<Tensor> = logits.iter().map(|p| p.map(sigmoid)).collect();
        let traces: Vec<_> = lambdas
            .iter()
            .zip(&features)
            .zip(&noise)
            .map(|((l, f), e)| model.trace_blocks(suffix.clone(), bottleneck(l, f, e)))
            .collect();
        let open: Vec<Vec<f64>> = traces.iter().map(|t| t.output().data().to_vec()).collect();

        // Upstream gradient at each instance's bottleneck output.
        let mut g_out: Vec<Vec<f64>> = Vec::with_capacity(features.len());
        match cfg.scope {
            BottleneckScope::Bag => {
                let head = model.head_forward(open)?;
                let (ce, g_logits) = nn::cross_entropy(&head.logits, target_class);
                let loss = cfg.beta * mean_kl(&logits, &features, stats) + ce;
                if !loss.is_finite() {
                    return Err(Error::Optimization { method: "iba", step });
                }
                g_out = model.head_backward(&head, &g_logits, None);
            }
            BottleneckScope::Instance => {
                let closed: Vec<Vec<f64>> = noise.iter().map(|e| model.run_blocks(suffix.clone(), e.clone()).into_vec()).collect();
                for k in 0..features.len() {
                    let mut h = closed.clone();
                    h[k] = open[k].clone();
                    let head = model.head_forward(h)?;
                    let (ce, g_logits) = nn::cross_entropy(&head.logits, target_class);
                    let loss = cfg.beta * mean_kl(&logits[k..k + 1], &features[k..k + 1], stats) + ce;
                    if !loss.is_finite() {
                        return Err(Error::Optimization { method: "iba", step });
                    }
                    g_out.push(model.head_backward(&head, &g_logits, None).swap_remove(k));
                }
            }
        }
        let kl_scale = match cfg.scope {
            BottleneckScope::Bag => cfg.beta / total as f64,
            BottleneckScope::Instance => cfg.beta / per as f64,
        };
        adam.tick();
        for (k, (trace, g)) in traces.iter().zip(g_out).enumerate() {
            let g_z = model.backward_blocks(trace, g, None, true).expect("input gradient requested");
            let grad: Vec<f64> = (0..per)
                .map(|i| {
                    let lam = lambdas[k].data()[i];
                    let dz = g_z.data()[i] * (features[k].data()[i] - noise[k].data()[i]) * lam * (1.0 - lam);
                    dz + kl_scale * kl_grad(logits[k].data()[i], r[k][i])
                })
                .collect();
            adam.apply(k * per, logits[k].data_mut(), &grad);
        }
    }
    Ok((logits, features))
}

pub fn iba(model: &MilModel, bag: &Bag, target_class: usize, cfg: &IbaConfig) -> Result<AttributionResult> {
    let (logits, _) = optimize_mask(model, bag, target_class, cfg)?;
    let maps = logits
        .iter()
        .zip(&bag.instances)
        .map(|(p, inst)| resize_bilinear(&channel_mean(&p.map(sigmoid)), inst.height(), inst.width()))
        .collect();
    Ok(AttributionResult::new(bag, target_class, maps, MethodConfig::Iba(cfg.clone())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagdata::{generate_synthetic, SynthConfig};
    use crate::milnet::ModelConfig;

    fn setup() -> (MilModel, Vec<Bag>) {
        let model = MilModel::new(ModelConfig::default(), 11).unwrap();
        let data = generate_synthetic(&SynthConfig { num_bags: 4, bag_size: 3, ..SynthConfig::default() }).unwrap();
        (model, data.bags)
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        for &(p, r) in &[(3.0, 0.5), (-1.0, 2.0), (0.2, -1.3), (6.0, 0.0)] {
            let h = 1e-6;
            let fd = (kl_per_element(p + h, r) - kl_per_element(p - h, r)) / (2.0 * h);
            assert!((fd - kl_grad(p, r)).abs() < 1e-6, "p={p} r={r}");
        }
    }

    #[test]
    fn closed_mask_carries_no_information() {
        assert!(kl_per_element(-60.0, 3.0).abs() < 1e-12);
        assert!(kl_per_element(3.0, 1.0) > 0.0);
    }

    #[test]
    fn open_mask_reproduces_forward() {
        let (model, bags) = setup();
        let stats = NoiseStats::estimate(&model, "backbone.conv3", &bags).unwrap();
        let bag = &bags[0];
        let ones: Vec<Tensor> = bag.instances.iter().map(|_| Tensor::filled(&stats.shape, 1.0)).collect();
        let mut rng = rng_for(1, &[]);
        let noise: Vec<Tensor> = bag.instances.iter().map(|_| stats.sample(&mut rng)).collect();
        let out = bottleneck_forward(&model, bag, "backbone.conv3", &ones, &noise).unwrap();
        let clean = model.forward(bag).unwrap();
        for (a, b) in out.logits.iter().zip(&clean.logits) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stats_respect_floor() {
        let feats = vec![Tensor::from_vec(&[1, 1, 2], vec![0.0, 1.0]), Tensor::from_vec(&[1, 1, 2], vec![0.0, 3.0])];
        let s = NoiseStats::from_features("x", &feats).unwrap();
        assert_eq!(s.mean, vec![0.0, 2.0]);
        assert!((s.std[0] - VARIANCE_FLOOR.sqrt()).abs() < 1e-15);
        assert!((s.std[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uncalibrated_config_is_rejected() {
        let (model, bags) = setup();
        let err = iba(&model, &bags[0], 0, &IbaConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "noise_stats"));
    }

    #[test]
    fn maps_are_masks_in_unit_range() {
        let (model, bags) = setup();
        let stats = NoiseStats::estimate(&model, "backbone.conv3", &bags).unwrap();
        let cfg = IbaConfig { steps: 5, ..IbaConfig::default() }.calibrated(stats);
        let r = iba(&model, &bags[1], 2, &cfg).unwrap();
        r.check_alignment(&bags[1]).unwrap();
        assert!(r.maps.iter().flat_map(|m| m.data()).all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(r.metadata, MethodConfig::Iba(IbaConfig { steps: 5, ..IbaConfig::default() }));
        assert_eq!(iba(&model, &bags[1], 2, &cfg).unwrap(), r);
    }
}
