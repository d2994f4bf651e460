//! Layer-wise relevance propagation with a composite rule assignment.
//!
//! Relevance starts as the target logit and is redistributed layer by layer
//! down to the input pixels of every instance:
//!
//! * classifier and attention: epsilon rule;
//! * embedder convs and the embedding layer: gamma rule;
//! * first conv: z^B rule with per-channel pixel bounds;
//! * ReLU passes relevance through, max pools send it to the winning input.
//!
//! Attention pooling `z_j = Σ_k α_k h_kj` is decomposed with the epsilon rule
//! over the terms `α_k h_kj`. Each term's relevance is split between its two
//! factors: a fraction `1 − attention_share` goes straight to `h_k` (the value
//! path) and `attention_share` goes to `α_k`. Relevance on `α_k` is handed to
//! its score `s_k` unchanged, then through `s_k = wᵀ tanh(V h_k)` (tanh passes
//! relevance through) back to `h_k`. With zero biases every step conserves
//! relevance as ε → 0.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{check_target, AttributionResult, MethodConfig};
use crate::bagdata::Bag;
use crate::milnet::{BlockKind, LayerKind, MilModel};
use crate::nn::{self, ConvGeom};
use crate::tensor::channel_sum;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Rule {
    /// `R_i = Σ_j a_i w_ij / z_j · R_j`.
    Basic,
    /// Denominator `z_j + ε·sign(z_j)`, with `sign(0) = +1`.
    Epsilon { epsilon: f64 },
    /// Weights and bias replaced by `w + γ·w⁺`.
    Gamma { gamma: f64 },
    /// Bounded inputs: contributions `x_i w_ij − l_i w⁺_ij − h_i w⁻_ij`.
    /// Bounds are per input channel.
    ZBox { low: Vec<f64>, high: Vec<f64> },
}

/// Stabiliser for the gamma and z^B denominators.
const GUARD: f64 = 1e-9;

impl Rule {
    pub fn validate(&self) -> Result<()> {
        match self {
            Rule::Basic => Ok(()),
            Rule::Epsilon { epsilon } if !(*epsilon > 0.0) => Err(Error::config("epsilon", "must be positive")),
            Rule::Gamma { gamma } if !(*gamma > 0.0) => Err(Error::config("gamma", "must be positive")),
            Rule::ZBox { low, high } => {
                if low.len() != high.len() {
                    return Err(Error::config("zbox", "low and high bounds differ in length"));
                }
                if low.iter().zip(high).any(|(l, h)| !(l <= h)) {
                    return Err(Error::config("zbox", "low bound exceeds high bound"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Rule::Basic => "basic",
            Rule::Epsilon { .. } => "epsilon",
            Rule::Gamma { .. } => "gamma",
            Rule::ZBox { .. } => "zbox",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRule {
    pub layer: String,
    pub rule: Rule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrpConfig {
    #[serde(default = "defaults::zbox_low")]
    pub zbox_low: Vec<f64>,
    #[serde(default = "defaults::zbox_high")]
    pub zbox_high: Vec<f64>,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    /// Fraction of pooling relevance routed through the attention weights.
    #[serde(default = "defaults::attention_share")]
    pub attention_share: f64,
    /// Per-layer replacements of the default assignment.
    #[serde(default)]
    pub overrides: Vec<LayerRule>,
}

mod defaults {
    use alloc::vec;
    use alloc::vec::Vec;
    pub fn zbox_low() -> Vec<f64> {
        vec![0.0; 3]
    }
    pub fn zbox_high() -> Vec<f64> {
        vec![1.0; 3]
    }
    pub fn gamma() -> f64 {
        0.25
    }
    pub fn epsilon() -> f64 {
        0.01
    }
    pub fn attention_share() -> f64 {
        0.5
    }
}

impl Default for LrpConfig {
    fn default() -> Self {
        LrpConfig {
            zbox_low: defaults::zbox_low(),
            zbox_high: defaults::zbox_high(),
            gamma: defaults::gamma(),
            epsilon: defaults::epsilon(),
            attention_share: defaults::attention_share(),
            overrides: Vec::new(),
        }
    }
}

impl LrpConfig {
    pub fn validate(&self) -> Result<()> {
        Rule::ZBox { low: self.zbox_low.clone(), high: self.zbox_high.clone() }.validate()?;
        Rule::Gamma { gamma: self.gamma }.validate()?;
        Rule::Epsilon { epsilon: self.epsilon }.validate()?;
        if !(0.0..=1.0).contains(&self.attention_share) {
            return Err(Error::config("attention_share", "must lie in [0, 1]"));
        }
        self.overrides.iter().try_for_each(|o| o.rule.validate())
    }

    /// Rule for a registry layer: an override if present, else the default
    /// assignment. Fails for layers whose kind has no handler for the rule.
    pub fn rule_for(&self, model: &MilModel, layer: &str) -> Result<Rule> {
        let info = model
            .layer(layer)
            .ok_or_else(|| Error::Propagation { layer: layer.into() })?;
        let first_conv = model.blocks().first().map(|b| b.name.as_str()) == Some(layer);
        let rule = match self.overrides.iter().rev().find(|o| o.layer == layer) {
            Some(o) => o.rule.clone(),
            None => match info.kind {
                LayerKind::Conv if first_conv => Rule::ZBox { low: self.zbox_low.clone(), high: self.zbox_high.clone() },
                LayerKind::Conv | LayerKind::Dense => Rule::Gamma { gamma: self.gamma },
                LayerKind::AttentionV | LayerKind::AttentionW | LayerKind::Classifier => {
                    Rule::Epsilon { epsilon: self.epsilon }
                }
                // Max pooling is always winner-take-all; it takes no rule.
                LayerKind::AdaptiveMaxPool => return Ok(Rule::Basic),
            },
        };
        let handled = match info.kind {
            LayerKind::Conv => true,
            LayerKind::Dense | LayerKind::Classifier | LayerKind::AttentionV => !matches!(rule, Rule::ZBox { .. }),
            LayerKind::AttentionW => matches!(rule, Rule::Basic | Rule::Epsilon { .. }),
            LayerKind::AdaptiveMaxPool => false,
        };
        if !handled {
            return Err(Error::Propagation { layer: alloc::format!("{layer} ({} rule)", rule.name()) });
        }
        Ok(rule)
    }
}

#[derive(Debug, Clone, Copy)]
enum Stab {
    /// Plain ratio; `z = 0` maps to zero.
    None,
    /// `z + ε·sign z`.
    Epsilon(f64),
    /// `|z|` raised to at least [`GUARD`]; larger denominators are untouched.
    Guard,
}

fn ratio(r: f64, z: f64, stab: Stab) -> f64 {
    let sign = if z >= 0.0 { 1.0 } else { -1.0 };
    match stab {
        Stab::None if z == 0.0 => 0.0,
        Stab::None => r / z,
        Stab::Epsilon(eps) => r / (z + sign * eps),
        Stab::Guard if z.abs() < GUARD => r / (sign * GUARD),
        Stab::Guard => r / z,
    }
}

fn stabiliser(rule: &Rule) -> Stab {
    match rule {
        Rule::Basic => Stab::None,
        Rule::Epsilon { epsilon } => Stab::Epsilon(*epsilon),
        Rule::Gamma { .. } | Rule::ZBox { .. } => Stab::Guard,
    }
}

fn gamma_lift(v: &[f64], gamma: f64) -> Vec<f64> {
    v.iter().map(|&x| x + gamma * x.max(0.0)).collect()
}

fn check_bounds(low: &[f64], channels: usize, layer: &str) -> Result<()> {
    if low.len() != channels {
        return Err(Error::config("zbox", alloc::format!("{layer} has {channels} input channels, bounds give {}", low.len())));
    }
    Ok(())
}

/// One dense layer `z = W a + b` (`W` is `[out, in]`). Returns input relevance.
pub fn lrp_dense(rule: &Rule, weight: &[f64], bias: Option<&[f64]>, input: &[f64], relevance: &[f64]) -> Result<Vec<f64>> {
    let out_dim = relevance.len();
    let in_dim = input.len();
    if weight.len() != out_dim * in_dim {
        return Err(Error::Shape(alloc::format!("weight has {} entries, expected {out_dim}x{in_dim}", weight.len())));
    }
    let stab = stabiliser(rule);
    let backward = |w: &[f64], b: Option<&[f64]>, a: &[f64], r: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let z = nn::dense_forward(w, b, a, out_dim);
        let s: Vec<f64> = r.iter().zip(&z).map(|(&r, &z)| ratio(r, z, stab)).collect();
        let mut c = vec![0.0; in_dim];
        nn::dense_backward_input(w, &s, &mut c);
        (s, c)
    };
    Ok(match rule {
        Rule::Basic | Rule::Epsilon { .. } => {
            let (_, c) = backward(weight, bias, input, relevance);
            input.iter().zip(&c).map(|(a, c)| a * c).collect()
        }
        Rule::Gamma { gamma } => {
            let w = gamma_lift(weight, *gamma);
            let b = bias.map(|b| gamma_lift(b, *gamma));
            let (_, c) = backward(&w, b.as_deref(), input, relevance);
            input.iter().zip(&c).map(|(a, c)| a * c).collect()
        }
        Rule::ZBox { low, high } => {
            check_bounds(low, in_dim, "dense layer")?;
            let (wp, wn): (Vec<f64>, Vec<f64>) = weight.iter().map(|&w| (w.max(0.0), w.min(0.0))).unzip();
            let mut z = nn::dense_forward(weight, bias, input, out_dim);
            let zl = nn::dense_forward(&wp, None, low, out_dim);
            let zh = nn::dense_forward(&wn, None, high, out_dim);
            for ((z, l), h) in z.iter_mut().zip(&zl).zip(&zh) {
                *z -= l + h;
            }
            let s: Vec<f64> = relevance.iter().zip(&z).map(|(&r, &z)| ratio(r, z, stab)).collect();
            let (mut c, mut cl, mut ch) = (vec![0.0; in_dim], vec![0.0; in_dim], vec![0.0; in_dim]);
            nn::dense_backward_input(weight, &s, &mut c);
            nn::dense_backward_input(&wp, &s, &mut cl);
            nn::dense_backward_input(&wn, &s, &mut ch);
            (0..in_dim).map(|i| input[i] * c[i] - low[i] * cl[i] - high[i] * ch[i]).collect()
        }
    })
}

/// One "same" convolution. `low`/`high` of a z^B rule are per input channel.
pub fn lrp_conv(rule: &Rule, geom: ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>, relevance: &[f64]) -> Result<Vec<f64>> {
    let stab = stabiliser(rule);
    let hw = geom.height * geom.width;
    let conv_ratio = |w: &[f64], b: Option<&[f64]>, a: &[f64]| -> Vec<f64> {
        let z = nn::conv2d_forward(geom, a, w, b);
        relevance.iter().zip(&z).map(|(&r, &z)| ratio(r, z, stab)).collect()
    };
    let transpose = |w: &[f64], s: &[f64]| {
        let mut c = vec![0.0; input.len()];
        nn::conv2d_backward_input(geom, s, w, &mut c);
        c
    };
    Ok(match rule {
        Rule::Basic | Rule::Epsilon { .. } => {
            let c = transpose(weight, &conv_ratio(weight, bias, input));
            input.iter().zip(&c).map(|(a, c)| a * c).collect()
        }
        Rule::Gamma { gamma } => {
            let w = gamma_lift(weight, *gamma);
            let b = bias.map(|b| gamma_lift(b, *gamma));
            let c = transpose(&w, &conv_ratio(&w, b.as_deref(), input));
            input.iter().zip(&c).map(|(a, c)| a * c).collect()
        }
        Rule::ZBox { low, high } => {
            check_bounds(low, geom.in_channels, "conv layer")?;
            let expand = |b: &[f64]| -> Vec<f64> { b.iter().flat_map(|&v| core::iter::repeat(v).take(hw)).collect() };
            let (lo, hi) = (expand(low), expand(high));
            let (wp, wn): (Vec<f64>, Vec<f64>) = weight.iter().map(|&w| (w.max(0.0), w.min(0.0))).unzip();
            let mut z = nn::conv2d_forward(geom, input, weight, bias);
            let zl = nn::conv2d_forward(geom, &lo, &wp, None);
            let zh = nn::conv2d_forward(geom, &hi, &wn, None);
            for ((z, l), h) in z.iter_mut().zip(&zl).zip(&zh) {
                *z -= l + h;
            }
            let s: Vec<f64> = relevance.iter().zip(&z).map(|(&r, &z)| ratio(r, z, stab)).collect();
            let (c, cl, ch) = (transpose(weight, &s), transpose(&wp, &s), transpose(&wn, &s));
            (0..input.len()).map(|i| input[i] * c[i] - lo[i] * cl[i] - hi[i] * ch[i]).collect()
        }
    })
}

/// Winner-take-all redistribution through a max pool.
fn lrp_max_pool(relevance: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut r = vec![0.0; input_len];
    nn::max_pool_backward(relevance, argmax, &mut r);
    r
}

/// A dense layer in a plain feed-forward stack.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[out_dim, in_dim]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub out_dim: usize,
    pub relu: bool,
}

impl DenseLayer {
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let z = nn::dense_forward(&self.weight, self.bias.as_deref(), input, self.out_dim);
        if self.relu {
            nn::relu(&z)
        } else {
            z
        }
    }
}

/// LRP through a dense stack with one rule for every layer. Returns the
/// target output and the input relevances.
pub fn lrp_dense_stack(layers: &[DenseLayer], input: &[f64], target: usize, rule: &Rule) -> Result<(f64, Vec<f64>)> {
    rule.validate()?;
    let mut acts = vec![input.to_vec()];
    for layer in layers {
        let next = layer.forward(acts.last().expect("non-empty"));
        acts.push(next);
    }
    let out = acts.last().expect("non-empty");
    let logit = out[target];
    let mut r = vec![0.0; out.len()];
    r[target] = logit;
    for (layer, a) in layers.iter().zip(&acts).rev() {
        r = lrp_dense(rule, &layer.weight, layer.bias.as_deref(), a, &r)?;
    }
    Ok((logit, r))
}

/// Target logit and per-instance input relevance `[C, H, W]`.
pub fn lrp_relevance(model: &MilModel, bag: &Bag, target_class: usize, cfg: &LrpConfig) -> Result<(f64, Vec<Tensor>)> {
    cfg.validate()?;
    check_target(model, target_class)?;
    model.check_instance(bag)?;
    for o in &cfg.overrides {
        cfg.rule_for(model, &o.layer)?;
    }
    let n_blocks = model.blocks().len();
    let traces: Vec<_> = bag.instances.iter().map(|i| model.trace_blocks(0..n_blocks, i.pixels.clone())).collect();
    let head = model.head_forward(traces.iter().map(|t| t.output().data().to_vec()).collect())?;
    let hp = model.head_params();

    let logit = head.logits[target_class];
    let mut r_logits = vec![0.0; head.logits.len()];
    r_logits[target_class] = logit;

    let fc2 = cfg.rule_for(model, "classifier.fc2")?;
    let r_hidden = lrp_dense(&fc2, model.param(hp.fc2_w), Some(model.param(hp.fc2_b)), &head.classifier_hidden, &r_logits)?;
    let fc1 = cfg.rule_for(model, "classifier.fc1")?;
    let r_z = lrp_dense(&fc1, model.param(hp.fc1_w), Some(model.param(hp.fc1_b)), &head.bag_embedding, &r_hidden)?;

    // z_j = Σ_k α_k h_kj, epsilon over the α_k h_kj terms.
    let s_z: Vec<f64> = r_z.iter().zip(&head.bag_embedding).map(|(&r, &z)| ratio(r, z, Stab::Epsilon(cfg.epsilon))).collect();
    let rho = cfg.attention_share;
    let rule_w = cfg.rule_for(model, "attention.w")?;
    let rule_v = cfg.rule_for(model, "attention.v")?;
    let (v, w) = model.attention_weights();
    let mut r_h = Vec::with_capacity(bag.len());
    for (k, hk) in head.embeddings.iter().enumerate() {
        let alpha = head.attention[k];
        let r_terms: Vec<f64> = hk.iter().zip(&s_z).map(|(h, s)| alpha * h * s).collect();
        let mut rk: Vec<f64> = r_terms.iter().map(|r| (1.0 - rho) * r).collect();
        if rho > 0.0 {
            let r_score = rho * r_terms.iter().sum::<f64>();
            let r_t = lrp_dense(&rule_w, w, None, &head.hidden_attention[k], &[r_score])?;
            let r_via_v = lrp_dense(&rule_v, v, None, hk, &r_t)?;
            rk.iter_mut().zip(&r_via_v).for_each(|(a, b)| *a += b);
        }
        r_h.push(rk);
    }

    let mut maps = Vec::with_capacity(bag.len());
    for (trace, rk) in traces.iter().zip(r_h) {
        let mut r = rk;
        for (pos, cache) in trace.blocks.iter().enumerate().rev() {
            let block = &model.blocks()[pos];
            r = match &block.kind {
                BlockKind::Conv { geom, pool, weight, bias } => {
                    let r_act = if *pool {
                        lrp_max_pool(&r, &cache.pool.as_ref().expect("pool cache").argmax, cache.activation.len())
                    } else {
                        r
                    };
                    let rule = cfg.rule_for(model, &block.name)?;
                    lrp_conv(&rule, *geom, cache.input.data(), model.param(*weight), Some(model.param(*bias)), &r_act)?
                }
                BlockKind::AdaptiveMaxPool { .. } => {
                    cfg.rule_for(model, &block.name)?;
                    lrp_max_pool(&r, &cache.pool.as_ref().expect("pool cache").argmax, cache.input.len())
                }
                BlockKind::Dense { weight, bias, .. } => {
                    let rule = cfg.rule_for(model, &block.name)?;
                    lrp_dense(&rule, model.param(*weight), Some(model.param(*bias)), cache.input.data(), &r)?
                }
            };
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Propagation { layer: alloc::format!("{} (non-finite relevance)", block.name) });
            }
        }
        maps.push(Tensor::from_vec(trace.blocks[0].input.shape(), r));
    }
    Ok((logit, maps))
}

pub fn lrp(model: &MilModel, bag: &Bag, target_class: usize, cfg: &LrpConfig) -> Result<AttributionResult> {
    let (_, relevance) = lrp_relevance(model, bag, target_class, cfg)?;
    let maps = relevance.iter().map(channel_sum).collect();
    Ok(AttributionResult::new(bag, target_class, maps, MethodConfig::Lrp(cfg.clone())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagdata::{generate_synthetic, SynthConfig};
    use crate::milnet::ModelConfig;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn single_layer_rules_by_hand() {
        let w = [1.0, -1.0];
        let a = [1.0, 2.0];
        // z = 1 − 2 = −1
        let basic = lrp_dense(&Rule::Basic, &w, None, &a, &[-1.0]).unwrap();
        assert!(close(&basic, &[1.0, -2.0], 1e-12));

        let eps = lrp_dense(&Rule::Epsilon { epsilon: 0.1 }, &w, None, &a, &[-1.0]).unwrap();
        assert!(close(&eps, &[1.0 / 1.1, -2.0 / 1.1], 1e-12));
        assert!(eps.iter().sum::<f64>().abs() < 1.0);

        let gamma = lrp_dense(&Rule::Gamma { gamma: 1.0 }, &w, None, &[2.0, 1.0], &[3.0]).unwrap();
        assert!(close(&gamma, &[4.0, -1.0], 1e-8));
    }

    #[test]
    fn zbox_dense_conserves_and_matches_formula() {
        let w = [0.5, -1.5, 2.0];
        let x = [0.2, 0.7, 0.4];
        let (l, h) = ([0.0; 3], [1.0; 3]);
        let r = lrp_dense(&Rule::ZBox { low: l.to_vec(), high: h.to_vec() }, &w, None, &x, &[1.0]).unwrap();
        let terms: Vec<f64> = (0..3).map(|i| x[i] * w[i] - l[i] * w[i].max(0.0) - h[i] * w[i].min(0.0)).collect();
        let total: f64 = terms.iter().sum();
        let expected: Vec<f64> = terms.iter().map(|t| t / total).collect();
        assert!(close(&r, &expected, 1e-8));
    }

    #[test]
    fn conv_rule_matches_dense_unrolling() {
        // A 1×1 convolution over 2 channels is a dense layer per pixel.
        let geom = ConvGeom { in_channels: 2, out_channels: 1, kernel: 1, height: 1, width: 2 };
        let w = [0.7, -0.4];
        let x = [0.3, 0.9, 0.5, 0.1]; // channel-major: c0 = [0.3, 0.9], c1 = [0.5, 0.1]
        let r_out = [1.0, -2.0];
        for rule in [Rule::Basic, Rule::Epsilon { epsilon: 0.05 }, Rule::Gamma { gamma: 0.5 }] {
            let r = lrp_conv(&rule, geom, &x, &w, None, &r_out).unwrap();
            for p in 0..2 {
                let rp = lrp_dense(&rule, &w, None, &[x[p], x[2 + p]], &[r_out[p]]).unwrap();
                assert!((r[p] - rp[0]).abs() < 1e-12 && (r[2 + p] - rp[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_rules_are_rejected() {
        assert!(Rule::Epsilon { epsilon: 0.0 }.validate().is_err());
        assert!(Rule::Gamma { gamma: -1.0 }.validate().is_err());
        assert!(Rule::ZBox { low: vec![1.0], high: vec![0.0] }.validate().is_err());
        assert!(LrpConfig { attention_share: 1.5, ..LrpConfig::default() }.validate().is_err());
    }

    fn model_and_bag(seed: u64) -> (MilModel, Bag) {
        let model = MilModel::new(ModelConfig::default(), seed).unwrap();
        let data = generate_synthetic(&SynthConfig { num_bags: 1, bag_size: 3, ..SynthConfig::default() }).unwrap();
        (model, data.bags[0].clone())
    }

    fn randomise_biases(model: &mut MilModel, seed: u64) {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(seed, &[9]);
        let names: Vec<String> = model.params().names().to_vec();
        for (name, t) in names.iter().zip(model.params_mut().tensors_mut()) {
            if name.ends_with(".bias") {
                t.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.05..0.05));
            }
        }
    }

    #[test]
    fn whole_model_conserves_without_biases_as_epsilon_vanishes() {
        let (model, bag) = model_and_bag(5);
        for share in [0.0, 0.5, 1.0] {
            let cfg = LrpConfig { epsilon: 1e-12, attention_share: share, ..LrpConfig::default() };
            let (logit, rel) = lrp_relevance(&model, &bag, 1, &cfg).unwrap();
            let total: f64 = rel.iter().map(Tensor::sum).sum();
            assert!((total - logit).abs() <= 1e-6 * logit.abs().max(1e-3), "share {share}: {total} vs {logit}");
        }
    }

    #[test]
    fn biases_absorb_relevance() {
        let (mut model, bag) = model_and_bag(6);
        randomise_biases(&mut model, 1);
        let (logit, rel) = lrp_relevance(&model, &bag, 0, &LrpConfig::default()).unwrap();
        let total: f64 = rel.iter().map(Tensor::sum).sum();
        assert!(total.is_finite() && (total - logit).abs() > 1e-9);
    }

    #[test]
    fn zero_input_gives_zero_relevance() {
        let (model, mut bag) = model_and_bag(7);
        bag.instances.iter_mut().for_each(|i| i.pixels.fill(0.0));
        let r = lrp(&model, &bag, 2, &LrpConfig::default()).unwrap();
        assert!(r.signed);
        assert!(r.maps.iter().flat_map(|m| m.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn overrides_on_unhandled_layers_fail_by_name() {
        let (model, bag) = model_and_bag(8);
        let cfg = LrpConfig {
            overrides: vec![LayerRule { layer: "head.pool".into(), rule: Rule::Epsilon { epsilon: 0.1 } }],
            ..LrpConfig::default()
        };
        match lrp(&model, &bag, 0, &cfg) {
            Err(Error::Propagation { layer }) => assert!(layer.starts_with("head.pool")),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = LrpConfig {
            overrides: vec![LayerRule { layer: "attention.w".into(), rule: Rule::Gamma { gamma: 0.1 } }],
            ..LrpConfig::default()
        };
        assert!(matches!(lrp(&model, &bag, 0, &cfg), Err(Error::Propagation { .. })));
        let cfg = LrpConfig {
            overrides: vec![LayerRule { layer: "no.such".into(), rule: Rule::Basic }],
            ..LrpConfig::default()
        };
        assert!(matches!(lrp(&model, &bag, 0, &cfg), Err(Error::Propagation { .. })));
    }
}
