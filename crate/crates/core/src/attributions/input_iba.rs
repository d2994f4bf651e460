//! Input-space information bottleneck.
//!
//! 1. Deep IBA gives the optimal feature mask `λ*` and thereby samples of
//!    `Z* = λ*F + (1−λ*)ε` at the bottleneck layer.
//! 2. Per instance, a generator `Z_G = σ(m)X + (1−σ(m))(μ_G + σ_G η)` over
//!    the input is fitted so that the embedder prefix maps `Z_G` onto the
//!    distribution of `Z*`. The matching is adversarial: a small conv
//!    discriminator on bottleneck features, non-saturating BCE losses.
//! 3. An input mask `Λ` is optimised on `Z_I = ΛZ_G + (1−Λ)ε_x` (`ε_x` from
//!    per-channel pixel statistics) with `β_in · mean KL + CE`, the KL taken
//!    with `r = (Z_G − μ_x)/σ_x`. `Λ` is the returned map.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::iba::{self, bag_stream, bottleneck, BottleneckScope, kl_grad, kl_per_element, IbaConfig, NoiseStats, VARIANCE_FLOOR};
use super::{check_target, AttributionResult, MethodConfig};
use crate::bagdata::{Bag, Instance};
use crate::milnet::{BagOutput, MilModel};
use crate::nn::{self, sigmoid, softplus, ConvGeom};
use crate::optim::Adam;
use crate::rng::{derive_seed, rng_for, standard_normal, Rng};
use crate::{Error, Result, Tensor};

/// Per-channel pixel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputStats {
    pub fn estimate(bags: &[Bag]) -> Result<Self> {
        let first = bags
            .iter()
            .flat_map(|b| b.instances.first())
            .next()
            .ok_or_else(|| Error::Data("input calibration needs at least one instance".into()))?;
        let c = first.pixels.shape()[0];
        let (mut sum, mut sq, mut n) = (vec![0.0; c], vec![0.0; c], 0.0);
        for inst in bags.iter().flat_map(|b| &b.instances) {
            let hw = inst.pixels.spatial_len();
            for ch in 0..c {
                for &v in &inst.pixels.data()[ch * hw..(ch + 1) * hw] {
                    sum[ch] += v;
                    sq[ch] += v * v;
                }
            }
            n += hw as f64;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| libm::sqrt((q / n - m * m).max(VARIANCE_FLOOR))).collect();
        Ok(InputStats { mean, std })
    }

    fn sample(&self, shape: &[usize], rng: &mut Rng) -> Tensor {
        let hw = shape[1] * shape[2];
        let data = (0..shape[0] * hw).map(|i| self.mean[i / hw] + self.std[i / hw] * standard_normal(rng)).collect();
        Tensor::from_vec(shape, data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputIbaConfig {
    #[serde(default)]
    pub deep: IbaConfig,
    #[serde(default = "defaults::input_beta")]
    pub input_beta: f64,
    #[serde(default = "defaults::generator_steps")]
    pub generator_steps: usize,
    #[serde(default = "defaults::generator_learning_rate")]
    pub generator_learning_rate: f64,
    #[serde(default = "defaults::discriminator_learning_rate")]
    pub discriminator_learning_rate: f64,
    /// Width of the discriminator's conv layer.
    #[serde(default = "defaults::discriminator_channels")]
    pub discriminator_channels: usize,
    #[serde(default = "defaults::input_mask_steps")]
    pub input_mask_steps: usize,
    #[serde(default = "defaults::input_mask_learning_rate")]
    pub input_mask_learning_rate: f64,
    #[serde(default = "defaults::input_mask_init")]
    pub input_mask_init: f64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(skip)]
    pub input_stats: Option<InputStats>,
}

mod defaults {
    pub fn input_beta() -> f64 {
        40.0
    }
    pub fn generator_steps() -> usize {
        200
    }
    pub fn generator_learning_rate() -> f64 {
        0.05
    }
    pub fn discriminator_learning_rate() -> f64 {
        0.005
    }
    pub fn discriminator_channels() -> usize {
        8
    }
    pub fn input_mask_steps() -> usize {
        300
    }
    pub fn input_mask_learning_rate() -> f64 {
        0.1
    }
    pub fn input_mask_init() -> f64 {
        3.0
    }
}

impl Default for InputIbaConfig {
    fn default() -> Self {
        InputIbaConfig {
            deep: IbaConfig::default(),
            input_beta: defaults::input_beta(),
            generator_steps: defaults::generator_steps(),
            generator_learning_rate: defaults::generator_learning_rate(),
            discriminator_learning_rate: defaults::discriminator_learning_rate(),
            discriminator_channels: defaults::discriminator_channels(),
            input_mask_steps: defaults::input_mask_steps(),
            input_mask_learning_rate: defaults::input_mask_learning_rate(),
            input_mask_init: defaults::input_mask_init(),
            rng_seed: 0,
            input_stats: None,
        }
    }
}

impl InputIbaConfig {
    pub fn validate(&self) -> Result<()> {
        self.deep.validate()?;
        if !(self.input_beta > 0.0) {
            return Err(Error::config("input_beta", "must be positive"));
        }
        if self.generator_steps == 0 {
            return Err(Error::config("generator_steps", "must be at least 1"));
        }
        if self.input_mask_steps == 0 {
            return Err(Error::config("input_mask_steps", "must be at least 1"));
        }
        if self.discriminator_channels == 0 {
            return Err(Error::config("discriminator_channels", "must be at least 1"));
        }
        for (field, v) in [
            ("generator_learning_rate", self.generator_learning_rate),
            ("discriminator_learning_rate", self.discriminator_learning_rate),
            ("input_mask_learning_rate", self.input_mask_learning_rate),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }

    pub fn calibrated(mut self, deep: NoiseStats, input: InputStats) -> Self {
        self.deep.noise_stats = Some(deep);
        self.input_stats = Some(input);
        self
    }
}

/// conv 3×3 → ReLU → global average pool → dense → one logit.
struct Discriminator {
    geom: ConvGeom,
    /// `[conv weight | conv bias | fc weight | fc bias]`.
    params: Vec<f64>,
}

struct DiscTrace {
    act: Vec<f64>,
    pooled: Vec<f64>,
    logit: f64,
}

impl Discriminator {
    fn new(shape: &[usize], channels: usize, rng: &mut Rng) -> Self {
        let geom = ConvGeom { in_channels: shape[0], out_channels: channels, kernel: 3, height: shape[1], width: shape[2] };
        let wl = geom.weight_len();
        let mut params = vec![0.0; wl + 2 * channels + 1];
        let conv_std = libm::sqrt(2.0 / (shape[0] * 9) as f64);
        let fc_std = libm::sqrt(1.0 / channels as f64);
        params[..wl].iter_mut().for_each(|p| *p = conv_std * standard_normal(rng));
        params[wl + channels..wl + 2 * channels].iter_mut().for_each(|p| *p = fc_std * standard_normal(rng));
        Discriminator { geom, params }
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], f64) {
        let wl = self.geom.weight_len();
        let c = self.geom.out_channels;
        (&self.params[..wl], &self.params[wl..wl + c], &self.params[wl + c..wl + 2 * c], self.params[wl + 2 * c])
    }

    fn forward(&self, x: &[f64]) -> DiscTrace {
        let (w, b, fw, fb) = self.split();
        let act = nn::relu(&nn::conv2d_forward(self.geom, x, w, Some(b)));
        let hw = self.geom.height * self.geom.width;
        let pooled: Vec<f64> = act.chunks_exact(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
        let logit = fb + pooled.iter().zip(fw).map(|(a, b)| a * b).sum::<f64>();
        DiscTrace { act, pooled, logit }
    }

    /// Parameter gradient scaled by `g`, added into `grads`; returns the input
    /// gradient when asked.
    fn backward(&self, x: &[f64], t: &DiscTrace, g: f64, grads: Option<&mut [f64]>, want_input: bool) -> Option<Vec<f64>> {
        let (w, _, fw, _) = self.split();
        let wl = self.geom.weight_len();
        let c = self.geom.out_channels;
        let hw = self.geom.height * self.geom.width;
        let mut g_act: Vec<f64> = (0..c * hw).map(|i| g * fw[i / hw] / hw as f64).collect();
        nn::relu_backward(&t.act, &mut g_act);
        if let Some(gs) = grads {
            let (gw, rest) = gs.split_at_mut(wl);
            let (gb, rest) = rest.split_at_mut(c);
            let (gfw, gfb) = rest.split_at_mut(c);
            nn::conv2d_backward_params(self.geom, &g_act, x, gw, Some(gb));
            gfw.iter_mut().zip(&t.pooled).for_each(|(a, p)| *a += g * p);
            gfb[0] += g;
        }
        want_input.then(|| {
            let mut gi = vec![0.0; x.len()];
            nn::conv2d_backward_input(self.geom, &g_act, w, &mut gi);
            gi
        })
    }
}

/// Fitted input-space noise model of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    /// `[H, W]` pre-sigmoid pass-through mask.
    pub mask_logits: Tensor,
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    /// Discriminator loss per matching step.
    pub discriminator_losses: Vec<f64>,
}

impl Generator {
    fn sample(&self, x: &Tensor, eta: &Tensor) -> Tensor {
        let hw = x.spatial_len();
        let data = (0..x.len())
            .map(|i| {
                let (c, p) = (i / hw, i % hw);
                let s = sigmoid(self.mask_logits.data()[p]);
                s * x.data()[i] + (1.0 - s) * (self.mu[c] + libm::exp(self.log_sigma[c]) * eta.data()[i])
            })
            .collect();
        Tensor::from_vec(x.shape(), data)
    }
}

fn normal_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| standard_normal(rng)).collect())
}

/// Adversarially matches `prefix(Z_G)` to the deep bottleneck samples
/// defined by `lambda_star` (per-element mask) for one instance.
pub fn fit_generator(
    model: &MilModel,
    instance: &Instance,
    lambda_star: &Tensor,
    deep_stats: &NoiseStats,
    cfg: &InputIbaConfig,
    rng: &mut Rng,
) -> Result<Generator> {
    let b = model.block_index(&cfg.deep.layer)?;
    let x = &instance.pixels;
    let (c, hw) = (x.shape()[0], x.spatial_len());
    let features = model.run_blocks(0..b + 1, x.clone());
    let mut disc = Discriminator::new(features.shape(), cfg.discriminator_channels, rng);
    let mut d_adam = Adam::new(disc.params.len(), cfg.discriminator_learning_rate).with_betas(0.5, 0.999);
    // generator parameters: [mask logits (hw) | μ (c) | log σ (c)]
    let mut gen = Generator {
        mask_logits: Tensor::filled(&[x.shape()[1], x.shape()[2]], cfg.input_mask_init),
        mu: vec![0.0; c],
        log_sigma: vec![0.0; c],
        discriminator_losses: Vec::with_capacity(cfg.generator_steps),
    };
    let mut g_adam = Adam::new(hw + 2 * c, cfg.generator_learning_rate).with_betas(0.5, 0.999);
    let fail = |reason: String| Error::MatchingFailed { instance: instance.instance_id.clone(), reason };

    for step in 1..=cfg.generator_steps {
        let eta = normal_tensor(x.shape(), rng);
        let z_g = gen.sample(x, &eta);
        let trace = model.trace_blocks(0..b + 1, z_g);
        let fake = trace.output().data().to_vec();
        let real = bottleneck(lambda_star, &features, &deep_stats.sample(rng));

        // discriminator: −log σ(D(real)) − log(1 − σ(D(fake)))
        let tr = disc.forward(real.data());
        let tf = disc.forward(&fake);
        let d_loss = softplus(-tr.logit) + softplus(tf.logit);
        if !d_loss.is_finite() {
            return Err(fail(alloc::format!("non-finite discriminator loss at step {step}")));
        }
        gen.discriminator_losses.push(d_loss);
        let mut d_grad = vec![0.0; disc.params.len()];
        disc.backward(real.data(), &tr, sigmoid(tr.logit) - 1.0, Some(&mut d_grad), false);
        disc.backward(&fake, &tf, sigmoid(tf.logit), Some(&mut d_grad), false);
        d_adam.step(&mut disc.params, &d_grad);

        // generator: −log σ(D(fake)) against the updated discriminator
        let tf = disc.forward(&fake);
        let g_loss = softplus(-tf.logit);
        if !g_loss.is_finite() {
            return Err(fail(alloc::format!("non-finite generator loss at step {step}")));
        }
        let g_fake = disc.backward(&fake, &tf, sigmoid(tf.logit) - 1.0, None, true).expect("input gradient");
        let g_z = model.backward_blocks(&trace, g_fake, None, true).expect("input gradient requested");
        let mut grad = vec![0.0; hw + 2 * c];
        for i in 0..x.len() {
            let (ch, p) = (i / hw, i % hw);
            let s = sigmoid(gen.mask_logits.data()[p]);
            let sigma = libm::exp(gen.log_sigma[ch]);
            let noise = gen.mu[ch] + sigma * eta.data()[i];
            let g = g_z.data()[i];
            grad[p] += g * (x.data()[i] - noise) * s * (1.0 - s);
            grad[hw + ch] += g * (1.0 - s);
            grad[hw + c + ch] += g * (1.0 - s) * sigma * eta.data()[i];
        }
        g_adam.tick();
        g_adam.apply(0, gen.mask_logits.data_mut(), &grad[..hw]);
        g_adam.apply(hw, &mut gen.mu, &grad[hw..hw + c]);
        g_adam.apply(hw + c, &mut gen.log_sigma, &grad[hw + c..]);
    }

    let first = gen.discriminator_losses[0];
    let constant = gen.discriminator_losses.iter().all(|l| (l - first).abs() <= f64::EPSILON * first.abs());
    if constant && cfg.generator_steps > 1 {
        return Err(fail("discriminator loss is constant; the matcher collapsed".into()));
    }
    Ok(gen)
}

/// `ΛZ_G + (1−Λ)ε` with `Λ` an `[H, W]` mask broadcast over channels.
pub fn input_bottleneck(lambda: &Tensor, z_g: &Tensor, noise: &Tensor) -> Tensor {
    let hw = z_g.spatial_len();
    let data = (0..z_g.len())
        .map(|i| {
            let l = lambda.data()[i % hw];
            l * z_g.data()[i] + (1.0 - l) * noise.data()[i]
        })
        .collect();
    Tensor::from_vec(z_g.shape(), data)
}

/// Forward pass on `Z_I` for given masks, generator samples and noise.
pub fn input_bottleneck_forward(model: &MilModel, bag: &Bag, lambda: &[Tensor], z_g: &[Tensor], noise: &[Tensor]) -> Result<BagOutput> {
    model.check_instance(bag)?;
    let n_blocks = model.blocks().len();
    let mut h = Vec::with_capacity(bag.len());
    for (((inst, l), z), e) in bag.instances.iter().zip(lambda).zip(z_g).zip(noise) {
        if l.len() != inst.pixels.spatial_len() || z.shape() != inst.pixels.shape() || e.shape() != inst.pixels.shape() {
            return Err(Error::Shape(alloc::format!("input mask for instance {} does not match its pixels", inst.instance_id)));
        }
        h.push(model.run_blocks(0..n_blocks, input_bottleneck(l, z, e)).into_vec());
    }
    Ok(model.head_forward(h)?.into_output())
}

/// Stage 3: optimised input mask logits per instance. The scope of the deep
/// bottleneck applies here too: with [`BottleneckScope::Instance`] every
/// other instance is replaced by pixel noise while one mask is learned.
pub fn optimize_input_mask(
    model: &MilModel,
    bag: &Bag,
    target_class: usize,
    generators: &[Generator],
    input_stats: &InputStats,
    cfg: &InputIbaConfig,
    rng: &mut Rng,
) -> Result<Vec<Tensor>> {
    let n_blocks = model.blocks().len();
    let shape = bag.instances[0].pixels.shape().to_vec();
    let hw = shape[1] * shape[2];
    let per = shape[0] * hw;
    let mut logits: Vec<Tensor> = bag.instances.iter().map(|_| Tensor::filled(&[shape[1], shape[2]], cfg.input_mask_init)).collect();
    let mut adam = Adam::new(hw * bag.len(), cfg.input_mask_learning_rate);
    let scope = cfg.deep.scope;
    let kl_scale = match scope {
        BottleneckScope::Bag => cfg.input_beta / (per * bag.len()) as f64,
        BottleneckScope::Instance => cfg.input_beta / per as f64,
    };

    for step in 1..=cfg.input_mask_steps {
        let mut traces = Vec::with_capacity(bag.len());
        let mut samples = Vec::with_capacity(bag.len());
        let mut kl = Vec::with_capacity(bag.len());
        for ((inst, gen), p) in bag.instances.iter().zip(generators).zip(&logits) {
            let z_g = gen.sample(&inst.pixels, &normal_tensor(&shape, rng));
            let noise = input_stats.sample(&shape, rng);
            let lambda = p.map(sigmoid);
            traces.push(model.trace_blocks(0..n_blocks, input_bottleneck(&lambda, &z_g, &noise)));
            let mut total = 0.0;
            for i in 0..per {
                let r = (z_g.data()[i] - input_stats.mean[i / hw]) / input_stats.std[i / hw];
                total += kl_per_element(p.data()[i % hw], r);
            }
            kl.push(total);
            samples.push((z_g, noise, lambda));
        }
        let open: Vec<Vec<f64>> = traces.iter().map(|t| t.output().data().to_vec()).collect();

        let mut g_h: Vec<Vec<f64>> = Vec::with_capacity(bag.len());
        match scope {
            BottleneckScope::Bag => {
                let head = model.head_forward(open)?;
                let (ce, g_logits) = nn::cross_entropy(&head.logits, target_class);
                let loss = kl_scale * kl.iter().sum::<f64>() + ce;
                if !loss.is_finite() {
                    return Err(Error::Optimization { method: "input_iba", step });
                }
                g_h = model.head_backward(&head, &g_logits, None);
            }
            BottleneckScope::Instance => {
                let closed: Vec<Vec<f64>> =
                    samples.iter().map(|(_, e, _)| model.run_blocks(0..n_blocks, e.clone()).into_vec()).collect();
                for k in 0..bag.len() {
                    let mut h = closed.clone();
                    h[k] = open[k].clone();
                    let head = model.head_forward(h)?;
                    let (ce, g_logits) = nn::cross_entropy(&head.logits, target_class);
                    let loss = kl_scale * kl[k] + ce;
                    if !loss.is_finite() {
                        return Err(Error::Optimization { method: "input_iba", step });
                    }
                    g_h.push(model.head_backward(&head, &g_logits, None).swap_remove(k));
                }
            }
        }
        adam.tick();
        for (k, (trace, g)) in traces.iter().zip(g_h).enumerate() {
            let g_in = model.backward_blocks(trace, g, None, true).expect("input gradient requested");
            let (z_g, noise, lambda) = &samples[k];
            let mut grad = vec![0.0; hw];
            for i in 0..per {
                let p = i % hw;
                let l = lambda.data()[p];
                let r = (z_g.data()[i] - input_stats.mean[i / hw]) / input_stats.std[i / hw];
                grad[p] += g_in.data()[i] * (z_g.data()[i] - noise.data()[i]) * l * (1.0 - l)
                    + kl_scale * kl_grad(logits[k].data()[p], r);
            }
            adam.apply(k * hw, logits[k].data_mut(), &grad);
        }
    }
    Ok(logits)
}

pub fn input_iba(model: &MilModel, bag: &Bag, target_class: usize, cfg: &InputIbaConfig) -> Result<AttributionResult> {
    cfg.validate()?;
    check_target(model, target_class)?;
    model.check_instance(bag)?;
    let deep_stats = cfg.deep.stats(model)?;
    let input_stats = cfg
        .input_stats
        .as_ref()
        .ok_or_else(|| Error::config("input_stats", "not calibrated; estimate them on training bags first"))?;
    if input_stats.mean.len() != bag.instances[0].pixels.shape()[0] {
        return Err(Error::config("input_stats", "channel count does not match the instances"));
    }

    let (deep_logits, _) = iba::optimize_mask(model, bag, target_class, &cfg.deep)?;
    let mut rng = rng_for(derive_seed(cfg.rng_seed, &[0x1b1a]), &[bag_stream(&bag.bag_id)]);
    let generators = bag
        .instances
        .iter()
        .zip(&deep_logits)
        .map(|(inst, p)| fit_generator(model, inst, &p.map(sigmoid), deep_stats, cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let logits = optimize_input_mask(model, bag, target_class, &generators, input_stats, cfg, &mut rng)?;
    let maps = logits.iter().map(|p| p.map(sigmoid)).collect();
    Ok(AttributionResult::new(bag, target_class, maps, MethodConfig::InputIba(cfg.clone())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagdata::{generate_synthetic, SynthConfig};
    use crate::milnet::ModelConfig;

    fn setup() -> (MilModel, Vec<Bag>) {
        let model = MilModel::new(ModelConfig::default(), 13).unwrap();
        let data = generate_synthetic(&SynthConfig { num_bags: 3, bag_size: 2, ..SynthConfig::default() }).unwrap();
        (model, data.bags)
    }

    #[test]
    fn default_input_beta() {
        assert_eq!(InputIbaConfig::default().input_beta, 40.0);
    }

    #[test]
    fn open_mask_on_raw_input_reproduces_forward() {
        let (model, bags) = setup();
        let bag = &bags[0];
        let ones: Vec<Tensor> = bag.instances.iter().map(|i| Tensor::filled(&[i.height(), i.width()], 1.0)).collect();
        let z: Vec<Tensor> = bag.instances.iter().map(|i| i.pixels.clone()).collect();
        let mut rng = rng_for(3, &[]);
        let noise: Vec<Tensor> = bag.instances.iter().map(|i| normal_tensor(i.pixels.shape(), &mut rng)).collect();
        let out = input_bottleneck_forward(&model, bag, &ones, &z, &noise).unwrap();
        let clean = model.forward(bag).unwrap();
        for (a, b) in out.logits.iter().zip(&clean.logits) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn input_stats_match_direct_computation() {
        let (_, bags) = setup();
        let s = InputStats::estimate(&bags).unwrap();
        let vals: Vec<f64> = bags.iter().flat_map(|b| &b.instances).flat_map(|i| i.pixels.data()[..i.pixels.spatial_len()].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((s.mean[0] - m).abs() < 1e-12);
    }

    #[test]
    fn frozen_discriminator_is_reported() {
        // Constant real and fake inputs and no learning: the loss cannot move.
        let (model, bags) = setup();
        let stats = NoiseStats::estimate(&model, "backbone.conv3", &bags).unwrap();
        let frozen = NoiseStats { std: vec![1e-300; stats.std.len()], ..stats };
        let cfg = InputIbaConfig {
            generator_steps: 3,
            generator_learning_rate: 1e-300,
            discriminator_learning_rate: 1e-300,
            input_mask_init: 60.0,
            ..InputIbaConfig::default()
        };
        let mut inst = bags[0].instances[0].clone();
        inst.pixels.fill(0.0);
        let lambda = Tensor::filled(&frozen.shape, 1.0);
        let err = fit_generator(&model, &inst, &lambda, &frozen, &cfg, &mut rng_for(1, &[])).unwrap_err();
        assert!(matches!(err, Error::MatchingFailed { ref instance, .. } if *instance == inst.instance_id));
    }

    #[test]
    fn produces_one_unit_range_map_per_instance() {
        let (model, bags) = setup();
        let deep = NoiseStats::estimate(&model, "backbone.conv3", &bags).unwrap();
        let input = InputStats::estimate(&bags).unwrap();
        let cfg = InputIbaConfig {
            deep: IbaConfig { steps: 3, ..IbaConfig::default() },
            generator_steps: 4,
            input_mask_steps: 3,
            ..InputIbaConfig::default()
        }
        .calibrated(deep, input);
        let r = input_iba(&model, &bags[1], 0, &cfg).unwrap();
        r.check_alignment(&bags[1]).unwrap();
        assert!(r.maps.iter().flat_map(|m| m.data()).all(|&v| (0.0..=1.0).contains(&v)));
        assert!(!r.signed);
    }
}
