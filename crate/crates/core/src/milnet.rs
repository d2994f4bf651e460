//! Attention-based MIL network.
//!
//! Each instance passes through a convolutional embedder (a small backbone of
//! conv blocks, then a head of two conv blocks, adaptive max pooling and a
//! fully connected layer) giving `h_k`. Attention pooling forms
//! `z = Σ α_k h_k` with `α = softmax_k(wᵀ tanh(V h_k))`, and a two-layer
//! classifier maps `z` to class logits.
//!
//! Every layer has a stable name in the registry (`backbone.conv3`,
//! `head.conv2`, `attention.v`, ...). Parameters are stored under
//! `<layer>.weight` / `<layer>.bias`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};

use crate::bagdata::{Bag, CHANNELS};
use crate::nn::{self, ConvGeom, Pooled};
use crate::rng::{rng_for, standard_normal};
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "defaults::in_channels")]
    pub in_channels: usize,
    #[serde(default = "defaults::image_size")]
    pub image_size: usize,
    /// Output channels of each backbone conv block.
    #[serde(default = "defaults::backbone_channels")]
    pub backbone_channels: Vec<usize>,
    /// Whether each backbone block ends with 2×2 max pooling.
    #[serde(default = "defaults::backbone_pool")]
    pub backbone_pool: Vec<bool>,
    /// Output channels of the two head conv blocks.
    #[serde(default = "defaults::head_channels")]
    pub head_channels: [usize; 2],
    /// Side of the adaptive max-pool output grid.
    #[serde(default = "defaults::head_pool_size")]
    pub head_pool_size: usize,
    #[serde(default = "defaults::kernel")]
    pub kernel: usize,
    #[serde(default = "defaults::embed_dim")]
    pub embed_dim: usize,
    /// Width of the attention hidden layer (rows of `V`).
    #[serde(default = "defaults::attention_dim")]
    pub attention_dim: usize,
    #[serde(default = "defaults::classifier_hidden")]
    pub classifier_hidden: usize,
    #[serde(default = "defaults::num_classes")]
    pub num_classes: usize,
}

mod defaults {
    use alloc::vec;
    use alloc::vec::Vec;
    pub fn in_channels() -> usize {
        3
    }
    pub fn image_size() -> usize {
        32
    }
    pub fn backbone_channels() -> Vec<usize> {
        vec![8, 16, 16]
    }
    pub fn backbone_pool() -> Vec<bool> {
        vec![true, true, false]
    }
    pub fn head_channels() -> [usize; 2] {
        [16, 16]
    }
    pub fn head_pool_size() -> usize {
        2
    }
    pub fn kernel() -> usize {
        3
    }
    pub fn embed_dim() -> usize {
        64
    }
    pub fn attention_dim() -> usize {
        128
    }
    pub fn classifier_hidden() -> usize {
        32
    }
    pub fn num_classes() -> usize {
        3
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: defaults::in_channels(),
            image_size: defaults::image_size(),
            backbone_channels: defaults::backbone_channels(),
            backbone_pool: defaults::backbone_pool(),
            head_channels: defaults::head_channels(),
            head_pool_size: defaults::head_pool_size(),
            kernel: defaults::kernel(),
            embed_dim: defaults::embed_dim(),
            attention_dim: defaults::attention_dim(),
            classifier_hidden: defaults::classifier_hidden(),
            num_classes: defaults::num_classes(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.is_empty() {
            return Err(Error::config("backbone_channels", "at least one backbone block is required"));
        }
        if self.backbone_channels.len() != self.backbone_pool.len() {
            return Err(Error::config("backbone_pool", "needs one entry per backbone block"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("kernel", "must be odd"));
        }
        let mut side = self.image_size;
        for &pool in &self.backbone_pool {
            if pool {
                if side % 2 != 0 || side < 2 {
                    return Err(Error::config("image_size", "must stay even through every pooling stage"));
                }
                side /= 2;
            }
        }
        if self.head_pool_size == 0 || self.head_pool_size > side {
            return Err(Error::config("head_pool_size", format!("must lie in 1..={side}")));
        }
        for (field, v) in [
            ("in_channels", self.in_channels),
            ("embed_dim", self.embed_dim),
            ("attention_dim", self.attention_dim),
            ("classifier_hidden", self.classifier_hidden),
            ("num_classes", self.num_classes),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.backbone_channels.iter().chain(&self.head_channels).any(|&c| c == 0) {
            return Err(Error::config("backbone_channels", "channel counts must be positive"));
        }
        Ok(())
    }
}

pub type ParamId = usize;

/// Named parameter tensors in registry order. Gradient accumulators use the
/// same type and layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    fn push(&mut self, name: String, t: Tensor) -> ParamId {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::zeros_like).collect() }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scale(&mut self, alpha: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale(alpha));
    }

    pub fn clear(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(0.0));
    }

    fn data(&self, id: ParamId) -> &[f64] {
        self.tensors[id].data()
    }

    fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.tensors[id].data_mut()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    AdaptiveMaxPool,
    Dense,
    AttentionV,
    AttentionW,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub output_shape: Vec<usize>,
}

/// One stage of the per-instance embedder.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockKind {
    /// conv → ReLU → optional 2×2 max pool.
    Conv { geom: ConvGeom, pool: bool, weight: ParamId, bias: ParamId },
    AdaptiveMaxPool { out: usize },
    /// flatten → dense → ReLU.
    Dense { in_dim: usize, out_dim: usize, weight: ParamId, bias: ParamId },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub kind: BlockKind,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct HeadParams {
    pub attn_v: ParamId,
    pub attn_w: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilModel {
    config: ModelConfig,
    blocks: Vec<Block>,
    registry: Vec<LayerInfo>,
    params: ParamStore,
    head: HeadParams,
}

/// Everything one forward pass over a bag produces.
#[derive(Debug, Clone, PartialEq)]
pub struct BagOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub attention: Vec<f64>,
    /// `N × d` instance embeddings `h_k`.
    pub embeddings: Vec<Vec<f64>>,
    pub bag_embedding: Vec<f64>,
}

/// Cached intermediates of one embedder block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCache {
    pub input: Tensor,
    /// Post-ReLU activations (before pooling, for conv blocks).
    pub activation: Vec<f64>,
    pub pool: Option<Pooled>,
    pub output: Tensor,
}

/// Block caches for a contiguous range of embedder blocks on one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedTrace {
    pub start: usize,
    pub blocks: Vec<BlockCache>,
}

impl EmbedTrace {
    pub fn output(&self) -> &Tensor {
        &self.blocks.last().expect("empty trace").output
    }
}

/// Intermediates of attention pooling and the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace {
    pub embeddings: Vec<Vec<f64>>,
    /// `tanh(V h_k)` per instance.
    pub hidden_attention: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub attention: Vec<f64>,
    pub bag_embedding: Vec<f64>,
    /// Post-ReLU classifier hidden layer.
    pub classifier_hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Attention pooling on its own: `s_k = wᵀ tanh(V h_k)`, `α = softmax(s)`,
/// `z = Σ α_k h_k`. `v` is `[L, d]` row-major, `w` has length `L`.
pub fn attention_pool(h: &[Vec<f64>], v: &[f64], w: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (_, _, alpha, z) = attention_pool_full(h, v, w)?;
    Ok((z, alpha))
}

type PoolParts = (Vec<Vec<f64>>, Vec<f64>, Vec<f64>, Vec<f64>);

fn attention_pool_full(h: &[Vec<f64>], v: &[f64], w: &[f64]) -> Result<PoolParts> {
    let n = h.len();
    if n == 0 {
        return Err(Error::Shape("attention pooling needs at least one instance".into()));
    }
    let d = h[0].len();
    let l = w.len();
    if h.iter().any(|row| row.len() != d) {
        return Err(Error::Shape("embedding rows differ in length".into()));
    }
    if v.len() != l * d {
        return Err(Error::Shape(format!("V has {} entries, expected {l}x{d}", v.len())));
    }
    let hidden: Vec<Vec<f64>> =
        h.iter().map(|hk| nn::dense_forward(v, None, hk, l).into_iter().map(libm::tanh).collect()).collect();
    let scores: Vec<f64> = hidden.iter().map(|t| t.iter().zip(w).map(|(a, b)| a * b).sum()).collect();
    let alpha = nn::softmax(&scores);
    let mut z = vec![0.0; d];
    for (a, hk) in alpha.iter().zip(h) {
        for (zj, hj) in z.iter_mut().zip(hk) {
            *zj += a * hj;
        }
    }
    Ok((hidden, scores, alpha, z))
}

impl MilModel {
    /// Builds a model with He-initialised weights and zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut blocks = Vec::new();
        let mut registry = Vec::new();
        let mut rng = rng_for(seed, &[0x1417]);
        let mut init = |shape: &[usize], fan_in: usize, gain: f64| {
            let std = libm::sqrt(gain / fan_in as f64);
            let n = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| std * standard_normal(&mut rng)).collect())
        };

        let k = config.kernel;
        let mut shape = vec![config.in_channels, config.image_size, config.image_size];
        let convs = config
            .backbone_channels
            .iter()
            .zip(&config.backbone_pool)
            .enumerate()
            .map(|(i, (&c, &p))| (format!("backbone.conv{}", i + 1), c, p))
            .chain(config.head_channels.iter().enumerate().map(|(i, &c)| (format!("head.conv{}", i + 1), c, false)));
        for (name, out_c, pool) in convs {
            let (in_c, h, w) = (shape[0], shape[1], shape[2]);
            let geom = ConvGeom { in_channels: in_c, out_channels: out_c, kernel: k, height: h, width: w };
            let weight = params.push(format!("{name}.weight"), init(&[out_c, in_c, k, k], in_c * k * k, 2.0));
            let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[out_c]));
            let out_shape = if pool { vec![out_c, h / 2, w / 2] } else { vec![out_c, h, w] };
            registry.push(LayerInfo { name: name.clone(), kind: LayerKind::Conv, output_shape: out_shape.clone() });
            blocks.push(Block {
                name,
                kind: BlockKind::Conv { geom, pool, weight, bias },
                in_shape: shape.clone(),
                out_shape: out_shape.clone(),
            });
            shape = out_shape;
        }

        let p = config.head_pool_size;
        let pooled = vec![shape[0], p, p];
        registry.push(LayerInfo { name: "head.pool".into(), kind: LayerKind::AdaptiveMaxPool, output_shape: pooled.clone() });
        blocks.push(Block {
            name: "head.pool".into(),
            kind: BlockKind::AdaptiveMaxPool { out: p },
            in_shape: shape.clone(),
            out_shape: pooled.clone(),
        });

        let in_dim: usize = pooled.iter().product();
        let d = config.embed_dim;
        let weight = params.push("head.fc.weight".into(), init(&[d, in_dim], in_dim, 2.0));
        let bias = params.push("head.fc.bias".into(), Tensor::zeros(&[d]));
        registry.push(LayerInfo { name: "head.fc".into(), kind: LayerKind::Dense, output_shape: vec![d] });
        blocks.push(Block {
            name: "head.fc".into(),
            kind: BlockKind::Dense { in_dim, out_dim: d, weight, bias },
            in_shape: pooled,
            out_shape: vec![d],
        });

        let l = config.attention_dim;
        let hc = config.classifier_hidden;
        let c = config.num_classes;
        let head = HeadParams {
            attn_v: params.push("attention.v.weight".into(), init(&[l, d], d + l, 2.0)),
            attn_w: params.push("attention.w.weight".into(), init(&[l], l + 1, 2.0)),
            fc1_w: params.push("classifier.fc1.weight".into(), init(&[hc, d], d, 2.0)),
            fc1_b: params.push("classifier.fc1.bias".into(), Tensor::zeros(&[hc])),
            fc2_w: params.push("classifier.fc2.weight".into(), init(&[c, hc], hc + c, 2.0)),
            fc2_b: params.push("classifier.fc2.bias".into(), Tensor::zeros(&[c])),
        };
        registry.push(LayerInfo { name: "attention.v".into(), kind: LayerKind::AttentionV, output_shape: vec![l] });
        registry.push(LayerInfo { name: "attention.w".into(), kind: LayerKind::AttentionW, output_shape: vec![1] });
        registry.push(LayerInfo { name: "classifier.fc1".into(), kind: LayerKind::Classifier, output_shape: vec![hc] });
        registry.push(LayerInfo { name: "classifier.fc2".into(), kind: LayerKind::Classifier, output_shape: vec![c] });

        Ok(MilModel { config, blocks, registry, params, head })
    }

    /// Rebuilds a model from a config and named parameters (checkpoint load).
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = MilModel::new(config, 0)?;
        if named.len() != model.params.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                named.len()
            )));
        }
        for (name, tensor) in named {
            let idx = model
                .params
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Data(format!("unknown parameter `{name}`")))?;
            if model.params.tensors[idx].shape() != tensor.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    tensor.shape(),
                    model.params.tensors[idx].shape()
                )));
            }
            model.params.tensors[idx] = tensor;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.registry
    }

    pub fn layer(&self, name: &str) -> Option<&LayerInfo> {
        self.registry.iter().find(|l| l.name == name)
    }

    /// Index of the embedder block registered as `name`.
    pub fn block_index(&self, name: &str) -> Result<usize> {
        self.blocks
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| Error::UnsupportedLayer(format!("{name} (not an embedder layer)")))
    }

    /// Name of the last convolutional embedder block.
    pub fn last_conv_layer(&self) -> &str {
        self.blocks
            .iter()
            .rev()
            .find(|b| matches!(b.kind, BlockKind::Conv { .. }))
            .map(|b| b.name.as_str())
            .expect("model has conv blocks")
    }

    pub(crate) fn head_params(&self) -> HeadParams {
        self.head
    }

    pub(crate) fn param(&self, id: ParamId) -> &[f64] {
        self.params.data(id)
    }

    pub fn attention_weights(&self) -> (&[f64], &[f64]) {
        (self.params.data(self.head.attn_v), self.params.data(self.head.attn_w))
    }

    pub fn check_instance(&self, bag: &Bag) -> Result<()> {
        let expected = [self.config.in_channels, self.config.image_size, self.config.image_size];
        debug_assert_eq!(self.config.in_channels, CHANNELS);
        for inst in &bag.instances {
            if inst.pixels.shape() != expected {
                return Err(Error::Shape(format!(
                    "instance {} of bag {} has shape {:?}, model expects {:?}",
                    inst.instance_id,
                    bag.bag_id,
                    inst.pixels.shape(),
                    expected
                )));
            }
        }
        if bag.instances.is_empty() {
            return Err(Error::Shape(format!("bag {} is empty", bag.bag_id)));
        }
        Ok(())
    }

    pub fn forward(&self, bag: &Bag) -> Result<BagOutput> {
        self.check_instance(bag)?;
        let h: Vec<Vec<f64>> = bag.instances.iter().map(|i| self.embed(&i.pixels)).collect();
        Ok(self.head_forward(h)?.into_output())
    }

    /// Forward pass that also returns the activations of the named embedder layers,
    /// one tensor per instance.
    pub fn forward_with_capture(&self, bag: &Bag, layer_names: &[&str]) -> Result<(BagOutput, Vec<Vec<Tensor>>)> {
        self.check_instance(bag)?;
        let idx: Vec<usize> = layer_names.iter().map(|n| self.block_index(n)).collect::<Result<_>>()?;
        let mut captured = vec![Vec::with_capacity(bag.len()); idx.len()];
        let mut h = Vec::with_capacity(bag.len());
        for inst in &bag.instances {
            let mut x = inst.pixels.clone();
            for (b, block) in self.blocks.iter().enumerate() {
                x = self.block_forward(block, &x, false).0;
                for (slot, &want) in idx.iter().enumerate() {
                    if want == b {
                        captured[slot].push(x.clone());
                    }
                }
            }
            h.push(x.into_vec());
        }
        Ok((self.head_forward(h)?.into_output(), captured))
    }

    /// Instance embedding `h_k`.
    pub fn embed(&self, pixels: &Tensor) -> Vec<f64> {
        self.run_blocks(0..self.blocks.len(), pixels.clone()).into_vec()
    }

    /// Runs embedder blocks in `range` without caching.
    pub fn run_blocks(&self, range: Range<usize>, input: Tensor) -> Tensor {
        let mut x = input;
        for block in &self.blocks[range] {
            x = self.block_forward(block, &x, false).0;
        }
        x
    }

    /// Runs embedder blocks in `range`, keeping what backward and LRP need.
    pub fn trace_blocks(&self, range: Range<usize>, input: Tensor) -> EmbedTrace {
        let start = range.start;
        let mut x = input;
        let mut caches = Vec::with_capacity(range.len());
        for block in &self.blocks[range] {
            let (out, cache) = self.block_forward(block, &x, true);
            caches.push(cache.expect("cache requested"));
            x = out;
        }
        EmbedTrace { start, blocks: caches }
    }

    fn block_forward(&self, block: &Block, input: &Tensor, keep: bool) -> (Tensor, Option<BlockCache>) {
        let (activation, pool, output) = match &block.kind {
            BlockKind::Conv { geom, pool, weight, bias } => {
                let pre = nn::conv2d_forward(*geom, input.data(), self.params.data(*weight), Some(self.params.data(*bias)));
                let act = nn::relu(&pre);
                if *pool {
                    let p = nn::adaptive_max_pool(&act, geom.out_channels, geom.height, geom.width, geom.height / 2, geom.width / 2);
                    let out = Tensor::from_vec(&block.out_shape, p.values.clone());
                    (act, Some(p), out)
                } else {
                    let out = Tensor::from_vec(&block.out_shape, act.clone());
                    (act, None, out)
                }
            }
            BlockKind::AdaptiveMaxPool { out } => {
                let s = &block.in_shape;
                let p = nn::adaptive_max_pool(input.data(), s[0], s[1], s[2], *out, *out);
                let t = Tensor::from_vec(&block.out_shape, p.values.clone());
                (Vec::new(), Some(p), t)
            }
            BlockKind::Dense { out_dim, weight, bias, .. } => {
                let pre = nn::dense_forward(self.params.data(*weight), Some(self.params.data(*bias)), input.data(), *out_dim);
                let act = nn::relu(&pre);
                let out = Tensor::from_vec(&block.out_shape, act.clone());
                (act, None, out)
            }
        };
        let cache = keep.then(|| BlockCache { input: input.clone(), activation, pool, output: output.clone() });
        (output, cache)
    }

    /// Backpropagates `grad_out` (w.r.t. the trace output) through the traced
    /// blocks. Accumulates parameter gradients into `grads` when given and
    /// returns the gradient w.r.t. the trace input when `need_input_grad`.
    pub fn backward_blocks(
        &self,
        trace: &EmbedTrace,
        grad_out: Vec<f64>,
        mut grads: Option<&mut ParamStore>,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let mut g = grad_out;
        for (pos, cache) in trace.blocks.iter().enumerate().rev() {
            let block = &self.blocks[trace.start + pos];
            let want_input = need_input_grad || pos > 0;
            g = match &block.kind {
                BlockKind::Conv { geom, pool, weight, bias } => {
                    let mut g_act = if *pool {
                        let mut ga = vec![0.0; cache.activation.len()];
                        nn::max_pool_backward(&g, &cache.pool.as_ref().expect("pool cache").argmax, &mut ga);
                        ga
                    } else {
                        g
                    };
                    nn::relu_backward(&cache.activation, &mut g_act);
                    if let Some(gs) = grads.as_deref_mut() {
                        let (gw, gb) = two_mut(&mut gs.tensors, *weight, *bias);
                        nn::conv2d_backward_params(*geom, &g_act, cache.input.data(), gw.data_mut(), Some(gb.data_mut()));
                    }
                    if want_input {
                        let mut gi = vec![0.0; cache.input.len()];
                        nn::conv2d_backward_input(*geom, &g_act, self.params.data(*weight), &mut gi);
                        gi
                    } else {
                        Vec::new()
                    }
                }
                BlockKind::AdaptiveMaxPool { .. } => {
                    let mut gi = vec![0.0; cache.input.len()];
                    nn::max_pool_backward(&g, &cache.pool.as_ref().expect("pool cache").argmax, &mut gi);
                    gi
                }
                BlockKind::Dense { weight, bias, .. } => {
                    let mut g_act = g;
                    nn::relu_backward(&cache.activation, &mut g_act);
                    if let Some(gs) = grads.as_deref_mut() {
                        let (gw, gb) = two_mut(&mut gs.tensors, *weight, *bias);
                        nn::dense_backward_params(&g_act, cache.input.data(), gw.data_mut(), Some(gb.data_mut()));
                    }
                    if want_input {
                        let mut gi = vec![0.0; cache.input.len()];
                        nn::dense_backward_input(self.params.data(*weight), &g_act, &mut gi);
                        gi
                    } else {
                        Vec::new()
                    }
                }
            };
        }
        need_input_grad.then(|| Tensor::from_vec(trace.blocks[0].input.shape(), g))
    }

    /// Attention pooling and classifier on instance embeddings.
    pub fn head_forward(&self, embeddings: Vec<Vec<f64>>) -> Result<HeadTrace> {
        let (v, w) = self.attention_weights();
        let (hidden_attention, scores, attention, bag_embedding) = attention_pool_full(&embeddings, v, w)?;
        let h = self.head;
        let pre = nn::dense_forward(self.params.data(h.fc1_w), Some(self.params.data(h.fc1_b)), &bag_embedding, self.config.classifier_hidden);
        let classifier_hidden = nn::relu(&pre);
        let logits = nn::dense_forward(self.params.data(h.fc2_w), Some(self.params.data(h.fc2_b)), &classifier_hidden, self.config.num_classes);
        Ok(HeadTrace { embeddings, hidden_attention, scores, attention, bag_embedding, classifier_hidden, logits })
    }

    /// Backpropagates `grad_logits` through classifier and attention pooling,
    /// returning `∂/∂h_k` for every instance.
    pub fn head_backward(&self, trace: &HeadTrace, grad_logits: &[f64], mut grads: Option<&mut ParamStore>) -> Vec<Vec<f64>> {
        let h = self.head;
        let d = self.config.embed_dim;
        let l = self.config.attention_dim;

        let mut g_hidden = vec![0.0; self.config.classifier_hidden];
        nn::dense_backward_input(self.params.data(h.fc2_w), grad_logits, &mut g_hidden);
        if let Some(gs) = grads.as_deref_mut() {
            let (gw, gb) = two_mut(&mut gs.tensors, h.fc2_w, h.fc2_b);
            nn::dense_backward_params(grad_logits, &trace.classifier_hidden, gw.data_mut(), Some(gb.data_mut()));
        }
        nn::relu_backward(&trace.classifier_hidden, &mut g_hidden);
        let mut g_z = vec![0.0; d];
        nn::dense_backward_input(self.params.data(h.fc1_w), &g_hidden, &mut g_z);
        if let Some(gs) = grads.as_deref_mut() {
            let (gw, gb) = two_mut(&mut gs.tensors, h.fc1_w, h.fc1_b);
            nn::dense_backward_params(&g_hidden, &trace.bag_embedding, gw.data_mut(), Some(gb.data_mut()));
        }

        let alpha = &trace.attention;
        let g_alpha: Vec<f64> =
            trace.embeddings.iter().map(|hk| hk.iter().zip(&g_z).map(|(a, b)| a * b).sum()).collect();
        let mean: f64 = alpha.iter().zip(&g_alpha).map(|(a, g)| a * g).sum();
        let g_scores: Vec<f64> = alpha.iter().zip(&g_alpha).map(|(a, g)| a * (g - mean)).collect();

        let (v, w) = self.attention_weights();
        let mut out = Vec::with_capacity(trace.embeddings.len());
        for (k, hk) in trace.embeddings.iter().enumerate() {
            let t = &trace.hidden_attention[k];
            let g_u: Vec<f64> = t.iter().zip(w).map(|(tl, wl)| g_scores[k] * wl * (1.0 - tl * tl)).collect();
            let mut g_h: Vec<f64> = g_z.iter().map(|gz| alpha[k] * gz).collect();
            nn::dense_backward_input(v, &g_u, &mut g_h);
            if let Some(gs) = grads.as_deref_mut() {
                let gw = gs.data_mut(h.attn_w);
                for (acc, tl) in gw.iter_mut().zip(t) {
                    *acc += g_scores[k] * tl;
                }
                nn::dense_backward_params(&g_u, hk, gs.data_mut(h.attn_v), None);
            }
            debug_assert_eq!(g_u.len(), l);
            out.push(g_h);
        }
        out
    }

    /// Cross-entropy loss of the bag label; accumulates parameter gradients.
    pub fn loss_and_grad(&self, bag: &Bag, grads: &mut ParamStore) -> Result<f64> {
        self.check_instance(bag)?;
        let traces: Vec<EmbedTrace> =
            bag.instances.iter().map(|i| self.trace_blocks(0..self.blocks.len(), i.pixels.clone())).collect();
        let head = self.head_forward(traces.iter().map(|t| t.output().data().to_vec()).collect())?;
        let (loss, g_logits) = nn::cross_entropy(&head.logits, bag.label);
        let g_h = self.head_backward(&head, &g_logits, Some(&mut *grads));
        for (trace, g) in traces.iter().zip(g_h) {
            self.backward_blocks(trace, g, Some(&mut *grads), false);
        }
        Ok(loss)
    }

    pub fn loss(&self, bag: &Bag) -> Result<f64> {
        let out = self.forward(bag)?;
        Ok(nn::cross_entropy(&out.logits, bag.label).0)
    }
}

impl HeadTrace {
    pub fn into_output(self) -> BagOutput {
        BagOutput {
            probs: nn::softmax(&self.logits),
            logits: self.logits,
            attention: self.attention,
            embeddings: self.embeddings,
            bag_embedding: self.bag_embedding,
        }
    }
}

fn two_mut(ts: &mut [Tensor], a: usize, b: usize) -> (&mut Tensor, &mut Tensor) {
    assert!(a < b, "parameter ids out of order");
    let (lo, hi) = ts.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

impl core::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let s = match self {
            LayerKind::Conv => "conv",
            LayerKind::AdaptiveMaxPool => "adaptive_max_pool",
            LayerKind::Dense => "dense",
            LayerKind::AttentionV => "attention_v",
            LayerKind::AttentionW => "attention_w",
            LayerKind::Classifier => "classifier",
        };
        f.write_str(s)
    }
}

impl LayerInfo {
    pub fn describe(&self) -> String {
        format!("{} ({}) -> {:?}", self.name, self.kind, self.output_shape)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::bagdata::{generate_synthetic, Instance, SynthConfig};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            backbone_channels: vec![3, 4],
            backbone_pool: vec![true, false],
            head_channels: [4, 3],
            embed_dim: 5,
            attention_dim: 4,
            classifier_hidden: 6,
            ..ModelConfig::default()
        }
    }

    fn tiny_bag(seed: u64) -> Bag {
        let cfg = SynthConfig { num_bags: 1, bag_size: 3, image_size: 8, rng_seed: seed, ..SynthConfig::default() };
        generate_synthetic(&cfg).unwrap().bags.remove(0)
    }

    #[test]
    fn attention_pool_matches_scalar_evaluation() {
        let h = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let v = [1.0, 0.0, 0.0, 1.0];
        let w = [1.0, 0.0];
        let (z, alpha) = attention_pool(&h, &v, &w).unwrap();
        let s0 = libm::tanh(1.0);
        let e0 = libm::exp(s0);
        let a0 = e0 / (e0 + 1.0);
        let a1 = 1.0 / (e0 + 1.0);
        assert!((alpha[0] - a0).abs() < 1e-9 && (alpha[1] - a1).abs() < 1e-9);
        assert!((z[0] - a0).abs() < 1e-9 && (z[1] - a1).abs() < 1e-9);
    }

    #[test]
    fn attention_pool_uniform_cases() {
        let same = vec![vec![0.3, -0.2, 0.9]; 4];
        let v: Vec<f64> = (0..6).map(|i| i as f64 * 0.1 - 0.2).collect();
        let (_, alpha) = attention_pool(&same, &v, &[0.4, -1.0]).unwrap();
        assert!(alpha.iter().all(|a| (a - 0.25).abs() < 1e-12));
        let distinct = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]];
        let (_, alpha) = attention_pool(&distinct, &v, &[0.0, 0.0]).unwrap();
        assert!(alpha.iter().all(|a| (a - 0.5).abs() < 1e-12));
        assert!(matches!(attention_pool(&distinct, &v[..5], &[0.0, 0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn single_instance_gets_full_attention() {
        let model = MilModel::new(tiny_config(), 1).unwrap();
        let mut bag = tiny_bag(3);
        bag.instances.truncate(1);
        let out = model.forward(&bag).unwrap();
        assert_eq!(out.attention, vec![1.0]);
        assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_instances_split_attention_evenly() {
        let model = MilModel::new(tiny_config(), 1).unwrap();
        let mut bag = tiny_bag(3);
        let first = bag.instances[0].clone();
        bag.instances = vec![first.clone(), first];
        let out = model.forward(&bag).unwrap();
        assert!((out.attention[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_names_the_instance() {
        let model = MilModel::new(tiny_config(), 1).unwrap();
        let mut bag = tiny_bag(3);
        bag.instances[1] = Instance::new("odd-one", Tensor::zeros(&[3, 4, 4]), None).unwrap();
        match model.forward(&bag) {
            Err(Error::Shape(msg)) => assert!(msg.contains("odd-one")),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn registry_names_are_unique_and_stable() {
        let a = MilModel::new(ModelConfig::default(), 1).unwrap();
        let b = MilModel::new(ModelConfig::default(), 2).unwrap();
        let names: Vec<&str> = a.layers().iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names, b.layers().iter().map(|l| l.name.as_str()).collect::<Vec<_>>());
        for (i, n) in names.iter().enumerate() {
            assert!(!names[i + 1..].contains(n));
        }
        assert!(names.contains(&"backbone.conv3"));
        assert_eq!(a.last_conv_layer(), "head.conv2");
        assert_eq!(a.layer("backbone.conv3").unwrap().output_shape, vec![16, 8, 8]);
    }

    #[test]
    fn from_parts_round_trips_and_validates() {
        let model = MilModel::new(tiny_config(), 5).unwrap();
        let named: Vec<(String, Tensor)> = model.params().iter().map(|(n, t)| (n.into(), t.clone())).collect();
        let back = MilModel::from_parts(tiny_config(), named.clone()).unwrap();
        assert_eq!(back, model);
        let mut broken = named;
        broken[0].1 = Tensor::zeros(&[1]);
        assert!(MilModel::from_parts(tiny_config(), broken).is_err());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut model = MilModel::new(tiny_config(), 11).unwrap();
        // non-zero biases so their gradients are exercised too
        for t in model.params_mut().tensors_mut() {
            if t.shape().len() == 1 {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = 0.05 * (i as f64 + 1.0);
                }
            }
        }
        let bag = tiny_bag(9);
        let mut grads = model.params().zeros_like();
        model.loss_and_grad(&bag, &mut grads).unwrap();
        let eps = 1e-6;
        for p in 0..model.params().len() {
            let n = model.params().tensors()[p].len();
            for i in (0..n).step_by((n / 7).max(1)) {
                let orig = model.params().tensors()[p].data()[i];
                model.params_mut().tensors_mut()[p].data_mut()[i] = orig + eps;
                let up = model.loss(&bag).unwrap();
                model.params_mut().tensors_mut()[p].data_mut()[i] = orig - eps;
                let down = model.loss(&bag).unwrap();
                model.params_mut().tensors_mut()[p].data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = grads.tensors()[p].data()[i];
                assert!(
                    (fd - an).abs() < 1e-5 * (1.0 + fd.abs()),
                    "{}[{i}]: fd {fd} vs analytic {an}",
                    model.params().names()[p]
                );
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let model = MilModel::new(tiny_config(), 4).unwrap();
        let bag = tiny_bag(2);
        let traces: Vec<EmbedTrace> =
            bag.instances.iter().map(|i| model.trace_blocks(0..model.blocks().len(), i.pixels.clone())).collect();
        let head = model.head_forward(traces.iter().map(|t| t.output().data().to_vec()).collect()).unwrap();
        let target = 1;
        let mut onehot = vec![0.0; 3];
        onehot[target] = 1.0;
        let g_h = model.head_backward(&head, &onehot, None);
        let g_in = model.backward_blocks(&traces[0], g_h[0].clone(), None, true).unwrap();
        let logit = |b: &Bag| model.forward(b).unwrap().logits[target];
        let eps = 1e-6;
        for i in (0..g_in.len()).step_by(13) {
            let mut up = bag.clone();
            up.instances[0].pixels.data_mut()[i] += eps;
            let mut down = bag.clone();
            down.instances[0].pixels.data_mut()[i] -= eps;
            let fd = (logit(&up) - logit(&down)) / (2.0 * eps);
            assert!((fd - g_in.data()[i]).abs() < 1e-6, "pixel {i}: {fd} vs {}", g_in.data()[i]);
        }
    }
}
