//! Bags of instance images, the synthetic ground-truth generator and
//! stratified splitting.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{rng_for, Rng};
use crate::{Error, Result, Tensor};

/// Number of colour channels every instance image carries.
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub instance_id: String,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub pixels: Tensor,
    /// `[H, W]` binary mask of class-discriminative pixels.
    pub ground_truth_mask: Option<Tensor>,
}

impl Instance {
    pub fn new(instance_id: impl Into<String>, pixels: Tensor, ground_truth_mask: Option<Tensor>) -> Result<Self> {
        let instance_id = instance_id.into();
        let (h, w) = match pixels.shape() {
            [CHANNELS, h, w] => (*h, *w),
            s => return Err(Error::Shape(format!("instance {instance_id}: expected [3, H, W] pixels, got {s:?}"))),
        };
        if let Some(bad) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("instance {instance_id}: pixel value {bad} outside [0, 1]")));
        }
        if let Some(mask) = &ground_truth_mask {
            if mask.shape() != [h, w] {
                return Err(Error::Shape(format!(
                    "instance {instance_id}: mask shape {:?} does not match pixels {h}x{w}",
                    mask.shape()
                )));
            }
        }
        Ok(Instance { instance_id, pixels, ground_truth_mask })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// True when the mask marks at least one pixel.
    pub fn has_motif(&self) -> bool {
        self.ground_truth_mask.as_ref().is_some_and(|m| m.data().iter().any(|&v| v > 0.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub bag_id: String,
    pub label: usize,
    pub instances: Vec<Instance>,
}

impl Bag {
    pub fn new(bag_id: impl Into<String>, label: usize, instances: Vec<Instance>) -> Result<Self> {
        let bag_id = bag_id.into();
        if instances.is_empty() {
            return Err(Error::Data(format!("bag {bag_id} has no instances")));
        }
        Ok(Bag { bag_id, label, instances })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Total number of spatial pixel positions over all instances.
    pub fn pixel_count(&self) -> usize {
        self.instances.iter().map(|i| i.height() * i.width()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Unsplit,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
            SplitTag::Unsplit => "unsplit",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub bags: Vec<Bag>,
    pub num_classes: usize,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn new(bags: Vec<Bag>, num_classes: usize, split_tag: SplitTag) -> Result<Self> {
        let d = Dataset { bags, num_classes, split_tag };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "at least two classes are required"));
        }
        for bag in &self.bags {
            if bag.label >= self.num_classes {
                return Err(Error::Data(format!(
                    "bag {} has label {} but the dataset has {} classes",
                    bag.bag_id, bag.label, self.num_classes
                )));
            }
            if bag.instances.is_empty() {
                return Err(Error::Data(format!("bag {} has no instances", bag.bag_id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for bag in &self.bags {
            counts[bag.label] += 1;
        }
        counts
    }

    /// Fraction of bags in the most frequent class.
    pub fn majority_rate(&self) -> f64 {
        if self.bags.is_empty() {
            return 0.0;
        }
        *self.class_counts().iter().max().unwrap_or(&0) as f64 / self.bags.len() as f64
    }

    pub fn with_tag(mut self, tag: SplitTag) -> Self {
        self.split_tag = tag;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "defaults::num_bags")]
    pub num_bags: usize,
    #[serde(default = "defaults::bag_size")]
    pub bag_size: usize,
    #[serde(default = "defaults::image_size")]
    pub image_size: usize,
    #[serde(default = "defaults::num_classes")]
    pub num_classes: usize,
    /// Fraction of a bag's instances that carry the class motif.
    #[serde(default = "defaults::positive_instance_rate")]
    pub positive_instance_rate: f64,
    #[serde(default = "defaults::rng_seed")]
    pub rng_seed: u64,
}

mod defaults {
    pub fn num_bags() -> usize {
        300
    }
    pub fn bag_size() -> usize {
        8
    }
    pub fn image_size() -> usize {
        32
    }
    pub fn num_classes() -> usize {
        3
    }
    pub fn positive_instance_rate() -> f64 {
        0.25
    }
    pub fn rng_seed() -> u64 {
        7
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_bags: defaults::num_bags(),
            bag_size: defaults::bag_size(),
            image_size: defaults::image_size(),
            num_classes: defaults::num_classes(),
            positive_instance_rate: defaults::positive_instance_rate(),
            rng_seed: defaults::rng_seed(),
        }
    }
}

/// Smallest image side the generator (and the default backbone) accepts.
pub const MIN_IMAGE_SIZE: usize = 8;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bag_size == 0 {
            return Err(Error::config("bag_size", "must be positive"));
        }
        if self.image_size < MIN_IMAGE_SIZE || self.image_size % 4 != 0 {
            return Err(Error::config("image_size", format!("must be a multiple of 4 and at least {MIN_IMAGE_SIZE}")));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "at least two classes are required"));
        }
        if !(self.positive_instance_rate > 0.0 && self.positive_instance_rate <= 1.0) {
            return Err(Error::config("positive_instance_rate", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Number of motif-bearing instances in a bag of a painted class.
    pub fn positives_per_bag(&self) -> usize {
        let n = libm::round(self.positive_instance_rate * self.bag_size as f64) as usize;
        n.clamp(1, self.bag_size)
    }

    /// Side length of the square class motif.
    pub fn motif_side(&self) -> usize {
        (libm::round(10.0 * self.image_size as f64 / 32.0) as usize).max(2)
    }
}

/// Motif colour of every class. Class 0 is the motif-free negative class;
/// the others get evenly spaced hues at high saturation.
pub fn motif_palette(num_classes: usize) -> Vec<Option<[f64; 3]>> {
    let painted = num_classes.saturating_sub(1).max(1) as f64;
    (0..num_classes)
        .map(|k| (k > 0).then(|| hsv_to_rgb((k - 1) as f64 / painted, 0.85, 0.92).map(quantize)))
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = libm::floor(h6) as i64 % 6;
    let f = h6 - libm::floor(h6);
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Snaps a value to the 8-bit grid so images survive lossless 8-bit storage exactly.
pub fn quantize(v: f64) -> f64 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) / 255.0
}

pub fn bag_id(index: usize) -> String {
    format!("bag-{index:05}")
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset> {
    generate_shard(config, 0..config.num_bags)
}

/// Generates the bags with indices in `range`. Shards of one config concatenate
/// to exactly the output of [`generate_synthetic`].
pub fn generate_shard(config: &SynthConfig, range: Range<usize>) -> Result<Dataset> {
    config.validate()?;
    let palette = motif_palette(config.num_classes);
    let bags = range.map(|i| synth_bag(config, &palette, i)).collect();
    Ok(Dataset { bags, num_classes: config.num_classes, split_tag: SplitTag::Unsplit })
}

fn synth_bag(config: &SynthConfig, palette: &[Option<[f64; 3]>], index: usize) -> Bag {
    let mut rng = rng_for(config.rng_seed, &[index as u64]);
    let label = rng.gen_range(0..config.num_classes);
    let n_pos = config.positives_per_bag();
    let positives = rand::seq::index::sample(&mut rng, config.bag_size, n_pos).into_vec();
    let bag_id = bag_id(index);
    let instances = (0..config.bag_size)
        .map(|k| {
            let motif = palette[label].filter(|_| positives.contains(&k));
            let (pixels, mask) = paint_instance(config, motif, &mut rng);
            Instance { instance_id: format!("{bag_id}/i{k:02}"), pixels, ground_truth_mask: Some(mask) }
        })
        .collect();
    Bag { bag_id, label, instances }
}

struct Canvas {
    size: usize,
    rgb: Vec<f64>,
}

impl Canvas {
    fn set(&mut self, x: usize, y: usize, color: [f64; 3]) {
        let hw = self.size * self.size;
        for (c, v) in color.iter().enumerate() {
            self.rgb[c * hw + y * self.size + x] = *v;
        }
    }

    fn disk(&mut self, cx: f64, cy: f64, r: f64, color: [f64; 3]) {
        for y in 0..self.size {
            for x in 0..self.size {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= r * r {
                    self.set(x, y, color);
                }
            }
        }
    }
}

/// Dark background with chromatic per-pixel speckle, a dim
/// class-independent "cell" with a nucleus, a few pale achromatic clutter
/// blobs and, for positives, a saturated square.
fn paint_instance(config: &SynthConfig, motif: Option<[f64; 3]>, rng: &mut Rng) -> (Tensor, Tensor) {
    let size = config.image_size;
    let s = size as f64;
    let hw = size * size;
    let mut canvas = Canvas { size, rgb: vec![0.0; CHANNELS * hw] };

    let level = rng.gen_range(0.02..0.10);
    let speckle = rng.gen_range(0.08..0.2);
    for p in 0..hw {
        let base = level + rng.gen_range(-0.03..0.03);
        for c in 0..CHANNELS {
            canvas.rgb[c * hw + p] = base + rng.gen_range(-speckle..speckle);
        }
    }

    let cx = rng.gen_range(0.3..0.7) * s;
    let cy = rng.gen_range(0.3..0.7) * s;
    let r = rng.gen_range(0.22..0.34) * s;
    let tint = rng.gen_range(0.9..1.1);
    canvas.disk(cx, cy, r, [0.26 * tint, 0.20 * tint, 0.32 * tint]);
    canvas.disk(
        cx + rng.gen_range(-0.15..0.15) * r,
        cy + rng.gen_range(-0.15..0.15) * r,
        r * rng.gen_range(0.4..0.6),
        [0.36 * tint, 0.28 * tint, 0.44 * tint],
    );

    for _ in 0..rng.gen_range(1..=3) {
        let g = rng.gen_range(0.45..0.8);
        canvas.disk(
            rng.gen_range(0.0..s),
            rng.gen_range(0.0..s),
            rng.gen_range(1.5..3.0) * s / 32.0,
            [g, g, g],
        );
    }

    let mut mask = vec![0.0; hw];
    if let Some(color) = motif {
        let side = config.motif_side();
        let x0 = rng.gen_range(0..=size - side);
        let y0 = rng.gen_range(0..=size - side);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                canvas.set(x, y, color);
                mask[y * size + x] = 1.0;
            }
        }
    }

    let pixels = canvas.rgb.into_iter().map(quantize).collect();
    (Tensor::from_vec(&[CHANNELS, size, size], pixels), Tensor::from_vec(&[size, size], mask))
}

/// Splits `dataset` into train/val/test with per-class proportions preserved.
///
/// Within each class the bags are put in `bag_id` order, shuffled with `seed`,
/// and cut at the rounded cumulative ratios, so every split holds within one
/// bag of its exact share. Outputs keep the input order.
pub fn stratified_split(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::config("ratios", "every ratio must lie in [0, 1]"));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config("ratios", format!("must sum to 1, got {total}")));
    }
    let counts = dataset.class_counts();
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("class {empty} has no bags; cannot stratify")));
    }

    let mut assignment = vec![SplitTag::Unsplit; dataset.bags.len()];
    for class in 0..dataset.num_classes {
        let mut members: Vec<usize> =
            (0..dataset.bags.len()).filter(|&i| dataset.bags[i].label == class).collect();
        members.sort_by(|&a, &b| dataset.bags[a].bag_id.cmp(&dataset.bags[b].bag_id));
        let mut rng = rng_for(seed, &[0x5911, class as u64]);
        members.shuffle(&mut rng);

        let n = members.len() as f64;
        let train_end = libm::round(ratios[0] * n) as usize;
        let val_end = (libm::round((ratios[0] + ratios[1]) * n) as usize).max(train_end);
        for (pos, &i) in members.iter().enumerate() {
            assignment[i] = if pos < train_end {
                SplitTag::Train
            } else if pos < val_end {
                SplitTag::Val
            } else {
                SplitTag::Test
            };
        }
    }

    let pick = |tag: SplitTag| Dataset {
        bags: dataset
            .bags
            .iter()
            .zip(&assignment)
            .filter(|(_, t)| **t == tag)
            .map(|(b, _)| b.clone())
            .collect(),
        num_classes: dataset.num_classes,
        split_tag: tag,
    };
    Ok((pick(SplitTag::Train), pick(SplitTag::Val), pick(SplitTag::Test)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthConfig {
        SynthConfig { num_bags: 6, bag_size: 4, image_size: 16, ..SynthConfig::default() }
    }

    #[test]
    fn empty_config_gives_empty_dataset() {
        let d = generate_synthetic(&SynthConfig { num_bags: 0, ..tiny() }).unwrap();
        assert!(d.bags.is_empty());
        assert_eq!(d.num_classes, 3);
    }

    #[test]
    fn invalid_fields_are_named() {
        let err = generate_synthetic(&SynthConfig { positive_instance_rate: 0.0, ..tiny() }).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "positive_instance_rate"));
        let err = generate_synthetic(&SynthConfig { bag_size: 0, ..tiny() }).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "bag_size"));
        let err = generate_synthetic(&SynthConfig { image_size: 6, ..tiny() }).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "image_size"));
    }

    #[test]
    fn deterministic_and_shardable() {
        let c = tiny();
        let a = generate_synthetic(&c).unwrap();
        assert_eq!(a, generate_synthetic(&c).unwrap());
        let mut joined = generate_shard(&c, 0..2).unwrap();
        joined.bags.extend(generate_shard(&c, 2..6).unwrap().bags);
        assert_eq!(a, joined);
    }

    #[test]
    fn pixels_are_valid_and_on_the_byte_grid() {
        let d = generate_synthetic(&tiny()).unwrap();
        for inst in d.bags.iter().flat_map(|b| &b.instances) {
            let rebuilt = Instance::new(inst.instance_id.clone(), inst.pixels.clone(), inst.ground_truth_mask.clone());
            assert!(rebuilt.is_ok());
            assert!(inst.pixels.data().iter().all(|v| (v * 255.0 - libm::round(v * 255.0)).abs() < 1e-9));
        }
    }

    #[test]
    fn each_bag_has_the_configured_number_of_positives() {
        let c = tiny();
        for bag in generate_synthetic(&c).unwrap().bags {
            let expected = if bag.label == 0 { 0 } else { c.positives_per_bag() };
            assert_eq!(bag.instances.iter().filter(|i| i.has_motif()).count(), expected);
        }
    }

    #[test]
    fn instance_validation() {
        assert!(matches!(Instance::new("x", Tensor::zeros(&[1, 4, 4]), None), Err(Error::Shape(_))));
        assert!(matches!(Instance::new("x", Tensor::filled(&[3, 4, 4], 1.5), None), Err(Error::Data(_))));
        assert!(matches!(
            Instance::new("x", Tensor::zeros(&[3, 4, 4]), Some(Tensor::zeros(&[4, 5]))),
            Err(Error::Shape(_))
        ));
        assert!(Bag::new("b", 0, Vec::new()).is_err());
    }

    #[test]
    fn split_rejects_bad_ratios_and_empty_classes() {
        let d = generate_synthetic(&SynthConfig { num_bags: 30, ..tiny() }).unwrap();
        assert!(matches!(stratified_split(&d, [0.5, 0.2, 0.2], 1), Err(Error::Config { .. })));
        let few = Dataset { bags: d.bags.iter().filter(|b| b.label == 0).cloned().collect(), ..d.clone() };
        assert!(matches!(stratified_split(&few, [0.6, 0.2, 0.2], 1), Err(Error::Data(_))));
    }
}
