//! Insertion and deletion curves over a bag-global (or per-instance) pixel
//! ranking, with a zero baseline.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::BagScorer;
use crate::bagdata::Bag;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveMode {
    Insertion,
    Deletion,
}

impl CurveMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CurveMode::Insertion => "insertion",
            CurveMode::Deletion => "deletion",
        }
    }
}

/// How pixels compete for a perturbation budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingScope {
    /// All pixels of the bag ranked jointly.
    #[default]
    Bag,
    /// Each instance perturbs the same fraction of its own pixels.
    Instance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveConfig {
    /// Number of equal intervals between fraction 0 and 1.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub scope: RankingScope,
}

fn default_steps() -> usize {
    20
}

impl Default for CurveConfig {
    fn default() -> Self {
        CurveConfig { steps: default_steps(), scope: RankingScope::Bag }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCurve {
    pub mode: CurveMode,
    /// `(fraction, score)`, fractions strictly increasing from 0 to 1.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// `(instance, pixel)` pairs sorted by map value, descending; ties by
/// instance index, then pixel index.
pub fn rank_pixels(maps: &[Tensor]) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> =
        maps.iter().enumerate().flat_map(|(k, m)| (0..m.len()).map(move |p| (k, p))).collect();
    order.sort_by(|a, b| maps[b.0].data()[b.1].total_cmp(&maps[a.0].data()[a.1]).then(a.cmp(b)));
    order
}

fn check_maps(bag: &Bag, maps: &[Tensor]) -> Result<()> {
    if maps.len() != bag.len() {
        return Err(Error::Shape(alloc::format!("{} maps for {} instances of bag {}", maps.len(), bag.len(), bag.bag_id)));
    }
    for (m, inst) in maps.iter().zip(&bag.instances) {
        if m.shape() != [inst.height(), inst.width()] {
            return Err(Error::Shape(alloc::format!(
                "map of shape {:?} does not match instance {} ({}x{})",
                m.shape(),
                inst.instance_id,
                inst.height(),
                inst.width()
            )));
        }
    }
    Ok(())
}

/// Ordered perturbation schedule: `schedule[i]` lists the pixels touched
/// between fraction `i/steps` and `(i+1)/steps`.
fn schedule(maps: &[Tensor], steps: usize, scope: RankingScope) -> Vec<Vec<(usize, usize)>> {
    let cut = |t: usize, total: usize| (t as f64 / steps as f64 * total as f64).round() as usize;
    let mut out = vec![Vec::new(); steps];
    match scope {
        RankingScope::Bag => {
            let order = rank_pixels(maps);
            for (i, chunk) in out.iter_mut().enumerate() {
                chunk.extend_from_slice(&order[cut(i, order.len())..cut(i + 1, order.len())]);
            }
        }
        RankingScope::Instance => {
            for (k, m) in maps.iter().enumerate() {
                let order = rank_pixels(core::slice::from_ref(m));
                for (i, chunk) in out.iter_mut().enumerate() {
                    chunk.extend(order[cut(i, order.len())..cut(i + 1, order.len())].iter().map(|&(_, p)| (k, p)));
                }
            }
        }
    }
    out
}

fn set_pixel(bag: &mut Bag, source: &Bag, k: usize, p: usize, insert: bool) {
    let px = &mut bag.instances[k].pixels;
    let hw = px.spatial_len();
    let c = px.shape()[0];
    for ch in 0..c {
        px.data_mut()[ch * hw + p] = if insert { source.instances[k].pixels.data()[ch * hw + p] } else { 0.0 };
    }
}

/// Copy of `bag` with every pixel of every instance set to the baseline.
pub fn zero_bag(bag: &Bag) -> Bag {
    let mut out = bag.clone();
    out.instances.iter_mut().for_each(|i| i.pixels.fill(0.0));
    out
}

pub fn perturbation_curve(scorer: &dyn BagScorer, bag: &Bag, maps: &[Tensor], mode: CurveMode, cfg: &CurveConfig) -> Result<PerturbationCurve> {
    check_maps(bag, maps)?;
    if cfg.steps == 0 {
        return Err(Error::config("steps", "must be at least 1"));
    }
    let plan = schedule(maps, cfg.steps, cfg.scope);
    let insert = mode == CurveMode::Insertion;
    let mut current = if insert { zero_bag(bag) } else { bag.clone() };
    let mut points = Vec::with_capacity(cfg.steps + 1);
    points.push((0.0, scorer.score(&current)?));
    for (i, chunk) in plan.iter().enumerate() {
        for &(k, p) in chunk {
            set_pixel(&mut current, bag, k, p, insert);
        }
        let fraction = if i + 1 == cfg.steps { 1.0 } else { (i + 1) as f64 / cfg.steps as f64 };
        points.push((fraction, scorer.score(&current)?));
    }
    let auc = trapezoid(&points);
    Ok(PerturbationCurve { mode, points, auc })
}

pub fn insertion_curve(scorer: &dyn BagScorer, bag: &Bag, maps: &[Tensor], cfg: &CurveConfig) -> Result<PerturbationCurve> {
    perturbation_curve(scorer, bag, maps, CurveMode::Insertion, cfg)
}

pub fn deletion_curve(scorer: &dyn BagScorer, bag: &Bag, maps: &[Tensor], cfg: &CurveConfig) -> Result<PerturbationCurve> {
    perturbation_curve(scorer, bag, maps, CurveMode::Deletion, cfg)
}

/// Copy of `bag` with the top `fraction` of pixels (by `maps`) set to zero.
pub fn remove_top(bag: &Bag, maps: &[Tensor], fraction: f64, scope: RankingScope) -> Result<Bag> {
    check_maps(bag, maps)?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config("percentage", "must lie in [0, 100]"));
    }
    let mut out = bag.clone();
    let take = |n: usize| (fraction * n as f64).round() as usize;
    match scope {
        RankingScope::Bag => {
            let order = rank_pixels(maps);
            for &(k, p) in &order[..take(order.len())] {
                set_pixel(&mut out, bag, k, p, false);
            }
        }
        RankingScope::Instance => {
            for (k, m) in maps.iter().enumerate() {
                let order = rank_pixels(core::slice::from_ref(m));
                for &(_, p) in &order[..take(order.len())] {
                    set_pixel(&mut out, bag, k, p, false);
                }
            }
        }
    }
    Ok(out)
}

/// Both curves of one bag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagCurves {
    pub bag_id: String,
    pub insertion: PerturbationCurve,
    pub deletion: PerturbationCurve,
}

pub fn bag_curves(scorer: &dyn BagScorer, bag: &Bag, maps: &[Tensor], cfg: &CurveConfig) -> Result<BagCurves> {
    Ok(BagCurves {
        bag_id: bag.bag_id.clone(),
        insertion: insertion_curve(scorer, bag, maps, cfg)?,
        deletion: deletion_curve(scorer, bag, maps, cfg)?,
    })
}
