//! Faithfulness benchmark: insertion/deletion AUC, remove-and-retrain and
//! ground-truth localization.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attributions::iba::bag_stream;
use crate::bagdata::Bag;
use crate::milnet::MilModel;
use crate::rng::rng_for;
use crate::{Result, Tensor};

pub mod curves;
pub mod localization;
pub mod roar;

pub use curves::{
    bag_curves, deletion_curve, zero_bag, insertion_curve, perturbation_curve, rank_pixels, remove_top, trapezoid, BagCurves,
    CurveConfig, CurveMode, PerturbationCurve, RankingScope,
};
pub use localization::{localization_score, InstanceLocalization, LocalizationReport};
pub use roar::{roar, CellSpec, RoarCell, RoarConfig, RoarPlan, RoarReport, RoarSeries, RANDOM_SERIES};

/// Anything that scores a bag in `[0, 1]`.
pub trait BagScorer {
    fn score(&self, bag: &Bag) -> Result<f64>;
}

/// Probability of the bag's true class.
impl BagScorer for MilModel {
    fn score(&self, bag: &Bag) -> Result<f64> {
        Ok(self.forward(bag)?.probs[bag.label])
    }
}

/// Mean and population standard deviation; `None` for an empty slice.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, libm::sqrt(var)))
}

/// Uniform random maps, seeded per bag id.
pub fn random_maps(bag: &Bag, seed: u64) -> Vec<Tensor> {
    let mut rng = rng_for(seed, &[0x4a4d, bag_stream(&bag.bag_id)]);
    bag.instances
        .iter()
        .map(|i| {
            let n = i.height() * i.width();
            Tensor::from_vec(&[i.height(), i.width()], (0..n).map(|_| rng.gen::<f64>()).collect())
        })
        .collect()
}

/// Ground-truth masks used as maps; instances without one get zeros.
pub fn ground_truth_maps(bag: &Bag) -> Vec<Tensor> {
    bag.instances
        .iter()
        .map(|i| i.ground_truth_mask.clone().unwrap_or_else(|| Tensor::zeros(&[i.height(), i.width()])))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagFailure {
    pub bag_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub insertion: Option<AucSummary>,
    pub deletion: Option<AucSummary>,
    pub curves: Vec<BagCurves>,
    pub failures: Vec<BagFailure>,
}

/// Summary over already computed per-bag curves.
pub fn summarize(curves: Vec<BagCurves>, failures: Vec<BagFailure>) -> AucReport {
    let pick = |f: fn(&BagCurves) -> f64| {
        let v: Vec<f64> = curves.iter().map(f).collect();
        mean_std(&v).map(|(mean, std)| AucSummary { mean, std, count: v.len() })
    };
    AucReport { insertion: pick(|c| c.insertion.auc), deletion: pick(|c| c.deletion.auc), curves, failures }
}

/// Per-bag curves from `maps_for`, averaged. A failing bag is recorded with
/// its id and the rest continue.
pub fn aggregate_auc(
    scorer: &dyn BagScorer,
    bags: &[Bag],
    mut maps_for: impl FnMut(&Bag) -> Result<Vec<Tensor>>,
    cfg: &CurveConfig,
) -> AucReport {
    let mut curves = Vec::new();
    let mut failures = Vec::new();
    for bag in bags {
        match maps_for(bag).and_then(|m| bag_curves(scorer, bag, &m, cfg)) {
            Ok(c) => curves.push(c),
            Err(e) => failures.push(BagFailure { bag_id: bag.bag_id.clone(), error: e.to_string() }),
        }
    }
    summarize(curves, failures)
}
