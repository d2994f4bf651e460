//! Ground-truth localization: pointing game and mass inside the mask.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bagdata::Bag;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceLocalization {
    pub instance_id: String,
    /// The map's argmax (first in row-major order) lies inside the mask.
    pub hit: bool,
    /// `Σ map inside mask / Σ map`; `None` when the map sums to zero.
    pub mass_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub scores: Vec<InstanceLocalization>,
    /// Instances without a mask, or with an empty one.
    pub skipped: usize,
}

impl LocalizationReport {
    pub fn hit_rate(&self) -> Option<f64> {
        (!self.scores.is_empty()).then(|| self.scores.iter().filter(|s| s.hit).count() as f64 / self.scores.len() as f64)
    }

    pub fn merge(&mut self, other: LocalizationReport) {
        self.scores.extend(other.scores);
        self.skipped += other.skipped;
    }
}

pub fn argmax_pixel(map: &Tensor) -> usize {
    let d = map.data();
    (0..d.len()).fold(0, |best, i| if d[i] > d[best] { i } else { best })
}

/// Scores one map against one binary mask.
pub fn score_map(map: &Tensor, mask: &Tensor) -> (bool, Option<f64>) {
    let hit = mask.data()[argmax_pixel(map)] > 0.0;
    let total = map.sum();
    let inside: f64 = map.data().iter().zip(mask.data()).filter(|(_, &m)| m > 0.0).map(|(v, _)| v).sum();
    (hit, (total != 0.0).then(|| inside / total))
}

pub fn localization_score(maps: &[Tensor], bag: &Bag) -> Result<LocalizationReport> {
    if maps.len() != bag.len() {
        return Err(Error::Shape(alloc::format!("{} maps for {} instances of bag {}", maps.len(), bag.len(), bag.bag_id)));
    }
    let mut report = LocalizationReport::default();
    for (map, inst) in maps.iter().zip(&bag.instances) {
        let mask = match &inst.ground_truth_mask {
            Some(m) if inst.has_motif() => m,
            _ => {
                report.skipped += 1;
                continue;
            }
        };
        if map.shape() != mask.shape() {
            return Err(Error::Shape(alloc::format!("map does not match the mask of instance {}", inst.instance_id)));
        }
        let (hit, mass_fraction) = score_map(map, mask);
        report.scores.push(InstanceLocalization { instance_id: inst.instance_id.clone(), hit, mass_fraction });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn mask() -> Tensor {
        Tensor::from_vec(&[2, 3], vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0])
    }

    #[test]
    fn map_equal_to_mask() {
        assert_eq!(score_map(&mask(), &mask()), (true, Some(1.0)));
    }

    #[test]
    fn map_outside_mask() {
        let map = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, 0.0, 2.0, 0.5, 0.0]);
        assert_eq!(score_map(&map, &mask()), (false, Some(0.0)));
    }

    #[test]
    fn uniform_map_gives_area_fraction() {
        let (_, frac) = score_map(&Tensor::filled(&[2, 3], 0.37), &mask());
        assert!((frac.unwrap() - 2.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn zero_map_is_undefined() {
        assert_eq!(score_map(&Tensor::zeros(&[2, 3]), &mask()).1, None);
    }
}
