//! Remove-and-retrain: zero the top-ranked pixels of every bag, retrain
//! from scratch and measure test accuracy.
//!
//! Maps come from one reference model and are computed once per bag. A
//! cell is one `(series, percentage, seed)` retrain; cells are independent
//! so callers may run them in parallel and assemble the report afterwards.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::curves::{remove_top, RankingScope};
use super::{mean_std, random_maps};
use crate::bagdata::{Bag, Dataset};
use crate::milnet::{MilModel, ModelConfig};
use crate::trainer::{evaluate, train, TrainConfig};
use crate::{Error, Result, Tensor};

pub const RANDOM_SERIES: &str = "random";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoarConfig {
    /// Removal percentages in `[0, 100]`.
    #[serde(default = "defaults::percentages")]
    pub percentages: Vec<f64>,
    /// Retrain seeds; each cell averages over all of them.
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub scope: RankingScope,
    /// Seed of the random-ranking baseline maps.
    #[serde(default)]
    pub random_seed: u64,
}

mod defaults {
    use alloc::vec;
    use alloc::vec::Vec;
    pub fn percentages() -> Vec<f64> {
        vec![10.0, 30.0, 50.0, 70.0, 90.0]
    }
    pub fn seeds() -> Vec<u64> {
        vec![0, 1, 2]
    }
}

impl Default for RoarConfig {
    fn default() -> Self {
        RoarConfig { percentages: defaults::percentages(), seeds: defaults::seeds(), scope: RankingScope::Bag, random_seed: 0 }
    }
}

impl RoarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.percentages.iter().any(|p| !(0.0..=100.0).contains(p)) {
            return Err(Error::config("percentages", "must lie in [0, 100]"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoarCell {
    pub percentage: f64,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoarSeries {
    pub name: String,
    pub cells: Vec<RoarCell>,
}

impl RoarSeries {
    /// Mean and population std of the successful cells at `percentage`.
    pub fn accuracy_at(&self, percentage: f64) -> Option<(f64, f64)> {
        let acc: Vec<f64> = self.cells.iter().filter(|c| c.percentage == percentage).filter_map(|c| c.accuracy).collect();
        mean_std(&acc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoarReport {
    /// Retrains on unmodified data, one per seed.
    pub baseline: Vec<RoarCell>,
    pub series: Vec<RoarSeries>,
}

impl RoarReport {
    pub fn baseline_accuracy(&self) -> Option<(f64, f64)> {
        let acc: Vec<f64> = self.baseline.iter().filter_map(|c| c.accuracy).collect();
        mean_std(&acc)
    }

    pub fn series(&self, name: &str) -> Option<&RoarSeries> {
        self.series.iter().find(|s| s.name == name)
    }
}

/// Maps of every bag of the three splits for one series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesMaps {
    pub name: String,
    pub train: Vec<Vec<Tensor>>,
    pub val: Vec<Vec<Tensor>>,
    pub test: Vec<Vec<Tensor>>,
}

/// A fully prepared ROAR experiment.
pub struct RoarPlan<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub config: RoarConfig,
    pub series: Vec<SeriesMaps>,
}

/// One unit of work: series index (`None` for the unmodified baseline),
/// percentage and seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSpec {
    pub series: Option<usize>,
    pub percentage: f64,
    pub seed: u64,
}

fn maps_for(data: &Dataset, provider: &mut dyn FnMut(&Bag) -> Result<Vec<Tensor>>) -> Result<Vec<Vec<Tensor>>> {
    data.bags
        .iter()
        .map(|b| provider(b).map_err(|e| Error::Data(alloc::format!("attribution of bag {} failed: {e}", b.bag_id))))
        .collect()
}

impl<'a> RoarPlan<'a> {
    /// Computes every series' maps up front. A `random` series is appended.
    pub fn new(
        train: &'a Dataset,
        val: &'a Dataset,
        test: &'a Dataset,
        providers: Vec<(String, &mut dyn FnMut(&Bag) -> Result<Vec<Tensor>>)>,
        model_config: ModelConfig,
        train_config: TrainConfig,
        config: RoarConfig,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::config("roar", "requires a non-empty train split"));
        }
        let mut series = Vec::new();
        for (name, provider) in providers {
            if name == RANDOM_SERIES {
                return Err(Error::config("roar", "the name `random` is reserved for the baseline"));
            }
            series.push(SeriesMaps {
                name,
                train: maps_for(train, provider)?,
                val: maps_for(val, provider)?,
                test: maps_for(test, provider)?,
            });
        }
        let seed = config.random_seed;
        let mut random = |b: &Bag| Ok(random_maps(b, seed));
        series.push(SeriesMaps {
            name: RANDOM_SERIES.into(),
            train: maps_for(train, &mut random)?,
            val: maps_for(val, &mut random)?,
            test: maps_for(test, &mut random)?,
        });
        Ok(RoarPlan { train, val, test, model_config, train_config, config, series })
    }

    pub fn cells(&self) -> Vec<CellSpec> {
        let mut cells: Vec<CellSpec> = self.config.seeds.iter().map(|&seed| CellSpec { series: None, percentage: 0.0, seed }).collect();
        for s in 0..self.series.len() {
            for &percentage in &self.config.percentages {
                for &seed in &self.config.seeds {
                    cells.push(CellSpec { series: Some(s), percentage, seed });
                }
            }
        }
        cells
    }

    fn perturb(&self, data: &Dataset, maps: &[Vec<Tensor>], fraction: f64) -> Result<Dataset> {
        let bags = data
            .bags
            .iter()
            .zip(maps)
            .map(|(b, m)| remove_top(b, m, fraction, self.config.scope))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { bags, num_classes: data.num_classes, split_tag: data.split_tag })
    }

    fn retrain(&self, train_set: &Dataset, val_set: &Dataset, test_set: &Dataset, seed: u64) -> Result<f64> {
        let model = MilModel::new(self.model_config.clone(), seed)?;
        let cfg = TrainConfig { rng_seed: seed, ..self.train_config.clone() };
        let (model, _) = train(model, train_set, val_set, &cfg)?;
        Ok(evaluate(&model, test_set)?.accuracy)
    }

    /// Runs one retrain. Failures are recorded in the cell.
    pub fn run_cell(&self, spec: CellSpec) -> RoarCell {
        let outcome = match spec.series {
            None => self.retrain(self.train, self.val, self.test, spec.seed),
            Some(s) => {
                let maps = &self.series[s];
                let f = spec.percentage / 100.0;
                (|| {
                    let train = self.perturb(self.train, &maps.train, f)?;
                    let val = self.perturb(self.val, &maps.val, f)?;
                    let test = self.perturb(self.test, &maps.test, f)?;
                    self.retrain(&train, &val, &test, spec.seed)
                })()
            }
        };
        let (accuracy, error) = match outcome {
            Ok(a) => (Some(a), None),
            Err(e) => (None, Some(e.to_string())),
        };
        RoarCell { percentage: spec.percentage, seed: spec.seed, accuracy, error }
    }

    /// Collects finished cells (in any order) into a report.
    pub fn assemble(&self, results: Vec<(CellSpec, RoarCell)>) -> RoarReport {
        let mut baseline = Vec::new();
        let mut series: Vec<RoarSeries> =
            self.series.iter().map(|s| RoarSeries { name: s.name.clone(), cells: Vec::new() }).collect();
        let mut results = results;
        results.sort_by(|a, b| {
            (a.0.series, a.0.seed).cmp(&(b.0.series, b.0.seed)).then(a.0.percentage.total_cmp(&b.0.percentage))
        });
        for (spec, cell) in results {
            match spec.series {
                None => baseline.push(cell),
                Some(s) => series[s].cells.push(cell),
            }
        }
        for s in &mut series {
            s.cells.sort_by(|a, b| a.percentage.total_cmp(&b.percentage).then(a.seed.cmp(&b.seed)));
        }
        RoarReport { baseline, series }
    }

    /// Runs every cell sequentially.
    pub fn run(&self) -> RoarReport {
        let results = self.cells().into_iter().map(|c| (c, self.run_cell(c))).collect();
        self.assemble(results)
    }
}

/// Convenience wrapper: plan and run sequentially.
pub fn roar(
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    providers: Vec<(String, &mut dyn FnMut(&Bag) -> Result<Vec<Tensor>>)>,
    model_config: ModelConfig,
    train_config: TrainConfig,
    config: RoarConfig,
) -> Result<RoarReport> {
    Ok(RoarPlan::new(train, val, test, providers, model_config, train_config, config)?.run())
}
