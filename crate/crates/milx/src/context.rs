//! Per-invocation state shared by the commands.

use std::path::{Path, PathBuf};

use milx_core::attributions::{InputStats, Method, MethodConfig, NoiseStats};
use milx_core::bagdata::{Bag, Dataset, SplitTag};
use milx_core::milnet::MilModel;

use crate::config::{LoadedConfig, RunConfig, Selection};
use crate::dataset_io::{self, DatasetDir};
use crate::digest::Provenance;
use crate::error::{Error, Result};

/// Command-line options common to every command.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub force: bool,
    /// Record wall-clock time in training logs.
    pub timestamps: bool,
}

pub struct Context {
    pub loaded: LoadedConfig,
    /// Effective configuration (global seed applied).
    pub config: RunConfig,
    pub config_digest: String,
    pub options: Options,
}

impl Context {
    pub fn new(options: Options) -> Result<Self> {
        let mut loaded = LoadedConfig::load(&options.config)?;
        if let Some(seed) = options.seed {
            loaded.config = loaded.config.clone().with_seed(seed);
        }
        loaded.validate()?;
        let config = loaded.config.effective();
        let config_digest = loaded.config.digest();
        Ok(Context { loaded, config, config_digest, options })
    }

    pub fn provenance(&self, checkpoint_digest: &str) -> Provenance {
        Provenance { config_digest: self.config_digest.clone(), checkpoint_digest: checkpoint_digest.into() }
    }

    /// `--out` if given, else `<paths.out>/<command>`.
    pub fn out_dir(&self, command: &str) -> Result<PathBuf> {
        if let Some(o) = &self.options.out {
            return Ok(o.clone());
        }
        let root = self.loaded.require_path("out", &self.config.paths.out)?;
        Ok(self.loaded.resolve(&root).join(command))
    }

    /// An input path from `[paths]` that must exist.
    pub fn input(&self, key: &str, value: &Option<PathBuf>) -> Result<PathBuf> {
        let p = self.loaded.resolve(&self.loaded.require_path(key, value)?);
        if !p.exists() {
            return Err(Error::Config(format!("paths.{key}: {} does not exist", p.display())));
        }
        Ok(p)
    }

    pub fn dataset(&self) -> Result<DatasetDir> {
        let dir = self.input("dataset", &self.config.paths.dataset)?;
        let data = dataset_io::read_dataset(&dir)?;
        let m = &self.config.model;
        if data.manifest.num_classes != m.num_classes || data.manifest.image_size != m.image_size {
            return Err(Error::Data(format!(
                "dataset has {} classes at {} px but the model expects {} classes at {} px",
                data.manifest.num_classes, data.manifest.image_size, m.num_classes, m.image_size
            )));
        }
        Ok(data)
    }

    /// `paths.checkpoint`, defaulting to the first run of `train`.
    pub fn checkpoint_path(&self) -> Result<PathBuf> {
        let value = self.config.paths.checkpoint.clone().or_else(|| {
            self.config.paths.out.as_ref().map(|o| o.join("train").join("run-0").join("model.safetensors"))
        });
        self.input("checkpoint", &value)
    }
}

/// Applies a selection to a loaded dataset. Unknown bag ids are a config
/// error.
pub fn select(data: &DatasetDir, sel: &Selection) -> Result<Vec<Bag>> {
    let pool = data.select(&sel.split)?;
    let mut bags: Vec<Bag> = if sel.bag_ids.is_empty() {
        pool.bags
    } else {
        sel.bag_ids
            .iter()
            .map(|id| {
                pool.bags
                    .iter()
                    .find(|b| &b.bag_id == id)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("bag `{id}` is not in split `{}`", sel.split)))
            })
            .collect::<Result<_>>()?
    };
    if let Some(n) = sel.limit {
        bags.truncate(n);
    }
    Ok(bags)
}

/// Method configs with IBA noise statistics (and InputIBA pixel statistics)
/// estimated on the training bags, or on every bag when there is no train
/// split.
pub fn calibrated_configs(ctx: &Context, model: &MilModel, data: &DatasetDir, methods: &[Method]) -> Result<Vec<(Method, MethodConfig)>> {
    let train: Dataset = data.split(SplitTag::Train);
    let calib = if train.is_empty() { data.all().bags } else { train.bags };
    methods
        .iter()
        .map(|&m| {
            let cfg = match ctx.config.methods.config_for(m) {
                MethodConfig::Iba(c) => {
                    let stats = NoiseStats::estimate(model, &c.layer, &calib)?;
                    MethodConfig::Iba(c.calibrated(stats))
                }
                MethodConfig::InputIba(c) => {
                    let deep = NoiseStats::estimate(model, &c.deep.layer, &calib)?;
                    let input = InputStats::estimate(&calib)?;
                    MethodConfig::InputIba(c.calibrated(deep, input))
                }
                other => other,
            };
            Ok((m, cfg))
        })
        .collect()
}

pub fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn parse_methods(names: &[String]) -> Result<Vec<Method>> {
    names.iter().map(|n| n.parse::<Method>().map_err(Error::from)).collect()
}
