//! The TOML run configuration shared by every command.
//!
//! ```toml
//! schema_version = 1
//! rng_seed = 7            # optional; replaces every component seed
//! runs = 1
//!
//! [paths]
//! dataset = "data"
//! checkpoint = "train/run-0/model.safetensors"
//! out = "out"
//!
//! [synth]                 # generator
//! [split]                 # ratios, seed
//! [model]                 # architecture
//! [train]                 # optimiser and early stopping
//! [methods.gradcam]       # one table per attribution method
//! [explain]               # split, bag_ids, limit, methods
//! [bench]                 # split, limit, methods, metrics, [bench.curve], [bench.roar]
//! ```
//!
//! Every table is optional except `schema_version`; missing keys take their
//! documented defaults.

use std::path::{Path, PathBuf};

use milx_core::attributions::{GradcamConfig, IbaConfig, InputIbaConfig, LrpConfig, Method, MethodConfig};
use milx_core::bagdata::SynthConfig;
use milx_core::evalbench::{CurveConfig, RoarConfig};
use milx_core::milnet::ModelConfig;
use milx_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Per-bag curve cache for `bench`; defaults to `<out>/cache` (not reused).
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

fn default_ratios() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { ratios: default_ratios(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodsSection {
    #[serde(default)]
    pub gradcam: GradcamConfig,
    #[serde(default)]
    pub lrp: LrpConfig,
    #[serde(default)]
    pub iba: IbaConfig,
    #[serde(default)]
    pub input_iba: InputIbaConfig,
}

impl MethodsSection {
    pub fn config_for(&self, method: Method) -> MethodConfig {
        match method {
            Method::Gradcam => MethodConfig::Gradcam(self.gradcam.clone()),
            Method::Lrp => MethodConfig::Lrp(self.lrp.clone()),
            Method::Iba => MethodConfig::Iba(self.iba.clone()),
            Method::InputIba => MethodConfig::InputIba(self.input_iba.clone()),
        }
    }
}

/// Which bags of a dataset a command works on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Selection {
    /// `train`, `val`, `test` or `all`.
    pub split: String,
    /// Explicit bag ids; empty means every bag of the split.
    pub bag_ids: Vec<String>,
    /// At most this many bags, in manifest order.
    pub limit: Option<usize>,
}

fn default_split() -> String {
    "test".into()
}

fn default_scale() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainSection {
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default)]
    pub bag_ids: Vec<String>,
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default = "all_methods")]
    pub methods: Vec<String>,
    /// Overlay upscaling factor.
    #[serde(default = "default_scale")]
    pub scale: usize,
}

fn all_methods() -> Vec<String> {
    Method::ALL.iter().map(|m| m.as_str().to_string()).collect()
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection { split: default_split(), bag_ids: Vec::new(), limit: None, methods: all_methods(), scale: default_scale() }
    }
}

impl ExplainSection {
    pub fn selection(&self) -> Selection {
        Selection { split: self.split.clone(), bag_ids: self.bag_ids.clone(), limit: self.limit }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Insertion,
    Deletion,
    Localization,
    Roar,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Insertion => "insertion",
            Metric::Deletion => "deletion",
            Metric::Localization => "localization",
            Metric::Roar => "roar",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default)]
    pub bag_ids: Vec<String>,
    #[serde(default)]
    pub limit: Option<usize>,
    /// Attribution methods plus the `random` and `ground_truth` references.
    #[serde(default = "all_methods")]
    pub methods: Vec<String>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default)]
    pub curve: CurveConfig,
    #[serde(default)]
    pub roar: RoarConfig,
    /// Epoch budget of every ROAR retrain; the `[train]` value when absent.
    #[serde(default)]
    pub roar_max_epochs: Option<usize>,
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::Insertion, Metric::Deletion, Metric::Localization]
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            split: default_split(),
            bag_ids: Vec::new(),
            limit: None,
            methods: all_methods(),
            metrics: default_metrics(),
            curve: CurveConfig::default(),
            roar: RoarConfig::default(),
            roar_max_epochs: None,
        }
    }
}

impl BenchSection {
    pub fn selection(&self) -> Selection {
        Selection { split: self.split.clone(), bag_ids: self.bag_ids.clone(), limit: self.limit }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// When set, replaces the seeds of the generator, split, trainer,
    /// attribution methods and ROAR.
    #[serde(default)]
    pub rng_seed: Option<u64>,
    /// Independent training runs (seeds `seed`, `seed + 1`, ...).
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub methods: MethodsSection,
    #[serde(default)]
    pub explain: ExplainSection,
    #[serde(default)]
    pub bench: BenchSection,
}

fn one() -> usize {
    1
}

/// A parsed config together with its source, for error locations.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub path: PathBuf,
    pub text: String,
}

impl RunConfig {
    /// Parses TOML text; errors carry the offending field and line.
    pub fn parse(text: &str, file: &str) -> Result<RunConfig> {
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of(text, s.start)).unwrap_or(1);
            let message = e.message().to_string();
            let field = backticked(&message).unwrap_or_else(|| "<document>".into());
            Error::ConfigAt { file: file.into(), line, field, message }
        })?;
        if config.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::ConfigAt {
                file: file.into(),
                line: locate(text, "schema_version").unwrap_or(1),
                field: "schema_version".into(),
                message: format!("unsupported version {}, expected {CONFIG_SCHEMA_VERSION}", config.schema_version),
            });
        }
        Ok(config)
    }

    /// Applies the global seed to every component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = Some(seed);
        self
    }

    /// The config with the global seed pushed into every component. This is
    /// the form that gets digested and recorded.
    pub fn effective(&self) -> RunConfig {
        let mut c = self.clone();
        if let Some(seed) = c.rng_seed {
            c.synth.rng_seed = seed;
            c.split.seed = seed;
            c.train.rng_seed = seed;
            c.methods.iba.rng_seed = seed;
            c.methods.input_iba.rng_seed = seed;
            c.methods.input_iba.deep.rng_seed = seed;
            c.bench.roar.random_seed = seed;
        }
        c
    }

    pub fn digest(&self) -> String {
        crate::digest::of_json(&self.effective())
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("`runs` must be at least 1".into()));
        }
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.bench.roar.validate()?;
        Ok(())
    }
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config = RunConfig::parse(&text, &path.display().to_string())?;
        Ok(LoadedConfig { config, path: path.to_path_buf(), text })
    }

    /// Validates and converts a core configuration error into one that
    /// points at the line of the offending key, when it appears in the file.
    pub fn validate(&self) -> Result<()> {
        match self.config.validate() {
            Err(Error::Config(msg)) => {
                let field = backticked(&msg);
                match field.as_deref().and_then(|f| locate(&self.text, f).map(|l| (f.to_string(), l))) {
                    Some((field, line)) => Err(Error::ConfigAt { file: self.path.display().to_string(), line, field, message: msg }),
                    None => Err(Error::Config(msg)),
                }
            }
            other => other,
        }
    }

    /// A path the command needs; missing ones are reported with the line of
    /// the `[paths]` table (or line 1).
    pub fn require_path(&self, key: &str, value: &Option<PathBuf>) -> Result<PathBuf> {
        value.clone().ok_or_else(|| Error::ConfigAt {
            file: self.path.display().to_string(),
            line: locate(&self.text, "[paths]").unwrap_or(1),
            field: format!("paths.{key}"),
            message: format!("missing field `{key}` required by this command"),
        })
    }

    /// Resolves a config-relative path.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn backticked(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

/// First line whose key (or table header) is `key`.
fn locate(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let t = l.trim_start();
        if key.starts_with('[') {
            t.starts_with(key)
        } else {
            t.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
        }
    })
    .map(|i| i + 1)
}
