//! Pixel-level explanations of a bag decision: one relevance map per instance.
//!
//! Four methods share [`AttributionResult`]: GradCAM and LRP are single
//! backward passes; IBA and InputIBA optimise noise masks and are an order
//! of magnitude more expensive.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bagdata::Bag;
use crate::milnet::MilModel;
use crate::{Error, Result, Tensor};

pub mod gradcam;
pub mod iba;
pub mod input_iba;
pub mod lrp;

pub use gradcam::{gradcam, gradcam_map, GradcamConfig};
pub use iba::{iba, BottleneckScope, IbaConfig, NoiseStats};
pub use input_iba::{input_iba, InputIbaConfig, InputStats};
pub use lrp::{lrp, LrpConfig, Rule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gradcam,
    Lrp,
    Iba,
    InputIba,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Gradcam, Method::Lrp, Method::Iba, Method::InputIba];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Gradcam => "gradcam",
            Method::Lrp => "lrp",
            Method::Iba => "iba",
            Method::InputIba => "input_iba",
        }
    }

    /// LRP maps carry sign; the others are non-negative.
    pub fn signed(self) -> bool {
        matches!(self, Method::Lrp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config("method", alloc::format!("unknown attribution method `{s}`")))
    }
}

/// Hyperparameters of one method, tagged by method name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodConfig {
    Gradcam(GradcamConfig),
    Lrp(LrpConfig),
    Iba(IbaConfig),
    InputIba(InputIbaConfig),
}

impl MethodConfig {
    pub fn method(&self) -> Method {
        match self {
            MethodConfig::Gradcam(_) => Method::Gradcam,
            MethodConfig::Lrp(_) => Method::Lrp,
            MethodConfig::Iba(_) => Method::Iba,
            MethodConfig::InputIba(_) => Method::InputIba,
        }
    }

    pub fn default_for(method: Method) -> Self {
        match method {
            Method::Gradcam => MethodConfig::Gradcam(GradcamConfig::default()),
            Method::Lrp => MethodConfig::Lrp(LrpConfig::default()),
            Method::Iba => MethodConfig::Iba(IbaConfig::default()),
            Method::InputIba => MethodConfig::InputIba(InputIbaConfig::default()),
        }
    }

    /// The configuration as recorded in result metadata: calibration
    /// statistics are data, not hyperparameters, and are left out.
    pub fn for_metadata(&self) -> Self {
        match self {
            MethodConfig::Iba(c) => MethodConfig::Iba(IbaConfig { noise_stats: None, ..c.clone() }),
            MethodConfig::InputIba(c) => MethodConfig::InputIba(InputIbaConfig {
                deep: IbaConfig { noise_stats: None, ..c.deep.clone() },
                input_stats: None,
                ..c.clone()
            }),
            other => other.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub method: Method,
    pub bag_id: String,
    pub target_class: usize,
    /// One `[H, W]` map per instance, in bag order.
    pub maps: Vec<Tensor>,
    pub signed: bool,
    pub metadata: MethodConfig,
}

impl AttributionResult {
    pub(crate) fn new(bag: &Bag, target_class: usize, maps: Vec<Tensor>, metadata: MethodConfig) -> Self {
        let method = metadata.method();
        AttributionResult {
            method,
            bag_id: bag.bag_id.clone(),
            target_class,
            maps,
            signed: method.signed(),
            metadata: metadata.for_metadata(),
        }
    }

    /// Checks that maps align with the bag's instances.
    pub fn check_alignment(&self, bag: &Bag) -> Result<()> {
        if self.maps.len() != bag.len() {
            return Err(Error::Shape(alloc::format!(
                "{} maps for {} instances of bag {}",
                self.maps.len(),
                bag.len(),
                bag.bag_id
            )));
        }
        for (map, inst) in self.maps.iter().zip(&bag.instances) {
            if map.shape() != [inst.height(), inst.width()] {
                return Err(Error::Shape(alloc::format!(
                    "map for instance {} has shape {:?}, expected [{}, {}]",
                    inst.instance_id,
                    map.shape(),
                    inst.height(),
                    inst.width()
                )));
            }
        }
        Ok(())
    }

    /// Sum of each map.
    pub fn masses(&self) -> Vec<f64> {
        self.maps.iter().map(Tensor::sum).collect()
    }
}

pub(crate) fn check_target(model: &MilModel, target_class: usize) -> Result<()> {
    if target_class >= model.num_classes() {
        return Err(Error::config(
            "target_class",
            alloc::format!("{target_class} is out of range for {} classes", model.num_classes()),
        ));
    }
    Ok(())
}

/// Uniform entry point. `method` must agree with the variant of `config`.
pub fn explain(model: &MilModel, bag: &Bag, target_class: usize, method: Method, config: &MethodConfig) -> Result<AttributionResult> {
    if config.method() != method {
        return Err(Error::config(
            "method_config",
            alloc::format!("{} configuration given for method {method}", config.method()),
        ));
    }
    match config {
        MethodConfig::Gradcam(c) => gradcam(model, bag, target_class, c),
        MethodConfig::Lrp(c) => lrp(model, bag, target_class, c),
        MethodConfig::Iba(c) => iba(model, bag, target_class, c),
        MethodConfig::InputIba(c) => input_iba(model, bag, target_class, c),
    }
}

/// Like [`explain`], with the method named by string.
pub fn explain_named(model: &MilModel, bag: &Bag, target_class: usize, method: &str, config: &MethodConfig) -> Result<AttributionResult> {
    explain(model, bag, target_class, method.parse()?, config)
}

impl fmt::Display for AttributionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} maps for bag {} (class {}, {} instances)", self.method, self.bag_id, self.target_class, self.maps.len())
    }
}
