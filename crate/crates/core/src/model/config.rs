use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::error::{Error, Result};

/// How each node's first-layer input row is built.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrontEnd {
    /// Edge weights to the `K` selected neighbors.
    Adjacency,
    /// A learned layer over the `k_base x k_base` adjacency among the first
    /// `k_base` selected neighbors, producing `channels` features.
    PatchySan { k_base: usize, channels: usize },
}

/// Network shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    /// Selected neighbors per node (`K`).
    pub neighbors: usize,
    /// Number of ego-convolution layers (`L`).
    pub depth: usize,
    /// Filters per ego-convolution layer (`D`).
    pub channels: usize,
    pub front_end: FrontEnd,
    /// Share one filter bank across all ego-convolution layers.
    pub tied: bool,
    /// Ranked node rows fed to the dense head; `None` picks the 90th
    /// percentile of the training data's node counts.
    pub node_budget: Option<usize>,
    /// Hidden dense layer widths before the output layer.
    pub dense: Vec<usize>,
    pub dropout: f64,
    pub batch_norm: bool,
    pub activation: Activation,
    /// 1-WL rounds used to rank neighbors.
    pub wl_iterations: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            neighbors: 16,
            depth: 5,
            channels: 128,
            front_end: FrontEnd::Adjacency,
            tied: false,
            node_budget: None,
            dense: vec![128],
            dropout: 0.5,
            batch_norm: true,
            activation: Activation::Relu,
            wl_iterations: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Stop after this many epochs without a lower validation loss.
    pub patience: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    /// Share of each training split held out for early stopping.
    pub validation_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 1e-4,
            epochs: 300,
            patience: Some(30),
            batch_size: 32,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

/// Full run configuration, read from TOML:
///
/// ```toml
/// [model]
/// neighbors = 4
/// depth = 3
/// channels = 32
/// front_end = { kind = "adjacency" }
///
/// [training]
/// lr = 0.001
/// epochs = 60
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "model")]
    pub arch: Architecture,
    pub training: TrainingConfig,
}

impl ModelConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Width of the rows entering the first ego-convolution.
    pub fn stack_input_width(&self) -> usize {
        match self.arch.front_end {
            FrontEnd::Adjacency => self.arch.neighbors,
            FrontEnd::PatchySan { channels, .. } => channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        let t = &self.training;
        let fail = |m: String| Err(Error::Config(m));
        if a.neighbors == 0 || a.depth == 0 || a.channels == 0 {
            return fail("neighbors, depth and channels must all be at least 1".into());
        }
        if a.node_budget == Some(0) {
            return fail("node_budget must be at least 1".into());
        }
        if !(0.0..1.0).contains(&a.dropout) {
            return fail(format!("dropout {} outside [0, 1)", a.dropout));
        }
        if a.dense.contains(&0) {
            return fail("dense layer widths must be positive".into());
        }
        if let FrontEnd::PatchySan { k_base, channels } = a.front_end {
            if k_base == 0 || channels == 0 {
                return fail("patchy_san needs positive k_base and channels".into());
            }
            if k_base > a.neighbors {
                return fail(format!(
                    "patchy_san k_base {k_base} exceeds neighbors {}",
                    a.neighbors
                ));
            }
        }
        if a.tied && self.stack_input_width() != a.channels {
            return fail(format!(
                "tied layers need the stack input width ({}) to equal channels ({})",
                self.stack_input_width(),
                a.channels
            ));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return fail(format!(
                "learning rate {} must be finite and non-negative",
                t.lr
            ));
        }
        if t.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&t.validation_fraction) {
            return fail(format!(
                "validation_fraction {} outside [0, 1)",
                t.validation_fraction
            ));
        }
        Ok(())
    }
}
