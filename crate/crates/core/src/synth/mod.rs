//! Synthetic tasks with known Bayes rates, and their metrics.

pub mod dataset;
pub mod hierarchical;
pub mod metrics;
pub mod multilabel;
pub mod oracle;
pub mod segmentation;

pub use dataset::{Dataset, Example, Hierarchy, TaskInfo, TaskKind};
pub use hierarchical::HierConfig;
pub use multilabel::MultiConfig;
pub use oracle::{bayes_oracle, BayesRates};
pub use segmentation::SegConfig;

use crate::error::{Error, Result};

/// Generator settings for one of the tasks.
#[derive(Clone, Debug, PartialEq)]
pub enum GeneratorConfig {
    Hierarchical(HierConfig),
    Multilabel(MultiConfig),
    Segmentation(SegConfig),
}

impl GeneratorConfig {
    pub fn default_for(task: TaskKind) -> Self {
        match task {
            TaskKind::Hierarchical => Self::Hierarchical(HierConfig::default()),
            TaskKind::Multilabel => Self::Multilabel(MultiConfig::default()),
            TaskKind::Segmentation => Self::Segmentation(SegConfig::default()),
        }
    }

    /// Parses the task-specific settings; absent fields take defaults.
    pub fn from_json(task: TaskKind, value: serde_json::Value) -> Result<Self> {
        let value = if value.is_null() {
            serde_json::json!({})
        } else {
            value
        };
        let bad = |e: serde_json::Error| Error::Config(format!("{task} generator: {e}"));
        Ok(match task {
            TaskKind::Hierarchical => Self::Hierarchical(serde_json::from_value(value).map_err(bad)?),
            TaskKind::Multilabel => Self::Multilabel(serde_json::from_value(value).map_err(bad)?),
            TaskKind::Segmentation => Self::Segmentation(serde_json::from_value(value).map_err(bad)?),
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Self::Hierarchical(c) => serde_json::to_value(c),
            Self::Multilabel(c) => serde_json::to_value(c),
            Self::Segmentation(c) => serde_json::to_value(c),
        }
        .expect("generator configs serialize")
    }

    pub fn task(&self) -> TaskKind {
        match self {
            Self::Hierarchical(_) => TaskKind::Hierarchical,
            Self::Multilabel(_) => TaskKind::Multilabel,
            Self::Segmentation(_) => TaskKind::Segmentation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Hierarchical(c) => c.validate(),
            Self::Multilabel(c) => c.validate(),
            Self::Segmentation(c) => c.validate(),
        }
    }

    pub fn info(&self) -> TaskInfo {
        match self {
            Self::Hierarchical(c) => c.info(),
            Self::Multilabel(c) => c.info(),
            Self::Segmentation(c) => c.info(),
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        match self {
            Self::Hierarchical(c) => hierarchical::generate(c, seed),
            Self::Multilabel(c) => multilabel::generate(c, seed),
            Self::Segmentation(c) => segmentation::generate(c, seed),
        }
    }
}
