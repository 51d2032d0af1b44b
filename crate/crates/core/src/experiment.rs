//! Experiment configuration and the end-to-end pipelines built on it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::nn::{arch, BaseNetwork};
use crate::plugin::{FusionOperator, JointModel, PluginNetwork};
use crate::synth::{Dataset, GeneratorConfig, TaskInfo, TaskKind};
use crate::tensor::LossKind;
use crate::train::{default_metrics, evaluate, train_base, train_plugins, MetricsReport, TrainConfig, TrainHistory};

/// Where plugins go and what they look like.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginPlan {
    /// Layer ids; one plugin per id.
    pub attachments: Vec<String>,
    pub hidden: Vec<usize>,
    pub op: FusionOperator,
}

/// A fully materialized experiment.
///
/// Seeds derive from `seed`: the dataset uses `seed`, the base initialization
/// `seed + 1`, and plugin `k` is initialized from `seed + 100 + k`. Unless
/// overridden, base and plugin training shuffle with `seed + 2` and
/// `seed + 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task_kind: TaskKind,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub arch: String,
    pub plugins: PluginPlan,
    pub base_train: TrainConfig,
    pub plugin_train: TrainConfig,
    pub out: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    task_kind: TaskKind,
    seed: u64,
    generator: Value,
    arch: String,
    plugins: PluginPlan,
    base_train: TrainConfig,
    plugin_train: TrainConfig,
    out: Option<PathBuf>,
}

fn merge(into: &mut Value, from: Value) {
    match (into, from) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                match a.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        a.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn defaults(task: TaskKind, seed: u64) -> Value {
    let (arch, attachments, epochs, loss) = match task {
        TaskKind::Hierarchical => (arch::TOY_CLS, vec!["fc3"], 15, LossKind::CrossEntropy),
        TaskKind::Multilabel => (arch::TOY_CLS, vec!["fc3"], 15, LossKind::BinaryCrossEntropy),
        TaskKind::Segmentation => (
            arch::TOY_FCN,
            vec!["conv1", "conv2", "conv3", "deconv1", "deconv2"],
            12,
            LossKind::CrossEntropy,
        ),
    };
    let train = |s: u64| TrainConfig {
        epochs,
        seed: s,
        loss_kind: loss,
        ..TrainConfig::default()
    };
    json!({
        "task_kind": task,
        "seed": seed,
        "generator": GeneratorConfig::default_for(task).to_json(),
        "arch": arch,
        "plugins": { "attachments": attachments, "hidden": [32], "op": FusionOperator::Additive },
        "base_train": train(seed.wrapping_add(2)),
        "plugin_train": train(seed.wrapping_add(3)),
        "out": null,
    })
}

impl ExperimentConfig {
    /// Defaults for `task` with every field filled in.
    pub fn default_for(task: TaskKind) -> Self {
        Self::from_json(json!({ "task_kind": task.name() })).expect("defaults are valid")
    }

    /// Parses a config document. Only `task_kind` is required; everything
    /// else is merged over the defaults for that task. Empty loss masks are
    /// filled in: all labels for the base, the task's unknown labels for
    /// plugins.
    pub fn from_json(value: Value) -> Result<Self> {
        let Value::Object(map) = &value else {
            return Err(Error::Config("experiment config must be a JSON object".into()));
        };
        let task: TaskKind = match map.get("task_kind") {
            Some(Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::UnknownTaskKind(other.to_string())),
            None => return Err(Error::Config("missing task_kind".into())),
        };
        let seed = match map.get("seed") {
            None => 0,
            Some(v) => v
                .as_u64()
                .ok_or_else(|| Error::Config(format!("seed must be an unsigned integer, got {v}")))?,
        };
        let mut full = defaults(task, seed);
        merge(&mut full, value);
        let raw: RawConfig = serde_json::from_value(full).map_err(|e| Error::Config(e.to_string()))?;
        let generator = GeneratorConfig::from_json(task, raw.generator)?;
        let mut cfg = Self {
            task_kind: raw.task_kind,
            seed: raw.seed,
            generator,
            arch: raw.arch,
            plugins: raw.plugins,
            base_train: raw.base_train,
            plugin_train: raw.plugin_train,
            out: raw.out,
        };
        cfg.materialize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_str_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_json(value)
    }

    fn materialize(&mut self) {
        let info = self.generator.info();
        if self.base_train.unknown_mask.is_empty() {
            self.base_train.unknown_mask = vec![true; info.classes()];
        }
        if self.plugin_train.unknown_mask.is_empty() {
            self.plugin_train.unknown_mask = info.unknown_mask.clone();
        }
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        let info = self.generator.info();
        self.base_train.validate(info.classes())?;
        self.plugin_train.validate(info.classes())?;
        let base = self.untrained_base(&info)?;
        if self.plugins.attachments.is_empty() {
            return Err(Error::Config("at least one plugin attachment is required".into()));
        }
        for id in &self.plugins.attachments {
            base.attachment_point(id).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// The complete config as JSON, defaults included.
    pub fn to_json(&self) -> Value {
        json!({
            "task_kind": self.task_kind,
            "seed": self.seed,
            "generator": self.generator.to_json(),
            "arch": self.arch,
            "plugins": self.plugins,
            "base_train": self.base_train,
            "plugin_train": self.plugin_train,
            "out": self.out,
        })
    }

    fn untrained_base(&self, info: &TaskInfo) -> Result<BaseNetwork> {
        let outputs = *info.target_shape.last().expect("nonempty target shape");
        let layers = arch::by_name(&self.arch, &info.input_shape, outputs)?;
        BaseNetwork::build(layers, &info.input_shape, self.seed.wrapping_add(1))
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.info != self.generator.info() {
            return Err(Error::Config(format!(
                "dataset does not match the configured {} generator",
                self.task_kind
            )));
        }
        Ok(())
    }
}

/// Generates the configured dataset.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.generator.generate(cfg.seed)
}

/// A trained stage: the model, its training history and test metrics.
#[derive(Clone, Debug)]
pub struct Stage<M> {
    pub model: M,
    pub history: TrainHistory,
    pub test: MetricsReport,
}

/// Trains the base network on every label and returns it frozen.
pub fn base_stage(cfg: &ExperimentConfig, data: &Dataset) -> Result<Stage<BaseNetwork>> {
    cfg.check_data(data)?;
    let mut base = cfg.untrained_base(&data.info)?;
    let history = train_base(&mut base, &data.info, &data.train, &data.val, &cfg.base_train)?;
    base.freeze();
    let test = evaluate(&base, &data.info, &data.test, &default_metrics(data.info.task))?;
    Ok(Stage {
        model: base,
        history,
        test,
    })
}

/// Attaches freshly initialized plugins to a frozen base.
pub fn build_joint(cfg: &ExperimentConfig, base: BaseNetwork, info: &TaskInfo) -> Result<JointModel> {
    let plan = &cfg.plugins;
    let plugins = plan
        .attachments
        .iter()
        .enumerate()
        .map(|(k, id)| {
            let point = base.attachment_point(id)?;
            let seed = cfg.seed.wrapping_add(100 + k as u64);
            PluginNetwork::new(info.pe_dim, &plan.hidden, point, plan.op, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    JointModel::new(base, plugins)
}

/// Trains the configured plugins on top of `base`.
pub fn plugin_stage(cfg: &ExperimentConfig, base: BaseNetwork, data: &Dataset) -> Result<Stage<JointModel>> {
    cfg.check_data(data)?;
    let mut joint = build_joint(cfg, base, &data.info)?;
    let history = train_plugins(&mut joint, &data.info, &data.train, &data.val, &cfg.plugin_train)?;
    let test = evaluate(&joint, &data.info, &data.test, &default_metrics(data.info.task))?;
    Ok(Stage {
        model: joint,
        history,
        test,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Fusion,
    Attach,
    Depth,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Self::Fusion => "fusion",
            Self::Attach => "attach",
            Self::Depth => "depth",
        }
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Fusion, Self::Attach, Self::Depth]
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep {s:?}; expected fusion, attach or depth")))
    }
}

/// Named plugin plans explored by `sweep`, derived from the configured one.
pub fn sweep_variants(cfg: &ExperimentConfig, sweep: Sweep) -> Result<Vec<(String, PluginPlan)>> {
    let plan = &cfg.plugins;
    Ok(match sweep {
        Sweep::Fusion => FusionOperator::ALL
            .iter()
            .map(|&op| (op.name().to_string(), PluginPlan { op, ..plan.clone() }))
            .collect(),
        Sweep::Depth => (0..=3)
            .map(|d| {
                let width = plan.hidden.first().copied().unwrap_or(32);
                let hidden = vec![width; d];
                (format!("depth{d}"), PluginPlan { hidden, ..plan.clone() })
            })
            .collect(),
        Sweep::Attach => {
            let info = cfg.generator.info();
            let layers = arch::by_name(&cfg.arch, &info.input_shape, *info.target_shape.last().expect("shape"))?;
            let conv = arch::conv_ids(&layers);
            let (other_name, other) = if cfg.arch == arch::TOY_FCN {
                ("deconv", arch::deconv_ids(&layers))
            } else {
                ("fc", arch::dense_ids(&layers))
            };
            let both: Vec<String> = conv.iter().chain(&other).cloned().collect();
            [("conv".to_string(), conv), (other_name.to_string(), other), (format!("conv+{other_name}"), both)]
                .into_iter()
                .map(|(name, attachments)| (name, PluginPlan { attachments, ..plan.clone() }))
                .collect()
        }
    })
}

/// One variant of an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub plugin_params: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub sweep: Sweep,
    /// Test metrics of the shared base.
    pub base: BTreeMap<String, f64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// One row per variant; base metrics repeat in `base_*` columns.
    pub fn to_csv(&self) -> Result<String> {
        let names: Vec<&String> = self.base.keys().collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["variant".to_string(), "plugin_params".to_string()];
        header.extend(names.iter().map(|n| n.to_string()));
        header.extend(names.iter().map(|n| format!("base_{n}")));
        w.write_record(&header).map_err(csv_err)?;
        for row in &self.rows {
            let mut rec = vec![row.variant.clone(), row.plugin_params.to_string()];
            rec.extend(names.iter().map(|n| row.metrics[*n].to_string()));
            rec.extend(names.iter().map(|n| self.base[*n].to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidArgument(e.to_string())
}

/// Trains one base, then one set of plugins per variant of `sweep`, all
/// from the same seed. With `parallel` the variants train concurrently;
/// results are identical either way.
pub fn ablate(
    cfg: &ExperimentConfig,
    data: &Dataset,
    base: &BaseNetwork,
    sweep: Sweep,
    parallel: bool,
) -> Result<(AblationTable, Vec<Stage<JointModel>>)> {
    let base_test = evaluate(base, &data.info, &data.test, &default_metrics(data.info.task))?;
    let variants = sweep_variants(cfg, sweep)?;
    let run = |(_, plan): &(String, PluginPlan)| {
        let vcfg = ExperimentConfig {
            plugins: plan.clone(),
            ..cfg.clone()
        };
        plugin_stage(&vcfg, base.clone(), data)
    };
    let stages: Vec<Stage<JointModel>> = if parallel {
        variants.par_iter().map(run).collect::<Result<_>>()?
    } else {
        variants.iter().map(run).collect::<Result<_>>()?
    };
    let rows = variants
        .iter()
        .zip(&stages)
        .map(|((name, _), s)| AblationRow {
            variant: name.clone(),
            plugin_params: s.model.plugin_param_count(),
            metrics: s.test.metrics.clone(),
        })
        .collect();
    Ok((
        AblationTable {
            sweep,
            base: base_test.metrics,
            rows,
        },
        stages,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_task_kind_is_required() {
        let cfg = ExperimentConfig::from_json(json!({"task_kind": "multilabel", "seed": 7})).unwrap();
        assert_eq!(cfg.arch, "toy-cls");
        assert_eq!(cfg.base_train.loss_kind, LossKind::BinaryCrossEntropy);
        assert_eq!(cfg.base_train.seed, 9);
        assert_eq!(cfg.base_train.unknown_mask, vec![true; 20]);
        assert_eq!(cfg.plugin_train.unknown_mask.iter().filter(|u| **u).count(), 10);
    }

    #[test]
    fn nested_fields_merge_over_defaults() {
        let cfg = ExperimentConfig::from_json(json!({
            "task_kind": "hierarchical",
            "generator": {"noise": 0.25},
            "plugin_train": {"epochs": 3, "lr_decay_epochs": []},
        }))
        .unwrap();
        let GeneratorConfig::Hierarchical(g) = &cfg.generator else { panic!() };
        assert_eq!(g.noise, 0.25);
        assert_eq!(g.coarse, 4);
        assert_eq!(cfg.plugin_train.epochs, 3);
        assert_eq!(cfg.plugin_train.batch_size, 32);
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ExperimentConfig::default_for(TaskKind::Segmentation);
        assert_eq!(ExperimentConfig::from_json(cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn config_errors() {
        let e = ExperimentConfig::from_json(json!({"task_kind": "video"})).unwrap_err();
        assert!(e.to_string().contains("unknown task kind"));
        assert!(e.is_config());
        for bad in [
            json!({}),
            json!({"task_kind": "hierarchical", "colour": 1}),
            json!({"task_kind": "hierarchical", "arch": "resnet"}),
            json!({"task_kind": "hierarchical", "plugins": {"attachments": ["relu1"]}}),
            json!({"task_kind": "hierarchical", "base_train": {"lr_decay_epochs": [20]}}),
        ] {
            assert!(ExperimentConfig::from_json(bad.clone()).unwrap_err().is_config(), "{bad}");
        }
    }

    #[test]
    fn sweeps() {
        let cfg = ExperimentConfig::default_for(TaskKind::Segmentation);
        let names: Vec<String> = sweep_variants(&cfg, Sweep::Attach).unwrap().into_iter().map(|v| v.0).collect();
        assert_eq!(names, ["conv", "deconv", "conv+deconv"]);
        assert_eq!(sweep_variants(&cfg, Sweep::Depth).unwrap().len(), 4);
        assert_eq!(sweep_variants(&cfg, Sweep::Fusion).unwrap().len(), 4);
        assert!("width".parse::<Sweep>().unwrap_err().is_config());
    }
}
