//! One JSON file describing a whole run: data generation, model, training,
//! evaluation and benchmark settings.
//!
//! A config file only needs the keys it changes; everything else comes from
//! the desk preset. Unknown keys are rejected at every level.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::fusion::FusionConfig;
use crate::implicit::{ImplicitConfig, ModelConfig};
use crate::nn::{EncoderConfig, SaLevel};
use crate::synth::{BranchShape, TreeSpec};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub trees: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Generator settings for the benchmark volumes.
    pub tree: TreeSpec,
    pub volumes: usize,
    /// Timed repetitions per method; the median is reported.
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every random choice of the run; copied over the per-section
    /// seeds by [`RunConfig::resolve`].
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub tree: TreeSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Generator settings for large benchmark trees: 128³, deeper and thicker.
pub fn bench_tree_spec() -> TreeSpec {
    TreeSpec {
        grid: 128,
        depth: 6,
        trunk_radius: [15.0, 16.0],
        trunk_length: [0.15, 0.17],
        min_length: 0.06,
        taper: 0.95,
        min_radius: 3.0,
        // shorter majors and wider angles than the desk trees, so six levels fit
        major: BranchShape { length_ratio: [0.8, 0.9], radius_ratio: 0.9, angle_deg: [20.0, 32.0] },
        minor: BranchShape { length_ratio: [0.65, 0.75], radius_ratio: 0.8, angle_deg: [42.0, 58.0] },
        ..TreeSpec::default()
    }
}

impl RunConfig {
    /// 60 trees on a 64³ grid with 8 classes and a reduced model: two
    /// fusion layers of width 64 and encoders at about half depth. Backbone
    /// passes use 2048 points, since a few thousand foreground voxels would
    /// otherwise be mostly duplicates.
    pub fn desk() -> Self {
        let encoder = EncoderConfig {
            point_levels: vec![
                SaLevel { ratio: 8, radius: 0.1, max_points: 32, widths: vec![16, 32] },
                SaLevel { ratio: 32, radius: 0.2, max_points: 32, widths: vec![32, 64] },
            ],
            fp_widths: vec![64, 64],
            graph_layers: 6,
            heads: 4,
            head_width: 16,
            out_width: 64,
        };
        let fusion = FusionConfig { num_layers: 2, width: 64, num_classes: 8, ..FusionConfig::default() };
        let implicit = ImplicitConfig { hidden: vec![128, 64], sample_points: 2048, ..ImplicitConfig::default() };
        Self {
            seed: 7,
            dataset: DatasetConfig { trees: 60 },
            tree: TreeSpec::default(),
            model: ModelConfig { encoder, fusion, implicit },
            train: TrainConfig::desk(),
            eval: EvalOptions::default(),
            bench: BenchConfig { tree: bench_tree_spec(), volumes: 3, runs: 3 },
        }
    }

    /// Full-size model and schedule with 19 classes on larger trees.
    pub fn full() -> Self {
        let tree = TreeSpec { grid: 128, depth: 5, num_classes: 19, trunk_radius: [5.0, 6.0], ..TreeSpec::default() };
        Self {
            seed: 0,
            dataset: DatasetConfig { trees: 200 },
            tree,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            bench: BenchConfig { tree: TreeSpec { num_classes: 19, ..bench_tree_spec() }, volumes: 3, runs: 3 },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (expected desk or full)"))),
        }
    }

    /// Overlays a partial JSON document onto `base`.
    pub fn merge_json(base: &Self, text: &str) -> Result<Self> {
        let patch: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid json: {e}")))?;
        let mut value = serde_json::to_value(base).expect("config serializes");
        merge(&mut value, patch);
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve()
    }

    pub fn load(path: impl AsRef<Path>, base: &Self) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::merge_json(base, &text)
    }

    /// Propagates the global seed and validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.tree.seed = self.seed;
        self.train.seed = self.seed;
        self.bench.tree.seed = self.seed;
        self.tree.validate()?;
        self.bench.tree.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.tree.num_classes as usize != self.model.num_classes() {
            return Err(Error::Config(format!(
                "tree generator uses {} classes, model predicts {}",
                self.tree.num_classes,
                self.model.num_classes()
            )));
        }
        if self.bench.runs == 0 {
            return Err(Error::Config("bench.runs must be positive".into()));
        }
        Ok(self)
    }
}

/// Recursive object merge; non-object values in `patch` replace `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
