//! Per-command configuration files. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use ctxprune::data::DataConfig;
use ctxprune::inference::{BenchOptions, PruneMode};
use ctxprune::model::ModelConfig;
use ctxprune::scoring::LabelMode;
use ctxprune::training::{BaseTrainConfig, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::fail::{Fail, Kind};

pub fn load<T: DeserializeOwned>(path: Option<&Path>) -> Result<T, Fail> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| {
            Fail::new(
                Kind::InvalidConfig,
                format!("cannot read config {}: {e}", p.display()),
            )
        })?,
        None => String::new(),
    };
    toml::from_str(&text).map_err(|e| {
        let msg = e.to_string().replace('\n', " ");
        Fail::new(
            Kind::InvalidConfig,
            msg.split_whitespace().collect::<Vec<_>>().join(" "),
        )
    })
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenData {
    pub data: DataConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBase {
    pub data_dir: PathBuf,
    /// Architecture preset; vocab and patch width always follow the data.
    #[serde(default = "default_preset")]
    pub preset: String,
    /// Full architecture, replacing the preset when given.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: BaseTrainConfig,
}

fn default_preset() -> String {
    "desk".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainStage1 {
    pub data_dir: PathBuf,
    pub lvlm: PathBuf,
    /// Takes the classifier shape from this preset instead of the model's own.
    #[serde(default)]
    pub classifier_preset: Option<String>,
    #[serde(default = "TrainConfig::stage1")]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainStage2 {
    pub data_dir: PathBuf,
    pub lvlm: PathBuf,
    /// Stage-1 checkpoint; required unless `train.init = "random"`.
    #[serde(default)]
    pub classifier: Option<PathBuf>,
    /// Shape of a randomly initialized classifier.
    #[serde(default)]
    pub classifier_preset: Option<String>,
    #[serde(default = "TrainConfig::stage2")]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Eval {
    pub data_dir: PathBuf,
    pub lvlm: PathBuf,
    #[serde(default)]
    pub classifier: Option<PathBuf>,
    #[serde(default = "default_split")]
    pub split: String,
    /// Evaluate only the first `limit` samples of the split.
    #[serde(default)]
    pub limit: Option<usize>,
    /// Defaults to every mode that the given artifacts allow.
    #[serde(default)]
    pub modes: Option<Vec<PruneMode>>,
    #[serde(default = "default_eval_ratios")]
    pub ratios: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_split() -> String {
    "test".into()
}

fn default_eval_ratios() -> Vec<f64> {
    vec![0.25]
}

fn default_sweep_ratios() -> Vec<f64> {
    vec![1.0, 0.5, 0.25, 0.1]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub data_dir: PathBuf,
    pub lvlm: PathBuf,
    #[serde(default)]
    pub classifier: Option<PathBuf>,
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub modes: Option<Vec<PruneMode>>,
    #[serde(default = "default_sweep_ratios")]
    pub ratios: Vec<f64>,
    #[serde(default)]
    pub bench: BenchOptions,
}

fn default_sizes() -> Vec<usize> {
    vec![252, 508, 1020, 2044, 4092]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bench {
    pub lvlm: PathBuf,
    #[serde(default)]
    pub classifier: Option<PathBuf>,
    /// Dataset whose geometry shapes the timed prompts and whose split
    /// supplies accuracy for matching sizes.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub modes: Option<Vec<PruneMode>>,
    #[serde(default = "default_eval_ratios")]
    pub ratios: Vec<f64>,
    /// Visual tokens per timed prompt; the prompt adds four text tokens.
    #[serde(default = "default_sizes")]
    pub n_v: Vec<usize>,
    #[serde(default)]
    pub bench: BenchOptions,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheck {
    pub seed: u64,
    pub step: f64,
    pub tol: f64,
    /// Coordinates sampled per loss.
    pub samples: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            seed: 0,
            step: 1e-5,
            tol: 1e-4,
            samples: 200,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReproPrelim {
    pub data_dir: PathBuf,
    pub lvlm: PathBuf,
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default = "default_prelim_limit")]
    pub limit: Option<usize>,
    #[serde(default = "default_prelim_r")]
    pub r: f64,
    /// Prune layers; all decoder layers when absent.
    #[serde(default)]
    pub prune_layers: Option<Vec<usize>>,
    /// Guidance layers; all decoder layers when absent.
    #[serde(default)]
    pub guide_layers: Option<Vec<usize>>,
    #[serde(default)]
    pub label_mode: LabelMode,
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_prelim_limit() -> Option<usize> {
    Some(256)
}

fn default_prelim_r() -> f64 {
    0.25
}

fn default_true() -> bool {
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let bad: Result<GenData, _> = toml::from_str("[data]\nnv = 3\n");
        assert!(bad.is_err());
        let bad: Result<TrainStage1, _> =
            toml::from_str("data_dir = \"d\"\nlvlm = \"m\"\nextra = 1\n");
        assert!(bad.is_err());
    }

    #[test]
    fn defaults_fill_in() {
        let s: TrainStage2 = toml::from_str("data_dir = \"d\"\nlvlm = \"m\"\n").unwrap();
        assert_eq!(s.train.stage, 2);
        let s: Sweep = toml::from_str("data_dir = \"d\"\nlvlm = \"m\"\n").unwrap();
        assert_eq!(s.ratios, vec![1.0, 0.5, 0.25, 0.1]);
        let e: Eval = toml::from_str(
            "data_dir = \"d\"\nlvlm = \"m\"\nmodes = [\"oracle\", \"layer-prune(1,2)\"]\n",
        )
        .unwrap();
        assert_eq!(
            e.modes.unwrap()[1],
            PruneMode::LayerPrune { l_p: 1, l_g: 2 }
        );
        let g: GradCheck = toml::from_str("").unwrap();
        assert_eq!(g.tol, 1e-4);
    }

    #[test]
    fn resolved_configs_round_trip() {
        let s: TrainStage1 =
            toml::from_str("data_dir = \"d\"\nlvlm = \"m\"\n[train]\nk = 0.1\n").unwrap();
        let text = toml::to_string(&s).unwrap();
        let back: TrainStage1 = toml::from_str(&text).unwrap();
        assert_eq!(back.train, s.train);
    }
}
