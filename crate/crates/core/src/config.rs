//! Run configuration shared by every pipeline step, read from TOML or JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hosts::SynthConfig;
use crate::regions::DEFAULT_ID_PROPERTY;
use crate::numerics::GradCheckOptions;
use crate::training::{GridSpec, ToyGradCheck, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// One polygon file per granularity, coarsest first.
    pub regions: Vec<PathBuf>,
    pub hosts: Option<PathBuf>,
    pub out: PathBuf,
    pub id_property: String,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            regions: Vec::new(),
            hosts: None,
            out: PathBuf::from("out"),
            id_property: DEFAULT_ID_PROPERTY.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { ks: vec![1, 2, 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisOptions {
    pub eps_km: f64,
    pub min_samples: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            eps_km: 0.3,
            min_samples: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    pub max_coords_per_param: Option<usize>,
    pub input_dim: usize,
    pub hidden: usize,
    pub granularity_sizes: Vec<usize>,
    pub landmarks: usize,
    pub targets: usize,
    /// Judge pass/fail only on coordinates whose derivative the difference
    /// quotient can resolve above round-off.
    pub resolved_only: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-4,
            max_coords_per_param: Some(64),
            input_dim: 6,
            hidden: 16,
            granularity_sizes: vec![2, 3, 5],
            landmarks: 4,
            targets: 2,
            resolved_only: false,
        }
    }
}

impl GradCheckConfig {
    /// Toy problem and checker options; loss weights come from `train`.
    pub fn toy(&self, train: &TrainConfig) -> (ToyGradCheck, GradCheckOptions) {
        let toy = ToyGradCheck {
            input_dim: self.input_dim,
            hidden: self.hidden,
            granularity_sizes: self.granularity_sizes.clone(),
            landmarks: self.landmarks,
            targets: self.targets,
            alpha: train.alpha,
            loss: train.loss_config(self.granularity_sizes.len()),
            seed: train.seed,
        };
        let opts = GradCheckOptions {
            h: self.h,
            tol: self.tol,
            max_coords_per_param: self.max_coords_per_param,
            seed: train.seed,
        };
        (toy, opts)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub grid: GridSpec,
    pub eval: EvalOptions,
    pub analysis: AnalysisOptions,
    pub gradcheck: GradCheckConfig,
    /// Fraction of hosts assigned to training when the host file has no split.
    pub train_ratio: Option<f64>,
}

impl RunConfig {
    /// Parses `.json` files as JSON and anything else as TOML.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        if is_json {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        }
    }

    /// Applies a command-line seed to every seeded section.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.seed = s;
            self.synth.seed = s;
        }
        self
    }

    pub fn with_out(mut self, out: Option<PathBuf>) -> Self {
        if let Some(o) = out {
            self.paths.out = o;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(
            &t,
            "[train]\nlr = 0.002\nepochs = 7\n[analysis]\neps_km = 0.5\n[paths]\nregions = [\"a.geojson\"]\n",
        )
        .unwrap();
        let j = dir.path().join("c.json");
        std::fs::write(
            &j,
            r#"{"train": {"lr": 0.002, "epochs": 7}, "analysis": {"eps_km": 0.5}, "paths": {"regions": ["a.geojson"]}}"#,
        )
        .unwrap();
        let a = RunConfig::load(&t).unwrap();
        assert_eq!(a, RunConfig::load(&j).unwrap());
        assert_eq!(a.train.epochs, 7);
        assert_eq!(a.analysis.min_samples, 3);
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "[train]\nlearning_rate = 1\n").unwrap();
        assert!(matches!(RunConfig::load(&t), Err(Error::Config(_))));
    }

    #[test]
    fn seed_override() {
        let c = RunConfig::default().with_seed(Some(42));
        assert_eq!((c.train.seed, c.synth.seed), (42, 42));
    }
}
