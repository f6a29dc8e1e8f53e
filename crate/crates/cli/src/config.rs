//! The run configuration: one TOML document, every field defaulted.

use std::path::Path;

use flowmatch::latent_codec::CodecMode;
use flowmatch::{
    CodecConfig, DatasetSpec, GuidanceConfig, NetConfig, PathConfig, SolverConfig, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// File name of the resolved config echoed into every output directory.
pub const ECHO_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleFormat {
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub n: usize,
    pub cond: usize,
    pub format: SampleFormat,
    /// Also dump every chain's latent trajectory.
    pub trajectories: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            cond: 0,
            format: SampleFormat::Csv,
            trajectories: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Chains per setting; chain `i` is conditioned on class `i mod K`.
    pub n_samples: usize,
    pub guidance_scales: Vec<f64>,
    pub guidance_steps: usize,
    pub step_counts: Vec<usize>,
    pub step_guidance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 5000,
            guidance_scales: vec![1.0, 2.0, 3.0, 4.0],
            guidance_steps: 25,
            step_counts: vec![5, 10, 25, 50, 100, 200],
            step_guidance: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for sampling and evaluation (training uses `train.seed`).
    pub seed: u64,
    pub output_dir: String,
    /// Record real elapsed time in `loss.csv`; off keeps the file
    /// byte-reproducible (the column is written as 0).
    pub log_wall_clock: bool,
    pub dataset: DatasetSpec,
    pub path: PathConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub codec: CodecConfig,
    pub solver: SolverConfig,
    pub guidance: GuidanceConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "runs/default".into(),
            log_wall_clock: false,
            dataset: DatasetSpec::default(),
            path: PathConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            codec: CodecConfig::default(),
            solver: SolverConfig::default(),
            guidance: GuidanceConfig::default(),
            sample: SampleConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn bad(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(bad)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(bad)
    }

    /// Writes the resolved config into `dir`.
    pub fn echo(&self, dir: &Path) -> CliResult<()> {
        std::fs::write(dir.join(ECHO_FILE), self.to_toml()?)?;
        Ok(())
    }

    /// Dimension the network operates in.
    pub fn model_dim(&self) -> usize {
        match self.codec.mode {
            CodecMode::Identity => self.dataset.dim,
            _ => self.codec.latent_dim,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.dataset.validate().map_err(bad)?;
        self.path.validate().map_err(bad)?;
        self.net.validate().map_err(bad)?;
        self.train.validate().map_err(bad)?;
        self.solver.validate().map_err(bad)?;
        self.guidance.validate().map_err(bad)?;
        if self.codec.mode == CodecMode::Identity {
            if self.codec.data_dim != self.dataset.dim {
                return Err(bad("identity codec needs codec.data_dim == dataset.dim"));
            }
        } else if self.codec.data_dim < self.dataset.dim {
            return Err(bad("codec.data_dim is smaller than dataset.dim"));
        }
        self.codec.validate().map_err(bad)?;
        if self.net.input_dim != self.model_dim() {
            return Err(bad(format!(
                "net.input_dim is {} but the model space has dim {}",
                self.net.input_dim,
                self.model_dim()
            )));
        }
        if self.net.num_classes != self.dataset.num_classes {
            return Err(bad(format!(
                "net.num_classes is {} but the dataset has {} classes",
                self.net.num_classes, self.dataset.num_classes
            )));
        }
        if self.sample.n == 0 || self.eval.n_samples == 0 {
            return Err(bad("sample.n and eval.n_samples must be >= 1"));
        }
        if self.eval.guidance_scales.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(bad("eval.guidance_scales must be finite and >= 0"));
        }
        if !(self.eval.step_guidance.is_finite() && self.eval.step_guidance >= 0.0) {
            return Err(bad("eval.step_guidance must be finite and >= 0"));
        }
        if self.eval.guidance_steps == 0 || self.eval.step_counts.contains(&0) {
            return Err(bad("step counts must be >= 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::from_toml("[train]\nnum_steps = 7\n[dataset]\nseed = 3\n").unwrap();
        assert_eq!(cfg.train.num_steps, 7);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.dataset.seed, 3);
        assert_eq!(cfg.dataset.means.len(), 4);
    }

    #[test]
    fn rejects_unknown_and_inconsistent_fields() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[train]\nlearnig_rate = 1.0").is_err());
        assert!(RunConfig::from_toml("[net]\nnum_classes = 3").is_err());
        assert!(RunConfig::from_toml("[train]\ncond_dropout_prob = 1.5").is_err());
        let e = RunConfig::from_toml("[codec]\nlatent_dim = 3").unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn identity_codec_uses_dataset_dim() {
        let cfg = RunConfig::from_toml("[codec]\nmode = \"identity\"\ndata_dim = 2\nlatent_dim = 2\n").unwrap();
        assert_eq!(cfg.model_dim(), 2);
    }

    #[test]
    fn awkward_floats_survive_the_echo() {
        let mut cfg = RunConfig::default();
        cfg.train.learning_rate = 0.1 + 0.2;
        cfg.path.sigma_min = 1.0 / 3.0 * 1e-3;
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back.train.learning_rate.to_bits(), cfg.train.learning_rate.to_bits());
        assert_eq!(back.path.sigma_min.to_bits(), cfg.path.sigma_min.to_bits());
    }
}
