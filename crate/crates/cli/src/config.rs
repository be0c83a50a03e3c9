use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tignn_core::data::{ChainParams, LatticeParams};
use tignn_core::model::ModelKind;
use tignn_core::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Chain,
    Lattice,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: SplitKind,
    /// Replay ground-truth rates instead of the network.
    pub oracle: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: SplitKind::Test,
            oracle: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    pub trajectory: usize,
    pub start: usize,
    /// Defaults to the remaining dataset horizon.
    pub steps: Option<usize>,
}

/// Everything a run can be configured with; every field has a default and
/// command-line flags override the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorKind,
    pub model: ModelKind,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Expected per-node state length; checked against the dataset.
    pub n_dof: Option<usize>,
    pub chain: ChainParams,
    pub lattice: LatticeParams,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub rollout: RolloutSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorKind::Chain,
            model: ModelKind::Tignn,
            dataset: None,
            checkpoint: None,
            output: None,
            n_dof: None,
            chain: ChainParams::default(),
            lattice: LatticeParams::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            rollout: RolloutSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing config {}", p.display()))
            }
            None => Ok(Self::default()),
        }
    }

    /// The master seed drives every random stream of every command.
    pub fn set_seed(&mut self, seed: u64) {
        self.chain.seed = seed;
        self.lattice.seed = seed;
        self.train.seed = seed;
    }
}

pub const OUTPUT_ROOT_VAR: &str = "TIGNN_OUTPUT_ROOT";

/// Relative output paths are placed under `$TIGNN_OUTPUT_ROOT` when set.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_defaults_and_custom() {
        let a = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&a.to_toml().unwrap()).unwrap(), a);

        let text = r#"
            generator = "lattice"
            model = "vanilla"
            dataset = "data/lattice.bin"
            n_dof = 5

            [lattice]
            nx = 3
            ny = 2
            damping = 0.25

            [train]
            hidden_dim = 16
            lr_milestones = [10, 20]
            sigma_noise = 4e-5
            pairs_per_epoch = 64

            [eval]
            split = "val"
            oracle = true
        "#;
        let b = RunConfig::from_toml(text).unwrap();
        assert_eq!(b.lattice.nx, 3);
        assert_eq!(b.train.sigma_noise, 4e-5);
        assert_eq!(b.model, ModelKind::Vanilla);
        let again = RunConfig::from_toml(&b.to_toml().unwrap()).unwrap();
        assert_eq!(again, b);
        assert_eq!(again.to_toml().unwrap(), b.to_toml().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nhiden_dim = 3\n").is_err());
    }

    #[test]
    fn seed_reaches_every_stream() {
        let mut c = RunConfig::default();
        c.set_seed(17);
        assert_eq!((c.chain.seed, c.lattice.seed, c.train.seed), (17, 17, 17));
    }
}
