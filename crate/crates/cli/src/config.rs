//! TOML run configuration.

use std::path::{Path, PathBuf};

use btlinfer::fitting::{FitConfig, RefinementSplits};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub top_k: Option<usize>,
    pub tie_policy: String,
    pub category_map: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { path: None, top_k: None, tie_policy: "drop".into(), category_map: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub rank: usize,
    /// Entry clipping bound `α₀`.
    pub alpha0: f64,
    pub altmin_rounds: usize,
    pub ridge: f64,
    pub newton_max_iter: usize,
    pub newton_tol: f64,
    /// `off` or `three_way`.
    pub refinement_splits: String,
    pub split_seed: u64,
}

impl Default for FitSection {
    fn default() -> Self {
        let f = FitConfig::new(3);
        Self {
            rank: f.rank,
            alpha0: f.clip_bound,
            altmin_rounds: f.altmin_rounds,
            ridge: f.ridge,
            newton_max_iter: f.newton_max_iter,
            newton_tol: f.newton_tol,
            refinement_splits: "off".into(),
            split_seed: f.split_seed,
        }
    }
}

impl FitSection {
    pub fn fit_config(&self) -> CliResult<FitConfig> {
        let refinement_splits = match self.refinement_splits.as_str() {
            "off" => RefinementSplits::Off,
            "three_way" => RefinementSplits::ThreeWay,
            s => return Err(CliError::Config(format!("refinement_splits must be off or three_way, got {s:?}"))),
        };
        let cfg = FitConfig {
            rank: self.rank,
            altmin_rounds: self.altmin_rounds,
            clip_bound: self.alpha0,
            newton_max_iter: self.newton_max_iter,
            newton_tol: self.newton_tol,
            ridge: self.ridge,
            refinement_splits,
            split_seed: self.split_seed,
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub folds: usize,
    pub seed: u64,
    pub level: f64,
    pub method: String,
    pub target: Option<String>,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self { folds: 6, seed: 0, level: 0.95, method: "efficient".into(), target: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub model: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub leaderboard: Option<PathBuf>,
    pub battles: Option<PathBuf>,
    pub diagnostics: Option<PathBuf>,
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub d1: usize,
    pub d2: usize,
    pub rank: usize,
    pub alpha: f64,
    pub n: usize,
    pub replications: usize,
    pub methods: Vec<String>,
    /// Index-based target, e.g. `entry:0:0` or `winprob:0:1:0`.
    pub target: String,
    /// `uniform` or `dirichlet:CONCENTRATION`.
    pub sampling: String,
    pub seed: u64,
    pub redraw_truth: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            d1: 60,
            d2: 60,
            rank: 3,
            alpha: 5.0,
            n: 5400,
            replications: 100,
            methods: vec!["efficient".into(), "whitened".into()],
            target: "entry:0:0".into(),
            sampling: "uniform".into(),
            seed: 0,
            redraw_truth: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataSection,
    pub fit: FitSection,
    pub inference: InferenceSection,
    pub output: OutputSection,
    pub simulation: SimulationSection,
}

impl Config {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Fully resolved configuration as TOML.
    pub fn echo(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let c = Config::parse("[fit]\nrank = 5\n[simulation]\nd1 = 10\n").unwrap();
        assert_eq!(c.fit.rank, 5);
        assert_eq!(c.fit.alpha0, 7.0);
        assert_eq!(c.simulation.d1, 10);
        assert_eq!(c.inference.folds, 6);
    }

    #[test]
    fn echo_parses_back_equal() {
        let mut c = Config::default();
        c.data.path = Some("x.csv".into());
        c.fit.ridge = 1e-6;
        c.simulation.methods.push("naive".into());
        assert_eq!(Config::parse(&c.echo().unwrap()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(Config::parse("[fit]\nrnak = 5\n"), Err(CliError::Config(_))));
    }
}
