use std::fs;
use std::path::{Path, PathBuf};

use moe_relayout::cost::AnalysisConfig;
use moe_relayout::oracle::OracleBudget;
use moe_relayout::planner::HistoryMode;
use moe_relayout::{CostParams, LayoutSearch, Topology};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub n_experts: usize,
    pub capacity: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerBlock {
    #[serde(default = "default_epsilon")]
    pub epsilon: usize,
    pub seed: Option<u64>,
    #[serde(default)]
    pub history: HistoryMode,
}

fn default_epsilon() -> usize {
    2
}

impl Default for PlannerBlock {
    fn default() -> Self {
        Self {
            epsilon: default_epsilon(),
            seed: None,
            history: HistoryMode::Latest,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsBlock {
    pub trace: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub topology: Topology,
    pub cost: CostParams,
    pub model: Option<ModelBlock>,
    #[serde(default)]
    pub planner: PlannerBlock,
    pub analysis: Option<AnalysisConfig>,
    #[serde(default)]
    pub oracle: OracleBudget,
    #[serde(default)]
    pub paths: PathsBlock,
}

impl RunConfig {
    /// Parses and checks every block that is present, before any work runs.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        cfg.topology.validate()?;
        cfg.cost.validate()?;
        cfg.planner.history.validate()?;
        if cfg.planner.epsilon < 2 {
            return Err(CliError::precondition(format!(
                "planner.epsilon must be >= 2, got {}",
                cfg.planner.epsilon
            )));
        }
        if cfg.oracle.max_layout_candidates == 0 || cfg.oracle.max_token_granularity == 0 {
            return Err(CliError::precondition("oracle budget fields must be positive"));
        }
        if let Some(m) = &cfg.model {
            let n = cfg.topology.n_devices();
            if m.capacity == 0 || m.capacity > m.n_experts || m.n_experts > n * m.capacity {
                return Err(CliError::precondition(format!(
                    "model needs C <= E <= N*C, got N={n}, E={}, C={}",
                    m.n_experts, m.capacity
                )));
            }
        }
        if let Some(a) = &cfg.analysis {
            a.validate()?;
        }
        Ok(cfg)
    }

    pub fn model(&self) -> Result<&ModelBlock, CliError> {
        self.model
            .as_ref()
            .ok_or_else(|| CliError::config("config has no model block"))
    }

    /// Layout search settings; `--seed` wins over `planner.seed`, and one of
    /// them must be given.
    pub fn search(&self, seed: Option<u64>) -> Result<LayoutSearch, CliError> {
        let seed = seed
            .or(self.planner.seed)
            .ok_or_else(|| CliError::config("a seed is required: pass --seed or set planner.seed"))?;
        Ok(LayoutSearch {
            epsilon: self.planner.epsilon,
            seed,
            history: self.planner.history,
        })
    }
}

pub fn resolve_path(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::config(format!("no {what} path: pass it on the command line or under paths")))
}
