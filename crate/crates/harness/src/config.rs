//! Experiment configuration files.
//!
//! A config is a TOML document with a `kind`, a list of `seeds`, and one
//! optional table per experiment family. Every table has defaults, so a file
//! only needs the values it changes:
//!
//! ```toml
//! kind = "tabular"
//! seeds = [1, 2, 3, 4, 5]
//!
//! [tabular]
//! states = 20
//! agents = 4
//! actions = 3
//!
//! [tabular.train]
//! steps = 50000
//! actor_step = 0.01
//! ```

use std::path::Path;

use decmarl::continuous::ContinuousConfig;
use decmarl::tabular::{StepSizeSchedule, TabularConfig};
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Tabular,
    Continuous,
    ConsensusDemo,
    VerifyTheorem1,
    VerifyTheorem2,
    Compare,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Tabular => "tabular",
            Self::Continuous => "continuous",
            Self::ConsensusDemo => "consensus-demo",
            Self::VerifyTheorem1 => "verify-theorem1",
            Self::VerifyTheorem2 => "verify-theorem2",
            Self::Compare => "compare",
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Top-level experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub tabular: TabularExperiment,
    #[serde(default)]
    pub continuous: ContinuousExperiment,
    #[serde(default)]
    pub consensus: ConsensusDemoConfig,
    #[serde(default)]
    pub theorem1: Theorem1Config,
    #[serde(default)]
    pub theorem2: Theorem2Config,
    #[serde(default)]
    pub compare: CompareConfig,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            seeds: default_seeds(),
            tabular: TabularExperiment::default(),
            continuous: ContinuousExperiment::default(),
            consensus: ConsensusDemoConfig::default(),
            theorem1: Theorem1Config::default(),
            theorem2: Theorem2Config::default(),
            compare: CompareConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Checks everything the selected experiment will use.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seeds must not be empty".into()));
        }
        match self.kind {
            ExperimentKind::Tabular => self.tabular.validate(),
            ExperimentKind::Continuous => Ok(self.continuous.train.validate()?),
            ExperimentKind::ConsensusDemo => self.consensus.validate(),
            ExperimentKind::VerifyTheorem1 => self.theorem1.validate(),
            ExperimentKind::VerifyTheorem2 => self.theorem2.validate(),
            ExperimentKind::Compare => {
                self.tabular.validate()?;
                self.compare.validate()
            }
        }
    }
}

/// Random-MDP learning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabularExperiment {
    /// Fixed instance for every seed; when absent each seed draws its own MDP.
    pub mdp_seed: Option<u64>,
    pub states: usize,
    pub agents: usize,
    pub actions: usize,
    pub gamma: f64,
    /// Curve level for steps-to-threshold; the uniform-random-policy return
    /// when absent.
    pub return_threshold: Option<f64>,
    pub train: TabularConfig,
}

impl Default for TabularExperiment {
    fn default() -> Self {
        Self {
            mdp_seed: None,
            states: 20,
            agents: 4,
            actions: 3,
            gamma: 0.9,
            return_threshold: None,
            train: TabularConfig::default(),
        }
    }
}

impl TabularExperiment {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.states == 0 || self.agents == 0 || self.actions == 0 {
            return Err(HarnessError::Config("states, agents and actions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(HarnessError::Config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        Ok(self.train.validate()?)
    }

    pub fn mdp_seed_for(&self, seed: u64) -> u64 {
        self.mdp_seed.unwrap_or(seed)
    }
}

/// Navigation learning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuousExperiment {
    pub train: ContinuousConfig,
    /// Episodes rolled out for the frozen-initial and trained policy scores.
    pub eval_episodes: usize,
    /// Episodes in the first/last learning-curve windows.
    pub window: usize,
}

impl Default for ContinuousExperiment {
    fn default() -> Self {
        Self {
            train: ContinuousConfig::default(),
            eval_episodes: 100,
            window: 100,
        }
    }
}

/// Neighbor averaging demonstration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusDemoConfig {
    /// `ring:N`, `complete:N`, `path:N`, or a path to an edge-list file.
    pub graph: String,
    pub x0: Vec<f64>,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for ConsensusDemoConfig {
    fn default() -> Self {
        Self {
            graph: "ring:4".into(),
            x0: vec![1.0, 2.0, 3.0, 4.0],
            tol: 1e-10,
            max_iters: 10_000,
        }
    }
}

impl ConsensusDemoConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.x0.is_empty() || self.x0.iter().any(|v| !v.is_finite()) {
            return Err(HarnessError::Config("x0 must be non-empty and finite".into()));
        }
        if !(self.tol > 0.0) || self.max_iters == 0 {
            return Err(HarnessError::Config("tol and max_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Frozen-policy critic convergence check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Theorem1Config {
    pub states: usize,
    pub agents: usize,
    pub actions: usize,
    pub gamma: f64,
    pub steps: u64,
    pub schedule: StepSizeSchedule,
    pub episode_length: usize,
    pub tol: f64,
}

impl Default for Theorem1Config {
    fn default() -> Self {
        Self {
            states: 5,
            agents: 2,
            actions: 2,
            gamma: 0.9,
            steps: 200_000,
            schedule: StepSizeSchedule::default(),
            episode_length: 100,
            tol: 0.05,
        }
    }
}

impl Theorem1Config {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.states == 0 || self.agents == 0 || self.actions == 0 || self.episode_length == 0 {
            return Err(HarnessError::Config("sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) || !(self.tol > 0.0) {
            return Err(HarnessError::Config("gamma must lie in [0, 1) and tol be positive".into()));
        }
        Ok(self.schedule.validate_critic()?)
    }
}

/// Exact alternating-improvement check over many random MDPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Theorem2Config {
    pub num_mdps: usize,
    pub states: usize,
    pub agents: usize,
    pub actions: usize,
    pub gamma: f64,
    pub max_rounds: usize,
    pub tol: f64,
}

impl Default for Theorem2Config {
    fn default() -> Self {
        Self {
            num_mdps: 20,
            states: 4,
            agents: 2,
            actions: 2,
            gamma: 0.9,
            max_rounds: 100,
            tol: 1e-10,
        }
    }
}

impl Theorem2Config {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.num_mdps == 0 || self.states == 0 || self.agents == 0 || self.actions == 0 || self.max_rounds == 0 {
            return Err(HarnessError::Config("sizes and round limit must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(HarnessError::Config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// One tabular actor-critic learner per agent.
    Decentralized,
    /// One tabular actor-critic learner over the joint action.
    Centralized,
    /// ε-greedy Q-learning over the joint action.
    QLearning,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Decentralized => "decentralized",
            Self::Centralized => "centralized",
            Self::QLearning => "q-learning",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "decentralized" => Ok(Self::Decentralized),
            "centralized" => Ok(Self::Centralized),
            "q-learning" => Ok(Self::QLearning),
            other => Err(HarnessError::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodBudget {
    pub method: Method,
    /// Environment steps; must be equal across methods.
    pub steps: u64,
}

/// Paired baseline comparison on the tabular instance of `[tabular]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    /// The first entry is the method under test.
    pub methods: Vec<MethodBudget>,
    pub epsilon: f64,
    pub max_joint_actions: usize,
    /// Methods the first one must out-rank by AUC on a majority of seeds when
    /// assertions are requested.
    pub must_beat: Vec<Method>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        let steps = TabularConfig::default().steps;
        Self {
            methods: [Method::Decentralized, Method::Centralized, Method::QLearning]
                .into_iter()
                .map(|method| MethodBudget { method, steps })
                .collect(),
            epsilon: 0.1,
            max_joint_actions: 4096,
            must_beat: vec![Method::QLearning],
        }
    }
}

impl CompareConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.methods.len() < 2 {
            return Err(HarnessError::Config("compare needs at least two methods".into()));
        }
        let budget = self.methods[0].steps;
        if let Some(m) = self.methods.iter().find(|m| m.steps != budget) {
            return Err(HarnessError::BudgetMismatch {
                method: m.method.name().to_string(),
                steps: m.steps,
                expected: budget,
            });
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(HarnessError::Config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("kind = \"tabular\"\nseeds = [1, 2]\n[tabular.train]\nsteps = 500\n").unwrap();
        assert_eq!(cfg.tabular.states, 20);
        assert_eq!(cfg.tabular.train.steps, 500);
        assert_eq!(cfg.seeds, vec![1, 2]);
    }

    #[test]
    fn rejects_bad_values_before_running() {
        assert!(ExperimentConfig::from_toml("kind = \"tabular\"\nseeds = []\n").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"tabular\"\n[tabular.train.critic_schedule]\nkind = \"polynomial\"\nscale = 1.0\nexponent = 0.4\n").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"nope\"\n").is_err());
        assert!(ExperimentConfig::from_toml("kind = \"tabular\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn mismatched_budgets_are_rejected() {
        let text = "kind = \"compare\"\n[[compare.methods]]\nmethod = \"decentralized\"\nsteps = 100\n[[compare.methods]]\nmethod = \"q-learning\"\nsteps = 200\n";
        assert!(matches!(ExperimentConfig::from_toml(text), Err(HarnessError::BudgetMismatch { .. })));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::new(ExperimentKind::Compare);
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
}
