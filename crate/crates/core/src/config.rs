//! Experiment configuration: one TOML file drives demo generation,
//! training, evaluation and the session service.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::human::{HumanSpec, LearnerKind};
use crate::inference::TrainConfig;
use crate::planner::{PlannerConfig, Strategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: String,
    pub seed: u64,
    pub out: PathBuf,
    pub human: HumanConfig,
    pub demos: DemoConfig,
    pub train: TrainConfig,
    pub refine: RefineConfig,
    pub planner: PlannerConfig,
    pub evaluate: EvalConfig,
    pub serve: ServeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: "lander".into(),
            seed: 0,
            out: PathBuf::from("runs"),
            human: HumanConfig::default(),
            demos: DemoConfig::default(),
            train: TrainConfig::default(),
            refine: RefineConfig::default(),
            planner: PlannerConfig::default(),
            evaluate: EvalConfig::default(),
            serve: ServeConfig::default(),
        }
    }
}

/// Simulated human. Unset fields take the environment's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HumanConfig {
    pub kind: Option<LearnerKind>,
    pub eta: Option<f64>,
    pub epsilon: Option<f64>,
    pub theta0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub n: usize,
    /// Steps per demonstration; the environment horizon when unset.
    pub horizon: Option<usize>,
    /// Standard deviation of the random robot corrections.
    pub robot_sigma: Option<f64>,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig { n: 50, horizon: None, robot_sigma: None }
    }
}

/// Rounds of retraining on episodes collected with the Active planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub rounds: usize,
    pub episodes: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { rounds: 0, episodes: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Strategies to compare; the environment's usual set when empty.
    pub strategies: Vec<Strategy>,
    pub episodes: usize,
    pub horizon: Option<usize>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { strategies: Vec::new(), episodes: 20, horizon: None, checkpoint: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    /// Offer the active-teaching condition.
    pub teach: bool,
    pub tick_hz: f64,
    /// Wall-clock planning cap per tick.
    pub budget_ms: u64,
    /// Trained networks for the bias-x and bias-y arms.
    pub checkpoint_x: Option<PathBuf>,
    pub checkpoint_y: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig { host: "127.0.0.1".into(), port: 8080, teach: true, tick_hz: 10.0, budget_ms: 50, checkpoint_x: None, checkpoint_y: None }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    /// SHA-256 of the canonical JSON form, so formatting and key order in
    /// the source file do not matter. The output directory is excluded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(&ExperimentConfig { out: PathBuf::new(), ..self.clone() }).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        EnvSpec::by_name(&self.env)
    }

    pub fn human_spec(&self, env: &EnvSpec) -> Result<HumanSpec> {
        let h = &self.human;
        let mut spec = match h.kind {
            Some(kind) => HumanSpec::for_env(env, kind),
            None => HumanSpec::default_for(env),
        };
        if let Some(eta) = h.eta {
            spec.eta = eta;
        }
        if let Some(eps) = h.epsilon {
            spec.epsilon = eps;
        }
        spec.theta0 = h.theta0.clone();
        spec.validate(env)?;
        Ok(spec)
    }

    pub fn strategies(&self, env: &EnvSpec) -> Vec<Strategy> {
        if !self.evaluate.strategies.is_empty() {
            return self.evaluate.strategies.clone();
        }
        match env.kind {
            crate::envs::EnvKind::Lander | crate::envs::EnvKind::Arm => {
                vec![Strategy::Oracle, Strategy::Active, Strategy::Passive, Strategy::Random]
            }
            crate::envs::EnvKind::Goal | crate::envs::EnvKind::Pref => vec![Strategy::Oracle, Strategy::Active, Strategy::Static],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let env = self.env_spec()?;
        self.human_spec(&env)?;
        self.train.validate()?;
        self.planner.validate()?;
        if self.demos.n == 0 || self.demos.horizon == Some(0) {
            return Err(Error::Config("demo count and horizon must be positive".into()));
        }
        if !(self.serve.tick_hz > 0.0) {
            return Err(Error::Config("tick rate must be positive".into()));
        }
        Ok(())
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.out.join("demos.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.out.join("net.json")
    }

    pub fn train_log_path(&self) -> PathBuf {
        self.out.join("train_log.csv")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out.join("metrics.csv")
    }
}
