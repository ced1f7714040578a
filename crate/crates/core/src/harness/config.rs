use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{BoostRule, Quotas};
use crate::bucketizer::BucketizerConfig;
use crate::debias::{CombinerWeights, DebiasConfig, Mode};
use crate::error::{Error, Result};
use crate::estimator::TrainConfig;
use crate::metrics::MetricConfig;
use crate::policies::{ArmSpec, PolicySpec};
use crate::simulator::{simulator_schema, SimulatorConfig, UniverseConfig};

/// A complete, explicitly seeded experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub universe: UniverseConfig,
    pub simulator: SimulatorConfig,
    /// Control sessions run before the arms fork; their log trains the estimators.
    pub warmup_sessions: usize,
    pub sessions: usize,
    pub seed: u64,
    pub arms: Vec<ArmSpec>,
    pub bucketizer: BucketizerConfig,
    pub train: TrainConfig,
    pub debias: DebiasConfig,
    pub combiner: CombinerWeights,
    pub metrics: MetricConfig,
    /// Persist warm-up and per-arm interaction logs in the bundle.
    pub write_logs: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            universe: UniverseConfig::default(),
            simulator: SimulatorConfig::default(),
            warmup_sessions: 10,
            sessions: 50,
            seed: 11,
            arms: default_arms(),
            bucketizer: BucketizerConfig::default(),
            train: TrainConfig::default(),
            debias: DebiasConfig::default(),
            combiner: CombinerWeights::default(),
            metrics: MetricConfig::default(),
            write_logs: false,
        }
    }
}

pub fn default_arms() -> Vec<ArmSpec> {
    let arm = |name: &str, policy| ArmSpec {
        name: name.into(),
        policy,
    };
    vec![
        arm("control", PolicySpec::Control),
        arm(
            "lafb_discrete",
            PolicySpec::Lafb {
                mode: Mode::Discrete,
                debias: None,
            },
        ),
        arm(
            "lafb_continuous",
            PolicySpec::Lafb {
                mode: Mode::Continuous,
                debias: None,
            },
        ),
        arm("log_pop", PolicySpec::LogPop { lambda: 0.5 }),
        arm("user_centric", PolicySpec::UserCentric { quotas: Quotas::default() }),
        arm("item_centric", PolicySpec::ItemCentric { quotas: Quotas::default() }),
        arm("static_boost", PolicySpec::StaticBoost { rule: BoostRule::default() }),
    ]
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.check()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Hash of the normalized config, so formatting differences do not matter.
    pub fn sha256(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// The first control arm, which every other arm is compared against.
    pub fn control_index(&self) -> Option<usize> {
        self.arms.iter().position(|a| a.policy == PolicySpec::Control)
    }

    pub fn check(&self) -> Result<()> {
        self.universe.check()?;
        self.simulator.check(self.universe.items)?;
        self.bucketizer.check()?;
        self.train.check()?;
        self.debias.check()?;
        self.metrics.check()?;
        if self.warmup_sessions == 0 || self.sessions == 0 {
            return Err(Error::Config("warmup_sessions and sessions must be positive".into()));
        }
        if self.control_index().is_none() {
            return Err(Error::Config("arms must include a control arm".into()));
        }
        let mut names = BTreeSet::new();
        for arm in &self.arms {
            let valid = !arm.name.is_empty()
                && arm
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !valid {
                return Err(Error::Config(format!(
                    "arm name {:?} must be non-empty ASCII letters, digits, '_' or '-'",
                    arm.name
                )));
            }
            if !names.insert(arm.name.as_str()) {
                return Err(Error::Config(format!("duplicate arm name {}", arm.name)));
            }
        }
        let schema = simulator_schema();
        if schema.position(&self.metrics.level_feature).is_none() {
            return Err(Error::Config(format!("unknown level feature {}", self.metrics.level_feature)));
        }
        for arm in &self.arms {
            if let PolicySpec::StaticBoost { rule } = &arm.policy {
                if schema.position(&rule.feature).is_none() {
                    return Err(Error::Config(format!("arm {}: unknown feature {}", arm.name, rule.feature)));
                }
            }
        }
        Ok(())
    }
}
