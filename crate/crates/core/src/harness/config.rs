use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::coop_mmdp::{BonusForm, SamplerSpec};
use crate::coop_parallel::SyncPolicy;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ParallelHomogeneous,
    ParallelSmallDev,
    ParallelContextual,
    Mmdp,
}

impl Mode {
    pub fn is_parallel(self) -> bool {
        self != Mode::Mmdp
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub feat_dim: usize,
    pub agents: usize,
    /// Small-deviation level `ξ`.
    pub xi: f64,
    /// Context dimension `k`.
    pub context_dim: usize,
    /// Requested heterogeneity rank `χ`.
    pub target_rank: usize,
    /// Per-agent local state and action counts of an MMDP.
    pub state_sizes: Vec<usize>,
    pub action_sizes: Vec<usize>,
    pub reward_feat_dim: usize,
    pub trans_feat_dim: usize,
    /// Environment seed; the master seed when absent.
    pub seed: Option<u64>,
    /// Load the environment from a spec document instead of generating it.
    pub spec_path: Option<PathBuf>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            num_states: 5,
            num_actions: 3,
            horizon: 3,
            feat_dim: 5,
            agents: 3,
            xi: 0.0,
            context_dim: 0,
            target_rank: 0,
            state_sizes: vec![2, 2],
            action_sizes: vec![2, 2],
            reward_feat_dim: 2,
            trans_feat_dim: 2,
            seed: None,
            spec_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgoConfig {
    pub episodes: usize,
    /// Ridge `λ`.
    pub ridge: f64,
    pub c_beta: f64,
    /// Threshold `S`, or `"always"` / `"never"`.
    pub sync: SyncPolicy,
    pub sampler: SamplerSpec,
    pub bonus: BonusForm,
    pub start_state: Option<usize>,
    pub replica_checks: bool,
    pub check_covariance: bool,
    /// Monte-Carlo draws for the MMDP Bayes regret; 0 skips it.
    pub bayes_samples: usize,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            ridge: 1.0,
            c_beta: 1.0,
            sync: SyncPolicy::Threshold(5.0),
            sampler: SamplerSpec::default(),
            bonus: BonusForm::default(),
            start_state: None,
            replica_checks: true,
            check_covariance: false,
            bayes_samples: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub algo: AlgoConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ParallelHomogeneous,
            env: EnvConfig::default(),
            algo: AlgoConfig::default(),
            seed: 0,
            output_dir: None,
        }
    }
}

fn config_error(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config { path: path.into(), message: message.into() }
}

impl ExperimentConfig {
    /// Parses JSON, reporting the failing field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(path, e.into_inner().to_string())
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            config_error(path, e.into_inner().to_string())
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `key = value` overrides. Keys are dotted paths such as
    /// `algo.c_beta`; a bare leaf name is accepted when it is unambiguous.
    /// Values parse as JSON, falling back to a plain string.
    pub fn with_overrides<'a, I>(&self, overrides: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut root = serde_json::to_value(self)?;
        for (key, raw) in overrides {
            let path = resolve_key(&root, key)?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut root;
            for part in &path {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part.as_str()))
                    .ok_or_else(|| config_error(key, "unknown key"))?;
            }
            *slot = value;
        }
        Self::from_value(root)
    }

    /// Range checks beyond the schema.
    pub fn check(&self) -> Result<()> {
        let e = &self.env;
        let a = &self.algo;
        let positive = [
            ("env.num_states", e.num_states),
            ("env.num_actions", e.num_actions),
            ("env.horizon", e.horizon),
            ("env.feat_dim", e.feat_dim),
            ("env.agents", e.agents),
        ];
        if self.mode.is_parallel() && e.spec_path.is_none() {
            for (path, v) in positive {
                if v == 0 {
                    return Err(config_error(path, "must be positive"));
                }
            }
        }
        if !(a.ridge > 0.0 && a.ridge.is_finite()) {
            return Err(config_error("algo.ridge", "must be positive"));
        }
        if !(a.c_beta > 0.0 && a.c_beta.is_finite()) {
            return Err(config_error("algo.c_beta", "must be positive"));
        }
        if !(0.0..1.0).contains(&e.xi) {
            return Err(config_error("env.xi", "must lie in [0, 1)"));
        }
        match self.mode {
            Mode::ParallelSmallDev if e.xi == 0.0 && e.spec_path.is_none() => {
                Err(config_error("env.xi", "small-deviation mode needs ξ > 0"))
            }
            Mode::ParallelContextual if e.target_rank > e.context_dim => {
                Err(config_error("env.target_rank", "cannot exceed env.context_dim"))
            }
            Mode::Mmdp if a.sync == SyncPolicy::Never => {
                Err(config_error("algo.sync", "MMDP runs need a threshold or \"always\""))
            }
            Mode::Mmdp if e.spec_path.is_none() && (e.state_sizes.is_empty() || e.state_sizes.len() != e.action_sizes.len()) => {
                Err(config_error("env.state_sizes", "need one state and action size per agent"))
            }
            _ => Ok(()),
        }
    }

    pub fn env_seed(&self) -> u64 {
        self.env.seed.unwrap_or(self.seed)
    }
}

fn resolve_key(root: &Value, key: &str) -> Result<Vec<String>> {
    if key.contains('.') {
        return Ok(key.split('.').map(String::from).collect());
    }
    let obj = root.as_object().expect("config serializes to an object");
    if obj.contains_key(key) {
        return Ok(vec![key.to_string()]);
    }
    let hits: Vec<Vec<String>> = obj
        .iter()
        .filter_map(|(section, v)| v.as_object().filter(|o| o.contains_key(key)).map(|_| vec![section.clone(), key.to_string()]))
        .collect();
    match hits.len() {
        1 => Ok(hits.into_iter().next().expect("one hit")),
        0 => Err(config_error(key, "unknown key")),
        _ => Err(config_error(key, "ambiguous key; use a dotted path")),
    }
}
