//! TOML run configuration. Every hyperparameter not given falls back to the
//! published defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::costate::{LearnerConfig, Method};
use crate::ddpg::{DdpgConfig, ExplorationNoise};
use crate::envgen::{DynamicsKind, TaskSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Cpg,
    Cf,
    Vcf,
    Ddpg,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Cpg => "CPG",
            MethodKind::Cf => "CF",
            MethodKind::Vcf => "VCF",
            MethodKind::Ddpg => "DDPG",
        }
    }

    pub fn costate(self) -> Option<Method> {
        match self {
            MethodKind::Cpg => Some(Method::Cpg),
            MethodKind::Cf => Some(Method::Cf),
            MethodKind::Vcf => Some(Method::Vcf),
            MethodKind::Ddpg => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub n_s: usize,
    pub n_c: usize,
    pub n_cost: usize,
    #[serde(default = "default_dynamics")]
    pub dynamics: DynamicsKind,
    #[serde(default)]
    pub noise_sigma: f64,
}

fn default_dynamics() -> DynamicsKind {
    DynamicsKind::Linear
}

impl TaskConfig {
    pub fn spec(&self, seed: u64) -> TaskSpec {
        TaskSpec {
            n_s: self.n_s,
            n_c: self.n_c,
            n_cost: self.n_cost,
            dynamics: self.dynamics,
            noise_sigma: self.noise_sigma,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Target policy parameter count; mutually exclusive with `policy_hidden`.
    #[serde(default)]
    pub n_mu: Option<usize>,
    #[serde(default)]
    pub policy_hidden: Option<Vec<usize>>,
    /// Target ⟨f⟩ + ⟨c′⟩ parameter count.
    pub n_est: usize,
    /// Target ⟨Q⟩ parameter count; defaults to `n_est`.
    #[serde(default)]
    pub ddpg_n_est: Option<usize>,
    #[serde(default = "default_model_layers")]
    pub model_layers: usize,
}

fn default_model_layers() -> usize {
    4
}

/// One method entry; unset fields keep the method's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub method: Option<MethodKind>,
    pub label: Option<String>,
    pub lr_policy: Option<f64>,
    pub tau: Option<f64>,
    pub lr_babble: Option<f64>,
    pub lr_focus: Option<f64>,
    pub lr_cprime: Option<f64>,
    pub gate: Option<bool>,
    pub babble_minibatches: Option<usize>,
    pub mental_practice: Option<f64>,
    pub cpg_model_refresh: Option<bool>,
    pub cprime_refinement: Option<bool>,
    pub cprime_replay_capacity: Option<usize>,
    pub lr_critic: Option<f64>,
    pub minibatch: Option<usize>,
    pub replay_capacity: Option<usize>,
    pub updates_per_step: Option<usize>,
    pub noise: Option<ExplorationNoise>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Learner {
    Costate(LearnerConfig),
    Ddpg(DdpgConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedMethod {
    pub label: String,
    pub kind: MethodKind,
    pub learner: Learner,
}

impl MethodConfig {
    pub fn of(kind: MethodKind) -> Self {
        MethodConfig { method: Some(kind), ..Default::default() }
    }

    pub fn resolve(&self, batch_size: usize) -> Result<ResolvedMethod> {
        let kind = self
            .method
            .ok_or_else(|| Error::Config("every [[methods]] entry needs `method`".into()))?;
        let label = self.label.clone().unwrap_or_else(|| kind.name().to_string());
        if label.is_empty() || !label.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(Error::Config(format!(
                "label '{label}' must be non-empty and use only [A-Za-z0-9-_.]"
            )));
        }
        let misplaced = |names: &[(&str, bool)]| -> Result<()> {
            match names.iter().find(|(_, set)| *set) {
                Some((n, _)) => Err(Error::Config(format!("`{n}` does not apply to {}", kind.name()))),
                None => Ok(()),
            }
        };
        let learner = match kind.costate() {
            Some(method) => {
                misplaced(&[
                    ("lr_critic", self.lr_critic.is_some()),
                    ("minibatch", self.minibatch.is_some()),
                    ("replay_capacity", self.replay_capacity.is_some()),
                    ("updates_per_step", self.updates_per_step.is_some()),
                    ("noise", self.noise.is_some()),
                ])?;
                let mut c = LearnerConfig::defaults(method);
                c.batch_size = batch_size;
                macro_rules! set {
                    ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
                }
                set!(lr_policy, tau, lr_babble, lr_focus, lr_cprime, gate, babble_minibatches,
                     mental_practice, cpg_model_refresh, cprime_refinement, cprime_replay_capacity);
                c.validate()?;
                Learner::Costate(c)
            }
            None => {
                misplaced(&[
                    ("lr_babble", self.lr_babble.is_some()),
                    ("lr_focus", self.lr_focus.is_some()),
                    ("lr_cprime", self.lr_cprime.is_some()),
                    ("gate", self.gate.is_some()),
                    ("babble_minibatches", self.babble_minibatches.is_some()),
                    ("mental_practice", self.mental_practice.is_some()),
                    ("cpg_model_refresh", self.cpg_model_refresh.is_some()),
                    ("cprime_refinement", self.cprime_refinement.is_some()),
                    ("cprime_replay_capacity", self.cprime_replay_capacity.is_some()),
                ])?;
                let mut c = DdpgConfig { batch_size, ..Default::default() };
                if let Some(v) = self.lr_policy {
                    c.lr_actor = v;
                }
                if let Some(v) = self.noise {
                    c.noise = v;
                }
                macro_rules! set {
                    ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
                }
                set!(tau, lr_critic, minibatch, replay_capacity, updates_per_step);
                c.validate()?;
                Learner::Ddpg(c)
            }
        };
        Ok(ResolvedMethod { label, kind, learner })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_rolls")]
    pub n_rolls: usize,
    #[serde(default = "default_eval_period")]
    pub eval_period: usize,
    #[serde(default = "default_test_set")]
    pub test_set_size: usize,
    /// Movements per rollout (n_m).
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Run trials on the rayon pool; results do not depend on this.
    #[serde(default = "default_true")]
    pub parallel: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub task: TaskConfig,
    pub networks: NetworkConfig,
    pub methods: Vec<MethodConfig>,
}

fn default_name() -> String {
    "block".into()
}
fn default_trials() -> usize {
    10
}
fn default_rolls() -> usize {
    2500
}
fn default_eval_period() -> usize {
    10
}
fn default_test_set() -> usize {
    100
}
fn default_batch() -> usize {
    100
}
fn default_true() -> bool {
    true
}

impl RunConfig {
    /// A block with default settings and the given task, networks and methods.
    pub fn new(task: TaskConfig, networks: NetworkConfig, methods: &[MethodKind]) -> Self {
        RunConfig {
            name: default_name(),
            master_seed: 0,
            trials: default_trials(),
            n_rolls: default_rolls(),
            eval_period: default_eval_period(),
            test_set_size: default_test_set(),
            batch_size: default_batch(),
            parallel: true,
            output_dir: None,
            task,
            networks,
            methods: methods.iter().map(|&k| MethodConfig::of(k)).collect(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)?;
        Ok((Self::from_toml_str(&text)?, text))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.eval_period == 0 || self.test_set_size == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "trials, eval_period, test_set_size and batch_size must be positive".into(),
            ));
        }
        self.task.spec(0).validate()?;
        self.resolved_methods()?;
        Ok(())
    }

    pub fn resolved_methods(&self) -> Result<Vec<ResolvedMethod>> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        let resolved: Vec<_> = self
            .methods
            .iter()
            .map(|m| m.resolve(self.batch_size))
            .collect::<Result<_>>()?;
        let mut seen = BTreeSet::new();
        for r in &resolved {
            if !seen.insert(r.label.as_str()) {
                return Err(Error::Config(format!("duplicate method label '{}'", r.label)));
            }
        }
        Ok(resolved)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [task]
        n_s = 10
        n_c = 1
        n_cost = 4

        [networks]
        n_mu = 314
        n_est = 4483

        [[methods]]
        method = "cf"
        [[methods]]
        method = "cf"
        label = "CF-p0.5"
        mental_practice = 0.5
        [[methods]]
        method = "ddpg"
    "#;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!((c.trials, c.n_rolls, c.eval_period, c.test_set_size), (10, 2500, 10, 100));
        let m = c.resolved_methods().unwrap();
        let Learner::Costate(cf) = &m[0].learner else { panic!() };
        assert_eq!(*cf, LearnerConfig::defaults(Method::Cf));
        let Learner::Costate(mp) = &m[1].learner else { panic!() };
        assert_eq!(mp.mental_practice, 0.5);
        assert_eq!(m[1].label, "CF-p0.5");
        let Learner::Ddpg(d) = &m[2].learner else { panic!() };
        assert_eq!(*d, DdpgConfig::default());
    }

    #[test]
    fn serialization_round_trips() {
        let c = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(RunConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_configs() {
        let dup = MINIMAL.replace("label = \"CF-p0.5\"", "");
        assert!(RunConfig::from_toml_str(&dup).unwrap_err().to_string().contains("duplicate"));
        let misplaced = format!("{MINIMAL}\nlr_focus = 0.1\n");
        assert!(RunConfig::from_toml_str(&misplaced).unwrap_err().to_string().contains("lr_focus"));
        let unknown = MINIMAL.replace("n_cost = 4", "n_cost = 4\nbogus = 1");
        assert!(RunConfig::from_toml_str(&unknown).is_err());
        let odd = MINIMAL.replace("n_cost = 4", "n_cost = 3");
        assert!(RunConfig::from_toml_str(&odd).is_err());
        let p = MINIMAL.replace("mental_practice = 0.5", "mental_practice = 1.5");
        assert!(RunConfig::from_toml_str(&p).is_err());
    }
}
