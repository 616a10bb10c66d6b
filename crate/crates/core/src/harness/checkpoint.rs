use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::costate::Agent;
use crate::ddpg::DdpgAgent;
use crate::envgen::TaskSpec;
use crate::error::{Error, Result};
use crate::nn::MlpNet;

const POLICY_FORMAT: &str = "costate-policy";
const AGENT_FORMAT: &str = "costate-agent";
const VERSION: u32 = 1;

/// A trained policy with the task it was trained on and its test-set seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format: String,
    pub version: u32,
    pub label: String,
    pub trial: usize,
    pub task: TaskSpec,
    pub test_set_seed: u64,
    pub test_set_size: usize,
    pub policy: MlpNet,
}

/// Full learner state, including optimizer moments and replay buffers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "agent", rename_all = "lowercase")]
#[allow(clippy::large_enum_variant)]
pub enum AgentCheckpoint {
    Costate(Agent),
    Ddpg(DdpgAgent),
}

#[derive(Serialize, Deserialize)]
struct AgentEnvelope {
    format: String,
    version: u32,
    #[serde(flatten)]
    body: AgentCheckpoint,
}

fn check_header(format: &str, version: u32, want: &str) -> Result<()> {
    if format != want || version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint {format} v{version}")));
    }
    Ok(())
}

impl PolicyCheckpoint {
    pub fn new(label: &str, trial: usize, task: TaskSpec, test_set_seed: u64, test_set_size: usize, policy: MlpNet) -> Self {
        PolicyCheckpoint {
            format: POLICY_FORMAT.into(),
            version: VERSION,
            label: label.into(),
            trial,
            task,
            test_set_seed,
            test_set_size,
            policy,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: PolicyCheckpoint = serde_json::from_str(text)?;
        check_header(&ck.format, ck.version, POLICY_FORMAT)?;
        ck.policy.check_consistent()?;
        ck.task.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl AgentCheckpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&AgentEnvelope {
            format: AGENT_FORMAT.into(),
            version: VERSION,
            body: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let env: AgentEnvelope = serde_json::from_str(text)?;
        check_header(&env.format, env.version, AGENT_FORMAT)?;
        let nets: Vec<&MlpNet> = match &env.body {
            AgentCheckpoint::Costate(a) => vec![&a.policy, &a.shadow, &a.model, &a.cprime],
            AgentCheckpoint::Ddpg(a) => vec![&a.actor, &a.critic, &a.target_actor, &a.target_critic],
        };
        for n in nets {
            n.check_consistent()?;
        }
        Ok(env.body)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
