//! Versioned JSON checkpoints of policy parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::nn::Mlp;
use super::{Hyperparams, PolicyParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetDump {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

impl From<&Mlp> for NetDump {
    fn from(m: &Mlp) -> Self {
        NetDump {
            sizes: m.sizes().to_vec(),
            params: m.params().to_vec(),
        }
    }
}

impl NetDump {
    fn into_mlp(self, which: &str) -> Result<Mlp> {
        let (sizes, n) = (self.sizes.clone(), self.params.len());
        Mlp::from_parts(self.sizes, self.params)
            .ok_or_else(|| Error::Checkpoint(format!("{which}: {n} parameters do not fit shape {sizes:?}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Dump {
    format_version: u32,
    num_agents: usize,
    actor: NetDump,
    critic: NetDump,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hyperparams: Option<Hyperparams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    iteration: Option<usize>,
}

/// Parameters plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub hyperparams: Option<Hyperparams>,
    pub iteration: Option<usize>,
}

impl Checkpoint {
    pub fn new(params: PolicyParams) -> Self {
        Checkpoint {
            params,
            hyperparams: None,
            iteration: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let dump = Dump {
            format_version: CHECKPOINT_FORMAT_VERSION,
            num_agents: self.params.num_agents,
            actor: (&self.params.actor).into(),
            critic: (&self.params.critic).into(),
            hyperparams: self.hyperparams.clone(),
            iteration: self.iteration,
        };
        Ok(serde_json::to_string_pretty(&dump)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let dump: Dump = serde_json::from_str(text)?;
        if dump.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                dump.format_version
            )));
        }
        let params = PolicyParams {
            actor: dump.actor.into_mlp("actor")?,
            critic: dump.critic.into_mlp("critic")?,
            num_agents: dump.num_agents,
        };
        params.validate()?;
        Ok(Checkpoint {
            params,
            hyperparams: dump.hyperparams,
            iteration: dump.iteration,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, checkpoint.to_json()?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Checkpoint::from_json(&text)
}
