use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::TeleopError;
use crate::dcmdp::{build_constant_delay_with, build_random_delay_with, BuildOptions, DcMdp, Link, Seeds};
use crate::delay::DelayModel;
use crate::envs::{Env, EnvKind};
use crate::mdp::{compute_q, compute_safety_values, QTable, SolveOptions, ValueMode};
use crate::shield::{Shield, SynthesisMode};

/// A link description independent of any environment; constant links idle
/// with the safe action of whichever environment they are paired with.
#[derive(Debug, Clone, PartialEq)]
pub enum Channel {
    Random(DelayModel),
    Constant { tau: usize },
}

impl Channel {
    pub fn link_for(&self, env: &Env) -> Link {
        match self {
            Channel::Random(m) => Link::Random(m.clone()),
            Channel::Constant { tau } => Link::Constant { tau: *tau, safe_action: env.meta.safe_action },
        }
    }
}

/// The product of an environment and a channel with its maximal safety
/// Q-table, shared by every session on that pair.
#[derive(Debug)]
pub struct ProductEntry {
    pub dc: Arc<DcMdp>,
    pub qmax: Arc<QTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvInfo {
    pub id: String,
    pub kind: EnvKind,
    pub mdp_digest: String,
    pub states: usize,
    pub action_names: Vec<String>,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelInfo {
    pub id: String,
    pub tau_max: usize,
    /// Delay transition matrix; absent for constant links.
    pub matrix: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShieldInfo {
    pub id: String,
    pub model_digest: Option<String>,
    pub states: usize,
    pub epsilon: f64,
    pub delta: Option<f64>,
    pub mode: Option<SynthesisMode>,
    pub achieved: Option<f64>,
}

/// Named environments, channels and shields a server can pair into
/// sessions. Products are built on first use and cached.
#[derive(Debug, Default)]
pub struct Catalog {
    envs: BTreeMap<String, Arc<Env>>,
    channels: BTreeMap<String, Channel>,
    shields: BTreeMap<String, Arc<Shield>>,
    products: Mutex<HashMap<(String, String), Arc<ProductEntry>>>,
    solve: SolveOptions,
    seeds: Seeds,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// How products are enumerated; shields only pair with products built
    /// the same way. Defaults to the initial-distribution support.
    pub fn set_seeds(&mut self, seeds: Seeds) -> &mut Self {
        self.seeds = seeds;
        self
    }

    pub fn add_env(&mut self, id: impl Into<String>, env: Env) -> &mut Self {
        self.envs.insert(id.into(), Arc::new(env));
        self
    }

    pub fn add_channel(&mut self, id: impl Into<String>, channel: Channel) -> &mut Self {
        self.channels.insert(id.into(), channel);
        self
    }

    pub fn add_shield(&mut self, id: impl Into<String>, shield: Shield) -> &mut Self {
        self.shields.insert(id.into(), Arc::new(shield));
        self
    }

    pub fn env(&self, id: &str) -> Result<&Arc<Env>, TeleopError> {
        self.envs.get(id).ok_or_else(|| TeleopError::Unknown { what: "env", id: id.into() })
    }

    pub fn channel(&self, id: &str) -> Result<&Channel, TeleopError> {
        self.channels.get(id).ok_or_else(|| TeleopError::Unknown { what: "channel", id: id.into() })
    }

    pub fn shield(&self, id: &str) -> Result<&Arc<Shield>, TeleopError> {
        self.shields.get(id).ok_or_else(|| TeleopError::Unknown { what: "shield", id: id.into() })
    }

    /// The product of an environment and channel, built on first request.
    pub fn product(&self, env_id: &str, channel_id: &str) -> Result<Arc<ProductEntry>, TeleopError> {
        let env = self.env(env_id)?;
        let channel = self.channel(channel_id)?;
        let key = (env_id.to_string(), channel_id.to_string());
        let mut cache = self.products.lock().expect("product cache poisoned");
        if let Some(entry) = cache.get(&key) {
            return Ok(entry.clone());
        }
        let opts = BuildOptions { seeds: self.seeds };
        let built = match channel.link_for(env) {
            Link::Random(m) => build_random_delay_with(&env.mdp, &m, &opts),
            Link::Constant { tau, safe_action } => build_constant_delay_with(&env.mdp, tau, safe_action, &opts),
        };
        let dc = built.map_err(|e| TeleopError::Catalog(e.to_string()))?;
        let vmax = compute_safety_values(&dc, ValueMode::Max, None, &self.solve)
            .map_err(|e| TeleopError::Catalog(e.to_string()))?;
        let qmax = compute_q(&dc, &vmax);
        let entry = Arc::new(ProductEntry { dc: Arc::new(dc), qmax: Arc::new(qmax) });
        cache.insert(key, entry.clone());
        Ok(entry)
    }

    pub fn env_infos(&self) -> Vec<EnvInfo> {
        self.envs
            .iter()
            .map(|(id, env)| EnvInfo {
                id: id.clone(),
                kind: env.kind(),
                mdp_digest: env.meta.mdp_digest.clone(),
                states: env.mdp.state_count(),
                action_names: env.meta.action_names.clone(),
                horizon: env.meta.horizon,
            })
            .collect()
    }

    pub fn channel_infos(&self) -> Vec<ChannelInfo> {
        self.channels
            .iter()
            .map(|(id, c)| match c {
                Channel::Random(m) => {
                    ChannelInfo { id: id.clone(), tau_max: m.tau_max(), matrix: Some(m.matrix().to_vec()) }
                }
                Channel::Constant { tau } => ChannelInfo { id: id.clone(), tau_max: *tau, matrix: None },
            })
            .collect()
    }

    pub fn shield_infos(&self) -> Vec<ShieldInfo> {
        self.shields
            .iter()
            .map(|(id, s)| ShieldInfo {
                id: id.clone(),
                model_digest: s.model_digest.clone(),
                states: s.state_count(),
                epsilon: s.epsilon,
                delta: s.delta,
                mode: s.mode,
                achieved: s.achieved,
            })
            .collect()
    }
}
