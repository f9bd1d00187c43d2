//! Checkpoints: one JSON snapshot per network plus a manifest holding the
//! resolved configuration and training counters. Reloading reproduces the
//! agent bit for bit, including optimizer moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentDims, AgentState};
use crate::config::RunConfig;
use crate::error::{Result, SmacError};
use crate::nn::{MlpParams, NetSnapshot};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const NET_NAMES: [&str; 7] = [
    "policy",
    "q1",
    "q2",
    "q1_target",
    "q2_target",
    "encoder",
    "decoder",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub tag: String,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub d_z: usize,
    pub env_steps: u64,
    pub grad_steps: u64,
    pub config: RunConfig,
}

fn net_path(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join(format!("net_{name}.json"))
}

pub fn save_checkpoint(dir: &Path, agent: &AgentState, config: &RunConfig, tag: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        tag: tag.to_string(),
        obs_dim: agent.dims.obs_dim,
        action_dim: agent.dims.action_dim,
        d_z: agent.dims.d_z,
        env_steps: agent.env_steps,
        grad_steps: agent.grad_steps,
        config: config.clone(),
    };
    fs::write(
        dir.join("checkpoint.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    let nets: [&MlpParams; 7] = [
        &agent.policy,
        &agent.q1,
        &agent.q2,
        &agent.q1_target,
        &agent.q2_target,
        &agent.encoder,
        &agent.decoder,
    ];
    for (name, net) in NET_NAMES.iter().zip(nets) {
        let snapshot = net.to_snapshot();
        fs::write(net_path(dir, name), serde_json::to_string(&snapshot)?)?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(AgentState, CheckpointMeta)> {
    let meta_path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| SmacError::Data(format!("cannot read {}: {e}", meta_path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| SmacError::Data(format!("checkpoint manifest does not parse: {e}")))?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(SmacError::Data(format!(
            "unsupported checkpoint format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let mut nets = Vec::with_capacity(7);
    for name in NET_NAMES {
        let path = net_path(dir, name);
        let text = fs::read_to_string(&path)
            .map_err(|e| SmacError::Data(format!("cannot read {}: {e}", path.display())))?;
        let snapshot: NetSnapshot = serde_json::from_str(&text)
            .map_err(|e| SmacError::Data(format!("{}: bad network snapshot: {e}", path.display())))?;
        nets.push(MlpParams::from_snapshot(&snapshot)?);
    }
    let mut it = nets.into_iter();
    let agent = AgentState {
        dims: AgentDims {
            obs_dim: meta.obs_dim,
            action_dim: meta.action_dim,
            d_z: meta.d_z,
        },
        policy: it.next().unwrap(),
        q1: it.next().unwrap(),
        q2: it.next().unwrap(),
        q1_target: it.next().unwrap(),
        q2_target: it.next().unwrap(),
        encoder: it.next().unwrap(),
        decoder: it.next().unwrap(),
        grad_steps: meta.grad_steps,
        env_steps: meta.env_steps,
    };
    validate_agent_dims(&agent)?;
    Ok((agent, meta))
}

fn validate_agent_dims(agent: &AgentState) -> Result<()> {
    let d = &agent.dims;
    let checks = [
        ("policy", &agent.policy, d.obs_dim + d.d_z, 2 * d.action_dim),
        ("q1", &agent.q1, d.obs_dim + d.action_dim + d.d_z, 1),
        ("q2", &agent.q2, d.obs_dim + d.action_dim + d.d_z, 1),
        ("q1_target", &agent.q1_target, d.obs_dim + d.action_dim + d.d_z, 1),
        ("q2_target", &agent.q2_target, d.obs_dim + d.action_dim + d.d_z, 1),
        ("encoder", &agent.encoder, d.obs_dim + d.action_dim + 1, 2 * d.d_z),
        ("decoder", &agent.decoder, d.obs_dim + d.action_dim + d.d_z, 1),
    ];
    for (name, net, in_dim, out_dim) in checks {
        if net.in_dim() != in_dim || net.out_dim() != out_dim {
            return Err(SmacError::Data(format!(
                "checkpoint network {name} has shape {}→{}, expected {in_dim}→{out_dim}",
                net.in_dim(),
                net.out_dim()
            )));
        }
    }
    Ok(())
}
