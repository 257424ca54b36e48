//! Environment files.
//!
//! An environment is a JSON object
//!
//! ```text
//! {"n_states", "n_actions", "n_agents", "gamma", "rho": [s],
//!  "transition": [s][a][s'], "agent_rewards": [i][s][a]}
//! ```
//!
//! An extended form replaces `"transition"` with `"agent_transitions":
//! [i][s][a][s']`, one kernel per agent. Such files describe agents without a
//! common average MDP and load as [`LoadedEnv::PerAgent`].
//!
//! Reals are written in shortest round-trip decimal form and parsed exactly,
//! so `load(save(env))` reproduces every bit.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::mdp::{apply_regret_transform, Dynamics, FederatedEnv, TabularMdp, Violation};
use crate::runtime::FederatedProblem;

/// Contents of an environment file.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedEnv {
    /// One kernel shared by every agent.
    Shared(FederatedEnv),
    /// One kernel per agent.
    PerAgent(Vec<TabularMdp>),
}

impl LoadedEnv {
    pub fn n_agents(&self) -> usize {
        match self {
            LoadedEnv::Shared(env) => env.n_agents(),
            LoadedEnv::PerAgent(mdps) => mdps.len(),
        }
    }

    /// Keeps only the first `n` agents.
    pub fn truncate_agents(&self, n: usize) -> Result<Self> {
        match self {
            LoadedEnv::Shared(env) => Ok(LoadedEnv::Shared(env.truncate_agents(n)?)),
            LoadedEnv::PerAgent(mdps) => {
                if n == 0 || n > mdps.len() {
                    return Err(Error::Config(format!(
                        "cannot select {n} agents from an environment with {}",
                        mdps.len()
                    )));
                }
                Ok(LoadedEnv::PerAgent(mdps[..n].to_vec()))
            }
        }
    }

    /// The optimization problem, in regret orientation when `regret` is set.
    pub fn to_problem(&self, regret: bool) -> Result<FederatedProblem> {
        match self {
            LoadedEnv::Shared(env) => {
                if regret {
                    FederatedProblem::from_env(&apply_regret_transform(env))
                } else {
                    FederatedProblem::from_env(env)
                }
            }
            LoadedEnv::PerAgent(mdps) => {
                let agents = mdps
                    .iter()
                    .map(|m| {
                        if regret {
                            m.with_rewards(m.rewards().iter().map(|r| 1.0 - r).collect())
                        } else {
                            Ok(m.clone())
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                FederatedProblem::from_agents(agents)
            }
        }
    }
}

fn nested(flat: &[f64], dims: &[usize]) -> Value {
    match dims {
        [] | [_] => Value::from(flat.to_vec()),
        [_, rest @ ..] => {
            let stride: usize = rest.iter().product();
            Value::Array(flat.chunks(stride).map(|c| nested(c, rest)).collect())
        }
    }
}

fn header(dynamics: &Dynamics, n_agents: usize) -> Map<String, Value> {
    let mut obj = Map::new();
    obj.insert("n_states".into(), dynamics.n_states().into());
    obj.insert("n_actions".into(), dynamics.n_actions().into());
    obj.insert("n_agents".into(), n_agents.into());
    obj.insert("gamma".into(), dynamics.discount().into());
    obj.insert("rho".into(), Value::from(dynamics.initial_dist().to_vec()));
    obj
}

fn rewards_value(tables: impl Iterator<Item = Vec<f64>>, na: usize) -> Value {
    Value::Array(tables.map(|r| nested(&r, &[r.len() / na, na])).collect())
}

/// JSON text of a shared-kernel environment, with rewards as currently
/// oriented.
pub fn env_to_json(env: &FederatedEnv) -> String {
    let d = env.shared();
    let (ns, na) = (d.n_states(), d.n_actions());
    let mut obj = header(d, env.n_agents());
    obj.insert("transition".into(), nested(d.transition(), &[ns, na, ns]));
    obj.insert(
        "agent_rewards".into(),
        rewards_value(env.agent_rewards().into_iter(), na),
    );
    let mut text =
        serde_json::to_string_pretty(&Value::Object(obj)).expect("finite reals serialize");
    text.push('\n');
    text
}

/// JSON text of agents with individual kernels. Every agent must agree on
/// dimensions, discount and initial distribution.
pub fn agents_to_json(agents: &[TabularMdp]) -> Result<String> {
    let first = agents
        .first()
        .ok_or_else(|| Error::Config("need at least one agent".into()))?;
    let d = first.dynamics();
    let (ns, na) = (d.n_states(), d.n_actions());
    for (i, m) in agents.iter().enumerate() {
        let other = m.dynamics();
        if other.n_states() != ns
            || other.n_actions() != na
            || other.discount() != d.discount()
            || other.initial_dist() != d.initial_dist()
        {
            return Err(Error::InvalidEnv(format!(
                "agent {i} disagrees on dimensions, discount or initial distribution"
            )));
        }
    }
    let mut obj = header(d, agents.len());
    obj.insert(
        "agent_transitions".into(),
        Value::Array(
            agents
                .iter()
                .map(|m| nested(m.dynamics().transition(), &[ns, na, ns]))
                .collect(),
        ),
    );
    obj.insert(
        "agent_rewards".into(),
        rewards_value(agents.iter().map(|m| m.rewards().to_vec()), na),
    );
    let mut text =
        serde_json::to_string_pretty(&Value::Object(obj)).expect("finite reals serialize");
    text.push('\n');
    Ok(text)
}

pub fn save_env(env: &FederatedEnv, path: &Path) -> Result<()> {
    let report = env.validate();
    if !report.is_valid() {
        return Err(Error::InvalidEnv(report.to_string()));
    }
    fs::write(path, env_to_json(env)).map_err(|e| Error::io(path, e))
}

pub fn save_agents(agents: &[TabularMdp], path: &Path) -> Result<()> {
    fs::write(path, agents_to_json(agents)?).map_err(|e| Error::io(path, e))
}

/// Loads a shared-kernel environment. Files with per-agent kernels are
/// rejected; use [`load_env_file`] for those.
pub fn load_env(path: &Path) -> Result<FederatedEnv> {
    match load_env_file(path)? {
        LoadedEnv::Shared(env) => Ok(env),
        LoadedEnv::PerAgent(_) => Err(Error::schema(
            "agent_transitions",
            "per-agent kernels have no shared average MDP",
        )),
    }
}

pub fn load_env_file(path: &Path) -> Result<LoadedEnv> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_env(&text)
}

/// Parses and validates environment JSON. Errors name the offending field
/// path, e.g. `transition[0][1][2]`.
pub fn parse_env(text: &str) -> Result<LoadedEnv> {
    let root: Value = serde_json::from_str(text)?;
    let obj = root
        .as_object()
        .ok_or_else(|| Error::schema("$", "expected a JSON object"))?;
    let ns = positive(field(obj, "n_states")?, "n_states")?;
    let na = positive(field(obj, "n_actions")?, "n_actions")?;
    let n_agents = positive(field(obj, "n_agents")?, "n_agents")?;
    let gamma = real(field(obj, "gamma")?, "gamma")?;
    let mut rho = Vec::with_capacity(ns);
    flatten(field(obj, "rho")?, "rho", &[ns], &mut rho)?;
    let mut rewards = Vec::with_capacity(n_agents);
    let reward_value = field(obj, "agent_rewards")?;
    let tables = array(reward_value, "agent_rewards", n_agents)?;
    for (i, t) in tables.iter().enumerate() {
        let mut r = Vec::with_capacity(ns * na);
        flatten(t, &format!("agent_rewards[{i}]"), &[ns, na], &mut r)?;
        rewards.push(r);
    }

    let kernel = |v: &Value, path: &str| -> Result<Arc<Dynamics>> {
        let mut p = Vec::with_capacity(ns * na * ns);
        flatten(v, path, &[ns, na, ns], &mut p)?;
        Ok(Arc::new(Dynamics::new(ns, na, p, gamma, rho.clone())?))
    };

    match (obj.get("transition"), obj.get("agent_transitions")) {
        (Some(_), Some(_)) => Err(Error::schema(
            "agent_transitions",
            "give either `transition` or `agent_transitions`, not both",
        )),
        (None, None) => Err(Error::schema("transition", "missing field")),
        (Some(t), None) => {
            let env = FederatedEnv::new_unchecked(kernel(t, "transition")?, rewards)?;
            reject(env.validate().violations, |v| v.path())?;
            Ok(LoadedEnv::Shared(env))
        }
        (None, Some(ts)) => {
            let kernels = array(ts, "agent_transitions", n_agents)?;
            let mut agents = Vec::with_capacity(n_agents);
            for (i, (t, r)) in kernels.iter().zip(rewards).enumerate() {
                let mdp =
                    TabularMdp::new_unchecked(kernel(t, &format!("agent_transitions[{i}]"))?, r)?;
                reject(mdp.validate().violations, |v| per_agent_path(v, i))?;
                agents.push(mdp);
            }
            Ok(LoadedEnv::PerAgent(agents))
        }
    }
}

fn per_agent_path(v: &Violation, agent: usize) -> String {
    let prefix = match v.field {
        "transition" => "agent_transitions",
        "reward" => "agent_rewards",
        _ => return v.path(),
    };
    let mut path = format!("{prefix}[{agent}]");
    for i in &v.indices {
        path.push_str(&format!("[{i}]"));
    }
    path
}

fn reject(violations: Vec<Violation>, path: impl Fn(&Violation) -> String) -> Result<()> {
    match violations.first() {
        None => Ok(()),
        Some(first) => {
            let message = violations
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("; ");
            Err(Error::schema(path(first), message))
        }
    }
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| Error::schema(name, "missing field"))
}

fn positive(v: &Value, path: &str) -> Result<usize> {
    match v.as_u64() {
        Some(n) if n > 0 => Ok(n as usize),
        _ => Err(Error::schema(
            path,
            format!("expected a positive integer, got {v}"),
        )),
    }
}

fn real(v: &Value, path: &str) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::schema(path, format!("expected a number, got {v}")))
}

fn array<'a>(v: &'a Value, path: &str, len: usize) -> Result<&'a Vec<Value>> {
    let items = v
        .as_array()
        .ok_or_else(|| Error::schema(path, "expected an array"))?;
    if items.len() != len {
        return Err(Error::schema(
            path,
            format!("expected {len} entries, found {}", items.len()),
        ));
    }
    Ok(items)
}

/// Appends the reals of a nested array with exact shape `dims`.
fn flatten(v: &Value, path: &str, dims: &[usize], out: &mut Vec<f64>) -> Result<()> {
    match dims {
        [] => {
            out.push(real(v, path)?);
            Ok(())
        }
        [len, rest @ ..] => {
            for (i, item) in array(v, path, *len)?.iter().enumerate() {
                flatten(item, &format!("{path}[{i}]"), rest, out)?;
            }
            Ok(())
        }
    }
}
