//! Cooperative navigation in the plane and a step adapter for finite MDPs.
//!
//! In the navigation task agent `k` must reach target `k` without bumping into
//! the others. Each agent emits a 5-vector in `(-1, 1)`; component 0 is
//! ignored and the force is `(a1 - a2, a3 - a4)`. Every agent observes the
//! full state `[positions, velocities, targets]`.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{Mdp, MdpError};
use crate::SimRng;

pub const SPREAD_ACTION_DIM: usize = 5;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error("trajectory output: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EnvError>;

/// Physics constants of the navigation task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpreadConfig {
    pub num_agents: usize,
    pub damping: f64,
    pub force_gain: f64,
    pub dt: f64,
    pub speed_cap: f64,
    pub collision_radius: f64,
    pub episode_length: usize,
    /// Positions are clamped to `[-arena, arena]^2`.
    pub arena: f64,
}

impl Default for SpreadConfig {
    fn default() -> Self {
        Self {
            num_agents: 3,
            damping: 0.75,
            force_gain: 1.0,
            dt: 0.1,
            speed_cap: 1.0,
            collision_radius: 0.15,
            episode_length: 25,
            arena: 1.5,
        }
    }
}

impl SpreadConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.force_gain, self.dt, self.speed_cap, self.arena];
        if self.num_agents == 0
            || self.episode_length == 0
            || !(0.0..=1.0).contains(&self.damping)
            || self.collision_radius < 0.0
            || positive.iter().any(|v| !(v.is_finite() && *v > 0.0))
        {
            return Err(EnvError::InvalidArgument(format!("invalid spread configuration {self:?}")));
        }
        Ok(())
    }

    /// Length of the shared observation vector.
    pub fn observation_dim(&self) -> usize {
        6 * self.num_agents
    }
}

/// Full state of the navigation task.
#[derive(Debug, Clone, PartialEq)]
pub struct SpreadState {
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
    pub targets: Vec<[f64; 2]>,
    pub step: usize,
}

impl SpreadState {
    pub fn num_agents(&self) -> usize {
        self.positions.len()
    }

    /// `[positions, velocities, targets]`, each agent-major with `(x, y)` pairs.
    pub fn observation(&self) -> Vec<f64> {
        self.positions
            .iter()
            .chain(&self.velocities)
            .chain(&self.targets)
            .flat_map(|p| p.iter().copied())
            .collect()
    }

    pub fn distances(&self) -> Vec<f64> {
        self.positions.iter().zip(&self.targets).map(|(p, t)| dist(p, t)).collect()
    }

    pub fn mean_distance(&self) -> f64 {
        let d = self.distances();
        d.iter().sum::<f64>() / d.len() as f64
    }

    /// Per agent, whether some other agent is closer than `radius`.
    pub fn collisions(&self, radius: f64) -> Vec<bool> {
        let n = self.num_agents();
        (0..n)
            .map(|k| (0..n).any(|j| j != k && dist(&self.positions[k], &self.positions[j]) < radius))
            .collect()
    }

    /// `-dist(agent_k, target_k) - 1[collision_k]`.
    pub fn agent_rewards(&self, radius: f64) -> Vec<f64> {
        self.distances()
            .into_iter()
            .zip(self.collisions(radius))
            .map(|(d, c)| -d - if c { 1.0 } else { 0.0 })
            .collect()
    }
}

fn dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct SpreadStep {
    pub state: SpreadState,
    pub agent_rewards: Vec<f64>,
    pub reward: f64,
}

/// Agents and targets uniform in `[-1, 1]^2`, zero velocities.
pub fn spread_reset(num_agents: usize, rng: &mut SimRng) -> Result<SpreadState> {
    if num_agents == 0 {
        return Err(EnvError::InvalidArgument("need at least one agent".into()));
    }
    let mut point = || [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
    let positions = (0..num_agents).map(|_| point()).collect();
    let targets = (0..num_agents).map(|_| point()).collect();
    Ok(SpreadState {
        positions,
        velocities: vec![[0.0; 2]; num_agents],
        targets,
        step: 0,
    })
}

/// Damped double integrator: `v <- damping v + gain F dt` (speed capped),
/// `p <- clamp(p + v dt)`. Rewards are evaluated at the new positions and the
/// global reward is their mean.
pub fn spread_step(config: &SpreadConfig, state: &SpreadState, actions: &[Vec<f64>]) -> Result<SpreadStep> {
    let n = state.num_agents();
    if actions.len() != n {
        return Err(EnvError::InvalidArgument(format!("{} actions for {n} agents", actions.len())));
    }
    let mut next = state.clone();
    for (k, a) in actions.iter().enumerate() {
        if a.len() != SPREAD_ACTION_DIM || a.iter().any(|v| !v.is_finite()) {
            return Err(EnvError::InvalidArgument(format!(
                "agent {k} action must be {SPREAD_ACTION_DIM} finite values, got {a:?}"
            )));
        }
        let force = [a[1] - a[2], a[3] - a[4]];
        let v = &mut next.velocities[k];
        for c in 0..2 {
            v[c] = config.damping * v[c] + config.force_gain * force[c] * config.dt;
        }
        let speed = v[0].hypot(v[1]);
        if speed > config.speed_cap {
            let s = config.speed_cap / speed;
            v[0] *= s;
            v[1] *= s;
        }
        let v = *v;
        let p = &mut next.positions[k];
        for c in 0..2 {
            p[c] = (p[c] + v[c] * config.dt).clamp(-config.arena, config.arena);
        }
    }
    next.step += 1;
    let agent_rewards = next.agent_rewards(config.collision_radius);
    let reward = agent_rewards.iter().sum::<f64>() / n as f64;
    Ok(SpreadStep {
        state: next,
        agent_rewards,
        reward,
    })
}

/// Episodic wrapper around [`spread_step`].
#[derive(Debug, Clone)]
pub struct SpreadEnv {
    config: SpreadConfig,
    state: SpreadState,
}

impl SpreadEnv {
    pub fn new(config: SpreadConfig, rng: &mut SimRng) -> Result<Self> {
        config.validate()?;
        let state = spread_reset(config.num_agents, rng)?;
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &SpreadConfig {
        &self.config
    }

    pub fn state(&self) -> &SpreadState {
        &self.state
    }

    pub fn observation(&self) -> Vec<f64> {
        self.state.observation()
    }

    pub fn reset(&mut self, rng: &mut SimRng) -> Result<Vec<f64>> {
        self.state = spread_reset(self.config.num_agents, rng)?;
        Ok(self.state.observation())
    }

    /// Advances one step; `done` is set when the episode length is reached.
    pub fn step(&mut self, actions: &[Vec<f64>]) -> Result<(SpreadStep, bool)> {
        let out = spread_step(&self.config, &self.state, actions)?;
        self.state = out.state.clone();
        let done = self.state.step >= self.config.episode_length;
        Ok((out, done))
    }
}

/// Writes `(episode, step, agent, x, y, reward)` rows for offline plotting.
pub struct TrajectoryWriter<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> TrajectoryWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut out = csv::Writer::from_writer(out);
        out.write_record(["episode", "step", "agent", "x", "y", "reward"])?;
        Ok(Self { out })
    }

    pub fn record(&mut self, episode: usize, state: &SpreadState, agent_rewards: &[f64]) -> Result<()> {
        for (k, (p, r)) in state.positions.iter().zip(agent_rewards).enumerate() {
            self.out.serialize((episode, state.step, k, p[0], p[1], r))?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush().map_err(csv::Error::from)?;
        self.out
            .into_inner()
            .map_err(|e| EnvError::InvalidArgument(format!("flushing trajectory: {e}")))
    }
}

/// Stateful stepping of a finite MDP by local actions.
#[derive(Debug, Clone)]
pub struct MdpEnv<'a> {
    mdp: &'a Mdp,
    state: usize,
}

impl<'a> MdpEnv<'a> {
    pub fn new(mdp: &'a Mdp, start: usize) -> Result<Self> {
        if start >= mdp.num_states() {
            return Err(EnvError::InvalidArgument(format!("start state {start} out of range")));
        }
        Ok(Self { mdp, state: start })
    }

    pub fn state(&self) -> usize {
        self.state
    }

    /// Moves to a uniformly drawn state.
    pub fn reset(&mut self, rng: &mut SimRng) -> usize {
        self.state = rng.random_range(0..self.mdp.num_states());
        self.state
    }

    /// Applies the joint action built from `local` and returns `(s', r)`.
    pub fn step(&mut self, local: &[usize], rng: &mut SimRng) -> Result<(usize, f64)> {
        let joint = self.mdp.encode_joint(local)?;
        let (next, r) = self.mdp.step(self.state, joint, rng)?;
        self.state = next;
        Ok((next, r))
    }

    /// One-hot encoding of the current state.
    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.mdp.num_states()];
        v[self.state] = 1.0;
        v
    }
}
