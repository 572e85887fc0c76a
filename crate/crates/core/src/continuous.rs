//! Off-policy decentralized actor-critic for continuous states and actions.
//!
//! Each agent owns a squashed-Gaussian actor, a critic `Q(s, a_i)` over the
//! shared state and its own action, a Polyak-averaged target critic and a
//! replay buffer. One training tick runs
//! act → env step → store → sample → evaluate → improve → consensus → target.
//! Batches are reweighted by the consensus-maintained importance weights of
//! [`crate::replay`].

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approx::{ApproxError, Mlp, Sgd, SquashedGaussianHead};
use crate::audit::{record_read, AccessAudit, ParamBlock, Phase};
use crate::consensus::{CommGraph, ConsensusError, ConsensusKernel};
use crate::envs::{EnvError, SpreadConfig, SpreadEnv, SPREAD_ACTION_DIM};
use crate::replay::{self, ReplayBuffer, ReplayEntry, ReplayError, Transition};
use crate::{seeded_rng, SimRng};

#[derive(Debug, Error)]
pub enum ContinuousError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
}

pub type Result<T> = std::result::Result<T, ContinuousError>;

/// Environment interface used by [`train_continuous`].
pub trait ContinuousEnv {
    fn num_agents(&self) -> usize;
    fn observation_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&mut self, rng: &mut SimRng) -> Result<Vec<f64>>;
    /// Returns `(next observation, global reward, episode over)`.
    fn step(&mut self, actions: &[Vec<f64>]) -> Result<(Vec<f64>, f64, bool)>;
    /// Task-specific score of the current state, logged at episode end.
    fn episode_metric(&self) -> f64;
}

impl ContinuousEnv for SpreadEnv {
    fn num_agents(&self) -> usize {
        self.config().num_agents
    }

    fn observation_dim(&self) -> usize {
        self.config().observation_dim()
    }

    fn action_dim(&self) -> usize {
        SPREAD_ACTION_DIM
    }

    fn reset(&mut self, rng: &mut SimRng) -> Result<Vec<f64>> {
        Ok(SpreadEnv::reset(self, rng)?)
    }

    fn step(&mut self, actions: &[Vec<f64>]) -> Result<(Vec<f64>, f64, bool)> {
        let (out, done) = SpreadEnv::step(self, actions)?;
        Ok((out.state.observation(), out.reward, done))
    }

    /// Mean agent-to-target distance.
    fn episode_metric(&self) -> f64 {
        self.state().mean_distance()
    }
}

/// Per-agent learning hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    /// Critic step size α.
    pub critic_step: f64,
    /// Actor step size β.
    pub actor_step: f64,
    pub momentum: f64,
    /// Target-network step size ε.
    pub target_step: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            gamma: 0.95,
            critic_step: 1e-3,
            actor_step: 1e-4,
            momentum: 0.0,
            target_step: 0.005,
            batch_size: 64,
            replay_capacity: 10_000,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ContinuousError::Config(m.to_string()));
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.critic_step >= 0.0 && self.actor_step >= 0.0) {
            return bad("step sizes must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.target_step > 0.0 && self.target_step <= 1.0) {
            return bad("target step must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.replay_capacity == 0 {
            return bad("batch size and replay capacity must be positive");
        }
        Ok(())
    }
}

/// Critic update statistics for one batch.
#[derive(Debug, Clone)]
pub struct CriticStep {
    pub grad: Vec<f64>,
    pub loss: f64,
    pub mean_abs_c: f64,
}

/// One learner with privately held parameters.
#[derive(Debug, Clone)]
pub struct ContinuousAgent {
    id: usize,
    actor: SquashedGaussianHead,
    critic: Mlp,
    target_critic: Mlp,
    buffer: ReplayBuffer,
    critic_opt: Sgd,
    actor_opt: Sgd,
    config: AgentConfig,
    rng: SimRng,
    audit: Option<AccessAudit>,
}

impl ContinuousAgent {
    pub fn new(id: usize, observation_dim: usize, action_dim: usize, config: &AgentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let actor = SquashedGaussianHead::init(observation_dim, &config.hidden, action_dim, &mut rng)?;
        let mut sizes = vec![observation_dim + action_dim];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(1);
        let critic = Mlp::init(&sizes, &mut rng)?;
        Ok(Self {
            id,
            actor,
            target_critic: critic.clone(),
            critic,
            buffer: ReplayBuffer::new(config.replay_capacity)?,
            critic_opt: Sgd::new(config.critic_step, config.momentum),
            actor_opt: Sgd::new(config.actor_step, config.momentum),
            config: config.clone(),
            rng,
            audit: None,
        })
    }

    pub fn with_audit(mut self, audit: AccessAudit) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn actor(&self) -> &SquashedGaussianHead {
        record_read(&self.audit, self.id, ParamBlock::Actor);
        &self.actor
    }

    pub fn critic(&self) -> &Mlp {
        record_read(&self.audit, self.id, ParamBlock::Critic);
        &self.critic
    }

    pub fn target_critic(&self) -> &Mlp {
        record_read(&self.audit, self.id, ParamBlock::TargetCritic);
        &self.target_critic
    }

    pub fn actor_mut(&mut self) -> &mut SquashedGaussianHead {
        &mut self.actor
    }

    pub fn critic_mut(&mut self) -> &mut Mlp {
        &mut self.critic
    }

    pub fn target_critic_mut(&mut self) -> &mut Mlp {
        &mut self.target_critic
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn buffer_mut(&mut self) -> &mut ReplayBuffer {
        &mut self.buffer
    }

    /// Samples an action and its log-density at `state`.
    pub fn act(&mut self, state: &[f64]) -> Result<(Vec<f64>, f64)> {
        record_read(&self.audit, self.id, ParamBlock::Actor);
        let (a, _, lp) = self.actor.sample_with_log_prob(state, &mut self.rng)?;
        Ok((a, lp))
    }

    pub fn store(&mut self, transition: Transition, behavior_logprob: f64) -> Result<()> {
        Ok(self.buffer.insert(transition, behavior_logprob)?)
    }

    pub fn sample_indices(&mut self) -> Result<Vec<usize>> {
        Ok(self.buffer.sample_indices(self.config.batch_size, &mut self.rng)?)
    }

    pub fn apply_critic_gradient(&mut self, grad: &[f64]) {
        self.critic_opt.descend(self.critic.params_mut(), grad);
    }

    /// Importance-weighted critic gradient on the given buffer positions,
    /// with fresh next actions `ã ~ π(s')` drawn from the current actor.
    pub fn critic_gradient(&mut self, indices: &[usize], num_agents: usize) -> Result<CriticStep> {
        record_read(&self.audit, self.id, ParamBlock::Actor);
        record_read(&self.audit, self.id, ParamBlock::Critic);
        record_read(&self.audit, self.id, ParamBlock::TargetCritic);
        let batch = batch(&self.buffer, indices)?;
        let mut next_actions = Vec::with_capacity(batch.len());
        for e in &batch {
            next_actions.push(self.actor.sample_squashed(&e.next_state, &mut self.rng)?.0);
        }
        let logc: Vec<f64> = batch.iter().map(|e| replay::log_weight(e, num_agents)).collect();
        let weights: Vec<f64> = logc.iter().map(|c| c.exp()).collect();
        let (grad, loss) = critic_gradient_frozen(&self.critic, &self.target_critic, &batch, &next_actions, &weights, self.config.gamma)?;
        let mean_abs_c = logc.iter().map(|c| c.abs()).sum::<f64>() / logc.len() as f64;
        Ok(CriticStep { grad, loss, mean_abs_c })
    }

    /// Reparameterized actor gradient with fresh noise for every entry.
    pub fn actor_gradient(&mut self, indices: &[usize]) -> Result<Vec<f64>> {
        record_read(&self.audit, self.id, ParamBlock::Actor);
        record_read(&self.audit, self.id, ParamBlock::Critic);
        let d = self.actor.action_dim();
        let batch = batch(&self.buffer, indices)?;
        let states: Vec<&[f64]> = batch.iter().map(|e| e.state.as_slice()).collect();
        let noise: Vec<Vec<f64>> = (0..states.len())
            .map(|_| (0..d).map(|_| self.rng.sample(StandardNormal)).collect())
            .collect();
        actor_gradient_frozen(&self.actor, &self.critic, &states, &noise)
    }

    pub fn apply_actor_gradient(&mut self, grad: &[f64]) {
        self.actor_opt.ascend(self.actor.trunk_mut().params_mut(), grad);
    }

    /// Recomputes `beta` from the current actor, for every entry or only for
    /// `only` when given.
    pub fn refresh_betas(&mut self, only: Option<&[usize]>) {
        record_read(&self.audit, self.id, ParamBlock::Actor);
        let actor = &self.actor;
        let lp = |e: &ReplayEntry| actor.log_prob(&e.state, &e.action).unwrap_or(f64::NAN);
        match only {
            Some(idx) => self.buffer.refresh_indices(idx, lp),
            None => self.buffer.local_beta_refresh(lp),
        }
    }

    /// `φ̂ <- (1 - ε) φ̂ + ε φ`.
    pub fn target_update(&mut self) -> Result<()> {
        record_read(&self.audit, self.id, ParamBlock::Critic);
        record_read(&self.audit, self.id, ParamBlock::TargetCritic);
        Ok(self.target_critic.polyak_towards(&self.critic, self.config.target_step)?)
    }
}

fn batch<'a>(buffer: &'a ReplayBuffer, indices: &[usize]) -> Result<Vec<&'a ReplayEntry>> {
    if indices.is_empty() {
        return Err(ContinuousError::EmptyBatch);
    }
    indices
        .iter()
        .map(|&i| {
            buffer
                .get(i)
                .ok_or_else(|| ContinuousError::Config(format!("batch index {i} out of range")))
        })
        .collect()
}

fn critic_input(state: &[f64], action: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(state.len() + action.len());
    v.extend_from_slice(state);
    v.extend_from_slice(action);
    v
}

/// Bootstrapped target `r + γ Q̂(s', ã)`.
pub fn td_target(target_critic: &Mlp, entry: &ReplayEntry, next_action: &[f64], gamma: f64) -> Result<f64> {
    let q_next = target_critic.forward(&critic_input(&entry.next_state, next_action))?[0];
    Ok(entry.reward + gamma * q_next)
}

/// Weighted loss `(1/B) Σ w_k (Q(s_k, a_k) - q̂_k)^2 / 2` with the targets
/// treated as constants.
pub fn critic_loss(critic: &Mlp, target_critic: &Mlp, batch: &[&ReplayEntry], next_actions: &[Vec<f64>], weights: &[f64], gamma: f64) -> Result<f64> {
    check_batch(batch.len(), next_actions.len(), weights.len())?;
    let mut total = 0.0;
    for ((e, na), w) in batch.iter().zip(next_actions).zip(weights) {
        let target = td_target(target_critic, e, na, gamma)?;
        let q = critic.forward(&critic_input(&e.state, &e.action))?[0];
        total += 0.5 * w * (q - target).powi(2);
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of [`critic_loss`] and the loss itself.
pub fn critic_gradient_frozen(critic: &Mlp, target_critic: &Mlp, batch: &[&ReplayEntry], next_actions: &[Vec<f64>], weights: &[f64], gamma: f64) -> Result<(Vec<f64>, f64)> {
    check_batch(batch.len(), next_actions.len(), weights.len())?;
    let mut grad = vec![0.0; critic.num_params()];
    let mut loss = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for ((e, na), w) in batch.iter().zip(next_actions).zip(weights) {
        let target = td_target(target_critic, e, na, gamma)?;
        let trace = critic.forward_trace(&critic_input(&e.state, &e.action))?;
        let residual = trace.output()[0] - target;
        loss += 0.5 * w * residual * residual;
        critic.accumulate_backward(&trace, &[w * residual * inv], &mut grad)?;
    }
    Ok((grad, loss * inv))
}

/// `(1/B) Σ Q(s_k, f_θ(ξ_k, s_k))`.
pub fn actor_objective(actor: &SquashedGaussianHead, critic: &Mlp, states: &[&[f64]], noise: &[Vec<f64>]) -> Result<f64> {
    check_batch(states.len(), noise.len(), noise.len())?;
    let mut total = 0.0;
    for (s, xi) in states.iter().zip(noise) {
        let a = actor.action_from_noise(s, xi)?;
        total += critic.forward(&critic_input(s, &a))?[0];
    }
    Ok(total / states.len() as f64)
}

/// Gradient of [`actor_objective`] with respect to the actor parameters; the
/// critic is only differentiated with respect to its action input.
pub fn actor_gradient_frozen(actor: &SquashedGaussianHead, critic: &Mlp, states: &[&[f64]], noise: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_batch(states.len(), noise.len(), noise.len())?;
    let mut grad = vec![0.0; actor.num_params()];
    let inv = 1.0 / states.len() as f64;
    for (s, xi) in states.iter().zip(noise) {
        let (a, cache) = actor.reparam_forward(s, xi)?;
        let trace = critic.forward_trace(&critic_input(s, &a))?;
        let input_grad = critic.input_gradient(&trace, &[inv])?;
        actor.accumulate_reparam_backward(&cache, &input_grad[s.len()..], &mut grad)?;
    }
    Ok(grad)
}

fn check_batch(len: usize, a: usize, b: usize) -> Result<()> {
    if len == 0 {
        return Err(ContinuousError::EmptyBatch);
    }
    if a != len || b != len {
        return Err(ContinuousError::Config("batch companions differ in length".into()));
    }
    Ok(())
}

/// Full training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuousConfig {
    pub env: SpreadConfig,
    pub agent: AgentConfig,
    pub steps: u64,
    pub seed: u64,
    /// Buffer size before any update; defaults to ten batches.
    pub warmup: Option<usize>,
    /// Refresh only the entries sampled this tick instead of the whole buffer.
    pub lazy_refresh: bool,
    pub consensus_rounds: usize,
    /// `ring`, `complete` or `path`, instantiated over all agents.
    pub topology: String,
}

impl Default for ContinuousConfig {
    fn default() -> Self {
        Self {
            env: SpreadConfig::default(),
            agent: AgentConfig::default(),
            steps: 200_000,
            seed: 0,
            warmup: None,
            lazy_refresh: false,
            consensus_rounds: 1,
            topology: "ring".to_string(),
        }
    }
}

impl ContinuousConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.agent.validate()?;
        if self.consensus_rounds == 0 {
            return Err(ContinuousError::Config("need at least one consensus round".into()));
        }
        self.graph(self.env.num_agents)?;
        Ok(())
    }

    pub fn warmup(&self) -> usize {
        self.warmup.unwrap_or(10 * self.agent.batch_size)
    }

    pub fn graph(&self, num_agents: usize) -> Result<CommGraph> {
        Ok(format!("{}:{num_agents}", self.topology).parse::<CommGraph>()?)
    }
}

/// Per-episode log row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    /// Accumulated global reward over the episode.
    pub mean_return: f64,
    /// Mean critic loss over ticks with updates (NaN before warmup ends).
    pub critic_loss: f64,
    /// Mean `|c|` over sampled entries (NaN before warmup ends).
    pub mean_abs_c: f64,
    pub final_distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContinuousLog {
    pub episodes: Vec<EpisodeRecord>,
}

impl ContinuousLog {
    fn mean_of(rows: &[EpisodeRecord], f: impl Fn(&EpisodeRecord) -> f64) -> f64 {
        rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64
    }

    pub fn first_mean_return(&self, n: usize) -> f64 {
        Self::mean_of(&self.episodes[..n.min(self.episodes.len())], |r| r.mean_return)
    }

    pub fn last_mean_return(&self, n: usize) -> f64 {
        Self::mean_of(&self.episodes[self.episodes.len().saturating_sub(n)..], |r| r.mean_return)
    }

    pub fn last_mean_distance(&self, n: usize) -> f64 {
        Self::mean_of(&self.episodes[self.episodes.len().saturating_sub(n)..], |r| r.final_distance)
    }
}

/// Outcome of [`train_continuous`].
#[derive(Debug, Clone)]
pub struct ContinuousRun {
    pub log: ContinuousLog,
    pub agents: Vec<ContinuousAgent>,
}

/// Agents with per-agent seeds derived from `seed`.
pub fn make_continuous_agents(num_agents: usize, observation_dim: usize, action_dim: usize, config: &AgentConfig, seed: u64, audit: Option<&AccessAudit>) -> Result<Vec<ContinuousAgent>> {
    (0..num_agents)
        .map(|i| {
            let agent_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1 + i as u64);
            let agent = ContinuousAgent::new(i, observation_dim, action_dim, config, agent_seed)?;
            Ok(match audit {
                Some(a) => agent.with_audit(a.clone()),
                None => agent,
            })
        })
        .collect()
}

/// Navigation task training run from a configuration.
pub fn train_spread(config: &ContinuousConfig, audit: Option<&AccessAudit>) -> Result<ContinuousRun> {
    config.validate()?;
    let mut env_rng = seeded_rng(config.seed);
    let mut env = SpreadEnv::new(config.env.clone(), &mut env_rng)?;
    let n = config.env.num_agents;
    let agents = make_continuous_agents(n, env.observation_dim(), SPREAD_ACTION_DIM, &config.agent, config.seed, audit)?;
    let kernel = ConsensusKernel::build(&config.graph(n)?)?;
    train_continuous(&mut env, agents, &kernel, config, &mut env_rng, audit)
}

fn with_agent<T>(audit: Option<&AccessAudit>, id: usize, f: impl FnOnce() -> T) -> T {
    if let Some(a) = audit {
        a.enter(id);
    }
    let out = f();
    if let Some(a) = audit {
        a.leave();
    }
    out
}

/// Runs `config.steps` lockstep ticks. The environment is reset from
/// `env_rng` at every episode boundary; episodes are truncated by time only,
/// so the last transition still bootstraps.
pub fn train_continuous<E: ContinuousEnv>(
    env: &mut E,
    mut agents: Vec<ContinuousAgent>,
    kernel: &ConsensusKernel,
    config: &ContinuousConfig,
    env_rng: &mut SimRng,
    audit: Option<&AccessAudit>,
) -> Result<ContinuousRun> {
    config.agent.validate()?;
    let n = env.num_agents();
    if agents.len() != n || kernel.num_nodes() != n || config.consensus_rounds == 0 {
        return Err(ContinuousError::Config(format!(
            "{} agents and a {}-node kernel for a {n}-agent environment",
            agents.len(),
            kernel.num_nodes()
        )));
    }
    let warmup = config.warmup().max(1);
    let mut obs = env.reset(env_rng)?;
    let mut log = ContinuousLog::default();
    let (mut ep_return, mut ep_loss, mut ep_c, mut ep_updates) = (0.0, 0.0, 0.0, 0usize);
    let mark = |t: u64, p: Phase| {
        if let Some(a) = audit {
            a.phase(t, p);
        }
    };

    for t in 0..config.steps {
        mark(t, Phase::Act);
        let mut actions = Vec::with_capacity(n);
        let mut logprobs = Vec::with_capacity(n);
        for agent in agents.iter_mut() {
            let (a, lp) = with_agent(audit, agent.id(), || agent.act(&obs))?;
            actions.push(a);
            logprobs.push(lp);
        }

        mark(t, Phase::EnvStep);
        let (next_obs, reward, done) = env.step(&actions)?;
        ep_return += reward;

        mark(t, Phase::Store);
        for ((agent, a), lp) in agents.iter_mut().zip(actions).zip(logprobs) {
            let tr = Transition {
                timestep: t,
                state: obs.clone(),
                action: a,
                reward,
                next_state: next_obs.clone(),
            };
            with_agent(audit, agent.id(), || agent.store(tr, lp))?;
        }

        if agents[0].buffer().len() >= warmup {
            mark(t, Phase::Sample);
            let mut batches = Vec::with_capacity(n);
            for agent in agents.iter_mut() {
                batches.push(with_agent(audit, agent.id(), || agent.sample_indices())?);
            }

            mark(t, Phase::Evaluate);
            for (agent, idx) in agents.iter_mut().zip(&batches) {
                let step = with_agent(audit, agent.id(), || -> Result<CriticStep> {
                    let step = agent.critic_gradient(idx, n)?;
                    agent.apply_critic_gradient(&step.grad);
                    Ok(step)
                })?;
                ep_loss += step.loss / n as f64;
                ep_c += step.mean_abs_c / n as f64;
            }
            ep_updates += 1;

            mark(t, Phase::Improve);
            for (agent, idx) in agents.iter_mut().zip(&batches) {
                with_agent(audit, agent.id(), || -> Result<()> {
                    let g = agent.actor_gradient(idx)?;
                    agent.apply_actor_gradient(&g);
                    Ok(())
                })?;
            }

            mark(t, Phase::Consensus);
            for (agent, idx) in agents.iter_mut().zip(&batches) {
                let only = config.lazy_refresh.then_some(idx.as_slice());
                with_agent(audit, agent.id(), || agent.refresh_betas(only));
            }
            let mut buffers: Vec<&mut ReplayBuffer> = agents.iter_mut().map(|a| a.buffer_mut()).collect();
            for _ in 0..config.consensus_rounds {
                replay::consensus_exchange(&mut buffers, kernel, audit)?;
            }

            mark(t, Phase::TargetUpdate);
            for agent in agents.iter_mut() {
                with_agent(audit, agent.id(), || agent.target_update())?;
            }
        }

        obs = next_obs;
        if done {
            let updates = ep_updates as f64;
            log.episodes.push(EpisodeRecord {
                episode: log.episodes.len(),
                mean_return: ep_return,
                critic_loss: if ep_updates > 0 { ep_loss / updates } else { f64::NAN },
                mean_abs_c: if ep_updates > 0 { ep_c / updates } else { f64::NAN },
                final_distance: env.episode_metric(),
            });
            (ep_return, ep_loss, ep_c, ep_updates) = (0.0, 0.0, 0.0, 0);
            obs = env.reset(env_rng)?;
        }
    }
    Ok(ContinuousRun { log, agents })
}

/// Rolls out the agents' current stochastic policies without learning and
/// returns `(mean episode return, mean final metric)`.
pub fn evaluate_policies<E: ContinuousEnv>(env: &mut E, agents: &[ContinuousAgent], episodes: usize, seed: u64) -> Result<(f64, f64)> {
    if episodes == 0 || agents.len() != env.num_agents() {
        return Err(ContinuousError::Config("evaluation needs episodes and one agent per env slot".into()));
    }
    let mut env_rng = seeded_rng(seed);
    let mut act_rng = seeded_rng(seed ^ 0x5E_ED0F_E7A1);
    let (mut total_return, mut total_metric) = (0.0, 0.0);
    for _ in 0..episodes {
        let mut obs = env.reset(&mut env_rng)?;
        loop {
            let actions = agents
                .iter()
                .map(|a| Ok(a.actor.sample_squashed(&obs, &mut act_rng)?.0))
                .collect::<Result<Vec<_>>>()?;
            let (next, r, done) = env.step(&actions)?;
            total_return += r;
            obs = next;
            if done {
                break;
            }
        }
        total_metric += env.episode_metric();
    }
    Ok((total_return / episodes as f64, total_metric / episodes as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(state: Vec<f64>, action: Vec<f64>, reward: f64, next_state: Vec<f64>) -> ReplayEntry {
        ReplayEntry {
            timestep: 0,
            state,
            action,
            reward,
            next_state,
            behavior_logprob: 0.0,
            beta: 0.0,
            beta_prev: 0.0,
            x: 0.0,
            stale: false,
        }
    }

    #[test]
    fn td_target_arithmetic() {
        // constant target network with output 2
        let mut target = Mlp::zeros(&[3, 1]).unwrap();
        target.params_mut()[3] = 2.0;
        let e = entry(vec![0.0, 0.0], vec![0.5], 1.0, vec![0.1, 0.2]);
        assert!((td_target(&target, &e, &[0.3], 0.9).unwrap() - 2.8).abs() < 1e-15);
    }

    #[test]
    fn exact_critic_has_zero_gradient() {
        // critic and target both constant c, gamma 0, reward c
        let mut critic = Mlp::zeros(&[3, 1]).unwrap();
        critic.params_mut()[3] = 0.7;
        let e = entry(vec![1.0, 2.0], vec![0.1], 0.7, vec![0.0, 0.0]);
        let (g, loss) = critic_gradient_frozen(&critic, &critic, &[&e], &[vec![0.0]], &[1.3], 0.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(matches!(
            critic_gradient_frozen(&critic, &critic, &[], &[], &[], 0.0),
            Err(ContinuousError::EmptyBatch)
        ));
    }

    #[test]
    fn action_blind_critic_gives_zero_actor_gradient() {
        // weights on the action input are zero
        let mut rng = seeded_rng(8);
        let mut critic = Mlp::init(&[3, 1], &mut rng).unwrap();
        critic.params_mut()[2] = 0.0;
        let actor = SquashedGaussianHead::init(2, &[4], 1, &mut rng).unwrap();
        let s = [0.3, -0.2];
        let g = actor_gradient_frozen(&actor, &critic, &[&s], &[vec![0.4]]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn target_update_arithmetic() {
        let cfg = AgentConfig {
            hidden: vec![2],
            target_step: 0.01,
            ..AgentConfig::default()
        };
        let mut agent = ContinuousAgent::new(0, 2, 1, &cfg, 1).unwrap();
        agent.target_critic_mut().params_mut().fill(0.0);
        agent.critic_mut().params_mut().fill(1.0);
        agent.target_update().unwrap();
        assert!(agent.target_critic().params().iter().all(|&p| (p - 0.01).abs() < 1e-15));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ContinuousConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.agent.target_step = 0.0;
        assert!(cfg.validate().is_err());
        cfg.agent.target_step = 0.1;
        cfg.topology = "star".into();
        assert!(cfg.validate().is_err());
        assert_eq!(ContinuousConfig::default().warmup(), 640);
    }
}
