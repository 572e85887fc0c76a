//! Decentralized replay buffers with consensus-maintained importance weights.
//!
//! Every agent stores each transition together with the log-density its own
//! policy assigned to the local action at insertion time. After each policy
//! change the agent refreshes `beta = log(pi_now / pi_then)` and adds the
//! change of `beta` to its consensus state `x`. Neighbor averaging keeps the
//! per-entry sum of `x` equal to the sum of `beta` over agents, and drives
//! every `x` to its average, so `N * x` recovers that sum locally.

use std::collections::{BTreeSet, VecDeque};
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{AccessAudit, Payload};
use crate::checkpoint::{self, CheckpointError};
use crate::consensus::ConsensusKernel;
use crate::SimRng;

/// Clamp for the log-weight `c`, giving weights in `[0.1, 10]`.
pub const LOG_WEIGHT_CLAMP: f64 = std::f64::consts::LN_10;

const BUFFER_FORMAT: &str = "decmarl-replay/1";

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("behavior log-density {0} is not finite")]
    NonFiniteDensity(f64),
    #[error("no sampleable entries in buffer")]
    Empty,
    #[error("buffers disagree at timestep {timestep}")]
    Misaligned { timestep: u64 },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ReplayError>;

/// One stored transition with its weight bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub timestep: u64,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub behavior_logprob: f64,
    pub beta: f64,
    pub beta_prev: f64,
    pub x: f64,
    /// Set when the current policy density could not be evaluated; stale
    /// entries keep their consensus slot but are never sampled.
    pub stale: bool,
}

/// Transition fields supplied by the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub timestep: u64,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

/// Bounded FIFO of [`ReplayEntry`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    entries: VecDeque<ReplayEntry>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(ReplayError::InvalidArgument("capacity must be positive".into()));
        }
        Ok(Self {
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&ReplayEntry> {
        self.entries.get(index)
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &ReplayEntry> {
        self.entries.iter()
    }

    /// Appends with `beta = x = 0`, evicting the oldest entry when full.
    pub fn insert(&mut self, t: Transition, behavior_logprob: f64) -> Result<()> {
        if !behavior_logprob.is_finite() {
            return Err(ReplayError::NonFiniteDensity(behavior_logprob));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(ReplayEntry {
            timestep: t.timestep,
            state: t.state,
            action: t.action,
            reward: t.reward,
            next_state: t.next_state,
            behavior_logprob,
            beta: 0.0,
            beta_prev: 0.0,
            x: 0.0,
            stale: false,
        });
        Ok(())
    }

    /// Recomputes `beta` for every entry from the current log-density.
    pub fn local_beta_refresh(&mut self, mut current_logprob: impl FnMut(&ReplayEntry) -> f64) {
        for e in self.entries.iter_mut() {
            refresh_entry(e, &mut current_logprob);
        }
    }

    /// Like [`Self::local_beta_refresh`] but only for the given positions.
    pub fn refresh_indices(&mut self, indices: &[usize], mut current_logprob: impl FnMut(&ReplayEntry) -> f64) {
        let unique: BTreeSet<usize> = indices.iter().copied().collect();
        for i in unique {
            if let Some(e) = self.entries.get_mut(i) {
                refresh_entry(e, &mut current_logprob);
            }
        }
    }

    /// Positions drawn uniformly with replacement among non-stale entries.
    pub fn sample_indices(&self, size: usize, rng: &mut SimRng) -> Result<Vec<usize>> {
        let live: Vec<usize> = (0..self.entries.len()).filter(|&i| !self.entries[i].stale).collect();
        if live.is_empty() {
            return Err(ReplayError::Empty);
        }
        if live.len() == self.entries.len() {
            return Ok((0..size).map(|_| rng.random_range(0..live.len())).collect());
        }
        Ok((0..size).map(|_| live[rng.random_range(0..live.len())]).collect())
    }

    pub fn sample_batch(&self, size: usize, rng: &mut SimRng) -> Result<Vec<&ReplayEntry>> {
        Ok(self.sample_indices(size, rng)?.into_iter().map(|i| &self.entries[i]).collect())
    }

    /// Checkpoint with [`BufferMeta`] metadata. The payload holds, per entry,
    /// `timestep, reward, behavior_logprob, beta, beta_prev, x, stale` followed
    /// by the state, action and next-state vectors.
    pub fn save(&self, out: impl Write) -> Result<()> {
        let first = self.entries.front();
        let meta = BufferMeta {
            format: BUFFER_FORMAT.to_string(),
            capacity: self.capacity,
            len: self.entries.len(),
            state_dim: first.map_or(0, |e| e.state.len()),
            action_dim: first.map_or(0, |e| e.action.len()),
        };
        let mut flat = Vec::new();
        for e in &self.entries {
            if e.state.len() != meta.state_dim || e.next_state.len() != meta.state_dim || e.action.len() != meta.action_dim {
                return Err(ReplayError::InvalidArgument("entries have inconsistent dimensions".into()));
            }
            flat.extend_from_slice(&[
                e.timestep as f64,
                e.reward,
                e.behavior_logprob,
                e.beta,
                e.beta_prev,
                e.x,
                if e.stale { 1.0 } else { 0.0 },
            ]);
            flat.extend_from_slice(&e.state);
            flat.extend_from_slice(&e.action);
            flat.extend_from_slice(&e.next_state);
        }
        Ok(checkpoint::write(out, &meta, &flat)?)
    }

    pub fn load(input: impl Read) -> Result<Self> {
        let (meta, flat): (BufferMeta, Vec<f64>) = checkpoint::read(input)?;
        if meta.format != BUFFER_FORMAT {
            return Err(ReplayError::InvalidArgument(format!("unsupported buffer format {}", meta.format)));
        }
        let stride = 7 + 2 * meta.state_dim + meta.action_dim;
        if flat.len() != stride * meta.len || meta.len > meta.capacity {
            return Err(CheckpointError::Layout("payload length does not match metadata".into()).into());
        }
        let mut buf = Self::new(meta.capacity)?;
        for rec in flat.chunks_exact(stride) {
            let (head, rest) = rec.split_at(7);
            let (state, rest) = rest.split_at(meta.state_dim);
            let (action, next_state) = rest.split_at(meta.action_dim);
            buf.entries.push_back(ReplayEntry {
                timestep: head[0] as u64,
                reward: head[1],
                behavior_logprob: head[2],
                beta: head[3],
                beta_prev: head[4],
                x: head[5],
                stale: head[6] != 0.0,
                state: state.to_vec(),
                action: action.to_vec(),
                next_state: next_state.to_vec(),
            });
        }
        Ok(buf)
    }
}

fn refresh_entry(e: &mut ReplayEntry, current_logprob: &mut impl FnMut(&ReplayEntry) -> f64) {
    let lp = current_logprob(e);
    if !lp.is_finite() {
        e.stale = true;
        return;
    }
    e.beta_prev = e.beta;
    e.beta = lp - e.behavior_logprob;
    e.x += e.beta - e.beta_prev;
}

/// Checkpoint metadata for [`ReplayBuffer::save`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BufferMeta {
    pub format: String,
    pub capacity: usize,
    pub len: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

/// One synchronous consensus round over every aligned entry. Reads of
/// neighbor values come from the pre-round snapshot and only follow the
/// kernel's support; each directed edge used is reported to `audit` once.
pub fn consensus_exchange(buffers: &mut [&mut ReplayBuffer], kernel: &ConsensusKernel, audit: Option<&AccessAudit>) -> Result<()> {
    let n = buffers.len();
    if n != kernel.num_nodes() {
        return Err(ReplayError::InvalidArgument(format!(
            "{n} buffers for a kernel over {} nodes",
            kernel.num_nodes()
        )));
    }
    let len = buffers[0].len();
    for b in buffers.iter() {
        if b.len() != len {
            let timestep = b.entries.back().or(buffers[0].entries.back()).map_or(0, |e| e.timestep);
            return Err(ReplayError::Misaligned { timestep });
        }
    }
    let mut used = BTreeSet::new();
    let mut snapshot = vec![0.0; n];
    for k in 0..len {
        let t = buffers[0].entries[k].timestep;
        for (j, b) in buffers.iter().enumerate() {
            let e = &b.entries[k];
            if e.timestep != t {
                return Err(ReplayError::Misaligned { timestep: t.min(e.timestep) });
            }
            snapshot[j] = e.x;
        }
        let next = kernel.step_by(|i, j| {
            if i != j {
                used.insert((j, i));
            }
            snapshot[j]
        });
        for (b, x) in buffers.iter_mut().zip(next) {
            b.entries[k].x = x;
        }
    }
    if let Some(a) = audit {
        for (from, to) in used {
            a.message(from, to, Payload::ConsensusValue);
        }
    }
    Ok(())
}

/// `exp(clamp(N x - beta, ±ln 10))`; exactly 1 for a single agent.
pub fn is_weight(entry: &ReplayEntry, num_agents: usize) -> f64 {
    log_weight(entry, num_agents).exp()
}

/// Clamped log-weight `c`.
pub fn log_weight(entry: &ReplayEntry, num_agents: usize) -> f64 {
    if num_agents <= 1 {
        return 0.0;
    }
    (num_agents as f64 * entry.x - entry.beta).clamp(-LOG_WEIGHT_CLAMP, LOG_WEIGHT_CLAMP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::CommGraph;

    fn tr(t: u64) -> Transition {
        Transition {
            timestep: t,
            state: vec![t as f64, 0.5],
            action: vec![0.1],
            reward: -(t as f64),
            next_state: vec![t as f64 + 1.0, 0.5],
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for t in 0..5 {
            b.insert(tr(t), -1.0).unwrap();
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.entries().map(|e| e.timestep).collect::<Vec<_>>(), vec![2, 3, 4]);
        assert!(matches!(b.insert(tr(9), f64::NEG_INFINITY), Err(ReplayError::NonFiniteDensity(_))));
        assert!(b.entries().all(|e| e.beta == 0.0 && e.x == 0.0));
    }

    #[test]
    fn refresh_examples() {
        let mut b = ReplayBuffer::new(4).unwrap();
        b.insert(tr(0), -1.2).unwrap();
        b.local_beta_refresh(|e| e.behavior_logprob);
        assert_eq!((b.get(0).unwrap().beta, b.get(0).unwrap().x), (0.0, 0.0));
        b.local_beta_refresh(|e| e.behavior_logprob + std::f64::consts::LN_2);
        let e = b.get(0).unwrap().clone();
        assert!((e.beta - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(e.x, e.beta);
        // a second identical refresh is a no-op on x
        b.local_beta_refresh(|e| e.behavior_logprob + std::f64::consts::LN_2);
        assert_eq!(b.get(0).unwrap().x, e.x);
    }

    #[test]
    fn stale_entries_are_not_sampled() {
        let mut b = ReplayBuffer::new(4).unwrap();
        b.insert(tr(0), 0.0).unwrap();
        b.insert(tr(1), 0.0).unwrap();
        b.local_beta_refresh(|e| if e.timestep == 0 { f64::NAN } else { 0.0 });
        let mut rng = crate::seeded_rng(3);
        assert!(b.sample_batch(50, &mut rng).unwrap().iter().all(|e| e.timestep == 1));
        b.local_beta_refresh(|_| f64::NAN);
        assert!(matches!(b.sample_batch(1, &mut rng), Err(ReplayError::Empty)));
        assert!(matches!(ReplayBuffer::new(2).unwrap().sample_batch(1, &mut rng), Err(ReplayError::Empty)));
    }

    #[test]
    fn sampling_is_seeded() {
        let mut b = ReplayBuffer::new(10).unwrap();
        for t in 0..10 {
            b.insert(tr(t), 0.0).unwrap();
        }
        let a = b.sample_indices(20, &mut crate::seeded_rng(5)).unwrap();
        assert_eq!(a, b.sample_indices(20, &mut crate::seeded_rng(5)).unwrap());
    }

    #[test]
    fn weight_arithmetic() {
        let mut e = ReplayBuffer::new(1).unwrap();
        e.insert(tr(0), 0.0).unwrap();
        let mut entry = e.get(0).unwrap().clone();
        entry.beta = 0.1;
        entry.x = 0.2;
        assert!((log_weight(&entry, 3) - 0.5).abs() < 1e-15);
        assert_eq!(is_weight(&entry, 1), 1.0);
        entry.x = 100.0;
        assert!((is_weight(&entry, 3) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn misaligned_buffers_are_rejected() {
        let kernel = ConsensusKernel::build(&CommGraph::ring(3).unwrap()).unwrap();
        let mut bufs: Vec<ReplayBuffer> = (0..3).map(|_| ReplayBuffer::new(5).unwrap()).collect();
        for (i, b) in bufs.iter_mut().enumerate() {
            b.insert(tr(if i == 2 { 7 } else { 4 }), 0.0).unwrap();
        }
        let mut refs: Vec<&mut ReplayBuffer> = bufs.iter_mut().collect();
        assert!(matches!(
            consensus_exchange(&mut refs, &kernel, None),
            Err(ReplayError::Misaligned { timestep: 4 })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut b = ReplayBuffer::new(8).unwrap();
        for t in 0..5 {
            b.insert(tr(t), -0.3 * t as f64).unwrap();
        }
        b.local_beta_refresh(|e| if e.timestep == 2 { f64::NAN } else { 0.1 + e.state[0] });
        let mut buf = Vec::new();
        b.save(&mut buf).unwrap();
        assert_eq!(ReplayBuffer::load(&buf[..]).unwrap(), b);
    }
}
