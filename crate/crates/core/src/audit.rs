//! Access recording for privacy and ordering checks.
//!
//! Training loops mark which agent is executing with [`AccessAudit::enter`];
//! agents report every read of their own parameter blocks, and the replay
//! exchange reports every value that crosses the graph. A read whose owner
//! differs from the executing agent is a privacy violation.

use std::sync::{Arc, Mutex, MutexGuard};

/// Parameter block being read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamBlock {
    QTable,
    PolicyTable,
    Actor,
    Critic,
    TargetCritic,
}

/// Kind of payload sent from one agent to another.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Payload {
    /// Consensus state of one replay entry.
    ConsensusValue,
}

/// Stages of one training tick, in the order the loops execute them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Act,
    EnvStep,
    Store,
    Sample,
    Evaluate,
    Improve,
    Consensus,
    TargetUpdate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRead {
    pub executing: Option<usize>,
    pub owner: usize,
    pub block: ParamBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Message {
    pub from: usize,
    pub to: usize,
    pub payload: Payload,
}

#[derive(Debug, Default)]
struct AuditState {
    executing: Option<usize>,
    reads: Vec<ParamRead>,
    messages: Vec<Message>,
    trace: Vec<(u64, Phase)>,
}

/// Shared recorder; clones observe the same log.
#[derive(Debug, Clone, Default)]
pub struct AccessAudit {
    state: Arc<Mutex<AuditState>>,
}

impl AccessAudit {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, AuditState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Marks `agent` as the one whose code runs until [`AccessAudit::leave`].
    pub fn enter(&self, agent: usize) {
        self.lock().executing = Some(agent);
    }

    pub fn leave(&self) {
        self.lock().executing = None;
    }

    pub fn param_read(&self, owner: usize, block: ParamBlock) {
        let mut st = self.lock();
        let executing = st.executing;
        st.reads.push(ParamRead { executing, owner, block });
    }

    pub fn message(&self, from: usize, to: usize, payload: Payload) {
        self.lock().messages.push(Message { from, to, payload });
    }

    pub fn phase(&self, tick: u64, phase: Phase) {
        let mut st = self.lock();
        if st.trace.last() != Some(&(tick, phase)) {
            st.trace.push((tick, phase));
        }
    }

    pub fn reads(&self) -> Vec<ParamRead> {
        self.lock().reads.clone()
    }

    pub fn messages(&self) -> Vec<Message> {
        self.lock().messages.clone()
    }

    /// Distinct `(tick, phase)` markers in execution order.
    pub fn trace(&self) -> Vec<(u64, Phase)> {
        self.lock().trace.clone()
    }

    /// Reads made while no agent, or a different agent, was executing.
    pub fn cross_agent_reads(&self) -> Vec<ParamRead> {
        self.lock()
            .reads
            .iter()
            .filter(|r| r.executing != Some(r.owner))
            .copied()
            .collect()
    }
}

/// Convenience wrapper so optional audits cost nothing when absent.
pub(crate) fn record_read(audit: &Option<AccessAudit>, owner: usize, block: ParamBlock) {
    if let Some(a) = audit {
        a.param_read(owner, block);
    }
}
