//! Decentralized multi-agent actor-critic.
//!
//! Agents share a fully observable state and a global reward but keep their
//! policies private. Two learners are provided:
//!
//! * [`tabular`]: per-agent Q-tables and softmax policy tables trained on two
//!   timescales, with exact evaluation/improvement oracles in [`mdp`].
//! * [`continuous`]: per-agent critics and squashed-Gaussian actors trained
//!   off-policy from decentralized replay buffers ([`replay`]) whose
//!   importance weights are agreed on through neighbor averaging
//!   ([`consensus`]).
//!
//! [`envs`] holds the cooperative navigation task and the random-MDP adapter,
//! and [`audit`] records parameter reads and graph messages so tests can check
//! that no agent touches another agent's parameters.

pub mod approx;
pub mod audit;
pub mod checkpoint;
pub mod consensus;
pub mod continuous;
pub mod envs;
pub mod mdp;
pub mod replay;
pub mod tabular;

use rand::SeedableRng;

/// Generator used everywhere a seed must reproduce a run bit for bit.
pub type SimRng = rand_chacha::ChaCha8Rng;

/// Seeded [`SimRng`].
pub fn seeded_rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}
