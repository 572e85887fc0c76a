//! Finite multi-agent MDPs and the exact evaluation oracles used to check the
//! learners.
//!
//! Joint actions are mixed-radix integers over the per-agent action counts with
//! agent 0 as the least significant digit. Tensors are flattened row-major:
//! `transition[(s * joint + a) * states + s_next]` and `reward[s * joint + a]`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::SimRng;

/// Row-sum tolerance for transition and policy rows.
pub const ROW_TOLERANCE: f64 = 1e-12;

/// Maximum residual accepted from the dense linear solve.
pub const SOLVE_TOLERANCE: f64 = 1e-10;

const JSON_FORMAT: &str = "decmarl-mdp/1";

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("linear solve residual {residual:e} exceeds tolerance")]
    SolveFailed { residual: f64 },
    #[error("mdp json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MdpError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(MdpError::InvalidArgument(msg.into()))
}

/// A finite MDP whose action space is the product of per-agent action sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    num_states: usize,
    action_sizes: Vec<usize>,
    num_joint: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    gamma: f64,
    seed: Option<u64>,
}

impl Mdp {
    /// Builds an MDP from flattened tensors, validating every invariant.
    pub fn new(
        num_states: usize,
        action_sizes: Vec<usize>,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let num_joint = check_dims(num_states, &action_sizes)?;
        if !(0.0..1.0).contains(&gamma) {
            return invalid(format!("discount {gamma} outside [0, 1)"));
        }
        if transition.len() != num_states * num_joint * num_states {
            return invalid(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                num_states * num_joint * num_states
            ));
        }
        if reward.len() != num_states * num_joint {
            return invalid(format!(
                "reward has {} entries, expected {}",
                reward.len(),
                num_states * num_joint
            ));
        }
        if let Some(r) = reward.iter().find(|r| !r.is_finite()) {
            return invalid(format!("reward entry {r} is not finite"));
        }
        for (row_idx, row) in transition.chunks(num_states).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return invalid(format!("transition row {row_idx} has a negative or non-finite entry"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return invalid(format!("transition row {row_idx} sums to {sum}"));
            }
        }
        Ok(Self {
            num_states,
            action_sizes,
            num_joint,
            transition,
            reward,
            gamma,
            seed: None,
        })
    }

    /// Random instance: transition rows drawn from U(0, 1) and normalized,
    /// rewards i.i.d. standard normal per (state, joint action).
    pub fn generate_random(seed: u64, num_states: usize, action_sizes: &[usize], gamma: f64) -> Result<Self> {
        let num_joint = check_dims(num_states, action_sizes)?;
        let mut rng = crate::seeded_rng(seed);
        let mut transition = Vec::with_capacity(num_states * num_joint * num_states);
        for _ in 0..num_states * num_joint {
            let row = loop {
                let row: Vec<f64> = (0..num_states).map(|_| rng.random::<f64>()).collect();
                let sum: f64 = row.iter().sum();
                // all-zero rows have probability zero but would divide by zero
                if sum > 0.0 {
                    break row.into_iter().map(|p| p / sum).collect::<Vec<_>>();
                }
            };
            transition.extend(row);
        }
        let reward = (0..num_states * num_joint)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut mdp = Self::new(num_states, action_sizes.to_vec(), transition, reward, gamma)?;
        mdp.seed = Some(seed);
        Ok(mdp)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_agents(&self) -> usize {
        self.action_sizes.len()
    }

    pub fn action_sizes(&self) -> &[usize] {
        &self.action_sizes
    }

    pub fn num_joint_actions(&self) -> usize {
        self.num_joint
    }

    pub fn num_state_action_pairs(&self) -> usize {
        self.num_states * self.num_joint
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Seed the instance was generated from, if any.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn transition_row(&self, state: usize, joint: usize) -> &[f64] {
        let start = (state * self.num_joint + joint) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    pub fn reward(&self, state: usize, joint: usize) -> f64 {
        self.reward[state * self.num_joint + joint]
    }

    pub fn transition(&self) -> &[f64] {
        &self.transition
    }

    pub fn rewards(&self) -> &[f64] {
        &self.reward
    }

    /// Mixed-radix encoding, agent 0 least significant.
    pub fn encode_joint(&self, local: &[usize]) -> Result<usize> {
        if local.len() != self.action_sizes.len() {
            return invalid(format!("expected {} local actions, got {}", self.action_sizes.len(), local.len()));
        }
        let mut idx = 0;
        for (agent, (&a, &size)) in local.iter().zip(&self.action_sizes).enumerate().rev() {
            if a >= size {
                return invalid(format!("action {a} of agent {agent} out of range {size}"));
            }
            idx = idx * size + a;
        }
        Ok(idx)
    }

    pub fn decode_joint(&self, mut joint: usize) -> Vec<usize> {
        self.action_sizes
            .iter()
            .map(|&size| {
                let a = joint % size;
                joint /= size;
                a
            })
            .collect()
    }

    /// Digit of `agent` inside a joint-action index.
    pub fn local_action(&self, joint: usize, agent: usize) -> usize {
        let stride: usize = self.action_sizes[..agent].iter().product();
        (joint / stride) % self.action_sizes[agent]
    }

    /// Samples a successor and returns it with the deterministic reward.
    pub fn step(&self, state: usize, joint: usize, rng: &mut SimRng) -> Result<(usize, f64)> {
        if state >= self.num_states {
            return invalid(format!("state {state} out of range {}", self.num_states));
        }
        if joint >= self.num_joint {
            return invalid(format!("joint action {joint} out of range {}", self.num_joint));
        }
        let row = self.transition_row(state, joint);
        let next = sample_index(row, rng.random::<f64>());
        Ok((next, self.reward(state, joint)))
    }

    /// The same dynamics seen by one global agent choosing joint actions.
    pub fn as_single_agent(&self) -> Mdp {
        Mdp {
            action_sizes: vec![self.num_joint],
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MdpJson::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: MdpJson = serde_json::from_str(text)?;
        raw.try_into()
    }
}

fn check_dims(num_states: usize, action_sizes: &[usize]) -> Result<usize> {
    if num_states == 0 {
        return invalid("an MDP needs at least one state");
    }
    if action_sizes.is_empty() {
        return invalid("an MDP needs at least one agent");
    }
    if let Some(agent) = action_sizes.iter().position(|&n| n == 0) {
        return invalid(format!("agent {agent} has no actions"));
    }
    action_sizes
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| MdpError::InvalidArgument("joint action space overflows".into()))
}

/// Inverse-CDF draw from a discrete distribution given `u ~ U[0, 1)`.
pub(crate) fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding can leave acc slightly below 1; fall back to the last supported entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// On-disk JSON layout: dimensions, flattened row-major tensors and the seed
/// the instance came from.
#[derive(Debug, Serialize, Deserialize)]
struct MdpJson {
    format: String,
    num_states: usize,
    action_sizes: Vec<usize>,
    num_joint_actions: usize,
    gamma: f64,
    seed: Option<u64>,
    /// Indexed `(state * num_joint_actions + joint) * num_states + next_state`.
    transition: Vec<f64>,
    /// Indexed `state * num_joint_actions + joint`.
    reward: Vec<f64>,
}

impl From<&Mdp> for MdpJson {
    fn from(m: &Mdp) -> Self {
        Self {
            format: JSON_FORMAT.to_string(),
            num_states: m.num_states,
            action_sizes: m.action_sizes.clone(),
            num_joint_actions: m.num_joint,
            gamma: m.gamma,
            seed: m.seed,
            transition: m.transition.clone(),
            reward: m.reward.clone(),
        }
    }
}

impl TryFrom<MdpJson> for Mdp {
    type Error = MdpError;

    fn try_from(raw: MdpJson) -> Result<Self> {
        if raw.format != JSON_FORMAT {
            return invalid(format!("unknown mdp format {:?}", raw.format));
        }
        let mut mdp = Mdp::new(raw.num_states, raw.action_sizes, raw.transition, raw.reward, raw.gamma)?;
        if mdp.num_joint != raw.num_joint_actions {
            return invalid("num_joint_actions disagrees with action_sizes");
        }
        mdp.seed = raw.seed;
        Ok(mdp)
    }
}

/// Product policy: one `(state, local action)` probability table per agent.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPolicy {
    num_states: usize,
    action_sizes: Vec<usize>,
    per_agent: Vec<Vec<f64>>,
}

impl JointPolicy {
    /// Builds a policy whose entries are all strictly positive.
    pub fn new(num_states: usize, per_agent: Vec<Vec<f64>>, action_sizes: Vec<usize>) -> Result<Self> {
        let policy = Self::from_tables_unchecked(num_states, per_agent, action_sizes)?;
        policy.check_rows(true)?;
        Ok(policy)
    }

    /// Like [`JointPolicy::new`] but admits zero entries, e.g. point masses
    /// produced by exact improvement.
    pub fn with_deterministic_rows(num_states: usize, per_agent: Vec<Vec<f64>>, action_sizes: Vec<usize>) -> Result<Self> {
        let policy = Self::from_tables_unchecked(num_states, per_agent, action_sizes)?;
        policy.check_rows(false)?;
        Ok(policy)
    }

    fn from_tables_unchecked(num_states: usize, per_agent: Vec<Vec<f64>>, action_sizes: Vec<usize>) -> Result<Self> {
        if per_agent.len() != action_sizes.len() {
            return Err(MdpError::InvalidPolicy(format!(
                "{} tables for {} agents",
                per_agent.len(),
                action_sizes.len()
            )));
        }
        for (i, (table, &n)) in per_agent.iter().zip(&action_sizes).enumerate() {
            if table.len() != num_states * n {
                return Err(MdpError::InvalidPolicy(format!(
                    "agent {i} table has {} entries, expected {}",
                    table.len(),
                    num_states * n
                )));
            }
        }
        Ok(Self {
            num_states,
            action_sizes,
            per_agent,
        })
    }

    fn check_rows(&self, strictly_positive: bool) -> Result<()> {
        for (i, (table, &n)) in self.per_agent.iter().zip(&self.action_sizes).enumerate() {
            for (s, row) in table.chunks(n).enumerate() {
                let bad = row.iter().any(|&p| {
                    !p.is_finite() || p < 0.0 || (strictly_positive && p <= 0.0)
                });
                if bad {
                    return Err(MdpError::InvalidPolicy(format!(
                        "agent {i} state {s} has an entry outside the admissible range"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_TOLERANCE {
                    return Err(MdpError::InvalidPolicy(format!("agent {i} state {s} sums to {sum}")));
                }
            }
        }
        Ok(())
    }

    pub fn uniform(mdp: &Mdp) -> Self {
        let per_agent = mdp
            .action_sizes
            .iter()
            .map(|&n| vec![1.0 / n as f64; mdp.num_states * n])
            .collect();
        Self {
            num_states: mdp.num_states,
            action_sizes: mdp.action_sizes.clone(),
            per_agent,
        }
    }

    /// Random strictly positive policy (rows are normalized draws from
    /// U(0.05, 1)).
    pub fn random(mdp: &Mdp, rng: &mut SimRng) -> Self {
        let per_agent = mdp
            .action_sizes
            .iter()
            .map(|&n| {
                let mut table = Vec::with_capacity(mdp.num_states * n);
                for _ in 0..mdp.num_states {
                    let row: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
                    let sum: f64 = row.iter().sum();
                    table.extend(row.into_iter().map(|p| p / sum));
                }
                table
            })
            .collect();
        Self {
            num_states: mdp.num_states,
            action_sizes: mdp.action_sizes.clone(),
            per_agent,
        }
    }

    pub fn num_agents(&self) -> usize {
        self.per_agent.len()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn action_sizes(&self) -> &[usize] {
        &self.action_sizes
    }

    pub fn table(&self, agent: usize) -> &[f64] {
        &self.per_agent[agent]
    }

    pub fn row(&self, agent: usize, state: usize) -> &[f64] {
        let n = self.action_sizes[agent];
        &self.per_agent[agent][state * n..(state + 1) * n]
    }

    pub fn set_row(&mut self, agent: usize, state: usize, row: &[f64]) {
        let n = self.action_sizes[agent];
        self.per_agent[agent][state * n..(state + 1) * n].copy_from_slice(row);
    }

    pub fn prob(&self, agent: usize, state: usize, action: usize) -> f64 {
        self.per_agent[agent][state * self.action_sizes[agent] + action]
    }

    /// π(s, a) as the product of the local probabilities.
    pub fn joint_prob(&self, mdp: &Mdp, state: usize, joint: usize) -> f64 {
        (0..self.num_agents())
            .map(|i| self.prob(i, state, mdp.local_action(joint, i)))
            .product()
    }

    /// π^{-i}(s, a^{-i}): product over every agent except `agent`.
    pub fn others_prob(&self, mdp: &Mdp, state: usize, joint: usize, agent: usize) -> f64 {
        (0..self.num_agents())
            .filter(|&j| j != agent)
            .map(|j| self.prob(j, state, mdp.local_action(joint, j)))
            .product()
    }

    fn check_against(&self, mdp: &Mdp) -> Result<()> {
        if self.num_states != mdp.num_states || self.action_sizes != mdp.action_sizes {
            return Err(MdpError::InvalidPolicy("policy dimensions do not match the MDP".into()));
        }
        Ok(())
    }
}

/// V^π: solves `(I - γ P_π) V = R_π` by partial-pivot elimination.
pub fn exact_state_values(mdp: &Mdp, policy: &JointPolicy) -> Result<Vec<f64>> {
    policy.check_against(mdp)?;
    let n = mdp.num_states;
    let mut p_pi = vec![0.0; n * n];
    let mut r_pi = vec![0.0; n];
    for s in 0..n {
        for a in 0..mdp.num_joint {
            let pa = policy.joint_prob(mdp, s, a);
            if pa == 0.0 {
                continue;
            }
            r_pi[s] += pa * mdp.reward(s, a);
            for (dst, &p) in p_pi[s * n..(s + 1) * n].iter_mut().zip(mdp.transition_row(s, a)) {
                *dst += pa * p;
            }
        }
    }
    let mut system = vec![0.0; n * n];
    for (i, row) in system.chunks_mut(n).enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = f64::from(u8::from(i == j)) - mdp.gamma * p_pi[i * n + j];
        }
    }
    solve_checked(&system, &r_pi, n)
}

/// Q(s, a) over joint actions given state values: `R + γ P V`.
pub fn joint_action_values(mdp: &Mdp, values: &[f64]) -> Vec<f64> {
    let mut q = Vec::with_capacity(mdp.num_state_action_pairs());
    for s in 0..mdp.num_states {
        for a in 0..mdp.num_joint {
            let ev: f64 = mdp.transition_row(s, a).iter().zip(values).map(|(p, v)| p * v).sum();
            q.push(mdp.reward(s, a) + mdp.gamma * ev);
        }
    }
    q
}

/// Q^i_π(s, a^i): joint action values marginalized over π^{-i}.
pub fn exact_local_q(mdp: &Mdp, policy: &JointPolicy, agent: usize) -> Result<Vec<f64>> {
    policy.check_against(mdp)?;
    if agent >= mdp.num_agents() {
        return invalid(format!("agent {agent} out of range {}", mdp.num_agents()));
    }
    let values = exact_state_values(mdp, policy)?;
    let joint_q = joint_action_values(mdp, &values);
    Ok(marginalize(mdp, policy, agent, |s, a| joint_q[s * mdp.num_joint + a]))
}

fn marginalize(mdp: &Mdp, policy: &JointPolicy, agent: usize, joint_value: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let n_local = mdp.action_sizes[agent];
    let mut q = vec![0.0; mdp.num_states * n_local];
    for s in 0..mdp.num_states {
        for a in 0..mdp.num_joint {
            let weight = policy.others_prob(mdp, s, a, agent);
            if weight != 0.0 {
                q[s * n_local + mdp.local_action(a, agent)] += weight * joint_value(s, a);
            }
        }
    }
    q
}

/// The local Bellman operator H^i applied to an arbitrary table `q`:
/// `E_{a^{-i}}[R(s,a) + γ E_{s'~P, ã~π^i} q(s', ã)]`.
pub fn local_bellman_operator(mdp: &Mdp, policy: &JointPolicy, agent: usize, q: &[f64]) -> Result<Vec<f64>> {
    policy.check_against(mdp)?;
    if agent >= mdp.num_agents() {
        return invalid(format!("agent {agent} out of range {}", mdp.num_agents()));
    }
    let n_local = mdp.action_sizes[agent];
    if q.len() != mdp.num_states * n_local {
        return invalid(format!("q has {} entries, expected {}", q.len(), mdp.num_states * n_local));
    }
    let expected_next: Vec<f64> = (0..mdp.num_states)
        .map(|s| {
            policy
                .row(agent, s)
                .iter()
                .zip(&q[s * n_local..(s + 1) * n_local])
                .map(|(p, v)| p * v)
                .sum()
        })
        .collect();
    Ok(marginalize(mdp, policy, agent, |s, a| {
        let ev: f64 = mdp
            .transition_row(s, a)
            .iter()
            .zip(&expected_next)
            .map(|(p, v)| p * v)
            .sum();
        mdp.reward(s, a) + mdp.gamma * ev
    }))
}

/// Exact expected undiscounted reward accumulated over `horizon` steps when
/// the initial state is drawn from `start`.
pub fn finite_horizon_return(mdp: &Mdp, policy: &JointPolicy, start: &[f64], horizon: usize) -> Result<f64> {
    policy.check_against(mdp)?;
    if start.len() != mdp.num_states {
        return invalid("start distribution has the wrong length");
    }
    let n = mdp.num_states;
    let mut dist = start.to_vec();
    let mut total = 0.0;
    for _ in 0..horizon {
        let mut next = vec![0.0; n];
        for (s, &ds) in dist.iter().enumerate() {
            if ds == 0.0 {
                continue;
            }
            for a in 0..mdp.num_joint {
                let w = ds * policy.joint_prob(mdp, s, a);
                if w == 0.0 {
                    continue;
                }
                total += w * mdp.reward(s, a);
                for (dst, &p) in next.iter_mut().zip(mdp.transition_row(s, a)) {
                    *dst += w * p;
                }
            }
        }
        dist = next;
    }
    Ok(total)
}

fn solve_checked(matrix: &[f64], rhs: &[f64], n: usize) -> Result<Vec<f64>> {
    let x = solve_dense(matrix.to_vec(), rhs.to_vec(), n).ok_or(MdpError::SolveFailed { residual: f64::INFINITY })?;
    let residual = (0..n)
        .map(|i| {
            let ax: f64 = matrix[i * n..(i + 1) * n].iter().zip(&x).map(|(a, x)| a * x).sum();
            (ax - rhs[i]).abs()
        })
        .fold(0.0, f64::max);
    if !(residual < SOLVE_TOLERANCE) {
        return Err(MdpError::SolveFailed { residual });
    }
    Ok(x)
}

/// Gaussian elimination with partial pivoting. Returns `None` on a zero pivot.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[pivot * n + col] == 0.0 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(pivot * n + k, col * n + k);
            }
            b.swap(pivot, col);
        }
        let diag = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row * n + row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(reward: f64, gamma: f64) -> Mdp {
        Mdp::new(1, vec![1], vec![1.0], vec![reward], gamma).unwrap()
    }

    #[test]
    fn benchmark_sized_instances_have_expected_counts() {
        let four = Mdp::generate_random(0, 100, &[3, 3, 3, 3], 0.9).unwrap();
        assert_eq!(four.num_joint_actions(), 81);
        assert_eq!(four.num_state_action_pairs(), 8_100);
        let five = Mdp::generate_random(0, 100, &[3, 3, 3, 3, 3], 0.9).unwrap();
        assert_eq!(five.num_state_action_pairs(), 24_300);
    }

    #[test]
    fn generated_rows_are_normalized() {
        let mdp = Mdp::generate_random(3, 7, &[2, 3], 0.9).unwrap();
        for row in mdp.transition().chunks(7) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < ROW_TOLERANCE);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn rejects_empty_dimensions() {
        assert!(matches!(Mdp::generate_random(0, 0, &[2], 0.9), Err(MdpError::InvalidArgument(_))));
        assert!(matches!(Mdp::generate_random(0, 3, &[2, 0], 0.9), Err(MdpError::InvalidArgument(_))));
        assert!(Mdp::generate_random(0, 3, &[], 0.9).is_err());
        assert!(Mdp::new(1, vec![1], vec![1.0], vec![0.0], 1.0).is_err());
        assert!(Mdp::new(1, vec![1], vec![1.0], vec![f64::NAN], 0.5).is_err());
        assert!(Mdp::new(2, vec![1], vec![0.5, 0.6, 0.5, 0.5], vec![0.0, 0.0], 0.5).is_err());
    }

    #[test]
    fn joint_encoding_is_little_endian_mixed_radix() {
        let mdp = Mdp::generate_random(1, 2, &[2, 3, 4], 0.5).unwrap();
        assert_eq!(mdp.encode_joint(&[1, 0, 0]).unwrap(), 1);
        assert_eq!(mdp.encode_joint(&[0, 1, 0]).unwrap(), 2);
        assert_eq!(mdp.encode_joint(&[0, 0, 1]).unwrap(), 6);
        for joint in 0..mdp.num_joint_actions() {
            let local = mdp.decode_joint(joint);
            assert_eq!(mdp.encode_joint(&local).unwrap(), joint);
            for (i, &a) in local.iter().enumerate() {
                assert_eq!(mdp.local_action(joint, i), a);
            }
        }
        assert!(mdp.encode_joint(&[2, 0, 0]).is_err());
    }

    #[test]
    fn step_follows_degenerate_rows_and_returns_table_reward() {
        let mut transition = vec![0.0; 4 * 4];
        for row in transition.chunks_mut(4) {
            row[3] = 1.0;
        }
        let mdp = Mdp::new(4, vec![1], transition, vec![0.5, -1.0, 2.0, 7.0], 0.9).unwrap();
        let mut rng = crate::seeded_rng(9);
        for s in 0..4 {
            for _ in 0..50 {
                let (next, r) = mdp.step(s, 0, &mut rng).unwrap();
                assert_eq!(next, 3);
                assert_eq!(r, mdp.reward(s, 0));
            }
        }
        assert!(mdp.step(4, 0, &mut rng).is_err());
        assert!(mdp.step(0, 1, &mut rng).is_err());
    }

    #[test]
    fn step_frequencies_match_row() {
        let mdp = Mdp::generate_random(5, 4, &[2], 0.9).unwrap();
        let mut rng = crate::seeded_rng(11);
        let draws = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[mdp.step(2, 1, &mut rng).unwrap().0] += 1;
        }
        for (k, &p) in mdp.transition_row(2, 1).iter().enumerate() {
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            let dev = (counts[k] as f64 - draws as f64 * p).abs();
            assert!(dev < 3.0 * sigma + 1.0, "next state {k}: {dev} vs 3σ={}", 3.0 * sigma);
        }
    }

    #[test]
    fn geometric_series_value() {
        let mdp = tiny(1.0, 0.9);
        let v = exact_state_values(&mdp, &JointPolicy::uniform(&mdp)).unwrap();
        assert!((v[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn zero_discount_value_is_expected_reward() {
        let mdp = Mdp::generate_random(2, 3, &[2, 2], 0.0).unwrap();
        let policy = JointPolicy::random(&mdp, &mut crate::seeded_rng(1));
        let v = exact_state_values(&mdp, &policy).unwrap();
        for s in 0..3 {
            let expected: f64 = (0..4).map(|a| policy.joint_prob(&mdp, s, a) * mdp.reward(s, a)).sum();
            assert!((v[s] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn local_q_averages_to_state_value() {
        let mdp = Mdp::generate_random(4, 5, &[2, 3, 2], 0.9).unwrap();
        let policy = JointPolicy::random(&mdp, &mut crate::seeded_rng(2));
        let v = exact_state_values(&mdp, &policy).unwrap();
        for agent in 0..3 {
            let q = exact_local_q(&mdp, &policy, agent).unwrap();
            let n = mdp.action_sizes()[agent];
            for s in 0..5 {
                let avg: f64 = (0..n).map(|a| policy.prob(agent, s, a) * q[s * n + a]).sum();
                assert!((avg - v[s]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_agent_local_q_is_classical_q() {
        let mdp = Mdp::generate_random(6, 4, &[3], 0.8).unwrap();
        let policy = JointPolicy::random(&mdp, &mut crate::seeded_rng(3));
        let q = exact_local_q(&mdp, &policy, 0).unwrap();
        let v = exact_state_values(&mdp, &policy).unwrap();
        let classical = joint_action_values(&mdp, &v);
        for (a, b) in q.iter().zip(&classical) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn local_q_is_fixed_point_of_bellman_operator() {
        let mdp = Mdp::generate_random(8, 6, &[2, 2], 0.95).unwrap();
        let policy = JointPolicy::random(&mdp, &mut crate::seeded_rng(4));
        for agent in 0..2 {
            let q = exact_local_q(&mdp, &policy, agent).unwrap();
            let hq = local_bellman_operator(&mdp, &policy, agent, &q).unwrap();
            let residual = q.iter().zip(&hq).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(residual < 1e-9, "residual {residual}");
        }
    }

    #[test]
    fn finite_horizon_matches_discounted_limit_for_one_state() {
        let mdp = tiny(2.0, 0.5);
        let r = finite_horizon_return(&mdp, &JointPolicy::uniform(&mdp), &[1.0], 100).unwrap();
        assert!((r - 200.0).abs() < 1e-9);
    }

    #[test]
    fn json_round_trip_keeps_everything() {
        let mdp = Mdp::generate_random(12, 3, &[2, 2], 0.9).unwrap();
        let back = Mdp::from_json(&mdp.to_json().unwrap()).unwrap();
        assert_eq!(back, mdp);
        assert_eq!(back.seed(), Some(12));
        assert!(Mdp::from_json(r#"{"format":"other"}"#).is_err());
    }

    #[test]
    fn policy_validation() {
        let mdp = Mdp::generate_random(0, 2, &[2], 0.5).unwrap();
        assert!(JointPolicy::new(2, vec![vec![0.5, 0.5, 1.0, 0.0]], vec![2]).is_err());
        assert!(JointPolicy::with_deterministic_rows(2, vec![vec![0.5, 0.5, 1.0, 0.0]], vec![2]).is_ok());
        assert!(JointPolicy::new(2, vec![vec![0.5, 0.6, 0.5, 0.5]], vec![2]).is_err());
        let wrong = JointPolicy::new(1, vec![vec![1.0]], vec![1]).unwrap();
        assert!(exact_state_values(&mdp, &wrong).is_err());
    }
}
