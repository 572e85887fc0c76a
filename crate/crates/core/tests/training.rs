use decmarl::approx::{Mlp, Sgd, SquashedGaussianHead};
use decmarl::audit::{AccessAudit, ParamBlock, Phase};
use decmarl::consensus::CommGraph;
use decmarl::continuous::{
    self, actor_gradient_frozen, critic_gradient_frozen, AgentConfig, ContinuousAgent, ContinuousConfig,
};
use decmarl::envs::{spread_reset, spread_step, SpreadConfig};
use decmarl::mdp::Mdp;
use decmarl::replay::ReplayEntry;
use decmarl::seeded_rng;
use decmarl::tabular::{self, TabularConfig};
use rand::Rng;
use rand_distr::StandardNormal;

fn small_continuous(seed: u64) -> ContinuousConfig {
    ContinuousConfig {
        env: SpreadConfig {
            num_agents: 4,
            episode_length: 10,
            ..SpreadConfig::default()
        },
        agent: AgentConfig {
            hidden: vec![8],
            batch_size: 8,
            replay_capacity: 60,
            ..AgentConfig::default()
        },
        steps: 120,
        seed,
        warmup: Some(20),
        ..ContinuousConfig::default()
    }
}

fn phases_per_tick(trace: &[(u64, Phase)]) -> Vec<Vec<Phase>> {
    let ticks = trace.iter().map(|&(t, _)| t).max().map_or(0, |t| t + 1);
    let mut out = vec![Vec::new(); ticks as usize];
    for &(t, p) in trace {
        out[t as usize].push(p);
    }
    out
}

#[test]
fn continuous_agents_read_only_their_own_parameters() {
    let audit = AccessAudit::new();
    let cfg = small_continuous(3);
    continuous::train_spread(&cfg, Some(&audit)).unwrap();
    assert!(audit.cross_agent_reads().is_empty(), "{:?}", audit.cross_agent_reads());
    let reads = audit.reads();
    for agent in 0..4 {
        for block in [ParamBlock::Actor, ParamBlock::Critic, ParamBlock::TargetCritic] {
            assert!(reads.iter().any(|r| r.owner == agent && r.block == block && r.executing == Some(agent)));
        }
    }
    assert!(reads.iter().all(|r| r.executing.is_some()));
}

#[test]
fn continuous_messages_follow_graph_edges() {
    let audit = AccessAudit::new();
    let cfg = small_continuous(4);
    continuous::train_spread(&cfg, Some(&audit)).unwrap();
    let graph = CommGraph::ring(4).unwrap();
    let messages = audit.messages();
    assert!(!messages.is_empty());
    for m in &messages {
        assert!(graph.has_edge(m.from, m.to), "message {} -> {} off the graph", m.from, m.to);
    }
    // one message per directed edge per round on every update tick
    let update_ticks = cfg.steps - (cfg.warmup() as u64 - 1);
    assert_eq!(messages.len() as u64, update_ticks * 8 * cfg.consensus_rounds as u64);
}

#[test]
fn continuous_phases_run_in_order() {
    let audit = AccessAudit::new();
    let cfg = small_continuous(5);
    continuous::train_spread(&cfg, Some(&audit)).unwrap();
    let ticks = phases_per_tick(&audit.trace());
    assert_eq!(ticks.len() as u64, cfg.steps);
    let warm = cfg.warmup() - 1;
    for (t, phases) in ticks.iter().enumerate() {
        if t < warm {
            assert_eq!(phases, &[Phase::Act, Phase::EnvStep, Phase::Store], "tick {t}");
        } else {
            assert_eq!(
                phases,
                &[
                    Phase::Act,
                    Phase::EnvStep,
                    Phase::Store,
                    Phase::Sample,
                    Phase::Evaluate,
                    Phase::Improve,
                    Phase::Consensus,
                    Phase::TargetUpdate
                ],
                "tick {t}"
            );
        }
    }
}

#[test]
fn tabular_agents_read_only_their_own_tables_in_phase_order() {
    let mdp = Mdp::generate_random(1, 4, &[2, 3, 2], 0.9).unwrap();
    let cfg = TabularConfig {
        steps: 500,
        episode_length: 50,
        ..TabularConfig::default()
    };
    let audit = AccessAudit::new();
    let agents = tabular::make_agents(&mdp, &cfg, Some(&audit)).unwrap();
    tabular::train_tabular_with(&mdp, &cfg, agents, Some(&audit)).unwrap();
    assert!(audit.cross_agent_reads().is_empty());
    assert!(audit.messages().is_empty());
    for agent in 0..3 {
        for block in [ParamBlock::QTable, ParamBlock::PolicyTable] {
            assert!(audit.reads().iter().any(|r| r.owner == agent && r.block == block));
        }
    }
    for (t, phases) in phases_per_tick(&audit.trace()).iter().enumerate() {
        assert_eq!(phases, &[Phase::Act, Phase::EnvStep, Phase::Evaluate, Phase::Improve], "tick {t}");
    }
}

#[test]
fn continuous_training_is_deterministic_per_seed() {
    let a = continuous::train_spread(&small_continuous(9), None).unwrap();
    let b = continuous::train_spread(&small_continuous(9), None).unwrap();
    let c = continuous::train_spread(&small_continuous(10), None).unwrap();
    let bits = |run: &continuous::ContinuousRun| -> Vec<u64> {
        run.log
            .episodes
            .iter()
            .flat_map(|e| [e.mean_return, e.critic_loss, e.mean_abs_c, e.final_distance])
            .map(f64::to_bits)
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
    for (x, y) in a.agents.iter().zip(&b.agents) {
        assert_eq!(x.actor().trunk().params(), y.actor().trunk().params());
        assert_eq!(x.critic().params(), y.critic().params());
        assert_eq!(x.buffer(), y.buffer());
    }
}

#[test]
fn tabular_training_is_deterministic_per_seed() {
    let mdp = Mdp::generate_random(2, 5, &[2, 2], 0.9).unwrap();
    let cfg = TabularConfig {
        steps: 3000,
        seed: 4,
        ..TabularConfig::default()
    };
    let a = tabular::train_tabular(&mdp, &cfg).unwrap();
    let b = tabular::train_tabular(&mdp, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn spread_is_symmetric_under_agent_relabeling() {
    let cfg = SpreadConfig::default();
    let mut rng = seeded_rng(21);
    let mut state = spread_reset(3, &mut rng).unwrap();
    for v in state.velocities.iter_mut() {
        *v = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
    }
    let actions: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let perm = [2, 0, 1];
    let mut permuted = state.clone();
    for (k, &p) in perm.iter().enumerate() {
        permuted.positions[k] = state.positions[p];
        permuted.velocities[k] = state.velocities[p];
        permuted.targets[k] = state.targets[p];
    }
    let permuted_actions: Vec<Vec<f64>> = perm.iter().map(|&p| actions[p].clone()).collect();
    let a = spread_step(&cfg, &state, &actions).unwrap();
    let b = spread_step(&cfg, &permuted, &permuted_actions).unwrap();
    for (k, &p) in perm.iter().enumerate() {
        assert_eq!(b.agent_rewards[k], a.agent_rewards[p]);
        assert_eq!(b.state.positions[k], a.state.positions[p]);
    }
    assert!((a.reward - b.reward).abs() < 1e-15);
}

#[test]
fn spread_rewards_are_translation_invariant() {
    let cfg = SpreadConfig::default();
    let mut rng = seeded_rng(22);
    for _ in 0..20 {
        let state = spread_reset(3, &mut rng).unwrap();
        let shift = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
        let mut moved = state.clone();
        for p in moved.positions.iter_mut().chain(moved.targets.iter_mut()) {
            p[0] += shift[0];
            p[1] += shift[1];
        }
        let actions: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let a = spread_step(&cfg, &state, &actions).unwrap();
        let b = spread_step(&cfg, &moved, &actions).unwrap();
        for (x, y) in a.agent_rewards.iter().zip(&b.agent_rewards) {
            assert!((x - y).abs() < 1e-12);
        }
        for (p, q) in a.state.positions.iter().zip(&b.state.positions) {
            assert!((p[0] + shift[0] - q[0]).abs() < 1e-12 && (p[1] + shift[1] - q[1]).abs() < 1e-12);
        }
    }
}

#[test]
fn target_critic_trails_geometrically() {
    let cfg = AgentConfig {
        hidden: vec![6],
        target_step: 0.05,
        ..AgentConfig::default()
    };
    let mut agent = ContinuousAgent::new(0, 3, 2, &cfg, 1).unwrap();
    let mut rng = seeded_rng(2);
    let critic: Vec<f64> = agent.critic().params().to_vec();
    let initial: Vec<f64> = critic.iter().map(|c| c + rng.random_range(-1.0..1.0)).collect();
    agent.target_critic_mut().params_mut().copy_from_slice(&initial);
    let steps = 40;
    for _ in 0..steps {
        agent.target_update().unwrap();
    }
    let decay = (1.0 - cfg.target_step).powi(steps);
    for ((t, c), i) in agent.target_critic().params().iter().zip(&critic).zip(&initial) {
        let expected = c + decay * (i - c);
        assert!((t - expected).abs() < 1e-12, "{t} vs {expected}");
    }
}

#[test]
fn actor_ascent_on_increasing_critic_raises_the_mean() {
    let mut rng = seeded_rng(30);
    let mut actor = SquashedGaussianHead::init(2, &[8], 1, &mut rng).unwrap();
    // Q(s, a) = a
    let critic = Mlp::from_params(&[3, 1], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    let states: Vec<Vec<f64>> = (0..16).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let refs: Vec<&[f64]> = states.iter().map(Vec::as_slice).collect();
    let mean_of = |actor: &SquashedGaussianHead| -> f64 {
        refs.iter().map(|s| actor.gaussian(s).unwrap().mean[0]).sum::<f64>() / refs.len() as f64
    };
    let mut opt = Sgd::new(0.01, 0.0);
    let mut prev = mean_of(&actor);
    for step in 0..50 {
        let noise: Vec<Vec<f64>> = (0..refs.len()).map(|_| vec![rng.sample(StandardNormal)]).collect();
        let grad = actor_gradient_frozen(&actor, &critic, &refs, &noise).unwrap();
        opt.ascend(actor.trunk_mut().params_mut(), &grad);
        let now = mean_of(&actor);
        assert!(now > prev, "step {step}: mean {now} after {prev}");
        prev = now;
    }
}

#[test]
fn unweighted_critic_loss_decreases_under_gradient_descent() {
    let mut rng = seeded_rng(40);
    let sizes = [5, 16, 1];
    let mut critic = Mlp::init(&sizes, &mut rng).unwrap();
    let target = Mlp::init(&sizes, &mut rng).unwrap();
    let entries: Vec<ReplayEntry> = (0..32)
        .map(|t| ReplayEntry {
            timestep: t,
            state: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            action: (0..2).map(|_| rng.random_range(-0.9..0.9)).collect(),
            reward: rng.random_range(-1.0..1.0),
            next_state: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            behavior_logprob: 0.0,
            beta: 0.0,
            beta_prev: 0.0,
            x: 0.0,
            stale: false,
        })
        .collect();
    let batch: Vec<&ReplayEntry> = entries.iter().collect();
    let next: Vec<Vec<f64>> = (0..32).map(|_| vec![rng.random_range(-0.9..0.9), 0.0]).collect();
    // beta = 0 on every entry gives unit weights
    let weights: Vec<f64> = entries.iter().map(|e| decmarl::replay::is_weight(e, 3)).collect();
    assert!(weights.iter().all(|&w| w == 1.0));
    let mut opt = Sgd::new(0.1, 0.0);
    let (_, first) = critic_gradient_frozen(&critic, &target, &batch, &next, &weights, 0.9).unwrap();
    let mut prev = first;
    for step in 0..1000 {
        let (grad, loss) = critic_gradient_frozen(&critic, &target, &batch, &next, &weights, 0.9).unwrap();
        assert!(loss <= prev + 1e-15, "step {step}: loss {loss} after {prev}");
        prev = loss;
        opt.descend(critic.params_mut(), &grad);
    }
    assert!(prev < 0.7 * first, "loss {prev} from {first}");
}
