mod common;

use std::sync::Arc;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use topoprune::agent::{Agent, AgentConfig, Exploration, NoiseSchedule, ReplayBuffer, Transition};
use topoprune::hgraph::{lower, HierGraph};
use topoprune::ir::{apply_policy, PruningPolicy, DEFAULT_A_MAX};
use topoprune::mgnn::MgnnConfig;
use topoprune::Error;
use topoprune_numerics::{gradcheck, rng, NumericsError, ParamStore, Tape, Tensor};

fn state(name: &str) -> Arc<HierGraph> {
    Arc::new(lower(&fixture(name)).unwrap())
}

fn pruned_state(name: &str, a: f64) -> Arc<HierGraph> {
    let m = fixture(name);
    let p = PruningPolicy::uniform(&m, a, DEFAULT_A_MAX);
    Arc::new(lower(&apply_policy(&m, &p).unwrap()).unwrap())
}

fn transition(s: &Arc<HierGraph>, action: Vec<f64>, reward: f64) -> Transition {
    Transition {
        state: s.clone(),
        action,
        reward,
        next_state: None,
        done: true,
    }
}

fn small_config() -> AgentConfig {
    AgentConfig {
        encoder: MgnnConfig {
            hidden: 5,
            rounds: 2,
            ..MgnnConfig::default()
        },
        head_hidden: 4,
        critic_hidden: 3,
        batch_size: 4,
        buffer_capacity: 16,
        ..AgentConfig::default()
    }
}

fn as_numerics(e: Error) -> NumericsError {
    NumericsError::Shape(e.to_string())
}

#[test]
fn buffer_evicts_oldest_at_capacity() {
    let s = state("plain_cnn");
    let mut buf = ReplayBuffer::new(2000);
    for i in 0..2001 {
        buf.push(transition(&s, vec![0.0], i as f64));
    }
    assert_eq!(buf.len(), 2000);
    assert_eq!(buf.get(0).reward, 1.0);
    assert_eq!(buf.get(1999).reward, 2000.0);
    assert_eq!(buf.total_inserted(), 2001);
}

#[test]
fn exhaustive_sample_returns_every_entry() {
    let s = state("plain_cnn");
    let mut buf = ReplayBuffer::new(2000);
    for i in 0..64 {
        buf.push(transition(&s, vec![0.0], i as f64));
    }
    let mut idx = buf.sample(64, &mut rng::seeded(3)).unwrap();
    idx.sort_unstable();
    assert_eq!(idx, (0..64).collect::<Vec<_>>());
}

#[test]
fn short_buffer_refuses_to_sample() {
    let s = state("plain_cnn");
    let mut buf = ReplayBuffer::new(2000);
    for _ in 0..63 {
        buf.push(transition(&s, vec![0.0], 0.0));
    }
    let err = buf.sample(64, &mut rng::seeded(0)).unwrap_err();
    assert!(matches!(
        err,
        Error::InsufficientBuffer { have: 63, need: 64 }
    ));
}

#[test]
fn sampling_is_reproducible_per_seed() {
    let s = state("plain_cnn");
    let mut buf = ReplayBuffer::new(100);
    for i in 0..100 {
        buf.push(transition(&s, vec![0.0], i as f64));
    }
    let draw = |seed| {
        let mut r = rng::stream(seed, 4);
        (0..5)
            .map(|_| buf.sample(10, &mut r).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(7), draw(7));
    assert_ne!(draw(7), draw(8));
}

#[test]
fn zeroed_head_outputs_half_of_a_max() {
    let s = state("resnet_toy");
    let mut agent = Agent::new(AgentConfig::default(), 4, 1).unwrap();
    for (name, t) in agent.actor_params.iter_mut() {
        if name.starts_with("head.") {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let a = agent.act(&s, false).unwrap();
    assert_eq!(a, vec![0.4; 4]);
}

#[test]
fn deterministic_policy_repeats() {
    let s = state("shuffle");
    let mut agent = Agent::new(AgentConfig::default(), 3, 9).unwrap();
    let a = agent.act(&s, false).unwrap();
    let b = agent.act(&s, false).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
}

#[test]
fn same_seed_builds_same_agent() {
    let s = state("mobile_v1");
    let a = Agent::new(AgentConfig::default(), 3, 5)
        .unwrap()
        .act(&s, false)
        .unwrap();
    let b = Agent::new(AgentConfig::default(), 3, 5)
        .unwrap()
        .act(&s, false)
        .unwrap();
    let c = Agent::new(AgentConfig::default(), 3, 6)
        .unwrap()
        .act(&s, false)
        .unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn huge_noise_is_clamped() {
    let s = state("plain_cnn");
    let mut agent = Agent::new(AgentConfig::default(), 3, 2).unwrap();
    let mut hit_lo = false;
    let mut hit_hi = false;
    for _ in 0..200 {
        let mut a = agent.act(&s, false).unwrap();
        agent.perturb(&mut a, 1e6);
        assert!(a.iter().all(|x| (0.0..=0.8).contains(x)));
        hit_lo |= a.contains(&0.0);
        hit_hi |= a.contains(&0.8);
    }
    assert!(hit_lo && hit_hi);
}

#[test]
fn actions_stay_in_bounds_under_fuzzing() {
    let s = state("resnet_toy");
    let mut agent = Agent::new(AgentConfig::default(), 4, 11).unwrap();
    let mut r = rng::seeded(12);
    let mut calls = 0;
    for round in 0..100 {
        let scale = r.gen_range(-50.0..50.0);
        for (name, t) in agent.actor_params.iter_mut() {
            if name == "head.l1.b" {
                t.data_mut().iter_mut().for_each(|x| *x = scale);
            }
        }
        agent.begin_episode(round * 3);
        let base = agent.act(&s, false).unwrap();
        for _ in 0..1000 {
            let mut a = base.clone();
            let sigma = 10f64.powf(r.gen_range(-4.0..4.0));
            agent.perturb(&mut a, sigma);
            assert!(a.iter().all(|x| (0.0..=0.8).contains(x)), "{a:?}");
            calls += 1;
        }
        let a = agent.scheduled_action(&s).unwrap();
        assert!(a.iter().all(|x| (0.0..=0.8).contains(x)));
    }
    assert_eq!(calls, 100_000);
}

#[test]
fn soft_update_moves_target_by_tau() {
    let agent = Agent::new(AgentConfig::default(), 2, 0).unwrap();
    let mut online = ParamStore::new();
    online.insert("w", Tensor::ones(&[3]));
    let mut target = ParamStore::new();
    target.insert("w", Tensor::zeros(&[3]));
    target.soft_update_from(&online, agent.config.tau).unwrap();
    assert_eq!(target.get("w").unwrap().data(), &[0.01; 3]);
}

#[test]
fn one_update_blends_targets_exactly() {
    let s = state("plain_cnn");
    let s2 = pruned_state("plain_cnn", 0.3);
    let mut agent = Agent::new(small_config(), 2, 4).unwrap();
    for i in 0..8 {
        let mut t = transition(&s, vec![0.1 * (i % 5) as f64, 0.3], -0.1 * i as f64);
        if i % 2 == 0 {
            t.next_state = Some(s2.clone());
            t.done = false;
        }
        agent.remember(t).unwrap();
    }
    let actor_old = agent.actor_target.clone();
    let critic_old = agent.critic_target.clone();
    agent.update().unwrap();
    let tau = agent.config.tau;
    for (old, online, new) in [
        (&actor_old, &agent.actor_params, &agent.actor_target),
        (&critic_old, &agent.critic_params, &agent.critic_target),
    ] {
        for (name, t_old) in old.iter() {
            let th = online.get(name).unwrap().data();
            let t_new = new.get(name).unwrap().data();
            for k in 0..t_old.numel() {
                let expect = (1.0 - tau) * t_old.data()[k] + tau * th[k];
                assert_eq!(t_new[k], expect, "{name}[{k}]");
                let moved = (t_new[k] - t_old.data()[k]).abs();
                assert!(moved <= tau * (th[k] - t_old.data()[k]).abs() + 1e-15);
            }
        }
    }
}

#[test]
fn zero_rewards_give_zero_targets() {
    let s = state("plain_cnn");
    let mut agent = Agent::new(AgentConfig::default(), 3, 1).unwrap();
    let batch: Vec<Transition> = (0..6).map(|_| transition(&s, vec![0.2; 3], 0.0)).collect();
    let refs: Vec<&Transition> = batch.iter().collect();
    agent.remember(batch[0].clone()).unwrap();
    assert_eq!(agent.critic_targets(&refs).unwrap(), vec![0.0; 6]);

    let mut cfg = AgentConfig::default();
    cfg.gamma = 0.0;
    let mut agent = Agent::new(cfg, 3, 1).unwrap();
    let live: Vec<Transition> = (0..6)
        .map(|_| Transition {
            next_state: Some(s.clone()),
            done: false,
            ..transition(&s, vec![0.2; 3], 0.0)
        })
        .collect();
    agent.remember(live[0].clone()).unwrap();
    let refs: Vec<&Transition> = live.iter().collect();
    assert_eq!(agent.critic_targets(&refs).unwrap(), vec![0.0; 6]);
}

#[test]
fn bootstrapped_targets_match_target_networks() {
    let s = state("resnet_toy");
    let s2 = pruned_state("resnet_toy", 0.5);
    let mut agent = Agent::new(small_config(), 3, 8).unwrap();
    let t = Transition {
        next_state: Some(s2.clone()),
        done: false,
        ..transition(&s, vec![0.2; 3], -0.25)
    };
    agent.remember(t.clone()).unwrap();
    let y = agent.critic_targets(&[&t]).unwrap()[0];

    let tape = Tape::new();
    let ab = agent.actor_target.bind_frozen(&tape);
    let cb = agent.critic_target.bind_frozen(&tape);
    let a = agent.actor.forward(&tape, &ab, &[&s2]).unwrap();
    let q = agent
        .critic
        .forward(&tape, &cb, &[&s2], a)
        .unwrap()
        .scalar();
    assert!((y - (-0.25 + q)).abs() < 1e-12);
}

#[test]
fn update_needs_a_full_batch() {
    let s = state("plain_cnn");
    let mut agent = Agent::new(small_config(), 2, 0).unwrap();
    for _ in 0..3 {
        agent.remember(transition(&s, vec![0.1, 0.1], 0.0)).unwrap();
    }
    assert!(matches!(
        agent.update(),
        Err(Error::InsufficientBuffer { have: 3, need: 4 })
    ));
    assert!(agent.train_step().unwrap().is_none());
}

#[test]
fn wrong_action_length_is_rejected() {
    let s = state("plain_cnn");
    let mut agent = Agent::new(AgentConfig::default(), 3, 0).unwrap();
    let err = agent
        .remember(transition(&s, vec![0.1; 2], 0.0))
        .unwrap_err();
    assert!(matches!(
        err,
        Error::SlotMismatch {
            expected: 3,
            got: 2
        }
    ));
}

#[test]
fn exploration_schedule() {
    let agent = Agent::new(AgentConfig::default(), 2, 0).unwrap();
    let s0 = 0.25 * 0.8;
    assert_eq!(agent.warmup_policy(0), Exploration::Random);
    assert_eq!(agent.warmup_policy(29), Exploration::Random);
    assert_eq!(agent.warmup_policy(30), Exploration::Noisy { sigma: s0 });
    let Exploration::Noisy { sigma } = agent.warmup_policy(179) else {
        panic!("episode 179 explores with noise");
    };
    let expect = (0..149).fold(s0, |acc, _| acc * 0.97);
    assert!((sigma - expect).abs() < 1e-15, "{sigma} vs {expect}");
    let sched = NoiseSchedule {
        sigma0: s0,
        decay: 0.97,
    };
    for t in 0..500 {
        assert!(sched.sigma(t + 1) < sched.sigma(t) && sched.sigma(t + 1) > 0.0);
    }
}

#[test]
fn warmup_actions_are_random_and_bounded() {
    let s = state("plain_cnn");
    let mut agent = Agent::new(AgentConfig::default(), 3, 3).unwrap();
    agent.begin_episode(0);
    let a = agent.scheduled_action(&s).unwrap();
    let b = agent.scheduled_action(&s).unwrap();
    assert_ne!(a, b);
    assert!(a.iter().chain(&b).all(|x| (0.0..=0.8).contains(x)));
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        AgentConfig {
            a_max: 1.0,
            ..Default::default()
        },
        AgentConfig {
            tau: 0.0,
            ..Default::default()
        },
        AgentConfig {
            batch_size: 0,
            ..Default::default()
        },
        AgentConfig {
            buffer_capacity: 10,
            ..Default::default()
        },
        AgentConfig {
            sigma_decay: 1.5,
            ..Default::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(Agent::new(cfg, 2, 0), Err(Error::Config(_))));
    }
    assert!(matches!(
        Agent::new(AgentConfig::default(), 0, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn actor_gradients_match_finite_differences() {
    for (seed, fx) in [(0, "plain_cnn"), (1, "resnet_toy"), (2, "fig1")] {
        let s = state(fx);
        let mut agent = Agent::new(small_config(), 3, seed).unwrap();
        agent.act(&s, false).unwrap();
        let mix = Tensor::from_slice(&[1, 3], &[0.7, -1.3, 0.4]).unwrap();
        let actor = agent.actor.clone();
        let report = gradcheck::check_params(&agent.actor_params, 1e-5, |tape, b| {
            let a = actor.forward(tape, b, &[&s]).map_err(as_numerics)?;
            a.mul(tape.constant(mix.clone()))?.sum()
        })
        .unwrap();
        assert_gradients_agree(&report, &format!("seed {seed}"));
    }
}

#[test]
fn critic_gradients_match_finite_differences() {
    for (seed, fx) in [(3, "plain_cnn"), (4, "shuffle"), (5, "motif_reuse")] {
        let s = state(fx);
        let s2 = pruned_state(fx, 0.4);
        let mut agent = Agent::new(small_config(), 2, seed).unwrap();
        agent.remember(transition(&s, vec![0.0; 2], 0.0)).unwrap();
        agent.remember(transition(&s2, vec![0.0; 2], 0.0)).unwrap();
        let actions = Tensor::from_slice(&[2, 2], &[0.1, 0.7, 0.5, 0.2]).unwrap();
        let critic = agent.critic.clone();
        let report = gradcheck::check_params(&agent.critic_params, 1e-5, |tape, b| {
            let q = critic
                .forward(tape, b, &[&s, &s2], tape.input(&actions))
                .map_err(as_numerics)?;
            q.mul(tape.constant(Tensor::from_slice(&[2, 1], &[1.0, -0.6]).unwrap()))?
                .sum()
        })
        .unwrap();
        assert_gradients_agree(&report, &format!("seed {seed}"));
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("agent.bin");
    let s = state("resnet_toy");
    let mut agent = Agent::new(small_config(), 4, 21).unwrap();
    for i in 0..5 {
        agent
            .remember(transition(&s, vec![0.1 * i as f64; 4], -0.2))
            .unwrap();
    }
    agent.update().unwrap();
    agent.begin_episode(42);
    agent.save_checkpoint(&path).unwrap();

    let mut back = Agent::load_checkpoint(&path).unwrap();
    assert_eq!(back.meta().episode, 42);
    assert_eq!(back.updates(), 1);
    assert_eq!(agent.meta().buffer_len, 5);
    assert!((agent.meta().buffer_mean_reward + 0.2).abs() < 1e-12);
    let a = agent.act(&s, false).unwrap();
    let b = back.act(&s, false).unwrap();
    assert!(linf(&a, &b) < 1e-5, "{a:?} vs {b:?}");
}

#[test]
fn bandit_policy_converges_for_three_seeds() {
    for seed in 0..3 {
        let mu = run_bandit(bandit_config(), seed, 200);
        let err = linf(&mu, &BANDIT_TARGET);
        assert!(err < 0.05, "seed {seed}: mu = {mu:?}, err {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn policy_output_is_bounded(seed in 0u64..1000, shift in -30.0f64..30.0) {
        let s = state("plain_cnn");
        let mut agent = Agent::new(small_config(), 3, seed).unwrap();
        agent.actor_params.get_mut("head.l1.b").unwrap().data_mut().iter_mut().for_each(|x| *x += shift);
        let a = agent.act(&s, true).unwrap();
        prop_assert!(a.iter().all(|x| (0.0..=0.8).contains(x)));
    }
}
