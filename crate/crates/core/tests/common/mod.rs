#![allow(dead_code)]

use std::path::PathBuf;

use topoprune::ir::{parse_model, LayerKind, ModelIR, Src};

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(format!("{name}.json"))
}

pub fn fixture(name: &str) -> ModelIR {
    let text = std::fs::read_to_string(fixture_path(name)).expect("fixture exists");
    parse_model(&text).expect("fixture parses")
}

pub const PRUNING_FIXTURES: [&str; 4] = ["plain_cnn", "resnet_toy", "mobile_v1", "shuffle"];

pub const ALL_FIXTURES: [&str; 9] = [
    "single_conv",
    "relu_only",
    "plain_cnn",
    "resnet_toy",
    "mobile_v1",
    "shuffle",
    "fig1",
    "motif_reuse",
    "blobs_cnn",
];

/// Counts multiply-accumulates by walking every output position and every
/// kernel tap (padded taps included), then doubles. Spatial extents are
/// found by sliding the window rather than by formula.
pub fn brute_force_flops(m: &ModelIR) -> Vec<u64> {
    let mut out = Vec::new();
    for (i, l) in m.layers().iter().enumerate() {
        let (c_in, h, w) = match m.inputs_of(i)[0] {
            Src::Input => m.input_shape(),
            Src::Layer(j) => m.layers()[j].out_shape(),
        };
        let mut macs: u64 = 0;
        match l.kind {
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::PointwiseConv2d => {
                let per_group_in = c_in / l.groups;
                let (ph, pw) = (h + 2 * l.padding.0, w + 2 * l.padding.1);
                for _co in 0..l.out_channels {
                    let mut y = 0;
                    while y + l.kernel.0 <= ph {
                        let mut x = 0;
                        while x + l.kernel.1 <= pw {
                            for _ci in 0..per_group_in {
                                for _ki in 0..l.kernel.0 {
                                    for _kj in 0..l.kernel.1 {
                                        macs += 1;
                                    }
                                }
                            }
                            x += l.stride.1;
                        }
                        y += l.stride.0;
                    }
                }
            }
            LayerKind::Dense => {
                for _o in 0..l.out_channels {
                    for _i in 0..c_in * h * w {
                        macs += 1;
                    }
                }
            }
            _ => {}
        }
        out.push(2 * macs);
    }
    out
}

pub const BANDIT_TARGET: [f64; 2] = [0.3, 0.6];

/// Single-state bandit configuration used by the convergence checks.
pub fn bandit_config() -> topoprune::agent::AgentConfig {
    topoprune::agent::AgentConfig {
        a_max: 0.8,
        updates_per_episode: 32,
        batch_size: 32,
        critic_lr: 3e-3,
        ..Default::default()
    }
}

/// Plays `episodes` one-step episodes with reward `-|A - a*|^2` on a fixed
/// state and returns the final deterministic action.
pub fn run_bandit(cfg: topoprune::agent::AgentConfig, seed: u64, episodes: usize) -> Vec<f64> {
    use std::sync::Arc;
    use topoprune::agent::{Agent, Transition};

    let state = Arc::new(topoprune::hgraph::lower(&fixture("plain_cnn")).unwrap());
    let mut agent = Agent::new(cfg, BANDIT_TARGET.len(), seed).unwrap();
    for ep in 0..episodes {
        agent.begin_episode(ep);
        let a = agent.scheduled_action(&state).unwrap();
        let reward = -a
            .iter()
            .zip(BANDIT_TARGET)
            .map(|(x, t)| (x - t).powi(2))
            .sum::<f64>();
        agent
            .remember(Transition {
                state: state.clone(),
                action: a,
                reward,
                next_state: None,
                done: true,
            })
            .unwrap();
        if ep >= agent.config.warmup_episodes {
            agent.train_step().unwrap();
        }
    }
    agent.policy(&state).unwrap()
}

pub fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Asserts every parameter's finite-difference agreement is within `1e-4`,
/// relative to its own gradient norm floored at `1e-3` of the largest one.
pub fn assert_gradients_agree(report: &[topoprune_numerics::gradcheck::ParamCheck], ctx: &str) {
    let top = report
        .iter()
        .map(|c| c.analytic.max(c.numeric))
        .fold(0.0, f64::max);
    for c in report {
        let err = c.relative_error_floored(1e-3 * top);
        assert!(err < 1e-4, "{ctx} {}: {err} ({c:?})", c.name);
    }
}
