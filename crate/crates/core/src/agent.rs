//! DDPG actor–critic over hierarchical-graph states.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use topoprune_numerics::io::{self, TensorGroups};
use topoprune_numerics::rng::{self, Rng as Pcg};
use topoprune_numerics::{Bindings, Optimizer, OptimizerConfig, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::hgraph::HierGraph;
use crate::ir::DEFAULT_A_MAX;
use crate::mgnn::{Mgnn, MgnnConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub encoder: MgnnConfig,
    /// Width of the actor head's hidden layer.
    pub head_hidden: usize,
    /// Width of the critic head's hidden layer.
    pub critic_hidden: usize,
    pub a_max: f64,
    pub tau: f64,
    pub gamma: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub warmup_episodes: usize,
    /// Initial exploration noise; `None` means `0.25 · a_max`.
    pub sigma0: Option<f64>,
    pub sigma_decay: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Gradient updates performed per `train_step` call.
    pub updates_per_episode: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            encoder: MgnnConfig::default(),
            head_hidden: 64,
            critic_hidden: 128,
            a_max: DEFAULT_A_MAX,
            tau: 0.01,
            gamma: 1.0,
            buffer_capacity: 2000,
            batch_size: 64,
            warmup_episodes: 30,
            sigma0: None,
            sigma_decay: 0.97,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            updates_per_episode: 8,
        }
    }
}

impl AgentConfig {
    pub fn sigma0(&self) -> f64 {
        self.sigma0.unwrap_or(0.25 * self.a_max)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.a_max > 0.0 && self.a_max < 1.0) {
            return bad("a_max must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("buffer capacity must be at least the batch size (> 0)");
        }
        if !(self.sigma_decay > 0.0 && self.sigma_decay <= 1.0) || self.sigma0() <= 0.0 {
            return bad("noise schedule must be positive and non-increasing");
        }
        if self.actor_lr <= 0.0 || self.critic_lr <= 0.0 {
            return bad("learning rates must be positive");
        }
        if self.head_hidden == 0 || self.critic_hidden == 0 || self.encoder.hidden == 0 {
            return bad("network widths must be positive");
        }
        Ok(())
    }
}

/// `σ_t = σ₀ · δ^t`, with `t` counted from the first exploit episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma0: f64,
    pub decay: f64,
}

impl NoiseSchedule {
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma0 * self.decay.powi(t as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Exploration {
    /// Uniform actions in `[0, a_max]`.
    Random,
    /// Deterministic policy plus Gaussian noise of this scale.
    Noisy { sigma: f64 },
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Arc<HierGraph>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Option<Arc<HierGraph>>,
    pub done: bool,
}

/// FIFO experience store with uniform sampling without replacement.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
            inserted: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total_inserted(&self) -> u64 {
        self.inserted
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` distinct positions drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if n > self.items.len() {
            return Err(Error::InsufficientBuffer {
                have: self.items.len(),
                need: n,
            });
        }
        Ok(index::sample(rng, self.items.len(), n).into_vec())
    }
}

fn init_mlp<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut R) {
    for (k, w) in dims.windows(2).enumerate() {
        store.insert(
            format!("{prefix}l{k}.w"),
            Tensor::fan_in_uniform(&[w[1], w[0]], w[0], rng),
        );
        store.insert(
            format!("{prefix}l{k}.b"),
            Tensor::fan_in_uniform(&[w[1]], w[0], rng),
        );
    }
}

/// Dense layers with relu between them (none after the last).
fn mlp<'t>(b: &Bindings<'t>, prefix: &str, layers: usize, mut x: Var<'t>) -> Result<Var<'t>> {
    for k in 0..layers {
        let w = b.get(&format!("{prefix}l{k}.w"))?;
        let bias = b.get(&format!("{prefix}l{k}.b"))?;
        x = x.linear(w, Some(bias))?;
        if k + 1 < layers {
            x = x.relu()?;
        }
    }
    Ok(x)
}

/// Actor network: encoder → `hidden → head_hidden → N_slots` → `a_max · sigmoid`.
#[derive(Debug, Clone)]
pub struct ActorNet {
    pub encoder: Mgnn,
    pub a_max: f64,
    pub n_slots: usize,
}

impl ActorNet {
    pub fn init<R: Rng + ?Sized>(
        cfg: &AgentConfig,
        n_slots: usize,
        rng: &mut R,
    ) -> (Self, ParamStore) {
        let encoder = Mgnn::new(cfg.encoder, "enc.");
        let mut store = ParamStore::new();
        encoder.init_params(&mut store, rng);
        init_mlp(
            &mut store,
            "head.",
            &[cfg.encoder.hidden, cfg.head_hidden, n_slots],
            rng,
        );
        let net = Self {
            encoder,
            a_max: cfg.a_max,
            n_slots,
        };
        (net, store)
    }

    /// Actions `[B, N_slots]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        b: &Bindings<'t>,
        states: &[&HierGraph],
    ) -> Result<Var<'t>> {
        let g = self.encoder.encode_batch(tape, b, states)?;
        Ok(mlp(b, "head.", 2, g)?.sigmoid()?.scale(self.a_max)?)
    }
}

/// Critic network: separate encoder, MLP over `concat(g, A)` → scalar.
#[derive(Debug, Clone)]
pub struct CriticNet {
    pub encoder: Mgnn,
}

impl CriticNet {
    pub fn init<R: Rng + ?Sized>(
        cfg: &AgentConfig,
        n_slots: usize,
        rng: &mut R,
    ) -> (Self, ParamStore) {
        let encoder = Mgnn::new(cfg.encoder, "enc.");
        let mut store = ParamStore::new();
        encoder.init_params(&mut store, rng);
        init_mlp(
            &mut store,
            "q.",
            &[cfg.encoder.hidden + n_slots, cfg.critic_hidden, 1],
            rng,
        );
        (Self { encoder }, store)
    }

    /// Q-values `[B, 1]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        b: &Bindings<'t>,
        states: &[&HierGraph],
        actions: Var<'t>,
    ) -> Result<Var<'t>> {
        let g = self.encoder.encode_batch(tape, b, states)?;
        mlp(b, "q.", 2, Var::concat(&[g, actions], 1)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
}

/// Schedule and buffer state persisted next to the network weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: AgentConfig,
    pub n_slots: usize,
    pub seed: u64,
    pub episode: usize,
    pub sigma: f64,
    pub updates: u64,
    pub buffer_len: usize,
    pub buffer_inserted: u64,
    pub buffer_mean_reward: f64,
}

pub struct Agent {
    pub config: AgentConfig,
    pub actor: ActorNet,
    pub critic: CriticNet,
    pub actor_params: ParamStore,
    pub critic_params: ParamStore,
    pub actor_target: ParamStore,
    pub critic_target: ParamStore,
    pub buffer: ReplayBuffer,
    pub noise: NoiseSchedule,
    actor_opt: Optimizer,
    critic_opt: Optimizer,
    explore_rng: Pcg,
    replay_rng: Pcg,
    seed: u64,
    episode: usize,
    updates: u64,
}

impl Agent {
    pub fn new(config: AgentConfig, n_slots: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_slots == 0 {
            return Err(Error::Config("the model has no prunable slots".into()));
        }
        let (actor, actor_params) = ActorNet::init(&config, n_slots, &mut rng::stream(seed, 1));
        let (critic, critic_params) = CriticNet::init(&config, n_slots, &mut rng::stream(seed, 2));
        Ok(Self {
            actor_target: actor_params.clone(),
            critic_target: critic_params.clone(),
            actor,
            critic,
            actor_params,
            critic_params,
            buffer: ReplayBuffer::new(config.buffer_capacity),
            noise: NoiseSchedule {
                sigma0: config.sigma0(),
                decay: config.sigma_decay,
            },
            actor_opt: Optimizer::new(OptimizerConfig::adam(config.actor_lr)),
            critic_opt: Optimizer::new(OptimizerConfig::adam(config.critic_lr)),
            explore_rng: rng::stream(seed, 3),
            replay_rng: rng::stream(seed, 4),
            seed,
            episode: 0,
            updates: 0,
            config,
        })
    }

    pub fn n_slots(&self) -> usize {
        self.actor.n_slots
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Exploration mode of episode `episode`.
    pub fn warmup_policy(&self, episode: usize) -> Exploration {
        if episode < self.config.warmup_episodes {
            Exploration::Random
        } else {
            Exploration::Noisy {
                sigma: self.noise.sigma(episode - self.config.warmup_episodes),
            }
        }
    }

    /// Records the current episode index for the noise schedule.
    pub fn begin_episode(&mut self, episode: usize) {
        self.episode = episode;
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    /// Makes pooling vectors available for every graph in `state`.
    fn prepare(&mut self, state: &HierGraph) {
        self.actor.encoder.prepare(&mut self.actor_params, state);
        self.actor.encoder.prepare(&mut self.actor_target, state);
        self.critic.encoder.prepare(&mut self.critic_params, state);
        self.critic.encoder.prepare(&mut self.critic_target, state);
    }

    /// Deterministic policy output `μ(s)`.
    pub fn policy(&mut self, state: &HierGraph) -> Result<Vec<f64>> {
        self.prepare(state);
        let tape = Tape::new();
        let b = self.actor_params.bind_frozen(&tape);
        let a = self.actor.forward(&tape, &b, &[state])?;
        Ok(a.value().data().to_vec())
    }

    /// `μ(s)`, optionally with Gaussian noise at the current episode's scale,
    /// clamped to `[0, a_max]`.
    pub fn act(&mut self, state: &HierGraph, explore: bool) -> Result<Vec<f64>> {
        let mut a = self.policy(state)?;
        if explore {
            let sigma = match self.warmup_policy(self.episode) {
                Exploration::Noisy { sigma } => sigma,
                Exploration::Random => self.noise.sigma0,
            };
            self.perturb(&mut a, sigma);
        }
        Ok(a)
    }

    /// Adds `N(0, σ²)` noise and clamps.
    pub fn perturb(&mut self, a: &mut [f64], sigma: f64) {
        let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
        for x in a.iter_mut() {
            *x = (*x + normal.sample(&mut self.explore_rng)).clamp(0.0, self.config.a_max);
        }
    }

    pub fn random_action(&mut self) -> Vec<f64> {
        let a_max = self.config.a_max;
        (0..self.n_slots())
            .map(|_| self.explore_rng.gen_range(0.0..=a_max))
            .collect()
    }

    /// Action for `state` under the schedule of the current episode.
    pub fn scheduled_action(&mut self, state: &HierGraph) -> Result<Vec<f64>> {
        match self.warmup_policy(self.episode) {
            Exploration::Random => {
                self.prepare(state);
                Ok(self.random_action())
            }
            Exploration::Noisy { sigma } => {
                let mut a = self.policy(state)?;
                self.perturb(&mut a, sigma);
                Ok(a)
            }
        }
    }

    pub fn remember(&mut self, t: Transition) -> Result<()> {
        if t.action.len() != self.n_slots() {
            return Err(Error::SlotMismatch {
                expected: self.n_slots(),
                got: t.action.len(),
            });
        }
        self.prepare(&t.state);
        if let Some(s) = &t.next_state {
            self.prepare(s);
        }
        self.buffer.push(t);
        Ok(())
    }

    /// Critic regression targets `r + γ (1 − done) Q'(s', μ'(s'))`.
    pub fn critic_targets(&self, batch: &[&Transition]) -> Result<Vec<f64>> {
        let mut y: Vec<f64> = batch.iter().map(|t| t.reward).collect();
        let live: Vec<usize> = (0..batch.len())
            .filter(|&i| !batch[i].done && batch[i].next_state.is_some())
            .collect();
        if !live.is_empty() && self.config.gamma != 0.0 {
            let next: Vec<&HierGraph> = live
                .iter()
                .map(|&i| batch[i].next_state.as_deref().unwrap())
                .collect();
            let tape = Tape::new();
            let ab = self.actor_target.bind_frozen(&tape);
            let cb = self.critic_target.bind_frozen(&tape);
            let a = self.actor.forward(&tape, &ab, &next)?;
            let q = self.critic.forward(&tape, &cb, &next, a)?.value();
            for (k, &i) in live.iter().enumerate() {
                y[i] += self.config.gamma * q.data()[k];
            }
        }
        Ok(y)
    }

    /// One DDPG step on a uniformly sampled minibatch.
    pub fn update(&mut self) -> Result<UpdateStats> {
        let n = self.config.batch_size;
        let idx = self.buffer.sample(n, &mut self.replay_rng)?;
        let batch: Vec<&Transition> = idx.iter().map(|&i| self.buffer.get(i)).collect();
        let y = self.critic_targets(&batch)?;
        let states: Vec<&HierGraph> = batch.iter().map(|t| t.state.as_ref()).collect();
        let actions: Vec<f64> = batch
            .iter()
            .flat_map(|t| t.action.iter().copied())
            .collect();
        let k = self.n_slots();

        let critic_loss = {
            let tape = Tape::new();
            let cb = self.critic_params.bind(&tape);
            let a = tape.constant(Tensor::new(vec![n, k], actions)?);
            let q = self.critic.forward(&tape, &cb, &states, a)?;
            let target = tape.constant(Tensor::new(vec![n, 1], y)?);
            let loss = q.mse(target)?;
            let grads = tape.backward(loss)?;
            self.critic_params.absorb(&grads, &cb)?;
            loss.scalar()
        };
        self.critic_opt.step(&mut self.critic_params);

        let actor_loss = {
            let tape = Tape::new();
            let ab = self.actor_params.bind(&tape);
            let cb = self.critic_params.bind_frozen(&tape);
            let a = self.actor.forward(&tape, &ab, &states)?;
            let q = self.critic.forward(&tape, &cb, &states, a)?;
            let loss = q.mean()?.scale(-1.0)?;
            let grads = tape.backward(loss)?;
            self.actor_params.absorb(&grads, &ab)?;
            loss.scalar()
        };
        self.actor_opt.step(&mut self.actor_params);

        self.actor_target
            .soft_update_from(&self.actor_params, self.config.tau)?;
        self.critic_target
            .soft_update_from(&self.critic_params, self.config.tau)?;
        self.updates += 1;
        Ok(UpdateStats {
            critic_loss,
            actor_loss,
        })
    }

    /// Runs the configured number of updates once the buffer holds a batch;
    /// returns the last update's losses.
    pub fn train_step(&mut self) -> Result<Option<UpdateStats>> {
        if self.buffer.len() < self.config.batch_size {
            return Ok(None);
        }
        let mut last = None;
        for _ in 0..self.config.updates_per_episode {
            last = Some(self.update()?);
        }
        Ok(last)
    }

    pub fn meta(&self) -> CheckpointMeta {
        let rewards: Vec<f64> = self.buffer.iter().map(|t| t.reward).collect();
        CheckpointMeta {
            config: self.config.clone(),
            n_slots: self.n_slots(),
            seed: self.seed,
            episode: self.episode,
            sigma: match self.warmup_policy(self.episode) {
                Exploration::Noisy { sigma } => sigma,
                Exploration::Random => self.noise.sigma0,
            },
            updates: self.updates,
            buffer_len: rewards.len(),
            buffer_inserted: self.buffer.total_inserted(),
            buffer_mean_reward: if rewards.is_empty() {
                0.0
            } else {
                rewards.iter().sum::<f64>() / rewards.len() as f64
            },
        }
    }

    /// Writes `<path>` (f32 blob), its tensor manifest, and `<path>.agent.json`.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut groups = TensorGroups::new();
        for (name, store) in [
            ("actor", &self.actor_params),
            ("critic", &self.critic_params),
            ("actor_target", &self.actor_target),
            ("critic_target", &self.critic_target),
        ] {
            let slots: IndexMap<String, Tensor> =
                store.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
            groups.insert(name.to_string(), slots);
        }
        io::save(&groups, path, &io::manifest_path_for(path))?;
        fs::write(
            meta_path(path),
            serde_json::to_string_pretty(&self.meta())? + "\n",
        )?;
        Ok(())
    }

    /// Restores networks and schedule position; the replay buffer starts empty.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(meta_path(path))?)?;
        let mut agent = Agent::new(meta.config.clone(), meta.n_slots, meta.seed)?;
        let groups = io::load(path, &io::manifest_path_for(path))?;
        for (name, store) in [
            ("actor", &mut agent.actor_params),
            ("critic", &mut agent.critic_params),
            ("actor_target", &mut agent.actor_target),
            ("critic_target", &mut agent.critic_target),
        ] {
            let slots = groups
                .get(name)
                .ok_or_else(|| Error::Weights(format!("checkpoint lacks `{name}`")))?;
            *store = ParamStore::new();
            for (k, v) in slots {
                store.insert(k.clone(), v.clone());
            }
        }
        agent.episode = meta.episode;
        agent.updates = meta.updates;
        Ok(agent)
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".agent.json");
    s.into()
}
