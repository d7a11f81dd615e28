//! Prune → re-lower → act episodes under a FLOPs budget, and the search loop
//! that trains the agent on them.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use topoprune_numerics::rng;

use crate::agent::{Agent, Transition};
use crate::error::{Error, Result};
use crate::hgraph::{lower, HierGraph};
use crate::ir::{
    apply_policy, count_flops, strategy_ratios, ModelIR, PruningPolicy, DEFAULT_A_MAX,
};
use crate::oracle::{evaluate, fit, Dataset, Split, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Largest admissible preserved-FLOPs ratio.
    pub flops_target: f64,
    pub max_steps: usize,
    pub warmup_episodes: usize,
    pub exploit_episodes: usize,
    /// Fine-tuning epochs before each reward evaluation (pruned layers only).
    pub fine_tune_epochs_per_reward: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            flops_target: 0.5,
            max_steps: 5,
            warmup_episodes: 30,
            exploit_episodes: 150,
            fine_tune_epochs_per_reward: 0,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.flops_target > 0.0 && self.flops_target < 1.0) {
            return Err(Error::Config(format!(
                "flops target {} must lie in (0, 1)",
                self.flops_target
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn episodes(&self) -> usize {
        self.warmup_episodes + self.exploit_episodes
    }
}

/// Accuracy evaluator used for the terminal reward.
pub trait AccuracyOracle {
    fn accuracy(&self, m: &ModelIR) -> Result<f64>;
}

/// Validation-split Top-1 accuracy, optionally after a short fine-tune of the
/// pruned layers.
#[derive(Debug, Clone)]
pub struct ValidationOracle<'d> {
    pub data: &'d Dataset,
    pub fine_tune: Option<TrainConfig>,
}

impl<'d> ValidationOracle<'d> {
    pub fn new(data: &'d Dataset) -> Self {
        Self {
            data,
            fine_tune: None,
        }
    }

    /// Fine-tunes for `epochs` (pruned layers only) before scoring.
    pub fn with_fine_tune(mut self, epochs: usize, seed: u64) -> Self {
        self.fine_tune = (epochs > 0).then(|| TrainConfig {
            epochs,
            seed,
            freeze_unpruned: true,
            ..TrainConfig::default()
        });
        self
    }
}

impl AccuracyOracle for ValidationOracle<'_> {
    fn accuracy(&self, m: &ModelIR) -> Result<f64> {
        match &self.fine_tune {
            Some(cfg) => evaluate(&fit(m, self.data, cfg)?.0, self.data, Split::Validation),
            None => evaluate(m, self.data, Split::Validation),
        }
    }
}

impl<F: Fn(&ModelIR) -> Result<f64>> AccuracyOracle for F {
    fn accuracy(&self, m: &ModelIR) -> Result<f64> {
        self(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ConstraintMet,
    MaxSteps,
}

impl Termination {
    pub fn name(self) -> &'static str {
        match self {
            Termination::ConstraintMet => "constraint_met",
            Termination::MaxSteps => "max_steps",
        }
    }
}

/// How an episode chose its actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeMode {
    Warmup,
    Exploit,
    Random,
}

impl EpisodeMode {
    pub fn name(self) -> &'static str {
        match self {
            EpisodeMode::Warmup => "warmup",
            EpisodeMode::Exploit => "exploit",
            EpisodeMode::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Raw per-slot agent outputs.
    pub action: Vec<f64>,
    pub policy: PruningPolicy,
    pub flops_ratio_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub episode: usize,
    pub mode: EpisodeMode,
    pub steps: Vec<StepRecord>,
    /// Preserved FLOPs of the final model relative to the original.
    pub flops_ratio: f64,
    /// Validation accuracy of the final model; absent when the budget was
    /// never met.
    pub final_accuracy: Option<f64>,
    pub reward: f64,
    pub terminated_by: Termination,
}

/// A finished episode with its final model and replay transitions.
#[derive(Debug, Clone)]
pub struct Episode {
    pub report: EpisodeReport,
    pub model: ModelIR,
    pub transitions: Vec<Transition>,
}

/// The unpruned model with its cached FLOPs total and lowered state.
#[derive(Debug, Clone)]
pub struct Origin {
    pub model: ModelIR,
    pub flops: u64,
    pub state: Arc<HierGraph>,
}

impl Origin {
    pub fn new(model: ModelIR) -> Result<Self> {
        let flops = count_flops(&model).total;
        if flops == 0 {
            return Err(Error::Config("model has no FLOPs to prune".into()));
        }
        if model.num_slots() == 0 {
            return Err(Error::Config("model has no prunable slots".into()));
        }
        let state = Arc::new(lower(&model)?);
        Ok(Self {
            model,
            flops,
            state,
        })
    }

    pub fn ratio(&self, m: &ModelIR) -> f64 {
        count_flops(m).total as f64 / self.flops as f64
    }
}

/// Runs one episode from the original model. `act` maps a state to one
/// ratio per slot.
pub fn run_episode<F>(
    origin: &Origin,
    oracle: &dyn AccuracyOracle,
    cfg: &EnvConfig,
    episode: usize,
    mode: EpisodeMode,
    mut act: F,
) -> Result<Episode>
where
    F: FnMut(&Arc<HierGraph>) -> Result<Vec<f64>>,
{
    let mut m = origin.model.clone();
    let mut state = origin.state.clone();
    let mut ratio = 1.0;
    let mut steps = Vec::new();
    let mut transitions: Vec<Transition> = Vec::new();
    let terminated_by = loop {
        if ratio <= cfg.flops_target {
            break Termination::ConstraintMet;
        }
        if steps.len() == cfg.max_steps {
            break Termination::MaxSteps;
        }
        let action = act(&state)?;
        let policy = strategy_ratios(&m, &action)?;
        let next = apply_policy(&m, &policy)?;
        ratio = origin.ratio(&next);
        let next_state = Arc::new(lower(&next)?);
        transitions.push(Transition {
            state: state.clone(),
            action: action.clone(),
            reward: 0.0,
            next_state: Some(next_state.clone()),
            done: false,
        });
        steps.push(StepRecord {
            action,
            policy,
            flops_ratio_after: ratio,
        });
        m = next;
        state = next_state;
    };
    let (final_accuracy, reward) = match terminated_by {
        Termination::ConstraintMet => {
            let acc = oracle.accuracy(&m)?;
            (Some(acc), acc - 1.0)
        }
        Termination::MaxSteps => (None, -1.0),
    };
    if let Some(last) = transitions.last_mut() {
        last.reward = reward;
        last.done = true;
        last.next_state = None;
    }
    Ok(Episode {
        report: EpisodeReport {
            episode,
            mode,
            steps,
            flops_ratio: ratio,
            final_accuracy,
            reward,
            terminated_by,
        },
        model: m,
        transitions,
    })
}

/// Best constraint-satisfying model of a search.
#[derive(Debug, Clone)]
pub struct BestModel {
    pub episode: usize,
    pub reward: f64,
    pub flops_ratio: f64,
    /// Policies applied in order, starting from the original model.
    pub policies: Vec<PruningPolicy>,
    pub model: ModelIR,
}

#[derive(Debug, Clone, Default)]
pub struct SearchOutcome {
    pub best: Option<BestModel>,
    pub history: Vec<EpisodeReport>,
}

impl SearchOutcome {
    fn record(&mut self, ep: Episode) {
        let r = &ep.report;
        let better = r.terminated_by == Termination::ConstraintMet
            && self.best.as_ref().map_or(true, |b| r.reward > b.reward);
        if better {
            self.best = Some(BestModel {
                episode: r.episode,
                reward: r.reward,
                flops_ratio: r.flops_ratio,
                policies: r.steps.iter().map(|s| s.policy.clone()).collect(),
                model: ep.model,
            });
        }
        self.history.push(ep.report);
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.reward).collect()
    }
}

/// Warm-up then exploit episodes, updating the agent after every
/// post-warm-up episode. `on_episode` sees each report as it completes.
pub fn train(
    origin: &Origin,
    agent: &mut Agent,
    oracle: &dyn AccuracyOracle,
    cfg: &EnvConfig,
    on_episode: &mut dyn FnMut(&EpisodeReport) -> Result<()>,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    if agent.n_slots() != origin.model.num_slots() {
        return Err(Error::SlotMismatch {
            expected: origin.model.num_slots(),
            got: agent.n_slots(),
        });
    }
    let mut out = SearchOutcome::default();
    for ep in 0..cfg.episodes() {
        agent.begin_episode(ep);
        let mode = if ep < cfg.warmup_episodes {
            EpisodeMode::Warmup
        } else {
            EpisodeMode::Exploit
        };
        let episode = run_episode(origin, oracle, cfg, ep, mode, |s| agent.scheduled_action(s))?;
        for t in &episode.transitions {
            agent.remember(t.clone())?;
        }
        if ep >= cfg.warmup_episodes {
            agent.train_step()?;
        }
        on_episode(&episode.report)?;
        out.record(episode);
    }
    Ok(out)
}

/// Baseline search: every episode draws uniform ratios in `[0, a_max]`.
pub fn random_search(
    origin: &Origin,
    oracle: &dyn AccuracyOracle,
    cfg: &EnvConfig,
    episodes: usize,
    on_episode: &mut dyn FnMut(&EpisodeReport) -> Result<()>,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, 50);
    let n = origin.model.num_slots();
    let mut out = SearchOutcome::default();
    for ep in 0..episodes {
        let episode = run_episode(origin, oracle, cfg, ep, EpisodeMode::Random, |_| {
            Ok((0..n).map(|_| r.gen_range(0.0..=DEFAULT_A_MAX)).collect())
        })?;
        on_episode(&episode.report)?;
        out.record(episode);
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `episode,mode,steps,terminated_by,flops_ratio,accuracy,reward`.
pub fn history_csv(history: &[EpisodeReport]) -> String {
    let mut out = String::from("episode,mode,steps,terminated_by,flops_ratio,accuracy,reward\n");
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.episode,
            r.mode.name(),
            r.steps.len(),
            r.terminated_by.name(),
            r.flops_ratio,
            opt(r.final_accuracy),
            r.reward
        );
    }
    out
}

/// `step,layer,ratio` rows of a policy chain.
pub fn policy_chain_csv(policies: &[PruningPolicy]) -> String {
    let mut out = String::from("step,layer,ratio\n");
    for (k, p) in policies.iter().enumerate() {
        for (id, a) in &p.ratios {
            let _ = writeln!(out, "{k},{id},{a}");
        }
    }
    out
}
