use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use topoprune::agent::AgentConfig;
use topoprune::environment::EnvConfig;
use topoprune::oracle::TrainConfig;
use topoprune::{Error, Result};

/// Every knob a command reads. Loaded from an optional JSON file, then
/// overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Fraction of the test part held out for validation.
    pub val_fraction: f64,
    /// Seeds the validation carve-out, independently of `--seed`.
    pub split_seed: u64,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    /// Baseline training.
    pub train: TrainConfig,
    /// Post-search fine-tuning.
    pub fine_tune: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: None,
            weights: None,
            dataset: None,
            out: None,
            val_fraction: 0.1,
            split_seed: 0,
            env: EnvConfig::default(),
            agent: AgentConfig::default(),
            train: TrainConfig::default(),
            fine_tune: TrainConfig {
                freeze_unpruned: true,
                ..TrainConfig::default()
            },
        }
    }
}

/// Flag values shared by the commands; `None` leaves the file or default value.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// JSON run configuration; flags take precedence over its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model IR (JSON).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Weight sidecar (`.bin`, manifest alongside as `.json`).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Dataset directory with IDX or CSV train/test parts.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub flops_target: Option<f64>,
    #[arg(long)]
    pub episodes_warmup: Option<usize>,
    #[arg(long)]
    pub episodes_exploit: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Seeds the search, the agent and all training runs.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `search`: fine-tuning epochs before each reward. `finetune`: epochs
    /// of the fine-tune itself.
    #[arg(long)]
    pub fine_tune_epochs: Option<usize>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(o: &Overrides) -> Result<Self> {
        let mut c = match &o.config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(c.model, o.model.clone().map(Some));
        set!(c.weights, o.weights.clone().map(Some));
        set!(c.dataset, o.dataset.clone().map(Some));
        set!(c.out, o.out.clone().map(Some));
        set!(c.env.flops_target, o.flops_target);
        set!(c.env.warmup_episodes, o.episodes_warmup);
        set!(c.env.exploit_episodes, o.episodes_exploit);
        set!(c.env.max_steps, o.max_steps);
        if let Some(s) = o.seed {
            c.env.seed = s;
            c.train.seed = s;
            c.fine_tune.seed = s;
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.agent.validate()?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(config_err(format!("val_fraction {} must lie in [0, 1)", self.val_fraction)));
        }
        for (name, p) in [("model", &self.model), ("weights", &self.weights), ("dataset", &self.dataset)] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(config_err(format!("{name} path {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn require<'a>(&self, name: &str, p: &'a Option<PathBuf>) -> Result<&'a Path> {
        p.as_deref().ok_or_else(|| config_err(format!("--{name} is required")))
    }
}
