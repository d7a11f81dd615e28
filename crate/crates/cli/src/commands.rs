use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use topoprune::agent::Agent;
use topoprune::environment::{self, Origin, SearchOutcome, ValidationOracle};
use topoprune::ir::{count_flops, count_params, parse_model, ModelIR};
use topoprune::oracle::data::{self, DirFormat};
use topoprune::oracle::{evaluate, fit, pruned_layers, Dataset, EpochStats, Split};
use topoprune::{Error, Result};
use topoprune_numerics::rng;

use crate::config::RunConfig;

/// RNG stream for weight initialization of untrained models.
const INIT_STREAM: u64 = 60;

/// A command ran but produced no constraint-satisfying model.
#[derive(Debug)]
pub struct SearchFailed {
    pub episodes: usize,
    pub flops_target: f64,
}

pub enum Outcome {
    Done(serde_json::Value),
    SearchFailed(SearchFailed, serde_json::Value),
}

pub fn load_model(path: &Path) -> Result<ModelIR> {
    parse_model(&fs::read_to_string(path)?)
}

fn load_weighted(cfg: &RunConfig) -> Result<ModelIR> {
    let m = load_model(cfg.require("model", &cfg.model)?)?;
    m.load_weights(cfg.require("weights", &cfg.weights)?)
}

fn load_dataset(cfg: &RunConfig, m: &ModelIR) -> Result<Dataset> {
    let dir = cfg.require("dataset", &cfg.dataset)?;
    let (train, test) = data::read_dir(dir, m.input_shape())?;
    let classes = m.output_shape().0;
    Dataset::from_parts(train, test, classes, cfg.val_fraction, cfg.split_seed)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.require("out", &cfg.out)?.to_path_buf();
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Writes to stdout, treating a closed pipe as success.
pub fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct LayerRow {
    id: String,
    kind: &'static str,
    in_channels: usize,
    out_channels: usize,
    flops: u64,
    params: usize,
    prunable: bool,
}

#[derive(Serialize)]
struct Analysis {
    total_flops: u64,
    prunable_flops: u64,
    total_params: usize,
    layers: Vec<LayerRow>,
}

fn analysis(m: &ModelIR) -> Analysis {
    let flops = count_flops(m);
    let params = m.param_counts();
    let layers = m
        .layers()
        .iter()
        .map(|l| LayerRow {
            id: l.id.clone(),
            kind: l.kind.name(),
            in_channels: l.in_channels,
            out_channels: l.out_channels,
            flops: flops.per_layer[&l.id],
            params: params.get(&l.id).copied().unwrap_or(0),
            prunable: l.prunable,
        })
        .collect();
    Analysis {
        total_flops: flops.total,
        prunable_flops: flops.prunable_total,
        total_params: count_params(m),
        layers,
    }
}

fn table(a: &Analysis) -> String {
    let w = a.layers.iter().map(|l| l.id.len()).max().unwrap_or(5).max(5);
    let mut s = format!(
        "{:<w$}  {:<16} {:>6} {:>6} {:>12} {:>9}  prunable\n",
        "layer", "kind", "in", "out", "flops", "params"
    );
    for l in &a.layers {
        s += &format!(
            "{:<w$}  {:<16} {:>6} {:>6} {:>12} {:>9}  {}\n",
            l.id,
            l.kind,
            l.in_channels,
            l.out_channels,
            l.flops,
            l.params,
            if l.prunable { "yes" } else { "no" }
        );
    }
    s += &format!(
        "total flops {} (prunable {}), params {}\n",
        a.total_flops, a.prunable_flops, a.total_params
    );
    s
}

/// Prints the report (table or JSON) and optionally writes `analysis.json`.
pub fn analyze(cfg: &RunConfig, as_json: bool) -> Result<Outcome> {
    let m = load_model(cfg.require("model", &cfg.model)?)?;
    let a = analysis(&m);
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("analysis.json"), &a)?;
    }
    if as_json {
        emit(&(serde_json::to_string_pretty(&a)? + "\n"))?;
    } else {
        emit(&table(&a))?;
    }
    Ok(Outcome::Done(json!({ "total_flops": a.total_flops, "total_params": a.total_params })))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DataKind {
    /// 10-class 16×16 digit glyphs.
    Digits,
    /// 2-class 8×8 blobs.
    Blobs,
}

pub fn gen_data(cfg: &RunConfig, kind: DataKind, n_train: usize, n_test: usize, format: DirFormat) -> Result<Outcome> {
    let dir = out_dir(cfg)?;
    let seed = cfg.env.seed;
    let generate = match kind {
        DataKind::Digits => data::synth_digits,
        DataKind::Blobs => data::blobs,
    };
    // Distinct seeds per part so train and test samples never coincide.
    let train = generate(n_train, 2 * seed);
    let test = generate(n_test, 2 * seed + 1);
    data::write_dir(&dir, &train, &test, format)?;
    Ok(Outcome::Done(json!({ "out": dir, "train": n_train, "test": n_test })))
}

fn split_accuracies(m: &ModelIR, d: &Dataset) -> Result<serde_json::Value> {
    let mut out = serde_json::Map::new();
    for s in [Split::Train, Split::Validation, Split::Test] {
        if !d.split(s).is_empty() {
            out.insert(s.name().into(), json!(evaluate(m, d, s)?));
        }
    }
    Ok(out.into())
}

/// Trains from `--weights` if given, else from a seeded initialization.
pub fn train_baseline(cfg: &RunConfig) -> Result<Outcome> {
    let m = load_model(cfg.require("model", &cfg.model)?)?;
    let m = match &cfg.weights {
        Some(w) => m.load_weights(w)?,
        None => m.init_weights(&mut rng::stream(cfg.train.seed, INIT_STREAM)),
    };
    let d = load_dataset(cfg, &m)?;
    let dir = out_dir(cfg)?;
    let (trained, history) = fit(&m, &d, &cfg.train)?;
    trained.save_weights(&dir.join("baseline.weights.bin"))?;
    fs::write(dir.join("model.json"), trained.to_json())?;
    let report = json!({
        "epochs": cfg.train.epochs,
        "accuracy": split_accuracies(&trained, &d)?,
        "history": history,
    });
    write_json(&dir.join("baseline.json"), &report)?;
    Ok(Outcome::Done(json!({ "accuracy": report["accuracy"], "weights": dir.join("baseline.weights.bin") })))
}

fn write_search_artifacts(dir: &Path, out: &SearchOutcome) -> Result<()> {
    fs::write(dir.join("history.csv"), environment::history_csv(&out.history))?;
    let Some(best) = &out.best else {
        return Ok(());
    };
    fs::write(dir.join("pruned.json"), best.model.to_json())?;
    best.model.save_weights(&dir.join("pruned.weights.bin"))?;
    fs::write(dir.join("policy.csv"), environment::policy_chain_csv(&best.policies))?;
    Ok(())
}

/// Runs the DDPG search (or the random baseline) and writes its artifacts.
pub fn search(cfg: &RunConfig, fine_tune_epochs: Option<usize>, random: bool) -> Result<Outcome> {
    let mut env = cfg.env.clone();
    if let Some(e) = fine_tune_epochs {
        env.fine_tune_epochs_per_reward = e;
    }
    env.validate()?;
    let m = load_weighted(cfg)?;
    let d = load_dataset(cfg, &m)?;
    let dir = out_dir(cfg)?;
    let origin = Origin::new(m)?;
    let oracle = ValidationOracle::new(&d).with_fine_tune(env.fine_tune_epochs_per_reward, env.seed);

    let mut stream = OpenOptions::new().create(true).append(true).open(dir.join("episodes.jsonl"))?;
    let seed = env.seed;
    let mut on_episode = |r: &environment::EpisodeReport| -> Result<()> {
        let mut line = serde_json::to_value(r)?;
        line["seed"] = json!(seed);
        writeln!(stream, "{}", serde_json::to_string(&line)?)?;
        stream.flush()?;
        eprintln!(
            "episode {:>3} {:<7} {:<14} steps {} flops {:.4} reward {:.4}",
            r.episode,
            r.mode.name(),
            r.terminated_by.name(),
            r.steps.len(),
            r.flops_ratio,
            r.reward
        );
        Ok(())
    };
    let out = if random {
        environment::random_search(&origin, &oracle, &env, env.episodes(), &mut on_episode)?
    } else {
        let mut agent = Agent::new(cfg.agent.clone(), origin.model.num_slots(), env.seed)?;
        let out = environment::train(&origin, &mut agent, &oracle, &env, &mut on_episode)?;
        agent.save_checkpoint(&dir.join("agent.bin"))?;
        out
    };
    write_search_artifacts(&dir, &out)?;

    let met = out.history.iter().filter(|r| r.final_accuracy.is_some()).count();
    let Some(best) = &out.best else {
        let summary = json!({ "episodes": out.history.len(), "constraint_met": 0 });
        write_json(&dir.join("summary.json"), &summary)?;
        return Ok(Outcome::SearchFailed(
            SearchFailed { episodes: out.history.len(), flops_target: env.flops_target },
            summary,
        ));
    };
    let summary = json!({
        "episodes": out.history.len(),
        "constraint_met": met,
        "best_episode": best.episode,
        "reward": best.reward,
        "validation_accuracy": 1.0 + best.reward,
        "flops_ratio": best.flops_ratio,
        "flops": { "original": origin.flops, "pruned": count_flops(&best.model).total },
        "params": { "original": count_params(&origin.model), "pruned": count_params(&best.model) },
        "steps": best.policies.len(),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(Outcome::Done(summary))
}

/// Fine-tunes a pruned model; only pruned layers train unless the config
/// turns `freeze_unpruned` off.
pub fn finetune(cfg: &RunConfig, epochs: Option<usize>) -> Result<Outcome> {
    let mut tc = cfg.fine_tune.clone();
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    let m = load_weighted(cfg)?;
    let d = load_dataset(cfg, &m)?;
    let dir = out_dir(cfg)?;
    let before = evaluate(&m, &d, Split::Validation)?;
    let (tuned, history): (ModelIR, Vec<EpochStats>) = fit(&m, &d, &tc)?;
    let after = evaluate(&tuned, &d, Split::Validation)?;
    tuned.save_weights(&dir.join("finetuned.weights.bin"))?;
    let mut trained: Vec<String> = if tc.freeze_unpruned {
        pruned_layers(&m).into_iter().collect()
    } else {
        m.layers().iter().filter(|l| l.kind.has_weights()).map(|l| l.id.clone()).collect()
    };
    trained.sort();
    let report = json!({
        "epochs": tc.epochs,
        "freeze_unpruned": tc.freeze_unpruned,
        "trained_layers": trained,
        "validation_accuracy": { "before": before, "after": after },
        "history": history,
    });
    write_json(&dir.join("finetune.json"), &report)?;
    Ok(Outcome::Done(json!({ "before": before, "after": after })))
}

/// Exit code and machine-readable kind for an error.
pub fn classify(e: &Error) -> (i32, &'static str) {
    match e {
        Error::Divergence(_) => (4, "divergence"),
        Error::Numerics(_) | Error::MissingParams(_) | Error::InsufficientBuffer { .. } => (1, "internal"),
        _ => (2, "config"),
    }
}
