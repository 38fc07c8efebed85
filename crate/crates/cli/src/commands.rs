//! Command implementations; `main` only parses arguments.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cht_core::baselines::{constpn_train, ConstPnScorer, MergedHtScorer};
use cht_core::episodes::sample_task_sequence;
use cht_core::eval::{
    evaluate, export_embeddings, write_metrics_csv, write_plot, ChtScorer, EvalConfig, Evaluation, LogitScorer,
    MetricsTable, Protocol, Scorer,
};
use cht_core::generator::{fingerprint, init_generator, GeneratorState};
use cht_core::learner::{latest_checkpoint, train_with_hook, Objective, TrainOutput};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checks::{self, CheckReport};
use crate::config::{run_root, RunConfig, RESOLVED_CONFIG};
use crate::data::{build_pools, Pools};

/// Which tables an evaluation writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtocolChoice {
    TaskIncremental,
    ClassIncremental,
    Both,
}

impl ProtocolChoice {
    fn protocols(self) -> Vec<Protocol> {
        match self {
            Self::TaskIncremental => vec![Protocol::TaskIncremental],
            Self::ClassIncremental => vec![Protocol::ClassIncremental],
            Self::Both => vec![Protocol::TaskIncremental, Protocol::ClassIncremental],
        }
    }
}

/// Overrides applied on top of the stored configuration at evaluation time.
#[derive(Clone, Debug, Default)]
pub struct EvalOverrides {
    pub tasks: Option<usize>,
    pub seed: Option<u64>,
    pub episodes: Option<usize>,
    pub runs_per_episode: Option<usize>,
}

impl EvalOverrides {
    fn apply(&self, cfg: &EvalConfig) -> EvalConfig {
        EvalConfig {
            tasks: self.tasks.unwrap_or(cfg.tasks),
            seed: self.seed.unwrap_or(cfg.seed),
            episodes: self.episodes.unwrap_or(cfg.episodes),
            runs_per_episode: self.runs_per_episode.unwrap_or(cfg.runs_per_episode),
            ..cfg.clone()
        }
    }
}

fn resolve_run_dir(cfg: &RunConfig, run_dir: Option<&Path>) -> PathBuf {
    run_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_root().join(&cfg.output.name))
}

/// Trains a generator and writes checkpoints, `metrics.csv` and the resolved
/// config into the run directory, which is returned.
pub fn train(config: &Path, overrides: &[String], run_dir: Option<&Path>) -> Result<PathBuf> {
    let cfg = RunConfig::load(config, overrides)?;
    train_config(&cfg, run_dir)
}

pub fn train_config(cfg: &RunConfig, run_dir: Option<&Path>) -> Result<PathBuf> {
    let dir = resolve_run_dir(cfg, run_dir);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    cfg.save(&dir.join(RESOLVED_CONFIG))?;
    let pools = build_pools(&cfg.data)?;
    let mut state = init_generator(&cfg.generator, &cfg.arch(), cfg.output.init_seed)?;
    let out = TrainOutput {
        dir: Some(dir.clone()),
        checkpoint_every: cfg.output.checkpoint_every,
        eval_every: cfg.output.eval_every,
        log_every: cfg.output.log_every,
    };
    let quick = EvalConfig {
        tasks: cfg.train.tasks,
        episodes: cfg.output.eval_episodes,
        runs_per_episode: 1,
        ..cfg.eval.clone()
    };
    let objective = cfg.train.objective;
    let test = pools.test.clone();
    let mut hook = move |s: &GeneratorState| -> cht_core::Result<f64> {
        let ev = evaluate(&mut *scorer_for(s, objective), &test, &quick)?;
        Ok(headline(&ev, objective))
    };
    info!("training {} parameters into {}", state.param_count(), dir.display());
    let report = train_with_hook(&mut state, &pools.train, &cfg.train, &out, Some(&mut hook))?;
    info!("finished at step {}", report.final_step);
    Ok(dir)
}

/// Scorer matching the objective the generator was trained with.
pub fn scorer_for(state: &GeneratorState, objective: Objective) -> Box<dyn Scorer + '_> {
    match objective {
        Objective::CrossEntropy => Box::new(LogitScorer { state }),
        _ => Box::new(ChtScorer { state }),
    }
}

/// Final-step accuracy on the last task range: class-incremental for
/// prototype models, task-incremental for logit models.
fn headline(ev: &Evaluation, objective: Objective) -> f64 {
    let table = match objective {
        Objective::CrossEntropy => &ev.task_incremental,
        _ => &ev.class_incremental,
    };
    *table.acc.last().and_then(|r| r.last()).unwrap_or(&0.0)
}

/// Configuration stored next to a checkpoint: in it or in its parent.
pub fn config_for_checkpoint(checkpoint: &Path) -> Result<PathBuf> {
    [
        checkpoint.join(RESOLVED_CONFIG),
        checkpoint.join("..").join(RESOLVED_CONFIG),
    ]
    .into_iter()
    .find(|p| p.is_file())
    .ok_or_else(|| anyhow!("no {RESOLVED_CONFIG} next to {}; pass --config", checkpoint.display()))
}

/// Config plus a checkpoint whose fingerprint matches it. A run directory
/// resolves to its newest checkpoint.
pub fn load_checkpoint(
    checkpoint: &Path,
    config: Option<&Path>,
    overrides: &[String],
) -> Result<(RunConfig, GeneratorState, PathBuf)> {
    if !checkpoint.exists() {
        bail!("checkpoint {} does not exist", checkpoint.display());
    }
    let ckpt = if checkpoint.join(RESOLVED_CONFIG).is_file() {
        latest_checkpoint(checkpoint).ok_or_else(|| anyhow!("no checkpoints under {}", checkpoint.display()))?
    } else {
        checkpoint.to_path_buf()
    };
    let config_path = match config {
        Some(p) => p.to_path_buf(),
        None => config_for_checkpoint(&ckpt)?,
    };
    let cfg = RunConfig::load(&config_path, overrides)?;
    let expected = fingerprint(&cfg.generator, &cfg.arch());
    let state = GeneratorState::load(&ckpt, Some(&expected)).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok((cfg, state, ckpt))
}

/// Tables written by an evaluation.
#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub dir: PathBuf,
    pub evaluation: Evaluation,
}

fn write_tables(dir: &Path, ev: &Evaluation, choice: ProtocolChoice, trained_tasks: usize, title: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let tables: Vec<&MetricsTable> = choice.protocols().into_iter().map(|p| ev.table(p)).collect();
    write_metrics_csv(&dir.join("metrics.csv"), &tables)?;
    for t in tables {
        let name = t.mode.as_str();
        write_plot(
            &dir.join(format!("{name}.svg")),
            t,
            trained_tasks,
            &format!("{title} ({name})"),
        )?;
    }
    Ok(())
}

fn print_tables(ev: &Evaluation, choice: ProtocolChoice) {
    for p in choice.protocols() {
        let t = ev.table(p);
        println!("{}", p.as_str());
        for (t_idx, row) in t.acc.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&t.ci95[t_idx])
                .map(|(a, c)| format!("{:5.1}±{:.1}", 100.0 * a, 100.0 * c))
                .collect();
            println!("  step {t_idx}: {}", cells.join("  "));
        }
    }
}

/// Evaluates a checkpoint on the held-out pools.
pub fn eval(
    checkpoint: &Path,
    config: Option<&Path>,
    overrides: &[String],
    choice: ProtocolChoice,
    eval_overrides: &EvalOverrides,
    out: Option<&Path>,
) -> Result<EvalOutput> {
    let (cfg, state, ckpt) = load_checkpoint(checkpoint, config, overrides)?;
    let ecfg = eval_overrides.apply(&cfg.eval);
    let pools = build_pools(&cfg.data)?;
    let ev = evaluate(&mut *scorer_for(&state, cfg.train.objective), &pools.test, &ecfg)?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.join(format!("eval_T{}_seed{}", ecfg.tasks, ecfg.seed)));
    write_tables(&dir, &ev, choice, cfg.train.tasks, "CHT")?;
    print_tables(&ev, choice);
    Ok(EvalOutput { dir, evaluation: ev })
}

/// Trains the fixed-embedding baseline under the same step budget and
/// evaluates it.
pub fn baseline_constpn(
    config: &Path,
    overrides: &[String],
    run_dir: Option<&Path>,
    choice: ProtocolChoice,
) -> Result<EvalOutput> {
    let cfg = RunConfig::load(config, overrides)?;
    let dir = resolve_run_dir(&cfg, run_dir).join("constpn");
    fs::create_dir_all(&dir)?;
    cfg.save(&dir.join(RESOLVED_CONFIG))?;
    let Pools { train, test } = build_pools(&cfg.data)?;
    let state = constpn_train(&train, &cfg.arch(), &cfg.train, cfg.baselines.constpn_way_multiplier)?;
    info!("constpn trained on {}-way episodes", state.train_way);
    state.save(&dir)?;
    let ev = evaluate(&mut ConstPnScorer { state: &state }, &test, &cfg.eval)?;
    write_tables(&dir, &ev, choice, cfg.train.tasks, "ConstPN")?;
    print_tables(&ev, choice);
    Ok(EvalOutput { dir, evaluation: ev })
}

/// Evaluates a checkpoint as a single-task generator fed all supports so far
/// as one merged episode.
pub fn baseline_merged(
    checkpoint: &Path,
    config: Option<&Path>,
    overrides: &[String],
    choice: ProtocolChoice,
    eval_overrides: &EvalOverrides,
    out: Option<&Path>,
) -> Result<EvalOutput> {
    let (cfg, state, ckpt) = load_checkpoint(checkpoint, config, overrides)?;
    let ecfg = eval_overrides.apply(&cfg.eval);
    let pools = build_pools(&cfg.data)?;
    let ev = evaluate(&mut MergedHtScorer { state: &state }, &pools.test, &ecfg)?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.join(format!("merged_T{}_seed{}", ecfg.tasks, ecfg.seed)));
    write_tables(&dir, &ev, choice, cfg.train.tasks, "Merged HT")?;
    print_tables(&ev, choice);
    Ok(EvalOutput { dir, evaluation: ev })
}

/// Writes prototype and query embeddings of one held-out sequence.
pub fn export(
    checkpoint: &Path,
    config: Option<&Path>,
    overrides: &[String],
    eval_overrides: &EvalOverrides,
    out: &Path,
) -> Result<usize> {
    let (cfg, state, _) = load_checkpoint(checkpoint, config, overrides)?;
    let e = eval_overrides.apply(&cfg.eval);
    let pools = build_pools(&cfg.data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(e.seed);
    let seq = sample_task_sequence(&pools.test, e.tasks, e.regime, e.way, e.shots, e.queries, &mut rng)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let n = export_embeddings(&state, &seq, out)?;
    println!("wrote {n} embeddings to {}", out.display());
    Ok(n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    Maml,
    Gradients,
    Oracles,
}

impl std::str::FromStr for CheckKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maml" => Ok(Self::Maml),
            "gradients" => Ok(Self::Gradients),
            "oracles" => Ok(Self::Oracles),
            other => bail!("unknown check `{other}`; expected maml, gradients or oracles"),
        }
    }
}

/// Runs one verifier suite, prints it and fails if any item is out of
/// tolerance.
pub fn check(kind: CheckKind) -> Result<Vec<CheckReport>> {
    let reports = match kind {
        CheckKind::Maml => vec![checks::maml(20, 0)?],
        CheckKind::Gradients => vec![checks::gradients(2, false, 0)?, checks::gradients(2, true, 1)?],
        CheckKind::Oracles => vec![checks::oracles(3, 0)?],
    };
    for r in &reports {
        print!("{}", r.render());
    }
    if reports.iter().any(|r| !r.passed()) {
        bail!("check {kind:?} failed");
    }
    Ok(reports)
}
