//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Positional arguments select criteria by number,
//! e.g. `cargo test -p cht-verify --test acceptance -- 1 4`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use cht_cli::checks;
use cht_cli::commands::{self, EvalOverrides, ProtocolChoice};
use cht_cli::config::RunConfig;
use cht_cli::data::{build_pools, Pools};
use cht_core::episodes::{sample_task_sequence, Regime, Sample, TaskSequence};
use cht_core::eval::{class_level_accuracy, evaluate, ChtScorer, EvalConfig, LogitScorer, Scorer};
use cht_core::generator::{generate_weights, ht_generate, init_generator, unroll, GenerateOptions, GeneratorState};
use cht_core::learner::{
    class_incremental_logprobs, episode_objective, episode_objective_from, loss_and_grads_with,
    task_incremental_logprobs, train, Objective, PrototypeBank, PrototypeMode, SupportSource, TrainConfig, TrainOutput,
};
use cht_core::target_cnn::{zero_weights, WeightBundle};
use cht_core::tensor::logsumexp;
use cht_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Verdict {
    passed: bool,
    summary: String,
}

fn verdict(passed: bool, summary: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        passed,
        summary: summary.into(),
    })
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn desk() -> Result<(RunConfig, Pools)> {
    let cfg = RunConfig::load(&preset("desk.cfg"), &[])?;
    let pools = build_pools(&cfg.data)?;
    Ok((cfg, pools))
}

fn same_bits(a: &WeightBundle, b: &WeightBundle) -> bool {
    a.arch == b.arch
        && a.tensors.len() == b.tensors.len()
        && a.tensors.iter().zip(&b.tensors).all(|(x, y)| {
            x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

fn same_tensor_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits())
}

fn oracle_equivalence() -> Result<Verdict> {
    let start = Instant::now();
    let report = checks::oracles(3, 1)?;
    print!("{}", report.render());
    let secs = start.elapsed().as_secs_f64();
    verdict(
        report.passed() && secs < 60.0,
        format!("max relative error {:.2e} over T=1..3, {secs:.1}s", report.worst()),
    )
}

fn base_case_reduction() -> Result<Verdict> {
    let mut all = true;
    for seed in 0..5 {
        let (state, seq) = checks::tiny_problem(1, 3, 2, 2, 4, seed)?;
        let unrolled = unroll(&state, &seq)?;
        let direct = ht_generate(&state, &seq.tasks[0].support)?;
        let from_zero = generate_weights(&state, &seq.tasks[0].support, &zero_weights(&state.arch)?)?;
        let objective = episode_objective(&state, &seq, &TrainConfig::default())?;
        all &= same_bits(&unrolled[0], &direct)
            && same_bits(&from_zero, &direct)
            && same_bits(&objective.weights[0], &direct);
    }
    verdict(all, "unrolled T=1 weights vs single-task generation, 5 seeds, bitwise")
}

fn normalization_invariants() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_sum = 0.0f64;
    let mut worst_restrict = 0.0f64;
    for _ in 0..1000 {
        let tasks = rng.random_range(1..=5);
        let way = rng.random_range(2..=6);
        let dim = rng.random_range(1..=8);
        let queries = rng.random_range(1..=5);
        let scale: f64 = rng.random_range(0.1..4.0);
        let mut normal =
            |n: usize| -> Vec<f64> { (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect() };
        let mut bank = PrototypeBank::new();
        for t in 0..tasks {
            bank.push(Tensor::new(vec![way, dim], normal(way * dim)), t)?;
        }
        let q = Tensor::new(vec![queries, dim], normal(queries * dim));
        let ci = class_incremental_logprobs(&q, &bank)?;
        for i in 0..queries {
            let s: f64 = ci.row(i).iter().map(|v| v.exp()).sum();
            worst_sum = worst_sum.max((s - 1.0).abs());
        }
        for tau in 0..tasks {
            let ti = task_incremental_logprobs(&q, &bank, tau)?;
            for i in 0..queries {
                let s: f64 = ti.row(i).iter().map(|v| v.exp()).sum();
                worst_sum = worst_sum.max((s - 1.0).abs());
                let restricted = &ci.row(i)[tau * way..(tau + 1) * way];
                let norm = logsumexp(restricted);
                for (r, t) in restricted.iter().zip(ti.row(i)) {
                    worst_restrict = worst_restrict.max((r - norm - t).abs());
                }
            }
        }
    }
    verdict(
        worst_sum <= 1e-6 && worst_restrict <= 1e-12,
        format!("1000 trials: |sum - 1| <= {worst_sum:.1e}, restricted vs per-task log-probs <= {worst_restrict:.1e}"),
    )
}

fn maml_connection() -> Result<Verdict> {
    let start = Instant::now();
    let report = checks::maml(20, 4)?;
    print!("{}", report.render());
    verdict(
        report.passed(),
        format!(
            "20 configurations, max relative error {:.2e}, {:.2}s",
            report.worst(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn gradient_integrity() -> Result<Verdict> {
    let full = checks::gradients(2, false, 6)?;
    print!("{}", full.render());
    let ablated = checks::gradients(2, true, 7)?;
    print!("{}", ablated.render());
    let (state, seq) = checks::tiny_problem(2, 3, 1, 2, 3, 8)?;
    let (_, grads) = loss_and_grads_with(
        &state,
        &seq,
        &TrainConfig::default(),
        GenerateOptions { ablate_support: true },
    )?;
    let mut recursion = f64::INFINITY;
    for (name, g) in state.names.iter().zip(&grads) {
        if name.ends_with(".prev_proj") {
            recursion = recursion.min(g.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
    }
    verdict(
        full.passed() && ablated.passed() && recursion > 0.0 && recursion.is_finite(),
        format!(
            "T=2 max relative error {:.2e}, support ablated {:.2e}, smallest previous-weight gradient norm {recursion:.2e}",
            full.worst(),
            ablated.worst()
        ),
    )
}

/// NaN images for every task older than the asking step.
struct Poisoned<'a> {
    clean: &'a TaskSequence,
    poisoned: Vec<Vec<Sample>>,
}

impl<'a> Poisoned<'a> {
    fn new(clean: &'a TaskSequence) -> Self {
        let poisoned = clean
            .tasks
            .iter()
            .map(|t| {
                t.support
                    .iter()
                    .map(|s| Sample {
                        image: Arc::from(vec![f32::NAN; s.image.len()]),
                        ..s.clone()
                    })
                    .collect()
            })
            .collect();
        Self { clean, poisoned }
    }
}

impl SupportSource for Poisoned<'_> {
    fn support(&self, task: usize, step: usize) -> &[Sample] {
        if task < step {
            &self.poisoned[task]
        } else {
            &self.clean.tasks[task].support
        }
    }
}

fn prototype_freezing() -> Result<Verdict> {
    let (state, seq) = checks::tiny_problem(4, 3, 2, 2, 4, 9)?;
    let cfg = TrainConfig::default();
    let mut frozen = true;
    let mut previous: Option<PrototypeBank> = None;
    for upto in 1..=seq.len() {
        let prefix = TaskSequence {
            tasks: seq.tasks[..upto].to_vec(),
            regime: seq.regime,
        };
        let bank = episode_objective(&state, &prefix, &cfg)?.bank;
        if let Some(prev) = &previous {
            for task in 0..prev.num_tasks() {
                frozen &= same_tensor_bits(prev.task(task)?, bank.task(task)?);
                frozen &= bank.frozen_at(task) == Some(task);
            }
        }
        previous = Some(bank);
    }
    let clean = episode_objective(&state, &seq, &cfg)?;
    let poison = Poisoned::new(&seq);
    let poisoned = episode_objective_from(&state, &seq, &poison, &cfg)?;
    let untouched = clean.loss.to_bits() == poisoned.loss.to_bits() && clean.bank == poisoned.bank;
    // Control: re-embedding old supports does read the poison.
    let recomputed = TrainConfig {
        prototype_mode: PrototypeMode::Recomputed,
        ..cfg
    };
    let control_sees_poison = match episode_objective_from(&state, &seq, &poison, &recomputed) {
        Ok(out) => out.loss.to_bits() != clean.loss.to_bits(),
        Err(_) => true,
    };
    verdict(
        frozen && untouched && control_sees_poison,
        format!(
            "bank bit-identical across 4 tasks: {frozen}; poisoned past supports leave the loss unchanged: {untouched}; recomputed control sees poison: {control_sees_poison}"
        ),
    )
}

fn fit(
    cfg: &RunConfig,
    train_cfg: &TrainConfig,
    embed_dim: usize,
    pools: &Pools,
) -> Result<(GeneratorState, Duration)> {
    let mut arch = cfg.arch();
    arch.embed_dim = embed_dim;
    let mut state = init_generator(&cfg.generator, &arch, cfg.output.init_seed)?;
    let start = Instant::now();
    let report = train(&mut state, &pools.train, train_cfg, &TrainOutput::default())?;
    let n = report.losses.len();
    let tail = n.div_ceil(10);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    println!(
        "  trained T={} shots={} {:?}: loss {:.3} -> {:.3} in {:.0}s",
        train_cfg.tasks,
        train_cfg.shots,
        train_cfg.objective,
        mean(&report.losses[..tail]),
        mean(&report.losses[n - tail..]),
        start.elapsed().as_secs_f64()
    );
    Ok((state, start.elapsed()))
}

fn minibatch_consistency() -> Result<Verdict> {
    let (cfg, pools) = desk()?;
    let way = cfg.train.way;
    let base = TrainConfig {
        way,
        queries: cfg.train.queries,
        regime: Regime::SameClasses,
        objective: Objective::CrossEntropy,
        learning_rate: 1e-2,
        total_steps: 20_000,
        ..cfg.train.clone()
    };
    let mut accs = Vec::new();
    let mut elapsed = Duration::ZERO;
    for (tasks, shots) in [(4, 1), (1, 4), (1, 1)] {
        let tc = TrainConfig {
            tasks,
            shots,
            ..base.clone()
        };
        let (state, took) = fit(&cfg, &tc, way, &pools)?;
        elapsed += took;
        let ecfg = EvalConfig {
            tasks,
            shots,
            way,
            queries: cfg.eval.queries,
            regime: Regime::SameClasses,
            runs_per_episode: 1,
            ..cfg.eval.clone()
        };
        let ev = evaluate(&mut LogitScorer { state: &state }, &pools.test, &ecfg)?;
        // Every batch shares the classes, so all query sets score the final weights.
        let last = &ev.task_incremental.acc[tasks - 1];
        let acc = last.iter().sum::<f64>() / last.len() as f64;
        println!("  {tasks} x {shots}-shot: {}", pct(acc));
        accs.push(acc);
    }
    let (sequential, concatenated, single) = (accs[0], accs[1], accs[2]);
    let minutes = elapsed.as_secs_f64() / 60.0;
    verdict(
        (sequential - concatenated).abs() <= 0.02
            && sequential >= single + 0.03
            && concatenated >= single + 0.03
            && minutes <= 30.0,
        format!(
            "sequential {} vs concatenated {} vs single {} (5-way, 20k steps each, {minutes:.1} min)",
            pct(sequential),
            pct(concatenated),
            pct(single)
        ),
    )
}

/// The desk preset trained once and shared by the forgetting and
/// extrapolation criteria.
struct DeskRun {
    _dir: tempfile::TempDir,
    run: PathBuf,
    took: Duration,
}

fn desk_run(slot: &mut Option<DeskRun>) -> Result<&DeskRun> {
    if slot.is_none() {
        let dir = tempfile::tempdir()?;
        let start = Instant::now();
        let run = commands::train(&preset("desk.cfg"), &[], Some(&dir.path().join("desk")))?;
        *slot = Some(DeskRun {
            _dir: dir,
            run,
            took: start.elapsed(),
        });
    }
    Ok(slot.as_ref().unwrap())
}

fn no_forgetting(slot: &mut Option<DeskRun>) -> Result<Verdict> {
    let desk = desk_run(slot)?;
    let start = Instant::now();
    let out_dir = tempfile::tempdir()?;
    let over = EvalOverrides {
        tasks: Some(3),
        ..Default::default()
    };
    let cht = commands::eval(&desk.run, None, &[], ProtocolChoice::Both, &over, Some(out_dir.path()))?;
    let ti = &cht.evaluation.task_incremental.acc;
    let mut worst_drop = f64::NEG_INFINITY;
    for (t, row) in ti.iter().enumerate() {
        for tau in 0..t {
            worst_drop = worst_drop.max(ti[tau][tau] - row[tau]);
        }
    }
    let constpn = commands::baseline_constpn(
        &preset("desk.cfg"),
        &["eval.tasks=3".into()],
        Some(out_dir.path()),
        ProtocolChoice::ClassIncremental,
    )?;
    let ours = cht.evaluation.class_incremental.acc[2][2];
    let theirs = constpn.evaluation.class_incremental.acc[2][2];
    let minutes = (desk.took + start.elapsed()).as_secs_f64() / 60.0;
    verdict(
        worst_drop <= 0.02 && ours >= theirs + 0.01 && minutes <= 60.0,
        format!(
            "largest task-incremental drop {:.1} points; class-incremental 0-2 {} vs ConstPN {} ({minutes:.1} min)",
            100.0 * worst_drop,
            pct(ours),
            pct(theirs)
        ),
    )
}

fn cross_entropy_collision() -> Result<Verdict> {
    let (cfg, pools) = desk()?;
    let way = cfg.train.way;
    let base = TrainConfig {
        tasks: 2,
        regime: Regime::SameClasses,
        shuffle_labels: true,
        ..cfg.train.clone()
    };
    let ecfg = EvalConfig {
        tasks: 2,
        regime: Regime::SameClasses,
        shuffle_labels: true,
        runs_per_episode: 1,
        ..cfg.eval.clone()
    };
    let ce_cfg = TrainConfig {
        objective: Objective::CrossEntropy,
        ..base.clone()
    };
    let (ce, _) = fit(&cfg, &ce_cfg, way, &pools)?;
    let (proto, _) = fit(&cfg, &base, cfg.arch.embed_dim, &pools)?;
    let (ce_acc, _) = class_level_accuracy(&mut LogitScorer { state: &ce }, &pools.test, &ecfg)?;
    let (proto_acc, _) = class_level_accuracy(&mut ChtScorer { state: &proto }, &pools.test, &ecfg)?;
    verdict(
        proto_acc - ce_acc >= 0.10,
        format!(
            "class-level accuracy, shuffled labels, T=2: cross-entropy {} vs prototypes {}",
            pct(ce_acc),
            pct(proto_acc)
        ),
    )
}

fn extrapolation(slot: &mut Option<DeskRun>) -> Result<Verdict> {
    let desk = desk_run(slot)?;
    let (cfg, state, _) = commands::load_checkpoint(&desk.run, None, &[])?;
    let pools = build_pools(&cfg.data)?;
    let ecfg = EvalConfig {
        tasks: 5,
        ..cfg.eval.clone()
    };
    ensure!(cfg.train.tasks == 3, "desk preset should train on 3 tasks");
    let ev = evaluate(&mut ChtScorer { state: &state }, &pools.test, &ecfg)?;
    ensure!(ev.class_incremental.acc.len() == 5);

    // Queries of tasks 3 and 4 against all 25 classes under the last weights.
    let way = ecfg.way;
    let mut rng = ChaCha8Rng::seed_from_u64(ecfg.seed);
    let mut hits = [0usize; 2];
    let mut total = [0usize; 2];
    let mut scorer = ChtScorer { state: &state };
    for _ in 0..ecfg.episodes {
        let seq = sample_task_sequence(&pools.test, 5, ecfg.regime, way, ecfg.shots, ecfg.queries, &mut rng)?;
        let scores = scorer.scores(&seq)?;
        for (slot, tau) in [3usize, 4].into_iter().enumerate() {
            let s = &scores[4][tau];
            for (i, q) in seq.tasks[tau].query.iter().enumerate() {
                let row = s.row(i);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                hits[slot] += usize::from(best == tau * way + q.label);
                total[slot] += 1;
            }
        }
    }
    let acc: Vec<f64> = (0..2).map(|i| hits[i] as f64 / total[i] as f64).collect();
    let chance = 1.0 / (5 * way) as f64;
    verdict(
        acc.iter().all(|&a| a > chance),
        format!(
            "T_test=5 class-incremental accuracy on task 3 {} and task 4 {} (chance {})",
            pct(acc[0]),
            pct(acc[1]),
            pct(chance)
        ),
    )
}

fn determinism() -> Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let overrides: Vec<String> = [
        "train.total_steps=30",
        "output.checkpoint_every=15",
        "output.eval_every=15",
        "output.eval_episodes=4",
        "eval.episodes=20",
        "eval.runs_per_episode=2",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    let a = commands::train(&preset("desk.cfg"), &overrides, Some(&dir.path().join("a")))?;
    let b = commands::train(&preset("desk.cfg"), &overrides, Some(&dir.path().join("b")))?;
    let same_metrics = fs::read(a.join("metrics.csv"))? == fs::read(b.join("metrics.csv"))?;
    let e1 = commands::eval(
        &a,
        None,
        &[],
        ProtocolChoice::Both,
        &EvalOverrides::default(),
        Some(&dir.path().join("e1")),
    )?;
    let e2 = commands::eval(
        &a,
        None,
        &[],
        ProtocolChoice::Both,
        &EvalOverrides::default(),
        Some(&dir.path().join("e2")),
    )?;
    let same_tables = e1.evaluation == e2.evaluation
        && fs::read(e1.dir.join("metrics.csv"))? == fs::read(e2.dir.join("metrics.csv"))?;
    verdict(
        same_metrics && same_tables,
        format!("train metrics.csv identical: {same_metrics}; eval tables identical: {same_tables}"),
    )
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut desk: Option<DeskRun> = None;
    let names = [
        "oracle equivalence",
        "base-case reduction",
        "normalization invariants",
        "one-step logits update",
        "gradient integrity",
        "prototype freezing",
        "mini-batch consistency",
        "no forgetting",
        "cross-entropy collision",
        "extrapolation",
        "determinism",
    ];
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let number = i + 1;
        if !selected.is_empty() && !selected.contains(&number) {
            continue;
        }
        println!("criterion {number}: {name}");
        let start = Instant::now();
        let result = match number {
            1 => oracle_equivalence(),
            2 => base_case_reduction(),
            3 => normalization_invariants(),
            4 => maml_connection(),
            5 => gradient_integrity(),
            6 => prototype_freezing(),
            7 => minibatch_consistency(),
            8 => no_forgetting(&mut desk),
            9 => cross_entropy_collision(),
            10 => extrapolation(&mut desk),
            _ => determinism(),
        };
        let secs = start.elapsed().as_secs_f64();
        let (passed, summary) = match result {
            Ok(v) => (v.passed, v.summary),
            Err(e) => (false, format!("error: {e:#}")),
        };
        failed += usize::from(!passed);
        println!(
            "{} {number:>2} {name}: {summary} [{secs:.1}s]",
            if passed { "PASS" } else { "FAIL" }
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
