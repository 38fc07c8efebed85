//! Prototypical objectives over unrolled weight sequences and the SGD loop.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::episodes::{images_tensor, sample_task_sequence, shuffle_labels, ClassPool, Regime, Sample, TaskSequence};
use crate::error::{invalid, Error, Result};
use crate::generator::{BoundGenerator, GenerateOptions, GeneratorState, SupportVars};
use crate::target_cnn::{embed, forward_embed, Arch, WeightBundle, WeightVars};
use crate::tensor::{logsumexp, Tensor};

/// Loss above which training is considered diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    ClassIncremental,
    TaskIncremental,
    /// The embedding is read directly as K-way logits.
    CrossEntropy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeMode {
    /// Prototypes of task `τ` are computed once, with the weights generated at step `τ`.
    #[default]
    Frozen,
    /// Past supports are re-embedded with the current weights.
    Recomputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    #[serde(alias = "T")]
    pub tasks: usize,
    pub way: usize,
    pub shots: usize,
    pub queries: usize,
    pub regime: Regime,
    /// Give every task its own random label permutation.
    pub shuffle_labels: bool,
    pub learning_rate: f64,
    pub lr_decay_steps: u64,
    pub lr_decay_rate: f64,
    pub total_steps: u64,
    pub episodes_per_step: usize,
    pub objective: Objective,
    pub prototype_mode: PrototypeMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tasks: 2,
            way: 5,
            shots: 1,
            queries: 5,
            regime: Regime::SingleDomain,
            shuffle_labels: false,
            learning_rate: 1e-4,
            lr_decay_steps: 100_000,
            lr_decay_rate: 0.97,
            total_steps: 1000,
            episodes_per_step: 1,
            objective: Objective::ClassIncremental,
            prototype_mode: PrototypeMode::Frozen,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive"));
        }
        if self.total_steps == 0 {
            return Err(invalid("total_steps must be at least 1"));
        }
        if self.tasks == 0 || self.way == 0 || self.shots == 0 || self.queries == 0 {
            return Err(invalid("tasks, way, shots and queries must be positive"));
        }
        if self.episodes_per_step == 0 {
            return Err(invalid("episodes_per_step must be at least 1"));
        }
        if self.lr_decay_steps == 0 || !(self.lr_decay_rate > 0.0 && self.lr_decay_rate.is_finite()) {
            return Err(invalid("lr decay needs positive steps and rate"));
        }
        Ok(())
    }

    /// `learning_rate * lr_decay_rate^(step / lr_decay_steps)`.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.learning_rate * self.lr_decay_rate.powf(step as f64 / self.lr_decay_steps as f64)
    }
}

/// Class prototypes per task, written once per task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrototypeBank {
    tasks: Vec<Tensor>,
    frozen_at: Vec<usize>,
}

impl PrototypeBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the `[K, embed_dim]` prototypes of the next task.
    pub fn push(&mut self, prototypes: Tensor, step: usize) -> Result<usize> {
        if prototypes.shape().len() != 2 || prototypes.rows() == 0 {
            return Err(Error::Shape("prototypes must be a non-empty matrix".into()));
        }
        if let Some(first) = self.tasks.first() {
            if first.cols() != prototypes.cols() {
                return Err(Error::Shape("prototype width differs from the bank".into()));
            }
        }
        self.tasks.push(prototypes);
        self.frozen_at.push(step);
        Ok(self.tasks.len() - 1)
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task(&self, task: usize) -> Result<&Tensor> {
        self.tasks
            .get(task)
            .ok_or_else(|| invalid(format!("no prototypes for task {task}")))
    }

    pub fn get(&self, task: usize, class: usize) -> Option<&[f64]> {
        self.tasks.get(task).filter(|t| class < t.rows()).map(|t| t.row(class))
    }

    /// Step whose weights produced the prototypes of `task`.
    pub fn frozen_at(&self, task: usize) -> Option<usize> {
        self.frozen_at.get(task).copied()
    }

    /// All prototypes of tasks `0..upto`, task-major.
    pub fn stacked(&self, upto: usize) -> Result<Tensor> {
        if upto == 0 || upto > self.tasks.len() {
            return Err(invalid(format!(
                "bank holds {} tasks, {upto} requested",
                self.tasks.len()
            )));
        }
        let cols = self.tasks[0].cols();
        let data: Vec<f64> = self.tasks[..upto]
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        let rows = data.len() / cols;
        Ok(Tensor::new(vec![rows, cols], data))
    }
}

/// Mean embedding per label; `[way, d]`.
pub fn class_means(embeddings: &Tensor, labels: &[usize], way: usize) -> Result<Tensor> {
    if embeddings.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings, {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    let d = embeddings.cols();
    let mut sums = vec![0.0; way * d];
    let mut counts = vec![0usize; way];
    for (i, &y) in labels.iter().enumerate() {
        if y >= way {
            return Err(invalid(format!("label {y} outside {way}-way support")));
        }
        counts[y] += 1;
        for (s, v) in sums[y * d..(y + 1) * d].iter_mut().zip(embeddings.row(i)) {
            *s += v;
        }
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(invalid(format!("class {k} has no support samples")));
    }
    for (k, &c) in counts.iter().enumerate() {
        for s in &mut sums[k * d..(k + 1) * d] {
            *s /= c as f64;
        }
    }
    Ok(Tensor::new(vec![way, d], sums))
}

/// Prototypes of a support set under concrete weights.
pub fn compute_prototypes(weights: &WeightBundle, support: &[Sample], way: usize) -> Result<Tensor> {
    if support.is_empty() {
        return Err(invalid("support set is empty"));
    }
    let e = forward_embed(weights, &images_tensor(support, weights.arch.input))?;
    let labels: Vec<usize> = support.iter().map(|s| s.label).collect();
    class_means(&e, &labels, way)
}

/// `log softmax(-||e - c||^2)` over the rows of `prototypes`.
pub fn prototype_logprobs(queries: &Tensor, prototypes: &Tensor) -> Result<Tensor> {
    if queries.cols() != prototypes.cols() {
        return Err(Error::Shape(format!(
            "query width {} vs prototype width {}",
            queries.cols(),
            prototypes.cols()
        )));
    }
    let (m, p) = (queries.rows(), prototypes.rows());
    let mut out = Vec::with_capacity(m * p);
    for i in 0..m {
        let q = queries.row(i);
        let logits: Vec<f64> = (0..p)
            .map(|j| {
                -q.iter()
                    .zip(prototypes.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .collect();
        let z = logsumexp(&logits);
        out.extend(logits.iter().map(|l| l - z));
    }
    Ok(Tensor::new(vec![m, p], out))
}

/// Distribution over the classes of one task.
pub fn task_incremental_logprobs(queries: &Tensor, bank: &PrototypeBank, task: usize) -> Result<Tensor> {
    prototype_logprobs(queries, bank.task(task)?)
}

/// Distribution over every class of every task in the bank, task-major.
pub fn class_incremental_logprobs(queries: &Tensor, bank: &PrototypeBank) -> Result<Tensor> {
    if bank.is_empty() {
        return Err(invalid("prototype bank is empty"));
    }
    prototype_logprobs(queries, &bank.stacked(bank.num_tasks())?)
}

/// Supplies support sets to the objective. `step` is the generation step
/// asking for task `task`'s support.
pub trait SupportSource {
    fn support(&self, task: usize, step: usize) -> &[Sample];
}

impl SupportSource for TaskSequence {
    fn support(&self, task: usize, _step: usize) -> &[Sample] {
        &self.tasks[task].support
    }
}

/// Per-cell losses; `cells[t][τ]` for `τ <= t`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossMatrix {
    pub cells: Vec<Vec<f64>>,
}

impl LossMatrix {
    pub fn total(&self) -> f64 {
        self.cells.iter().flatten().sum()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    /// Cells in `(t, τ)` order, matching `cell_names`.
    pub fn flat(&self) -> Vec<f64> {
        self.cells.iter().flatten().copied().collect()
    }

    pub fn cell_names(tasks: usize) -> Vec<String> {
        (0..tasks)
            .flat_map(|t| (0..=t).map(move |tau| format!("J_cell_{t}_{tau}")))
            .collect()
    }
}

/// Value of the objective together with what produced it.
#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub loss: f64,
    pub matrix: LossMatrix,
    pub weights: Vec<WeightBundle>,
    /// Prototypes as used by the last step (empty under cross-entropy).
    pub bank: PrototypeBank,
}

/// Graph pieces produced by one unrolled episode.
pub struct EpisodeGraph {
    pub total: Var,
    pub cells: Vec<Vec<Var>>,
    pub weights: Vec<WeightVars>,
    pub prototypes: Vec<Var>,
}

/// Averages rows of `emb` per label with a constant `[way, n]` matrix.
fn prototypes_var(g: &mut Graph, emb: Var, labels: &[usize], way: usize) -> Result<Var> {
    let n = labels.len();
    let mut counts = vec![0usize; way];
    for &y in labels {
        if y >= way {
            return Err(invalid(format!("label {y} outside {way}-way support")));
        }
        counts[y] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(invalid(format!("class {k} has no support samples")));
    }
    let mut avg = vec![0.0; way * n];
    for (i, &y) in labels.iter().enumerate() {
        avg[y * n + i] = 1.0 / counts[y] as f64;
    }
    let a = g.constant(Tensor::new(vec![way, n], avg));
    Ok(g.matmul(a, emb))
}

fn embed_samples(g: &mut Graph, w: &WeightVars, arch: &Arch, samples: &[Sample]) -> Var {
    let x = g.constant(images_tensor(samples, arch.input));
    embed(g, w, x)
}

/// Mean negative log-likelihood of `targets` under `-||e - c||^2` logits.
fn prototype_nll(g: &mut Graph, emb: Var, protos: Var, targets: &[usize]) -> Var {
    let d = g.sq_dists(emb, protos);
    let logits = g.scale(d, -1.0);
    cross_entropy(g, logits, targets)
}

fn cross_entropy(g: &mut Graph, logits: Var, targets: &[usize]) -> Var {
    let lp = g.log_softmax_rows(logits);
    let m = g.pick_mean(lp, targets);
    g.scale(m, -1.0)
}

/// Builds the whole objective on `g`. Each support and query set is embedded
/// as its own batch.
pub fn episode_graph(
    g: &mut Graph,
    bound: &BoundGenerator<'_>,
    tasks: &TaskSequence,
    source: &dyn SupportSource,
    objective: Objective,
    mode: PrototypeMode,
    opts: GenerateOptions,
) -> Result<EpisodeGraph> {
    let arch = bound.state.arch.clone();
    let t_len = tasks.len();
    if t_len == 0 {
        return Err(invalid("empty task sequence"));
    }
    let way = tasks.tasks[0].way();
    if tasks.tasks.iter().any(|e| e.way() != way) {
        return Err(invalid("every task in a sequence must have the same way"));
    }
    if objective == Objective::CrossEntropy && arch.embed_dim != way {
        return Err(invalid(format!(
            "cross-entropy needs embed_dim == way, got {} and {way}",
            arch.embed_dim
        )));
    }
    let zero = crate::target_cnn::zero_weights(&arch)?;
    let mut prev = zero.bind(g, false);
    let mut weights = Vec::with_capacity(t_len);
    let mut protos: Vec<Var> = Vec::with_capacity(t_len);
    let mut cells = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let support = source.support(t, t);
        let labels: Vec<usize> = support.iter().map(|s| s.label).collect();
        let images = g.constant(images_tensor(support, arch.input));
        let sv = SupportVars {
            images,
            labels: &labels,
        };
        let current = bound.generate(g, sv, &prev, opts)?;
        if objective != Objective::CrossEntropy {
            if mode == PrototypeMode::Recomputed {
                for (tau, p) in protos.iter_mut().enumerate() {
                    let s = source.support(tau, t);
                    let l: Vec<usize> = s.iter().map(|x| x.label).collect();
                    let e = embed_samples(g, &current, &arch, s);
                    *p = prototypes_var(g, e, &l, way)?;
                }
            }
            let e = embed(g, &current, images);
            protos.push(prototypes_var(g, e, &labels, way)?);
        }
        let stacked = if objective == Objective::ClassIncremental {
            Some(if protos.len() == 1 {
                protos[0]
            } else {
                g.concat_rows(&protos)
            })
        } else {
            None
        };
        let mut row = Vec::with_capacity(t + 1);
        for tau in 0..=t {
            let query = &tasks.tasks[tau].query;
            let qe = embed_samples(g, &current, &arch, query);
            let cell = match objective {
                Objective::ClassIncremental => {
                    let targets: Vec<usize> = query.iter().map(|s| tau * way + s.label).collect();
                    prototype_nll(g, qe, stacked.unwrap(), &targets)
                }
                Objective::TaskIncremental => {
                    let targets: Vec<usize> = query.iter().map(|s| s.label).collect();
                    prototype_nll(g, qe, protos[tau], &targets)
                }
                Objective::CrossEntropy => {
                    let targets: Vec<usize> = query.iter().map(|s| s.label).collect();
                    cross_entropy(g, qe, &targets)
                }
            };
            let v = g.value(cell).item();
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss cell (t={t}, tau={tau})")));
            }
            row.push(cell);
        }
        cells.push(row);
        weights.push(current.clone());
        prev = current;
    }
    let flat: Vec<Var> = cells.iter().flatten().copied().collect();
    let total = g.add_all(&flat);
    Ok(EpisodeGraph {
        total,
        cells,
        weights,
        prototypes: protos,
    })
}

fn outcome(g: &Graph, eg: &EpisodeGraph, arch: &Arch) -> Result<EpisodeOutcome> {
    let mut bank = PrototypeBank::new();
    for (tau, p) in eg.prototypes.iter().enumerate() {
        bank.push(g.value(*p).clone(), tau)?;
    }
    Ok(EpisodeOutcome {
        loss: g.value(eg.total).item(),
        matrix: LossMatrix {
            cells: eg
                .cells
                .iter()
                .map(|r| r.iter().map(|v| g.value(*v).item()).collect())
                .collect(),
        },
        weights: eg.weights.iter().map(|w| w.to_bundle(g, arch)).collect(),
        bank,
    })
}

/// The accumulated objective `J` and its per-cell matrix.
pub fn episode_objective(state: &GeneratorState, tasks: &TaskSequence, cfg: &TrainConfig) -> Result<EpisodeOutcome> {
    episode_objective_from(state, tasks, tasks, cfg)
}

/// As `episode_objective`, reading supports through `source`.
pub fn episode_objective_from(
    state: &GeneratorState,
    tasks: &TaskSequence,
    source: &dyn SupportSource,
    cfg: &TrainConfig,
) -> Result<EpisodeOutcome> {
    let mut g = Graph::new();
    let bound = state.bind(&mut g, false);
    let eg = episode_graph(
        &mut g,
        &bound,
        tasks,
        source,
        cfg.objective,
        cfg.prototype_mode,
        GenerateOptions::default(),
    )?;
    outcome(&g, &eg, &state.arch)
}

/// Cross-entropy variant: the embedding is the logit vector.
pub fn cross_entropy_objective(state: &GeneratorState, tasks: &TaskSequence, cfg: &TrainConfig) -> Result<f64> {
    let cfg = TrainConfig {
        objective: Objective::CrossEntropy,
        ..cfg.clone()
    };
    Ok(episode_objective(state, tasks, &cfg)?.loss)
}

/// Objective value and gradient for every generator tensor.
pub fn loss_and_grads(
    state: &GeneratorState,
    tasks: &TaskSequence,
    cfg: &TrainConfig,
) -> Result<(EpisodeOutcome, Vec<Vec<f64>>)> {
    loss_and_grads_with(state, tasks, cfg, GenerateOptions::default())
}

pub fn loss_and_grads_with(
    state: &GeneratorState,
    tasks: &TaskSequence,
    cfg: &TrainConfig,
    opts: GenerateOptions,
) -> Result<(EpisodeOutcome, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let bound = state.bind(&mut g, true);
    let eg = episode_graph(&mut g, &bound, tasks, tasks, cfg.objective, cfg.prototype_mode, opts)?;
    let grads = g.backward(eg.total);
    let flat = bound
        .vars
        .iter()
        .zip(&state.params)
        .map(|(v, p)| grads.get_or_zeros(*v, p.len()))
        .collect();
    Ok((outcome(&g, &eg, &state.arch)?, flat))
}

fn loss_value(state: &GeneratorState, tasks: &TaskSequence, cfg: &TrainConfig, opts: GenerateOptions) -> Result<f64> {
    let mut g = Graph::new();
    let bound = state.bind(&mut g, false);
    let eg = episode_graph(&mut g, &bound, tasks, tasks, cfg.objective, cfg.prototype_mode, opts)?;
    Ok(g.value(eg.total).item())
}

/// Finite-difference comparison for one generator tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    pub grad_norm: f64,
}

/// Compares autodiff gradients of the objective against central differences
/// at `probes` random entries of every generator tensor.
pub fn gradient_check(
    state: &GeneratorState,
    tasks: &TaskSequence,
    cfg: &TrainConfig,
    opts: GenerateOptions,
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<GradientCheck>> {
    use rand::Rng;
    let (_, grads) = loss_and_grads_with(state, tasks, cfg, opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = state.clone();
    let mut out = Vec::with_capacity(grads.len());
    for (i, grad) in grads.iter().enumerate() {
        let n = grad.len().min(probes);
        let mut max_rel_err: f64 = 0.0;
        for _ in 0..n {
            let j = rng.random_range(0..grad.len());
            let orig = probe.params[i].data()[j];
            probe.params[i].data_mut()[j] = orig + h;
            let up = loss_value(&probe, tasks, cfg, opts)?;
            probe.params[i].data_mut()[j] = orig - h;
            let down = loss_value(&probe, tasks, cfg, opts)?;
            probe.params[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let scale = numeric.abs().max(grad[j].abs()).max(1e-6);
            max_rel_err = max_rel_err.max((numeric - grad[j]).abs() / scale);
        }
        out.push(GradientCheck {
            name: state.names[i].clone(),
            probes: n,
            max_rel_err,
            grad_norm: grad.iter().map(|x| x * x).sum::<f64>().sqrt(),
        });
    }
    Ok(out)
}

/// Where training writes metrics and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
    /// Save `ckpt_<step>` every this many steps; 0 saves only the last.
    pub checkpoint_every: u64,
    /// Run the evaluation hook every this many steps; 0 disables it.
    pub eval_every: u64,
    /// Write a metrics row every this many steps.
    pub log_every: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub final_step: u64,
}

pub type EvalHook<'a> = &'a mut dyn FnMut(&GeneratorState) -> Result<f64>;

pub fn checkpoint_dir(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("ckpt_{step}"))
}

/// Newest `ckpt_<step>` directory under `run_dir`.
pub fn latest_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    fs::read_dir(run_dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let step: u64 = name.strip_prefix("ckpt_")?.parse().ok()?;
            Some((step, e.path()))
        })
        .max_by_key(|(s, _)| *s)
        .map(|(_, p)| p)
}

pub fn train(
    state: &mut GeneratorState,
    pools: &[ClassPool],
    cfg: &TrainConfig,
    out: &TrainOutput,
) -> Result<TrainReport> {
    train_with_hook(state, pools, cfg, out, None)
}

/// Episodic SGD on the generator. Deterministic given `cfg.seed` and the
/// initial state.
pub fn train_with_hook(
    state: &mut GeneratorState,
    pools: &[ClassPool],
    cfg: &TrainConfig,
    out: &TrainOutput,
    mut hook: Option<EvalHook<'_>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.way > state.cfg.max_way {
        return Err(invalid(format!(
            "way {} exceeds generator.max_way {}",
            cfg.way, state.cfg.max_way
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut writer = match &out.dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
            let mut header = vec!["step".to_string(), "lr".into(), "J_total".into()];
            header.extend(LossMatrix::cell_names(cfg.tasks));
            header.push("eval_acc".into());
            w.write_record(&header)?;
            Some(w)
        }
        None => None,
    };
    let log_every = out.log_every.max(1);
    let mut losses = Vec::with_capacity(cfg.total_steps as usize);
    let start = state.step;
    for step in start..start + cfg.total_steps {
        let lr = cfg.lr_at(step);
        let mut grad_sum: Option<Vec<Vec<f64>>> = None;
        let mut loss = 0.0;
        let mut cells = vec![0.0; cfg.tasks * (cfg.tasks + 1) / 2];
        for _ in 0..cfg.episodes_per_step {
            let mut seq =
                sample_task_sequence(pools, cfg.tasks, cfg.regime, cfg.way, cfg.shots, cfg.queries, &mut rng)?;
            if cfg.shuffle_labels {
                shuffle_labels(&mut seq, &mut rng);
            }
            let (o, grads) = loss_and_grads(state, &seq, cfg).map_err(|e| Error::Diverged {
                step,
                reason: e.to_string(),
            })?;
            loss += o.loss;
            for (c, v) in cells.iter_mut().zip(o.matrix.flat()) {
                *c += v;
            }
            match &mut grad_sum {
                None => grad_sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(grads) {
                        for (x, y) in a.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let n = cfg.episodes_per_step as f64;
        loss /= n;
        cells.iter_mut().for_each(|c| *c /= n);
        let mut grads = grad_sum.unwrap();
        if n > 1.0 {
            grads.iter_mut().flatten().for_each(|x| *x /= n);
        }
        if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                step,
                reason: format!("loss {loss}"),
            });
        }
        if grads.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Diverged {
                step,
                reason: "non-finite gradient".into(),
            });
        }
        state.sgd_step(&grads, lr);
        losses.push(loss);
        let done = state.step;
        let eval_acc = match (&mut hook, out.eval_every) {
            (Some(h), every) if every > 0 && done.is_multiple_of(every) => Some(h(state)?),
            _ => None,
        };
        if let Some(w) = &mut writer {
            if done.is_multiple_of(log_every) || eval_acc.is_some() || done == start + cfg.total_steps {
                let mut row = vec![done.to_string(), format!("{lr:e}"), format!("{loss}")];
                row.extend(cells.iter().map(|c| c.to_string()));
                row.push(eval_acc.map(|a| a.to_string()).unwrap_or_default());
                w.write_record(&row)?;
                w.flush()?;
            }
        }
        if done.is_multiple_of(100) {
            info!("step {done} lr {lr:.3e} loss {loss:.4}");
        }
        if let Some(dir) = &out.dir {
            let last = done == start + cfg.total_steps;
            if last || (out.checkpoint_every > 0 && done.is_multiple_of(out.checkpoint_every)) {
                state.save(&checkpoint_dir(dir, done))?;
            }
        }
    }
    Ok(TrainReport {
        losses,
        final_step: state.step,
    })
}
