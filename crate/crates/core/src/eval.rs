//! Episodic evaluation, forgetting analysis, the one-step gradient check and
//! embedding export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::episodes::{
    images_tensor, resample_episode, sample_task_sequence, shuffle_labels, ClassPool, Regime, TaskSequence,
};
use crate::error::{invalid, Error, Result};
use crate::generator::{unroll, GeneratorState};
use crate::learner::{class_means, prototype_logprobs};
use crate::target_cnn::forward_embed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    TaskIncremental,
    ClassIncremental,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::TaskIncremental => "task_incremental",
            Protocol::ClassIncremental => "class_incremental",
        }
    }
}

/// Produces scores for every query of a task sequence.
///
/// `scores[t][τ]` has one row per query of task `τ` (for `τ <= t`) and
/// `(t + 1) * K` columns, task-major: the scores assigned at step `t` to every
/// class of tasks `0..=t`.
pub trait Scorer {
    fn scores(&mut self, seq: &TaskSequence) -> Result<Vec<Vec<Tensor>>>;
}

/// The continual generator: weights by unrolling, prototypes frozen at their
/// own step.
pub struct ChtScorer<'a> {
    pub state: &'a GeneratorState,
}

impl Scorer for ChtScorer<'_> {
    fn scores(&mut self, seq: &TaskSequence) -> Result<Vec<Vec<Tensor>>> {
        let per_step = unroll(self.state, seq)?;
        let shape = self.state.arch.input;
        let mut protos: Vec<Tensor> = Vec::with_capacity(seq.len());
        let mut out = Vec::with_capacity(seq.len());
        for (t, current) in per_step.iter().enumerate() {
            let task = &seq.tasks[t];
            let e = forward_embed(current, &images_tensor(&task.support, shape))?;
            protos.push(class_means(&e, &task.support_labels(), task.way())?);
            let stacked = stack_rows(&protos);
            let row = (0..=t)
                .map(|tau| {
                    let q = forward_embed(current, &images_tensor(&seq.tasks[tau].query, shape))?;
                    prototype_logprobs(&q, &stacked)
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(row);
        }
        Ok(out)
    }
}

/// A generator trained with the cross-entropy objective; its embedding is a
/// K-way logit vector. The logits are repeated for every task, so only
/// task-incremental scores are meaningful.
pub struct LogitScorer<'a> {
    pub state: &'a GeneratorState,
}

impl Scorer for LogitScorer<'_> {
    fn scores(&mut self, seq: &TaskSequence) -> Result<Vec<Vec<Tensor>>> {
        let per_step = unroll(self.state, seq)?;
        let shape = self.state.arch.input;
        per_step
            .iter()
            .enumerate()
            .map(|(t, current)| {
                (0..=t)
                    .map(|tau| {
                        let q = forward_embed(current, &images_tensor(&seq.tasks[tau].query, shape))?;
                        Ok(tile_cols(&q, t + 1))
                    })
                    .collect()
            })
            .collect()
    }
}

/// Scores the true class highest.
pub struct OracleScorer;

impl Scorer for OracleScorer {
    fn scores(&mut self, seq: &TaskSequence) -> Result<Vec<Vec<Tensor>>> {
        let k = seq.tasks[0].way();
        Ok((0..seq.len())
            .map(|t| {
                (0..=t)
                    .map(|tau| {
                        let q = &seq.tasks[tau].query;
                        let mut data = vec![0.0; q.len() * (t + 1) * k];
                        for (i, s) in q.iter().enumerate() {
                            data[i * (t + 1) * k + tau * k + s.label] = 1.0;
                        }
                        Tensor::new(vec![q.len(), (t + 1) * k], data)
                    })
                    .collect()
            })
            .collect())
    }
}

/// Uniform random scores.
pub struct RandomScorer {
    pub rng: ChaCha8Rng,
}

impl Scorer for RandomScorer {
    fn scores(&mut self, seq: &TaskSequence) -> Result<Vec<Vec<Tensor>>> {
        let k = seq.tasks[0].way();
        Ok((0..seq.len())
            .map(|t| {
                (0..=t)
                    .map(|tau| {
                        let n = seq.tasks[tau].query.len();
                        let data = (0..n * (t + 1) * k).map(|_| self.rng.random::<f64>()).collect();
                        Tensor::new(vec![n, (t + 1) * k], data)
                    })
                    .collect()
            })
            .collect())
    }
}

pub(crate) fn stack_rows(parts: &[Tensor]) -> Tensor {
    let cols = parts[0].cols();
    let data: Vec<f64> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(vec![data.len() / cols, cols], data)
}

fn tile_cols(x: &Tensor, times: usize) -> Tensor {
    let (m, k) = (x.rows(), x.cols());
    let mut data = Vec::with_capacity(m * k * times);
    for i in 0..m {
        for _ in 0..times {
            data.extend_from_slice(x.row(i));
        }
    }
    Tensor::new(vec![m, k * times], data)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Accuracy matrices of one scored sequence.
///
/// Task-incremental `acc[t][τ]`: queries of `τ`, argmax within `τ`'s classes.
/// Class-incremental `acc[t][r]`: queries of tasks `0..=r`, argmax over the
/// classes of tasks `0..=r`, all under the step-`t` scores.
pub fn sequence_accuracy(seq: &TaskSequence, scores: &[Vec<Tensor>], protocol: Protocol) -> Result<Vec<Vec<f64>>> {
    let k = seq.tasks[0].way();
    if scores.len() != seq.len() {
        return Err(Error::Shape(format!(
            "{} score steps for {} tasks",
            scores.len(),
            seq.len()
        )));
    }
    let mut acc = Vec::with_capacity(seq.len());
    for (t, row) in scores.iter().enumerate() {
        if row.len() != t + 1 || row.iter().any(|s| s.cols() != (t + 1) * k) {
            return Err(Error::Shape(format!("malformed scores at step {t}")));
        }
        let mut out = Vec::with_capacity(t + 1);
        for r in 0..=t {
            let (hits, total) = match protocol {
                Protocol::TaskIncremental => {
                    let q = &seq.tasks[r].query;
                    let hits = q
                        .iter()
                        .enumerate()
                        .filter(|(i, s)| argmax(&row[r].row(*i)[r * k..(r + 1) * k]) == s.label)
                        .count();
                    (hits, q.len())
                }
                Protocol::ClassIncremental => {
                    let mut hits = 0;
                    let mut total = 0;
                    for tau in 0..=r {
                        for (i, s) in seq.tasks[tau].query.iter().enumerate() {
                            if argmax(&row[tau].row(i)[..(r + 1) * k]) == tau * k + s.label {
                                hits += 1;
                            }
                            total += 1;
                        }
                    }
                    (hits, total)
                }
            };
            out.push(hits as f64 / total.max(1) as f64);
        }
        acc.push(out);
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Length of the test sequences; may exceed the training length.
    #[serde(alias = "T")]
    pub tasks: usize,
    pub way: usize,
    pub shots: usize,
    pub queries: usize,
    pub regime: Regime,
    pub shuffle_labels: bool,
    pub episodes: usize,
    pub runs_per_episode: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tasks: 2,
            way: 5,
            shots: 1,
            queries: 5,
            regime: Regime::SingleDomain,
            shuffle_labels: false,
            episodes: 1024,
            runs_per_episode: 16,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 {
            return Err(invalid("T_test must be at least 1"));
        }
        if self.way == 0 || self.shots == 0 || self.queries == 0 {
            return Err(invalid("way, shots and queries must be positive"));
        }
        if self.episodes == 0 || self.runs_per_episode == 0 {
            return Err(invalid("episodes and runs_per_episode must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub mode: Protocol,
    /// `acc[t][i]`, `i <= t`: a task index or the end of a task range.
    pub acc: Vec<Vec<f64>>,
    pub ci95: Vec<Vec<f64>>,
    pub episodes: usize,
    pub runs_per_episode: usize,
}

impl MetricsTable {
    /// Mean and 95% half-width over per-episode accuracies.
    pub fn from_episodes(mode: Protocol, per_episode: &[Vec<Vec<f64>>], runs_per_episode: usize) -> Result<Self> {
        let n = per_episode.len();
        if n == 0 {
            return Err(invalid("no episodes"));
        }
        let shape: Vec<usize> = per_episode[0].iter().map(Vec::len).collect();
        let mut acc: Vec<Vec<f64>> = shape.iter().map(|&l| vec![0.0; l]).collect();
        let mut ci95 = acc.clone();
        for (t, row) in acc.iter_mut().enumerate() {
            for (i, cell) in row.iter_mut().enumerate() {
                let xs: Vec<f64> = per_episode.iter().map(|e| e[t][i]).collect();
                let mean = xs.iter().sum::<f64>() / n as f64;
                *cell = mean;
                if n > 1 {
                    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                    ci95[t][i] = 1.96 * (var / n as f64).sqrt();
                }
            }
        }
        Ok(Self {
            mode,
            acc,
            ci95,
            episodes: n,
            runs_per_episode,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.acc.len()
    }

    /// Long-form rows `(mode, t, tau_or_range, acc, ci95)`.
    pub fn rows(&self) -> Vec<(String, usize, String, f64, f64)> {
        let mut out = Vec::new();
        for (t, row) in self.acc.iter().enumerate() {
            for (i, &a) in row.iter().enumerate() {
                let label = match self.mode {
                    Protocol::TaskIncremental => i.to_string(),
                    Protocol::ClassIncremental => format!("0-{i}"),
                };
                out.push((self.mode.as_str().to_string(), t, label, a, self.ci95[t][i]));
            }
        }
        out
    }
}

/// Writes tables as `mode,t,tau_or_range,acc,ci95`.
pub fn write_metrics_csv(path: &Path, tables: &[&MetricsTable]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mode", "t", "tau_or_range", "acc", "ci95"])?;
    for table in tables {
        for (mode, t, r, a, c) in table.rows() {
            w.write_record([mode, t.to_string(), r, a.to_string(), c.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Both tables from one pass over the same episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub task_incremental: MetricsTable,
    pub class_incremental: MetricsTable,
}

impl Evaluation {
    pub fn table(&self, protocol: Protocol) -> &MetricsTable {
        match protocol {
            Protocol::TaskIncremental => &self.task_incremental,
            Protocol::ClassIncremental => &self.class_incremental,
        }
    }
}

fn pool_for<'p>(pools: &'p [ClassPool], domain: &str) -> Result<&'p ClassPool> {
    pools
        .iter()
        .find(|p| p.domain_id == domain)
        .ok_or_else(|| Error::Sampling(format!("no pool for domain {domain}")))
}

/// Calls `f` for every scored run of every sampled episode.
///
/// Each episode fixes its classes; runs after the first resample the support
/// and query samples of those classes.
fn for_each_run(
    pools: &[ClassPool],
    cfg: &EvalConfig,
    mut f: impl FnMut(usize, &TaskSequence) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for e in 0..cfg.episodes {
        let mut seq = sample_task_sequence(pools, cfg.tasks, cfg.regime, cfg.way, cfg.shots, cfg.queries, &mut rng)?;
        if cfg.shuffle_labels {
            shuffle_labels(&mut seq, &mut rng);
        }
        for run in 0..cfg.runs_per_episode {
            if run == 0 {
                f(e, &seq)?;
            } else {
                let tasks = seq
                    .tasks
                    .iter()
                    .map(|ep| resample_episode(pool_for(pools, &ep.domain_id)?, ep, cfg.shots, cfg.queries, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                f(
                    e,
                    &TaskSequence {
                        tasks,
                        regime: seq.regime,
                    },
                )?;
            }
        }
    }
    Ok(())
}

fn add_into(acc: &mut Option<Vec<Vec<f64>>>, x: Vec<Vec<f64>>) {
    match acc {
        None => *acc = Some(x),
        Some(a) => {
            for (ra, rx) in a.iter_mut().zip(x) {
                for (va, vx) in ra.iter_mut().zip(rx) {
                    *va += vx;
                }
            }
        }
    }
}

fn scale_all(x: &mut [Vec<f64>], s: f64) {
    x.iter_mut().flatten().for_each(|v| *v *= s);
}

/// Samples test sequences from `pools` (held-out classes) and reports both
/// protocols.
pub fn evaluate(scorer: &mut dyn Scorer, pools: &[ClassPool], cfg: &EvalConfig) -> Result<Evaluation> {
    let mut ti_eps: Vec<Vec<Vec<f64>>> = Vec::with_capacity(cfg.episodes);
    let mut ci_eps: Vec<Vec<Vec<f64>>> = Vec::with_capacity(cfg.episodes);
    let mut ti_cur: Option<Vec<Vec<f64>>> = None;
    let mut ci_cur: Option<Vec<Vec<f64>>> = None;
    let runs = cfg.runs_per_episode as f64;
    let mut current = 0;
    let mut flush = |ti: &mut Option<Vec<Vec<f64>>>, ci: &mut Option<Vec<Vec<f64>>>| {
        if let (Some(mut a), Some(mut b)) = (ti.take(), ci.take()) {
            scale_all(&mut a, 1.0 / runs);
            scale_all(&mut b, 1.0 / runs);
            ti_eps.push(a);
            ci_eps.push(b);
        }
    };
    for_each_run(pools, cfg, |e, seq| {
        if e != current {
            flush(&mut ti_cur, &mut ci_cur);
            current = e;
        }
        let scores = scorer.scores(seq)?;
        add_into(&mut ti_cur, sequence_accuracy(seq, &scores, Protocol::TaskIncremental)?);
        add_into(
            &mut ci_cur,
            sequence_accuracy(seq, &scores, Protocol::ClassIncremental)?,
        );
        Ok(())
    })?;
    flush(&mut ti_cur, &mut ci_cur);
    Ok(Evaluation {
        task_incremental: MetricsTable::from_episodes(Protocol::TaskIncremental, &ti_eps, cfg.runs_per_episode)?,
        class_incremental: MetricsTable::from_episodes(Protocol::ClassIncremental, &ci_eps, cfg.runs_per_episode)?,
    })
}

/// Accuracy of recovering the underlying pool class of every query at the
/// last step, with predictions over all `(task, label)` pairs. Labels of
/// different tasks that name the same class count as the same answer.
/// Returns the mean over episodes and its 95% half-width.
pub fn class_level_accuracy(scorer: &mut dyn Scorer, pools: &[ClassPool], cfg: &EvalConfig) -> Result<(f64, f64)> {
    let mut per_episode = vec![0.0; cfg.episodes];
    for_each_run(pools, cfg, |e, seq| {
        let scores = scorer.scores(seq)?;
        let last = scores.last().ok_or_else(|| invalid("empty sequence"))?;
        let k = seq.tasks[0].way();
        let mut hits = 0usize;
        let mut total = 0usize;
        for (tau, task) in seq.tasks.iter().enumerate() {
            for (i, s) in task.query.iter().enumerate() {
                let p = argmax(last[tau].row(i));
                let (pt, pk) = (p / k, p % k);
                let predicted = (&seq.tasks[pt].domain_id, &seq.tasks[pt].class_map[pk]);
                hits += usize::from(predicted == (&task.domain_id, &task.class_map[s.label]));
                total += 1;
            }
        }
        per_episode[e] += hits as f64 / total as f64 / cfg.runs_per_episode as f64;
        Ok(())
    })?;
    let t = MetricsTable::from_episodes(
        Protocol::ClassIncremental,
        &per_episode.iter().map(|&a| vec![vec![a]]).collect::<Vec<_>>(),
        cfg.runs_per_episode,
    )?;
    Ok((t.acc[0][0], t.ci95[0][0]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackwardTransfer {
    /// `(τ, t, acc[t][τ] - acc[τ][τ])` for every `t > τ`.
    pub deltas: Vec<(usize, usize, f64)>,
    /// Mean delta; zero when no pair exists.
    pub mean: f64,
}

pub fn backward_transfer(table: &MetricsTable) -> Result<BackwardTransfer> {
    if table.mode != Protocol::TaskIncremental {
        return Err(invalid("backward transfer needs a task-incremental table"));
    }
    let mut deltas = Vec::new();
    for (t, row) in table.acc.iter().enumerate() {
        for tau in 0..t {
            deltas.push((tau, t, row[tau] - table.acc[tau][tau]));
        }
    }
    let mean = if deltas.is_empty() {
        0.0
    } else {
        deltas.iter().map(|d| d.2).sum::<f64>() / deltas.len() as f64
    };
    Ok(BackwardTransfer { deltas, mean })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MamlReport {
    pub max_rel_err_w: f64,
    pub max_rel_err_b: f64,
    /// Largest relative deviation of the update rows from
    /// `(γ/n) (N_k c_k - (1/|C|) Σ_x f(x))`.
    pub prototype_alignment: f64,
    /// Updates obtained by autodiff, `[C, d]` and `[C]`.
    pub delta_w: Tensor,
    pub delta_b: Tensor,
}

fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Largest entrywise difference over `scale`; zero when `scale` is zero.
fn rel_err(a: &[f64], b: &[f64], scale: f64) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// One SGD step of a softmax cross-entropy logits layer over fixed features,
/// compared against its closed form.
///
/// `features` is `[n, d]`; `w0` is `[C, d]` and `b0` is `[C]`, and every row
/// of them must be the same so that the initial prediction ignores labels.
pub fn maml_one_step_check(
    features: &Tensor,
    labels: &[usize],
    w0: &Tensor,
    b0: &Tensor,
    gamma: f64,
) -> Result<MamlReport> {
    let (n, d) = (features.rows(), features.cols());
    let c = w0.rows();
    if n == 0 || labels.len() != n || w0.cols() != d || b0.len() != c || c == 0 {
        return Err(Error::Shape("inconsistent one-step check inputs".into()));
    }
    if labels.iter().any(|&y| y >= c) {
        return Err(invalid("label outside the logits layer"));
    }
    let same_rows = (1..c).all(|k| w0.row(k) == w0.row(0)) && b0.data().iter().all(|&v| v == b0.data()[0]);
    if !same_rows {
        return Err(invalid("logits layer must start label-independent"));
    }
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let w = g.param(w0.clone());
    let b = g.param(b0.clone());
    let z = g.matmul_nt(f, w);
    let z = g.add_bias(z, b);
    let lp = g.log_softmax_rows(z);
    let m = g.pick_mean(lp, labels);
    let loss = g.scale(m, -1.0);
    let grads = g.backward(loss);
    let dw: Vec<f64> = grads.get_or_zeros(w, c * d).iter().map(|x| -gamma * x).collect();
    let db: Vec<f64> = grads.get_or_zeros(b, c).iter().map(|x| -gamma * x).collect();

    let inv_c = 1.0 / c as f64;
    let mut cw = vec![0.0; c * d];
    let mut cb = vec![0.0; c];
    for (i, &y) in labels.iter().enumerate() {
        for k in 0..c {
            let coef = gamma / n as f64 * (f64::from(u8::from(y == k)) - inv_c);
            cb[k] += coef;
            for (o, x) in cw[k * d..(k + 1) * d].iter_mut().zip(features.row(i)) {
                *o += coef * x;
            }
        }
    }

    let mut counts = vec![0usize; c];
    let mut mean_all = vec![0.0; d];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (m, x) in mean_all.iter_mut().zip(features.row(i)) {
            *m += x;
        }
    }
    let mut from_protos = vec![0.0; c * d];
    for k in 0..c {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == k).collect();
        for j in 0..d {
            let proto = if members.is_empty() {
                0.0
            } else {
                members.iter().map(|&i| features.row(i)[j]).sum::<f64>() / counts[k] as f64
            };
            from_protos[k * d + j] = gamma / n as f64 * (counts[k] as f64 * proto - inv_c * mean_all[j]);
        }
    }
    // Errors are relative to the largest entry of the whole closed-form
    // update; the bias part alone is exactly zero for balanced labels.
    let scale = max_abs(&cw).max(max_abs(&cb));
    Ok(MamlReport {
        max_rel_err_w: rel_err(&dw, &cw, scale),
        max_rel_err_b: rel_err(&db, &cb, scale),
        prototype_alignment: rel_err(&dw, &from_protos, scale),
        delta_w: Tensor::new(vec![c, d], dw),
        delta_b: Tensor::new(vec![c], db),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Prototype,
    Query,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub kind: EmbeddingKind,
    /// Step whose weights produced the embedding.
    pub step: usize,
    pub task: usize,
    pub class: usize,
    pub values: Vec<f64>,
}

/// Prototype and query embeddings under the weights of every step. Prototypes are the
/// frozen ones, each computed at its own step.
pub fn embedding_records(state: &GeneratorState, seq: &TaskSequence) -> Result<Vec<EmbeddingRecord>> {
    let per_step = unroll(state, seq)?;
    let shape = state.arch.input;
    let mut protos: Vec<Tensor> = Vec::new();
    let mut out = Vec::new();
    for (t, current) in per_step.iter().enumerate() {
        let task = &seq.tasks[t];
        let e = forward_embed(current, &images_tensor(&task.support, shape))?;
        protos.push(class_means(&e, &task.support_labels(), task.way())?);
        for (tau, p) in protos.iter().enumerate() {
            for k in 0..p.rows() {
                out.push(EmbeddingRecord {
                    kind: EmbeddingKind::Prototype,
                    step: t,
                    task: tau,
                    class: k,
                    values: p.row(k).to_vec(),
                });
            }
        }
        for tau in 0..=t {
            let q = &seq.tasks[tau].query;
            let qe = forward_embed(current, &images_tensor(q, shape))?;
            for (i, s) in q.iter().enumerate() {
                out.push(EmbeddingRecord {
                    kind: EmbeddingKind::Query,
                    step: t,
                    task: tau,
                    class: s.label,
                    values: qe.row(i).to_vec(),
                });
            }
        }
    }
    Ok(out)
}

pub fn export_embeddings(state: &GeneratorState, seq: &TaskSequence, path: &Path) -> Result<usize> {
    let records = embedding_records(state, seq)?;
    write_embeddings(path, &records, state.arch.embed_dim)?;
    Ok(records.len())
}

pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord], dim: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["kind", "step", "task", "class"].map(String::from).to_vec();
    header.extend((0..dim).map(|j| format!("e{j}")));
    w.write_record(&header)?;
    for r in records {
        if r.values.len() != dim {
            return Err(Error::Shape("embedding width differs from header".into()));
        }
        let kind = match r.kind {
            EmbeddingKind::Prototype => "prototype",
            EmbeddingKind::Query => "query",
        };
        let mut row = vec![
            kind.to_string(),
            r.step.to_string(),
            r.task.to_string(),
            r.class.to_string(),
        ];
        // `{}` prints the shortest string that parses back to the same f64.
        row.extend(r.values.iter().map(|v| format!("{v}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let bad = |m: &str| Error::Load {
        path: path.display().to_string(),
        reason: m.to_string(),
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let kind = match rec.get(0) {
            Some("prototype") => EmbeddingKind::Prototype,
            Some("query") => EmbeddingKind::Query,
            _ => return Err(bad("unknown record kind")),
        };
        let num =
            |i: usize| -> Result<usize> { rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad index")) };
        let values = rec
            .iter()
            .skip(4)
            .map(|s| s.parse::<f64>().map_err(|_| bad("bad value")))
            .collect::<Result<Vec<_>>>()?;
        out.push(EmbeddingRecord {
            kind,
            step: num(1)?,
            task: num(2)?,
            class: num(3)?,
            values,
        });
    }
    Ok(out)
}

/// Line chart of a table, one series per step. Steps below `trained_tasks`
/// use round markers, later (extrapolated) steps use diamonds.
pub fn plot_svg(table: &MetricsTable, trained_tasks: usize, title: &str) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 140.0, 40.0, 50.0);
    let n = table.num_steps().max(1);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x_at = |i: usize| {
        left + if n == 1 {
            pw / 2.0
        } else {
            pw * i as f64 / (n - 1) as f64
        }
    };
    let y_at = |a: f64| top + ph * (1.0 - a.clamp(0.0, 1.0));
    let colors = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    ];
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    for i in 0..=5 {
        let a = i as f64 / 5.0;
        let y = y_at(a);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##,
            left + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{a:.1}</text>"#,
            left - 6.0,
            y + 4.0
        );
    }
    for i in 0..n {
        let label = match table.mode {
            Protocol::TaskIncremental => format!("{i}"),
            Protocol::ClassIncremental => format!("0-{i}"),
        };
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#,
            x_at(i),
            top + ph + 18.0
        );
    }
    let xlabel = match table.mode {
        Protocol::TaskIncremental => "task",
        Protocol::ClassIncremental => "tasks",
    };
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    for (t, row) in table.acc.iter().enumerate() {
        let color = colors[t % colors.len()];
        let pts: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, &a)| format!("{:.1},{:.1}", x_at(i), y_at(a)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        for (i, &a) in row.iter().enumerate() {
            let (x, y) = (x_at(i), y_at(a));
            if t < trained_tasks {
                let _ = writeln!(s, r#"<circle cx="{x:.1}" cy="{y:.1}" r="4" fill="{color}"/>"#);
            } else {
                let _ = writeln!(
                    s,
                    r#"<polygon points="{:.1},{:.1} {:.1},{:.1} {:.1},{:.1} {:.1},{:.1}" fill="{color}"/>"#,
                    x,
                    y - 5.0,
                    x + 5.0,
                    y,
                    x,
                    y + 5.0,
                    x - 5.0,
                    y
                );
            }
        }
        let ly = top + 16.0 * t as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            w - right + 15.0,
            w - right + 35.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">weights {t}</text>"#,
            w - right + 40.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_plot(path: &Path, table: &MetricsTable, trained_tasks: usize, title: &str) -> Result<()> {
    fs::write(path, plot_svg(table, trained_tasks, title))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{make_synthetic_pool, ImageShape};

    fn pools() -> Vec<ClassPool> {
        vec![make_synthetic_pool(12, 8, ImageShape::new(6, 6, 1), 2).unwrap()]
    }

    fn small_cfg(tasks: usize) -> EvalConfig {
        EvalConfig {
            tasks,
            way: 3,
            shots: 1,
            queries: 2,
            episodes: 40,
            runs_per_episode: 2,
            ..Default::default()
        }
    }

    #[test]
    fn oracle_scores_perfectly() {
        let ev = evaluate(&mut OracleScorer, &pools(), &small_cfg(3)).unwrap();
        for table in [&ev.task_incremental, &ev.class_incremental] {
            assert!(table.acc.iter().flatten().all(|&a| a == 1.0));
            assert!(table.ci95.iter().flatten().all(|&c| c == 0.0));
        }
    }

    #[test]
    fn random_scores_near_chance() {
        let mut cfg = small_cfg(2);
        cfg.episodes = 400;
        let mut sc = RandomScorer {
            rng: ChaCha8Rng::seed_from_u64(9),
        };
        let ev = evaluate(&mut sc, &pools(), &cfg).unwrap();
        let ci = &ev.class_incremental;
        for t in 0..2 {
            let chance = 1.0 / (3.0 * (t + 1) as f64);
            let se = ci.ci95[t][t] / 1.96;
            assert!((ci.acc[t][t] - chance).abs() < 4.0 * se, "{} vs {chance}", ci.acc[t][t]);
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_rejects_empty() {
        let a = evaluate(&mut OracleScorer, &pools(), &small_cfg(2)).unwrap();
        let b = evaluate(&mut OracleScorer, &pools(), &small_cfg(2)).unwrap();
        assert_eq!(a, b);
        assert!(evaluate(&mut OracleScorer, &pools(), &small_cfg(0)).is_err());
    }

    fn table(acc: Vec<Vec<f64>>) -> MetricsTable {
        MetricsTable {
            mode: Protocol::TaskIncremental,
            ci95: acc.iter().map(|r| vec![0.0; r.len()]).collect(),
            acc,
            episodes: 1,
            runs_per_episode: 1,
        }
    }

    #[test]
    fn backward_transfer_arithmetic() {
        let bt = backward_transfer(&table(vec![vec![0.75], vec![0.8, 0.7]])).unwrap();
        assert_eq!(bt.deltas.len(), 1);
        assert!((bt.deltas[0].2 - 0.05).abs() < 1e-12);
        let flat = backward_transfer(&table(vec![vec![0.5], vec![0.5, 0.5], vec![0.5, 0.5, 0.5]])).unwrap();
        assert!(flat.deltas.iter().all(|d| d.2 == 0.0));
        let mut ci = table(vec![vec![0.5]]);
        ci.mode = Protocol::ClassIncremental;
        assert!(backward_transfer(&ci).is_err());
    }

    #[test]
    fn one_step_hand_case() {
        let f = Tensor::new(vec![1, 2], vec![0.3, -1.0]);
        let r = maml_one_step_check(&f, &[0], &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2]), 0.5).unwrap();
        assert!((r.delta_b.data()[0] - 0.25).abs() < 1e-12);
        assert!((r.delta_b.data()[1] + 0.25).abs() < 1e-12);
        let zero = maml_one_step_check(&f, &[0], &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2]), 0.0).unwrap();
        assert_eq!(zero.max_rel_err_w, 0.0);
        assert!(zero.delta_w.data().iter().all(|&v| v == 0.0));
        let skew = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        assert!(maml_one_step_check(&f, &[0], &skew, &Tensor::zeros(&[2]), 0.1).is_err());
    }

    #[test]
    fn plot_uses_both_marker_kinds() {
        let t = table(vec![vec![0.9], vec![0.8, 0.85], vec![0.7, 0.8, 0.75]]);
        let svg = plot_svg(&t, 2, "a < b");
        assert!(svg.contains("<circle"));
        assert!(svg.contains("<polygon"));
        assert!(svg.contains("a &lt; b"));
    }

    #[test]
    fn csv_rows_are_long_form() {
        let mut t = table(vec![vec![0.9], vec![0.8, 0.85]]);
        t.mode = Protocol::ClassIncremental;
        let rows = t.rows();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].2, "0-1");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        write_metrics_csv(&p, &[&t]).unwrap();
        let text = fs::read_to_string(p).unwrap();
        assert!(text.starts_with("mode,t,tau_or_range,acc,ci95"));
    }
}
