//! Reference learners: a fixed prototypical CNN and the merged-task generator.

use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Graph;
use crate::episodes::{images_tensor, sample_episode, ClassPool, Episode, Sample, TaskSequence};
use crate::error::{invalid, Error, Result};
use crate::eval::{sequence_accuracy, stack_rows, Protocol, Scorer};
use crate::generator::{ht_generate, GeneratorState};
use crate::learner::{class_means, prototype_logprobs, TrainConfig, DIVERGENCE_LIMIT};
use crate::target_cnn::{embed, forward_embed, shape_table, Arch, WeightBundle};
use crate::tensor::Tensor;

/// He-initialized conv kernels, unit batch-norm scale, zero offsets and a
/// fan-in scaled dense layer.
pub fn random_weights(arch: &Arch, seed: u64) -> Result<WeightBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let tensors = shape_table(arch)?
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("kernel") {
                let std = (2.0 / (9 * shape[2]) as f64).sqrt();
                (0..n).map(|_| std * normal.sample(&mut rng)).collect()
            } else if name.ends_with("bn_scale") {
                vec![1.0; n]
            } else if name == "dense.w" {
                let std = (1.0 / shape[0] as f64).sqrt();
                (0..n).map(|_| std * normal.sample(&mut rng)).collect()
            } else {
                vec![0.0; n]
            };
            Tensor::new(shape, data)
        })
        .collect();
    WeightBundle::new(arch.clone(), tensors)
}

/// One fixed CNN shared by every task.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstPnState {
    pub weights: WeightBundle,
    /// Way of the training episodes after any fallback.
    pub train_way: usize,
    pub step: u64,
}

impl ConstPnState {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.weights.save(dir, "constpn")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let weights = WeightBundle::load(dir, "constpn")?;
        Ok(Self {
            weights,
            train_way: 0,
            step: 0,
        })
    }
}

/// Way used for training: `multiplier * way`, capped by the smallest pool.
pub fn constpn_way(pools: &[ClassPool], way: usize, multiplier: usize) -> Result<usize> {
    let cap = pools.iter().map(ClassPool::num_classes).min().unwrap_or(0);
    if cap < 2 {
        return Err(Error::Sampling("pools need at least two classes".into()));
    }
    let want = way * multiplier.max(1);
    if want > cap {
        warn!("{want}-way training episodes not possible; falling back to {cap}-way");
        Ok(cap)
    } else {
        Ok(want)
    }
}

fn prototype_episode_loss(
    g: &mut Graph,
    weights: &crate::target_cnn::WeightVars,
    arch: &Arch,
    ep: &Episode,
) -> crate::autodiff::Var {
    let way = ep.way();
    let s = g.constant(images_tensor(&ep.support, arch.input));
    let q = g.constant(images_tensor(&ep.query, arch.input));
    let se = embed(g, weights, s);
    let qe = embed(g, weights, q);
    let n = ep.support.len();
    let mut counts = vec![0usize; way];
    for x in &ep.support {
        counts[x.label] += 1;
    }
    let mut avg = vec![0.0; way * n];
    for (i, x) in ep.support.iter().enumerate() {
        avg[x.label * n + i] = 1.0 / counts[x.label] as f64;
    }
    let a = g.constant(Tensor::new(vec![way, n], avg));
    let protos = g.matmul(a, se);
    let d = g.sq_dists(qe, protos);
    let logits = g.scale(d, -1.0);
    let lp = g.log_softmax_rows(logits);
    let targets: Vec<usize> = ep.query.iter().map(|x| x.label).collect();
    let m = g.pick_mean(lp, &targets);
    g.scale(m, -1.0)
}

/// Trains the fixed CNN with the prototypical loss on single wide episodes.
/// Uses `cfg.way`, `shots`, `queries`, learning-rate schedule, step count and
/// seed; the task count and objective are ignored.
pub fn constpn_train(pools: &[ClassPool], arch: &Arch, cfg: &TrainConfig, multiplier: usize) -> Result<ConstPnState> {
    cfg.validate()?;
    if pools.is_empty() {
        return Err(invalid("no pools"));
    }
    let way = constpn_way(pools, cfg.way, multiplier)?;
    let mut weights = random_weights(arch, cfg.seed ^ 0x5eed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for step in 0..cfg.total_steps {
        let pool = &pools[rng.random_range(0..pools.len())];
        let ep = sample_episode(pool, way, cfg.shots, cfg.queries, &mut rng)?;
        let mut g = Graph::new();
        let wv = weights.bind(&mut g, true);
        let loss = prototype_episode_loss(&mut g, &wv, arch, &ep);
        let value = g.value(loss).item();
        if !value.is_finite() || value > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                step,
                reason: format!("loss {value}"),
            });
        }
        let grads = g.backward(loss);
        let lr = cfg.lr_at(step);
        for (t, v) in weights.tensors.iter_mut().zip(wv.flat()) {
            let gr = grads.get_or_zeros(v, t.len());
            if gr.iter().any(|x| !x.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    reason: "non-finite gradient".into(),
                });
            }
            for (p, d) in t.data_mut().iter_mut().zip(gr) {
                *p -= lr * d;
            }
        }
        if (step + 1) % 100 == 0 {
            info!("constpn step {} loss {value:.4}", step + 1);
        }
    }
    Ok(ConstPnState {
        weights,
        train_way: way,
        step: cfg.total_steps,
    })
}

/// Each task's prototypes come from its own support under the fixed CNN.
pub struct ConstPnScorer<'a> {
    pub state: &'a ConstPnState,
}

impl Scorer for ConstPnScorer<'_> {
    fn scores(&mut self, seq: &TaskSequence) -> Result<Vec<Vec<Tensor>>> {
        let w = &self.state.weights;
        let shape = w.arch.input;
        let protos = seq
            .tasks
            .iter()
            .map(|t| {
                let e = forward_embed(w, &images_tensor(&t.support, shape))?;
                class_means(&e, &t.support_labels(), t.way())
            })
            .collect::<Result<Vec<_>>>()?;
        let queries = seq
            .tasks
            .iter()
            .map(|t| forward_embed(w, &images_tensor(&t.query, shape)))
            .collect::<Result<Vec<_>>>()?;
        (0..seq.len())
            .map(|t| {
                let stacked = stack_rows(&protos[..=t]);
                (0..=t).map(|tau| prototype_logprobs(&queries[tau], &stacked)).collect()
            })
            .collect()
    }
}

/// Accuracy matrix of the fixed CNN on one sequence.
pub fn constpn_eval(state: &ConstPnState, tasks: &TaskSequence, protocol: Protocol) -> Result<Vec<Vec<f64>>> {
    let scores = ConstPnScorer { state }.scores(tasks)?;
    sequence_accuracy(tasks, &scores, protocol)
}

/// Support of tasks `0..=upto` as one episode with labels `τ * K + k`.
pub fn merge_supports(seq: &TaskSequence, upto: usize) -> Vec<Sample> {
    let k = seq.tasks[0].way();
    seq.tasks[..=upto]
        .iter()
        .enumerate()
        .flat_map(|(tau, t)| {
            t.support.iter().map(move |s| Sample {
                label: tau * k + s.label,
                ..s.clone()
            })
        })
        .collect()
}

/// A single-task generator given all supports so far as one merged episode
/// at each step.
pub struct MergedHtScorer<'a> {
    pub state: &'a GeneratorState,
}

impl Scorer for MergedHtScorer<'_> {
    fn scores(&mut self, seq: &TaskSequence) -> Result<Vec<Vec<Tensor>>> {
        let k = seq.tasks[0].way();
        let shape = self.state.arch.input;
        (0..seq.len())
            .map(|t| {
                let merged_way = (t + 1) * k;
                if merged_way > self.state.cfg.max_way {
                    return Err(invalid(format!(
                        "merged way {merged_way} exceeds generator.max_way {}",
                        self.state.cfg.max_way
                    )));
                }
                let support = merge_supports(seq, t);
                let current = ht_generate(self.state, &support)?;
                let e = forward_embed(&current, &images_tensor(&support, shape))?;
                let labels: Vec<usize> = support.iter().map(|s| s.label).collect();
                let protos = class_means(&e, &labels, merged_way)?;
                (0..=t)
                    .map(|tau| {
                        let q = forward_embed(&current, &images_tensor(&seq.tasks[tau].query, shape))?;
                        prototype_logprobs(&q, &protos)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Accuracy matrix of the merged-task generator on one sequence.
pub fn merged_ht_eval(state: &GeneratorState, tasks: &TaskSequence, protocol: Protocol) -> Result<Vec<Vec<f64>>> {
    let scores = MergedHtScorer { state }.scores(tasks)?;
    sequence_accuracy(tasks, &scores, protocol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{make_synthetic_pool, sample_task_sequence, ImageShape, Regime};
    use crate::generator::{init_generator, GeneratorConfig};

    fn pool() -> ClassPool {
        make_synthetic_pool(10, 6, ImageShape::new(8, 8, 1), 4).unwrap()
    }

    #[test]
    fn fallback_way() {
        assert_eq!(constpn_way(&[pool()], 5, 5).unwrap(), 10);
        assert_eq!(constpn_way(&[pool()], 2, 5).unwrap(), 10);
        assert_eq!(constpn_way(&[pool()], 1, 5).unwrap(), 5);
    }

    #[test]
    fn constpn_is_stateless_and_order_invariant() {
        let arch = Arch::new(2, 4, 6, ImageShape::new(8, 8, 1));
        let cfg = TrainConfig {
            way: 2,
            shots: 1,
            queries: 2,
            total_steps: 3,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let st = constpn_train(&[pool()], &arch, &cfg, 5).unwrap();
        assert_eq!(st.train_way, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = sample_task_sequence(&[pool()], 3, Regime::SingleDomain, 3, 1, 2, &mut rng).unwrap();
        let a = constpn_eval(&st, &seq, Protocol::TaskIncremental).unwrap();
        assert_eq!(a, constpn_eval(&st, &seq, Protocol::TaskIncremental).unwrap());
        let mut rev = seq.clone();
        rev.tasks.reverse();
        let b = constpn_eval(&st, &rev, Protocol::TaskIncremental).unwrap();
        for tau in 0..3 {
            assert_eq!(a[2][tau], b[2][2 - tau]);
        }
        // The fixed network has no memory: task scores do not change with t.
        assert_eq!(a[0][0], a[2][0]);
    }

    #[test]
    fn merged_support_label_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = sample_task_sequence(&[pool()], 2, Regime::SingleDomain, 5, 1, 1, &mut rng).unwrap();
        let merged = merge_supports(&seq, 1);
        assert_eq!(merged.len(), 10);
        let mut labels: Vec<usize> = merged.iter().map(|s| s.label).collect();
        labels.sort();
        assert_eq!(labels, (0..10).collect::<Vec<_>>());
        let arch = Arch::new(2, 4, 6, ImageShape::new(8, 8, 1));
        let mut gcfg = GeneratorConfig::desk();
        gcfg.max_way = 10;
        let st = init_generator(&gcfg, &arch, 0).unwrap();
        let acc = merged_ht_eval(&st, &seq, Protocol::ClassIncremental).unwrap();
        assert_eq!(acc.len(), 2);
        gcfg.max_way = 6;
        let small = init_generator(&gcfg, &arch, 0).unwrap();
        assert!(merged_ht_eval(&small, &seq, Protocol::ClassIncremental).is_err());
    }
}
