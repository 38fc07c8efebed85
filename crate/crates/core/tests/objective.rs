use cht_core::episodes::*;
use cht_core::generator::*;
use cht_core::learner::*;
use cht_core::target_cnn::{forward_embed, Arch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        feat_layers: 2,
        feat_channels: 4,
        act_layers: 1,
        act_channels: 4,
        num_layers: 1,
        num_heads: 2,
        model_dim: 8,
        ff_dim: 16,
        label_embed_dim: 4,
        max_way: 6,
    }
}

fn setup(tasks: usize, seed: u64) -> (GeneratorState, TaskSequence) {
    let shape = ImageShape::new(8, 8, 1);
    let pool = make_synthetic_pool(12, 6, shape, seed).unwrap();
    let arch = Arch::new(2, 2, 4, shape);
    let state = init_generator(&tiny_generator(), &arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let seq = sample_task_sequence(&[pool], tasks, Regime::SingleDomain, 3, 2, 2, &mut rng).unwrap();
    (state, seq)
}

/// Brute-force objective: explicit loops over steps, tasks, queries and
/// prototypes on top of concrete forward passes.
fn oracle(state: &GeneratorState, seq: &TaskSequence, objective: Objective) -> f64 {
    let shape = seq.tasks[0].shape;
    let way = seq.tasks[0].way();
    let weights = unroll(state, seq).unwrap();
    let mut protos: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut total = 0.0;
    for (t, current) in weights.iter().enumerate() {
        let support = &seq.tasks[t].support;
        let emb = forward_embed(current, &images_tensor(support, shape)).unwrap();
        let mut p = vec![vec![0.0; emb.cols()]; way];
        let mut counts = vec![0.0; way];
        for (i, s) in support.iter().enumerate() {
            counts[s.label] += 1.0;
            for (j, v) in emb.row(i).iter().enumerate() {
                p[s.label][j] += v;
            }
        }
        for k in 0..way {
            for v in p[k].iter_mut() {
                *v /= counts[k];
            }
        }
        protos.push(p);
        for tau in 0..=t {
            let query = &seq.tasks[tau].query;
            let qe = forward_embed(current, &images_tensor(query, shape)).unwrap();
            let mut nll = 0.0;
            for (i, s) in query.iter().enumerate() {
                let candidates: Vec<(usize, &Vec<f64>)> = match objective {
                    Objective::ClassIncremental => protos
                        .iter()
                        .enumerate()
                        .flat_map(|(r, ps)| ps.iter().enumerate().map(move |(k, c)| (r * way + k, c)))
                        .collect(),
                    _ => protos[tau].iter().enumerate().collect(),
                };
                let target = match objective {
                    Objective::ClassIncremental => tau * way + s.label,
                    _ => s.label,
                };
                let logits: Vec<f64> = candidates
                    .iter()
                    .map(|(_, c)| -c.iter().zip(qe.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
                let pos = candidates.iter().position(|(id, _)| *id == target).unwrap();
                nll += lse - logits[pos];
            }
            total += nll / query.len() as f64;
        }
    }
    total
}

#[test]
fn objective_matches_nested_loop_oracle() {
    for tasks in 1..=3 {
        for objective in [Objective::ClassIncremental, Objective::TaskIncremental] {
            let (state, seq) = setup(tasks, 3 + tasks as u64);
            let cfg = TrainConfig {
                objective,
                ..Default::default()
            };
            let got = episode_objective(&state, &seq, &cfg).unwrap();
            let want = oracle(&state, &seq, objective);
            let rel = (got.loss - want).abs() / want.abs().max(1e-12);
            assert!(rel <= 1e-5, "T={tasks} {objective:?}: {} vs {want}", got.loss);
            assert_eq!(got.matrix.num_cells(), tasks * (tasks + 1) / 2);
        }
    }
}

#[test]
fn single_task_reduces_to_plain_generation() {
    let (state, seq) = setup(1, 9);
    let unrolled = unroll(&state, &seq).unwrap();
    let direct = ht_generate(&state, &seq.tasks[0].support).unwrap();
    assert_eq!(unrolled[0], direct);
    let out = episode_objective(&state, &seq, &TrainConfig::default()).unwrap();
    assert_eq!(out.weights[0], direct);
}

/// Hands out NaN images for any task older than the asking step.
struct Poisoned<'a>(&'a TaskSequence, Vec<Vec<Sample>>);

impl<'a> Poisoned<'a> {
    fn new(seq: &'a TaskSequence) -> Self {
        let bad = seq
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
        Self(seq, bad)
    }
}

impl SupportSource for Poisoned<'_> {
    fn support(&self, task: usize, step: usize) -> &[Sample] {
        if task < step {
            &self.1[task]
        } else {
            &self.0.tasks[task].support
        }
    }
}

#[test]
fn past_supports_are_never_read_after_their_step() {
    let (state, seq) = setup(3, 21);
    let cfg = TrainConfig::default();
    let clean = episode_objective(&state, &seq, &cfg).unwrap();
    let poisoned = episode_objective_from(&state, &seq, &Poisoned::new(&seq), &cfg).unwrap();
    assert_eq!(clean.loss.to_bits(), poisoned.loss.to_bits());
    assert_eq!(clean.bank, poisoned.bank);

    // The poison is live: re-embedding old supports does read it.
    let recomputed = TrainConfig {
        prototype_mode: PrototypeMode::Recomputed,
        ..cfg
    };
    if let Ok(out) = episode_objective_from(&state, &seq, &Poisoned::new(&seq), &recomputed) {
        assert_ne!(out.loss.to_bits(), clean.loss.to_bits());
    }
}

#[test]
fn frozen_prototypes_survive_later_tasks() {
    let (state, seq) = setup(3, 33);
    let cfg = TrainConfig::default();
    let mut banks = Vec::new();
    for upto in 1..=3 {
        let prefix = TaskSequence {
            tasks: seq.tasks[..upto].to_vec(),
            regime: seq.regime,
        };
        banks.push(episode_objective(&state, &prefix, &cfg).unwrap().bank);
    }
    for later in 1..3 {
        for task in 0..later {
            let a = banks[task].task(task).unwrap();
            let b = banks[later].task(task).unwrap();
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(banks[later].frozen_at(task), Some(task));
        }
    }
}

#[test]
fn cross_entropy_at_uniform_logits_is_log_way() {
    let (mut state, seq) = setup(2, 5);
    // Zero read-out for the dense layer gives all-zero logits.
    let arch = Arch::new(2, 2, 3, state.arch.input);
    state = init_generator(&tiny_generator(), &arch, 5).unwrap();
    for (name, p) in state.names.clone().iter().zip(state.params.iter_mut()) {
        if name.starts_with("layer2.readout") {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let loss = cross_entropy_objective(&state, &seq, &TrainConfig::default()).unwrap();
    let want = 3.0 * 3f64.ln();
    assert!((loss - want).abs() < 1e-9, "{loss} vs {want}");
}
