//! Numerical verifiers behind `cht check`.

use anyhow::Result;
use cht_core::episodes::{images_tensor, make_synthetic_pool, sample_task_sequence, ImageShape, Regime, TaskSequence};
use cht_core::eval::maml_one_step_check;
use cht_core::generator::{init_generator, unroll, GenerateOptions, GeneratorConfig, GeneratorState};
use cht_core::learner::{episode_objective, gradient_check, Objective, TrainConfig};
use cht_core::target_cnn::{forward_embed, Arch};
use cht_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const MAML_TOLERANCE: f64 = 1e-5;
pub const GRADIENT_TOLERANCE: f64 = 1e-3;
pub const ORACLE_TOLERANCE: f64 = 1e-5;

/// Outcome of one verifier: the measured error per item and the verdict.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub tolerance: f64,
    pub items: Vec<(String, f64)>,
}

impl CheckReport {
    pub fn worst(&self) -> f64 {
        self.items.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.items.is_empty() && self.items.iter().all(|(_, e)| *e <= self.tolerance)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (label, err) in &self.items {
            let mark = if *err <= self.tolerance { "ok" } else { "FAIL" };
            s.push_str(&format!("  {label:<40} {err:.3e} {mark}\n"));
        }
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        s.push_str(&format!(
            "{verdict} {}: max error {:.3e} (tolerance {:.0e})\n",
            self.name,
            self.worst(),
            self.tolerance
        ));
        s
    }
}

/// One-step logits-layer update against its closed form over `configs`
/// random `(classes, shots, dim, step size)` draws.
pub fn maml(configs: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(configs);
    for _ in 0..configs {
        let c = rng.random_range(2..=8);
        let shots = rng.random_range(1..=5);
        let d = rng.random_range(1..=16);
        let gamma: f64 = rng.random_range(0.01..2.0);
        let n = c * shots;
        let features = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.sample(StandardNormal)).collect());
        let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        for i in (1..n).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        let row: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.1).collect();
        let w0 = Tensor::new(vec![c, d], row.iter().cycle().take(c * d).copied().collect());
        let b0 = Tensor::full(&[c], rng.random_range(-1.0..1.0));
        let r = maml_one_step_check(&features, &labels, &w0, &b0, gamma)?;
        let err = r.max_rel_err_w.max(r.max_rel_err_b).max(r.prototype_alignment);
        items.push((format!("C={c} N={shots} d={d} gamma={gamma:.3}"), err));
    }
    Ok(CheckReport {
        name: "maml",
        tolerance: MAML_TOLERANCE,
        items,
    })
}

/// Generator small enough for exhaustive numerical checks.
pub fn tiny_generator(model_dim: usize, heads: usize, max_way: usize) -> GeneratorConfig {
    GeneratorConfig {
        feat_layers: 1,
        feat_channels: 3,
        act_layers: 1,
        act_channels: 3,
        num_layers: 1,
        num_heads: heads,
        model_dim,
        ff_dim: 2 * model_dim,
        label_embed_dim: 3,
        max_way,
    }
}

/// Tiny state plus a `tasks`-long sequence of `way`-way `shots`-shot tasks.
pub fn tiny_problem(
    tasks: usize,
    way: usize,
    shots: usize,
    channels: usize,
    embed_dim: usize,
    seed: u64,
) -> Result<(GeneratorState, TaskSequence)> {
    let shape = ImageShape::new(8, 8, 1);
    let pool = make_synthetic_pool(4 * way.max(3), shots + 4, shape, seed)?;
    let arch = Arch::new(2, channels, embed_dim, shape);
    let state = init_generator(&tiny_generator(8, 1, way.max(4)), &arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let seq = sample_task_sequence(&[pool], tasks, Regime::SingleDomain, way, shots, 2, &mut rng)?;
    Ok((state, seq))
}

/// Groups tensor names by their leading component, `layer<l>` and `block<i>`
/// kept whole.
fn group_of(name: &str) -> String {
    name.split('.').next().unwrap_or(name).to_string()
}

/// Autodiff against central differences on the unrolled `tasks`-step
/// objective. With `ablate_support` the support tokens are zeroed, so only
/// the previous-weight path carries gradient into later steps.
pub fn gradients(tasks: usize, ablate_support: bool, seed: u64) -> Result<CheckReport> {
    let (state, seq) = tiny_problem(tasks, 3, 1, 2, 3, seed)?;
    let cfg = TrainConfig::default();
    let opts = GenerateOptions { ablate_support };
    let report = gradient_check(&state, &seq, &cfg, opts, 4, 1e-5, seed)?;
    let mut groups: Vec<(String, f64)> = Vec::new();
    for r in report {
        let g = group_of(&r.name);
        match groups.iter_mut().find(|(n, _)| *n == g) {
            Some(entry) => entry.1 = entry.1.max(r.max_rel_err),
            None => groups.push((g, r.max_rel_err)),
        }
    }
    Ok(CheckReport {
        name: "gradients",
        tolerance: GRADIENT_TOLERANCE,
        items: groups,
    })
}

/// The objective recomputed with explicit loops over steps, tasks, queries
/// and prototypes, from concrete forward passes of the unrolled weights.
pub fn nested_loop_objective(state: &GeneratorState, seq: &TaskSequence, objective: Objective) -> Result<f64> {
    let shape = state.arch.input;
    let way = seq.tasks[0].way();
    let weights = unroll(state, seq)?;
    let mut protos: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut total = 0.0;
    for (t, current) in weights.iter().enumerate() {
        let support = &seq.tasks[t].support;
        let emb = forward_embed(current, &images_tensor(support, shape))?;
        let mut p = vec![vec![0.0; emb.cols()]; way];
        let mut counts = vec![0usize; way];
        for (i, s) in support.iter().enumerate() {
            counts[s.label] += 1;
            for (acc, v) in p[s.label].iter_mut().zip(emb.row(i)) {
                *acc += v;
            }
        }
        for (row, &n) in p.iter_mut().zip(&counts) {
            row.iter_mut().for_each(|v| *v /= n as f64);
        }
        protos.push(p);
        for tau in 0..=t {
            let query = &seq.tasks[tau].query;
            let qe = forward_embed(current, &images_tensor(query, shape))?;
            let mut nll = 0.0;
            for (i, s) in query.iter().enumerate() {
                let mut logits = Vec::new();
                let mut target = 0;
                for (r, task_protos) in protos.iter().enumerate() {
                    let visible = match objective {
                        Objective::TaskIncremental => r == tau,
                        _ => true,
                    };
                    if !visible {
                        continue;
                    }
                    for (k, c) in task_protos.iter().enumerate() {
                        if r == tau && k == s.label {
                            target = logits.len();
                        }
                        let d: f64 = c.iter().zip(qe.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
                        logits.push(-d);
                    }
                }
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
                nll += lse - logits[target];
            }
            total += nll / query.len() as f64;
        }
    }
    Ok(total)
}

/// `episode_objective` against `nested_loop_objective` for `T = 1..=max_tasks`
/// on a tiny model (2 channels, 4-dim embedding, 3-way 2-shot).
pub fn oracles(max_tasks: usize, seed: u64) -> Result<CheckReport> {
    let mut items = Vec::new();
    for tasks in 1..=max_tasks {
        let (state, seq) = tiny_problem(tasks, 3, 2, 2, 4, seed + tasks as u64)?;
        for objective in [Objective::ClassIncremental, Objective::TaskIncremental] {
            let cfg = TrainConfig {
                objective,
                ..Default::default()
            };
            let got = episode_objective(&state, &seq, &cfg)?.loss;
            let want = nested_loop_objective(&state, &seq, objective)?;
            let rel = (got - want).abs() / want.abs().max(1e-12);
            items.push((format!("T={tasks} {objective:?}"), rel));
        }
    }
    Ok(CheckReport {
        name: "oracles",
        tolerance: ORACLE_TOLERANCE,
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maml_check_passes() {
        let r = maml(20, 3).unwrap();
        assert_eq!(r.items.len(), 20);
        assert!(r.passed(), "{}", r.render());
    }

    #[test]
    fn oracle_check_passes() {
        let r = oracles(3, 1).unwrap();
        assert!(r.passed(), "{}", r.render());
    }

    #[test]
    fn gradient_check_passes_with_and_without_support() {
        for ablate in [false, true] {
            let r = gradients(2, ablate, 5).unwrap();
            assert!(r.passed(), "{}", r.render());
        }
    }

    #[test]
    fn report_fails_above_tolerance() {
        let r = CheckReport {
            name: "x",
            tolerance: 1e-3,
            items: vec![("a".into(), 1e-4), ("b".into(), 1e-2)],
        };
        assert!(!r.passed());
        assert!(r.render().contains("FAIL x"));
    }
}
