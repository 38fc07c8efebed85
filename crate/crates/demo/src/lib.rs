//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes and returns flat numeric arrays so the page needs no
//! glue beyond what `wasm-bindgen` generates.

use cht_core::episodes::{make_synthetic_pool, ImageShape, Regime};
use cht_core::eval::{evaluate, maml_one_step_check, ChtScorer, EvalConfig};
use cht_core::generator::{init_generator, GeneratorConfig};
use cht_core::learner::{class_incremental_logprobs, task_incremental_logprobs, PrototypeBank};
use cht_core::target_cnn::Arch;
use cht_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Probabilities of one query against prototypes laid out task-major,
/// `way` classes per task, each `dim` wide.
///
/// Returns the class-incremental distribution over all prototypes followed
/// by the task-incremental distribution of every task.
pub fn prototype_probabilities(query: &[f64], prototypes: &[f64], dim: usize, way: usize) -> Result<Vec<f64>, String> {
    if dim == 0
        || way == 0
        || query.len() != dim
        || prototypes.is_empty()
        || !prototypes.len().is_multiple_of(dim * way)
    {
        return Err(format!(
            "need a {dim}-wide query and a multiple of {way} prototypes of width {dim}"
        ));
    }
    let tasks = prototypes.len() / (dim * way);
    let mut bank = PrototypeBank::new();
    for (t, chunk) in prototypes.chunks(dim * way).enumerate() {
        bank.push(Tensor::new(vec![way, dim], chunk.to_vec()), t)
            .map_err(|e| e.to_string())?;
    }
    let q = Tensor::new(vec![1, dim], query.to_vec());
    let mut out: Vec<f64> = class_incremental_logprobs(&q, &bank)
        .map_err(|e| e.to_string())?
        .data()
        .iter()
        .map(|v| v.exp())
        .collect();
    for t in 0..tasks {
        let ti = task_incremental_logprobs(&q, &bank, t).map_err(|e| e.to_string())?;
        out.extend(ti.data().iter().map(|v| v.exp()));
    }
    Ok(out)
}

/// One gradient step on a logits layer with identical rows, compared with
/// its closed form. Returns `[weight error, bias error, prototype
/// alignment]` followed by the `classes x dim` weight update.
pub fn one_step_update(classes: usize, shots: usize, dim: usize, gamma: f64, seed: u64) -> Result<Vec<f64>, String> {
    if classes < 2 || shots == 0 || dim == 0 {
        return Err("need at least 2 classes, 1 shot and 1 dimension".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * shots;
    let features = Tensor::new(vec![n, dim], (0..n * dim).map(|_| rng.sample(StandardNormal)).collect());
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let row: Vec<f64> = (0..dim).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    let w0 = Tensor::new(
        vec![classes, dim],
        row.iter().cycle().take(classes * dim).copied().collect(),
    );
    let b0 = Tensor::full(&[classes], 0.0);
    let r = maml_one_step_check(&features, &labels, &w0, &b0, gamma).map_err(|e| e.to_string())?;
    let mut out = vec![r.max_rel_err_w, r.max_rel_err_b, r.prototype_alignment];
    out.extend_from_slice(r.delta_w.data());
    Ok(out)
}

/// Unrolls a freshly initialised small generator over `tasks` synthetic
/// 3-way 1-shot tasks and reports mean accuracies over `episodes` sequences:
/// the task-incremental lower triangle row by row, then the
/// class-incremental one.
pub fn unroll_accuracy(tasks: usize, episodes: usize, seed: u64) -> Result<Vec<f64>, String> {
    if !(1..=6).contains(&tasks) || episodes == 0 {
        return Err("tasks must be 1..=6 and episodes positive".into());
    }
    let shape = ImageShape::new(8, 8, 1);
    let pool = make_synthetic_pool(24, 6, shape, seed).map_err(|e| e.to_string())?;
    let arch = Arch::new(2, 4, 6, shape);
    let cfg = GeneratorConfig {
        feat_layers: 1,
        feat_channels: 4,
        act_layers: 1,
        act_channels: 4,
        num_layers: 1,
        num_heads: 2,
        model_dim: 16,
        ff_dim: 32,
        label_embed_dim: 4,
        max_way: 3,
    };
    let state = init_generator(&cfg, &arch, seed).map_err(|e| e.to_string())?;
    let ecfg = EvalConfig {
        tasks,
        way: 3,
        shots: 1,
        queries: 3,
        regime: Regime::SingleDomain,
        episodes,
        runs_per_episode: 1,
        seed,
        ..Default::default()
    };
    let ev = evaluate(&mut ChtScorer { state: &state }, &[pool], &ecfg).map_err(|e| e.to_string())?;
    Ok(ev
        .task_incremental
        .acc
        .iter()
        .chain(&ev.class_incremental.acc)
        .flatten()
        .copied()
        .collect())
}

#[wasm_bindgen(js_name = prototypeProbabilities)]
pub fn prototype_probabilities_js(
    query: &[f64],
    prototypes: &[f64],
    dim: usize,
    way: usize,
) -> Result<Vec<f64>, JsError> {
    prototype_probabilities(query, prototypes, dim, way).map_err(js_err)
}

#[wasm_bindgen(js_name = oneStepUpdate)]
pub fn one_step_update_js(
    classes: usize,
    shots: usize,
    dim: usize,
    gamma: f64,
    seed: u32,
) -> Result<Vec<f64>, JsError> {
    one_step_update(classes, shots, dim, gamma, u64::from(seed)).map_err(js_err)
}

#[wasm_bindgen(js_name = unrollAccuracy)]
pub fn unroll_accuracy_js(tasks: usize, episodes: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    unroll_accuracy(tasks, episodes, u64::from(seed)).map_err(js_err)
}
