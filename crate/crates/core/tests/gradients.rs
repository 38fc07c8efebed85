use cht_core::episodes::*;
use cht_core::generator::*;
use cht_core::learner::*;
use cht_core::target_cnn::Arch;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup() -> (GeneratorState, TaskSequence) {
    let shape = ImageShape::new(8, 8, 1);
    let pool = make_synthetic_pool(10, 6, shape, 2).unwrap();
    let arch = Arch::new(2, 2, 3, shape);
    let cfg = GeneratorConfig {
        feat_layers: 1,
        feat_channels: 3,
        act_layers: 1,
        act_channels: 3,
        num_layers: 1,
        num_heads: 1,
        model_dim: 8,
        ff_dim: 12,
        label_embed_dim: 3,
        max_way: 4,
    };
    let state = init_generator(&cfg, &arch, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let seq = sample_task_sequence(&[pool], 2, Regime::SingleDomain, 3, 1, 2, &mut rng).unwrap();
    (state, seq)
}

#[test]
fn unrolled_gradients_match_finite_differences() {
    let (state, seq) = setup();
    for objective in [Objective::ClassIncremental, Objective::TaskIncremental] {
        let cfg = TrainConfig {
            objective,
            ..Default::default()
        };
        let report = gradient_check(&state, &seq, &cfg, GenerateOptions::default(), 4, 1e-5, 1).unwrap();
        assert_eq!(report.len(), state.params.len());
        for r in &report {
            assert!(r.max_rel_err <= 1e-3, "{objective:?} {}: {}", r.name, r.max_rel_err);
        }
    }
}

#[test]
fn previous_weights_carry_gradient_without_support() {
    let (state, seq) = setup();
    let cfg = TrainConfig::default();
    let opts = GenerateOptions { ablate_support: true };
    let (_, grads) = loss_and_grads_with(&state, &seq, &cfg, opts).unwrap();
    let norm = |name: &str| {
        let i = state.names.iter().position(|n| n == name).unwrap();
        grads[i].iter().map(|x| x * x).sum::<f64>().sqrt()
    };
    for l in 0..state.arch.num_layers() {
        assert!(norm(&format!("layer{l}.prev_proj")) > 0.0, "layer {l}");
    }
    assert_eq!(norm("sample_proj.w"), 0.0);
    assert_eq!(norm("label_embed"), 0.0);

    let report = gradient_check(&state, &seq, &cfg, opts, 4, 1e-5, 2).unwrap();
    for r in &report {
        assert!(r.max_rel_err <= 1e-3, "{}: {}", r.name, r.max_rel_err);
    }
}
