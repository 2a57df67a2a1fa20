use poselift::accounting::{count_macs, count_params, MacConvention};
use poselift::graph::SkeletonSpec;
use poselift::model::{CompositionMode, Model, ModelConfig, ParameterStore, Variant};
use poselift::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let heads = rng.random_range(1..=4);
    let dim = heads * rng.random_range(1..=6);
    let skeleton = if rng.random_bool(0.5) { SkeletonSpec::five_joint() } else { SkeletonSpec::h36m() };
    let mut cfg = ModelConfig::custom(rng.random_range(1..=3), dim, rng.random_range(1..=6), heads, skeleton);
    cfg.motion_dim = rng.random_range(1..=20);
    cfg.mlp_ratio = rng.random_range(1..=4);
    cfg.mode = CompositionMode::ALL[rng.random_range(0..5)];
    cfg.spatial_pe = rng.random_bool(0.5);
    cfg.temporal_pe = rng.random_bool(0.5);
    cfg.temporal_k = rng.random_range(1..=cfg.frames.max(2) - 1).max(1);
    cfg
}

#[test]
fn parameter_count_matches_instantiated_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let cfg = random_config(&mut rng);
        let store = ParameterStore::<f32>::init(&cfg, 1).unwrap();
        assert_eq!(count_params(&cfg), store.trainable_count() as u64, "{cfg:?}");
        let report = count_macs(&cfg, MacConvention::Layers);
        assert_eq!(report.param_count, count_params(&cfg));
        let rows: u64 = report.breakdown.iter().map(|e| e.layer_macs).sum();
        assert_eq!(rows, report.total_macs);
    }
}

#[test]
fn mac_count_matches_the_tape_counter() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..12 {
        let cfg = random_config(&mut rng);
        let model = Model::<f64>::new(cfg.clone(), 2).unwrap();
        let shape = [1, cfg.frames, cfg.joints(), 3];
        let x = Tensor::new(shape.to_vec(), (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, false);
        let input = tape.constant(x);
        model.forward(&mut tape, &bound, input, false).unwrap();
        assert_eq!(count_macs(&cfg, MacConvention::Dense).total_macs, tape.macs(), "{cfg:?}");
        assert_eq!(count_macs(&cfg, MacConvention::Layers).total_macs, tape.macs() - tape.batched_macs());
    }
}

#[test]
fn closed_forms() {
    // Embedding 3 → d with bias has 4d parameters and costs 3d per token.
    let mut cfg = ModelConfig::custom(1, 16, 5, 2, SkeletonSpec::five_joint());
    cfg.spatial_pe = false;
    let r = count_macs(&cfg, MacConvention::Dense);
    let embed = &r.breakdown[0];
    assert_eq!((embed.module.as_str(), embed.params, embed.layer_macs), ("embed", 64, 5 * 5 * 48));

    // One (m×k)·(k×n) product through the tape.
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(vec![3, 4]));
    let b = tape.constant(Tensor::zeros(vec![4, 7]));
    tape.matmul(a, b).unwrap();
    assert_eq!(tape.macs(), 3 * 4 * 7);
}

#[test]
fn macs_are_affine_in_depth() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let cfg = random_config(&mut rng);
        for convention in [MacConvention::Layers, MacConvention::Dense] {
            let at = |n: usize| {
                let mut c = cfg.clone();
                c.depth = n;
                count_macs(&c, convention).total_macs as i128
            };
            let step = at(2) - at(1);
            assert!(step > 0);
            for n in 2..8 {
                assert_eq!(at(n + 1) - at(n), step);
            }
            let overhead = at(1) - step;
            assert!(overhead > 0);
        }
    }
}

#[test]
fn variant_costs_land_on_published_figures() {
    let published = [
        (Variant::XS, 2.2e6, 1.0e9, 37e6),
        (Variant::S, 4.8e6, 6.6e9, 81e6),
        (Variant::B, 11.7e6, 48.3e9, 198e6),
        (Variant::L, 19.0e6, 78.3e9, 322e6),
    ];
    for (v, params, macs, per_frame) in published {
        let r = count_macs(&ModelConfig::variant(v), MacConvention::Layers);
        let rel = |a: u64, b: f64| (a as f64 - b).abs() / b;
        assert!(rel(r.param_count, params) < 0.02, "{v:?} params {}", r.param_count);
        assert!(rel(r.total_macs, macs) < 0.10, "{v:?} MACs {}", r.total_macs);
        assert!(rel(r.macs_per_frame, per_frame) < 0.10, "{v:?} per frame {}", r.macs_per_frame);
    }
}

#[test]
fn dense_products_add_quadratic_terms() {
    let cfg = ModelConfig::variant(Variant::B);
    let layers = count_macs(&cfg, MacConvention::Layers);
    let dense = count_macs(&cfg, MacConvention::Dense);
    let (t, j, d) = (243u64, 17u64, 128u64);
    let per_block = 2 * j * j * d * t + 2 * t * t * d * j + j * j * d * t + t * t * d * j;
    assert_eq!(dense.total_macs - layers.total_macs, 16 * per_block);
    assert_eq!(dense.param_count, layers.param_count);
}
