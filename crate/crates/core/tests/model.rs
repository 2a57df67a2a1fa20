use poselift::graph::SkeletonSpec;
use poselift::model::{CompositionMode, Model, ModelConfig, ParameterStore, Variant};
use poselift::tensor::{finite_diff_check, FiniteDiffOptions, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn three_joint() -> SkeletonSpec {
    SkeletonSpec {
        joints: ["root", "left", "right"].map(String::from).to_vec(),
        edges: vec![[0, 1], [0, 2]],
        mirror: vec![0, 2, 1],
        root: 0,
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn toy(depth: usize, dim: usize, frames: usize, heads: usize, skeleton: SkeletonSpec) -> ModelConfig {
    let mut cfg = ModelConfig::custom(depth, dim, frames, heads, skeleton);
    cfg.motion_dim = 24;
    cfg
}

#[test]
fn output_shape_holds_for_every_mode_and_variant() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for mode in CompositionMode::ALL {
        let mut cfg = toy(2, 8, 4, 2, SkeletonSpec::five_joint());
        cfg.mode = mode;
        let model = Model::<f64>::new(cfg, 1).unwrap();
        let out = model.predict(&random(&[2, 4, 5, 3], &mut rng)).unwrap();
        assert_eq!(out.shape(), &[2, 4, 5, 3], "{mode}");
    }
    for v in Variant::ALL {
        let mut cfg = ModelConfig::variant(v);
        // Shape contract only: one block at the variant's width and joint count.
        cfg.depth = 1;
        cfg.frames = 3;
        let model = Model::<f32>::new(cfg, 0).unwrap();
        let out = model.predict(&Tensor::zeros(vec![3, 17, 3])).unwrap();
        assert_eq!(out.shape(), &[3, 17, 3]);
    }
}

#[test]
fn eval_forward_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::<f32>::new(toy(2, 16, 4, 2, SkeletonSpec::five_joint()), 3).unwrap();
    let x = random(&[4, 5, 3], &mut rng).cast::<f32>();
    let a = model.predict(&x).unwrap();
    let b = model.predict(&x).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn confidence_channel_changes_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Model::<f64>::new(toy(1, 8, 3, 2, SkeletonSpec::five_joint()), 4).unwrap();
    let x = random(&[3, 5, 3], &mut rng);
    let mut y = x.clone();
    y.data_mut()[2] += 0.5;
    assert_ne!(model.predict(&x).unwrap().data(), model.predict(&y).unwrap().data());
}

#[test]
fn embedding_flags_select_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let combos = [(false, false), (true, false), (false, true), (true, true)];
    for (s, t) in combos {
        let mut cfg = toy(1, 8, 3, 2, SkeletonSpec::five_joint());
        cfg.spatial_pe = s;
        cfg.temporal_pe = t;
        let store = ParameterStore::<f64>::init(&cfg, 0).unwrap();
        assert_eq!(store.get("pos_spatial").is_some(), s);
        assert_eq!(store.get("pos_temporal").is_some(), t);
        let model = Model::with_params(cfg, store).unwrap();
        model.predict(&random(&[3, 5, 3], &mut rng)).unwrap();
    }
}

#[test]
fn fusion_weights_are_convex_and_motion_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = Model::<f64>::new(toy(2, 16, 4, 2, SkeletonSpec::five_joint()), 5).unwrap();
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    let x = tape.constant(random(&[2, 4, 5, 3], &mut rng));
    let trace = model.forward(&mut tape, &bound, x, true).unwrap();
    assert_eq!(trace.fusion_weights.len(), 2);
    for &w in &trace.fusion_weights {
        for pair in tape.value(w).data().chunks(2) {
            assert!(pair.iter().all(|&a| a > 0.0 && a < 1.0));
            assert!((pair[0] + pair[1] - 1.0).abs() < 1e-12);
        }
    }
    assert!(tape.value(trace.motion).data().iter().all(|&m| m > -1.0 && m < 1.0));
}

#[test]
fn joint_permutation_equivariance_without_spatial_embedding() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for mode in [CompositionMode::Parallel, CompositionMode::GcnOnly, CompositionMode::AttnOnly] {
        let mut cfg = toy(2, 8, 4, 2, SkeletonSpec::five_joint());
        cfg.spatial_pe = false;
        cfg.mode = mode;
        let model = Model::<f64>::new(cfg.clone(), 6).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let mut pcfg = cfg.clone();
        pcfg.skeleton = cfg.skeleton.relabel(&perm).unwrap();
        let pmodel = Model::with_params(pcfg, model.params().clone()).unwrap();

        let x = random(&[4, 5, 3], &mut rng);
        let permute = |t: &Tensor<f64>| {
            let mut out = t.clone();
            for f in 0..4 {
                for (j, &pj) in perm.iter().enumerate() {
                    for c in 0..3 {
                        out.data_mut()[(f * 5 + pj) * 3 + c] = t.data()[(f * 5 + j) * 3 + c];
                    }
                }
            }
            out
        };
        let direct = permute(&model.predict(&x).unwrap());
        let relabeled = pmodel.predict(&permute(&x)).unwrap();
        for (a, b) in direct.data().iter().zip(relabeled.data()) {
            assert!((a - b).abs() < 1e-5 * (1.0 + a.abs()), "{mode}: {a} vs {b}");
        }
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for temporal_pe in [false, true] {
        let mut cfg = toy(2, 8, 4, 2, SkeletonSpec::five_joint());
        cfg.temporal_pe = temporal_pe;
        let model = Model::<f64>::new(cfg, 8).unwrap();
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, true);
        let x = tape.constant(random(&[2, 4, 5, 3], &mut rng));
        let w = tape.constant(random(&[2, 4, 5, 3], &mut rng));
        let trace = model.forward(&mut tape, &bound, x, true).unwrap();
        let prod = tape.mul(trace.output, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let vars: Vec<(String, _)> = bound.params().map(|(k, v)| (k.clone(), v)).collect();
        let grads = tape.backward(loss).unwrap();
        for (path, v) in vars {
            let g = grads.get(v).unwrap();
            assert!(g.data().iter().any(|&x| x != 0.0), "dead parameter {path}");
        }
    }
}

#[test]
fn running_statistics_move_toward_batch_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = Model::<f64>::new(toy(1, 8, 3, 2, SkeletonSpec::five_joint()), 1).unwrap();
    let before = model.params().buffers().clone();
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    let x = tape.constant(random(&[2, 3, 5, 3], &mut rng));
    let trace = model.forward(&mut tape, &bound, x, true).unwrap();
    assert_eq!(trace.batch_norms.len(), 2);
    let (prefix, node) = trace.batch_norms[0].clone();
    let (mean, var) = tape.batch_stats(node).map(|(m, v)| (m.to_vec(), v.to_vec())).unwrap();
    model.update_running_stats(&tape, &trace);
    let rm = &model.params().buffers()[&format!("{prefix}.running_mean")];
    let rv = &model.params().buffers()[&format!("{prefix}.running_var")];
    let rows = 2.0 * 3.0 * 5.0;
    for c in 0..8 {
        assert!((rm.data()[c] - 0.1 * mean[c]).abs() < 1e-12);
        assert!((rv.data()[c] - (0.9 + 0.1 * var[c] * rows / (rows - 1.0))).abs() < 1e-12);
    }
    assert_ne!(&before, model.params().buffers());
}

#[test]
fn block_gradcheck_on_two_frame_three_joint_toy() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for post_norm in [false, true] {
        let mut cfg = toy(1, 8, 2, 2, three_joint());
        cfg.post_norm = post_norm;
        cfg.temporal_k = 1;
        let model = Model::<f64>::new(cfg, 11).unwrap();
        let names: Vec<String> = model.params().params().keys().cloned().collect();
        let mut points = vec![random(&[1, 2, 3, 3], &mut rng)];
        points.extend(model.params().params().values().cloned());
        let weights = random(&[1, 2, 3, 3], &mut rng);
        let opts = FiniteDiffOptions { max_coords_per_leaf: Some(12), ..Default::default() };
        let report = finite_diff_check(
            |tape, vars| {
                let mut bound = poselift::model::Bound::new();
                for (name, &v) in names.iter().zip(&vars[1..]) {
                    bound.insert_param(name.clone(), v);
                }
                let trace = model.forward(tape, &bound, vars[0], true)?;
                let w = tape.constant(weights.clone());
                let y = tape.scale(trace.output, 1e-3)?;
                let p = tape.mul(y, w)?;
                tape.sum(p)
            },
            &points,
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "post_norm={post_norm}: {}", report.max_rel_err);
    }
}

#[test]
fn rejects_mismatched_input() {
    let model = Model::<f32>::new(toy(1, 8, 3, 2, SkeletonSpec::five_joint()), 0).unwrap();
    assert!(model.predict(&Tensor::zeros(vec![4, 5, 3])).is_err());
    assert!(model.predict(&Tensor::zeros(vec![3, 4, 3])).is_err());
}
