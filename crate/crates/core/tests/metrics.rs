use nalgebra::{Rotation3, Vector3};
use poselift::metrics::{
    acceleration_error, aggregate_report, mpjpe, p_mpjpe, pck_auc, per_joint_mpjpe, position_loss, total_loss,
    velocity_loss, Alignment, EvalPair, LossConfig, MetricOptions, Point,
};
use poselift::tensor::{finite_diff_check, FiniteDiffOptions, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_poses(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Point> {
    (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(-scale..scale))).collect()
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), rng.random_range(0.0..std::f64::consts::TAU))
}

fn transform(p: &[Point], r: &Rotation3<f64>, t: [f64; 3], c: f64) -> Vec<Point> {
    p.iter()
        .map(|q| {
            let v = r * Vector3::new(q[0], q[1], q[2]) * c;
            [v.x + t[0], v.y + t[1], v.z + t[2]]
        })
        .collect()
}

fn d(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Brute-force loop versions of the root-relative metrics.
fn loop_errors(pred: &[Point], gt: &[Point], j: usize, root: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for t in 0..pred.len() / j {
        for k in 0..j {
            let mut pp = [0.0; 3];
            let mut gg = [0.0; 3];
            for c in 0..3 {
                pp[c] = pred[t * j + k][c] - pred[t * j + root][c];
                gg[c] = gt[t * j + k][c] - gt[t * j + root][c];
            }
            out.push(d(pp, gg));
        }
    }
    out
}

#[test]
fn loop_oracles_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let t = rng.random_range(1..=8);
        let j = rng.random_range(1..=17);
        let root = rng.random_range(0..j);
        let gt = random_poses(&mut rng, t * j, 300.0);
        let pred = random_poses(&mut rng, t * j, 300.0);
        let e = loop_errors(&pred, &gt, j, root);
        let n = e.len() as f64;
        assert!((mpjpe(&pred, &gt, j, root) - e.iter().sum::<f64>() / n).abs() < 1e-6);
        let mut pck = 0.0;
        let mut auc = 0.0;
        for x in &e {
            if *x < 150.0 {
                pck += 1.0;
            }
        }
        for step in 0..31 {
            let th = 5.0 * step as f64;
            auc += e.iter().filter(|&&x| x < th).count() as f64 / n * 100.0;
        }
        let (p, a) = pck_auc(&pred, &gt, j, root);
        assert!((p - 100.0 * pck / n).abs() < 1e-6);
        assert!((a - auc / 31.0).abs() < 1e-6);
        assert!(a <= p + 1e-12);

        let mut acc = 0.0;
        let mut cnt = 0;
        for f in 1..t.saturating_sub(1) {
            for k in 0..j {
                let mut s = 0.0;
                for c in 0..3 {
                    let l = |x: &[Point]| x[(f - 1) * j + k][c] - 2.0 * x[f * j + k][c] + x[(f + 1) * j + k][c];
                    s += (l(&gt) - l(&pred)).powi(2);
                }
                acc += s.sqrt();
                cnt += 1;
            }
        }
        let expect = if cnt == 0 { 0.0 } else { acc / cnt as f64 };
        assert!((acceleration_error(&pred, &gt, j) - expect).abs() < 1e-6);
    }
}

#[test]
fn acceleration_vanishes_for_constant_velocity() {
    let gt: Vec<Point> = (0..5).map(|t| [t as f64, 2.0 * t as f64, 0.0]).collect();
    let pred: Vec<Point> = (0..5).map(|t| [3.0 - t as f64, 1.0, 5.0 * t as f64]).collect();
    assert_eq!(acceleration_error(&pred, &gt, 1), 0.0);
    assert_eq!(acceleration_error(&gt[..2], &pred[..2], 1), 0.0);
}

#[test]
fn procrustes_removes_similarity_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let gt = random_poses(&mut rng, 17, 500.0);
        let r = random_rotation(&mut rng);
        let rigid = transform(&gt, &r, [10.0, -40.0, 300.0], 1.0);
        assert!(p_mpjpe(&rigid, &gt, 17, Alignment::Similarity) < 1e-6);
        assert!(p_mpjpe(&rigid, &gt, 17, Alignment::RigidOnly) < 1e-6);
        let scaled = transform(&gt, &r, [1.0, 2.0, 3.0], 1.3);
        assert!(p_mpjpe(&scaled, &gt, 17, Alignment::Similarity) < 1e-6);
        assert!(p_mpjpe(&scaled, &gt, 17, Alignment::RigidOnly) > 1.0);
    }
}

#[test]
fn procrustes_never_exceeds_mpjpe() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let t = rng.random_range(1..=4);
        let gt = random_poses(&mut rng, t * 17, 400.0);
        let noise = random_poses(&mut rng, t * 17, 60.0);
        let pred: Vec<Point> = gt.iter().zip(&noise).map(|(g, n)| [g[0] + n[0], g[1] + n[1], g[2] + n[2]]).collect();
        let p1 = mpjpe(&pred, &gt, 17, 0);
        for a in [Alignment::Similarity, Alignment::RigidOnly] {
            assert!(p_mpjpe(&pred, &gt, 17, a) <= p1 + 1e-9);
        }
    }
}

/// Least-squares fit over in-plane rotations and the mirrored plane, 0.001 rad grid.
fn planar_grid_search(pred: &[Point], gt: &[Point], with_scale: bool) -> f64 {
    let n = pred.len() as f64;
    let centroid = |x: &[Point]| [0, 1].map(|c| x.iter().map(|p| p[c]).sum::<f64>() / n);
    let (mp, mg) = (centroid(pred), centroid(gt));
    let pc: Vec<[f64; 2]> = pred.iter().map(|p| [p[0] - mp[0], p[1] - mp[1]]).collect();
    let gc: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] - mg[0], p[1] - mg[1]]).collect();
    let mut best = (f64::INFINITY, 0.0);
    let steps = (2.0 * std::f64::consts::PI / 0.001).ceil() as usize;
    for mirror in [1.0, -1.0] {
        for k in 0..steps {
            let th = k as f64 * 0.001;
            let (s, c) = th.sin_cos();
            let rot: Vec<[f64; 2]> =
                pc.iter().map(|p| [c * p[0] - s * mirror * p[1], s * p[0] + c * mirror * p[1]]).collect();
            let scale = if with_scale {
                let num: f64 = rot.iter().zip(&gc).map(|(a, b)| a[0] * b[0] + a[1] * b[1]).sum();
                let den: f64 = rot.iter().map(|a| a[0] * a[0] + a[1] * a[1]).sum();
                num / den
            } else {
                1.0
            };
            let errs: Vec<f64> = rot
                .iter()
                .zip(&gc)
                .map(|(a, b)| ((scale * a[0] - b[0]).powi(2) + (scale * a[1] - b[1]).powi(2)).sqrt())
                .collect();
            let sse: f64 = errs.iter().map(|e| e * e).sum();
            if sse < best.0 {
                best = (sse, errs.iter().sum::<f64>() / n);
            }
        }
    }
    best.1
}

#[test]
fn planar_procrustes_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for joints in [2usize, 4] {
        for with_scale in [false, true] {
            let gt: Vec<Point> =
                (0..joints).map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), 0.0]).collect();
            let pred: Vec<Point> =
                (0..joints).map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), 0.0]).collect();
            let a = if with_scale { Alignment::Similarity } else { Alignment::RigidOnly };
            let ours = p_mpjpe(&pred, &gt, joints, a);
            let oracle = planar_grid_search(&pred, &gt, with_scale);
            assert!((ours - oracle).abs() < 0.01, "{joints} joints, scale {with_scale}: {ours} vs {oracle}");
        }
    }
}

#[test]
fn metrics_are_invariant_to_shared_rigid_motion_and_scale_linearly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let gt = random_poses(&mut rng, 3 * 17, 400.0);
        let pred = random_poses(&mut rng, 3 * 17, 400.0);
        let r = random_rotation(&mut rng);
        let (g2, p2) = (transform(&gt, &r, [5.0, 6.0, 7.0], 1.0), transform(&pred, &r, [5.0, 6.0, 7.0], 1.0));
        assert!((mpjpe(&p2, &g2, 17, 0) - mpjpe(&pred, &gt, 17, 0)).abs() < 1e-6);
        let a = Alignment::Similarity;
        assert!((p_mpjpe(&p2, &g2, 17, a) - p_mpjpe(&pred, &gt, 17, a)).abs() < 1e-6);
        let id = Rotation3::identity();
        let (g3, p3) = (transform(&gt, &id, [0.0; 3], 2.5), transform(&pred, &id, [0.0; 3], 2.5));
        assert!((mpjpe(&p3, &g3, 17, 0) - 2.5 * mpjpe(&pred, &gt, 17, 0)).abs() < 1e-6);
        assert!((p_mpjpe(&p3, &g3, 17, a) - 2.5 * p_mpjpe(&pred, &gt, 17, a)).abs() < 1e-6);
        assert!((acceleration_error(&p3, &g3, 17) - 2.5 * acceleration_error(&pred, &gt, 17)).abs() < 1e-6);
    }
}

#[test]
fn report_aggregates_by_frames() {
    let gt = vec![[0.0; 3]; 4];
    let p10 = vec![[0.0; 3], [10.0, 0.0, 0.0], [0.0; 3], [10.0, 0.0, 0.0]];
    let p30 = vec![[0.0; 3], [30.0, 0.0, 0.0], [0.0; 3], [30.0, 0.0, 0.0]];
    let opts = MetricOptions { root: 0, alignment: Alignment::Similarity };
    let one = aggregate_report(&[EvalPair { pred: &p10, gt: &gt, action: "walk" }], 2, &opts).unwrap();
    assert_eq!(one.per_action.len(), 1);
    assert_eq!(one.per_action["walk"].mpjpe_mm, one.mpjpe_mm);
    assert_eq!(one.per_action["walk"].p_mpjpe_mm, one.p_mpjpe_mm);

    // Root plus one joint, so per-action P1 is half the joint error.
    let two = aggregate_report(
        &[EvalPair { pred: &p10, gt: &gt, action: "a" }, EvalPair { pred: &p30, gt: &gt, action: "b" }],
        2,
        &opts,
    )
    .unwrap();
    assert_eq!(two.per_action["a"].mpjpe_mm, 5.0);
    assert_eq!(two.per_action["b"].mpjpe_mm, 15.0);
    assert_eq!(two.mpjpe_mm, 10.0);
    assert_eq!(two.frames, 4);
}

#[test]
fn per_joint_mean_equals_overall() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let opts = MetricOptions { root: 0, alignment: Alignment::Similarity };
    let seqs: Vec<(Vec<Point>, Vec<Point>)> = (0..3)
        .map(|i| {
            let t = 2 + i;
            (random_poses(&mut rng, t * 17, 300.0), random_poses(&mut rng, t * 17, 300.0))
        })
        .collect();
    let pairs: Vec<EvalPair> = seqs.iter().map(|(p, g)| EvalPair { pred: p, gt: g, action: "x" }).collect();
    let r = aggregate_report(&pairs, 17, &opts).unwrap();
    let mean = r.per_joint.iter().sum::<f64>() / 17.0;
    assert!((mean - r.mpjpe_mm).abs() < 1e-9);
    assert!(r.p_mpjpe_mm <= r.mpjpe_mm + 1e-9);
    assert!(r.auc_pct <= r.pck_pct && r.pck_pct <= 100.0);
    let single = per_joint_mpjpe(&seqs[0].0, &seqs[0].1, 17, 0);
    assert_eq!(single[0], 0.0);
}

fn tensor(rng: &mut ChaCha8Rng, t: usize, j: usize) -> Tensor<f64> {
    Tensor::new(vec![1, t, j, 3], (0..t * j * 3).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn losses_match_loops_and_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (t, j) = (2, 3);
    for _ in 0..10 {
        let pred = tensor(&mut rng, t, j);
        let gt = tensor(&mut rng, t, j);
        let (p, g) = (pred.data(), gt.data());
        let at = |x: &[f64], f: usize, k: usize, c: usize| x[(f * j + k) * 3 + c];
        let mut pos = 0.0;
        let mut vel = 0.0;
        for f in 0..t {
            for k in 0..j {
                pos += (0..3).map(|c| (at(p, f, k, c) - at(g, f, k, c)).powi(2)).sum::<f64>().sqrt();
                if f > 0 {
                    vel += (0..3)
                        .map(|c| {
                            let dp = at(p, f, k, c) - at(p, f - 1, k, c);
                            let dg = at(g, f, k, c) - at(g, f - 1, k, c);
                            (dp - dg).powi(2)
                        })
                        .sum::<f64>()
                        .sqrt();
                }
            }
        }
        let mut tape = Tape::new();
        let (pv, gv) = (tape.constant(pred.clone()), tape.constant(gt.clone()));
        let l = position_loss(&mut tape, pv, gv).unwrap();
        let v = velocity_loss(&mut tape, pv, gv).unwrap();
        assert!((tape.value(l).data()[0] - pos).abs() < 1e-6);
        assert!((tape.value(v).data()[0] - vel).abs() < 1e-6);

        let cfg = LossConfig { lambda_velocity: 0.7 };
        let report = finite_diff_check(
            |tape, xs| {
                let g = tape.constant(gt.clone());
                Ok(total_loss(tape, xs[0], g, &cfg)?.total)
            },
            &[pred],
            &FiniteDiffOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5);
    }
}

#[test]
fn single_frame_velocity_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::new();
    let p = tape.constant(tensor(&mut rng, 1, 4));
    let g = tape.constant(tensor(&mut rng, 1, 4));
    let v = velocity_loss(&mut tape, p, g).unwrap();
    assert_eq!(tape.value(v).data(), &[0.0]);
}

proptest! {
    #[test]
    fn p2_at_most_p1(seed in 0u64..1000, t in 1usize..5, j in 3usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_poses(&mut rng, t * j, 100.0);
        let pred = random_poses(&mut rng, t * j, 100.0);
        prop_assert!(p_mpjpe(&pred, &gt, j, Alignment::Similarity) <= mpjpe(&pred, &gt, j, 0) + 1e-9);
    }
}
