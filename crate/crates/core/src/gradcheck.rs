//! Finite-difference verification of every primitive, the building blocks,
//! a full toy model and the training loss, all in `f64`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_skeleton_adjacency, SkeletonSpec};
use crate::metrics::{total_loss, LossConfig};
use crate::model::layers::{
    adaptive_fuse, attention_mixer, gcn_mixer, metaformer, repeat_adjacency, BatchNormMode, NormPlacement,
};
use crate::model::{Bound, Model, ModelConfig};
use crate::tensor::{finite_diff_check, FiniteDiffOptions, Primitive, PrimitiveKind, Tape, Tensor, Var};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Random inputs per primitive.
pub const PRIMITIVE_CASES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Primitives,
    Layers,
    Model,
    Loss,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Self::Primitives, Self::Layers, Self::Model, Self::Loss];

    pub fn name(self) -> &'static str {
        match self {
            Self::Primitives => "primitives",
            Self::Layers => "layers",
            Self::Model => "model",
            Self::Loss => "loss",
        }
    }
}

/// What to run: everything, one suite, or one primitive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    All,
    Suite(Suite),
    Primitive(PrimitiveKind),
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Self::All);
        }
        if let Some(suite) = Suite::ALL.into_iter().find(|m| m.name() == s) {
            return Ok(Self::Suite(suite));
        }
        s.parse::<PrimitiveKind>().map(Self::Primitive).map_err(|_| {
            Error::Config(format!(
                "unknown gradcheck module `{s}` (expected all, primitives, layers, model, loss or a primitive name)"
            ))
        })
    }
}

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<10} {:<24} cases {:>3}  max rel err {:.3e} (< {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite.name(),
            self.name,
            self.cases,
            self.max_rel_err,
            self.tolerance
        )
    }
}

type Objective = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized to shape")
}

/// Uniform in `±[0.2, 1]`, away from the kink of relu.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = uniform(shape, 0.2, 1.0, rng);
    t.data_mut().iter_mut().for_each(|v| {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    });
    t
}

/// `Σ out ⊙ W` with a fixed random `W`, turning any output into a scalar.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(tape.shape(out), -1.0, 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

/// A random scalar function exercising `kind` once, plus its inputs.
fn primitive_case(kind: PrimitiveKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Objective) {
    use PrimitiveKind as K;
    let seed: u64 = rng.random();
    let (a, b, c) = (dim(rng), dim(rng), dim(rng));
    let x = |shape: &[usize], rng: &mut ChaCha8Rng| uniform(shape, -1.0, 1.0, rng);
    let unary = |prim: Primitive| -> Objective {
        Box::new(move |t, v| {
            let y = t.apply(prim.clone(), &v[..1])?;
            project(t, y, seed)
        })
    };
    let binary = |prim: Primitive| -> Objective {
        Box::new(move |t, v| {
            let y = t.apply(prim.clone(), v)?;
            project(t, y, seed)
        })
    };
    match kind {
        K::MatMul => {
            let lead = if rng.random_bool(0.5) { vec![a] } else { vec![dim(rng), a] };
            let k = dim(rng);
            let lhs: Vec<usize> = lead.into_iter().chain([k]).collect();
            (vec![x(&lhs, rng), x(&[k, b], rng)], binary(Primitive::MatMul))
        }
        K::BatchMatMul => {
            let k = dim(rng);
            (vec![x(&[c, a, k], rng), x(&[c, k, b], rng)], binary(Primitive::BatchMatMul))
        }
        K::TransposeLast => (vec![x(&[c, a, b], rng)], unary(Primitive::TransposeLast)),
        K::Permute => {
            let mut axes: Vec<usize> = (0..4).collect();
            axes.shuffle(rng);
            (vec![x(&[a, b, c, dim(rng)], rng)], unary(Primitive::Permute(axes)))
        }
        K::Reshape => (vec![x(&[a, b, c], rng)], unary(Primitive::Reshape(vec![a * b, c]))),
        K::Add => (vec![x(&[a, b], rng), x(&[a, b], rng)], binary(Primitive::Add)),
        K::Sub => (vec![x(&[a, b], rng), x(&[a, b], rng)], binary(Primitive::Sub)),
        K::Mul => (vec![x(&[a, b], rng), x(&[a, b], rng)], binary(Primitive::Mul)),
        K::AddBroadcast | K::MulBroadcast => {
            let term = match rng.random_range(0..3) {
                0 => vec![c],
                1 => vec![b, c],
                _ => vec![a, b, 1],
            };
            let prim = if kind == K::AddBroadcast { Primitive::AddBroadcast } else { Primitive::MulBroadcast };
            (vec![x(&[a, b, c], rng), x(&term, rng)], binary(prim))
        }
        K::Scale => (vec![x(&[a, b], rng)], unary(Primitive::Scale(rng.random_range(-2.0..2.0)))),
        K::Softmax => (vec![uniform(&[a, b + 1], -2.0, 2.0, rng)], unary(Primitive::Softmax)),
        K::Relu => (vec![off_zero(&[a, b], rng)], unary(Primitive::Relu)),
        K::Gelu => (vec![uniform(&[a, b], -3.0, 3.0, rng)], unary(Primitive::Gelu)),
        K::Tanh => (vec![uniform(&[a, b], -2.0, 2.0, rng)], unary(Primitive::Tanh)),
        K::LayerNorm => {
            let d = b + 1;
            let points = vec![x(&[a, d], rng), uniform(&[d], 0.5, 1.5, rng), x(&[d], rng)];
            (points, binary(Primitive::LayerNorm { eps: 1e-5 }))
        }
        K::BatchNorm => {
            let d = b;
            let rows = a + 1;
            let points = vec![x(&[rows, d], rng), uniform(&[d], 0.5, 1.5, rng), x(&[d], rng)];
            if rng.random_bool(0.5) {
                (points, binary(Primitive::BatchNorm { eps: 1e-5, training: true }))
            } else {
                let mean = x(&[d], rng);
                let var = uniform(&[d], 0.5, 2.0, rng);
                let f: Objective = Box::new(move |t, v| {
                    let m = t.constant(mean.clone());
                    let s = t.constant(var.clone());
                    let y = t.apply(Primitive::BatchNorm { eps: 1e-5, training: false }, &[v[0], v[1], v[2], m, s])?;
                    project(t, y, seed)
                });
                (points, f)
            }
        }
        K::Sum => (
            vec![x(&[a, b], rng)],
            Box::new(move |t, v| {
                let s = t.sum(v[0])?;
                t.scale(s, 0.7)
            }),
        ),
        K::Mean => (
            vec![x(&[a, b], rng)],
            Box::new(move |t, v| {
                let s = t.mean(v[0])?;
                t.scale(s, -1.3)
            }),
        ),
        K::Concat => {
            let parts = rng.random_range(2..=3);
            let points = (0..parts).map(|_| x(&[a, b, dim(rng)], rng)).collect();
            (points, binary(Primitive::Concat))
        }
        K::SliceLast => {
            let d = c + 1;
            let start = rng.random_range(0..d);
            let len = rng.random_range(1..=d - start);
            (vec![x(&[a, b, d], rng)], unary(Primitive::SliceLast { start, len }))
        }
        K::NormLast => (vec![off_zero(&[a, b, 3], rng)], unary(Primitive::NormLast)),
        K::Diff => {
            let shape = [a + 1, b + 1, c];
            let axis = rng.random_range(0..2);
            (vec![x(&shape, rng)], unary(Primitive::Diff { axis }))
        }
    }
}

/// Checks `kind` on `cases` random inputs.
pub fn check_primitive(kind: PrimitiveKind, cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ kind as u64);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (points, f) = primitive_case(kind, &mut rng);
        let report = finite_diff_check(|t, v| f(t, v), &points, &FiniteDiffOptions::default())?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(CheckResult {
        suite: Suite::Primitives,
        name: kind.name().into(),
        cases,
        max_rel_err: worst,
        tolerance: PRIMITIVE_TOLERANCE,
    })
}

fn bind_all(names: &[String], vars: &[Var]) -> Bound {
    let mut bound = Bound::new();
    for (name, &v) in names.iter().zip(vars) {
        bound.insert_param(name.clone(), v);
    }
    bound
}

/// Parameters of the named sub-layers of a toy model, as gradient points.
fn layer_params(cfg: &ModelConfig, prefixes: &[&str], seed: u64) -> Result<(Vec<String>, Vec<Tensor<f64>>)> {
    let model = Model::<f64>::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (names, mut points): (Vec<String>, Vec<Tensor<f64>>) = model
        .params()
        .params()
        .iter()
        .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
        .map(|(k, v)| (k.clone(), v.clone()))
        .unzip();
    // Move norms and biases away from their identity/zero initialization.
    for p in &mut points {
        p.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    Ok((names, points))
}

fn path_skeleton(n: usize) -> SkeletonSpec {
    SkeletonSpec {
        joints: (0..n).map(|i| format!("j{i}")).collect(),
        edges: (1..n).map(|i| [i - 1, i]).collect(),
        mirror: (0..n).collect(),
        root: 0,
    }
}

fn gcn_check(nodes: usize, training: bool, seed: u64) -> Result<CheckResult> {
    let mut cfg = ModelConfig::custom(1, 4, 2, 2, path_skeleton(nodes));
    cfg.mode = crate::model::CompositionMode::GcnOnly;
    let prefix = "blocks.0.gcn_spatial.mixer";
    let (names, mut points) = layer_params(&cfg, &[prefix], seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let groups = 3;
    let adj = repeat_adjacency::<f64>(&build_skeleton_adjacency(&cfg.skeleton)?, groups);
    // Spread the pre-activation so relu stays away from its kink.
    points.push(uniform(&[groups, nodes, 4], -2.0, 2.0, &mut rng));
    let mean = uniform(&[4], -0.2, 0.2, &mut rng);
    let var = uniform(&[4], 0.5, 1.5, &mut rng);
    let np = names.len();
    let report = finite_diff_check(
        |t, v| {
            let mut bound = bind_all(&names, &v[..np]);
            bound.insert_buffer(format!("{prefix}.bn.running_mean"), t.constant(mean.clone()));
            bound.insert_buffer(format!("{prefix}.bn.running_var"), t.constant(var.clone()));
            let a = t.constant(adj.clone());
            let (y, _) = gcn_mixer(t, &bound, prefix, v[np], a, BatchNormMode { eps: 1e-5, training })?;
            project(t, y, seed)
        },
        &points,
        &FiniteDiffOptions::default(),
    )?;
    let mode = if training { "train" } else { "eval" };
    Ok(CheckResult {
        suite: Suite::Layers,
        name: format!("gcn_{nodes}_node_{mode}"),
        cases: 1,
        max_rel_err: report.max_rel_err,
        tolerance: PRIMITIVE_TOLERANCE,
    })
}

fn attention_check(seed: u64) -> Result<CheckResult> {
    let cfg = ModelConfig::custom(1, 6, 4, 2, path_skeleton(3));
    let prefix = "blocks.0.attn_spatial";
    let (names, mut points) = layer_params(&cfg, &[prefix], seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    points.push(uniform(&[2, 4, 6], -1.0, 1.0, &mut rng));
    let np = names.len();
    let mut worst = 0.0f64;
    for post_norm in [false, true] {
        let report = finite_diff_check(
            |t, v| {
                let bound = bind_all(&names, &v[..np]);
                let norm = NormPlacement { eps: 1e-5, post_norm };
                let y = metaformer(t, &bound, prefix, v[np], norm, |t, x| {
                    attention_mixer(t, &bound, &format!("{prefix}.mixer"), x, 2)
                })?;
                project(t, y, seed)
            },
            &points,
            &FiniteDiffOptions::default(),
        )?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(CheckResult {
        suite: Suite::Layers,
        name: "attention_block".into(),
        cases: 2,
        max_rel_err: worst,
        tolerance: PRIMITIVE_TOLERANCE,
    })
}

fn fusion_check(seed: u64) -> Result<CheckResult> {
    let cfg = ModelConfig::custom(1, 4, 2, 2, path_skeleton(2));
    let (names, mut points) = layer_params(&cfg, &["blocks.0.fusion"], seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    points.push(uniform(&[3, 2, 4], -1.0, 1.0, &mut rng));
    points.push(uniform(&[3, 2, 4], -1.0, 1.0, &mut rng));
    let np = names.len();
    let report = finite_diff_check(
        |t, v| {
            let bound = bind_all(&names, &v[..np]);
            let (y, _) = adaptive_fuse(t, &bound, "blocks.0.fusion", v[np], v[np + 1])?;
            project(t, y, seed)
        },
        &points,
        &FiniteDiffOptions::default(),
    )?;
    Ok(CheckResult {
        suite: Suite::Layers,
        name: "adaptive_fusion".into(),
        cases: 1,
        max_rel_err: report.max_rel_err,
        tolerance: PRIMITIVE_TOLERANCE,
    })
}

/// Whole-model check: gradients of every parameter and of the input.
fn model_check(cfg: ModelConfig, name: &str, coords: usize, tolerance: f64, seed: u64) -> Result<CheckResult> {
    let model = Model::<f64>::new(cfg.clone(), seed)?;
    let names: Vec<String> = model.params().params().keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 4);
    let shape = [1, cfg.frames, cfg.joints(), 3];
    let mut points = vec![uniform(&shape, -1.0, 1.0, &mut rng)];
    points.extend(model.params().params().values().cloned());
    let opts = FiniteDiffOptions { max_coords_per_leaf: Some(coords), seed, ..Default::default() };
    let report = finite_diff_check(
        |t, v| {
            let bound = bind_all(&names, &v[1..]);
            let trace = model.forward(t, &bound, v[0], true)?;
            // Millimetre outputs scaled back to unit range.
            let y = t.scale(trace.output, 1e-3)?;
            project(t, y, seed)
        },
        &points,
        &opts,
    )?;
    Ok(CheckResult {
        suite: Suite::Model,
        name: name.into(),
        cases: report.coords_checked,
        max_rel_err: report.max_rel_err,
        tolerance,
    })
}

/// The toy network: 2 blocks, d = 16, 2 heads, 4 frames, 5 joints.
pub fn toy_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::custom(2, 16, 4, 2, SkeletonSpec::five_joint());
    cfg.motion_dim = 16;
    cfg.temporal_pe = true;
    cfg
}

fn block_check(seed: u64) -> Result<CheckResult> {
    let mut cfg = ModelConfig::custom(1, 8, 3, 2, path_skeleton(3));
    cfg.motion_dim = 8;
    let mut r = model_check(cfg, "single_block", 16, PRIMITIVE_TOLERANCE, seed)?;
    r.suite = Suite::Layers;
    Ok(r)
}

fn loss_check(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 5);
    let mut worst = 0.0f64;
    let cases = 5;
    for _ in 0..cases {
        let shape = [rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=5), 3];
        let pred = uniform(&shape, -1.0, 1.0, &mut rng);
        let gt = uniform(&shape, -1.0, 1.0, &mut rng);
        let cfg = LossConfig { lambda_velocity: rng.random_range(0.0..2.0) };
        let report = finite_diff_check(
            |t, v| Ok(total_loss(t, v[0], v[1], &cfg)?.total),
            &[pred, gt],
            &FiniteDiffOptions::default(),
        )?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(CheckResult {
        suite: Suite::Loss,
        name: "position_velocity".into(),
        cases,
        max_rel_err: worst,
        tolerance: PRIMITIVE_TOLERANCE,
    })
}

/// Runs the selected checks. A check that cannot be evaluated is an error,
/// a check that exceeds its tolerance is a failed [`CheckResult`].
pub fn run(selection: Selection, seed: u64) -> Result<Vec<CheckResult>> {
    let wants = |s: Suite| matches!(selection, Selection::All) || selection == Selection::Suite(s);
    let mut out = Vec::new();
    match selection {
        Selection::Primitive(kind) => out.push(check_primitive(kind, PRIMITIVE_CASES, seed)?),
        _ if wants(Suite::Primitives) => {
            for kind in PrimitiveKind::ALL {
                out.push(check_primitive(kind, PRIMITIVE_CASES, seed)?);
            }
        }
        _ => {}
    }
    if wants(Suite::Layers) {
        for nodes in [2, 3] {
            for training in [true, false] {
                out.push(gcn_check(nodes, training, seed)?);
            }
        }
        out.push(attention_check(seed)?);
        out.push(fusion_check(seed)?);
        out.push(block_check(seed)?);
    }
    if wants(Suite::Model) {
        out.push(model_check(toy_model_config(), "toy_model", 6, MODEL_TOLERANCE, seed)?);
    }
    if wants(Suite::Loss) {
        out.push(loss_check(seed)?);
    }
    Ok(out)
}
