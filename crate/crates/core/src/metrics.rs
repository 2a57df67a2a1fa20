//! Training losses (on the tape) and evaluation metrics (plain `f64`).
//!
//! Evaluation functions take poses as flat `[x, y, z]` lists in frame-major
//! order, `frames × joints` entries long.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub type Point = [f64; 3];

/// PCK threshold in millimetres.
pub const PCK_THRESHOLD_MM: f64 = 150.0;
/// AUC thresholds `0, 5, …, 150` mm.
pub const AUC_STEPS: usize = 31;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the velocity term.
    pub lambda_velocity: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_velocity: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_velocity >= 0.0 && self.lambda_velocity.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("lambda_velocity must be nonnegative, got {}", self.lambda_velocity)))
        }
    }
}

fn check_pair<F: Scalar>(tape: &Tape<F>, pred: Var, gt: Var, op: &'static str) -> Result<usize> {
    let (a, b) = (tape.shape(pred), tape.shape(gt));
    if a != b || a.len() != 4 || a[3] != 3 {
        return Err(shape_err(op, format!("pred {a:?} and target {b:?} must both be [B, T, J, 3]")));
    }
    Ok(a[0])
}

/// `Σ_t Σ_j ‖P̂ − P‖`, averaged over the batch.
pub fn position_loss<F: Scalar>(tape: &mut Tape<F>, pred: Var, gt: Var) -> Result<Var> {
    let batch = check_pair(tape, pred, gt, "position_loss")?;
    let d = tape.sub(pred, gt)?;
    let n = tape.norm_last(d)?;
    let s = tape.sum(n)?;
    tape.scale(s, 1.0 / batch as f64)
}

/// `Σ_t Σ_j ‖ΔP̂ − ΔP‖` over consecutive frames, averaged over the batch. Zero for one frame.
pub fn velocity_loss<F: Scalar>(tape: &mut Tape<F>, pred: Var, gt: Var) -> Result<Var> {
    let batch = check_pair(tape, pred, gt, "velocity_loss")?;
    if tape.shape(pred)[1] < 2 {
        return Ok(tape.constant(Tensor::scalar(F::zero())));
    }
    let d = tape.sub(pred, gt)?;
    let dv = tape.diff(d, 1)?;
    let n = tape.norm_last(dv)?;
    let s = tape.sum(n)?;
    tape.scale(s, 1.0 / batch as f64)
}

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub position: Var,
    pub velocity: Var,
}

/// `L_pos + λ·L_vel`.
pub fn total_loss<F: Scalar>(tape: &mut Tape<F>, pred: Var, gt: Var, cfg: &LossConfig) -> Result<LossTerms> {
    let position = position_loss(tape, pred, gt)?;
    let velocity = velocity_loss(tape, pred, gt)?;
    let weighted = tape.scale(velocity, cfg.lambda_velocity)?;
    let total = tape.add(position, weighted)?;
    Ok(LossTerms { total, position, velocity })
}

fn frames_of(pred: &[Point], gt: &[Point], joints: usize) -> usize {
    assert!(joints > 0 && pred.len() == gt.len() && pred.len().is_multiple_of(joints), "pose arrays disagree");
    pred.len() / joints
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dist(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Subtracts the root joint from every joint of every frame.
pub fn root_center(poses: &[Point], joints: usize, root: usize) -> Vec<Point> {
    poses
        .chunks(joints)
        .flat_map(|frame| {
            let r = frame[root];
            frame.iter().map(move |&p| sub(p, r))
        })
        .collect()
}

/// Root-relative per-joint errors, frame-major.
fn centered_errors(pred: &[Point], gt: &[Point], joints: usize, root: usize) -> Vec<f64> {
    frames_of(pred, gt, joints);
    let (p, g) = (root_center(pred, joints, root), root_center(gt, joints, root));
    p.iter().zip(&g).map(|(&a, &b)| dist(a, b)).collect()
}

/// Mean per-joint position error after aligning root joints (P1).
pub fn mpjpe(pred: &[Point], gt: &[Point], joints: usize, root: usize) -> f64 {
    let e = centered_errors(pred, gt, joints, root);
    e.iter().sum::<f64>() / e.len() as f64
}

/// Root-relative error of each joint, averaged over frames.
pub fn per_joint_mpjpe(pred: &[Point], gt: &[Point], joints: usize, root: usize) -> Vec<f64> {
    let e = centered_errors(pred, gt, joints, root);
    let frames = e.len() / joints;
    (0..joints).map(|j| (0..frames).map(|t| e[t * joints + j]).sum::<f64>() / frames as f64).collect()
}

/// Per-frame alignment used by P2.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Rotation, translation and uniform scale.
    #[default]
    Similarity,
    /// Rotation and translation only.
    RigidOnly,
}

/// Best `c·R·x + t` mapping `pred` onto `gt` in the least-squares sense
/// (`c = 1` for [`Alignment::RigidOnly`]). Falls back to matching centroids
/// when `pred` has no spread.
pub fn procrustes_align(pred: &[Point], gt: &[Point], alignment: Alignment) -> Vec<Point> {
    assert_eq!(pred.len(), gt.len());
    let n = pred.len() as f64;
    let to_v = |p: &Point| Vector3::new(p[0], p[1], p[2]);
    let mu_x = pred.iter().map(to_v).sum::<Vector3<f64>>() / n;
    let mu_y = gt.iter().map(to_v).sum::<Vector3<f64>>() / n;
    let var_x = pred.iter().map(|p| (to_v(p) - mu_x).norm_squared()).sum::<f64>() / n;
    let shift = |p: &Point, m: &Matrix3<f64>, t: &Vector3<f64>| {
        let v = m * to_v(p) + t;
        [v.x, v.y, v.z]
    };
    if var_x <= 1e-12 {
        return pred.iter().map(|p| shift(p, &Matrix3::identity(), &(mu_y - mu_x))).collect();
    }
    let mut cov = Matrix3::zeros();
    for (p, g) in pred.iter().zip(gt) {
        cov += (to_v(g) - mu_y) * (to_v(p) - mu_x).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let c = match alignment {
        Alignment::Similarity => (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_x,
        Alignment::RigidOnly => 1.0,
    };
    let m = r * c;
    let t = mu_y - m * mu_x;
    pred.iter().map(|p| shift(p, &m, &t)).collect()
}

/// Per-frame Procrustes-aligned MPJPE (P2).
pub fn p_mpjpe(pred: &[Point], gt: &[Point], joints: usize, alignment: Alignment) -> f64 {
    let frames = frames_of(pred, gt, joints);
    let mut total = 0.0;
    for (p, g) in pred.chunks(joints).zip(gt.chunks(joints)) {
        let aligned = procrustes_align(p, g, alignment);
        total += aligned.iter().zip(g).map(|(&a, &b)| dist(a, b)).sum::<f64>();
    }
    total / (frames * joints) as f64
}

/// Percentage of root-relative joint errors strictly below `threshold`.
pub fn pck(pred: &[Point], gt: &[Point], joints: usize, root: usize, threshold: f64) -> f64 {
    let e = centered_errors(pred, gt, joints, root);
    100.0 * e.iter().filter(|&&x| x < threshold).count() as f64 / e.len() as f64
}

fn pck_auc_from_errors(e: &[f64]) -> (f64, f64) {
    let pct = |th: f64| 100.0 * e.iter().filter(|&&x| x < th).count() as f64 / e.len() as f64;
    let auc = (0..AUC_STEPS).map(|i| pct(5.0 * i as f64)).sum::<f64>() / AUC_STEPS as f64;
    (pct(PCK_THRESHOLD_MM), auc)
}

/// `(PCK at 150 mm, mean PCK over 0, 5, …, 150 mm)`, both in percent.
pub fn pck_auc(pred: &[Point], gt: &[Point], joints: usize, root: usize) -> (f64, f64) {
    pck_auc_from_errors(&centered_errors(pred, gt, joints, root))
}

/// Per-joint Euclidean norms of the second-difference residual, one per
/// interior frame and joint.
fn accel_residuals(pred: &[Point], gt: &[Point], joints: usize) -> Vec<f64> {
    let frames = frames_of(pred, gt, joints);
    let mut out = Vec::with_capacity(frames.saturating_sub(2) * joints);
    for t in 1..frames.saturating_sub(1) {
        for j in 0..joints {
            let at = |x: &[Point], k: usize, c: usize| x[k * joints + j][c];
            let mut sq = 0.0;
            for c in 0..3 {
                let lp = at(gt, t - 1, c) - 2.0 * at(gt, t, c) + at(gt, t + 1, c);
                let lq = at(pred, t - 1, c) - 2.0 * at(pred, t, c) + at(pred, t + 1, c);
                sq += (lp - lq) * (lp - lq);
            }
            out.push(sq.sqrt());
        }
    }
    out
}

/// Mean norm of the difference of second temporal differences. Zero below three frames.
pub fn acceleration_error(pred: &[Point], gt: &[Point], joints: usize) -> f64 {
    let r = accel_residuals(pred, gt, joints);
    if r.is_empty() {
        0.0
    } else {
        r.iter().sum::<f64>() / r.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub root: usize,
    pub alignment: Alignment,
}

/// One evaluated sequence.
#[derive(Clone, Copy, Debug)]
pub struct EvalPair<'a> {
    pub pred: &'a [Point],
    pub gt: &'a [Point],
    pub action: &'a str,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionMetrics {
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub frames: usize,
}

/// Frame-weighted aggregate over a set of sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub pck_pct: f64,
    pub auc_pct: f64,
    pub accel_err_mm: f64,
    pub frames: usize,
    pub sequences: usize,
    /// Root-relative error of each joint.
    pub per_joint: Vec<f64>,
    pub per_action: BTreeMap<String, ActionMetrics>,
}

/// Aggregates every metric over `pairs`. Acceleration error is computed on
/// root-centered sequences, like P1.
pub fn aggregate_report(pairs: &[EvalPair<'_>], joints: usize, opts: &MetricOptions) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("no sequences to evaluate"));
    }
    let mut errors = Vec::new();
    let mut p2_sum = 0.0;
    let mut accel = Vec::new();
    let mut frames = 0;
    let mut by_action: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for pair in pairs {
        if pair.pred.len() != pair.gt.len() || pair.pred.is_empty() || pair.pred.len() % joints != 0 {
            return Err(Error::Sequence(format!(
                "prediction ({} points) and target ({} points) disagree for {joints} joints",
                pair.pred.len(),
                pair.gt.len()
            )));
        }
        let t = pair.pred.len() / joints;
        let e = centered_errors(pair.pred, pair.gt, joints, opts.root);
        let p2 = p_mpjpe(pair.pred, pair.gt, joints, opts.alignment) * (t * joints) as f64;
        let p1 = e.iter().sum::<f64>();
        let entry = by_action.entry(pair.action.to_string()).or_insert((0.0, 0.0, 0));
        entry.0 += p1;
        entry.1 += p2;
        entry.2 += t;
        p2_sum += p2;
        frames += t;
        errors.extend(e);
        let (pc, gc) = (root_center(pair.pred, joints, opts.root), root_center(pair.gt, joints, opts.root));
        accel.extend(accel_residuals(&pc, &gc, joints));
    }
    let n = errors.len() as f64;
    let per_joint = (0..joints).map(|j| errors.iter().skip(j).step_by(joints).sum::<f64>() / frames as f64).collect();
    let (pck_pct, auc_pct) = pck_auc_from_errors(&errors);
    let per_action = by_action
        .into_iter()
        .map(|(k, (p1, p2, t))| {
            let m = (t * joints) as f64;
            (k, ActionMetrics { mpjpe_mm: p1 / m, p_mpjpe_mm: p2 / m, frames: t })
        })
        .collect();
    Ok(MetricsReport {
        mpjpe_mm: errors.iter().sum::<f64>() / n,
        p_mpjpe_mm: p2_sum / n,
        pck_pct,
        auc_pct,
        accel_err_mm: if accel.is_empty() { 0.0 } else { accel.iter().sum::<f64>() / accel.len() as f64 },
        frames,
        sequences: pairs.len(),
        per_joint,
        per_action,
    })
}
