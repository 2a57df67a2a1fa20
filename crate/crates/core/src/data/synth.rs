//! Synthetic motion from forward kinematics with sinusoidal joint angles,
//! observed through a pinhole camera.

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sequence::{PoseKind, Sequence};
use crate::error::{Error, Result};
use crate::graph::SkeletonSpec;

/// Pinhole intrinsics in pixels. Camera axes: x right, y down, z forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub principal: [f64; 2],
    pub width: f64,
    pub height: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Self { focal: 1145.0, principal: [500.0, 500.0], width: 1000.0, height: 1000.0 }
    }
}

impl Camera {
    /// Pixel coordinates to the normalized frame: `x ∈ [−1, 1]`, y scaled by the same factor.
    pub fn normalize(&self, u: f64, v: f64) -> [f64; 2] {
        [2.0 * u / self.width - 1.0, 2.0 * v / self.width - self.height / self.width]
    }
}

/// Per-joint sinusoid `amplitude · sin(2π·frequency·t + phase)` about `axis`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointMotion {
    pub axis: [f64; 3],
    /// Radians.
    pub amplitude: f64,
    /// Hertz.
    pub frequency: f64,
    pub phase: f64,
}

/// Root position `start + velocity·t + sway·sin(2π·sway_frequency·t)`, plus a yaw rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RootTrajectory {
    pub start: [f64; 3],
    /// mm/s.
    pub velocity: [f64; 3],
    pub sway: [f64; 3],
    pub sway_frequency: f64,
    /// rad/s about the vertical axis.
    pub yaw_rate: f64,
}

impl Default for RootTrajectory {
    fn default() -> Self {
        Self { start: [0.0, 0.0, 4500.0], velocity: [0.0; 3], sway: [0.0; 3], sway_frequency: 0.0, yaw_rate: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneConfig {
    pub skeleton: SkeletonSpec,
    /// Length of the bone from each joint's parent, mm (ignored for the root).
    pub bone_lengths: Vec<f64>,
    /// Rest direction of each bone in the body frame.
    pub rest_directions: Vec<[f64; 3]>,
    pub motion: Vec<JointMotion>,
    pub root: RootTrajectory,
    pub camera: Camera,
    /// 2D noise standard deviation, pixels.
    pub noise_px: f64,
    pub fps: f64,
    pub seed: u64,
}

struct H36mBone {
    length: f64,
    dir: [f64; 3],
}

/// Rest pose facing the camera; the subject's left is +x.
fn h36m_bones() -> [H36mBone; 17] {
    let b = |length, dir| H36mBone { length, dir };
    [
        b(0.0, [0.0, 0.0, 0.0]),
        b(130.0, [-1.0, 0.0, 0.0]),
        b(450.0, [0.0, 1.0, 0.0]),
        b(440.0, [0.0, 1.0, 0.0]),
        b(130.0, [1.0, 0.0, 0.0]),
        b(450.0, [0.0, 1.0, 0.0]),
        b(440.0, [0.0, 1.0, 0.0]),
        b(230.0, [0.0, -1.0, 0.0]),
        b(250.0, [0.0, -1.0, 0.0]),
        b(110.0, [0.0, -1.0, 0.0]),
        b(120.0, [0.0, -1.0, 0.0]),
        b(150.0, [1.0, 0.0, 0.0]),
        b(280.0, [0.0, 1.0, 0.0]),
        b(250.0, [0.0, 1.0, 0.0]),
        b(150.0, [-1.0, 0.0, 0.0]),
        b(280.0, [0.0, 1.0, 0.0]),
        b(250.0, [0.0, 1.0, 0.0]),
    ]
}

fn unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return v.map(|c| c / n);
        }
    }
}

impl SyntheticSceneConfig {
    /// A randomized scene for `skeleton`: anatomical proportions for the
    /// bundled 17-joint layout, random 200 mm bones otherwise; random joint
    /// sinusoids, root drift and yaw drawn from `seed`.
    pub fn randomized(skeleton: SkeletonSpec, seed: u64) -> Result<Self> {
        skeleton.validate()?;
        let j = skeleton.joint_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (bone_lengths, rest_directions) = if skeleton == SkeletonSpec::h36m() {
            h36m_bones().iter().map(|b| (b.length, b.dir)).unzip()
        } else {
            (0..j).map(|i| if i == skeleton.root { (0.0, [0.0; 3]) } else { (200.0, unit(&mut rng)) }).unzip()
        };
        let motion = (0..j)
            .map(|_| JointMotion {
                axis: unit(&mut rng),
                amplitude: rng.random_range(0.05..0.6),
                frequency: rng.random_range(0.3..1.5),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            })
            .collect();
        let root = RootTrajectory {
            start: [rng.random_range(-300.0..300.0), rng.random_range(-100.0..100.0), rng.random_range(4000.0..5000.0)],
            velocity: [rng.random_range(-200.0..200.0), 0.0, rng.random_range(-200.0..200.0)],
            sway: [rng.random_range(0.0..40.0), rng.random_range(0.0..30.0), 0.0],
            sway_frequency: rng.random_range(0.5..2.0),
            yaw_rate: rng.random_range(-0.5..0.5),
        };
        Ok(Self {
            skeleton,
            bone_lengths,
            rest_directions,
            motion,
            root,
            camera: Camera::default(),
            noise_px: 0.0,
            fps: 50.0,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.skeleton.validate()?;
        let j = self.skeleton.joint_count();
        if self.bone_lengths.len() != j || self.rest_directions.len() != j || self.motion.len() != j {
            return Err(Error::Config(format!("scene needs bone, direction and motion entries for all {j} joints")));
        }
        for (i, &l) in self.bone_lengths.iter().enumerate() {
            if i != self.skeleton.root && !(l > 0.0) {
                return Err(Error::Config(format!("bone length of joint {i} must be positive, got {l}")));
            }
        }
        if !(self.camera.focal > 0.0) || !(self.camera.width > 0.0) || !(self.camera.height > 0.0) {
            return Err(Error::Config("camera focal length and image size must be positive".into()));
        }
        if !(self.noise_px >= 0.0) || !(self.fps > 0.0) {
            return Err(Error::Config("noise must be nonnegative and fps positive".into()));
        }
        Ok(())
    }
}

fn vec3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn rotation(axis: [f64; 3], angle: f64) -> Rotation3<f64> {
    let v = vec3(axis);
    if v.norm() == 0.0 {
        Rotation3::identity()
    } else {
        Rotation3::from_axis_angle(&Unit::new_normalize(v), angle)
    }
}

/// Camera-space joint positions for `frames` frames, in millimetres.
pub fn forward_kinematics(cfg: &SyntheticSceneConfig, frames: usize) -> Result<Sequence> {
    cfg.validate()?;
    let spec = &cfg.skeleton;
    let parents = spec.parents()?;
    let j = spec.joint_count();
    // Parents before children.
    let mut order = vec![spec.root];
    let mut i = 0;
    while i < order.len() {
        let p = order[i];
        order.extend((0..j).filter(|&c| parents[c] == Some(p)));
        i += 1;
    }
    let mut data = Vec::with_capacity(frames * j * 3);
    let mut pos = vec![Vector3::zeros(); j];
    let mut rot = vec![Rotation3::identity(); j];
    for t in 0..frames {
        let time = t as f64 / cfg.fps;
        let r = &cfg.root;
        let tau = std::f64::consts::TAU;
        let sway = (tau * r.sway_frequency * time).sin();
        let root_pos = vec3(r.start) + vec3(r.velocity) * time + vec3(r.sway) * sway;
        for &joint in &order {
            let m = &cfg.motion[joint];
            let local = rotation(m.axis, m.amplitude * (tau * m.frequency * time + m.phase).sin());
            match parents[joint] {
                None => {
                    rot[joint] = Rotation3::from_axis_angle(&Vector3::y_axis(), r.yaw_rate * time) * local;
                    pos[joint] = root_pos;
                }
                Some(p) => {
                    rot[joint] = rot[p] * local;
                    pos[joint] = pos[p] + rot[joint] * vec3(cfg.rest_directions[joint]) * cfg.bone_lengths[joint];
                }
            }
        }
        for p in &pos {
            data.extend([p.x as f32, p.y as f32, p.z as f32]);
        }
    }
    Sequence::new(PoseKind::ThreeD, cfg.fps, j, data)
}

/// Projects camera-space joints to normalized image coordinates with confidence 1.
pub fn pinhole_project(p3d: &Sequence, camera: &Camera) -> Result<Sequence> {
    project_with_noise(p3d, camera, None)
}

fn project_with_noise(p3d: &Sequence, camera: &Camera, noise: Option<(f64, &mut ChaCha8Rng)>) -> Result<Sequence> {
    let j = p3d.joints();
    let mut out = Vec::with_capacity(p3d.data().len());
    let mut noise = noise.filter(|(s, _)| *s > 0.0);
    for (i, p) in p3d.data().chunks(3).enumerate() {
        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
        if !(z > 0.0) {
            return Err(Error::BehindCamera { frame: i / j, joint: i % j, z });
        }
        let mut u = camera.focal * x / z + camera.principal[0];
        let mut v = camera.focal * y / z + camera.principal[1];
        let mut conf = 1.0;
        if let Some((sigma, rng)) = noise.as_mut() {
            let dist = Normal::new(0.0, *sigma).expect("positive sigma");
            let (nu, nv) = (dist.sample(*rng), dist.sample(*rng));
            u += nu;
            v += nv;
            conf = (1.0 - (nu * nu + nv * nv).sqrt() / (3.0 * *sigma)).clamp(0.0, 1.0);
        }
        let n = camera.normalize(u, v);
        out.extend([n[0] as f32, n[1] as f32, conf as f32]);
    }
    let mut s = Sequence::new(PoseKind::TwoD, p3d.fps, j, out)?;
    s.action = p3d.action.clone();
    Ok(s)
}

/// Ground-truth 3D motion and its noisy 2D observation. Deterministic in `cfg.seed`.
pub fn generate_synthetic_sequence(cfg: &SyntheticSceneConfig, frames: usize) -> Result<(Sequence, Sequence)> {
    if frames == 0 {
        return Err(Error::Config("at least one frame is required".into()));
    }
    let p3d = forward_kinematics(cfg, frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let p2d = project_with_noise(&p3d, &cfg.camera, Some((cfg.noise_px, &mut rng)))?;
    Ok((p3d, p2d))
}

/// Mirrors a sequence left to right: negates x and swaps mirrored joints.
pub fn horizontal_flip(seq: &Sequence, spec: &SkeletonSpec) -> Result<Sequence> {
    seq.check_skeleton(spec)?;
    let j = seq.joints();
    let mut out = seq.clone();
    let src = seq.data();
    let dst = out.data_mut();
    for t in 0..seq.frames() {
        for (k, &m) in spec.mirror.iter().enumerate() {
            let (a, b) = ((t * j + m) * 3, (t * j + k) * 3);
            dst[a] = -src[b];
            dst[a + 1] = src[b + 1];
            dst[a + 2] = src[b + 2];
        }
    }
    Ok(out)
}
