use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SkeletonSpec;
use crate::metrics::Point;

/// Whether a sequence holds image-plane keypoints or camera-space joints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoseKind {
    /// `(x, y, confidence)` in normalized image units.
    #[serde(rename = "2d")]
    TwoD,
    /// `(x, y, z)` in millimetres.
    #[serde(rename = "3d")]
    ThreeD,
}

/// A `T × J × 3` pose track stored row-major as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub kind: PoseKind,
    pub fps: f64,
    pub action: Option<String>,
    joints: usize,
    data: Vec<f32>,
}

pub type Pose2DSequence = Sequence;
pub type Pose3DSequence = Sequence;

impl Sequence {
    pub fn new(kind: PoseKind, fps: f64, joints: usize, data: Vec<f32>) -> Result<Self> {
        let s = Self { kind, fps, action: None, joints, data };
        s.validate()?;
        Ok(s)
    }

    pub fn with_action(mut self, action: impl Into<String>) -> Self {
        self.action = Some(action.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 || self.data.is_empty() || !self.data.len().is_multiple_of(self.joints * 3) {
            return Err(Error::Sequence(format!(
                "{} values do not form whole frames of {} joints × 3 channels",
                self.data.len(),
                self.joints
            )));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Sequence(format!("fps must be positive, got {}", self.fps)));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            let (t, j, c) = self.locate(i);
            return Err(Error::Sequence(format!("non-finite value at frame {t}, joint {j}, channel {c}")));
        }
        if self.kind == PoseKind::TwoD {
            if let Some(i) = self.data.iter().skip(2).step_by(3).position(|v| !(0.0..=1.0).contains(v)) {
                let (t, j, _) = self.locate(i * 3 + 2);
                return Err(Error::Sequence(format!("confidence outside [0, 1] at frame {t}, joint {j}")));
            }
        }
        Ok(())
    }

    fn locate(&self, i: usize) -> (usize, usize, usize) {
        (i / (self.joints * 3), (i / 3) % self.joints, i % 3)
    }

    pub fn frames(&self) -> usize {
        self.data.len() / (self.joints * 3)
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, t: usize, j: usize) -> [f32; 3] {
        let o = (t * self.joints + j) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Frames `start..start + len` as a new sequence.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let w = self.joints * 3;
        Self {
            kind: self.kind,
            fps: self.fps,
            action: self.action.clone(),
            joints: self.joints,
            data: self.data[start * w..(start + len) * w].to_vec(),
        }
    }

    /// All joints widened to `f64`, frame-major.
    pub fn points(&self) -> Vec<Point> {
        self.data.chunks(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect()
    }

    pub fn check_skeleton(&self, spec: &SkeletonSpec) -> Result<()> {
        if self.joints != spec.joint_count() {
            return Err(Error::Sequence(format!(
                "sequence has {} joints but the skeleton declares {}",
                self.joints,
                spec.joint_count()
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct SequenceFile {
    fps: f64,
    joints: usize,
    channels: usize,
    kind: PoseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action: Option<String>,
    frames: Vec<Vec<Vec<f32>>>,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), msg: msg.into() }
}

/// Parses the JSON sequence format. `origin` names the source in errors.
pub fn parse_sequence(text: &str, origin: &Path) -> Result<Sequence> {
    let file: SequenceFile = serde_json::from_str(text).map_err(|e| format_err(origin, e.to_string()))?;
    if file.channels != 3 {
        return Err(format_err(origin, format!("field `channels`: expected 3, found {}", file.channels)));
    }
    if file.frames.is_empty() {
        return Err(format_err(origin, "field `frames`: at least one frame is required"));
    }
    let mut data = Vec::with_capacity(file.frames.len() * file.joints * 3);
    for (t, frame) in file.frames.iter().enumerate() {
        if frame.len() != file.joints {
            return Err(format_err(
                origin,
                format!("frames[{t}]: expected {} joints, found {}", file.joints, frame.len()),
            ));
        }
        for (j, joint) in frame.iter().enumerate() {
            if joint.len() != 3 {
                return Err(format_err(origin, format!("frames[{t}][{j}]: expected 3 values, found {}", joint.len())));
            }
            data.extend_from_slice(joint);
        }
    }
    let seq = Sequence { kind: file.kind, fps: file.fps, action: file.action, joints: file.joints, data };
    seq.validate().map_err(|e| format_err(origin, e.to_string()))?;
    Ok(seq)
}

pub fn sequence_to_json(seq: &Sequence) -> Result<String> {
    let frames = seq.data.chunks(seq.joints * 3).map(|f| f.chunks(3).map(<[f32]>::to_vec).collect()).collect();
    let file = SequenceFile {
        fps: seq.fps,
        joints: seq.joints,
        channels: 3,
        kind: seq.kind,
        action: seq.action.clone(),
        frames,
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn load_sequence(path: &Path) -> Result<Sequence> {
    let text = fs::read_to_string(path)?;
    parse_sequence(&text, path)
}

pub fn save_sequence(seq: &Sequence, path: &Path) -> Result<()> {
    fs::write(path, sequence_to_json(seq)?)?;
    Ok(())
}

/// One line of a dataset manifest. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub input: PathBuf,
    pub target: PathBuf,
    #[serde(default)]
    pub action: Option<String>,
}

/// A 2D input track with its 3D target.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePair {
    pub name: String,
    pub input: Sequence,
    pub target: Sequence,
    pub action: String,
}

impl SequencePair {
    pub fn new(name: impl Into<String>, input: Sequence, target: Sequence) -> Result<Self> {
        let name = name.into();
        if input.kind != PoseKind::TwoD || target.kind != PoseKind::ThreeD {
            return Err(Error::Sequence(format!("`{name}`: expected a 2d input and a 3d target")));
        }
        if input.frames() != target.frames() || input.joints() != target.joints() {
            return Err(Error::Sequence(format!(
                "`{name}`: input is {}×{} but target is {}×{}",
                input.frames(),
                input.joints(),
                target.frames(),
                target.joints()
            )));
        }
        let action = target.action.clone().or_else(|| input.action.clone()).unwrap_or_else(|| "unlabeled".into());
        Ok(Self { name, input, target, action })
    }
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

/// Loads every pair listed in a manifest, checking joint counts against `skeleton`.
pub fn load_dataset(manifest: &Path, skeleton: &SkeletonSpec) -> Result<Vec<SequencePair>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = load_manifest(manifest)?;
    if entries.is_empty() {
        return Err(format_err(manifest, "manifest lists no sequences"));
    }
    entries
        .iter()
        .map(|e| {
            let input = load_sequence(&base.join(&e.input))?;
            let target = load_sequence(&base.join(&e.target))?;
            input.check_skeleton(skeleton)?;
            target.check_skeleton(skeleton)?;
            let mut pair = SequencePair::new(e.input.display().to_string(), input, target)?;
            if let Some(a) = &e.action {
                pair.action = a.clone();
            }
            Ok(pair)
        })
        .collect()
}
