//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes plain numbers or JSON text and returns JSON text, so the
//! page needs no bindings beyond `JSON.parse`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use poselift::accounting::{count_macs, MacConvention};
use poselift::data::{generate_synthetic_sequence, root_centered, SyntheticSceneConfig};
use poselift::graph::{build_temporal_knn_adjacency, SkeletonSpec};
use poselift::model::{ModelConfig, Variant};

fn to_js(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Model configuration from a variant name (`XS`, `S`, `B`, `L`) or model JSON.
pub fn resolve_config(spec: &str) -> Result<ModelConfig, String> {
    let spec = spec.trim();
    let cfg = if spec.starts_with('{') {
        serde_json::from_str(spec).map_err(|e| e.to_string())?
    } else {
        ModelConfig::variant(spec.parse::<Variant>().map_err(|e| e.to_string())?)
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

pub fn cost_json(spec: &str, convention: &str) -> Result<String, String> {
    let cfg = resolve_config(spec)?;
    let convention: MacConvention = convention.parse().map_err(|e: poselift::Error| e.to_string())?;
    serde_json::to_string(&count_macs(&cfg, convention)).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Motion {
    joints: Vec<String>,
    edges: Vec<[usize; 2]>,
    fps: f64,
    /// `[frame][joint][x, y, z]` in millimetres, camera coordinates.
    pose_3d: Vec<Vec<[f32; 3]>>,
    /// `[frame][joint][u, v]` normalized image coordinates.
    pose_2d: Vec<Vec<[f32; 2]>>,
}

pub fn motion_json(seed: u64, frames: usize, noise_px: f64) -> Result<String, String> {
    let mut scene = SyntheticSceneConfig::randomized(SkeletonSpec::h36m(), seed).map_err(|e| e.to_string())?;
    scene.noise_px = noise_px;
    let (p3, p2) = generate_synthetic_sequence(&scene, frames.max(1)).map_err(|e| e.to_string())?;
    let j = p3.joints();
    let motion = Motion {
        joints: scene.skeleton.joints.clone(),
        edges: scene.skeleton.edges.clone(),
        fps: p3.fps,
        pose_3d: p3.data().chunks(j * 3).map(|f| f.chunks(3).map(|p| [p[0], p[1], p[2]]).collect()).collect(),
        pose_2d: p2.data().chunks(j * 3).map(|f| f.chunks(3).map(|p| [p[0], p[1]]).collect()).collect(),
    };
    serde_json::to_string(&motion).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Heatmap {
    frames: usize,
    /// Row-major normalized adjacency.
    values: Vec<f64>,
}

/// Temporal K-NN adjacency over the root-centred poses of a synthetic sequence.
pub fn knn_json(seed: u64, frames: usize, k: usize, chain: bool) -> Result<String, String> {
    let scene = SyntheticSceneConfig::randomized(SkeletonSpec::h36m(), seed).map_err(|e| e.to_string())?;
    let (p3, _) = generate_synthetic_sequence(&scene, frames.max(1)).map_err(|e| e.to_string())?;
    let centred = root_centered(&p3, scene.skeleton.root);
    let dim = centred.joints() * 3;
    let adj = build_temporal_knn_adjacency(centred.data(), centred.frames(), dim, k.max(1), chain);
    serde_json::to_string(&Heatmap { frames: adj.size(), values: adj.as_slice().to_vec() }).map_err(|e| e.to_string())
}

/// Cost report JSON for a variant name or model-configuration JSON.
#[wasm_bindgen]
pub fn cost_report(spec: &str, convention: &str) -> Result<String, JsValue> {
    cost_json(spec, convention).map_err(to_js)
}

/// Synthetic 3D motion and its 2D projection as JSON.
#[wasm_bindgen]
pub fn synthetic_motion(seed: u32, frames: u32, noise_px: f64) -> Result<String, JsValue> {
    motion_json(seed as u64, frames as usize, noise_px).map_err(to_js)
}

/// Normalized temporal K-NN adjacency as JSON.
#[wasm_bindgen]
pub fn knn_adjacency(seed: u32, frames: u32, k: u32, chain: bool) -> Result<String, JsValue> {
    knn_json(seed as u64, frames as usize, k as usize, chain).map_err(to_js)
}
