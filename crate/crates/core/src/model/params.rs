use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Sub-layers of one block, in execution order of the parallel arrangement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    AttnSpatial,
    AttnTemporal,
    GcnSpatial,
    GcnTemporal,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::AttnSpatial => "attn_spatial",
            Self::AttnTemporal => "attn_temporal",
            Self::GcnSpatial => "gcn_spatial",
            Self::GcnTemporal => "gcn_temporal",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, Self::AttnSpatial | Self::AttnTemporal)
    }

    pub fn is_temporal(self) -> bool {
        matches!(self, Self::AttnTemporal | Self::GcnTemporal)
    }
}

/// Stages present in each block for the configured composition mode.
pub fn block_stages(cfg: &ModelConfig) -> Vec<Stage> {
    let mut stages = Vec::with_capacity(4);
    if cfg.mode.has_attention() {
        stages.extend([Stage::AttnSpatial, Stage::AttnTemporal]);
    }
    if cfg.mode.has_gcn() {
        stages.extend([Stage::GcnSpatial, Stage::GcnTemporal]);
    }
    stages
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Clone, Debug)]
pub(crate) struct Slot {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn linear(slots: &mut Vec<Slot>, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
    slots.push(Slot {
        path: format!("{prefix}.weight"),
        shape: vec![fan_in, fan_out],
        init: Init::Xavier { fan_in, fan_out },
    });
    if bias {
        slots.push(Slot { path: format!("{prefix}.bias"), shape: vec![fan_out], init: Init::Zeros });
    }
}

fn affine(slots: &mut Vec<Slot>, prefix: &str, d: usize) {
    slots.push(Slot { path: format!("{prefix}.weight"), shape: vec![d], init: Init::Ones });
    slots.push(Slot { path: format!("{prefix}.bias"), shape: vec![d], init: Init::Zeros });
}

/// Trainable tensors of a model, in initialization order.
pub(crate) fn parameter_layout(cfg: &ModelConfig) -> Vec<Slot> {
    let (d, j, t) = (cfg.dim, cfg.joints(), cfg.frames);
    let hidden = d * cfg.mlp_ratio;
    let mut s = Vec::new();
    linear(&mut s, "embed", 3, d, true);
    if cfg.spatial_pe {
        s.push(Slot { path: "pos_spatial".into(), shape: vec![j, d], init: Init::Normal(cfg.pe_init_std) });
    }
    if cfg.temporal_pe {
        s.push(Slot { path: "pos_temporal".into(), shape: vec![t, 1, d], init: Init::Normal(cfg.pe_init_std) });
    }
    for b in 0..cfg.depth {
        for stage in block_stages(cfg) {
            let p = format!("blocks.{b}.{}", stage.name());
            affine(&mut s, &format!("{p}.norm1"), d);
            if stage.is_attention() {
                for w in ["query", "key", "value"] {
                    linear(&mut s, &format!("{p}.mixer.{w}"), d, d, false);
                }
                linear(&mut s, &format!("{p}.mixer.proj"), d, d, true);
            } else {
                linear(&mut s, &format!("{p}.mixer.adjacent"), d, d, false);
                linear(&mut s, &format!("{p}.mixer.self"), d, d, false);
                affine(&mut s, &format!("{p}.mixer.bn"), d);
            }
            affine(&mut s, &format!("{p}.norm2"), d);
            linear(&mut s, &format!("{p}.mlp.fc1"), d, hidden, true);
            linear(&mut s, &format!("{p}.mlp.fc2"), hidden, d, true);
        }
        if cfg.mode.fuses() {
            linear(&mut s, &format!("blocks.{b}.fusion"), 2 * d, 2, true);
        }
    }
    linear(&mut s, "motion", d, cfg.motion_dim, true);
    linear(&mut s, "head", cfg.motion_dim, 3, true);
    s
}

/// Running batch-norm statistics (not trainable).
pub(crate) fn buffer_layout(cfg: &ModelConfig) -> Vec<Slot> {
    let mut s = Vec::new();
    for b in 0..cfg.depth {
        for stage in block_stages(cfg).into_iter().filter(|st| !st.is_attention()) {
            let p = format!("blocks.{b}.{}.mixer.bn", stage.name());
            s.push(Slot { path: format!("{p}.running_mean"), shape: vec![cfg.dim], init: Init::Zeros });
            s.push(Slot { path: format!("{p}.running_var"), shape: vec![cfg.dim], init: Init::Ones });
        }
    }
    s
}

/// Named trainable tensors plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<F> {
    params: BTreeMap<String, Tensor<F>>,
    buffers: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> ParameterStore<F> {
    /// Xavier-uniform linear maps, zero biases, unit norm scales, N(0, σ²) embeddings.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let make = |slot: &Slot, rng: &mut ChaCha8Rng| -> Tensor<F> {
            let n: usize = slot.shape.iter().product();
            let data: Vec<F> = match slot.init {
                Init::Xavier { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| F::cast(rng.random_range(-a..a))).collect()
                }
                Init::Zeros => vec![F::zero(); n],
                Init::Ones => vec![F::one(); n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("finite std");
                    (0..n).map(|_| F::cast(dist.sample(rng))).collect()
                }
            };
            Tensor::from_parts(slot.shape.clone(), data)
        };
        let params = parameter_layout(cfg).iter().map(|s| (s.path.clone(), make(s, &mut rng))).collect();
        let buffers = buffer_layout(cfg).iter().map(|s| (s.path.clone(), make(s, &mut rng))).collect();
        Ok(Self { params, buffers })
    }

    /// Builds a store from loaded tensors, checking names and shapes against `cfg`.
    pub fn from_maps(
        cfg: &ModelConfig,
        params: BTreeMap<String, Tensor<F>>,
        buffers: BTreeMap<String, Tensor<F>>,
    ) -> Result<Self> {
        let check = |layout: Vec<Slot>, got: &BTreeMap<String, Tensor<F>>, what: &str| -> Result<()> {
            if layout.len() != got.len() {
                return Err(Error::Config(format!(
                    "expected {} {what} tensors for this config, found {}",
                    layout.len(),
                    got.len()
                )));
            }
            for slot in layout {
                match got.get(&slot.path) {
                    Some(t) if t.shape() == slot.shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::Config(format!(
                            "{what} `{}` has shape {:?}, config needs {:?}",
                            slot.path,
                            t.shape(),
                            slot.shape
                        )))
                    }
                    None => return Err(Error::Config(format!("missing {what} `{}`", slot.path))),
                }
            }
            Ok(())
        };
        check(parameter_layout(cfg), &params, "parameter")?;
        check(buffer_layout(cfg), &buffers, "buffer")?;
        Ok(Self { params, buffers })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.buffers
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<F>> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<F>> {
        self.params.get_mut(path)
    }

    pub fn buffer_mut(&mut self, path: &str) -> Option<&mut Tensor<F>> {
        self.buffers.get_mut(path)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.params.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParameterStore<G> {
        ParameterStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Places every tensor on `tape`; parameters become gradient leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Bound {
        Bound {
            params: self.params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable))).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect(),
        }
    }
}

/// Tape handles for a bound [`ParameterStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl Bound {
    /// Empty binding, filled by hand with [`Bound::insert_param`] for layer-level tests.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, path: impl Into<String>, v: Var) {
        self.params.insert(path.into(), v);
    }

    pub fn insert_buffer(&mut self, path: impl Into<String>, v: Var) {
        self.buffers.insert(path.into(), v);
    }

    pub fn param(&self, path: &str) -> Result<Var> {
        self.params.get(path).copied().ok_or_else(|| Error::Config(format!("no parameter `{path}`")))
    }

    pub fn buffer(&self, path: &str) -> Result<Var> {
        self.buffers.get(path).copied().ok_or_else(|| Error::Config(format!("no buffer `{path}`")))
    }

    pub fn has(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, Var)> {
        self.params.iter().map(|(k, v)| (k, *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SkeletonSpec;
    use crate::model::CompositionMode;

    #[test]
    fn paths_are_unique_and_init_is_seeded() {
        let cfg = ModelConfig::custom(2, 8, 3, 2, SkeletonSpec::five_joint());
        let layout = parameter_layout(&cfg);
        let mut names: Vec<&str> = layout.iter().map(|s| s.path.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), layout.len());
        let a = ParameterStore::<f32>::init(&cfg, 7).unwrap();
        let b = ParameterStore::<f32>::init(&cfg, 7).unwrap();
        let c = ParameterStore::<f32>::init(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.get("embed.bias").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(a.get("blocks.1.gcn_temporal.norm1.weight").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn flags_control_embeddings_and_fusion() {
        let mut cfg = ModelConfig::custom(1, 8, 3, 2, SkeletonSpec::five_joint());
        cfg.spatial_pe = false;
        cfg.temporal_pe = true;
        cfg.mode = CompositionMode::AttnOnly;
        let store = ParameterStore::<f64>::init(&cfg, 0).unwrap();
        assert!(store.get("pos_spatial").is_none());
        assert_eq!(store.get("pos_temporal").unwrap().shape(), &[3, 1, 8]);
        assert!(store.get("blocks.0.fusion.weight").is_none());
        assert!(store.buffers().is_empty());
    }

    #[test]
    fn from_maps_rejects_wrong_shapes() {
        let cfg = ModelConfig::custom(1, 8, 3, 2, SkeletonSpec::five_joint());
        let store = ParameterStore::<f32>::init(&cfg, 0).unwrap();
        let mut params = store.params().clone();
        params.insert("head.bias".into(), Tensor::zeros(vec![4]));
        assert!(ParameterStore::from_maps(&cfg, params, store.buffers().clone()).is_err());
        let mut params = store.params().clone();
        params.remove("head.bias");
        assert!(ParameterStore::from_maps(&cfg, params, store.buffers().clone()).is_err());
    }
}
