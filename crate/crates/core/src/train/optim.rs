use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Alignment, LossConfig};
use crate::model::ParameterStore;
use crate::tensor::{Scalar, Tensor};

fn d_lr() -> f64 {
    5e-4
}
fn d_decay() -> f64 {
    0.99
}
fn d_wd() -> f64 {
    0.01
}
fn d_batch() -> usize {
    16
}
fn d_epochs() -> usize {
    90
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_true() -> bool {
    true
}

/// Optimization recipe. Every field has a serde default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub lr_init: f64,
    /// Multiplicative learning-rate decay per epoch.
    #[serde(default = "d_decay")]
    pub lr_decay: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "d_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "d_eps")]
    pub adam_eps: f64,
    /// Random horizontal flips of training windows.
    #[serde(default = "d_true")]
    pub flip_augment: bool,
    /// Average with the un-flipped prediction of the flipped input at evaluation.
    #[serde(default = "d_true")]
    pub tta_flip: bool,
    /// Rescale gradients whose global norm exceeds this value.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Use running batch-norm statistics during training too.
    #[serde(default)]
    pub freeze_batch_norm: bool,
    #[serde(default)]
    pub alignment: Alignment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr_init > 0.0) {
            return fail(format!("lr_init must be positive, got {}", self.lr_init));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if !(self.weight_decay >= 0.0)
            || !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
        {
            return fail("weight decay must be nonnegative and Adam betas in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return fail("adam_eps and grad_clip must be positive".into());
        }
        self.loss.validate()
    }
}

/// `lr_init · decay^epoch`.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr_init * cfg.lr_decay.powi(epoch as i32)
}

/// Whether decoupled weight decay applies to a parameter. Norm scales and
/// shifts and positional embeddings are exempt.
pub fn decays(path: &str) -> bool {
    !(path.starts_with("pos_") || path.contains(".norm1.") || path.contains(".norm2.") || path.contains(".bn."))
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One AdamW update: `p ← p − lr·wd·p`, then the bias-corrected Adam step.
/// `grads` must hold a gradient for every parameter.
pub fn adamw_step<F: Scalar>(
    params: &mut ParameterStore<F>,
    grads: &BTreeMap<String, Tensor<F>>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (path, p) in params.params() {
        let g = grads.get(path).ok_or_else(|| Error::Backward(format!("no gradient for `{path}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::Backward(format!("gradient of `{path}` has shape {:?}", g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(path.clone()));
        }
    }
    let clip = match cfg.grad_clip {
        Some(c) => {
            let norm = grads.values().flat_map(|g| g.data()).map(|v| v.widen() * v.widen()).sum::<f64>().sqrt();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (path, p) in params.params_mut() {
        let g = &grads[path.as_str()];
        let n = p.numel();
        let m = state.m.entry(path.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(path.clone()).or_insert_with(|| vec![0.0; n]);
        let shrink = if decays(path) { 1.0 - lr * cfg.weight_decay } else { 1.0 };
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g.data()[i].widen() * clip;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let (mh, vh) = (m[i] / c1, v[i] / c2);
            let updated = w.widen() * shrink - lr * mh / (vh.sqrt() + cfg.adam_eps);
            *w = F::cast(updated);
        }
    }
    Ok(())
}
