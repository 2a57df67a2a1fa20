use super::config::{CompositionMode, ModelConfig};
use super::layers::{
    adaptive_fuse, attention_mixer, gcn_mixer, linear, metaformer, repeat_adjacency, temporal_adjacency, BatchNormMode,
    NormPlacement,
};
use super::params::{Bound, ParameterStore, Stage};
use crate::error::{shape_err, Error, Result};
use crate::graph::{build_skeleton_adjacency, NormalizedAdjacency};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Handles to the interesting intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Predicted joints `[B, T, J, 3]` in millimetres.
    pub output: Var,
    /// Motion-semantic activations `[B, T, J, d′]`.
    pub motion: Var,
    /// Per-block fusion weights `[B, T, J, 2]` (parallel mode only).
    pub fusion_weights: Vec<Var>,
    /// Training-mode batch-norm nodes with their parameter prefix.
    pub batch_norms: Vec<(String, Var)>,
    /// Output of every block `[B, T, J, d]`.
    pub blocks: Vec<Var>,
}

/// A configured network together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    cfg: ModelConfig,
    params: ParameterStore<F>,
    skeleton_adj: NormalizedAdjacency,
}

impl<F: Scalar> Model<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParameterStore::init(&cfg, seed)?;
        Self::with_params(cfg, params)
    }

    pub fn with_params(cfg: ModelConfig, params: ParameterStore<F>) -> Result<Self> {
        cfg.validate()?;
        let params = ParameterStore::from_maps(&cfg, params.params().clone(), params.buffers().clone())?;
        let skeleton_adj = build_skeleton_adjacency(&cfg.skeleton)?;
        Ok(Self { cfg, params, skeleton_adj })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore<F> {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterStore<F> {
        self.params
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model { cfg: self.cfg.clone(), params: self.params.cast(), skeleton_adj: self.skeleton_adj.clone() }
    }

    /// Records a forward pass of `input: [B, T, J, 3]` on `tape`.
    pub fn forward(&self, tape: &mut Tape<F>, bound: &Bound, input: Var, training: bool) -> Result<Trace> {
        let cfg = &self.cfg;
        let shape = tape.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != cfg.frames || shape[2] != cfg.joints() || shape[3] != 3 {
            return Err(shape_err(
                "model",
                format!("input {shape:?} does not match [B, {}, {}, 3]", cfg.frames, cfg.joints()),
            ));
        }
        let batch = shape[0];
        let mut pass = Pass {
            tape,
            bound,
            cfg,
            batch,
            bn: BatchNormMode { eps: cfg.bn_eps, training },
            norm: NormPlacement { eps: cfg.ln_eps, post_norm: cfg.post_norm },
            spatial_adj: None,
            skeleton_adj: &self.skeleton_adj,
            batch_norms: Vec::new(),
        };
        let mut x = linear(pass.tape, bound, "embed", input)?;
        if cfg.spatial_pe {
            x = pass.tape.add_broadcast(x, bound.param("pos_spatial")?)?;
        }
        if cfg.temporal_pe {
            x = pass.tape.add_broadcast(x, bound.param("pos_temporal")?)?;
        }
        let mut fusion_weights = Vec::new();
        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let p = |s: Stage| format!("blocks.{b}.{}", s.name());
            x = match cfg.mode {
                CompositionMode::Parallel => {
                    let t = pass.stage(Stage::AttnSpatial, &p(Stage::AttnSpatial), x)?;
                    let t = pass.stage(Stage::AttnTemporal, &p(Stage::AttnTemporal), t)?;
                    let g = pass.stage(Stage::GcnSpatial, &p(Stage::GcnSpatial), x)?;
                    let g = pass.stage(Stage::GcnTemporal, &p(Stage::GcnTemporal), g)?;
                    let (fused, alpha) = adaptive_fuse(pass.tape, bound, &format!("blocks.{b}.fusion"), t, g)?;
                    fusion_weights.push(alpha);
                    fused
                }
                mode => {
                    let order: &[Stage] = match mode {
                        CompositionMode::SeqGcnThenAttn => {
                            &[Stage::GcnSpatial, Stage::GcnTemporal, Stage::AttnSpatial, Stage::AttnTemporal]
                        }
                        CompositionMode::SeqAttnThenGcn => {
                            &[Stage::AttnSpatial, Stage::AttnTemporal, Stage::GcnSpatial, Stage::GcnTemporal]
                        }
                        CompositionMode::AttnOnly => &[Stage::AttnSpatial, Stage::AttnTemporal],
                        _ => &[Stage::GcnSpatial, Stage::GcnTemporal],
                    };
                    let mut y = x;
                    for &s in order {
                        y = pass.stage(s, &p(s), y)?;
                    }
                    y
                }
            };
            if !pass.tape.value(x).all_finite() {
                return Err(Error::NonFiniteActivation { block: b });
            }
            blocks.push(x);
        }
        let m = linear(pass.tape, bound, "motion", x)?;
        let motion = pass.tape.tanh(m)?;
        let out = linear(pass.tape, bound, "head", motion)?;
        let output = pass.tape.scale(out, cfg.output_unit_mm)?;
        Ok(Trace { output, motion, fusion_weights, batch_norms: pass.batch_norms, blocks })
    }

    /// Eval-mode prediction for `[T, J, 3]` or `[B, T, J, 3]` input.
    pub fn predict(&self, input: &Tensor<F>) -> Result<Tensor<F>> {
        let single = input.rank() == 3;
        let x = if single {
            let mut s = vec![1];
            s.extend_from_slice(input.shape());
            input.clone().reshape(s)?
        } else {
            input.clone()
        };
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(x);
        let trace = self.forward(&mut tape, &bound, x, false)?;
        let out = tape.value(trace.output).clone();
        if single {
            let s = out.shape()[1..].to_vec();
            out.reshape(s)
        } else {
            Ok(out)
        }
    }

    /// Folds the batch statistics of a training pass into the running buffers,
    /// using the unbiased variance.
    pub fn update_running_stats(&mut self, tape: &Tape<F>, trace: &Trace) {
        let mom = F::cast(self.cfg.bn_momentum);
        let keep = F::one() - mom;
        for (prefix, node) in &trace.batch_norms {
            let Some((mean, var)) = tape.batch_stats(*node) else { continue };
            let rows = tape.value(*node).numel() / mean.len();
            let unbias = if rows > 1 { F::cast(rows as f64 / (rows - 1) as f64) } else { F::one() };
            if let Some(rm) = self.params.buffer_mut(&format!("{prefix}.running_mean")) {
                for (r, &m) in rm.data_mut().iter_mut().zip(mean) {
                    *r = keep * *r + mom * m;
                }
            }
            if let Some(rv) = self.params.buffer_mut(&format!("{prefix}.running_var")) {
                for (r, &v) in rv.data_mut().iter_mut().zip(var) {
                    *r = keep * *r + mom * v * unbias;
                }
            }
        }
    }
}

struct Pass<'a, F> {
    tape: &'a mut Tape<F>,
    bound: &'a Bound,
    cfg: &'a ModelConfig,
    batch: usize,
    bn: BatchNormMode,
    norm: NormPlacement,
    spatial_adj: Option<Var>,
    skeleton_adj: &'a NormalizedAdjacency,
    batch_norms: Vec<(String, Var)>,
}

impl<F: Scalar> Pass<'_, F> {
    /// Runs one MetaFormer stage on `x: [B, T, J, d]`.
    fn stage(&mut self, stage: Stage, prefix: &str, x: Var) -> Result<Var> {
        let (b, t, j, d) = (self.batch, self.cfg.frames, self.cfg.joints(), self.cfg.dim);
        let tokens = if stage.is_temporal() {
            let p = self.tape.permute(x, &[0, 2, 1, 3])?;
            self.tape.reshape(p, &[b * j, t, d])?
        } else {
            self.tape.reshape(x, &[b * t, j, d])?
        };
        let bound = self.bound;
        let heads = self.cfg.heads;
        let y = match stage {
            Stage::AttnSpatial | Stage::AttnTemporal => {
                metaformer(self.tape, bound, prefix, tokens, self.norm, |tape, v| {
                    attention_mixer(tape, bound, &format!("{prefix}.mixer"), v, heads)
                })?
            }
            Stage::GcnSpatial => {
                let adj = match self.spatial_adj {
                    Some(a) => a,
                    None => {
                        let a = self.tape.constant(repeat_adjacency(self.skeleton_adj, b * t));
                        self.spatial_adj = Some(a);
                        a
                    }
                };
                let bn = self.bn;
                let mut node = None;
                let y = metaformer(self.tape, bound, prefix, tokens, self.norm, |tape, v| {
                    let (out, n) = gcn_mixer(tape, bound, &format!("{prefix}.mixer"), v, adj, bn)?;
                    node = Some(n);
                    Ok(out)
                })?;
                self.record_bn(prefix, node);
                y
            }
            Stage::GcnTemporal => {
                let (bn, k, chain) = (self.bn, self.cfg.temporal_k, self.cfg.temporal_chain_union);
                let mut node = None;
                let y = metaformer(self.tape, bound, prefix, tokens, self.norm, |tape, v| {
                    let adj = temporal_adjacency(tape.value(v), k, chain);
                    let adj = tape.constant(adj);
                    let (out, n) = gcn_mixer(tape, bound, &format!("{prefix}.mixer"), v, adj, bn)?;
                    node = Some(n);
                    Ok(out)
                })?;
                self.record_bn(prefix, node);
                y
            }
        };
        if stage.is_temporal() {
            let y = self.tape.reshape(y, &[b, j, t, d])?;
            self.tape.permute(y, &[0, 2, 1, 3])
        } else {
            self.tape.reshape(y, &[b, t, j, d])
        }
    }

    fn record_bn(&mut self, prefix: &str, node: Option<Var>) {
        if let (true, Some(n)) = (self.bn.training, node) {
            self.batch_norms.push((format!("{prefix}.mixer.bn"), n));
        }
    }
}
