//! Closed-form parameter and multiply-accumulate counts.
//!
//! A linear map costs `in · out` MACs per token (bias free). Norms,
//! activations, softmax, the K-NN search and elementwise fusion cost nothing.
//! Products between two activations (attention scores, attention-weighted
//! values and the dense adjacency product) are counted only under
//! [`MacConvention::Dense`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::{block_stages, ModelConfig, Stage};

/// Which matrix products enter the MAC total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacConvention {
    /// Weight layers only, as module-hook profilers count.
    #[default]
    Layers,
    /// Weight layers plus attention `QKᵀ`, `AV` and the dense adjacency product.
    Dense,
}

impl MacConvention {
    pub fn name(self) -> &'static str {
        match self {
            Self::Layers => "layers",
            Self::Dense => "dense",
        }
    }
}

impl fmt::Display for MacConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MacConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "layers" => Ok(Self::Layers),
            "dense" => Ok(Self::Dense),
            _ => Err(Error::Config(format!("unknown MAC convention `{s}` (expected layers or dense)"))),
        }
    }
}

/// Cost of one named module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub module: String,
    pub params: u64,
    /// Weight-layer MACs for one sample.
    pub layer_macs: u64,
    /// Activation-product MACs for one sample (always reported, counted only under `Dense`).
    pub product_macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub convention: MacConvention,
    pub frames: usize,
    pub param_count: u64,
    /// Forward MACs for one `T`-frame sample.
    pub total_macs: u64,
    pub macs_per_frame: u64,
    pub breakdown: Vec<CostEntry>,
}

fn linear(fan_in: usize, fan_out: usize, bias: bool) -> u64 {
    (fan_in * fan_out + if bias { fan_out } else { 0 }) as u64
}

fn stage_params(stage: Stage, d: usize, hidden: usize) -> u64 {
    let norms = 4 * d as u64;
    let mixer = if stage.is_attention() {
        3 * linear(d, d, false) + linear(d, d, true)
    } else {
        2 * linear(d, d, false) + 2 * d as u64
    };
    norms + mixer + linear(d, hidden, true) + linear(hidden, d, true)
}

/// Trainable scalars of the model `cfg` describes.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    breakdown(cfg).iter().map(|e| e.params).sum()
}

fn breakdown(cfg: &ModelConfig) -> Vec<CostEntry> {
    let (d, j, t) = (cfg.dim, cfg.joints(), cfg.frames);
    let hidden = d * cfg.mlp_ratio;
    let tokens = (t * j) as u64;
    let entry = |module: String, params: u64, layer_macs: u64, product_macs: u64| CostEntry {
        module,
        params,
        layer_macs,
        product_macs,
    };
    let mut rows = vec![entry("embed".into(), linear(3, d, true), tokens * (3 * d) as u64, 0)];
    let pe = (if cfg.spatial_pe { j * d } else { 0 }) + (if cfg.temporal_pe { t * d } else { 0 });
    if pe > 0 {
        rows.push(entry("positional".into(), pe as u64, 0, 0));
    }
    for b in 0..cfg.depth {
        for stage in block_stages(cfg) {
            // Tokens per group and group count for this stage.
            let (n, groups) = if stage.is_temporal() { (t, j) } else { (j, t) };
            let (n, groups, du) = (n as u64, groups as u64, d as u64);
            let weights = if stage.is_attention() { 4 } else { 2 } + 2 * cfg.mlp_ratio as u64;
            let products = if stage.is_attention() { 2 * n * n * du } else { n * n * du } * groups;
            rows.push(entry(
                format!("blocks.{b}.{}", stage.name()),
                stage_params(stage, d, hidden),
                tokens * weights * du * du,
                products,
            ));
        }
        if cfg.mode.fuses() {
            rows.push(entry(format!("blocks.{b}.fusion"), linear(2 * d, 2, true), tokens * (4 * d) as u64, 0));
        }
    }
    rows.push(entry("motion".into(), linear(d, cfg.motion_dim, true), tokens * (d * cfg.motion_dim) as u64, 0));
    rows.push(entry("head".into(), linear(cfg.motion_dim, 3, true), tokens * (cfg.motion_dim * 3) as u64, 0));
    rows
}

/// Parameters and per-sample forward MACs of `cfg` under `convention`.
pub fn count_macs(cfg: &ModelConfig, convention: MacConvention) -> CostReport {
    let breakdown = breakdown(cfg);
    let total_macs: u64 = breakdown
        .iter()
        .map(|e| e.layer_macs + if convention == MacConvention::Dense { e.product_macs } else { 0 })
        .sum();
    CostReport {
        convention,
        frames: cfg.frames,
        param_count: breakdown.iter().map(|e| e.params).sum(),
        total_macs,
        macs_per_frame: total_macs / cfg.frames as u64,
        breakdown,
    }
}

/// `value` with one decimal in the largest fitting unit (K, M, G).
pub fn human(value: u64) -> String {
    let v = value as f64;
    for (scale, unit) in [(1e9, "G"), (1e6, "M"), (1e3, "K")] {
        if v >= scale {
            return format!("{:.1} {unit}", v / scale);
        }
    }
    value.to_string()
}

impl CostReport {
    /// Plain-text summary, optionally followed by one row per module.
    pub fn table(&self, breakdown: bool) -> String {
        let mut s = format!(
            "params        {:>10}  ({})\nMACs          {:>10}  ({})  convention {}, T = {}\nMACs/frame    {:>10}  ({})\n",
            human(self.param_count),
            self.param_count,
            human(self.total_macs),
            self.total_macs,
            self.convention,
            self.frames,
            human(self.macs_per_frame),
            self.macs_per_frame,
        );
        if breakdown {
            s.push_str(&format!("\n{:<24} {:>12} {:>16} {:>16}\n", "module", "params", "layer MACs", "product MACs"));
            for e in &self.breakdown {
                s.push_str(&format!("{:<24} {:>12} {:>16} {:>16}\n", e.module, e.params, e.layer_macs, e.product_macs));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SkeletonSpec;
    use crate::model::Variant;

    #[test]
    fn block_closed_form() {
        let d = 24u64;
        let mut cfg = ModelConfig::custom(1, d as usize, 3, 4, SkeletonSpec::five_joint());
        cfg.spatial_pe = false;
        let one = count_params(&cfg);
        cfg.depth = 2;
        assert_eq!(count_params(&cfg) - one, 44 * d * d + 46 * d + 2);
    }

    #[test]
    fn totals_are_consistent() {
        for v in Variant::ALL {
            for c in [MacConvention::Layers, MacConvention::Dense] {
                let r = count_macs(&ModelConfig::variant(v), c);
                assert_eq!(r.macs_per_frame * r.frames as u64, r.total_macs);
            }
        }
    }

    #[test]
    fn human_units() {
        assert_eq!(human(11_698_851), "11.7 M");
        assert_eq!(human(48_300_000_000), "48.3 G");
        assert_eq!(human(512), "512");
    }
}
