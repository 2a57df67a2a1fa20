use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct FiniteDiffOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Check at most this many coordinates per leaf (sampled deterministically).
    pub max_coords_per_leaf: Option<usize>,
    /// Lower bound on the gradient scale used as the relative-error denominator.
    pub scale_floor: f64,
    pub seed: u64,
}

impl Default for FiniteDiffOptions {
    fn default() -> Self {
        Self { eps: 1e-5, max_coords_per_leaf: None, scale_floor: 1e-3, seed: 0 }
    }
}

/// Outcome of comparing tape gradients to central differences.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub max_rel_err: f64,
    /// Per-leaf `max |analytic − numeric| / max(‖analytic‖∞, ‖numeric‖∞, floor)`.
    pub per_leaf: Vec<f64>,
    pub coords_checked: usize,
}

fn evaluate<G>(f: &G, points: &[Tensor<f64>]) -> Result<f64>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item().ok_or_else(|| Error::Backward(format!("function must be scalar, got {:?}", tape.shape(out))))
}

/// Checks the tape gradient of the scalar function `f` at `points` against
/// central differences `(f(x+ε) − f(x−ε)) / 2ε`.
pub fn finite_diff_check<G>(f: G, points: &[Tensor<f64>], opts: &FiniteDiffOptions) -> Result<CheckReport>
where
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape
        .value(out)
        .item()
        .ok_or_else(|| Error::Backward(format!("function must be scalar, got {:?}", tape.shape(out))))?;
    let again = evaluate(&f, points)?;
    if f0.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!("{f0} then {again}")));
    }
    let mut grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut per_leaf = Vec::with_capacity(points.len());
    let mut coords_checked = 0;
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for (leaf, &v) in vars.iter().enumerate() {
        let analytic = grads.take(v).expect("every point is a gradient leaf");
        let n = points[leaf].numel();
        let coords: Vec<usize> = match opts.max_coords_per_leaf {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut max_diff = 0.0f64;
        let mut scale = opts.scale_floor;
        for &c in &coords {
            let orig = points[leaf].data()[c];
            work[leaf].data_mut()[c] = orig + opts.eps;
            let fp = evaluate(&f, &work)?;
            work[leaf].data_mut()[c] = orig - opts.eps;
            let fm = evaluate(&f, &work)?;
            work[leaf].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic.data()[c];
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        coords_checked += coords.len();
        per_leaf.push(max_diff / scale);
    }
    let max_rel_err = per_leaf.iter().copied().fold(0.0, f64::max);
    Ok(CheckReport { max_rel_err, per_leaf, coords_checked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let x = Tensor::new(vec![2, 3], vec![0.2, -1.0, 3.0, 0.0, 0.5, -0.5]).unwrap();
        let r = finite_diff_check(
            |tape, xs| {
                let s = tape.softmax(xs[0])?;
                tape.sum(s)
            },
            &[x],
            &FiniteDiffOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn detects_nondeterminism() {
        let calls = Cell::new(0u32);
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let err = finite_diff_check(
            |tape, xs| {
                calls.set(calls.get() + 1);
                let y = tape.scale(xs[0], calls.get() as f64)?;
                tape.sum(y)
            },
            &[x],
            &FiniteDiffOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic(_)));
    }
}
