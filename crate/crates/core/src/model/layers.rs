//! Stateless building blocks. Every function looks its weights up in a
//! [`Bound`] under a path prefix and records its work on the tape.

use super::params::Bound;
use crate::error::Result;
use crate::graph::{build_temporal_knn_adjacency, NormalizedAdjacency};
use crate::tensor::{Primitive, Scalar, Tape, Tensor, Var};

/// `x·W (+ b)` over the last axis; the bias is used when `{prefix}.bias` exists.
pub fn linear<F: Scalar>(tape: &mut Tape<F>, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = bound.param(&format!("{prefix}.weight"))?;
    let y = tape.matmul(x, w)?;
    let bias = format!("{prefix}.bias");
    if bound.has(&bias) {
        tape.add_broadcast(y, bound.param(&bias)?)
    } else {
        Ok(y)
    }
}

pub fn layer_norm<F: Scalar>(tape: &mut Tape<F>, bound: &Bound, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let g = bound.param(&format!("{prefix}.weight"))?;
    let b = bound.param(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, eps)
}

/// Multi-head scaled dot-product self-attention within each group of `x: [G, n, d]`.
pub fn attention_mixer<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let (g, n, d) = dims3(tape.shape(x));
    let dk = d / heads;
    let split = |tape: &mut Tape<F>, name: &str| -> Result<Var> {
        let p = linear(tape, bound, &format!("{prefix}.{name}"), x)?;
        let p = tape.reshape(p, &[g, n, heads, dk])?;
        let p = tape.permute(p, &[0, 2, 1, 3])?;
        tape.reshape(p, &[g * heads, n, dk])
    };
    let q = split(tape, "query")?;
    let k = split(tape, "key")?;
    let v = split(tape, "value")?;
    let kt = tape.transpose(k)?;
    let scores = tape.bmm(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let weights = tape.softmax(scores)?;
    let ctx = tape.bmm(weights, v)?;
    let ctx = tape.reshape(ctx, &[g, heads, n, dk])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[g, n, d])?;
    linear(tape, bound, &format!("{prefix}.proj"), ctx)
}

/// Batch-norm behaviour of a graph mixer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormMode {
    pub eps: f64,
    /// Normalize with batch statistics rather than the running buffers.
    pub training: bool,
}

/// `relu(x + BN(adj·x·W₁ + x·W₂))` on `x: [G, n, d]` with per-group `adj: [G, n, n]`.
/// Returns the output and the batch-norm node (for running-statistic updates).
pub fn gcn_mixer<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound,
    prefix: &str,
    x: Var,
    adj: Var,
    bn: BatchNormMode,
) -> Result<(Var, Var)> {
    let xw1 = linear(tape, bound, &format!("{prefix}.adjacent"), x)?;
    let agg = tape.bmm(adj, xw1)?;
    let xw2 = linear(tape, bound, &format!("{prefix}.self"), x)?;
    let h = tape.add(agg, xw2)?;
    let gamma = bound.param(&format!("{prefix}.bn.weight"))?;
    let beta = bound.param(&format!("{prefix}.bn.bias"))?;
    let normed = if bn.training {
        tape.apply(Primitive::BatchNorm { eps: bn.eps, training: true }, &[h, gamma, beta])?
    } else {
        let mean = bound.buffer(&format!("{prefix}.bn.running_mean"))?;
        let var = bound.buffer(&format!("{prefix}.bn.running_var"))?;
        tape.apply(Primitive::BatchNorm { eps: bn.eps, training: false }, &[h, gamma, beta, mean, var])?
    };
    let res = tape.add(x, normed)?;
    Ok((tape.relu(res)?, normed))
}

/// `fc2(gelu(fc1(x)))`.
pub fn mlp<F: Scalar>(tape: &mut Tape<F>, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, bound, &format!("{prefix}.fc1"), x)?;
    let h = tape.gelu(h)?;
    linear(tape, bound, &format!("{prefix}.fc2"), h)
}

/// Normalization placement inside a MetaFormer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormPlacement {
    pub eps: f64,
    /// `LN(mixer(x) + x)` instead of `mixer(LN(x)) + x`.
    pub post_norm: bool,
}

/// `y = mixer(LN(x)) + x; z = MLP(LN(y)) + y`, or the post-norm arrangement.
pub fn metaformer<F, M>(
    tape: &mut Tape<F>,
    bound: &Bound,
    prefix: &str,
    x: Var,
    norm: NormPlacement,
    mixer: M,
) -> Result<Var>
where
    F: Scalar,
    M: FnOnce(&mut Tape<F>, Var) -> Result<Var>,
{
    let (n1, n2, fc) = (format!("{prefix}.norm1"), format!("{prefix}.norm2"), format!("{prefix}.mlp"));
    if norm.post_norm {
        let m = mixer(tape, x)?;
        let y = tape.add(m, x)?;
        let y = layer_norm(tape, bound, &n1, y, norm.eps)?;
        let h = mlp(tape, bound, &fc, y)?;
        let z = tape.add(h, y)?;
        layer_norm(tape, bound, &n2, z, norm.eps)
    } else {
        let xn = layer_norm(tape, bound, &n1, x, norm.eps)?;
        let m = mixer(tape, xn)?;
        let y = tape.add(m, x)?;
        let yn = layer_norm(tape, bound, &n2, y, norm.eps)?;
        let h = mlp(tape, bound, &fc, yn)?;
        tape.add(h, y)
    }
}

/// Softmax-weighted per-position blend of two streams. Returns the fused
/// features and the weights `[.., 2]` (transformer stream first).
pub fn adaptive_fuse<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound,
    prefix: &str,
    f_tf: Var,
    f_gf: Var,
) -> Result<(Var, Var)> {
    let both = tape.concat(&[f_tf, f_gf])?;
    let logits = linear(tape, bound, prefix, both)?;
    let alpha = tape.softmax(logits)?;
    let a_tf = tape.slice_last(alpha, 0, 1)?;
    let a_gf = tape.slice_last(alpha, 1, 1)?;
    let l = tape.mul_broadcast(f_tf, a_tf)?;
    let r = tape.mul_broadcast(f_gf, a_gf)?;
    Ok((tape.add(l, r)?, alpha))
}

/// The same `[n, n]` adjacency repeated for `groups` groups.
pub fn repeat_adjacency<F: Scalar>(adj: &NormalizedAdjacency, groups: usize) -> Tensor<F> {
    let n = adj.size();
    let one = adj.to_scalars::<F>();
    let mut data = Vec::with_capacity(groups * one.len());
    for _ in 0..groups {
        data.extend_from_slice(&one);
    }
    Tensor::from_parts(vec![groups, n, n], data)
}

/// One K-NN adjacency per group of `features: [G, T, d]`.
pub fn temporal_adjacency<F: Scalar>(features: &Tensor<F>, k: usize, chain: bool) -> Tensor<F> {
    let (g, t, d) = dims3(features.shape());
    let mut data = Vec::with_capacity(g * t * t);
    for group in features.data().chunks(t * d) {
        data.extend(build_temporal_knn_adjacency(group, t, d, k, chain).to_scalars::<F>());
    }
    Tensor::from_parts(vec![g, t, t], data)
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [a, b, c] => (a, b, c),
        _ => panic!("expected a rank-3 token tensor, got {shape:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, FiniteDiffOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn bind(tape: &mut Tape<f64>, named: &[(&str, Tensor<f64>)], grad: bool) -> Bound {
        let mut b = Bound::new();
        for (k, v) in named {
            let var = tape.leaf(v.clone(), grad);
            b.insert_param(*k, var);
        }
        b
    }

    fn attn_params(d: usize, rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tensor<f64>)> {
        vec![
            ("a.query.weight", random(&[d, d], rng)),
            ("a.key.weight", random(&[d, d], rng)),
            ("a.value.weight", random(&[d, d], rng)),
            ("a.proj.weight", random(&[d, d], rng)),
            ("a.proj.bias", random(&[d], rng)),
        ]
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = attn_params(4, &mut rng);
        let mut tape = Tape::new();
        let b = bind(&mut tape, &params, false);
        let x = tape.constant(random(&[3, 1, 4], &mut rng));
        let y = attention_mixer(&mut tape, &b, "a", x, 2).unwrap();
        let v = linear(&mut tape, &b, "a.value", x).unwrap();
        let expect = linear(&mut tape, &b, "a.proj", v).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(tape.value(expect).data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = attn_params(4, &mut rng);
        let mut tape = Tape::new();
        let b = bind(&mut tape, &params, false);
        let row = random(&[4], &mut rng);
        let data: Vec<f64> = (0..3).flat_map(|_| row.data().to_vec()).collect();
        let x = tape.constant(Tensor::new(vec![1, 3, 4], data).unwrap());
        let y = attention_mixer(&mut tape, &b, "a", x, 2).unwrap();
        let out = tape.value(y).data();
        for r in 1..3 {
            assert_eq!(&out[..4], &out[r * 4..r * 4 + 4]);
        }
    }

    fn unit_bn(d: usize) -> Vec<(&'static str, Tensor<f64>)> {
        vec![("g.bn.weight", Tensor::ones(vec![d])), ("g.bn.bias", Tensor::zeros(vec![d]))]
    }

    #[test]
    fn gcn_with_self_path_only_is_relu_of_doubled_input() {
        // W₁ = 0, W₂ = I, frozen unit statistics: relu(x + x).
        let d = 3;
        let mut eye = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        let mut params = unit_bn(d);
        params.push(("g.adjacent.weight", Tensor::zeros(vec![d, d])));
        params.push(("g.self.weight", eye));
        let mut tape = Tape::new();
        let mut b = bind(&mut tape, &params, false);
        let rm = tape.constant(Tensor::zeros(vec![d]));
        let rv = tape.constant(Tensor::ones(vec![d]));
        b.insert_buffer("g.bn.running_mean", rm);
        b.insert_buffer("g.bn.running_var", rv);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = random(&[2, 2, d], &mut rng);
        let x = tape.constant(xs.clone());
        let adj = tape.constant(repeat_adjacency(&NormalizedAdjacency::identity(2), 2));
        let (y, _) = gcn_mixer(&mut tape, &b, "g", x, adj, BatchNormMode { eps: 0.0, training: false }).unwrap();
        for (o, i) in tape.value(y).data().iter().zip(xs.data()) {
            assert_eq!(*o, (2.0 * i).max(0.0));
        }
    }

    #[test]
    fn gcn_layer_gradcheck_on_small_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [2usize, 3] {
            let d = 4;
            let mut a = vec![0.0; n * n];
            for i in 1..n {
                a[i * n + i - 1] = 1.0;
                a[(i - 1) * n + i] = 1.0;
            }
            let adj = NormalizedAdjacency::from_adjacency(n, &a);
            let points = vec![
                random(&[2, n, d], &mut rng),
                random(&[d, d], &mut rng),
                random(&[d, d], &mut rng),
                random(&[d], &mut rng),
                random(&[d], &mut rng),
            ];
            let report = finite_diff_check(
                |tape, v| {
                    let mut b = Bound::new();
                    for (name, &var) in ["adjacent.weight", "self.weight", "bn.weight", "bn.bias"].iter().zip(&v[1..]) {
                        b.insert_param(format!("g.{name}"), var);
                    }
                    let a = tape.constant(repeat_adjacency(&adj, 2));
                    let (y, _) = gcn_mixer(tape, &b, "g", v[0], a, BatchNormMode { eps: 1e-5, training: true })?;
                    let sq = tape.mul(y, y)?;
                    tape.sum(sq)
                },
                &points,
                &FiniteDiffOptions::default(),
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-5, "n={n}: {report:?}");
        }
    }

    #[test]
    fn fusion_weights_blend_streams() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 3;
        let mut tape = Tape::new();
        let zero =
            bind(&mut tape, &[("f.weight", Tensor::zeros(vec![2 * d, 2])), ("f.bias", Tensor::zeros(vec![2]))], false);
        let a = random(&[2, 2, d], &mut rng);
        let c = random(&[2, 2, d], &mut rng);
        let (fa, fc) = (tape.constant(a.clone()), tape.constant(c.clone()));
        let (out, alpha) = adaptive_fuse(&mut tape, &zero, "f", fa, fc).unwrap();
        assert!(tape.value(alpha).data().iter().all(|&w| w == 0.5));
        for ((o, x), y) in tape.value(out).data().iter().zip(a.data()).zip(c.data()) {
            assert!((o - 0.5 * (x + y)).abs() < 1e-15);
        }
        let rand_w =
            bind(&mut tape, &[("f.weight", random(&[2 * d, 2], &mut rng)), ("f.bias", random(&[2], &mut rng))], false);
        let (same, alpha) = adaptive_fuse(&mut tape, &rand_w, "f", fa, fa).unwrap();
        for (o, x) in tape.value(same).data().iter().zip(a.data()) {
            assert!((o - x).abs() < 1e-12);
        }
        for w in tape.value(alpha).data().chunks(2) {
            assert!(w[0] > 0.0 && w[1] > 0.0 && (w[0] + w[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn metaformer_is_residual_when_branches_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 4;
        let params = vec![
            ("m.norm1.weight", Tensor::ones(vec![d])),
            ("m.norm1.bias", Tensor::zeros(vec![d])),
            ("m.norm2.weight", Tensor::ones(vec![d])),
            ("m.norm2.bias", Tensor::zeros(vec![d])),
            ("m.mlp.fc1.weight", Tensor::zeros(vec![d, 2 * d])),
            ("m.mlp.fc1.bias", Tensor::zeros(vec![2 * d])),
            ("m.mlp.fc2.weight", Tensor::zeros(vec![2 * d, d])),
            ("m.mlp.fc2.bias", Tensor::zeros(vec![d])),
        ];
        let mut tape = Tape::new();
        let b = bind(&mut tape, &params, false);
        let xs = random(&[2, 3, d], &mut rng);
        let x = tape.constant(xs.clone());
        let y = metaformer(&mut tape, &b, "m", x, NormPlacement { eps: 1e-5, post_norm: false }, |tape, v| {
            tape.scale(v, 0.0)
        })
        .unwrap();
        assert_eq!(tape.value(y).data(), xs.data());
        assert_eq!(tape.shape(y), &[2, 3, d]);
    }
}
