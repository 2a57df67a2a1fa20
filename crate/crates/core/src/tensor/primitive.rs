use std::fmt;
use std::str::FromStr;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, permute, strides};
use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// A primitive application together with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `[.., k] · [k, n] -> [.., n]`
    MatMul,
    /// `[.., m, k] · [.., m, n]` with identical leading extents.
    BatchMatMul,
    TransposeLast,
    Permute(Vec<usize>),
    Reshape(Vec<usize>),
    Add,
    Sub,
    Mul,
    /// Adds a right-aligned, rank-expandable term (bias, embedding).
    AddBroadcast,
    /// Multiplies by a right-aligned, rank-expandable factor.
    MulBroadcast,
    Scale(f64),
    /// Softmax over the last axis.
    Softmax,
    Relu,
    Gelu,
    Tanh,
    /// Normalizes over the last axis; optional `[d]` affine inputs.
    LayerNorm {
        eps: f64,
    },
    /// Normalizes each channel (last axis) over all leading positions.
    /// Inputs: `x, gamma, beta` when training, plus `running_mean, running_var` otherwise.
    BatchNorm {
        eps: f64,
        training: bool,
    },
    Sum,
    Mean,
    /// Concatenation over the last axis.
    Concat,
    SliceLast {
        start: usize,
        len: usize,
    },
    /// Euclidean norm over the last axis.
    NormLast,
    /// Forward difference along an axis: `out[t] = x[t + 1] - x[t]`.
    Diff {
        axis: usize,
    },
}

/// Attribute-free identifier of a primitive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrimitiveKind {
    MatMul,
    BatchMatMul,
    TransposeLast,
    Permute,
    Reshape,
    Add,
    Sub,
    Mul,
    AddBroadcast,
    MulBroadcast,
    Scale,
    Softmax,
    Relu,
    Gelu,
    Tanh,
    LayerNorm,
    BatchNorm,
    Sum,
    Mean,
    Concat,
    SliceLast,
    NormLast,
    Diff,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 23] = [
        Self::MatMul,
        Self::BatchMatMul,
        Self::TransposeLast,
        Self::Permute,
        Self::Reshape,
        Self::Add,
        Self::Sub,
        Self::Mul,
        Self::AddBroadcast,
        Self::MulBroadcast,
        Self::Scale,
        Self::Softmax,
        Self::Relu,
        Self::Gelu,
        Self::Tanh,
        Self::LayerNorm,
        Self::BatchNorm,
        Self::Sum,
        Self::Mean,
        Self::Concat,
        Self::SliceLast,
        Self::NormLast,
        Self::Diff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::MatMul => "matmul",
            Self::BatchMatMul => "batch_matmul",
            Self::TransposeLast => "transpose",
            Self::Permute => "permute",
            Self::Reshape => "reshape",
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::AddBroadcast => "add_broadcast",
            Self::MulBroadcast => "mul_broadcast",
            Self::Scale => "scale",
            Self::Softmax => "softmax",
            Self::Relu => "relu",
            Self::Gelu => "gelu",
            Self::Tanh => "tanh",
            Self::LayerNorm => "layer_norm",
            Self::BatchNorm => "batch_norm",
            Self::Sum => "sum",
            Self::Mean => "mean",
            Self::Concat => "concat",
            Self::SliceLast => "slice",
            Self::NormLast => "norm",
            Self::Diff => "diff",
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == s).ok_or_else(|| Error::UnknownPrimitive(s.to_string()))
    }
}

impl Primitive {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Self::MatMul => PrimitiveKind::MatMul,
            Self::BatchMatMul => PrimitiveKind::BatchMatMul,
            Self::TransposeLast => PrimitiveKind::TransposeLast,
            Self::Permute(_) => PrimitiveKind::Permute,
            Self::Reshape(_) => PrimitiveKind::Reshape,
            Self::Add => PrimitiveKind::Add,
            Self::Sub => PrimitiveKind::Sub,
            Self::Mul => PrimitiveKind::Mul,
            Self::AddBroadcast => PrimitiveKind::AddBroadcast,
            Self::MulBroadcast => PrimitiveKind::MulBroadcast,
            Self::Scale(_) => PrimitiveKind::Scale,
            Self::Softmax => PrimitiveKind::Softmax,
            Self::Relu => PrimitiveKind::Relu,
            Self::Gelu => PrimitiveKind::Gelu,
            Self::Tanh => PrimitiveKind::Tanh,
            Self::LayerNorm { .. } => PrimitiveKind::LayerNorm,
            Self::BatchNorm { .. } => PrimitiveKind::BatchNorm,
            Self::Sum => PrimitiveKind::Sum,
            Self::Mean => PrimitiveKind::Mean,
            Self::Concat => PrimitiveKind::Concat,
            Self::SliceLast { .. } => PrimitiveKind::SliceLast,
            Self::NormLast => PrimitiveKind::NormLast,
            Self::Diff { .. } => PrimitiveKind::Diff,
        }
    }

    fn name(&self) -> &'static str {
        self.kind().name()
    }

    /// Multiply-accumulate count of one application on inputs of the given shapes.
    pub fn macs(&self, shapes: &[&[usize]]) -> u64 {
        match self {
            Self::MatMul => {
                let a = shapes[0];
                let b = shapes[1];
                let rows: usize = a[..a.len() - 1].iter().product();
                (rows * b[0] * b[1]) as u64
            }
            Self::BatchMatMul => {
                let a = shapes[0];
                let b = shapes[1];
                let r = a.len();
                let groups: usize = a[..r - 2].iter().product();
                (groups * a[r - 2] * a[r - 1] * b[r - 1]) as u64
            }
            _ => 0,
        }
    }
}

/// Per-application scratch kept for the backward pass.
pub(crate) type Saved<F> = Vec<F>;

fn expect_inputs(p: &Primitive, n: usize, got: usize) -> Result<()> {
    if n == got {
        Ok(())
    } else {
        Err(shape_err(p.name(), format!("expects {n} inputs, got {got}")))
    }
}

fn same_shape(p: &Primitive, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(shape_err(p.name(), format!("operands {a:?} and {b:?} differ")))
    }
}

fn last_dim(p: &Primitive, shape: &[usize]) -> Result<usize> {
    shape.last().copied().ok_or_else(|| shape_err(p.name(), "needs rank >= 1, got a scalar"))
}

/// How a broadcast operand maps onto the full operand.
enum Broadcast {
    Same,
    /// rhs equals the trailing extents: index `i % n`.
    Trailing(usize),
    /// rhs equals lhs with the last extent 1: index `i / last`.
    Column(usize),
    General(Vec<usize>),
}

impl Broadcast {
    fn plan(p: &Primitive, lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        if rhs.len() > lhs.len() {
            return Err(shape_err(p.name(), format!("term {rhs:?} has higher rank than operand {lhs:?}")));
        }
        let off = lhs.len() - rhs.len();
        for (i, &r) in rhs.iter().enumerate() {
            let l = lhs[off + i];
            if r != l && r != 1 {
                return Err(shape_err(
                    p.name(),
                    format!("term {rhs:?} does not expand to {lhs:?} (axis {} : {r} vs {l})", off + i),
                ));
            }
        }
        if lhs == rhs {
            return Ok(Self::Same);
        }
        if rhs == &lhs[off..] {
            return Ok(Self::Trailing(rhs.iter().product()));
        }
        let r = lhs.len();
        if off == 0 && rhs[r - 1] == 1 && rhs[..r - 1] == lhs[..r - 1] {
            return Ok(Self::Column(lhs[r - 1]));
        }
        let rs = strides(rhs);
        let n: usize = lhs.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; r];
        for _ in 0..n {
            let mut k = 0;
            for (i, &s) in rs.iter().enumerate() {
                if rhs[i] != 1 {
                    k += idx[off + i] * s;
                }
            }
            map.push(k);
            for ax in (0..r).rev() {
                idx[ax] += 1;
                if idx[ax] < lhs[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Self::General(map))
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Self::Same => i,
            Self::Trailing(n) => i % n,
            Self::Column(last) => i / last,
            Self::General(map) => map[i],
        }
    }
}

fn erf<F: Scalar>(x: F) -> F {
    F::cast(libm::erf(x.widen()))
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Evaluates a primitive. Returns the output and any saved intermediates.
pub(crate) fn forward<F: Scalar>(p: &Primitive, xs: &[&Tensor<F>]) -> Result<(Tensor<F>, Saved<F>)> {
    use Primitive as P;
    let out = match p {
        P::MatMul => {
            expect_inputs(p, 2, xs.len())?;
            let (a, b) = (xs[0], xs[1]);
            if b.rank() != 2 || a.rank() < 1 || last_dim(p, a.shape())? != b.shape()[0] {
                return Err(shape_err(p.name(), format!("cannot multiply {:?} by {:?}", a.shape(), b.shape())));
            }
            let (k, n) = (b.shape()[0], b.shape()[1]);
            let m = a.numel() / k;
            let mut out = vec![F::zero(); m * n];
            gemm_nn(&mut out, a.data(), b.data(), m, k, n);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::from_parts(shape, out)
        }
        P::BatchMatMul => {
            expect_inputs(p, 2, xs.len())?;
            let (a, b) = (xs[0], xs[1]);
            let r = a.rank();
            if r < 3
                || b.rank() != r
                || a.shape()[..r - 2] != b.shape()[..r - 2]
                || a.shape()[r - 1] != b.shape()[r - 2]
            {
                return Err(shape_err(p.name(), format!("cannot batch-multiply {:?} by {:?}", a.shape(), b.shape())));
            }
            let (m, k, n) = (a.shape()[r - 2], a.shape()[r - 1], b.shape()[r - 1]);
            let g: usize = a.shape()[..r - 2].iter().product();
            let mut out = vec![F::zero(); g * m * n];
            for i in 0..g {
                gemm_nn(
                    &mut out[i * m * n..(i + 1) * m * n],
                    &a.data()[i * m * k..(i + 1) * m * k],
                    &b.data()[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                );
            }
            let mut shape = a.shape().to_vec();
            shape[r - 1] = n;
            Tensor::from_parts(shape, out)
        }
        P::TransposeLast => {
            expect_inputs(p, 1, xs.len())?;
            let r = xs[0].rank();
            if r < 2 {
                return Err(shape_err(p.name(), format!("needs rank >= 2, got {:?}", xs[0].shape())));
            }
            let mut axes: Vec<usize> = (0..r).collect();
            axes.swap(r - 1, r - 2);
            let (shape, data) = permute(xs[0].data(), xs[0].shape(), &axes);
            Tensor::from_parts(shape, data)
        }
        P::Permute(axes) => {
            expect_inputs(p, 1, xs.len())?;
            let r = xs[0].rank();
            let mut seen = vec![false; r];
            if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
                return Err(shape_err(
                    p.name(),
                    format!("axes {axes:?} are not a permutation for shape {:?}", xs[0].shape()),
                ));
            }
            let (shape, data) = permute(xs[0].data(), xs[0].shape(), axes);
            Tensor::from_parts(shape, data)
        }
        P::Reshape(shape) => {
            expect_inputs(p, 1, xs.len())?;
            let n: usize = shape.iter().product();
            if n != xs[0].numel() || shape.contains(&0) {
                return Err(shape_err(p.name(), format!("cannot reshape {:?} into {shape:?}", xs[0].shape())));
            }
            Tensor::from_parts(shape.clone(), xs[0].data().to_vec())
        }
        P::Add | P::Sub | P::Mul => {
            expect_inputs(p, 2, xs.len())?;
            same_shape(p, xs[0].shape(), xs[1].shape())?;
            let (a, b) = (xs[0].data(), xs[1].data());
            let data = match p {
                P::Add => a.iter().zip(b).map(|(&x, &y)| x + y).collect(),
                P::Sub => a.iter().zip(b).map(|(&x, &y)| x - y).collect(),
                _ => a.iter().zip(b).map(|(&x, &y)| x * y).collect(),
            };
            Tensor::from_parts(xs[0].shape().to_vec(), data)
        }
        P::AddBroadcast | P::MulBroadcast => {
            expect_inputs(p, 2, xs.len())?;
            let plan = Broadcast::plan(p, xs[0].shape(), xs[1].shape())?;
            let (a, b) = (xs[0].data(), xs[1].data());
            let data = if matches!(p, P::AddBroadcast) {
                a.iter().enumerate().map(|(i, &x)| x + b[plan.index(i)]).collect()
            } else {
                a.iter().enumerate().map(|(i, &x)| x * b[plan.index(i)]).collect()
            };
            Tensor::from_parts(xs[0].shape().to_vec(), data)
        }
        P::Scale(c) => {
            expect_inputs(p, 1, xs.len())?;
            let c = F::cast(*c);
            Tensor::from_parts(xs[0].shape().to_vec(), xs[0].data().iter().map(|&x| x * c).collect())
        }
        P::Softmax => {
            expect_inputs(p, 1, xs.len())?;
            let d = last_dim(p, xs[0].shape())?;
            let mut data = xs[0].data().to_vec();
            for row in data.chunks_mut(d) {
                let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut s = F::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v = *v / s;
                }
            }
            Tensor::from_parts(xs[0].shape().to_vec(), data)
        }
        P::Relu | P::Gelu | P::Tanh => {
            expect_inputs(p, 1, xs.len())?;
            let half = F::cast(0.5);
            let f = |x: F| match p {
                P::Relu => x.max(F::zero()),
                P::Gelu => half * x * (F::one() + erf(x * F::cast(INV_SQRT_2))),
                _ => x.tanh(),
            };
            Tensor::from_parts(xs[0].shape().to_vec(), xs[0].data().iter().map(|&x| f(x)).collect())
        }
        P::LayerNorm { eps } => {
            if xs.len() != 1 && xs.len() != 3 {
                return Err(shape_err(p.name(), format!("expects 1 or 3 inputs, got {}", xs.len())));
            }
            let d = last_dim(p, xs[0].shape())?;
            if xs.len() == 3 {
                same_shape(p, xs[1].shape(), &[d])?;
                same_shape(p, xs[2].shape(), &[d])?;
            }
            let rows = xs[0].numel() / d;
            let eps = F::cast(*eps);
            let dn = F::cast(d as f64);
            let mut out = Vec::with_capacity(xs[0].numel());
            let mut saved = vec![F::zero(); 2 * rows];
            for (r, row) in xs[0].data().chunks(d).enumerate() {
                let mean = row.iter().copied().sum::<F>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
                let rstd = F::one() / (var + eps).sqrt();
                saved[r] = mean;
                saved[rows + r] = rstd;
                if xs.len() == 3 {
                    let (g, b) = (xs[1].data(), xs[2].data());
                    out.extend(row.iter().enumerate().map(|(c, &v)| (v - mean) * rstd * g[c] + b[c]));
                } else {
                    out.extend(row.iter().map(|&v| (v - mean) * rstd));
                }
            }
            return Ok((Tensor::from_parts(xs[0].shape().to_vec(), out), saved));
        }
        P::BatchNorm { eps, training } => {
            expect_inputs(p, if *training { 3 } else { 5 }, xs.len())?;
            let d = last_dim(p, xs[0].shape())?;
            for t in &xs[1..] {
                same_shape(p, t.shape(), &[d])?;
            }
            let rows = xs[0].numel() / d;
            let x = xs[0].data();
            let (mean, var) = if *training {
                let n = F::cast(rows as f64);
                let mut mean = vec![F::zero(); d];
                for row in x.chunks(d) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / n);
                let mut var = vec![F::zero(); d];
                for row in x.chunks(d) {
                    for c in 0..d {
                        let e = row[c] - mean[c];
                        var[c] += e * e;
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / n);
                (mean, var)
            } else {
                (xs[3].data().to_vec(), xs[4].data().to_vec())
            };
            let eps = F::cast(*eps);
            let rstd: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
            let (g, b) = (xs[1].data(), xs[2].data());
            let mut out = Vec::with_capacity(x.len());
            for row in x.chunks(d) {
                out.extend((0..d).map(|c| (row[c] - mean[c]) * rstd[c] * g[c] + b[c]));
            }
            let mut saved = mean;
            saved.extend(var);
            saved.extend(rstd);
            return Ok((Tensor::from_parts(xs[0].shape().to_vec(), out), saved));
        }
        P::Sum | P::Mean => {
            expect_inputs(p, 1, xs.len())?;
            let s: F = xs[0].data().iter().copied().sum();
            let v = if matches!(p, P::Mean) { s / F::cast(xs[0].numel() as f64) } else { s };
            Tensor::scalar(v)
        }
        P::Concat => {
            if xs.is_empty() {
                return Err(shape_err(p.name(), "needs at least one input"));
            }
            let lead = &xs[0].shape()[..xs[0].rank().saturating_sub(1)];
            let mut widths = Vec::with_capacity(xs.len());
            for t in xs {
                let w = last_dim(p, t.shape())?;
                if t.rank() != xs[0].rank() || &t.shape()[..t.rank() - 1] != lead {
                    return Err(shape_err(
                        p.name(),
                        format!("{:?} does not match leading extents {lead:?}", t.shape()),
                    ));
                }
                widths.push(w);
            }
            let total: usize = widths.iter().sum();
            let rows: usize = lead.iter().product();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (t, &w) in xs.iter().zip(&widths) {
                    out.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::from_parts(shape, out)
        }
        P::SliceLast { start, len } => {
            expect_inputs(p, 1, xs.len())?;
            let d = last_dim(p, xs[0].shape())?;
            if *len == 0 || start + len > d {
                return Err(shape_err(p.name(), format!("range {start}..{} outside last extent {d}", start + len)));
            }
            let out: Vec<F> = xs[0].data().chunks(d).flat_map(|row| row[*start..start + len].iter().copied()).collect();
            let mut shape = xs[0].shape().to_vec();
            *shape.last_mut().unwrap() = *len;
            Tensor::from_parts(shape, out)
        }
        P::NormLast => {
            expect_inputs(p, 1, xs.len())?;
            let d = last_dim(p, xs[0].shape())?;
            let out = xs[0].data().chunks(d).map(|row| row.iter().map(|&v| v * v).sum::<F>().sqrt()).collect();
            Tensor::from_parts(xs[0].shape()[..xs[0].rank() - 1].to_vec(), out)
        }
        P::Diff { axis } => {
            expect_inputs(p, 1, xs.len())?;
            let shape = xs[0].shape();
            if *axis >= shape.len() || shape[*axis] < 2 {
                return Err(shape_err(p.name(), format!("axis {axis} of {shape:?} needs at least 2 entries")));
            }
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let len = shape[*axis];
            let x = xs[0].data();
            let mut out = Vec::with_capacity(outer * (len - 1) * inner);
            for o in 0..outer {
                for t in 0..len - 1 {
                    let a = (o * len + t) * inner;
                    let b = a + inner;
                    out.extend((0..inner).map(|i| x[b + i] - x[a + i]));
                }
            }
            let mut s = shape.to_vec();
            s[*axis] = len - 1;
            Tensor::from_parts(s, out)
        }
    };
    Ok((out, Vec::new()))
}

/// Vector-Jacobian products for every input flagged in `needs`.
pub(crate) fn backward<F: Scalar>(
    p: &Primitive,
    xs: &[&Tensor<F>],
    y: &Tensor<F>,
    saved: &[F],
    g: &[F],
    needs: &[bool],
) -> Vec<Option<Vec<F>>> {
    use Primitive as P;
    let mut grads: Vec<Option<Vec<F>>> = vec![None; xs.len()];
    match p {
        P::MatMul => {
            let (a, b) = (xs[0], xs[1]);
            let (k, n) = (b.shape()[0], b.shape()[1]);
            let m = a.numel() / k;
            if needs[0] {
                let mut da = vec![F::zero(); m * k];
                gemm_nt(&mut da, g, b.data(), m, n, k);
                grads[0] = Some(da);
            }
            if needs[1] {
                let mut db = vec![F::zero(); k * n];
                gemm_tn(&mut db, a.data(), g, m, k, n);
                grads[1] = Some(db);
            }
        }
        P::BatchMatMul => {
            let (a, b) = (xs[0], xs[1]);
            let r = a.rank();
            let (m, k, n) = (a.shape()[r - 2], a.shape()[r - 1], b.shape()[r - 1]);
            let groups = a.numel() / (m * k);
            if needs[0] {
                let mut da = vec![F::zero(); a.numel()];
                for i in 0..groups {
                    gemm_nt(
                        &mut da[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        &b.data()[i * k * n..(i + 1) * k * n],
                        m,
                        n,
                        k,
                    );
                }
                grads[0] = Some(da);
            }
            if needs[1] {
                let mut db = vec![F::zero(); b.numel()];
                for i in 0..groups {
                    gemm_tn(
                        &mut db[i * k * n..(i + 1) * k * n],
                        &a.data()[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                grads[1] = Some(db);
            }
        }
        P::TransposeLast => {
            let r = y.rank();
            let mut axes: Vec<usize> = (0..r).collect();
            axes.swap(r - 1, r - 2);
            grads[0] = Some(permute(g, y.shape(), &axes).1);
        }
        P::Permute(axes) => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            grads[0] = Some(permute(g, y.shape(), &inv).1);
        }
        P::Reshape(_) => grads[0] = Some(g.to_vec()),
        P::Add => {
            for i in 0..2 {
                if needs[i] {
                    grads[i] = Some(g.to_vec());
                }
            }
        }
        P::Sub => {
            if needs[0] {
                grads[0] = Some(g.to_vec());
            }
            if needs[1] {
                grads[1] = Some(g.iter().map(|&v| -v).collect());
            }
        }
        P::Mul => {
            if needs[0] {
                grads[0] = Some(g.iter().zip(xs[1].data()).map(|(&a, &b)| a * b).collect());
            }
            if needs[1] {
                grads[1] = Some(g.iter().zip(xs[0].data()).map(|(&a, &b)| a * b).collect());
            }
        }
        P::AddBroadcast | P::MulBroadcast => {
            let plan = Broadcast::plan(p, xs[0].shape(), xs[1].shape()).expect("validated in forward");
            let is_add = matches!(p, P::AddBroadcast);
            let (a, b) = (xs[0].data(), xs[1].data());
            if needs[0] {
                grads[0] = Some(if is_add {
                    g.to_vec()
                } else {
                    g.iter().enumerate().map(|(i, &v)| v * b[plan.index(i)]).collect()
                });
            }
            if needs[1] {
                let mut db = vec![F::zero(); b.len()];
                for (i, &v) in g.iter().enumerate() {
                    db[plan.index(i)] += if is_add { v } else { v * a[i] };
                }
                grads[1] = Some(db);
            }
        }
        P::Scale(c) => {
            let c = F::cast(*c);
            grads[0] = Some(g.iter().map(|&v| v * c).collect());
        }
        P::Softmax => {
            let d = *y.shape().last().unwrap();
            let mut dx = Vec::with_capacity(g.len());
            for (yr, gr) in y.data().chunks(d).zip(g.chunks(d)) {
                let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
            }
            grads[0] = Some(dx);
        }
        P::Relu => {
            grads[0] =
                Some(g.iter().zip(xs[0].data()).map(|(&gv, &x)| if x > F::zero() { gv } else { F::zero() }).collect());
        }
        P::Gelu => {
            let half = F::cast(0.5);
            grads[0] = Some(
                g.iter()
                    .zip(xs[0].data())
                    .map(|(&gv, &x)| {
                        let cdf = half * (F::one() + erf(x * F::cast(INV_SQRT_2)));
                        let pdf = F::cast(INV_SQRT_2PI) * (-half * x * x).exp();
                        gv * (cdf + x * pdf)
                    })
                    .collect(),
            );
        }
        P::Tanh => {
            grads[0] = Some(g.iter().zip(y.data()).map(|(&gv, &t)| gv * (F::one() - t * t)).collect());
        }
        P::LayerNorm { .. } => {
            let x = xs[0];
            let d = *x.shape().last().unwrap();
            let rows = x.numel() / d;
            let (mean, rstd) = saved.split_at(rows);
            let affine = xs.len() == 3;
            let gamma = if affine { Some(xs[1].data()) } else { None };
            let dn = F::cast(d as f64);
            let mut dx = vec![F::zero(); x.numel()];
            let mut dgamma = vec![F::zero(); d];
            let mut dbeta = vec![F::zero(); d];
            let mut xhat = vec![F::zero(); d];
            let mut dxhat = vec![F::zero(); d];
            for r in 0..rows {
                let xr = &x.data()[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                for c in 0..d {
                    xhat[c] = (xr[c] - mean[r]) * rstd[r];
                    dxhat[c] = match gamma {
                        Some(gm) => gr[c] * gm[c],
                        None => gr[c],
                    };
                    if affine {
                        dgamma[c] += gr[c] * xhat[c];
                        dbeta[c] += gr[c];
                    }
                }
                let m1 = dxhat.iter().copied().sum::<F>() / dn;
                let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<F>() / dn;
                for c in 0..d {
                    dx[r * d + c] = rstd[r] * (dxhat[c] - m1 - xhat[c] * m2);
                }
            }
            grads[0] = needs[0].then_some(dx);
            if affine {
                grads[1] = needs[1].then_some(dgamma);
                grads[2] = needs[2].then_some(dbeta);
            }
        }
        P::BatchNorm { training, .. } => {
            let x = xs[0];
            let d = *x.shape().last().unwrap();
            let rows = x.numel() / d;
            let mean = &saved[..d];
            let rstd = &saved[2 * d..3 * d];
            let gamma = xs[1].data();
            let mut dgamma = vec![F::zero(); d];
            let mut dbeta = vec![F::zero(); d];
            for (xr, gr) in x.data().chunks(d).zip(g.chunks(d)) {
                for c in 0..d {
                    dgamma[c] += gr[c] * (xr[c] - mean[c]) * rstd[c];
                    dbeta[c] += gr[c];
                }
            }
            if needs[0] {
                let mut dx = vec![F::zero(); x.numel()];
                if *training {
                    // dxhat = g·γ; dx = rstd·(dxhat − mean(dxhat) − x̂·mean(dxhat·x̂)) per channel
                    let n = F::cast(rows as f64);
                    let m1: Vec<F> = (0..d).map(|c| dbeta[c] * gamma[c] / n).collect();
                    let m2: Vec<F> = (0..d).map(|c| dgamma[c] * gamma[c] / n).collect();
                    for (r, (xr, gr)) in x.data().chunks(d).zip(g.chunks(d)).enumerate() {
                        for c in 0..d {
                            let xhat = (xr[c] - mean[c]) * rstd[c];
                            dx[r * d + c] = rstd[c] * (gr[c] * gamma[c] - m1[c] - xhat * m2[c]);
                        }
                    }
                } else {
                    for (r, gr) in g.chunks(d).enumerate() {
                        for c in 0..d {
                            dx[r * d + c] = gr[c] * gamma[c] * rstd[c];
                        }
                    }
                }
                grads[0] = Some(dx);
            }
            grads[1] = needs[1].then_some(dgamma);
            grads[2] = needs[2].then_some(dbeta);
        }
        P::Sum => grads[0] = Some(vec![g[0]; xs[0].numel()]),
        P::Mean => {
            let n = xs[0].numel();
            grads[0] = Some(vec![g[0] / F::cast(n as f64); n]);
        }
        P::Concat => {
            let total = *y.shape().last().unwrap();
            let mut off = 0;
            for (i, t) in xs.iter().enumerate() {
                let w = *t.shape().last().unwrap();
                if needs[i] {
                    grads[i] = Some(g.chunks(total).flat_map(|row| row[off..off + w].iter().copied()).collect());
                }
                off += w;
            }
        }
        P::SliceLast { start, len } => {
            let d = *xs[0].shape().last().unwrap();
            let mut dx = vec![F::zero(); xs[0].numel()];
            for (r, gr) in g.chunks(*len).enumerate() {
                dx[r * d + start..r * d + start + len].copy_from_slice(gr);
            }
            grads[0] = Some(dx);
        }
        P::NormLast => {
            let d = *xs[0].shape().last().unwrap();
            let mut dx = Vec::with_capacity(xs[0].numel());
            for (r, row) in xs[0].data().chunks(d).enumerate() {
                let n = y.data()[r];
                if n > F::zero() {
                    let s = g[r] / n;
                    dx.extend(row.iter().map(|&v| v * s));
                } else {
                    dx.extend(std::iter::repeat_n(F::zero(), d));
                }
            }
            grads[0] = Some(dx);
        }
        P::Diff { axis } => {
            let shape = xs[0].shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let len = shape[*axis];
            let mut dx = vec![F::zero(); xs[0].numel()];
            for o in 0..outer {
                for t in 0..len - 1 {
                    let gi = (o * (len - 1) + t) * inner;
                    let a = (o * len + t) * inner;
                    for i in 0..inner {
                        dx[a + i] -= g[gi + i];
                        dx[a + inner + i] += g[gi + i];
                    }
                }
            }
            grads[0] = Some(dx);
        }
    }
    for (gr, &need) in grads.iter_mut().zip(needs) {
        if !need {
            *gr = None;
        }
    }
    grads
}
