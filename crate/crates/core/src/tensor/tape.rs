use std::collections::BTreeMap;

use super::primitive::{self, Primitive, Saved};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Option<(Primitive, Vec<Var>)>,
    requires_grad: bool,
    saved: Saved<F>,
}

/// Ordered record of primitive applications. Nodes are appended only, so the
/// inputs of every application precede it.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    macs: u64,
    batched_macs: u64,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), macs: 0, batched_macs: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by the matrix products recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// The part of [`Tape::macs`] spent in batched products between activations.
    pub fn batched_macs(&self) -> u64 {
        self.batched_macs
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: None, requires_grad, saved: Vec::new() });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Batch statistics `(mean, biased variance)` of a training-mode batch-norm application.
    pub fn batch_stats(&self, v: Var) -> Option<(&[F], &[F])> {
        let node = &self.nodes[v.0];
        match &node.op {
            Some((Primitive::BatchNorm { training: true, .. }, _)) => {
                let d = *node.value.shape().last()?;
                Some((&node.saved[..d], &node.saved[d..2 * d]))
            }
            _ => None,
        }
    }

    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let xs: Vec<&Tensor<F>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = primitive::forward(&prim, &xs)?;
        let shapes: Vec<&[usize]> = xs.iter().map(|t| t.shape()).collect();
        let macs = prim.macs(&shapes);
        self.macs += macs;
        if matches!(prim, Primitive::BatchMatMul) {
            self.batched_macs += macs;
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op: Some((prim, inputs.to_vec())), requires_grad, saved });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape; the returned map
    /// holds a gradient for every leaf created with `requires_grad`.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("tape is empty".into()));
        }
        let root = self.nodes.get(loss.0).ok_or_else(|| Error::Backward(format!("{loss:?} is not on this tape")))?;
        if root.value.numel() != 1 {
            return Err(Error::Backward(format!("loss must be a scalar, got shape {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some((prim, inputs)) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let xs: Vec<&Tensor<F>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = primitive::backward(prim, &xs, &node.value, &node.saved, &g, &needs);
            for (v, ig) in inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(ig),
                }
            }
        }
        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.into_iter().enumerate() {
            if node.op.is_none() && node.requires_grad {
                let shape = node.value.shape().to_vec();
                let g = grads[i].take().unwrap_or_else(|| vec![F::zero(); node.value.numel()]);
                out.insert(Var(i), Tensor::from_parts(shape, g));
            }
        }
        Ok(Gradients { grads: out })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::BatchMatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::TransposeLast, &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Primitive::Permute(axes.to_vec()), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn add_broadcast(&mut self, a: Var, term: Var) -> Result<Var> {
        self.apply(Primitive::AddBroadcast, &[a, term])
    }

    pub fn mul_broadcast(&mut self, a: Var, factor: Var) -> Result<Var> {
        self.apply(Primitive::MulBroadcast, &[a, factor])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Gelu, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.apply(Primitive::LayerNorm { eps }, &[x, gamma, beta])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::Concat, parts)
    }

    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::SliceLast { start, len }, &[a])
    }

    pub fn norm_last(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::NormLast, &[a])
    }

    pub fn diff(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Diff { axis }, &[a])
    }
}

/// Gradients of a scalar with respect to the leaves of a consumed tape.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: BTreeMap<Var, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, FiniteDiffOptions, PrimitiveKind};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3., 4.]);
        assert_eq!(tape.macs(), 8);
    }

    #[test]
    fn softmax_of_equal_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0., 0.]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_two_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1., 3.]));
        let y = tape.apply(Primitive::LayerNorm { eps: 0.0 }, &[x]).unwrap();
        assert_eq!(tape.value(y).data(), &[-1., 1.]);
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.; 6]));
        let b = tape.constant(t(&[2, 3], &[0.; 6]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let bias = tape_const(&mut tape, &[4]);
        let err = tape.add_broadcast(a, bias).unwrap_err().to_string();
        assert!(err.contains("add_broadcast"), "{err}");
        assert!("conv2d".parse::<PrimitiveKind>().is_err());
        assert_eq!("softmax".parse::<PrimitiveKind>().unwrap(), PrimitiveKind::Softmax);
    }

    fn tape_const(tape: &mut Tape<f64>, shape: &[usize]) -> Var {
        tape.constant(Tensor::zeros(shape.to_vec()))
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., 2., 3.]), true);
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn unreached_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let y = tape.leaf(t(&[2], &[5., 6.]), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(y).unwrap().data(), &[0., 0.]);
    }

    #[test]
    fn backward_rejects_bad_roots() {
        let tape = Tape::<f64>::new();
        assert!(tape.backward(Var(0)).is_err());
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        assert!(tape.backward(x).unwrap_err().to_string().contains("scalar"));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a = t(&[2, 3], &[0.3, -1.2, 0.5, 2.0, 0.1, -0.7]);
        let b = t(&[3, 2], &[1.1, -0.4, 0.2, 0.9, -1.5, 0.6]);
        let report = finite_diff_check(
            |tape, xs| {
                let c = tape.matmul(xs[0], xs[1])?;
                tape.sum(c)
            },
            &[a.clone(), b.clone()],
            &FiniteDiffOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");

        // grad_A = 1·Bᵀ
        let mut tape = Tape::new();
        let av = tape.leaf(a, true);
        let bv = tape.constant(b.clone());
        let c = tape.matmul(av, bv).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        let ga = g.get(av).unwrap().data().to_vec();
        for i in 0..2 {
            for k in 0..3 {
                let want = b.data()[k * 2] + b.data()[k * 2 + 1];
                assert!((ga[i * 3 + k] - want).abs() < 1e-12);
            }
        }
    }
}
