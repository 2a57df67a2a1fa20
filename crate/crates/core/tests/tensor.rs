use poselift::tensor::{Primitive, Tape, Tensor};
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], data[..rows * cols].to_vec()).unwrap()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..6, data in prop::collection::vec(-30.0f64..30.0, 30)) {
        let mut tape = Tape::new();
        let x = tape.constant(tensor(rows, cols, &data));
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardizes(rows in 1usize..5, cols in 2usize..8, data in prop::collection::vec(-5.0f64..5.0, 40)) {
        let x = tensor(rows, cols, &data);
        // Skip near-constant rows, where eps dominates the variance.
        prop_assume!(x.data().chunks(cols).all(|r| {
            let m = r.iter().sum::<f64>() / cols as f64;
            r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / cols as f64 > 1e-2
        }));
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::ones(vec![cols]));
        let b = tape.constant(Tensor::zeros(vec![cols]));
        let y = tape.apply(Primitive::LayerNorm { eps: 0.0 }, &[xv, g, b]).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            let m = row.iter().sum::<f64>() / cols as f64;
            let v = row.iter().map(|r| (r - m).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(m.abs() < 1e-6);
            prop_assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_is_additive(data in prop::collection::vec(-2.0f64..2.0, 12), w in prop::collection::vec(-1.0f64..1.0, 12)) {
        let x = tensor(3, 4, &data);
        let f = |tape: &mut Tape<f64>, v| {
            let t = tape.tanh(v).unwrap();
            let s = tape.softmax(t).unwrap();
            tape.sum(s).unwrap()
        };
        let g = |tape: &mut Tape<f64>, v| {
            let c = tape.constant(tensor(4, 3, &w));
            let m = tape.matmul(v, c).unwrap();
            let m = tape.gelu(m).unwrap();
            tape.mean(m).unwrap()
        };
        let grad = |which: u8| {
            let mut tape = Tape::new();
            let v = tape.leaf(x.clone(), true);
            let out = match which {
                0 => f(&mut tape, v),
                1 => g(&mut tape, v),
                _ => {
                    let a = f(&mut tape, v);
                    let b = g(&mut tape, v);
                    tape.add(a, b).unwrap()
                }
            };
            tape.backward(out).unwrap().get(v).unwrap().clone()
        };
        let (gf, gg, gs) = (grad(0), grad(1), grad(2));
        for ((a, b), s) in gf.data().iter().zip(gg.data()).zip(gs.data()) {
            prop_assert!((a + b - s).abs() < 1e-10);
        }
    }
}

#[test]
fn replayed_forward_is_bit_identical() {
    let run = || {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![4, 3], (0..12).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap());
        let g = tape.constant(Tensor::full(vec![3], 1.5f32));
        let b = tape.constant(Tensor::full(vec![3], -0.2f32));
        let m = tape.constant(Tensor::full(vec![3], 0.1f32));
        let v = tape.constant(Tensor::full(vec![3], 0.8f32));
        let y = tape.apply(Primitive::BatchNorm { eps: 1e-5, training: false }, &[x, g, b, m, v]).unwrap();
        let y = tape.gelu(y).unwrap();
        tape.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
