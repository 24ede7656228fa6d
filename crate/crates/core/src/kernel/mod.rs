//! Dense `f64` tensors and a taped reverse-mode differentiation graph.
//!
//! The graph is rebuilt for every forward pass. Parameters enter as borrowed
//! leaves tagged with a [`ParamId`]; everything else is owned by the graph.

mod gemm;
mod graph;
mod tensor;

pub use graph::{AttnMask, Gradients, Graph, Var};
pub use tensor::Tensor;

pub(crate) use graph::sigmoid;

use thiserror::Error;

/// Index of a parameter inside a [`crate::params::ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not match {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for extent {len}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: non-finite values")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("graph already differentiated")]
    GraphConsumed,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, FdConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_cases() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let out = g.matmul(i2, i2).unwrap();
        assert_eq!(g.value(out), &Tensor::identity(2));

        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let out = g.matmul(a, i2).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let mut expect = [0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    expect[i * 2 + j] += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
            }
        }
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let out = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(out).data().iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            g.matmul(a, b),
            Err(KernelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap());
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        // e^k / (e + e^2 + e^3), written out with the exact constants.
        let e1 = std::f64::consts::E;
        let (e2, e3) = (e1 * e1, e1 * e1 * e1);
        let z = e1 + e2 + e3;
        let x = g.constant(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.softmax(x).unwrap();
        for (a, b) in g.value(y).data().iter().zip([e1 / z, e2 / z, e3 / z]) {
            assert!((a - b).abs() < 1e-12);
        }

        let x = g.constant(Tensor::new(&[2], vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(g.softmax(x), Err(KernelError::NonFinite { .. })));
    }

    #[test]
    fn sigmoid_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[4], vec![0.0, 40.0, -40.0, 1.0]).unwrap());
        let y = g.sigmoid(x);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 1.0).abs() < 1e-12);
        assert!(v[2].abs() < 1e-12);
        // 1/(1+e^-1) to 16 digits.
        assert!((v[3] - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::new(&[1, 2], vec![3.0, 3.0]).unwrap());
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let x = g.constant(Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
        let y = g.layer_norm(x, gain, bias).unwrap();
        let c = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[0] - c).abs() < 1e-15);
        assert!((g.value(y).data()[1] + c).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gain = g.constant(Tensor::full(&[5], 1.0));
        let bias_t = rand_tensor(&mut rng, &[5]);
        let bias_mean = bias_t.data().iter().sum::<f64>() / 5.0;
        let bias = g.constant(bias_t);
        let x = g.constant(rand_tensor(&mut rng, &[3, 5]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        for r in 0..3 {
            let mean = g.value(y).row(r).iter().sum::<f64>() / 5.0;
            assert!((mean - bias_mean).abs() < 1e-12);
        }

        let bad = g.constant(Tensor::zeros(&[3]));
        assert!(g.layer_norm(x, bad, bias).is_err());
    }

    #[test]
    fn concat_rows_cases() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[1, 4], 1.0));
        let b = g.constant(Tensor::full(&[2, 4], 2.0));
        let c = g.concat_rows(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[3, 4]);
        assert_eq!(g.value(c).row(0), &[1.0; 4]);
        assert_eq!(g.value(c).row(2), &[2.0; 4]);

        let single = g.concat_rows(&[b]).unwrap();
        assert_eq!(g.value(single), g.value(b));

        let p1 = g.constant(Tensor::zeros(&[64, 8]));
        let p2 = g.constant(Tensor::zeros(&[64, 8]));
        let p3 = g.constant(Tensor::zeros(&[16, 8]));
        let c = g.concat_rows(&[p1, p2, p3]).unwrap();
        assert_eq!(g.value(c).shape(), &[144, 8]);

        let bad = g.constant(Tensor::zeros(&[1, 3]));
        assert!(g.concat_rows(&[a, bad]).is_err());
    }

    #[test]
    fn backward_simple_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xt = rand_tensor(&mut rng, &[2, 3, 2]);

        let mut g = Graph::new();
        let x = g.input(xt.clone(), true);
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0; 12]);

        let mut g = Graph::new();
        let x = g.input(xt.clone(), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        let grads = g.backward(half).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &xt);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2]), true);
        assert!(matches!(
            g.backward(x),
            Err(KernelError::NonScalarLoss { .. })
        ));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.backward(s).err(), Some(KernelError::GraphConsumed));
    }

    fn fd() -> FdConfig {
        FdConfig::default()
    }

    #[test]
    fn gradcheck_dense_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let inputs = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 5]),
            rand_tensor(&mut rng, &[5]),
            rand_tensor(&mut rng, &[5]),
            rand_tensor(&mut rng, &[2, 4]),
        ];
        let report = check_gradients(&inputs, fd(), |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_row(h, v[2])?;
            let h = g.layer_norm(h, v[3], v[2])?;
            let h = g.gelu(h);
            let t = g.matmul_t(h, h)?;
            let t = g.softmax(t)?;
            let u = g.matmul_t(v[4], v[0])?;
            let u = g.sigmoid(u);
            let u = g.transpose(u)?;
            let m = g.mul(t, t)?;
            let a = g.sum(m);
            let su = g.sub(u, u)?;
            let b = g.mean(u);
            let c = g.sum(su);
            let ab = g.add(a, b)?;
            g.add(ab, c)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn gradcheck_rows_and_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![rand_tensor(&mut rng, &[6, 3]), rand_tensor(&mut rng, &[2, 3])];
        let target = Tensor::new(&[4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let report = check_gradients(&inputs, fd(), |g, v| {
            let rows = g.gather_rows(v[0], &[1, 4, 1, 0])?;
            let cat = g.concat_rows(&[rows, v[1]])?;
            let s = g.slice_rows(cat, 1, 4)?;
            let logits = g.reshape(s, &[4, 3])?;
            let ce = g.cross_entropy(logits, &[Some(2), None, Some(0), Some(1)])?;
            let col = g.matmul_t(v[1], s)?;
            let row = g.slice_rows(col, 0, 1)?;
            let p = g.sigmoid(row);
            let bce = g.bce(p, &target, 1e-7)?;
            let dice = g.dice(p, &target, 1.0)?;
            let t = g.add(ce, bce)?;
            g.add(t, dice)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn gradcheck_attention_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = vec![
            rand_tensor(&mut rng, &[5, 8]),
            rand_tensor(&mut rng, &[5, 8]),
            rand_tensor(&mut rng, &[5, 8]),
            rand_tensor(&mut rng, &[3, 8]),
        ];
        let report = check_gradients(&inputs, fd(), |g, v| {
            let a = g.attention(v[0], v[1], v[2], 2, AttnMask::PrefixCausal { prefix: 2 })?;
            let b = g.attention(v[3], a, v[2], 4, AttnMask::None)?;
            let m = g.mul(b, b)?;
            let s = g.sum(m);
            let m2 = g.mul(a, v[0])?;
            let s2 = g.sum(m2);
            g.add(s, s2)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn prefix_causal_mask_pattern() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4, 2], 0.3));
        let a = g
            .attention(x, x, x, 1, AttnMask::PrefixCausal { prefix: 2 })
            .unwrap();
        let p = g.attention_probs(a).unwrap();
        // Prefix rows see both prefix keys only; later rows are causal.
        assert_eq!(&p[0..4], &[0.5, 0.5, 0.0, 0.0]);
        assert_eq!(&p[4..8], &[0.5, 0.5, 0.0, 0.0]);
        let third = 1.0 / 3.0;
        assert!((p[8] - third).abs() < 1e-15 && p[11] == 0.0);
        assert!(p[12..16].iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-700.0f64..700.0, 1..40)) {
            let n = vals.len();
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(&[1, n], vals).unwrap());
            let y = g.softmax(x).unwrap();
            let s: f64 = g.value(y).data().iter().sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-9);
        }

        #[test]
        fn forward_is_bit_identical(seed in 0u64..1000) {
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = rand_tensor(&mut rng, &[7, 9]);
                let b = rand_tensor(&mut rng, &[7, 9]);
                let mut g = Graph::new();
                let (va, vb) = (g.constant(a), g.constant(b));
                let t = g.matmul_t(va, vb).unwrap();
                let s = g.softmax(t).unwrap();
                g.value(s).clone()
            };
            proptest::prop_assert_eq!(run(), run());
        }
    }
}
