//! Dense `f64` tensors, a reverse-mode tape, and the optimizer used by every model.

pub mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{softmax_tensor, BatchStats, Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig, DivergenceGuard};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;

use alloc::format;

use crate::error::{Error, Result};

/// Default denominator guard for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `KL(p || q)` for two probability vectors, with `0 * ln(0 / q) = 0`.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("kl lengths {} vs {}", p.len(), q.len())));
    }
    for (name, d) in [("p", p), ("q", q)] {
        let total: f64 = d.iter().sum();
        if (total - 1.0).abs() > 1e-9 || d.iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidDistribution(format!("{name} sums to {total}")));
        }
    }
    let mut kl = 0.0;
    for (i, (&pv, &qv)) in p.iter().zip(q).enumerate() {
        if pv > 0.0 {
            if qv <= 0.0 {
                return Err(Error::InfiniteDivergence(i));
            }
            kl += pv * (libm::log(pv) - libm::log(qv));
        }
    }
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check_gradients;
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0.0, 0.0]));
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let b = g.constant(t(&[2], &[1000.0, 0.0]));
        let s = g.softmax(b, 0).unwrap();
        assert!((g.value(s).data()[0] - 1.0).abs() < 1e-12);
        assert!(g.value(s).data()[1] < 1e-300 || g.value(s).data()[1] == 0.0);
    }

    #[test]
    fn softmax_shift_invariance_and_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform([4, 7], -1000.0, 1000.0, &mut rng);
        let shifted = Tensor::new(
            [4, 7],
            x.data().iter().map(|v| v + 123.456).collect::<Vec<_>>(),
        )
        .unwrap();
        let a = softmax_tensor(&x, 1).unwrap();
        let b = softmax_tensor(&shifted, 1).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
        for r in 0..4 {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // non-last axis
        let c = softmax_tensor(&x, 0).unwrap();
        for col in 0..7 {
            let s: f64 = (0..4).map(|r| c.data()[r * 7 + col]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([3, 0]));
        assert_eq!(g.softmax(a, 1), Err(Error::EmptyAxis));
        assert!(matches!(g.softmax(a, 2), Err(Error::Axis { .. })));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let one = g.constant(t(&[2], &[1.0, 1.0]));
        let zero = g.constant(t(&[2], &[0.0, 0.0]));
        let c = g.constant(t(&[2], &[4.0, 4.0]));
        let y = g.layer_norm(c, one, zero, LAYER_NORM_EPS).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let x = g.constant(t(&[2], &[1.0, 3.0]));
        let y = g.layer_norm(x, one, zero, 1e-12).unwrap();
        assert!((g.value(y).data()[0] + 1.0).abs() < 1e-10);
        assert!((g.value(y).data()[1] - 1.0).abs() < 1e-10);

        let gain = g.constant(t(&[2], &[2.0, 2.0]));
        let bias = g.constant(t(&[2], &[5.0, 5.0]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!((g.value(y).data()[0] - 3.0).abs() < 1e-9);
        assert!((g.value(y).data()[1] - 7.0).abs() < 1e-9);

        let empty = g.constant(Tensor::zeros([2, 0]));
        assert_eq!(g.normalize(empty, 1e-5), Err(Error::EmptyAxis));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn([5, 9], 3.0, &mut rng));
        let y = g.normalize(x, 1e-14).unwrap();
        for r in 0..5 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 9.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 9.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn categorical_kl_examples() {
        assert_eq!(categorical_kl(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let kl = categorical_kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((kl - core::f64::consts::LN_2).abs() < 1e-12);
        // 0.9 ln 1.8 + 0.1 ln 0.2 versus 0.5 ln(5/9) + 0.5 ln 5
        let forward = categorical_kl(&[0.9, 0.1], &[0.5, 0.5]).unwrap();
        let reverse = categorical_kl(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((forward - 0.368_064_5).abs() < 1e-6);
        assert!((reverse - 0.510_825_6).abs() < 1e-6);
        assert!((forward - reverse).abs() > 0.1);
        assert_eq!(
            categorical_kl(&[0.5, 0.5], &[1.0, 0.0]),
            Err(Error::InfiniteDivergence(1))
        );
    }

    #[test]
    fn backward_square_and_disconnected_leaf() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let unused = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).item(), 6.0);
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(f64::MAX));
        assert_eq!(g.scale(x, 10.0), Err(Error::NonFinite("scale")));
    }

    #[test]
    fn broadcasting_add_and_mul() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.constant(t(&[3], &[10.0, 20.0, 30.0]));
        let c = g.constant(t(&[2, 1], &[2.0, 3.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let m = g.mul(a, c).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 4.0, 6.0, 12.0, 15.0, 18.0]);
        let bad = g.constant(Tensor::zeros([4]));
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn conv_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 3, 8]));
        let w = g.constant(Tensor::zeros([5, 3, 4]));
        let b = g.constant(Tensor::zeros([5]));
        let y = g.conv1d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 5, 4]);
        let wt = g.constant(Tensor::zeros([5, 3, 4]));
        let bt = g.constant(Tensor::zeros([3]));
        let z = g.conv_transpose1d(y, wt, bt, 2, 1).unwrap();
        assert_eq!(g.shape(z), &[2, 3, 8]);
    }

    #[test]
    fn copy_gradient_routes_to_target_only() {
        let mut g = Graph::new();
        let src = g.param(t(&[2], &[5.0, 6.0]));
        let dst = g.param(t(&[2], &[1.0, 1.0]));
        let st = g.copy_gradient(src, dst).unwrap();
        assert_eq!(g.value(st).data(), &[5.0, 6.0]);
        let sq = g.mul(st, st).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(dst).data(), &[10.0, 12.0]);
        assert_eq!(grads.get(src).data(), &[0.0, 0.0]);
    }

    #[test]
    fn determinism_of_forward_and_backward() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut g = Graph::new();
            let x = g.param(Tensor::randn([3, 4], 1.0, &mut rng));
            let w = g.param(Tensor::randn([4, 5], 1.0, &mut rng));
            let y = g.matmul(x, w).unwrap();
            let loss = g.cross_entropy(y, &[0, 3, 4]).unwrap();
            let grads = g.backward(loss).unwrap();
            (g.value(loss).item(), grads.get(x), grads.get(w))
        };
        assert_eq!(run(), run());
    }

    fn gradcheck<F>(build: F, inputs: Vec<Tensor>)
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = check_gradients(&build, &inputs, 1e-5, 40, &mut rng).unwrap();
        assert!(r.max_rel_error < 1e-4, "rel error {}", r.max_rel_error);
    }

    #[test]
    fn gradcheck_softmax_cross_entropy_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        gradcheck(
            |g, v| {
                let s = g.softmax(v[0], 1)?;
                let w = g.constant(t(&[4], &[0.3, -1.0, 2.0, 0.5]));
                let m = g.mul(s, w)?;
                let l = g.sum(m)?;
                let ce = g.cross_entropy(v[0], &[1, 2, 0])?;
                g.add(l, ce)
            },
            vec![Tensor::randn([3, 4], 1.0, &mut rng)],
        );
    }

    #[test]
    fn gradcheck_attention_shaped_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        gradcheck(
            |g, v| {
                let a = g.reshape(v[0], [2, 3, 4])?;
                let p = g.permute(a, &[0, 2, 1])?; // [2,4,3]
                let s = g.bmm(a, p)?; // [2,3,3]
                let sm = g.softmax(s, 2)?;
                let o = g.bmm(sm, a)?;
                let ln = g.normalize(o, LAYER_NORM_EPS)?;
                let w = g.matmul(ln, v[1])?;
                let r = g.sigmoid(w)?;
                let m = g.mean_axis(r, 1)?;
                g.mean(m)
            },
            vec![
                Tensor::randn([6, 4], 1.0, &mut rng),
                Tensor::randn([4, 5], 1.0, &mut rng),
            ],
        );
    }

    #[test]
    fn gradcheck_conv_and_batch_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        gradcheck(
            |g, v| {
                let y = g.conv1d(v[0], v[1], v[2], 2, 1)?;
                let z = g.conv_transpose1d(y, v[3], v[4], 2, 1)?;
                let (n, _) = g.batch_norm(z, v[5], v[6], 1e-5)?;
                let w = g.constant(Tensor::randn([2, 3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(0)));
                let m = g.mul(n, w)?;
                g.sum(m)
            },
            vec![
                Tensor::randn([2, 3, 8], 1.0, &mut rng),
                Tensor::randn([4, 3, 4], 0.5, &mut rng),
                Tensor::randn([4], 0.5, &mut rng),
                Tensor::randn([4, 3, 4], 0.5, &mut rng),
                Tensor::randn([3], 0.5, &mut rng),
                Tensor::randn([3], 1.0, &mut rng),
                Tensor::randn([3], 1.0, &mut rng),
            ],
        );
    }

    #[test]
    fn gradcheck_kl_gather_abs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        gradcheck(
            |g, v| {
                let rows = g.gather(v[0], &[2, 0, 2])?;
                let p = g.softmax(rows, 1)?;
                let q = g.softmax(v[1], 1)?;
                let kl = g.kl_div(p, q)?;
                let a = g.abs(v[1])?;
                let s = g.sum(a)?;
                let s = g.scale(s, 0.1)?;
                g.add(kl, s)
            },
            vec![
                Tensor::randn([3, 4], 1.0, &mut rng),
                Tensor::randn([3, 4], 1.0, &mut rng),
            ],
        );
    }
}
