//! Minimal dense linear algebra with reverse-mode differentiation, batch
//! normalization and Adam — the substrate the network and loss modules
//! build on.

pub mod adam;
pub mod batchnorm;
pub mod tape;
pub mod tensor;

pub use adam::{AdamParams, AdamState};
pub use batchnorm::{BatchNormState, Mode};
pub use tape::{argmax, BatchStats, Gradients, Tape, Var, EPS_NORM};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite differences of `f` at `x0`, step `h`.
    fn fd_gradient(f: impl Fn(&Tensor) -> f64, x0: &Tensor, h: f64) -> Tensor {
        let mut g = Tensor::zeros(x0.shape().to_vec());
        for i in 0..x0.numel() {
            let mut hi = x0.clone();
            hi.data_mut()[i] += h;
            let mut lo = x0.clone();
            lo.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&hi) - f(&lo)) / (2.0 * h);
        }
        g
    }

    fn assert_close(analytic: &Tensor, fd: &Tensor, tol: f64) {
        for (i, (a, b)) in analytic.data().iter().zip(fd.data()).enumerate() {
            let denom = a.abs().max(b.abs()).max(1e-2);
            assert!(
                (a - b).abs() / denom < tol,
                "coordinate {i}: analytic {a} vs fd {b}"
            );
        }
    }

    /// Runs the finite-difference oracle for a scalar function of one leaf.
    fn check_grad(build: impl Fn(&mut Tape, Var) -> Var, x0: &Tensor) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss).unwrap();
        let fd = fd_gradient(
            |t| {
                let mut tape = Tape::new();
                let x = tape.leaf(t.clone());
                let loss = build(&mut tape, x);
                tape.value(loss).item()
            },
            x0,
            1e-3,
        );
        assert_close(&grads.get(x), &fd, 1e-4);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        let z = tape.softmax_blocks(x, 1).unwrap();
        for v in tape.value(z).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, vec![7, 12]));
        let z = tape.softmax_blocks(x, 3).unwrap();
        let zv = tape.value(z);
        for r in 0..7 {
            for m in 0..3 {
                let s: f64 = zv.row(r)[m * 4..(m + 1) * 4].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(zv.row(r)[m * 4..(m + 1) * 4].iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let y = tape.l2_normalize_blocks(x, 1).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15);
        assert!((v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_zero_vector_takes_guard_path() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 4]));
        let y = tape.l2_normalize_blocks(x, 2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn simple_quadratic_gradient() {
        // loss = ||p||^2 via row_norms then square is awkward; use sum of p·p
        // through linear with itself is unavailable, so: ||p|| then relu-free
        // square via log? Use: loss = sum((p - 0)^2) is not an op; instead
        // check the documented example with row_norms: d||p|| = p/||p||,
        // and with mean/sum compositions.
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let n = tape.row_norms(p).unwrap();
        let loss = tape.sum(n);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(p);
        let norm = 5.0_f64.sqrt();
        assert!((g.data()[0] - 1.0 / norm).abs() < 1e-12);
        assert!((g.data()[1] - 2.0 / norm).abs() < 1e-12);
    }

    #[test]
    fn loss_independent_of_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let q = tape.leaf(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let n = tape.row_norms(q).unwrap();
        let loss = tape.sum(n);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.is_zero(p));
        assert!(!grads.is_zero(q));
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached_loss() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let n = tape.row_norms(p).unwrap();
        assert!(tape.backward(n).is_err());

        let mut tape = Tape::new();
        let c = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let n = tape.row_norms(c).unwrap();
        let loss = tape.sum(n);
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn fd_check_linear_bias_relu_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_tensor(&mut rng, vec![4, 3]);
        let w0 = rand_tensor(&mut rng, vec![5, 3]);
        let b0 = rand_tensor(&mut rng, vec![5]);
        // gradient w.r.t. w
        let x0c = x0.clone();
        let b0c = b0.clone();
        check_grad(
            move |tape, w| {
                let x = tape.constant(x0c.clone());
                let b = tape.constant(b0c.clone());
                let h = tape.linear(x, w).unwrap();
                let h = tape.add_bias(h, b).unwrap();
                let h = tape.relu(h);
                let n = tape.row_norms(h).unwrap();
                tape.mean(n)
            },
            &w0,
        );
        // gradient w.r.t. bias
        let x0c = x0.clone();
        let w0c = w0.clone();
        check_grad(
            move |tape, b| {
                let x = tape.constant(x0c.clone());
                let w = tape.constant(w0c.clone());
                let h = tape.linear(x, w).unwrap();
                let h = tape.add_bias(h, b).unwrap();
                let h = tape.relu(h);
                let n = tape.row_norms(h).unwrap();
                tape.mean(n)
            },
            &b0,
        );
    }

    #[test]
    fn fd_check_softmax_normalize_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x0 = rand_tensor(&mut rng, vec![3, 8]);
        let target = rand_tensor(&mut rng, vec![3, 8]);
        let tc = target.clone();
        check_grad(
            move |tape, x| {
                let y = tape.l2_normalize_blocks(x, 2).unwrap();
                let z = tape.softmax_blocks(y, 2).unwrap();
                let t = tape.constant(tc.clone());
                let d = tape.sub(z, t).unwrap();
                let n = tape.row_norms(d).unwrap();
                tape.sum(n)
            },
            &x0,
        );
    }

    #[test]
    fn fd_check_batch_norm_train_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0 = rand_tensor(&mut rng, vec![8, 4]);
        let gamma0 = rand_tensor(&mut rng, vec![4]);
        let beta0 = rand_tensor(&mut rng, vec![4]);
        let target = rand_tensor(&mut rng, vec![8, 4]);

        let build = |tape: &mut Tape, x: Var, gamma: Var, beta: Var, target: &Tensor| {
            let (h, _) = tape
                .batch_norm(x, gamma, beta, &[0.0; 4], &[1.0; 4], 1e-5, true)
                .unwrap();
            let t = tape.constant(target.clone());
            let d = tape.sub(h, t).unwrap();
            let n = tape.row_norms(d).unwrap();
            tape.sum(n)
        };

        // w.r.t. x
        let (g0, b0, t0) = (gamma0.clone(), beta0.clone(), target.clone());
        check_grad(
            move |tape, x| {
                let gamma = tape.constant(g0.clone());
                let beta = tape.constant(b0.clone());
                build(tape, x, gamma, beta, &t0)
            },
            &x0,
        );
        // w.r.t. gamma
        let (x0c, b0c, t0) = (x0.clone(), beta0.clone(), target.clone());
        check_grad(
            move |tape, gamma| {
                let x = tape.constant(x0c.clone());
                let beta = tape.constant(b0c.clone());
                build(tape, x, gamma, beta, &t0)
            },
            &gamma0,
        );
    }

    #[test]
    fn fd_check_select_concat_slice_log_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x0 = rand_tensor(&mut rng, vec![5, 6]);
        check_grad(
            |tape, x| {
                let parts = tape.split_cols(x, 3).unwrap();
                let joined = tape.concat_cols(&parts).unwrap();
                let sel = tape.select_rows(joined, &[0, 2, 2, 4]).unwrap();
                let n = tape.row_norms(sel).unwrap();
                let n = tape.clamp_min(n, 1e-10);
                let l = tape.log(n);
                tape.sum(l)
            },
            &x0,
        );
    }

    #[test]
    fn batch_norm_train_mode_standardizes_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let b = 32;
        let c = 6;
        let mut data = Vec::with_capacity(b * c);
        for _ in 0..b * c {
            data.push(rng.gen_range(-3.0..5.0));
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![b, c], data).unwrap());
        let gamma = tape.constant(Tensor::new(vec![c], vec![1.0; c]).unwrap());
        let beta = tape.constant(Tensor::zeros(vec![c]));
        let (h, stats) = tape
            .batch_norm(x, gamma, beta, &[0.0; 6], &[1.0; 6], 1e-5, true)
            .unwrap();
        let hv = tape.value(h);
        for j in 0..c {
            let mut mean = 0.0;
            for r in 0..b {
                mean += hv.row(r)[j];
            }
            mean /= b as f64;
            let mut var = 0.0;
            for r in 0..b {
                var += (hv.row(r)[j] - mean).powi(2);
            }
            var /= b as f64;
            assert!(mean.abs() < 1e-6, "feature {j} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "feature {j} var {var}");
        }
        assert!(stats.var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn ste_argmax_forward_and_ties() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![1, 3], vec![0.1, 0.7, 0.2]).unwrap());
        let b = tape.ste_argmax_blocks(z, 1).unwrap();
        assert_eq!(tape.value(b).data(), &[0.0, 1.0, 0.0]);

        let mut tape = Tape::new();
        let z = tape.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        let b = tape.ste_argmax_blocks(z, 1).unwrap();
        assert_eq!(tape.value(b).data(), &[1.0, 0.0]);
    }

    #[test]
    fn ste_backward_is_identity_passthrough() {
        // downstream loss ||onehot - target||^2 realized as row_norms of the
        // difference; the gradient arriving at z equals the gradient w.r.t.
        // the one-hot output.
        let z0 = Tensor::new(vec![1, 3], vec![0.1, 0.7, 0.2]).unwrap();
        let target = Tensor::new(vec![1, 3], vec![0.3, 0.1, 0.4]).unwrap();

        let mut tape = Tape::new();
        let z = tape.leaf(z0.clone());
        let b = tape.ste_argmax_blocks(z, 1).unwrap();
        let t = tape.constant(target.clone());
        let d = tape.sub(b, t).unwrap();
        let n = tape.row_norms(d).unwrap();
        let loss = tape.sum(n);
        let grads = tape.backward(loss).unwrap();
        let gz = grads.get(z);
        assert!(!grads.is_zero(z));

        // same loss with the one-hot as a leaf: its gradient must equal gz
        let mut tape = Tape::new();
        let onehot = tape.leaf(Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        let t = tape.constant(target);
        let d = tape.sub(onehot, t).unwrap();
        let n = tape.row_norms(d).unwrap();
        let loss = tape.sum(n);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(gz, grads.get(onehot));
    }

    #[test]
    fn tape_replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x0 = rand_tensor(&mut rng, vec![6, 8]);
        let w0 = rand_tensor(&mut rng, vec![4, 8]);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(x0.clone());
            let w = tape.leaf(w0.clone());
            let h = tape.linear(x, w).unwrap();
            let z = tape.softmax_blocks(h, 2).unwrap();
            let n = tape.row_norms(z).unwrap();
            let loss = tape.mean(n);
            let grads = tape.backward(loss).unwrap();
            (tape.value(loss).item(), grads.get(w))
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }
}
