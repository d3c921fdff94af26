//! Minimal differentiable dense-array engine.
//!
//! [`Array`] is a row-major buffer generic over [`Real`] (`f32` for
//! training, `f64` for gradient verification). [`Tape`] records the ops a
//! forward pass performs so [`Tape::backward`] can accumulate exact
//! reverse-mode gradients; [`finite_difference_gradient`] is the
//! independent oracle used to check them.

mod array;
mod gradcheck;
mod tape;

pub use array::{Array, Real};
pub use gradcheck::{finite_difference_gradient, relative_error, FD_EPS};
pub use tape::{Node, Tape, Var, COSINE_EPS};

/// Epsilon inside every RMS normalization.
pub const NORM_EPS: f64 = 1e-6;

#[cfg(test)]
mod op_gradients {
    //! Every tape op against central differences in 64-bit.

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
        let n = shape.iter().product();
        Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Check `d/dθ sum(w ⊙ op(θ, fixed...))` for a random weighting `w`.
    fn check(
        trials: usize,
        shapes: &[&[usize]],
        op: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(0xfd);
        for _ in 0..trials {
            let inputs: Vec<Array<f64>> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            let out_shape = {
                let mut t = Tape::new();
                let vars: Vec<Var> = inputs.iter().map(|a| t.leaf(a.clone(), true)).collect();
                let y = op(&mut t, &vars);
                t.value(y).shape().to_vec()
            };
            let weights = random(&mut rng, &out_shape);
            let eval = |t: &mut Tape<f64>, vars: &[Var]| {
                let y = op(t, vars);
                let w = t.constant(weights.clone());
                let yw = t.mul(y, w).unwrap();
                t.sum(yw)
            };
            for k in 0..inputs.len() {
                let mut t = Tape::new();
                let vars: Vec<Var> = inputs.iter().map(|a| t.leaf(a.clone(), true)).collect();
                let loss = eval(&mut t, &vars);
                t.backward(loss).unwrap();
                let analytic = t.grad(vars[k]).unwrap().clone();
                let numeric = finite_difference_gradient(
                    |theta| {
                        let mut t = Tape::new();
                        let vars: Vec<Var> = inputs
                            .iter()
                            .enumerate()
                            .map(|(j, a)| t.leaf(if j == k { theta.clone() } else { a.clone() }, true))
                            .collect();
                        let l = eval(&mut t, &vars);
                        t.scalar(l)
                    },
                    &inputs[k],
                    FD_EPS,
                );
                let err = relative_error(analytic.data(), numeric.data());
                assert!(err < 1e-4, "input {k}: rel err {err}");
            }
        }
    }

    #[test]
    fn matmul() {
        check(100, &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]).unwrap());
    }

    #[test]
    fn matmul_nt() {
        check(20, &[&[3, 4], &[5, 4]], |t, v| t.matmul_nt(v[0], v[1]).unwrap());
    }

    #[test]
    fn elementwise() {
        check(20, &[&[2, 3], &[2, 3]], |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let p = t.mul(s, v[0]).unwrap();
            let q = t.scale(p, 1.7);
            t.silu(q)
        });
        check(20, &[&[3, 4], &[4]], |t, v| t.add_row(v[0], v[1]).unwrap());
    }

    #[test]
    fn rms_norm() {
        check(100, &[&[3, 6], &[6]], |t, v| t.rms_norm(v[0], v[1], NORM_EPS).unwrap());
    }

    #[test]
    fn softmaxes() {
        check(50, &[&[2, 5]], |t, v| t.softmax(v[0]));
        check(50, &[&[4, 4]], |t, v| t.causal_softmax(v[0]).unwrap());
    }

    #[test]
    fn causal_attention() {
        check(50, &[&[5, 8], &[5, 8], &[5, 8]], |t, v| t.causal_attention(v[0], v[1], v[2], 2).unwrap());
        check(20, &[&[1, 4], &[1, 4], &[1, 4]], |t, v| t.causal_attention(v[0], v[1], v[2], 1).unwrap());
    }

    #[test]
    fn fused_attention_matches_composed_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::<f64>::new();
        let q = t.leaf(random(&mut rng, &[6, 8]), false);
        let k = t.leaf(random(&mut rng, &[6, 8]), false);
        let v = t.leaf(random(&mut rng, &[6, 8]), false);
        let fused = t.causal_attention(q, k, v, 2).unwrap();
        let mut heads = Vec::new();
        for h in 0..2 {
            let qh = t.col_slice(q, h * 4, 4).unwrap();
            let kh = t.col_slice(k, h * 4, 4).unwrap();
            let vh = t.col_slice(v, h * 4, 4).unwrap();
            let s = t.matmul_nt(qh, kh).unwrap();
            let s = t.scale(s, 0.5);
            let a = t.causal_softmax(s).unwrap();
            heads.push(t.matmul(a, vh).unwrap());
        }
        let composed = t.concat_cols(&heads).unwrap();
        for (a, b) in t.value(fused).data().iter().zip(t.value(composed).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = t.attention_weights(fused).unwrap();
        assert_eq!(w.len(), 2);
        for i in 0..6 {
            let row = w[1].row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[i + 1..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn rope() {
        check(20, &[&[5, 8]], |t, v| t.rope(v[0], 2, 10.0).unwrap());
    }

    #[test]
    fn slicing_and_routing() {
        check(10, &[&[3, 6]], |t, v| t.col_slice(v[0], 2, 3).unwrap());
        check(10, &[&[3, 2], &[3, 3]], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap());
        check(10, &[&[2, 3], &[1, 3]], |t, v| t.concat_rows(&[v[0], v[1]]).unwrap());
        check(10, &[&[4, 3]], |t, v| t.gather_rows(v[0], &[3, 0, 3]).unwrap());
        check(10, &[&[2, 3], &[1, 3]], |t, v| {
            t.scatter_rows(vec![(v[0], vec![2, 0]), (v[1], vec![1])], 3).unwrap()
        });
        check(10, &[&[36, 2]], |t, v| t.pool_tokens(v[0], 6, 3).unwrap());
    }

    #[test]
    fn reductions_and_losses() {
        check(10, &[&[2, 3]], |t, v| t.mean(v[0]));
        check(10, &[&[3, 5]], |t, v| t.cross_entropy(v[0], &[4, -1, 0]).unwrap());
    }

    #[test]
    fn cosine_align_against_fixed_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let target = random(&mut rng, &[4, 8]);
            check(1, &[&[4, 8]], |t, v| t.cosine_align(v[0], target.clone()).unwrap());
        }
    }
}
