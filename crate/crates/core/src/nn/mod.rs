//! Minimal differentiable tensor engine.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{subspace_softmax, Gradients, Graph, Segments, Var};
pub use layers::{dropout, Activation, BatchNorm, LayerNorm, Linear, Mlp};
pub use optim::{cosine_lr, Sgd};
pub use params::{Ctx, Mode, ParamBuilder, ParamId, ParamStore, Parameter, Probe};
pub use tensor::{softmax_in_place, softmax_rows, Scalar, Tensor};

#[cfg(test)]
mod op_grad_tests {
    //! Every graph operation against central differences in f64.

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Max relative error of d(sum(w * f(inputs)))/d(inputs).
    fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |inputs: &[Tensor<f64>], weights: Option<&[f64]>| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
            let out = f(&mut g, &vars);
            (g, vars, out, weights.map(|w| w.to_vec()))
        };
        let (g0, _, out0, _) = eval(&inputs, None);
        let weights: Vec<f64> = (0..g0.value(out0).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |inputs: &[Tensor<f64>]| {
            let (mut g, _, out, _) = eval(inputs, None);
            let l = g.weighted_sum(out, weights.clone()).unwrap();
            g.value(l).data()[0]
        };
        let (mut g, vars, out, _) = eval(&inputs, None);
        let l = g.weighted_sum(out, weights.clone()).unwrap();
        let grads = g.backward(l);
        let mut worst: f64 = 0.0;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
            let mut scale: f64 = 1e-6;
            let mut err: f64 = 0.0;
            for i in 0..inputs[k].len() {
                let mut p = inputs.clone();
                p[k].data_mut()[i] += 1e-3;
                let mut m = inputs.clone();
                m[k].data_mut()[i] -= 1e-3;
                let num = (loss(&p) - loss(&m)) / 2e-3;
                let a = analytic.data()[i];
                scale = scale.max(a.abs()).max(num.abs());
                err = err.max((a - num).abs());
            }
            worst = worst.max(err / scale);
        }
        worst
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn linear_random_4x5_to_3() {
        let mut r = rng();
        let e = check(
            vec![random(&mut r, &[4, 5]), random(&mut r, &[5, 3]), random(&mut r, &[3])],
            |g, v| {
                let y = g.matmul(v[0], v[1]).unwrap();
                g.add_bias(y, v[2]).unwrap()
            },
        );
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn elementwise_ops() {
        let mut r = rng();
        let a = random(&mut r, &[3, 4]);
        let b = random(&mut r, &[3, 4]);
        assert!(check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap()) < 1e-6);
        assert!(check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap()) < 1e-6);
        assert!(check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap()) < 1e-6);
        assert!(check(vec![a.clone()], |g, v| g.scale(v[0], -1.5)) < 1e-6);
        assert!(check(vec![a.clone()], |g, v| g.sigmoid(v[0])) < 1e-4);
        assert!(check(vec![a.clone()], |g, v| g.tanh(v[0])) < 1e-4);
        assert!(check(vec![a.clone()], |g, v| g.gelu(v[0])) < 1e-4);
        // keep entries away from the kink
        let shifted = Tensor::new(
            a.shape().to_vec(),
            a.data().iter().map(|&x| if x.abs() < 0.05 { x + 0.2 } else { x }).collect(),
        )
        .unwrap();
        assert!(check(vec![shifted], |g, v| g.relu(v[0])) < 1e-6);
    }

    #[test]
    fn normalization_ops() {
        let mut r = rng();
        let x = random(&mut r, &[6, 3]);
        let gamma = random(&mut r, &[3]);
        let beta = random(&mut r, &[3]);
        let e = check(vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
            g.batch_norm(v[0], v[1], v[2], None, 1e-5).unwrap().0
        });
        assert!(e < 1e-4, "batch norm train {e}");
        let (m, s) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
        let e = check(vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
            g.batch_norm(v[0], v[1], v[2], Some((&m, &s)), 1e-5).unwrap().0
        });
        assert!(e < 1e-4, "batch norm eval {e}");
        let e = check(vec![x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
        assert!(e < 1e-4, "layer norm {e}");
    }

    #[test]
    fn structural_ops() {
        let mut r = rng();
        let x = random(&mut r, &[5, 4]);
        let y = random(&mut r, &[5, 2]);
        assert!(check(vec![x.clone()], |g, v| g.gather(v[0], vec![4, 0, 0, 2]).unwrap()) < 1e-6);
        assert!(check(vec![x.clone(), y.clone()], |g, v| g.concat_cols(&[v[0], v[1]]).unwrap()) < 1e-6);
        let z = random(&mut r, &[2, 4]);
        assert!(check(vec![x.clone(), z], |g, v| g.concat_rows(&[v[0], v[1]]).unwrap()) < 1e-6);
        assert!(check(vec![x.clone()], |g, v| g.slice_cols(v[0], 1..3).unwrap()) < 1e-6);
        let segs: Segments = vec![0..2, 2..5];
        assert!(check(vec![x.clone()], |g, v| g.segment_max(v[0], &segs).unwrap()) < 1e-6);
        assert!(check(vec![x], |g, v| g.segment_mean(v[0], &segs).unwrap()) < 1e-6);
    }

    #[test]
    fn neighbor_ops() {
        let mut r = rng();
        let (n, k, d) = (3, 6, 4);
        let f = random(&mut r, &[n * k, d]);
        let w = random(&mut r, &[n * k, d]);
        let e = check(vec![f.clone(), w], |g, v| {
            g.neighbor_attention(v[0], v[1], k, &[2, 4, 6]).unwrap()
        });
        assert!(e < 1e-4, "{e}");
        assert!(check(vec![f], |g, v| g.neighbor_max(v[0], k, &[3, 6]).unwrap()) < 1e-6);
    }

    #[test]
    fn attention_with_bias_and_heads() {
        let mut r = rng();
        let segs: Segments = vec![0..3, 3..7];
        let q = random(&mut r, &[7, 4]);
        let kk = random(&mut r, &[7, 4]);
        let v = random(&mut r, &[7, 6]);
        let b = random(&mut r, &[9 + 16, 1]);
        let e = check(vec![q.clone(), kk.clone(), v.clone(), b], |g, x| {
            g.attention(x[0], x[1], x[2], Some(x[3]), &segs, 2, 0.7).unwrap()
        });
        assert!(e < 1e-4, "{e}");
        let e = check(vec![q, kk, v], |g, x| {
            g.attention(x[0], x[1], x[2], None, &segs, 1, 0.5).unwrap()
        });
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn cross_entropy_gradient_and_values() {
        let mut r = rng();
        let logits = random(&mut r, &[5, 4]);
        let labels = [0, 3, 1, 1, 2];
        assert!(check(vec![logits], |g, v| g.cross_entropy(v[0], &labels).unwrap()) < 1e-4);

        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        let l = g.cross_entropy(x, &[1, 3]).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
        let x = g.constant(Tensor::matrix(1, 3, vec![50.0, 0.0, 0.0]));
        let l = g.cross_entropy(x, &[0]).unwrap();
        assert!(g.value(l).data()[0] < 1e-20);
        assert!(matches!(
            g.cross_entropy(x, &[3]),
            Err(crate::Error::Label { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn corrupted_gradient_fails_checker() {
        let mut store = ParamStore::<f64>::new();
        let lin = {
            let mut b = ParamBuilder::new(&mut store, 3);
            Linear::new(&mut b, "l", 5, 3, true).unwrap()
        };
        let x = random(&mut rng(), &[4, 5]);
        let loss = |s: &mut ParamStore<f64>, back: bool| {
            let mut ctx = Ctx::new(s, Mode::Eval, 0);
            let xv = ctx.constant(x.clone());
            let y = lin.forward(&mut ctx, xv)?;
            let l = ctx.graph.cross_entropy(y, &[0, 1, 2, 0])?;
            Ok(ctx.probe(l, back))
        };
        let ok = grad_check(&mut store, &GradCheckOptions::with_tol(1e-4), loss).unwrap();
        assert!(ok.passed(), "{ok}");
        let opts = GradCheckOptions {
            corrupt_scale: Some(2.0),
            ..GradCheckOptions::with_tol(1e-4)
        };
        let bad = grad_check(&mut store, &opts, loss).unwrap();
        assert!(!bad.passed());
        assert!(bad.max_rel_error() > 0.4);
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(1.0), true).unwrap();
        let r = grad_check(&mut store, &GradCheckOptions::with_tol(1e-4), |_, _| Ok(Probe::smooth(f64::NAN)));
        assert!(matches!(r, Err(crate::Error::Numeric(_))));
    }
}
