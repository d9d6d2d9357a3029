use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specsep_core::tensor::gradcheck::{check_gradients, GradCheckOptions};
use specsep_core::tensor::{Graph, PoolMode, RmsProp, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng(seed))
}

/// Direct six-loop cross-correlation.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (bn, c, h, wd) = x.dims4("x").unwrap();
    let (co, _, kh, kw) = w.dims4("w").unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; bn * co * oh * ow];
    for n in 0..bn {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[o];
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((n * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * c + ci) * kh + i) * kw + j];
                            }
                        }
                    }
                    out[((n * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_naive_oracle() {
    for (seed, stride, pad, k) in [(1, 1, 0, 3), (2, 1, 1, 3), (3, 2, 1, 3), (4, 1, 0, 1), (5, 2, 0, 2), (6, 1, 2, 5)] {
        let x = rand_t(&[1, 3, 8, 8], seed);
        let w = rand_t(&[4, 3, k, k], seed + 100);
        let b = rand_t(&[4], seed + 200);
        let mut g = Graph::<f64>::new();
        let (xv, wv, bv) = (
            g.constant(x.clone()).unwrap(),
            g.constant(w.clone()).unwrap(),
            g.constant(b.clone()).unwrap(),
        );
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let oracle = naive_conv(&x, &w, b.data(), stride, pad);
        for (a, o) in g.value(y).data().iter().zip(&oracle) {
            assert!((a - o).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {o}");
        }
    }
}

#[test]
fn batch_norm_matches_two_pass_moments() {
    let x = rand_t(&[3, 2, 4, 5], 9);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone()).unwrap();
    let gamma = g.constant(Tensor::full([2], 1.0)).unwrap();
    let beta = g.constant(Tensor::zeros([2])).unwrap();
    let eps = 1e-5;
    let (y, stats) = g.batch_norm(xv, gamma, beta, eps).unwrap();
    for c in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|b| x.data()[(b * 2 + c) * 20..(b * 2 + c + 1) * 20].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((stats.mean[c] - mean).abs() < 1e-12);
        assert!((stats.var[c] - var).abs() < 1e-12);
        for b in 0..3 {
            for i in 0..20 {
                let idx = (b * 2 + c) * 20 + i;
                let expected = (x.data()[idx] - mean) / (var + eps).sqrt();
                assert!((g.value(y).data()[idx] - expected).abs() < 1e-12);
            }
        }
    }
}

fn assert_grad<F>(name: &str, inputs: &[Tensor<f64>], build: F)
where
    F: Fn(&mut Graph<f64>, &[specsep_core::Var]) -> specsep_core::Result<specsep_core::Var>,
{
    let report = check_gradients(inputs, GradCheckOptions::default(), build).unwrap();
    assert!(
        report.max_rel_error < 1e-4,
        "{name}: max relative error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn project(g: &mut Graph<f64>, y: specsep_core::Var, seed: u64) -> specsep_core::Result<specsep_core::Var> {
    let w = rand_t(g.shape(y), seed);
    let wv = g.constant(w)?;
    let prod = g.mul(y, wv)?;
    g.sum(prod)
}

#[test]
fn gradients_of_every_op_match_finite_differences() {
    for trial in 0..10u64 {
        let s = 1000 * trial;
        assert_grad(
            "conv2d",
            &[rand_t(&[2, 2, 5, 4], s), rand_t(&[3, 2, 3, 3], s + 1), rand_t(&[3], s + 2)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                project(g, y, s + 3)
            },
        );
        assert_grad(
            "conv2d strided",
            &[rand_t(&[1, 2, 6, 5], s + 4), rand_t(&[2, 2, 2, 2], s + 5)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], None, 2, 0)?;
                project(g, y, s + 6)
            },
        );
        assert_grad("relu", &[rand_t(&[2, 3, 4], s + 7)], |g, v| {
            let y = g.relu(v[0])?;
            project(g, y, s + 8)
        });
        assert_grad("max_pool", &[rand_t(&[2, 2, 4, 6], s + 9)], |g, v| {
            let y = g.pool2d(v[0], PoolMode::Max, 2, 2)?;
            project(g, y, s + 10)
        });
        assert_grad("avg_pool", &[rand_t(&[2, 2, 4, 6], s + 11)], |g, v| {
            let y = g.pool2d(v[0], PoolMode::Average, 2, 2)?;
            project(g, y, s + 12)
        });
        assert_grad(
            "batch_norm train",
            &[rand_t(&[2, 3, 3, 4], s + 13), rand_t(&[3], s + 14), rand_t(&[3], s + 15)],
            |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], 1e-5)?;
                project(g, y, s + 16)
            },
        );
        assert_grad(
            "batch_norm infer",
            &[rand_t(&[2, 3, 3, 4], s + 17), rand_t(&[3], s + 18), rand_t(&[3], s + 19)],
            |g, v| {
                let y = g.batch_norm_infer(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?;
                project(g, y, s + 20)
            },
        );
        assert_grad(
            "concat_channels",
            &[rand_t(&[2, 2, 3, 3], s + 21), rand_t(&[2, 1, 3, 3], s + 22)],
            |g, v| {
                let y = g.concat_channels(v[0], v[1])?;
                project(g, y, s + 23)
            },
        );
        assert_grad("concat height", &[rand_t(&[1, 2, 3, 2], s + 24), rand_t(&[1, 2, 4, 2], s + 25)], |g, v| {
            let y = g.concat(&[v[0], v[1]], 2)?;
            project(g, y, s + 26)
        });
        assert_grad("narrow", &[rand_t(&[1, 2, 7, 3], s + 27)], |g, v| {
            let y = g.narrow(v[0], 2, 2, 4)?;
            project(g, y, s + 28)
        });
        assert_grad("pad_reflect", &[rand_t(&[1, 2, 5, 3], s + 29)], |g, v| {
            let y = g.pad_reflect_end(v[0], 2)?;
            let y = g.pad_reflect_end(y, 3)?;
            project(g, y, s + 30)
        });
        assert_grad("upsample2d", &[rand_t(&[1, 2, 3, 2], s + 31)], |g, v| {
            let y = g.upsample2d(v[0], 2)?;
            project(g, y, s + 32)
        });
        assert_grad("add/sub/mul/scale", &[rand_t(&[3, 4], s + 33), rand_t(&[3, 4], s + 34)], |g, v| {
            let a = g.add(v[0], v[1])?;
            let b = g.sub(a, v[1])?;
            let m = g.mul(b, v[1])?;
            let y = g.scale(m, -1.7)?;
            project(g, y, s + 35)
        });
        assert_grad("squared_distance", &[rand_t(&[2, 5], s + 36), rand_t(&[2, 5], s + 37)], |g, v| {
            g.squared_distance(v[0], v[1], 0.3)
        });
        assert_grad("mean", &[rand_t(&[2, 5], s + 38)], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.mean(sq)
        });
        assert_grad("gram", &[rand_t(&[2, 3, 2, 3], s + 39)], |g, v| {
            let y = g.gram(v[0])?;
            project(g, y, s + 40)
        });
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut g = Graph::<f64>::new();
        let x = g.param(rand_t(&[2, 3, 8, 8], 1)).unwrap();
        let w = g.param(rand_t(&[4, 3, 3, 3], 2)).unwrap();
        let gm = g.param(Tensor::full([4], 1.0)).unwrap();
        let bt = g.param(Tensor::zeros([4])).unwrap();
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let (y, _) = g.batch_norm(y, gm, bt, 1e-5).unwrap();
        let y = g.relu(y).unwrap();
        let y = g.pool2d(y, PoolMode::Max, 2, 2).unwrap();
        let l = project(&mut g, y, 3).unwrap();
        g.backward(l).unwrap();
        (
            g.value(l).clone(),
            g.grad(x).unwrap().clone(),
            g.grad(w).unwrap().clone(),
        )
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data()[0].to_bits(), b.0.data()[0].to_bits());
    assert!(a.1.data().iter().zip(b.1.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(a.2.data().iter().zip(b.2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn linear_ops_conserve_gradient_mass() {
    let mut g = Graph::<f64>::new();
    let a = g.param(rand_t(&[1, 2, 3, 3], 5)).unwrap();
    let b = g.param(rand_t(&[1, 4, 3, 3], 6)).unwrap();
    let cat = g.concat_channels(a, b).unwrap();
    let w = g.constant(rand_t(&[1, 6, 3, 3], 7)).unwrap();
    let y = g.mul(cat, w).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    let total = g.grad(a).unwrap().sum() + g.grad(b).unwrap().sum();
    assert!((total - g.value(w).sum()).abs() < 1e-12);
}

proptest! {
    #[test]
    fn rmsprop_accumulators_nonnegative_and_step_bounded(
        grads in proptest::collection::vec(-1e3f64..1e3, 1..20),
        steps in 1usize..5,
    ) {
        let lr = 1e-3;
        let eps = 1e-8;
        let mut opt = RmsProp::<f64>::new(0.9, eps);
        let mut p = Tensor::zeros([grads.len()]);
        let g = Tensor::from_f64([grads.len()], &grads).unwrap();
        for _ in 0..steps {
            let before = p.clone();
            opt.step(lr, &mut [&mut p], &[&g]).unwrap();
            for ((a, b), gv) in p.data().iter().zip(before.data()).zip(&grads) {
                prop_assert!((a - b).abs() <= lr * gv.abs() / eps + 1e-15);
            }
            prop_assert!(opt.accumulators()[0].iter().all(|&a| a >= 0.0));
        }
    }
}

#[test]
fn fused_batch_norm_relu_matches_composition_and_differences() {
    let x = rand_t(&[2, 3, 3, 4], 77);
    let (gm, bt) = (rand_t(&[3], 78), rand_t(&[3], 79));
    let mut g = Graph::<f64>::new();
    let (xv, gv, bv) = (
        g.constant(x.clone()).unwrap(),
        g.constant(gm.clone()).unwrap(),
        g.constant(bt.clone()).unwrap(),
    );
    let (fused, _) = g.batch_norm_relu(xv, gv, bv, 1e-5).unwrap();
    let (plain, _) = g.batch_norm(xv, gv, bv, 1e-5).unwrap();
    let composed = g.relu(plain).unwrap();
    assert_eq!(g.value(fused), g.value(composed));

    for trial in 0..10u64 {
        let s = 500 + 10 * trial;
        assert_grad(
            "batch_norm_relu",
            &[rand_t(&[2, 3, 3, 4], s), rand_t(&[3], s + 1), rand_t(&[3], s + 2)],
            |g, v| {
                let (y, _) = g.batch_norm_relu(v[0], v[1], v[2], 1e-5)?;
                project(g, y, s + 3)
            },
        );
        assert_grad(
            "batch_norm_relu infer",
            &[rand_t(&[2, 3, 3, 4], s + 4), rand_t(&[3], s + 5), rand_t(&[3], s + 6)],
            |g, v| {
                let y = g.batch_norm_relu_infer(v[0], v[1], v[2], &[0.0, 0.1, -0.1], &[1.0, 0.5, 2.0], 1e-5)?;
                project(g, y, s + 7)
            },
        );
    }
}
