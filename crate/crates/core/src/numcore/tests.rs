use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Evaluates `sum(build(params) * weights)` and its gradient w.r.t. the
/// flattened parameters.
fn eval(shapes: &[Vec<usize>], theta: &[f64], weights: &[f64], build: &Build) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let mut vars = Vec::new();
    let mut offset = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        vars.push(g.param(Tensor::new(s.clone(), theta[offset..offset + n].to_vec()).unwrap()));
        offset += n;
    }
    let out = build(&mut g, &vars).unwrap();
    let w = g.constant(Tensor::new(g.shape(out).to_vec(), weights.to_vec()).unwrap());
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    let grads = vars
        .iter()
        .flat_map(|&v| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect();
    (g.value(loss).item(), grads)
}

/// Autodiff vs central differences at h = 1e-5 on random inputs.
fn check(shapes: &[Vec<usize>], seed: u64, build: &Build) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let theta: Vec<f64> = (0..total).map(|_| rng.random_range(-1.5..1.5)).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = shapes.iter().map(|s| g.param(Tensor::zeros(s))).collect();
    let out_shape = build(&mut g, &vars).unwrap();
    let out_numel = g.value(out_shape).numel();
    let weights: Vec<f64> = (0..out_numel).map(|_| rng.random_range(-1.0..1.0)).collect();

    let (_, analytic) = eval(shapes, &theta, &weights, build);
    let coords = sample_coords(total, 200, seed);
    let report = finite_diff_check(|t| eval(shapes, t, &weights, build).0, &theta, &analytic, 1e-5, &coords);
    report.max_rel_error
}

fn assert_grad_ok(name: &str, shapes: &[Vec<usize>], build: &Build) {
    for seed in 0..3 {
        let err = check(shapes, seed, build);
        assert!(err < 1e-4, "{name} seed {seed}: max relative error {err:e}");
    }
}

#[test]
fn grad_matmul_and_transpose() {
    assert_grad_ok("matmul", &[vec![3, 4], vec![4, 5]], &|g, v| g.matmul(v[0], v[1]));
    assert_grad_ok("transpose", &[vec![3, 4]], &|g, v| g.transpose(v[0]));
}

#[test]
fn grad_elementwise() {
    assert_grad_ok("add", &[vec![4, 5], vec![4, 5]], &|g, v| g.add(v[0], v[1]));
    assert_grad_ok("mul", &[vec![4, 5], vec![4, 5]], &|g, v| g.mul(v[0], v[1]));
    assert_grad_ok("add_bias", &[vec![4, 5], vec![5]], &|g, v| g.add_bias(v[0], v[1]));
    assert_grad_ok("scale", &[vec![12]], &|g, v| Ok(g.scale(v[0], -2.5)));
    assert_grad_ok("gelu", &[vec![30]], &|g, v| Ok(g.gelu(v[0])));
}

#[test]
fn grad_layernorm() {
    assert_grad_ok("layernorm", &[vec![4, 6], vec![6], vec![6]], &|g, v| {
        g.layernorm(v[0], v[1], v[2], LAYERNORM_EPS)
    });
}

#[test]
fn grad_softmax_any_axis() {
    for axis in 0..3 {
        assert_grad_ok("softmax", &[vec![2, 3, 4]], &move |g, v| g.softmax(v[0], axis));
    }
}

#[test]
fn grad_cross_entropy() {
    let targets = [Some(2), None, Some(0), Some(4)];
    assert_grad_ok("cross_entropy", &[vec![4, 5]], &move |g, v| {
        g.cross_entropy(v[0], &targets)
    });
}

#[test]
fn grad_lookup_gather_concat() {
    assert_grad_ok("embed_lookup", &[vec![5, 3]], &|g, v| {
        g.embed_lookup(v[0], &[4, 0, 4, 2])
    });
    assert_grad_ok("gather", &[vec![3, 4]], &|g, v| {
        g.gather(v[0], &[0, 5, 5, 11, 3, 7], vec![2, 3])
    });
    assert_grad_ok("concat", &[vec![2, 3], vec![4, 3]], &|g, v| g.concat(&[v[0], v[1]]));
}

#[test]
fn grad_reductions() {
    assert_grad_ok("sum", &[vec![3, 5]], &|g, v| Ok(g.sum(v[0])));
    for axis in 0..3 {
        assert_grad_ok("mean", &[vec![2, 3, 4]], &move |g, v| g.mean(v[0], axis));
    }
}

#[test]
fn grad_attention() {
    let mask = [true, true, true, false, true, true, false, false];
    assert_grad_ok("attention", &[vec![8, 6], vec![8, 6], vec![8, 6]], &move |g, v| {
        g.attention(v[0], v[1], v[2], &mask, 2, 4, 2)
    });
}

#[test]
fn attention_rows_normalize_over_valid_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let q = g.param(Tensor::randn(&[10, 4], 1.0, &mut rng));
    let k = g.param(Tensor::randn(&[10, 4], 1.0, &mut rng));
    let v = g.param(Tensor::randn(&[10, 4], 1.0, &mut rng));
    let mask = [true, true, true, false, false, true, true, true, true, false];
    let out = g.attention(q, k, v, &mask, 2, 5, 2).unwrap();
    let probs = g.attention_probs(out).unwrap();
    for b in 0..2 {
        for h in 0..2 {
            for i in 0..5 {
                let row = &probs[((b * 2 + h) * 5 + i) * 5..][..5];
                if mask[b * 5 + i] {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                    for j in 0..5 {
                        if !mask[b * 5 + j] {
                            assert_eq!(row[j], 0.0);
                        }
                    }
                } else {
                    assert!(row.iter().all(|&p| p == 0.0));
                    assert!(g.value(out).row(b * 5 + i).iter().all(|&x| x == 0.0));
                }
            }
        }
    }
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), [2, 1]);
    assert_eq!(g.value(c).data(), [3.0, 7.0]);

    let eye = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let same = g.matmul(eye, a).unwrap();
    assert_eq!(g.value(same).data(), g.value(a).data());

    let x = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.matmul(x, x).is_err());
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let sa = g.softmax(a, 0).unwrap();
    assert_eq!(g.value(sa).data(), [0.5, 0.5]);

    let b = g.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
    let sb = g.softmax(b, 0).unwrap();
    assert!(g.value(sb).is_finite());
    assert!((g.value(sb).data()[0] - 1.0).abs() < 1e-15);
    assert!(g.value(sb).data()[1] < 1e-300);

    let c = g.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let sc = g.softmax(c, 0).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
    for (i, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
        assert!((g.value(sc).data()[i] - x.exp() / z).abs() < 1e-12);
    }
    assert!(g.softmax(c, 1).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let uniform = g.constant(Tensor::zeros(&[3, 8]));
    let l = g.cross_entropy(uniform, &[Some(1), Some(7), None]).unwrap();
    assert!((g.value(l).item() - 8f64.ln()).abs() < 1e-12);

    let mut peaked = Tensor::zeros(&[1, 8]);
    peaked.data_mut()[3] = 50.0;
    let p = g.constant(peaked);
    let l = g.cross_entropy(p, &[Some(3)]).unwrap();
    assert!(g.value(l).item() < 1e-15);

    assert!(g.cross_entropy(p, &[Some(8)]).is_err());
    assert!(g.cross_entropy(p, &[Some(1), None]).is_err());

    // Random 3x5 against the direct formula.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = Tensor::randn(&[3, 5], 2.0, &mut rng);
    let targets = [Some(4), Some(0), Some(2)];
    let mut expected = 0.0;
    for (r, t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        expected -= (row[t.unwrap()].exp() / z).ln();
    }
    expected /= 3.0;
    let lv = g.constant(logits);
    let l = g.cross_entropy(lv, &targets).unwrap();
    assert!((g.value(l).item() - expected).abs() < 1e-12);
}

#[test]
fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[2, 4], 0.3));
    let l = g.cross_entropy(x, &[None, None]).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    g.backward(l).unwrap();
    assert!(g.grad(x).is_none_or(|gr| gr.iter().all(|&v| v == 0.0)));
}

#[test]
fn layernorm_constant_row() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2, 4], 3.0));
    let gain = g.constant(Tensor::full(&[4], 2.0));
    let bias = g.constant(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
    let y = g.layernorm(x, gain, bias, LAYERNORM_EPS).unwrap();
    assert_eq!(g.value(y).row(0), [0.1, 0.2, 0.3, 0.4]);
}

#[test]
fn gelu_values() {
    assert_eq!(gelu_scalar(0.0), 0.0);
    assert!((gelu_scalar(1.0) - 0.841_191_990_607_348_3).abs() < 1e-12);
    assert!(gelu_scalar(-10.0).abs() < 1e-12);
}

#[test]
fn mean_matches_sum_over_len() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let mut g = Graph::new();
    let x = g.constant(t.clone());
    let m0 = g.mean(x, 0).unwrap();
    let m1 = g.mean(x, 1).unwrap();
    assert_eq!(g.shape(m0), [4]);
    assert_eq!(g.shape(m1), [3]);
    for j in 0..4 {
        let s: f64 = (0..3).map(|i| t.data()[i * 4 + j]).sum();
        assert!((g.value(m0).data()[j] - s / 3.0).abs() < 1e-15);
    }
    for i in 0..3 {
        let s: f64 = t.row(i).iter().sum();
        assert!((g.value(m1).data()[i] - s / 4.0).abs() < 1e-15);
    }
}

#[test]
fn backward_basics() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), [1.0; 4]);

    let xx = g.mul(x, x).unwrap();
    let q = g.sum(xx);
    g.backward(q).unwrap();
    assert_eq!(g.grad(x).unwrap(), [2.0, -4.0, 6.0, 1.0]);

    assert!(g.backward(xx).is_err());
}

#[test]
fn shared_input_accumulates() {
    // f = sum(x*x + x) -> 2x + 1
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let xx = g.mul(x, x).unwrap();
    let y = g.add(xx, x).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap(), [3.0, 5.0, 7.0]);
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[2, 2], 1.0));
    let p = g.param(Tensor::full(&[2, 2], 2.0));
    let m = g.matmul(c, p).unwrap();
    let l = g.sum(m);
    g.backward(l).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(p).unwrap(), [2.0; 4]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-700.0f64..700.0, 1..40)) {
        let n = values.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, n], values).unwrap());
        let y = g.softmax(x, 1).unwrap();
        let total: f64 = g.value(y).data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        // grad(a f + b h) == a grad f + b grad h with f = sum(gelu(W x)), h = sum(softmax(W x))
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let x = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let grad_of = |ca: f64, cb: f64| {
            let mut g = Graph::new();
            let wv = g.param(w.clone());
            let xv = g.constant(x.clone());
            let z = g.matmul(wv, xv).unwrap();
            let f = g.gelu(z);
            let f = g.sum(f);
            let h = g.softmax(z, 0).unwrap();
            let hw = g.constant(Tensor::new(vec![4, 2], (0..8).map(|i| i as f64).collect()).unwrap());
            let h = g.mul(h, hw).unwrap();
            let h = g.sum(h);
            let fa = g.scale(f, ca);
            let hb = g.scale(h, cb);
            let total = g.add(fa, hb).unwrap();
            g.backward(total).unwrap();
            g.grad(wv).unwrap().to_vec()
        };
        let combined = grad_of(a, b);
        let gf = grad_of(1.0, 0.0);
        let gh = grad_of(0.0, 1.0);
        for i in 0..combined.len() {
            prop_assert!((combined[i] - (a * gf[i] + b * gh[i])).abs() < 1e-12);
        }
    }
}
