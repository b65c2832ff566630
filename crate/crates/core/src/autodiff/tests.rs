use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::GradChecker;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn eval1(x: Tensor<f64>, f: impl Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>) -> Tensor<f64> {
    let mut g = Graph::new();
    let id = g.constant(x);
    let out = f(&mut g, id).unwrap();
    g.value(out).clone()
}

#[test]
fn matmul_identity_and_annihilator() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let i = g.constant(Tensor::identity(2).unwrap());
    let c = g.matmul(a, i).unwrap();
    assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);

    let a = g.constant(t(&[1, 2], &[1., 2.]));
    let z = g.constant(t(&[2, 1], &[0., 0.]));
    let c = g.matmul(a, z).unwrap();
    assert_eq!(g.value(c).shape(), &[1, 1]);
    assert_eq!(g.value(c).data(), &[0.]);
}

#[test]
fn matmul_hand_expansion() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let b = g.constant(t(&[2, 1], &[5., 6.]));
    let c = g.matmul(a, b).unwrap();
    // 1*5 + 2*6, 3*5 + 4*6
    assert_eq!(g.value(c).data(), &[17., 39.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 3], &[0.; 6]));
    let b = g.constant(t(&[2, 2], &[0.; 4]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
}

#[test]
fn batched_matmul_matches_per_batch_products() {
    let a = random(&[3, 2, 4], 1);
    let b = random(&[3, 4, 5], 2);
    let mut g = Graph::new();
    let (ia, ib) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(ia, ib).unwrap();
    let c = g.value(c).clone();
    for k in 0..3 {
        for i in 0..2 {
            for j in 0..5 {
                let want: f64 = (0..4)
                    .map(|l| a.get(&[k, i, l]).unwrap() * b.get(&[k, l, j]).unwrap())
                    .sum();
                assert!((c.get(&[k, i, j]).unwrap() - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_examples() {
    let y = eval1(t(&[3], &[0., 0., 0.]), |g, x| g.softmax(x, -1));
    for v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let y = eval1(t(&[2], &[1000., 0.]), |g, x| g.softmax(x, 0));
    assert!(y.is_finite());
    assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1] < 1e-300);

    let y = eval1(t(&[2], &[1., 0.]), |g, x| g.softmax(x, -1));
    let e = std::f64::consts::E;
    assert!((y.data()[0] - e / (e + 1.0)).abs() < 1e-15);
    assert!((y.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    assert!((y.data()[0] - 0.73106).abs() < 1e-5);
}

#[test]
fn softmax_along_first_axis() {
    let y = eval1(t(&[2, 2], &[1., 5., 0., 5.]), |g, x| g.softmax(x, 0));
    let e = std::f64::consts::E;
    assert!((y.get(&[0, 0]).unwrap() - e / (e + 1.0)).abs() < 1e-15);
    assert!((y.get(&[0, 1]).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn elementwise_examples() {
    let y = eval1(t(&[3], &[-1., 0., 2.]), |g, x| g.relu(x));
    assert_eq!(y.data(), &[0., 0., 2.]);

    let y = eval1(Tensor::scalar(0.0), |g, x| g.sigmoid(x));
    assert_eq!(y.data(), &[0.5]);

    let mut g = Graph::new();
    let yv = g.constant(t(&[2, 2], &[1., 1., 1., 1.]));
    let beta = g.constant(t(&[2], &[2., 3.]));
    let out = g.mul(yv, beta).unwrap();
    assert_eq!(g.value(out).data(), &[2., 3., 2., 3.]);

    let bad = g.constant(t(&[3], &[1., 1., 1.]));
    assert!(matches!(g.add(yv, bad), Err(Error::Shape(_))));
}

#[test]
fn concat_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[1, 1], &[1.]));
    let b = g.constant(t(&[1, 1], &[2.]));
    let c = g.concat(&[a, b], -1).unwrap();
    assert_eq!(g.value(c).shape(), &[1, 2]);
    assert_eq!(g.value(c).data(), &[1., 2.]);

    let zeros: Vec<_> = (0..3).map(|_| g.constant(Tensor::zeros([4, 2]).unwrap())).collect();
    let c = g.concat(&zeros, -1).unwrap();
    assert_eq!(g.value(c), &Tensor::zeros([4, 6]).unwrap());

    let off = g.constant(t(&[2, 1], &[0., 0.]));
    assert!(g.concat(&[a, off], -1).is_err());
}

#[test]
fn mean_examples() {
    let y = eval1(t(&[2, 1], &[1., 3.]), |g, x| g.mean(x, 0));
    assert_eq!(y.shape(), &[1]);
    assert_eq!(y.data(), &[2.]);

    let y = eval1(Tensor::full([3, 4], 2.5).unwrap(), |g, x| g.mean(x, 1));
    assert_eq!(y.data(), &[2.5, 2.5, 2.5]);

    let y = eval1(t(&[2, 2], &[0., 10., 4., 2.]), |g, x| g.mean(x, 0));
    assert_eq!(y.data(), &[2., 6.]);
}

fn layer_norm_eval(x: Tensor<f64>, gain: Tensor<f64>, bias: Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let (x, gn, b) = (g.constant(x), g.constant(gain), g.constant(bias));
    let y = g.layer_norm(x, gn, b, 1e-5).unwrap();
    g.value(y).clone()
}

#[test]
fn layer_norm_examples() {
    let ones = Tensor::ones([4]).unwrap();
    let zeros = Tensor::zeros([4]).unwrap();
    let y = layer_norm_eval(t(&[1, 4], &[5., 5., 5., 5.]), ones.clone(), zeros.clone());
    assert_eq!(y.data(), &[0., 0., 0., 0.]);

    let x = random(&[6, 4], 3);
    let y = layer_norm_eval(x.clone(), ones, zeros);
    for row in y.data().chunks(4) {
        let mean = row.iter().sum::<f64>() / 4.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-3);
    }

    let b = t(&[4], &[0.5, -1., 2., 3.]);
    let y = layer_norm_eval(x, Tensor::zeros([4]).unwrap(), b.clone());
    for row in y.data().chunks(4) {
        assert_eq!(row, b.data());
    }
}

#[test]
fn layer_norm_rejects_nonpositive_eps() {
    let mut g = Graph::new();
    let x = g.constant(random(&[2, 3], 1));
    let gn = g.constant(Tensor::ones([3]).unwrap());
    let b = g.constant(Tensor::zeros([3]).unwrap());
    assert!(g.layer_norm(x, gn, b, 0.0).is_err());
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[0.3, -2., 7.]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1., 1., 1.]);

    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1., 2.]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let half = g.scale(s, 0.5).unwrap();
    g.backward(half).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1., 2.]);
}

#[test]
fn unused_parameters_get_zero_gradients() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1., 2.]));
    let unused = g.param(t(&[3], &[1., 2., 3.]));
    let c = g.constant(t(&[2], &[1., 1.]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(unused).unwrap(), &[0., 0., 0.]);
    assert!(g.grad(c).is_none());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1., 2.]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn gradients_accumulate_across_uses() {
    // f = sum(x) + sum(3x) -> grad 4
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1., -1.]));
    let s1 = g.sum(x).unwrap();
    let x3 = g.scale(x, 3.0).unwrap();
    let s2 = g.sum(x3).unwrap();
    let f = g.add(s1, s2).unwrap();
    g.backward(f).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4., 4.]);
}

#[test]
fn grad_check_examples() {
    let x = random(&[5], 9);
    let err = grad_check(|g, x| g.sum(x), &x, 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");

    let zeros = Tensor::zeros([4]).unwrap();
    let mut g = Graph::new();
    let id = g.param(zeros.clone());
    let s = g.sigmoid(id).unwrap();
    let f = g.sum(s).unwrap();
    g.backward(f).unwrap();
    assert_eq!(g.grad(id).unwrap(), &[0.25; 4]);
    let err = grad_check(
        |g, x| {
            let s = g.sigmoid(x)?;
            g.sum(s)
        },
        &zeros,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn grad_check_rejects_step_outside_range() {
    let x = random(&[2], 1);
    assert!(grad_check(|g, x| g.sum(x), &x, 1e-2).is_err());
    assert!(grad_check(|g, x| g.sum(x), &x, 1e-8).is_err());
}

#[test]
fn grad_check_catches_a_broken_backward_rule() {
    let x = random(&[3, 4], 5);
    let w = random(&[4, 2], 6);
    let f = |g: &mut Graph<f64>, ids: &[NodeId]| {
        let y = g.matmul(ids[0], ids[1])?;
        let y = g.sigmoid(y)?;
        g.sum(y)
    };
    let ok = GradChecker::new(1e-5)
        .unwrap()
        .check(f, &[x.clone(), w.clone()])
        .unwrap();
    assert!(ok.max_relative_error < 1e-6);
    let broken = GradChecker::new(1e-5)
        .unwrap()
        .with_fault(Some(OpKind::Sigmoid))
        .check(f, &[x, w])
        .unwrap();
    assert!(broken.max_relative_error > 0.1);
}

fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>) -> f64 {
    grad_check_inputs(
        |g, ids| {
            let y = f(g, ids)?;
            gradcheck::weighted_sum(g, y, 77)
        },
        inputs,
        1e-5,
    )
    .unwrap()
    .max_relative_error
}

#[test]
fn every_op_passes_gradient_check() {
    let reports = gradcheck::op_suite(&GradChecker::new(1e-5).unwrap()).unwrap();
    assert_eq!(reports.len(), 23);
    for (name, report) in reports {
        assert!(report.max_relative_error < 1e-4, "{name}: {:?}", report.worst);
    }
}

#[test]
fn op_suite_detects_each_injected_fault() {
    for kind in [
        OpKind::MatMul,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Sigmoid,
        OpKind::Div,
        OpKind::Exp,
    ] {
        let checker = GradChecker::new(1e-5).unwrap().with_fault(Some(kind));
        let reports = gradcheck::op_suite(&checker).unwrap();
        assert!(reports.iter().any(|(_, r)| r.max_relative_error > 1e-2), "{kind:?}");
    }
}

#[test]
fn div_broadcasts_a_column_and_exp_is_elementwise() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_f64(vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let b = g.constant(Tensor::from_f64(vec![2, 1], &[2.0, 4.0]).unwrap());
    let q = g.div(a, b).unwrap();
    assert_eq!(g.value(q).data(), &[0.5, 1.0, 1.5, 1.0, 1.25, 1.5]);
    let e = g.exp(b).unwrap();
    assert_eq!(g.value(e).data(), &[2f64.exp(), 4f64.exp()]);
    assert!(g.div(b, a).is_err());
}

proptest! {
    #[test]
    fn softmax_sums_to_one(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let x = random(&[rows, cols], seed).map(|v| v * scale);
        let y = eval1(x, |g, x| g.softmax(x, -1));
        for row in y.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn concat_then_slice_is_identity(parts in 1usize..5, width in 1usize..4, seed in any::<u64>()) {
        let mut g = Graph::new();
        let pieces: Vec<_> = (0..parts).map(|m| random(&[3, width], seed.wrapping_add(m as u64))).collect();
        let ids: Vec<_> = pieces.iter().map(|p| g.constant(p.clone())).collect();
        let c = g.concat(&ids, -1).unwrap();
        for (m, piece) in pieces.iter().enumerate() {
            let s = g.slice(c, -1, m * width, width).unwrap();
            prop_assert_eq!(g.value(s), piece);
        }
    }

    #[test]
    fn matmul_with_identity_is_exact(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let a = random(&[rows, cols], seed);
        let mut g = Graph::new();
        let ia = g.constant(a.clone());
        let id = g.constant(Tensor::identity(cols).unwrap());
        let c = g.matmul(ia, id).unwrap();
        prop_assert_eq!(g.value(c), &a);
    }

    #[test]
    fn ops_are_deterministic(seed in any::<u64>()) {
        let run = || {
            let mut g = Graph::new();
            let x = g.param(random(&[3, 4], seed));
            let w = g.param(random(&[4, 4], seed ^ 1));
            let y = g.matmul(x, w).unwrap();
            let y = g.softmax(y, -1).unwrap();
            let s = g.sum(y).unwrap();
            let l = g.log_softmax(x, -1).unwrap();
            let l = g.sum(l).unwrap();
            let f = g.add(s, l).unwrap();
            g.backward(f).unwrap();
            (g.value(f).clone(), g.grad(w).unwrap().to_vec())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn random_composite_gradients_match(seed in any::<u64>()) {
        let err = check(&[random(&[3, 4], seed), random(&[4, 3], seed ^ 0xff)], |g, i| {
            let y = g.matmul(i[0], i[1])?;
            let y = g.softmax(y, -1)?;
            g.sigmoid(y)
        });
        prop_assert!(err < 1e-4, "relative error {}", err);
    }
}
