use modapter::{Error, Graph, Result, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mat(r: usize, c: usize, v: &[f64]) -> Tensor {
    Tensor::matrix(r, c, v.to_vec()).unwrap()
}

fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Tensor {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).clone()
}

#[test]
fn matmul_examples() {
    let id = mat(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let a = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
    let out = eval(|g| {
        let x = g.constant(id.clone());
        let y = g.constant(a.clone());
        g.matmul(x, y)
    });
    assert_eq!(out, a);

    let out = eval(|g| {
        let x = g.constant(mat(1, 1, &[2.0]));
        let y = g.constant(mat(1, 1, &[3.0]));
        g.matmul(x, y)
    });
    assert_eq!(out.data(), &[6.0]);

    // Hand computation: [1·5+2·7, 1·6+2·8; 3·5+4·7, 3·6+4·8].
    let out = eval(|g| {
        let x = g.constant(a.clone());
        let y = g.constant(mat(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        g.matmul(x, y)
    });
    assert_eq!(out.data(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let y = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(x, y), Err(Error::Shape { .. })));
}

#[test]
fn softmax_examples() {
    let out = eval(|g| {
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        g.softmax(x, 0)
    });
    assert_eq!(out.data(), &[0.5, 0.5]);

    let out = eval(|g| {
        let x = g.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
        g.softmax(x, 0)
    });
    assert!((out.data()[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((out.data()[1] - 1.0 / 3.0).abs() < 1e-15);

    let out = eval(|g| {
        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        g.softmax(x, 0)
    });
    assert!((out.data()[0] - 1.0).abs() < 1e-12);
    assert!(out.data()[1].abs() < 1e-12);
}

#[test]
fn softmax_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 0]));
    assert!(g.softmax(x, 1).is_err());
    let y = g.constant(Tensor::zeros(&[2, 2]));
    assert!(g.softmax(y, 2).is_err());
}

#[test]
fn softmax_over_leading_axis() {
    let out = eval(|g| {
        let x = g.constant(mat(2, 3, &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]));
        g.softmax(x, 0)
    });
    for v in out.data() {
        assert!((v - 0.5).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_examples() {
    let out = eval(|g| {
        let x = g.constant(Tensor::vector(vec![5.0, 5.0, 5.0]));
        g.layer_norm(x, 1e-6)
    });
    assert!(out.data().iter().all(|v| v.abs() < 1e-12));

    // Mean 0, variance 1 so each entry is ±1/√(1 + 1e-6).
    let out = eval(|g| {
        let x = g.constant(Tensor::vector(vec![1.0, -1.0]));
        g.layer_norm(x, 1e-6)
    });
    let s = 1.0 / (1.0f64 + 1e-6).sqrt();
    assert!((out.data()[0] - s).abs() < 1e-15);
    assert!((out.data()[1] + s).abs() < 1e-15);
}

#[test]
fn layer_norm_shift_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
    let shifted = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v + 7.25).collect()).unwrap();
    let a = eval(|g| {
        let v = g.constant(x.clone());
        g.layer_norm(v, 1e-6)
    });
    let b = eval(|g| {
        let v = g.constant(shifted.clone());
        g.layer_norm(v, 1e-6)
    });
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let l = g.sum(y).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.3, -1.2, 2.0, 0.1]));
    let s = g.softmax(x, 0).unwrap();
    let l = g.sum(s).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let y = g.scale(x, 2.0).unwrap();
    assert!(matches!(g.backward(y), Err(Error::Shape { .. })));
}

#[test]
fn unused_parameter_gets_exact_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let unused = g.param(Tensor::vector(vec![4.0, 5.0, 6.0]));
    let l = g.sum_sq(x).unwrap();
    let late = g.param(Tensor::scalar(1.0));
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    assert_eq!(grads.get(late).unwrap().data(), &[0.0]);
}

#[test]
fn non_finite_aborts() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1e300]));
    assert!(matches!(g.mul(x, x), Err(Error::NonFinite { op: "mul" })));
}

#[test]
fn matmul_associativity_on_random_chains() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let c = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let (va, vb, vc) = (g.constant(a), g.constant(b), g.constant(c));
        let ab = g.matmul(va, vb).unwrap();
        let left = g.matmul(ab, vc).unwrap();
        let bc = g.matmul(vb, vc).unwrap();
        let right = g.matmul(va, bc).unwrap();
        assert!(g.value(left).max_abs_diff(g.value(right)) < 1e-10);
    }
}

#[test]
fn every_primitive_passes_grad_check() {
    let reports = modapter::verify::primitive_checks(&[0, 1, 2]).unwrap();
    assert_eq!(reports.len(), 23 * 3);
    for r in reports {
        assert!(r.max_rel_err < 1e-6, "{} seed {}: {}", r.name, r.seed, r.max_rel_err);
    }
}

#[test]
fn attention_rows_sum_to_one_in_output_of_constant_values() {
    // With every value row equal to c, the output row is c whatever the weights.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = Tensor::randn(&[3, 4], 3.0, &mut rng);
    let k = Tensor::randn(&[5, 4], 3.0, &mut rng);
    let row = [0.5, -1.0, 2.0, 0.25];
    let v = Tensor::matrix(5, 4, row.iter().cycle().take(20).copied().collect()).unwrap();
    let out = eval(|g| {
        let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        g.attention(q, k, v, 1, 2)
    });
    for r in 0..3 {
        for (a, b) in out.row(r).iter().zip(row) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-1000.0f64..1000.0, 1..40), cols in 1usize..8) {
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let t = Tensor::matrix(rows, cols, vals[..rows * cols].to_vec()).unwrap();
        let out = eval(|g| { let x = g.constant(t.clone()); g.softmax(x, 1) });
        for r in 0..rows {
            let s: f64 = out.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(out.row(r).iter().all(|v| *v >= 0.0));
        }
    }
}
