use std::cell::Cell;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn store_of(tensors: Vec<(&str, Tensor)>) -> (ParamStore, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids = tensors
        .into_iter()
        .map(|(name, t)| store.add(name, t, ParamGroup::Shared).unwrap())
        .collect();
    (store, ids)
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let eye = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let col = g.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
    let out = g.matmul(eye, col).unwrap();
    assert_eq!(g.shape(out), &[2, 1]);
    assert_eq!(g.value(out).data(), &[3.0, 4.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0; 3]));
    let y = g.softmax(x).unwrap();
    for &p in g.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn concat_last_axis_shape() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 5]));
    let c = g.concat(&[a, b]).unwrap();
    assert_eq!(g.shape(c), &[2, 8]);
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    let err = g.add(a, b).unwrap_err();
    assert!(matches!(err, Error::Shape { op: "add", .. }));
}

#[test]
fn foreign_variable_rejected() {
    let mut g1 = Graph::new();
    let mut g2 = Graph::new();
    let a = g1.constant(Tensor::scalar(1.0));
    assert!(matches!(g2.tanh(a), Err(Error::ForeignVar)));
    let b = g2.scalar(2.0);
    assert!(matches!(g1.backward(b), Err(Error::ForeignVar)));
}

#[test]
fn square_derivative() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).unwrap().item(), Some(6.0));
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]));
    let s = g.softmax(x).unwrap();
    let y = g.sum(s).unwrap();
    let grads = g.backward(y).unwrap();
    for v in grads.wrt(x).unwrap().data() {
        assert!(v.abs() < 1e-15, "{v}");
    }
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
    let y = g.tanh(x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::NonScalarOutput(_))));
}

#[test]
fn unused_trainable_leaf_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(2.0));
    let unused = g.variable(Tensor::vector(vec![1.0, 1.0]));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(unused).unwrap().data(), &[0.0, 0.0]);
    let entries = grads.trainable();
    assert_eq!(entries.len(), 2);
}

#[test]
fn linear_function_is_exact() {
    let (store, ids) = store_of(vec![
        ("w", Tensor::vector(vec![0.5, -2.0, 1.25])),
        ("b", Tensor::scalar(0.75)),
    ]);
    let err = finite_difference_check(&store, 1e-5, |g, s| {
        let w = g.param(s, ids[0]);
        let b = g.param(s, ids[1]);
        let x = g.constant(Tensor::vector(vec![3.0, 1.0, -4.0]));
        let wx = g.mul(w, x)?;
        let sum = g.sum(wx)?;
        g.add(sum, b)
    })
    .unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn tanh_matches_sech_squared() {
    let x0 = 0.5f64;
    let sech2 = 1.0 / x0.cosh().powi(2);

    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(x0));
    let y = g.tanh(x).unwrap();
    let analytic = g.backward(y).unwrap().wrt(x).unwrap().item().unwrap();
    assert!((analytic - sech2).abs() < 1e-14);

    let eps = 1e-5;
    let numeric = ((x0 + eps).tanh() - (x0 - eps).tanh()) / (2.0 * eps);
    assert!((numeric - sech2).abs() < 1e-8);

    let (store, ids) = store_of(vec![("x", Tensor::scalar(x0))]);
    let err = finite_difference_check(&store, eps, |g, s| {
        let x = g.param(s, ids[0]);
        g.tanh(x)
    })
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn corrupted_backward_rule_is_caught() {
    fn f(x: f64) -> f64 {
        x.tanh()
    }
    // Wrong: should be 1 - y^2.
    fn bad_df(_x: f64, y: f64) -> f64 {
        1.0 - 0.5 * y * y
    }
    let (store, ids) = store_of(vec![("x", Tensor::vector(vec![0.5, -1.0, 1.5]))]);
    let err = finite_difference_check(&store, 1e-5, |g, s| {
        let x = g.param(s, ids[0]);
        let y = g.unary(x, Unary::Custom { f, df: bad_df })?;
        g.sum(y)
    })
    .unwrap();
    assert!(err > 1e-2, "{err}");
}

#[test]
fn nondeterministic_function_rejected() {
    let (store, ids) = store_of(vec![("x", Tensor::scalar(1.0))]);
    let calls = Cell::new(0u32);
    let res = finite_difference_check(&store, 1e-5, |g, s| {
        calls.set(calls.get() + 1);
        let x = g.param(s, ids[0]);
        g.scale(x, calls.get() as f64)
    });
    assert!(matches!(res, Err(Error::NonDeterministic { .. })));
}

#[test]
fn nonpositive_step_rejected() {
    let (store, ids) = store_of(vec![("x", Tensor::scalar(1.0))]);
    let res = finite_difference_check(&store, 0.0, |g, s| Ok(g.param(s, ids[0])));
    assert!(matches!(res, Err(Error::InvalidArgument(_))));
}

#[test]
fn log_clamps_at_floor() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::vector(vec![0.0, 1e-20, 1.0]));
    let y = g.log(x).unwrap();
    assert_eq!(g.value(y).data()[0], LOG_FLOOR.ln());
    assert_eq!(g.value(y).data()[1], LOG_FLOOR.ln());
    assert!(g.value(y).is_finite());
    let s = g.sum(y).unwrap();
    let gr = g.backward(s).unwrap().wrt(x).unwrap();
    assert_eq!(gr.data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random_tensor(&mut rng, &[4, 3]);
    let x = random_tensor(&mut rng, &[4]);
    let run = || {
        let mut g = Graph::new();
        let wv = g.variable(w.clone());
        let xv = g.constant(x.clone());
        let h = g.matmul(xv, wv).unwrap();
        let h = g.tanh(h).unwrap();
        let p = g.softmax(h).unwrap();
        g.value(p).clone()
    };
    let a = run();
    let b = run();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

/// Every differentiable operation composed into one scalar, so the check
/// covers each backward rule.
fn all_ops_objective(g: &mut Graph, s: &ParamStore, ids: &[ParamId], rows: usize, k: usize, n: usize) -> crate::Result<Var> {
    let a = g.param(s, ids[0]); // [rows, k]
    let b = g.param(s, ids[1]); // [k, n]
    let c = g.param(s, ids[2]); // [n, k]
    let v = g.param(s, ids[3]); // [n]
    let table = g.param(s, ids[4]); // [5, n]

    let ab = g.matmul(a, b)?; // [rows, n]
    let act = g.matmul_t(a, c)?; // [rows, n]
    let sum = g.add(ab, act)?;
    let biased = g.add(sum, v)?; // row broadcast
    let th = g.tanh(biased)?;
    let sg = g.sigmoid(ab)?;
    let prod = g.mul(th, sg)?;
    let diff = g.sub(prod, act)?;
    let sm = g.softmax(diff)?;
    let lsm = g.log_softmax(prod)?;
    let cat = g.concat(&[sm, lsm])?; // [rows, 2n]
    let sl = g.slice(cat, 1, n)?;
    let rows_g = g.gather(table, &[0, 3, 3, 1])?;
    let first = g.gather_row(table, 2)?;
    let stacked = g.stack(&[first, v])?; // [2, n]
    let flat = g.reshape(stacked, vec![2 * n])?;
    let lg = g.offset(flat, 3.0)?;
    let lg = g.log(lg)?;
    let ex = g.scale(lg, 0.3)?;
    let ex = g.exp(ex)?;
    let vecv = g.slice(a, 0, k)?;
    let vrow = g.reshape(vecv, vec![rows * k])?;
    let vv = g.pick(vrow, rows * k - 1)?;
    let om = g.one_minus(vv)?;

    let parts = [g.sum(sl)?, g.sum(rows_g)?, g.sum(ex)?, om];
    let total = g.add_n(&parts)?;
    let sq = g.mul(total, total)?;
    Ok(sq)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_op_passes_gradient_check(seed in 0u64..10_000, rows in 1usize..4, k in 1usize..4, n in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, ids) = store_of(vec![
            ("a", random_tensor(&mut rng, &[rows, k])),
            ("b", random_tensor(&mut rng, &[k, n])),
            ("c", random_tensor(&mut rng, &[n, k])),
            ("v", random_tensor(&mut rng, &[n])),
            ("table", random_tensor(&mut rng, &[5, n])),
        ]);
        let err = finite_difference_check(&store, 1e-5, |g, s| all_ops_objective(g, s, &ids, rows, k, n)).unwrap();
        prop_assert!(err < 1e-4, "max relative error {}", err);
    }

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..40), width in 1usize..6) {
        let width = width.min(values.len());
        let rows = values.len() / width;
        let data = values[..rows * width].to_vec();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(rows, width, data).unwrap());
        let y = g.softmax(x).unwrap();
        for r in 0..rows {
            let s: f64 = g.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_linear(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_tensor(&mut rng, &[3, 4]);
        let x = random_tensor(&mut rng, &[3]);
        let build = |g: &mut Graph| {
            let wv = g.variable(w.clone());
            let xv = g.constant(x.clone());
            let h = g.matmul(xv, wv).unwrap();
            let f = g.tanh(h).unwrap();
            let f = g.sum(f).unwrap();
            let p = g.softmax(h).unwrap();
            let q = g.pick(p, 0).unwrap();
            let lg = g.log(q).unwrap();
            (wv, f, lg)
        };
        let mut g = Graph::new();
        let (wv, f, h) = build(&mut g);
        let fa = g.scale(f, a).unwrap();
        let hb = g.scale(h, b).unwrap();
        let combo = g.add(fa, hb).unwrap();
        let gc = g.backward(combo).unwrap().wrt(wv).unwrap();
        let gf = g.backward(f).unwrap().wrt(wv).unwrap();
        let gh = g.backward(h).unwrap().wrt(wv).unwrap();
        for i in 0..gc.numel() {
            let expect = a * gf.data()[i] + b * gh.data()[i];
            prop_assert!((gc.data()[i] - expect).abs() < 1e-10);
        }
    }
}
