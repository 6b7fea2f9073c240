use ndcore::{Activation, Adam, Mlp, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(r: usize, c: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, r * c).prop_map(move |d| Tensor::matrix(r, c, d))
}

/// A scalar loss that touches most tape operations.
fn loss(tape: &mut Tape, w: Var, x: Var, b: Var) -> Var {
    let h = tape.matmul(x, w).unwrap();
    let h = tape.add_row(h, b).unwrap();
    let h = tape.tanh(h);
    let n = tape.normalize_rows(h);
    let g = tape.matmul_nt(n, n).unwrap();
    let lse = tape.logsumexp_rows(g);
    let sq = tape.square(h);
    let reg = tape.mean(sq);
    let reg = tape.scale(reg, 0.3);
    let s = tape.sum(lse);
    tape.add(s, reg).unwrap()
}

fn value_at(w: &Tensor, x: &Tensor, b: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let (wv, xv, bv) = (
        tape.leaf(w.clone()),
        tape.leaf(x.clone()),
        tape.leaf(b.clone()),
    );
    let out = loss(&mut tape, wv, xv, bv);
    tape.value(out).item()
}

proptest! {
    #[test]
    fn transpose_reverses_products(a in matrix(3, 4), b in matrix(4, 2)) {
        prop_assert_eq!(a.transpose().transpose(), a.clone());
        let ab_t = a.matmul(&b).unwrap().transpose();
        let bt_at = b.transpose().matmul(&a.transpose()).unwrap();
        prop_assert!(ab_t.max_abs_diff(&bt_at) <= 1e-12);
        prop_assert!(a.matmul_nt(&b.transpose()).unwrap().max_abs_diff(&a.matmul(&b).unwrap()) <= 1e-12);
        prop_assert!(a.transpose().matmul(&a).unwrap().max_abs_diff(&a.matmul_tn(&a).unwrap()) <= 1e-12);
        prop_assert_eq!(Tensor::identity(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn tape_gradients_match_central_differences(
        w in matrix(3, 4),
        x in matrix(5, 3),
        b in matrix(1, 4),
    ) {
        let mut tape = Tape::new();
        let (wv, xv, bv) = (tape.leaf(w.clone()), tape.leaf(x.clone()), tape.leaf(b.clone()));
        let out = loss(&mut tape, wv, xv, bv);
        let grads = tape.backward(out).unwrap();
        let h = 1e-6;
        for (which, var) in [(0, wv), (1, xv), (2, bv)] {
            let analytic = grads.get_or_zeros(var, tape.value(var));
            for i in 0..analytic.len() {
                let bump = |delta: f64| {
                    let mut ts = [w.clone(), x.clone(), b.clone()];
                    ts[which].data_mut()[i] += delta;
                    value_at(&ts[0], &ts[1], &ts[2])
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                prop_assert!((a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()), "input {} entry {}: {} vs {}", which, i, a, numeric);
            }
        }
    }
}

#[test]
fn adam_reduces_a_regression_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mlp = Mlp::new(&[2, 8, 1], Activation::Tanh, &mut rng);
    let x = Tensor::matrix(4, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
    let y = Tensor::matrix(4, 1, vec![0.0, 1.0, 1.0, 0.0]);
    let names = mlp.param_names("mlp");
    let mut adam = Adam::new(0.05);
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..400 {
        let mut tape = Tape::new();
        let bound = mlp.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let yv = tape.leaf(y.clone());
        let pred = bound.forward(&mut tape, xv).unwrap();
        let diff = tape.sub(pred, yv).unwrap();
        let sq = tape.square(diff);
        let l = tape.mean(sq);
        last = tape.value(l).item();
        first.get_or_insert(last);
        let grads = tape.backward(l).unwrap();
        let g: Vec<Tensor> = bound
            .param_vars()
            .into_iter()
            .zip(mlp.params())
            .map(|(v, p)| grads.get_or_zeros(v, p))
            .collect();
        adam.step(&mut mlp.params_mut(), &g, &names).unwrap();
    }
    assert!(last < 0.01 * first.unwrap(), "{} -> {last}", first.unwrap());
    assert_eq!(adam.steps_taken(), 400);
}

#[test]
fn non_finite_gradients_leave_parameters_untouched() {
    let mut p = Tensor::matrix(1, 2, vec![1.0, 2.0]);
    let before = p.clone();
    let mut adam = Adam::new(0.1);
    let err = adam
        .step(
            &mut [&mut p],
            &[Tensor::matrix(1, 2, vec![0.5, f64::NAN])],
            &["w".to_string()],
        )
        .unwrap_err();
    assert!(err.to_string().contains('w'), "{err}");
    assert_eq!(p, before);
}
