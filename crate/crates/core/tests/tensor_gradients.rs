//! Analytic gradients of every differentiable op against central differences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zeus_core::tensor::{Eager, Graph, Tape, Tensor, Var};

const H: f64 = 1e-6;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-3))
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_fn(r, c, |_, _| rng.random_range(-1.5..1.5))
}

/// Checks d(sum(w ⊙ f(inputs)))/d inputs against central differences, where
/// `w` is a fixed random weighting so that every output entry matters.
fn gradcheck<F>(inputs: &[Tensor], weight_seed: u64, f: F) -> f64
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let weights = |shape: [usize; 2]| {
        let mut rng = ChaCha8Rng::seed_from_u64(weight_seed);
        random(&mut rng, shape[0], shape[1])
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&tape, &vars);
        let w = tape.constant(weights(tape.shape(&out)));
        let prod = tape.mul(&out, &w).unwrap();
        tape.value(&tape.sum(&prod).unwrap()).item()
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &vars);
    let w = tape.constant(weights(tape.shape(&out)));
    let prod = tape.mul(&out, &w).unwrap();
    let loss = tape.sum(&prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]);
        for idx in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[idx], numeric));
        }
    }
    worst
}

#[test]
fn matmul_gradient_of_sum_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&mut rng, 3, 3);
    let b = random(&mut rng, 3, 3);
    // Plain sum(A·B), checked on A only.
    let tape = Tape::new();
    let av = tape.leaf(a.clone());
    let bv = tape.constant(b.clone());
    let c = tape.matmul(&av, &bv).unwrap();
    let loss = tape.sum(&c).unwrap();
    let g = tape.backward(loss).unwrap().get(av);
    for idx in 0..9 {
        let mut p = a.clone();
        p.data_mut()[idx] += H;
        let mut m = a.clone();
        m.data_mut()[idx] -= H;
        let fd = (p.matmul(&b).unwrap().sum() - m.matmul(&b).unwrap().sum()) / (2.0 * H);
        assert!(rel_err(g.data()[idx], fd) < 1e-5);
    }
}

#[test]
fn gelu_gradient_at_half() {
    let x = Tensor::scalar(0.5);
    let err = gradcheck(&[x], 1, |t, v| t.gelu(&v[0]).unwrap());
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn cross_entropy_gradient_is_p_minus_onehot() {
    let logits = Tensor::from_rows(&[[0.3, -1.2, 2.0], [1.0, 1.0, -0.5]]).unwrap();
    let labels = [2usize, 0];
    let tape = Tape::new();
    let z = tape.leaf(logits.clone());
    let lp = tape.log_softmax_rows(&z).unwrap();
    let picked = tape.pick(&lp, &labels).unwrap();
    let s = tape.sum(&picked).unwrap();
    let loss = tape.scale(&s, -1.0).unwrap();
    let g = tape.backward(loss).unwrap().get(z);
    let p = Eager.softmax_rows(&logits).unwrap();
    for i in 0..2 {
        for j in 0..3 {
            let onehot = if labels[i] == j { 1.0 } else { 0.0 };
            assert!((g.get(i, j) - (p.get(i, j) - onehot)).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_rows_sum_to_one_and_are_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let x = random(&mut rng, 4, 6).map(|v| v * 20.0);
        let p = Eager.softmax_rows(&x).unwrap();
        for row in p.iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = Eager.softmax_rows(&x.map(|v| v + 17.25)).unwrap();
        assert!(p.max_abs_diff(&shifted) < 1e-12);
    }
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..=6, 1usize..=6, 1usize..=6, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_op_matches_central_differences((n, k, m, seed) in dims()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, n, k);
        let b = random(&mut rng, k, m);
        let b_nt = random(&mut rng, m, k);
        let same = random(&mut rng, n, k);
        let row = random(&mut rng, 1, k);
        let gain = random(&mut rng, 1, k);
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let tol = 1e-5;

        prop_assert!(gradcheck(&[a.clone(), b.clone()], seed, |t, v| t.matmul(&v[0], &v[1]).unwrap()) < tol);
        prop_assert!(gradcheck(&[a.clone(), b_nt.clone()], seed, |t, v| t.matmul_nt(&v[0], &v[1]).unwrap()) < tol);
        prop_assert!(gradcheck(&[a.clone(), same.clone()], seed, |t, v| t.add(&v[0], &v[1]).unwrap()) < tol);
        prop_assert!(gradcheck(&[a.clone(), same.clone()], seed, |t, v| t.mul(&v[0], &v[1]).unwrap()) < tol);
        prop_assert!(gradcheck(&[a.clone(), row.clone()], seed, |t, v| t.add_row(&v[0], &v[1]).unwrap()) < tol);
        prop_assert!(gradcheck(std::slice::from_ref(&a), seed, |t, v| t.scale(&v[0], -2.5).unwrap()) < tol);
        prop_assert!(gradcheck(std::slice::from_ref(&a), seed, |t, v| t.gelu(&v[0]).unwrap()) < tol);
        prop_assert!(gradcheck(std::slice::from_ref(&a), seed, |t, v| t.softmax_rows(&v[0]).unwrap()) < tol);
        prop_assert!(gradcheck(std::slice::from_ref(&a), seed, |t, v| t.log_softmax_rows(&v[0]).unwrap()) < tol);
        prop_assert!(gradcheck(&[a.clone(), b_nt.clone()], seed, |t, v| t.sq_dist(&v[0], &v[1]).unwrap()) < tol);
        prop_assert!(gradcheck(std::slice::from_ref(&a), seed, |t, v| t.sq_dist(&v[0], &v[0]).unwrap()) < tol);
        prop_assert!(gradcheck(std::slice::from_ref(&a), seed, |t, v| t.pick(&v[0], &idx).unwrap()) < tol);
        prop_assert!(gradcheck(std::slice::from_ref(&a), seed, |t, v| t.sum(&v[0]).unwrap()) < tol);
        prop_assert!(gradcheck(std::slice::from_ref(&a), seed, |t, v| t.clamp_max(&v[0], 0.4).unwrap()) < tol);
        let slice_concat = gradcheck(std::slice::from_ref(&a), seed, |t, v| {
            let s = t.slice_cols(&v[0], 0, k.div_ceil(2)).unwrap();
            t.concat_cols(&[s, v[0]]).unwrap()
        });
        prop_assert!(slice_concat < tol);
        if k >= 2 {
            let ln = gradcheck(&[a.clone(), gain.clone(), row.clone()], seed, |t, v| {
                t.layer_norm(&v[0], &v[1], &v[2], 1e-5).unwrap()
            });
            prop_assert!(ln < tol, "layer_norm rel err {}", ln);
        }
    }
}
