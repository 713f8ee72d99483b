use fdmixup::tensor::suite::check_primitives;
use fdmixup::tensor::{finite_diff_check, BnMode, GradCheckOptions, ParamSet, Tape, Tensor, Var};
use fdmixup::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn p(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::param(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>())
}

#[test]
fn matmul_with_identity() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let y = tape.matmul(a, i).unwrap();
    assert_eq!(tape.data(y), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn relu_values() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[4], &[-1.0, 0.0, 2.0, -3.0])).unwrap();
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.data(y), &[0.0, 0.0, 2.0, 0.0]);
}

#[test]
fn cross_entropy_of_uniform_logits_is_ln2() {
    let mut tape = Tape::new();
    let x = tape.leaf(p(&[1, 2], &[0.0, 0.0])).unwrap();
    let l = tape.cross_entropy(x, &[1]).unwrap();
    assert!((tape.item(l) - 2f64.ln()).abs() < 1e-12);
    tape.backward(l).unwrap();
    let g = tape.grad(x).unwrap();
    assert!((g[0] - 0.5).abs() < 1e-12 && (g[1] + 0.5).abs() < 1e-12);
}

#[test]
fn conv_of_ones_counts_window() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0)).unwrap();
    let w = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0)).unwrap();
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
    assert_eq!(tape.data(y)[4], 9.0);
    assert_eq!(tape.data(y)[0], 4.0);
}

#[test]
fn gradient_of_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape.leaf(p(&[1], &[3.0])).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
}

#[test]
fn repeated_subgraph_doubles_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(p(&[2], &[1.5, -2.0])).unwrap();
    let f1 = tape.mul(x, x).unwrap();
    let f2 = tape.mul(x, x).unwrap();
    let s = tape.add(f1, f2).unwrap();
    let l = tape.sum(s).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0, -8.0]);
}

#[test]
fn second_backward_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(p(&[1], &[1.0])).unwrap();
    let l = tape.sum(x).unwrap();
    tape.backward(l).unwrap();
    assert!(matches!(tape.backward(l), Err(Error::BackwardTwice)));
    tape.reset();
    tape.backward(l).unwrap();
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut params = ParamSet::new();
    params.insert("used", Tensor::zeros(vec![2])).unwrap();
    params.insert("unused", Tensor::zeros(vec![3])).unwrap();
    let mut tape = Tape::new();
    let mut bound = Default::default();
    params.bind(&mut tape, &mut bound).unwrap();
    let l = tape.sum(bound["used"]).unwrap();
    tape.backward(l).unwrap();
    params.collect_grads(&tape, &bound).unwrap();
    assert_eq!(params.get("unused").unwrap().grad().unwrap(), &[0.0; 3]);
    assert_eq!(params.get("used").unwrap().grad().unwrap(), &[1.0; 2]);
}

#[test]
fn non_finite_values_are_rejected() {
    let mut tape = Tape::new();
    let mut bad = Tensor::zeros(vec![2]);
    bad.data_mut()[1] = f64::NAN;
    assert!(tape.leaf(bad).is_err());
    let x = tape.constant(t(&[1, 2], &[1e300, 1e300])).unwrap();
    let y = tape.mul(x, x);
    assert!(matches!(y, Err(Error::NonFinite { .. })));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.constant(rand_tensor(&mut rng, &[6, 5], -30.0, 30.0)).unwrap();
    let y = tape.softmax(x).unwrap();
    for row in tape.data(y).chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn kl_is_zero_on_equal_inputs() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 3], &[0.2, 0.3, 0.5, 0.1, 0.1, 0.8])).unwrap();
    let k = tape.kl_div(a, a).unwrap();
    assert_eq!(tape.item(k), 0.0);
    let z = tape.constant(t(&[1, 2], &[0.0, 1.0])).unwrap();
    let u = tape.constant(t(&[1, 2], &[0.5, 0.5])).unwrap();
    assert!(tape.kl_div(z, u).is_err());
}

#[test]
fn batch_norm_eval_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[4, 3, 2, 2], -1.0, 1.0);
    let run = || {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let g = tape.constant(t(&[3], &[1.0, 0.5, 2.0])).unwrap();
        let b = tape.constant(t(&[3], &[0.0, 0.1, -0.1])).unwrap();
        let (y, stats) = tape
            .batch_norm(
                xv,
                g,
                b,
                BnMode::Eval {
                    mean: &[0.1, 0.0, -0.2],
                    var: &[1.0, 0.5, 2.0],
                },
            )
            .unwrap();
        assert!(stats.is_none());
        tape.data(y).to_vec()
    };
    let a = run();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        run().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn batch_norm_train_reports_unbiased_variance() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let g = tape.constant(t(&[1], &[1.0])).unwrap();
    let b = tape.constant(t(&[1], &[0.0])).unwrap();
    let (y, stats) = tape.batch_norm(x, g, b, BnMode::Train).unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![2.5]);
    assert!((stats.var[0] - 5.0 / 3.0).abs() < 1e-12);
    assert!(tape.data(y).iter().sum::<f64>().abs() < 1e-12);
}

#[test]
fn group_mean_with_empty_class_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let err = tape.group_mean(x, &[0, 0], 2).unwrap_err().to_string();
    assert!(err.contains("no support"), "{err}");
}

#[test]
fn gradcheck_rejects_bad_eps() {
    let point = [t(&[1], &[1.0])];
    let prog = |tape: &mut Tape, v: &[Var]| tape.sum(v[0]);
    for eps in [1e-7, 1e-2] {
        let opts = GradCheckOptions {
            eps,
            ..Default::default()
        };
        assert!(finite_diff_check(prog, &point, &opts).is_err());
    }
}

#[test]
fn gradcheck_detects_a_detached_path() {
    // Reading values into a constant hides the dependency from reverse mode.
    let prog = |tape: &mut Tape, v: &[Var]| {
        let sq: Vec<f64> = tape.data(v[0]).iter().map(|x| x * x).collect();
        let c = tape.constant(Tensor::from_vec(sq)?)?;
        tape.sum(c)
    };
    let err = finite_diff_check(prog, &[t(&[2], &[1.0, 2.0])], &GradCheckOptions::default()).unwrap();
    assert!(err > 0.5, "{err}");
}

#[test]
fn every_primitive_matches_central_differences() {
    let opts = GradCheckOptions {
        eps: 1e-6,
        ..Default::default()
    };
    let results = check_primitives(10, &opts).unwrap();
    assert_eq!(results.len(), 21);
    for (name, err) in results {
        assert!(err < 1e-4, "{name}: relative error {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative(a in proptest::collection::vec(-3.0f64..3.0, 8), b in proptest::collection::vec(-3.0f64..3.0, 8)) {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 4], &a)).unwrap();
        let y = tape.constant(t(&[2, 4], &b)).unwrap();
        let (px, py) = (tape.softmax(x).unwrap(), tape.softmax(y).unwrap());
        let k = tape.kl_div(px, py).unwrap();
        prop_assert!(tape.item(k) >= -1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant(a in proptest::collection::vec(-5.0f64..5.0, 6), c in -50.0f64..50.0) {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 6], &a)).unwrap();
        let shifted: Vec<f64> = a.iter().map(|v| v + c).collect();
        let y = tape.constant(t(&[1, 6], &shifted)).unwrap();
        let (sx, sy) = (tape.softmax(x).unwrap(), tape.softmax(y).unwrap());
        for (u, v) in tape.data(sx).iter().zip(tape.data(sy)) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }
}
