//! Finite-difference checks of every differentiable primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_diff_check, BnMode, GradCheckOptions, Tape, Tensor, Var};
use crate::error::Result;

pub type Program = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Each primitive wrapped into a scalar program with the shapes of its inputs.
/// Positive-only inputs are listed with a lower bound above zero.
pub fn primitive_programs() -> Vec<(&'static str, Vec<(Vec<usize>, f64, f64)>, Program)> {
    // Fixed weights turn vector outputs into scalars without symmetric cancellation.
    fn weigh(tape: &mut Tape, y: Var) -> Result<Var> {
        let n: usize = tape.shape(y).iter().product();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * ((i * 37 % 11) as f64 / 11.0)).collect();
        let wv = tape.constant(Tensor::new(tape.shape(y).to_vec(), w)?)?;
        let m = tape.mul(y, wv)?;
        tape.sum(m)
    }
    let s = |v: &[usize], lo: f64, hi: f64| (v.to_vec(), lo, hi);
    vec![
        (
            "matmul",
            vec![s(&[3, 4], -1.0, 1.0), s(&[4, 2], -1.0, 1.0)],
            Box::new(|tp, v| {
                let y = tp.matmul(v[0], v[1])?;
                weigh(tp, y)
            }),
        ),
        (
            "linear",
            vec![s(&[3, 4], -1.0, 1.0), s(&[2, 4], -1.0, 1.0), s(&[2], -1.0, 1.0)],
            Box::new(|tp, v| {
                let y = tp.linear(v[0], v[1], Some(v[2]))?;
                weigh(tp, y)
            }),
        ),
        (
            "conv2d",
            vec![
                s(&[2, 2, 5, 5], -1.0, 1.0),
                s(&[3, 2, 3, 3], -1.0, 1.0),
                s(&[3], -1.0, 1.0),
            ],
            Box::new(|tp, v| {
                let y = tp.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                weigh(tp, y)
            }),
        ),
        (
            "conv2d_strided",
            vec![s(&[1, 2, 6, 6], -1.0, 1.0), s(&[2, 2, 3, 3], -1.0, 1.0)],
            Box::new(|tp, v| {
                let y = tp.conv2d(v[0], v[1], None, 2, 0)?;
                weigh(tp, y)
            }),
        ),
        (
            "batch_norm_train",
            vec![s(&[4, 3, 2, 2], -1.0, 1.0), s(&[3], 0.5, 1.5), s(&[3], -1.0, 1.0)],
            Box::new(|tp, v| {
                let (y, _) = tp.batch_norm(v[0], v[1], v[2], BnMode::Train)?;
                weigh(tp, y)
            }),
        ),
        (
            "batch_norm_eval",
            vec![s(&[5, 3], -1.0, 1.0), s(&[3], 0.5, 1.5), s(&[3], -1.0, 1.0)],
            Box::new(|tp, v| {
                let (y, _) = tp.batch_norm(
                    v[0],
                    v[1],
                    v[2],
                    BnMode::Eval {
                        mean: &[0.1, -0.2, 0.3],
                        var: &[0.5, 1.0, 2.0],
                    },
                )?;
                weigh(tp, y)
            }),
        ),
        (
            "relu",
            vec![s(&[10], -1.0, 1.0)],
            Box::new(|tp, v| {
                let y = tp.relu(v[0])?;
                weigh(tp, y)
            }),
        ),
        (
            "mean_pool2",
            vec![s(&[2, 2, 4, 6], -1.0, 1.0)],
            Box::new(|tp, v| {
                let y = tp.mean_pool2(v[0])?;
                weigh(tp, y)
            }),
        ),
        (
            "add_sub_mul",
            vec![s(&[3, 2], -1.0, 1.0), s(&[3, 2], -1.0, 1.0)],
            Box::new(|tp, v| {
                let a = tp.add(v[0], v[1])?;
                let b = tp.sub(v[0], v[1])?;
                let c = tp.mul(a, b)?;
                let d = tp.scale(c, -1.7)?;
                weigh(tp, d)
            }),
        ),
        (
            "concat_slice",
            vec![s(&[2, 3], -1.0, 1.0), s(&[3, 3], -1.0, 1.0)],
            Box::new(|tp, v| {
                let c = tp.concat(&[v[0], v[1]])?;
                let sl = tp.slice_rows(c, 1, 4)?;
                weigh(tp, sl)
            }),
        ),
        (
            "reshape_transpose",
            vec![s(&[2, 6], -1.0, 1.0)],
            Box::new(|tp, v| {
                let r = tp.reshape(v[0], &[3, 4])?;
                let tr = tp.transpose(r)?;
                weigh(tp, tr)
            }),
        ),
        (
            "softmax",
            vec![s(&[3, 4], -2.0, 2.0)],
            Box::new(|tp, v| {
                let y = tp.softmax(v[0])?;
                weigh(tp, y)
            }),
        ),
        (
            "log_softmax",
            vec![s(&[3, 4], -2.0, 2.0)],
            Box::new(|tp, v| {
                let y = tp.log_softmax(v[0])?;
                weigh(tp, y)
            }),
        ),
        (
            "cross_entropy",
            vec![s(&[4, 3], -2.0, 2.0)],
            Box::new(|tp, v| tp.cross_entropy(v[0], &[0, 2, 1, 2])),
        ),
        (
            "kl_div",
            vec![s(&[3, 4], -2.0, 2.0), s(&[3, 4], -2.0, 2.0)],
            Box::new(|tp, v| {
                let a = tp.softmax(v[0])?;
                let b = tp.softmax(v[1])?;
                tp.kl_div(a, b)
            }),
        ),
        (
            "reparameterize",
            vec![s(&[2, 3], -1.0, 1.0), s(&[2, 3], -1.0, 1.0), s(&[2, 3], -1.0, 1.0)],
            Box::new(|tp, v| {
                let y = tp.reparameterize(v[0], v[1], v[2])?;
                weigh(tp, y)
            }),
        ),
        ("mean", vec![s(&[7], -1.0, 1.0)], Box::new(|tp, v| tp.mean(v[0]))),
        (
            "neg_sq_dist",
            vec![s(&[4, 3], -1.0, 1.0), s(&[2, 3], -1.0, 1.0)],
            Box::new(|tp, v| {
                let y = tp.neg_sq_dist(v[0], v[1])?;
                weigh(tp, y)
            }),
        ),
        (
            "group_mean",
            vec![s(&[5, 3], -1.0, 1.0)],
            Box::new(|tp, v| {
                let y = tp.group_mean(v[0], &[0, 1, 0, 2, 1], 3)?;
                weigh(tp, y)
            }),
        ),
        (
            "row_normalize",
            vec![s(&[3, 4], 0.1, 1.0)],
            Box::new(|tp, v| {
                let y = tp.row_normalize(v[0])?;
                weigh(tp, y)
            }),
        ),
        (
            "l2_normalize_rows",
            vec![s(&[3, 4], -1.0, 1.0)],
            Box::new(|tp, v| {
                let y = tp.l2_normalize_rows(v[0])?;
                weigh(tp, y)
            }),
        ),
    ]
}

/// Worst relative error of each primitive over `trials` random points.
pub fn check_primitives(trials: u64, opts: &GradCheckOptions) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    for (name, shapes, prog) in primitive_programs() {
        let mut worst: f64 = 0.0;
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (trial * 1000 + name.len() as u64));
            let point = shapes
                .iter()
                .map(|(sh, lo, hi)| {
                    let n = sh.iter().product();
                    Tensor::new(sh.clone(), (0..n).map(|_| rng.gen_range(*lo..*hi)).collect())
                })
                .collect::<Result<Vec<_>>>()?;
            worst = worst.max(finite_diff_check(&prog, &point, opts)?);
        }
        out.push((name, worst));
    }
    Ok(out)
}
