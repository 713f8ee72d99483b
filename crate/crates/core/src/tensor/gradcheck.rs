use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-6,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

/// Compares reverse-mode gradients of a scalar `program` at `point` with
/// central differences. Returns the maximum over checked coordinates of
/// `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn finite_diff_check<F>(program: F, point: &[Tensor], opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&opts.eps) {
        return Err(Error::invalid(format!(
            "gradcheck: eps {} outside [1e-6, 1e-3]",
            opts.eps
        )));
    }
    let mut tape = Tape::new();
    let vars = point
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(true);
            tape.leaf(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = program(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(point)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = inputs
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = program(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = point.to_vec();
    for (input, t) in point.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for coord in coords {
            let orig = t.data()[coord];
            let quotient = (|| -> Result<f64> {
                work[input].data_mut()[coord] = orig + opts.eps;
                let plus = eval(&work)?;
                work[input].data_mut()[coord] = orig - opts.eps;
                let minus = eval(&work)?;
                Ok((plus - minus) / (2.0 * opts.eps))
            })();
            work[input].data_mut()[coord] = orig;
            let fd = match quotient {
                Ok(v) if v.is_finite() => v,
                Ok(_) | Err(Error::NonFinite { .. }) => return Err(Error::GradCheck { input, coord }),
                Err(e) => return Err(e),
            };
            let ad = analytic[input][coord];
            let err = (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
