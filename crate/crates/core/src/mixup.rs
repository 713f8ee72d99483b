//! Query-set mixup across the source and auxiliary episodes. Support sets are
//! passed through untouched; one mixing ratio covers the whole batch.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the Beta draw is post-processed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaStrategy {
    #[default]
    Plain,
    /// Caps λ at 0.5, so auxiliary content dominates every mixed query.
    V1,
    /// Floors λ at 0.5, so source content dominates.
    V2,
}

impl LambdaStrategy {
    pub fn apply(self, lambda: f64) -> f64 {
        match self {
            LambdaStrategy::Plain => lambda,
            LambdaStrategy::V1 => lambda.min(0.5),
            LambdaStrategy::V2 => lambda.max(0.5),
        }
    }
}

/// Draws `λ ~ Beta(α, α)` as `g1 / (g1 + g2)` with `g1, g2 ~ Gamma(α, 1)`,
/// then applies `strategy`.
pub fn sample_lambda(alpha: f64, strategy: LambdaStrategy, rng: &mut impl Rng) -> Result<f64> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::invalid(format!("mixup alpha must be positive, got {alpha}")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(format!("gamma({alpha}): {e}")))?;
    let g1: f64 = gamma.sample(rng);
    let g2: f64 = gamma.sample(rng);
    let lambda = if g1 + g2 > 0.0 {
        g1 / (g1 + g2)
    } else if rng.gen::<bool>() {
        1.0
    } else {
        0.0
    };
    Ok(strategy.apply(lambda))
}

/// `λ · q_sou + (1 − λ) · q_aux`, elementwise.
pub fn mix_queries(q_sou: &Tensor, q_aux: &Tensor, lambda: f64) -> Result<Tensor> {
    if q_sou.shape() != q_aux.shape() {
        return Err(Error::Shape {
            op: "mix_queries",
            lhs: q_sou.shape().to_vec(),
            rhs: q_aux.shape().to_vec(),
        });
    }
    check_lambda(lambda)?;
    // Endpoints are exact copies; the general formula would round at λ ∈ {0, 1}
    // only through 0·x, which is exact anyway, but keep the intent explicit.
    let data = if lambda == 1.0 {
        q_sou.data().to_vec()
    } else if lambda == 0.0 {
        q_aux.data().to_vec()
    } else {
        q_sou
            .data()
            .iter()
            .zip(q_aux.data())
            .map(|(s, a)| lambda * s + (1.0 - lambda) * a)
            .collect()
    };
    Tensor::new(q_sou.shape().to_vec(), data)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("mixing ratio must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Inputs to one meta-FDMixup iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub s_sou: Tensor,
    pub s_sou_labels: Vec<usize>,
    pub s_aux: Tensor,
    pub s_aux_labels: Vec<usize>,
    pub q_mix: Tensor,
    /// Labels of the mixed queries with respect to the source support.
    pub y_src_labels: Vec<usize>,
    /// Labels of the mixed queries with respect to the auxiliary support.
    pub y_aux_labels: Vec<usize>,
    pub lambda: f64,
}

pub fn build_mixed_batch(e_sou: &Episode, e_aux: &Episode, lambda: f64) -> Result<MixedBatch> {
    if (e_sou.n_way, e_sou.k_shot, e_sou.m_query) != (e_aux.n_way, e_aux.k_shot, e_aux.m_query) {
        return Err(Error::invalid(format!(
            "episode shapes differ: N/K/M {}/{}/{} vs {}/{}/{}",
            e_sou.n_way, e_sou.k_shot, e_sou.m_query, e_aux.n_way, e_aux.k_shot, e_aux.m_query
        )));
    }
    check_lambda(lambda)?;
    let q_mix = mix_queries(&e_sou.query_tensor()?, &e_aux.query_tensor()?, lambda)?;
    Ok(MixedBatch {
        s_sou: e_sou.support_tensor()?,
        s_sou_labels: e_sou.support_labels.clone(),
        s_aux: e_aux.support_tensor()?,
        s_aux_labels: e_aux.support_labels.clone(),
        q_mix,
        y_src_labels: e_sou.query_labels.clone(),
        y_aux_labels: e_aux.query_labels.clone(),
        lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_auxiliary, generate_dataset, sample_episode, DomainSpec};
    use crate::rng::stream;
    use proptest::prelude::*;

    #[test]
    fn uniform_alpha_has_mean_one_half() {
        let mut rng = stream(42, &[]);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| sample_lambda(1.0, LambdaStrategy::Plain, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn clamped_strategies_respect_bounds() {
        let mut rng = stream(1, &[]);
        for _ in 0..10_000 {
            assert!(sample_lambda(1.0, LambdaStrategy::V1, &mut rng).unwrap() <= 0.5);
            assert!(sample_lambda(1.0, LambdaStrategy::V2, &mut rng).unwrap() >= 0.5);
        }
    }

    #[test]
    fn nonpositive_alpha_is_rejected() {
        let mut rng = stream(1, &[]);
        assert!(sample_lambda(0.0, LambdaStrategy::Plain, &mut rng).is_err());
        assert!(sample_lambda(-1.0, LambdaStrategy::Plain, &mut rng).is_err());
    }

    #[test]
    fn mixing_arithmetic() {
        let s = Tensor::from_vec(vec![0.8]).unwrap();
        let a = Tensor::from_vec(vec![0.2]).unwrap();
        let m = mix_queries(&s, &a, 0.3).unwrap();
        assert!((m.data()[0] - 0.38).abs() < 1e-15);
        assert_eq!(mix_queries(&s, &a, 1.0).unwrap(), s);
        assert_eq!(mix_queries(&s, &a, 0.0).unwrap(), a);
        let wrong = Tensor::from_vec(vec![0.1, 0.2]).unwrap();
        assert!(mix_queries(&s, &wrong, 0.5).is_err());
    }

    fn episodes() -> (Episode, Episode) {
        let src = generate_dataset(&DomainSpec::source(), 6, 8, 3).unwrap();
        let tgt = generate_dataset(&DomainSpec::target(), 6, 8, 3).unwrap();
        let aux = build_auxiliary(&tgt, 5, 3).unwrap();
        let mut r = stream(5, &[]);
        (
            sample_episode(&src, 5, 2, 3, &mut r).unwrap(),
            sample_episode(&aux, 5, 2, 3, &mut r).unwrap(),
        )
    }

    #[test]
    fn supports_pass_through_untouched() {
        let (es, ea) = episodes();
        let b = build_mixed_batch(&es, &ea, 0.37).unwrap();
        assert_eq!(b.s_sou, es.support_tensor().unwrap());
        assert_eq!(b.s_aux, ea.support_tensor().unwrap());
        assert_eq!(b.y_src_labels, es.query_labels);
        assert_eq!(b.y_aux_labels, ea.query_labels);
        for l in 0..5 {
            assert_eq!(b.y_src_labels.iter().filter(|&&x| x == l).count(), 3);
            assert_eq!(b.y_aux_labels.iter().filter(|&&x| x == l).count(), 3);
        }
        let one = build_mixed_batch(&es, &ea, 1.0).unwrap();
        assert_eq!(one.q_mix, es.query_tensor().unwrap());
    }

    #[test]
    fn mismatched_episodes_are_rejected() {
        let src = generate_dataset(&DomainSpec::source(), 6, 8, 3).unwrap();
        let mut r = stream(5, &[]);
        let a = sample_episode(&src, 5, 2, 3, &mut r).unwrap();
        let b = sample_episode(&src, 5, 1, 3, &mut r).unwrap();
        assert!(build_mixed_batch(&a, &b, 0.5).is_err());
    }

    #[test]
    fn convex_bound_holds_on_grid() {
        let (es, ea) = episodes();
        let (qs, qa) = (es.query_tensor().unwrap(), ea.query_tensor().unwrap());
        for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let b = build_mixed_batch(&es, &ea, lambda).unwrap();
            for ((m, s), a) in b.q_mix.data().iter().zip(qs.data()).zip(qa.data()) {
                assert!(*m >= s.min(*a) - 1e-12 && *m <= s.max(*a) + 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn mixing_is_symmetric(
            xs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..40),
            lambda in 0.0f64..=1.0,
        ) {
            let a = Tensor::from_vec(xs.iter().map(|p| p.0).collect()).unwrap();
            let b = Tensor::from_vec(xs.iter().map(|p| p.1).collect()).unwrap();
            let ab = mix_queries(&a, &b, lambda).unwrap();
            let ba = mix_queries(&b, &a, 1.0 - lambda).unwrap();
            for (x, y) in ab.data().iter().zip(ba.data()) {
                prop_assert!((x - y).abs() <= 1e-15);
            }
        }
    }
}
