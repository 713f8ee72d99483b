//! The meta-training objective: dual few-shot loss, domain-specific loss on
//! H2, domain-irrelevant loss on H1, and their unweighted sum.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{KlDirection, Tape, Tensor, Var};

/// Domain label of the source domain; the target domain is 0.
pub const SOURCE_LABEL: usize = 1;
pub const TARGET_LABEL: usize = 0;

/// Which branches of the few-shot loss are optimized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FslLossMode {
    #[default]
    Dual,
    SourceOnly,
    AuxOnly,
}

impl FslLossMode {
    /// Weight of the source branch given the mixing ratio.
    pub fn source_weight(self, lambda: f64) -> f64 {
        match self {
            FslLossMode::Dual => lambda,
            FslLossMode::SourceOnly => 1.0,
            FslLossMode::AuxOnly => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FslLossVars {
    pub l_fsl: Var,
    pub l_fsl_s: Var,
    pub l_fsl_a: Var,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("mixing ratio must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// `w · CE(src) + (1 − w) · CE(aux)` with `w` from `mode`.
pub fn fsl_loss(
    tape: &mut Tape,
    logits_src: Var,
    y_src: &[usize],
    logits_aux: Var,
    y_aux: &[usize],
    lambda: f64,
    mode: FslLossMode,
) -> Result<FslLossVars> {
    check_lambda(lambda)?;
    let l_fsl_s = tape.cross_entropy(logits_src, y_src)?;
    let l_fsl_a = tape.cross_entropy(logits_aux, y_aux)?;
    let w = mode.source_weight(lambda);
    let a = tape.scale(l_fsl_s, w)?;
    let b = tape.scale(l_fsl_a, 1.0 - w)?;
    let l_fsl = tape.add(a, b)?;
    Ok(FslLossVars {
        l_fsl,
        l_fsl_s,
        l_fsl_a,
    })
}

fn ce_const(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let rows = tape.shape(logits).first().copied().unwrap_or(0);
    tape.cross_entropy(logits, &vec![label; rows])
}

/// Domain-specific loss on H2 logits: supports are pushed to their own
/// domain, mixed queries to both domains in proportion `λ : 1 − λ`.
pub fn dom2_loss(tape: &mut Tape, d_s_sou: Var, d_s_aux: Var, d_q_mix: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    for v in [d_s_sou, d_s_aux, d_q_mix] {
        check_two_columns(tape, v, "dom2_loss")?;
    }
    let a = ce_const(tape, d_s_sou, SOURCE_LABEL)?;
    let b = ce_const(tape, d_s_aux, TARGET_LABEL)?;
    let q1 = ce_const(tape, d_q_mix, SOURCE_LABEL)?;
    let q0 = ce_const(tape, d_q_mix, TARGET_LABEL)?;
    let q1 = tape.scale(q1, lambda)?;
    let q0 = tape.scale(q0, 1.0 - lambda)?;
    let ab = tape.add(a, b)?;
    let q = tape.add(q1, q0)?;
    let s = tape.add(ab, q)?;
    tape.scale(s, 1.0 / 3.0)
}

fn check_two_columns(tape: &Tape, v: Var, op: &'static str) -> Result<()> {
    match tape.shape(v) {
        [r, 2] if *r > 0 => Ok(()),
        other => Err(Error::Shape {
            op,
            lhs: other.to_vec(),
            rhs: vec![0, 2],
        }),
    }
}

/// Row-mean KL divergence between the predicted domain distribution and the
/// uniform one, in the given direction. Built on log-softmax so saturated
/// logits stay finite.
pub fn kl_to_uniform(tape: &mut Tape, logits: Var, direction: KlDirection) -> Result<Var> {
    check_two_columns(tape, logits, "kl_to_uniform")?;
    let rows = tape.shape(logits)[0];
    let lp = tape.log_softmax(logits)?;
    let per_elem = match direction {
        // Σ p (log p + ln 2)
        KlDirection::PredToTarget => {
            let p = tape.softmax(logits)?;
            let ln2 = tape.constant(Tensor::full(vec![rows, 2], LN_2))?;
            let shifted = tape.add(lp, ln2)?;
            tape.mul(p, shifted)?
        }
        // Σ ½ (−ln 2 − log p)
        KlDirection::TargetToPred => {
            let ln2 = tape.constant(Tensor::full(vec![rows, 2], -LN_2))?;
            let d = tape.sub(ln2, lp)?;
            tape.scale(d, 0.5)?
        }
    };
    let s = tape.sum(per_elem)?;
    tape.scale(s, 1.0 / rows as f64)
}

/// Domain-irrelevant loss on H1 logits: every block is pushed towards the
/// uniform `[0.5, 0.5]` prediction.
pub fn dom1_loss(tape: &mut Tape, d_s_sou: Var, d_s_aux: Var, d_q_mix: Var, direction: KlDirection) -> Result<Var> {
    let a = kl_to_uniform(tape, d_s_sou, direction)?;
    let b = kl_to_uniform(tape, d_s_aux, direction)?;
    let c = kl_to_uniform(tape, d_q_mix, direction)?;
    let ab = tape.add(a, b)?;
    let s = tape.add(ab, c)?;
    tape.scale(s, 1.0 / 3.0)
}

/// Scalar values of one iteration's objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_fsl_s: f64,
    pub l_fsl_a: f64,
    pub l_fsl: f64,
    pub l_dom1: f64,
    pub l_dom2: f64,
    pub total: f64,
    pub lambda: f64,
    /// Weight the few-shot loss put on the source branch; equals `lambda`
    /// in dual mode.
    pub source_weight: f64,
}

/// Scalar inputs to [`total_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub l_fsl_s: f64,
    pub l_fsl_a: f64,
    pub l_dom1: f64,
    pub l_dom2: f64,
    pub lambda: f64,
    pub mode: FslLossMode,
}

/// Combines the parts: `L = L_fsl + L_dom1 + L_dom2` with no coefficients.
pub fn total_loss(parts: LossParts) -> Result<LossBreakdown> {
    for (name, v) in [
        ("l_fsl_s", parts.l_fsl_s),
        ("l_fsl_a", parts.l_fsl_a),
        ("l_dom1", parts.l_dom1),
        ("l_dom2", parts.l_dom2),
    ] {
        if !v.is_finite() {
            return Err(Error::invalid(format!("loss component {name} is not finite ({v})")));
        }
        if v < 0.0 {
            return Err(Error::invalid(format!("loss component {name} is negative ({v})")));
        }
    }
    check_lambda(parts.lambda)?;
    let w = parts.mode.source_weight(parts.lambda);
    let l_fsl = w * parts.l_fsl_s + (1.0 - w) * parts.l_fsl_a;
    Ok(LossBreakdown {
        l_fsl_s: parts.l_fsl_s,
        l_fsl_a: parts.l_fsl_a,
        l_fsl,
        l_dom1: parts.l_dom1,
        l_dom2: parts.l_dom2,
        total: l_fsl + parts.l_dom1 + parts.l_dom2,
        lambda: parts.lambda,
        source_weight: w,
    })
}
