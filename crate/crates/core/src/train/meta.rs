use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalProtocol, FeatureClassifier};
use super::{Method, TrainConfig};
use crate::data::{sample_episode, AuxSet, DomainDataset, EpisodeSource, Starved};
use crate::error::{Error, Result};
use crate::losses::{dom1_loss, dom2_loss, fsl_loss, total_loss, LossBreakdown, LossParts};
use crate::mixup::{build_mixed_batch, sample_lambda};
use crate::model::{gaussian_noise, Disentangled, Graph, Mode, ModelBundle};
use crate::rng;
use crate::tensor::{AdamConfig, AdamState, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: LossBreakdown,
    /// Source-eval accuracy (%) on the fixed selection episodes.
    pub source_eval_pct: f64,
}

#[derive(Clone, Debug)]
pub struct MetaTrainOutput {
    /// Checkpoint with the highest selection accuracy on source eval.
    pub best: ModelBundle,
    pub best_epoch: usize,
    pub best_source_eval_pct: f64,
    pub last: ModelBundle,
    pub history: Vec<EpochLog>,
    pub iterations: Vec<LossBreakdown>,
}

/// Noise stream roles for the three batches of one iteration.
const ROLE_SUPPORT_SOURCE: u64 = 0;
const ROLE_SUPPORT_AUX: u64 = 1;
const ROLE_QUERY: u64 = 2;

fn encode(g: &mut Graph<'_>, images: Tensor, seed: u64, t: usize, role: u64) -> Result<Disentangled> {
    let b = images.shape()[0];
    let latent = g.latent_dim();
    let mut nr = rng::stream(seed, &[rng::tag::NOISE, rng::tag::META, t as u64, role]);
    let na = gaussian_noise(&mut nr, b, latent)?;
    let nb = gaussian_noise(&mut nr, b, latent)?;
    let x = g.input(images)?;
    let f = g.extract_features(x)?;
    g.disentangle(f, Some((&na, &nb)))
}

/// Episode sources for one meta-training run.
struct Pools<'a> {
    source: &'a DomainDataset,
    aux: Option<&'a AuxSet>,
    merged: Option<DomainDataset>,
}

impl<'a> Pools<'a> {
    fn new(method: Method, source: &'a DomainDataset, aux: Option<&'a AuxSet>) -> Result<Self> {
        if method.needs_aux() && aux.is_none() {
            return Err(Error::invalid(format!(
                "method {} needs an auxiliary set",
                method.name()
            )));
        }
        let merged = match (method, aux) {
            (Method::MBase, Some(a)) => Some(source.merged(&a.classes)?),
            _ => None,
        };
        Ok(Pools { source, aux, merged })
    }

    fn aux(&self) -> &'a AuxSet {
        self.aux.expect("checked in Pools::new")
    }
}

/// Records the forward pass and loss of meta-training iteration `t` without
/// updating anything.
pub fn iteration_graph<'m>(
    model: &'m ModelBundle,
    cfg: &TrainConfig,
    source: &DomainDataset,
    aux: Option<&AuxSet>,
    t: usize,
) -> Result<(Graph<'m>, Var, LossBreakdown)> {
    let pools = Pools::new(cfg.method, source, aux)?;
    step_graph(Graph::new(model)?, cfg, &pools, t)
}

/// Like [`iteration_graph`], recording onto an existing graph.
pub fn iteration_graph_on<'m>(
    g: Graph<'m>,
    cfg: &TrainConfig,
    source: &DomainDataset,
    aux: Option<&AuxSet>,
    t: usize,
) -> Result<(Graph<'m>, Var, LossBreakdown)> {
    let pools = Pools::new(cfg.method, source, aux)?;
    step_graph(g, cfg, &pools, t)
}

fn single_episode_graph<'m, S: EpisodeSource + ?Sized>(
    mut g: Graph<'m>,
    cfg: &TrainConfig,
    src: &S,
    audit: Option<&AuxSet>,
    t: usize,
) -> Result<(Graph<'m>, Var, LossBreakdown)> {
    let mut r = rng::stream(cfg.seed, &[rng::tag::META, t as u64]);
    let ep = sample_episode(src, cfg.n_way, cfg.k_shot, cfg.m_query, &mut r)?;
    if let Some(a) = audit {
        let ids = a.image_ids();
        a.record_access(ep.image_ids().filter(|id| ids.contains(id)).count());
    }
    let s = encode(&mut g, ep.support_tensor()?, cfg.seed, t, ROLE_SUPPORT_SOURCE)?;
    let q = encode(&mut g, ep.query_tensor()?, cfg.seed, t, ROLE_QUERY)?;
    let logits = g.fsl_logits(s.h1, &ep.support_labels, cfg.n_way, q.h1)?;
    let loss = g.tape.cross_entropy(logits, &ep.query_labels)?;
    let l = g.tape.item(loss);
    let b = total_loss(LossParts {
        l_fsl_s: l,
        l_fsl_a: l,
        l_dom1: 0.0,
        l_dom2: 0.0,
        lambda: 1.0,
        mode: crate::losses::FslLossMode::SourceOnly,
    })?;
    Ok((g, loss, b))
}

fn step_graph<'m>(
    g: Graph<'m>,
    cfg: &TrainConfig,
    pools: &Pools<'_>,
    t: usize,
) -> Result<(Graph<'m>, Var, LossBreakdown)> {
    match cfg.method {
        Method::SBase => single_episode_graph(g, cfg, pools.source, None, t),
        Method::ABase => single_episode_graph(g, cfg, pools.aux(), None, t),
        Method::MBase => {
            let merged = pools.merged.as_ref().expect("built for MBase");
            single_episode_graph(g, cfg, &Starved(merged), Some(pools.aux()), t)
        }
        Method::MetaFdMixup => {
            let mut r = rng::stream(cfg.seed, &[rng::tag::META, t as u64]);
            let e_sou = sample_episode(pools.source, cfg.n_way, cfg.k_shot, cfg.m_query, &mut r)?;
            let e_aux = sample_episode(pools.aux(), cfg.n_way, cfg.k_shot, cfg.m_query, &mut r)?;
            let lambda = match cfg.fixed_lambda {
                Some(l) => l,
                None => sample_lambda(
                    cfg.alpha,
                    cfg.lambda_strategy,
                    &mut rng::stream(cfg.seed, &[rng::tag::LAMBDA, t as u64]),
                )?,
            };
            let batch = build_mixed_batch(&e_sou, &e_aux, lambda)?;
            let mut g = g;
            let s_sou = encode(&mut g, batch.s_sou, cfg.seed, t, ROLE_SUPPORT_SOURCE)?;
            let s_aux = encode(&mut g, batch.s_aux, cfg.seed, t, ROLE_SUPPORT_AUX)?;
            let q_mix = encode(&mut g, batch.q_mix, cfg.seed, t, ROLE_QUERY)?;

            let logits_src = g.fsl_logits(s_sou.h1, &batch.s_sou_labels, cfg.n_way, q_mix.h1)?;
            let logits_aux = g.fsl_logits(s_aux.h1, &batch.s_aux_labels, cfg.n_way, q_mix.h1)?;
            let fsl = fsl_loss(
                &mut g.tape,
                logits_src,
                &batch.y_src_labels,
                logits_aux,
                &batch.y_aux_labels,
                lambda,
                cfg.fsl_loss_mode,
            )?;
            let d2: Vec<Var> = [s_sou.h2, s_aux.h2, q_mix.h2]
                .into_iter()
                .map(|h| g.domain_logits(h))
                .collect::<Result<_>>()?;
            let l_dom2 = dom2_loss(&mut g.tape, d2[0], d2[1], d2[2], lambda)?;
            let d1: Vec<Var> = [s_sou.h1, s_aux.h1, q_mix.h1]
                .into_iter()
                .map(|h| g.domain_logits(h))
                .collect::<Result<_>>()?;
            let l_dom1 = dom1_loss(&mut g.tape, d1[0], d1[1], d1[2], cfg.kl_direction)?;
            let partial = g.tape.add(fsl.l_fsl, l_dom1)?;
            let total = g.tape.add(partial, l_dom2)?;
            let b = total_loss(LossParts {
                l_fsl_s: g.tape.item(fsl.l_fsl_s),
                l_fsl_a: g.tape.item(fsl.l_fsl_a),
                // KL against uniform can round to a tiny negative value.
                l_dom1: g.tape.item(l_dom1).max(0.0),
                l_dom2: g.tape.item(l_dom2),
                lambda,
                mode: cfg.fsl_loss_mode,
            })?;
            Ok((g, total, b))
        }
    }
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        l_fsl_s: avg(|b| b.l_fsl_s),
        l_fsl_a: avg(|b| b.l_fsl_a),
        l_fsl: avg(|b| b.l_fsl),
        l_dom1: avg(|b| b.l_dom1),
        l_dom2: avg(|b| b.l_dom2),
        total: avg(|b| b.total),
        lambda: avg(|b| b.lambda),
        source_weight: avg(|b| b.source_weight),
    }
}

/// Episodic meta-training of all five parameter sets. Keeps the checkpoint
/// with the best source-eval accuracy (epochs 1..=E, strict improvement) and
/// the last one.
pub fn meta_train(
    mut model: ModelBundle,
    source_base: &DomainDataset,
    source_eval: &DomainDataset,
    aux: Option<&AuxSet>,
    cfg: &TrainConfig,
) -> Result<MetaTrainOutput> {
    cfg.validate()?;
    let pools = Pools::new(cfg.method, source_base, aux)?;
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let select = EvalProtocol {
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        m_query: cfg.m_query,
        n_episodes: cfg.select_episodes,
        seed: rng::derive_seed(cfg.seed, &[rng::tag::SELECT]),
    };
    let mut history = Vec::with_capacity(cfg.epochs_meta);
    let mut iterations = Vec::with_capacity(cfg.epochs_meta * cfg.iterations_per_epoch);
    let mut best: Option<(ModelBundle, usize, f64)> = None;
    for epoch in 1..=cfg.epochs_meta {
        model.mode = Mode::Train;
        let start = iterations.len();
        for i in 0..cfg.iterations_per_epoch {
            let t = (epoch - 1) * cfg.iterations_per_epoch + i;
            let (g, loss, b) = step_graph(Graph::new(&model)?, cfg, &pools, t)?;
            let grads = g.backward(loss)?;
            model.apply(grads)?;
            adam.step(&mut model.all_sets_mut())?;
            iterations.push(b);
        }
        model.mode = Mode::Eval;
        let acc = evaluate(&FeatureClassifier::new(&model, source_eval)?, source_eval, &select)?.mean_pct;
        history.push(EpochLog {
            epoch,
            mean_loss: mean_breakdown(&iterations[start..]),
            source_eval_pct: acc,
        });
        if best.as_ref().is_none_or(|b| acc > b.2) {
            best = Some((model.clone(), epoch, acc));
        }
    }
    let (best, best_epoch, best_source_eval_pct) = best.expect("at least one epoch");
    Ok(MetaTrainOutput {
        best,
        best_epoch,
        best_source_eval_pct,
        last: model,
        history,
        iterations,
    })
}
