use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{stack_images, DomainDataset, Episode, ImageId};
use crate::error::{Error, Result};
use crate::model::{fsl_logits, FslHead, Graph, Mode, ModelBundle};
use crate::rng;
use crate::tensor::{Tape, Tensor};

/// Caps the number of evaluation worker threads.
pub const THREADS_ENV: &str = "FDMIX_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub episode_accuracies: Vec<f64>,
    pub mean_pct: f64,
    /// `100 · 1.96 · σ / √n` with the population standard deviation.
    pub ci95_pct: f64,
    pub n_episodes: usize,
}

impl EvalMetrics {
    pub fn from_accuracies(acc: Vec<f64>) -> Result<Self> {
        if acc.is_empty() {
            return Err(Error::invalid("no episode accuracies"));
        }
        if let Some(a) = acc.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::invalid(format!("episode accuracy {a} outside [0, 1]")));
        }
        let n = acc.len() as f64;
        let mean = acc.iter().sum::<f64>() / n;
        let var = acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        Ok(EvalMetrics {
            mean_pct: 100.0 * mean,
            ci95_pct: 100.0 * 1.96 * var.sqrt() / n.sqrt(),
            n_episodes: acc.len(),
            episode_accuracies: acc,
        })
    }
}

/// Predicts an episode label for every query image.
pub trait EpisodeClassifier: Sync {
    fn predict(&self, episode: &Episode) -> Result<Vec<usize>>;
}

/// Classifies episodes from evaluation-mode H1 features computed once per
/// image of a shard.
pub struct FeatureClassifier {
    head: FslHead,
    dim: usize,
    features: HashMap<ImageId, Vec<f64>>,
}

const FEATURE_BATCH: usize = 64;

impl FeatureClassifier {
    pub fn new(model: &ModelBundle, shard: &DomainDataset) -> Result<Self> {
        let mut eval_model;
        let model = if model.mode == Mode::Eval {
            model
        } else {
            eval_model = model.clone();
            eval_model.mode = Mode::Eval;
            &eval_model
        };
        let images: Vec<_> = shard.images().cloned().collect();
        let mut features = HashMap::with_capacity(images.len());
        let dim = model.config.latent_dim;
        for chunk in images.chunks(FEATURE_BATCH) {
            let mut g = Graph::new(model)?;
            let x = g.input(stack_images(chunk, shard.image_size)?)?;
            let f = g.extract_features(x)?;
            let d = g.disentangle(f, None)?;
            for (img, row) in chunk.iter().zip(g.tape.data(d.h1).chunks(dim)) {
                features.insert(img.id, row.to_vec());
            }
        }
        Ok(FeatureClassifier {
            head: model.config.head,
            dim,
            features,
        })
    }

    fn stack(&self, images: &[crate::data::Image]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * self.dim);
        for img in images {
            let f = self
                .features
                .get(&img.id)
                .ok_or_else(|| Error::data(format!("image {:?} is not part of the evaluated shard", img.id)))?;
            data.extend_from_slice(f);
        }
        Tensor::new(vec![images.len(), self.dim], data)
    }
}

impl EpisodeClassifier for FeatureClassifier {
    fn predict(&self, ep: &Episode) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let s = tape.constant(self.stack(&ep.support)?)?;
        let q = tape.constant(self.stack(&ep.query)?)?;
        let logits = fsl_logits(&mut tape, self.head, s, &ep.support_labels, ep.n_way, q)?;
        Ok(tape
            .data(logits)
            .chunks(ep.n_way)
            .map(|row| {
                // First maximum wins, so ties resolve to the lowest label.
                row.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                    )
                    .0
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub n_episodes: usize,
    /// Episode `i` is drawn from a stream keyed by `(seed, i)`.
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            n_way: 5,
            k_shot: 5,
            m_query: 16,
            n_episodes: 1000,
            seed: 0,
        }
    }
}

/// Worker count from `FDMIX_THREADS`, else the available parallelism.
pub fn eval_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn episode_result(
    clf: &dyn EpisodeClassifier,
    shard: &DomainDataset,
    p: &EvalProtocol,
    i: usize,
) -> Result<(f64, Vec<ImageId>)> {
    let mut r = rng::stream(p.seed, &[rng::tag::EVAL, i as u64]);
    let ep = crate::data::sample_episode(shard, p.n_way, p.k_shot, p.m_query, &mut r)?;
    let pred = clf.predict(&ep)?;
    if pred.len() != ep.query_labels.len() {
        return Err(Error::invalid(format!(
            "classifier returned {} predictions for {} queries",
            pred.len(),
            ep.query_labels.len()
        )));
    }
    let correct = pred.iter().zip(&ep.query_labels).filter(|(a, b)| a == b).count();
    Ok((correct as f64 / pred.len() as f64, ep.image_ids().collect()))
}

/// Like [`evaluate`], also returning every image id the episodes touched.
pub fn evaluate_audited(
    clf: &dyn EpisodeClassifier,
    shard: &DomainDataset,
    p: &EvalProtocol,
) -> Result<(EvalMetrics, BTreeSet<ImageId>)> {
    if p.n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be positive"));
    }
    if shard.classes.len() < p.n_way {
        return Err(Error::data(format!(
            "shard has {} classes, fewer than N = {}",
            shard.classes.len(),
            p.n_way
        )));
    }
    let threads = eval_threads().min(p.n_episodes);
    let results: Vec<Result<(f64, Vec<ImageId>)>> = if threads <= 1 {
        (0..p.n_episodes).map(|i| episode_result(clf, shard, p, i)).collect()
    } else {
        let mut slots: Vec<Option<Result<(f64, Vec<ImageId>)>>> = (0..p.n_episodes).map(|_| None).collect();
        let per = p.n_episodes.div_ceil(threads);
        std::thread::scope(|s| {
            for (w, chunk) in slots.chunks_mut(per).enumerate() {
                s.spawn(move || {
                    for (j, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(episode_result(clf, shard, p, w * per + j));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("every slot filled")).collect()
    };
    let mut acc = Vec::with_capacity(p.n_episodes);
    let mut touched = BTreeSet::new();
    for r in results {
        let (a, ids) = r?;
        acc.push(a);
        touched.extend(ids);
    }
    Ok((EvalMetrics::from_accuracies(acc)?, touched))
}

/// Mean accuracy and 95% half-width over `p.n_episodes` episodes of `shard`.
pub fn evaluate(clf: &dyn EpisodeClassifier, shard: &DomainDataset, p: &EvalProtocol) -> Result<EvalMetrics> {
    Ok(evaluate_audited(clf, shard, p)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DomainSpec};
    use rand::Rng;

    #[test]
    fn two_episode_ci_matches_closed_form() {
        let m = EvalMetrics::from_accuracies(vec![0.5, 0.7]).unwrap();
        assert!((m.mean_pct - 60.0).abs() < 1e-9);
        let want = 100.0 * 1.96 * 0.1 / 2f64.sqrt();
        assert!((m.ci95_pct - want).abs() < 1e-9);
        assert!((m.ci95_pct - 13.86).abs() < 0.01);
        assert!(EvalMetrics::from_accuracies(vec![]).is_err());
        assert!(EvalMetrics::from_accuracies(vec![1.2]).is_err());
    }

    struct Oracle;
    impl EpisodeClassifier for Oracle {
        fn predict(&self, ep: &Episode) -> Result<Vec<usize>> {
            Ok(ep.query_labels.clone())
        }
    }

    struct Guess(u64);
    impl EpisodeClassifier for Guess {
        fn predict(&self, ep: &Episode) -> Result<Vec<usize>> {
            let key = ep.query[0].id.class_id as u64 ^ (ep.query[0].id.index as u64) << 20;
            let mut r = rng::stream(self.0, &[key, ep.support[0].id.index as u64]);
            Ok((0..ep.query.len()).map(|_| r.gen_range(0..ep.n_way)).collect())
        }
    }

    #[test]
    fn stub_classifiers() {
        let ds = generate_dataset(&DomainSpec::source(), 6, 21, 1).unwrap();
        let p = EvalProtocol::default();
        let m = evaluate(&Oracle, &ds, &p).unwrap();
        assert_eq!((m.mean_pct, m.ci95_pct, m.n_episodes), (100.0, 0.0, 1000));
        let m = evaluate(&Guess(3), &ds, &p).unwrap();
        assert!((m.mean_pct - 20.0).abs() < 3.0, "{}", m.mean_pct);
    }

    #[test]
    fn too_few_classes_is_an_error() {
        let ds = generate_dataset(&DomainSpec::source(), 3, 21, 1).unwrap();
        assert!(evaluate(&Oracle, &ds, &EvalProtocol::default()).is_err());
    }
}
