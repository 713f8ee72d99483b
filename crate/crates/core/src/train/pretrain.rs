use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{StageStrategy, TrainConfig};
use crate::data::{stack_images, AuxSet, DomainDataset, Image};
use crate::error::{Error, Result};
use crate::model::{gaussian_noise, Graph, Mode, ModelBundle};
use crate::rng;
use crate::tensor::{AdamConfig, AdamState, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Class ids in FC-classifier output order.
    pub classes: Vec<u32>,
    /// Probe loss (fixed batches, zero noise, no update) before training.
    pub initial_loss: f64,
    /// Probe loss after each epoch.
    pub epoch_probe_loss: Vec<f64>,
    /// Mean of the training mini-batch losses of each epoch.
    pub epoch_train_loss: Vec<f64>,
    /// Training-batch accuracy of each epoch.
    pub epoch_train_accuracy: Vec<f64>,
    pub aux_images_used: usize,
}

/// Pretraining data for `strategy`: source base alone, or merged with the
/// auxiliary classes.
pub fn pretrain_classes(
    source_base: &DomainDataset,
    aux: Option<&AuxSet>,
    strategy: StageStrategy,
) -> Result<DomainDataset> {
    match strategy {
        StageStrategy::P2 => Ok(source_base.clone()),
        StageStrategy::P1plus2 => {
            let aux = aux.ok_or_else(|| Error::invalid("the P1plus2 strategy needs an auxiliary set"))?;
            source_base.merged(&aux.classes)
        }
    }
}

struct Batch {
    x: Tensor,
    y: Vec<usize>,
}

fn batches(images: &[(Image, usize)], size: usize, image_size: usize) -> Result<Vec<Batch>> {
    images
        .chunks(size)
        // A batch of one cannot be normalized with batch statistics.
        .filter(|c| c.len() > 1)
        .map(|c| {
            let imgs: Vec<Image> = c.iter().map(|(i, _)| i.clone()).collect();
            Ok(Batch {
                x: stack_images(&imgs, image_size)?,
                y: c.iter().map(|(_, l)| *l).collect(),
            })
        })
        .collect()
}

/// Mean cross-entropy over `batches` with batch statistics and zero noise,
/// without touching the model.
fn probe_loss(model: &ModelBundle, batches: &[Batch]) -> Result<f64> {
    let latent = model.config.latent_dim;
    let mut total = 0.0;
    for b in batches {
        let mut g = Graph::new(model)?;
        let x = g.input(b.x.clone())?;
        let f = g.extract_features(x)?;
        let zero = Tensor::zeros(vec![b.y.len(), latent]);
        let d = g.disentangle(f, Some((&zero, &zero)))?;
        let logits = g.classify_fc(d.h1)?;
        let l = g.tape.cross_entropy(logits, &b.y)?;
        total += g.tape.item(l);
    }
    Ok(total / batches.len() as f64)
}

/// Supervised pretraining of the backbone, disentangle module and FC
/// classifier with cross-entropy on H1. The FC classifier is re-created with
/// one output per pretraining class.
pub fn pretrain(
    model: &mut ModelBundle,
    source_base: &DomainDataset,
    aux: Option<&AuxSet>,
    cfg: &TrainConfig,
) -> Result<PretrainReport> {
    cfg.validate()?;
    let data = pretrain_classes(source_base, aux, cfg.stage_strategy)?;
    if data.num_images() < 2 {
        return Err(Error::data("pretraining set is empty"));
    }
    let classes = data.class_ids();
    model.reset_classifier(classes.len(), cfg.seed)?;
    model.mode = Mode::Train;
    let labelled: Vec<(Image, usize)> = data
        .classes
        .iter()
        .enumerate()
        .flat_map(|(l, c)| c.images.iter().map(move |i| (i.clone(), l)))
        .collect();
    let aux_ids = aux.map(|a| a.image_ids()).unwrap_or_default();
    let aux_per_epoch = labelled.iter().filter(|(i, _)| aux_ids.contains(&i.id)).count();

    // Training-mode batch norm on a class-sorted batch would normalize the
    // class signal away, so the probe uses one fixed shuffle.
    let mut probe_order = labelled.clone();
    probe_order.shuffle(&mut rng::stream(cfg.seed, &[rng::tag::PRETRAIN, u64::MAX]));
    let probe = batches(&probe_order, cfg.pretrain_batch_size, data.image_size)?;
    let initial_loss = probe_loss(model, &probe)?;
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let latent = model.config.latent_dim;
    let mut report = PretrainReport {
        classes,
        initial_loss,
        epoch_probe_loss: Vec::new(),
        epoch_train_loss: Vec::new(),
        epoch_train_accuracy: Vec::new(),
        aux_images_used: 0,
    };
    for epoch in 0..cfg.epochs_pretrain {
        let mut order = labelled.clone();
        order.shuffle(&mut rng::stream(cfg.seed, &[rng::tag::PRETRAIN, epoch as u64]));
        let (mut loss_sum, mut correct, mut seen, mut n_batches) = (0.0, 0usize, 0usize, 0usize);
        for (bi, b) in batches(&order, cfg.pretrain_batch_size, data.image_size)?
            .into_iter()
            .enumerate()
        {
            let mut nr = rng::stream(
                cfg.seed,
                &[rng::tag::NOISE, rng::tag::PRETRAIN, epoch as u64, bi as u64],
            );
            let na = gaussian_noise(&mut nr, b.y.len(), latent)?;
            let nb = gaussian_noise(&mut nr, b.y.len(), latent)?;
            let mut g = Graph::new(model)?;
            let x = g.input(b.x)?;
            let f = g.extract_features(x)?;
            let d = g.disentangle(f, Some((&na, &nb)))?;
            let logits = g.classify_fc(d.h1)?;
            let loss = g.tape.cross_entropy(logits, &b.y)?;
            loss_sum += g.tape.item(loss);
            let k = model.config.num_classes;
            for (row, &y) in g.tape.data(logits).chunks(k).zip(&b.y) {
                let arg = row
                    .iter()
                    .enumerate()
                    .fold(0, |a, (i, v)| if *v > row[a] { i } else { a });
                correct += usize::from(arg == y);
            }
            seen += b.y.len();
            n_batches += 1;
            let grads = g.backward(loss)?;
            model.apply(grads)?;
            let [f_set, h_set, cls_set, _, _] = model.all_sets_mut();
            adam.step(&mut [f_set, h_set, cls_set])?;
            model.zero_grad();
        }
        if let Some(a) = aux {
            a.record_access(aux_per_epoch);
        }
        report.aux_images_used += aux_per_epoch;
        report.epoch_train_loss.push(loss_sum / n_batches as f64);
        report.epoch_train_accuracy.push(correct as f64 / seen as f64);
        report.epoch_probe_loss.push(probe_loss(model, &probe)?);
    }
    Ok(report)
}
