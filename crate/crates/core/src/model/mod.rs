//! The five learnable components: backbone `f`, disentangle module `h`, FC
//! classifier, few-shot head and domain classifier.

mod checkpoint;
mod graph;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{BatchStats, ParamSet, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use graph::{fsl_logits, Disentangled, Graph, GraphGrads};

/// Few-shot classification head applied to H1 features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FslHead {
    #[default]
    Proto,
    /// One round of cosine-similarity propagation over support and query,
    /// then the prototype rule.
    GraphProp,
}

/// Gates batch-norm statistics and reparameterization noise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Output channels of the four conv blocks.
    pub channels: [usize; 4],
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    /// Output size of the FC classifier used during pretraining.
    pub num_classes: usize,
    pub head: FslHead,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            channels: [8, 16, 32, 32],
            feature_dim: 512,
            hidden_dim: 256,
            latent_dim: 64,
            num_classes: 26,
            head: FslHead::Proto,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || !self.image_size.is_multiple_of(16) {
            return Err(Error::invalid(format!(
                "image_size must be a positive multiple of 16, got {}",
                self.image_size
            )));
        }
        if self.channels.contains(&0) || self.feature_dim == 0 || self.hidden_dim == 0 || self.latent_dim == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid(format!(
                "bn_momentum must lie in [0, 1], got {}",
                self.bn_momentum
            )));
        }
        Ok(())
    }

    /// Spatial side after the four pooling stages.
    pub(crate) fn final_side(&self) -> usize {
        self.image_size / 16
    }
}

/// Which of the five parameter sets a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Backbone,
    Disentangle,
    Classifier,
    Fsl,
    Domain,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Backbone,
        Group::Disentangle,
        Group::Classifier,
        Group::Fsl,
        Group::Domain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Backbone => "f",
            Group::Disentangle => "h",
            Group::Classifier => "cls",
            Group::Fsl => "fsl",
            Group::Domain => "dom",
        }
    }

    pub(crate) fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(s: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(c: usize) -> Self {
        RunningStats {
            mean: vec![0.0; c],
            var: vec![1.0; c],
        }
    }

    fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params_f: ParamSet,
    pub params_h: ParamSet,
    pub params_cls: ParamSet,
    /// Both few-shot heads are parameter-free, so this set stays empty.
    pub params_fsl: ParamSet,
    pub params_dom: ParamSet,
    /// Keyed `f.bn{i}` and `h.bn1`.
    pub bn_running: BTreeMap<String, RunningStats>,
    pub mode: Mode,
}

fn uniform(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

fn he_normal(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Result<Tensor> {
    let n = shape.iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::param(
        shape,
        (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
    )
}

fn insert_linear(set: &mut ParamSet, rng: &mut impl Rng, prefix: &str, inp: usize, out: usize) -> Result<()> {
    let bound = 1.0 / (inp as f64).sqrt();
    set.insert(format!("{prefix}weight"), uniform(rng, vec![out, inp], bound)?)?;
    set.insert(format!("{prefix}bias"), uniform(rng, vec![out], bound)?)
}

fn insert_bn(set: &mut ParamSet, prefix: &str, c: usize) -> Result<()> {
    set.insert(format!("{prefix}.gamma"), Tensor::full(vec![c], 1.0))?;
    set.insert(format!("{prefix}.beta"), Tensor::zeros(vec![c]))
}

impl ModelBundle {
    /// Fresh parameters drawn from a stream keyed by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, &[rng::tag::INIT]);
        let mut bn_running = BTreeMap::new();

        let mut f = ParamSet::new();
        let mut cin = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            f.insert(
                format!("conv{i}.weight"),
                he_normal(&mut r, vec![c, cin, 3, 3], cin * 9)?,
            )?;
            insert_bn(&mut f, &format!("bn{i}"), c)?;
            bn_running.insert(format!("f.bn{i}"), RunningStats::new(c));
            cin = c;
        }
        let flat = cin * config.final_side() * config.final_side();
        insert_linear(&mut f, &mut r, "proj.", flat, config.feature_dim)?;

        let mut h = ParamSet::new();
        insert_linear(&mut h, &mut r, "fc1.", config.feature_dim, config.hidden_dim)?;
        insert_bn(&mut h, "bn1", config.hidden_dim)?;
        bn_running.insert("h.bn1".into(), RunningStats::new(config.hidden_dim));
        for head in ["fc21a.", "fc22a.", "fc21b.", "fc22b."] {
            insert_linear(&mut h, &mut r, head, config.hidden_dim, config.latent_dim)?;
        }

        let mut cls = ParamSet::new();
        insert_linear(&mut cls, &mut r, "", config.latent_dim, config.num_classes)?;
        let mut dom = ParamSet::new();
        insert_linear(&mut dom, &mut r, "", config.latent_dim, 2)?;

        Ok(ModelBundle {
            config,
            params_f: f,
            params_h: h,
            params_cls: cls,
            params_fsl: ParamSet::new(),
            params_dom: dom,
            bn_running,
            mode: Mode::Train,
        })
    }

    pub fn set(&self, g: Group) -> &ParamSet {
        match g {
            Group::Backbone => &self.params_f,
            Group::Disentangle => &self.params_h,
            Group::Classifier => &self.params_cls,
            Group::Fsl => &self.params_fsl,
            Group::Domain => &self.params_dom,
        }
    }

    pub fn set_mut(&mut self, g: Group) -> &mut ParamSet {
        match g {
            Group::Backbone => &mut self.params_f,
            Group::Disentangle => &mut self.params_h,
            Group::Classifier => &mut self.params_cls,
            Group::Fsl => &mut self.params_fsl,
            Group::Domain => &mut self.params_dom,
        }
    }

    /// All five sets in [`Group::ALL`] order, for the optimizer.
    pub fn all_sets_mut(&mut self) -> [&mut ParamSet; 5] {
        [
            &mut self.params_f,
            &mut self.params_h,
            &mut self.params_cls,
            &mut self.params_fsl,
            &mut self.params_dom,
        ]
    }

    /// Copies of every parameter, set by set in [`Group::ALL`] order and by
    /// name within a set.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        Group::ALL
            .iter()
            .flat_map(|&g| {
                self.set(g)
                    .iter()
                    .map(|(_, t)| Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid shape"))
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        Group::ALL.iter().map(|&g| self.set(g).numel()).sum()
    }

    /// Replaces the FC classifier with a freshly initialised one of `num_classes`
    /// outputs.
    pub fn reset_classifier(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::invalid(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        let mut r = rng::stream(seed, &[rng::tag::INIT, 0xc1a5]);
        let mut cls = ParamSet::new();
        insert_linear(&mut cls, &mut r, "", self.config.latent_dim, num_classes)?;
        self.params_cls = cls;
        self.config.num_classes = num_classes;
        Ok(())
    }

    /// Writes gradients and batch-norm updates recorded by a [`Graph`].
    pub fn apply(&mut self, grads: GraphGrads) -> Result<()> {
        for (g, per) in Group::ALL.into_iter().zip(grads.grads) {
            let set = self.set_mut(g);
            for (name, t) in set.iter_mut() {
                match per.get(name) {
                    Some(v) => t.accumulate_grad(v)?,
                    None => t.accumulate_grad(&vec![0.0; t.numel()])?,
                }
            }
        }
        let m = self.config.bn_momentum;
        for (key, stats) in grads.bn_updates {
            let r = self
                .bn_running
                .get_mut(&key)
                .ok_or_else(|| Error::invalid(format!("unknown batch-norm layer `{key}`")))?;
            r.update(&stats, m);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.all_sets_mut().into_iter().for_each(ParamSet::zero_grad);
    }
}

/// Standard normal noise of shape `rows × dim`.
pub fn gaussian_noise(rng: &mut impl Rng, rows: usize, dim: usize) -> Result<Tensor> {
    Tensor::new(
        vec![rows, dim],
        (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dims_and_groups() {
        let m = ModelBundle::new(ModelConfig::default(), 0).unwrap();
        assert_eq!(m.params_h.get("fc1.weight").unwrap().shape(), &[256, 512]);
        assert_eq!(m.params_h.get("fc21a.weight").unwrap().shape(), &[64, 256]);
        assert_eq!(m.params_dom.get("weight").unwrap().shape(), &[2, 64]);
        assert_eq!(m.params_cls.get("weight").unwrap().shape(), &[26, 64]);
        assert!(m.params_fsl.is_empty());
        assert_eq!(m.bn_running.len(), 5);
        assert_eq!(m, ModelBundle::new(ModelConfig::default(), 0).unwrap());
        assert_ne!(m, ModelBundle::new(ModelConfig::default(), 1).unwrap());
    }

    #[test]
    fn bad_configs_are_rejected() {
        let c = ModelConfig {
            image_size: 20,
            ..ModelConfig::default()
        };
        assert!(ModelBundle::new(c, 0).is_err());
        let c = ModelConfig {
            num_classes: 1,
            ..ModelConfig::default()
        };
        assert!(ModelBundle::new(c, 0).is_err());
    }
}
