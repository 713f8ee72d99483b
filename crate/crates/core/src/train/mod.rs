//! Two-stage training, baselines, evaluation and the study runner.

mod check;
mod eval;
mod meta;
mod pretrain;
mod study;

use serde::{Deserialize, Serialize};

use crate::data::{build_auxiliary, generate_dataset, split_dataset, AuxSet, DomainSpec, SplitBundle, SplitFractions};
use crate::error::{Error, Result};
use crate::losses::FslLossMode;
use crate::mixup::LambdaStrategy;
use crate::model::{FslHead, ModelConfig};
use crate::tensor::KlDirection;

pub use check::check_total_loss;
pub use eval::{
    eval_threads, evaluate, evaluate_audited, EpisodeClassifier, EvalMetrics, EvalProtocol, FeatureClassifier,
    THREADS_ENV,
};
pub use meta::{iteration_graph, iteration_graph_on, meta_train, EpochLog, MetaTrainOutput};
pub use pretrain::{pretrain, pretrain_classes, PretrainReport};
pub use study::{
    aux_seed, auxiliary_for, run_study, train_once, Checkpoint, RunSummary, Shard, StudyKind, StudyOutput, StudyRunner,
    StudySettings, TrainRun,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Meta-trained on source episodes only.
    SBase,
    /// Meta-trained on auxiliary episodes only.
    ABase,
    /// Meta-trained on episodes from the merged source and auxiliary pool.
    MBase,
    #[default]
    MetaFdMixup,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::SBase, Method::ABase, Method::MBase, Method::MetaFdMixup];

    pub fn name(self) -> &'static str {
        match self {
            Method::SBase => "s_base",
            Method::ABase => "a_base",
            Method::MBase => "m_base",
            Method::MetaFdMixup => "meta_fd_mixup",
        }
    }

    pub fn needs_aux(self) -> bool {
        self != Method::SBase
    }
}

/// Where the auxiliary data is used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStrategy {
    /// Meta-training stage only.
    #[default]
    P2,
    /// Both pretraining and meta-training.
    P1plus2,
}

impl StageStrategy {
    pub fn name(self) -> &'static str {
        match self {
            StageStrategy::P2 => "p2",
            StageStrategy::P1plus2 => "p1plus2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub stage_strategy: StageStrategy,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub num_target: usize,
    pub alpha: f64,
    pub lambda_strategy: LambdaStrategy,
    pub fsl_loss_mode: FslLossMode,
    pub kl_direction: KlDirection,
    pub head: FslHead,
    pub channels: [usize; 4],
    pub epochs_pretrain: usize,
    pub epochs_meta: usize,
    pub iterations_per_epoch: usize,
    pub pretrain_batch_size: usize,
    pub lr: f64,
    /// Source-eval episodes used for best-checkpoint selection each epoch.
    pub select_episodes: usize,
    /// Overrides the sampled mixing ratio on every iteration.
    pub fixed_lambda: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::MetaFdMixup,
            stage_strategy: StageStrategy::P2,
            n_way: 5,
            k_shot: 5,
            m_query: 16,
            num_target: 5,
            alpha: 1.0,
            lambda_strategy: LambdaStrategy::Plain,
            fsl_loss_mode: FslLossMode::Dual,
            kl_direction: KlDirection::PredToTarget,
            head: FslHead::Proto,
            channels: [8, 16, 32, 32],
            epochs_pretrain: 30,
            epochs_meta: 10,
            iterations_per_epoch: 50,
            pretrain_batch_size: 64,
            lr: 1e-3,
            select_episodes: 100,
            fixed_lambda: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-length schedule: 400 epochs per stage, 100 episodes per epoch.
    pub fn full_schedule(mut self) -> Self {
        self.epochs_pretrain = 400;
        self.epochs_meta = 400;
        self.iterations_per_epoch = 100;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.n_way < 2 {
            return bad(format!("n_way must be at least 2, got {}", self.n_way));
        }
        if self.k_shot < 1 || self.m_query < 1 {
            return bad(format!(
                "k_shot and m_query must be positive, got {} and {}",
                self.k_shot, self.m_query
            ));
        }
        if self.num_target < 1 {
            return bad("num_target must be positive".into());
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.epochs_pretrain < 1 || self.epochs_meta < 1 || self.iterations_per_epoch < 1 {
            return bad("epoch and iteration counts must be at least 1".into());
        }
        if self.pretrain_batch_size < 2 {
            return bad(format!(
                "pretrain_batch_size must be at least 2, got {}",
                self.pretrain_batch_size
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.select_episodes < 1 {
            return bad("select_episodes must be positive".into());
        }
        if let Some(l) = self.fixed_lambda {
            if !(0.0..=1.0).contains(&l) {
                return bad(format!("fixed_lambda must lie in [0, 1], got {l}"));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize, image_size: usize) -> ModelConfig {
        ModelConfig {
            image_size,
            channels: self.channels,
            num_classes,
            head: self.head,
            ..ModelConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub source_classes: usize,
    pub target_classes: usize,
    pub images_per_class: usize,
    pub source_split: SplitFractions,
    pub target_split: SplitFractions,
    /// Fixes the generated images and the class splits.
    pub data_seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            source: DomainSpec::source(),
            target: DomainSpec::target(),
            source_classes: 40,
            target_classes: 22,
            images_per_class: 30,
            source_split: SplitFractions::SOURCE,
            target_split: SplitFractions::TARGET,
            data_seed: 7,
        }
    }
}

/// Split source and target domains.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub source: SplitBundle,
    pub target: SplitBundle,
}

impl Benchmark {
    pub fn generate(cfg: &BenchmarkConfig) -> Result<Self> {
        if cfg.source.image_size != cfg.target.image_size {
            return Err(Error::invalid("source and target image sizes differ"));
        }
        let s = generate_dataset(&cfg.source, cfg.source_classes, cfg.images_per_class, cfg.data_seed)?;
        let t = generate_dataset(&cfg.target, cfg.target_classes, cfg.images_per_class, cfg.data_seed)?;
        Self::from_datasets(&s, &t, cfg)
    }

    pub fn from_datasets(
        source: &crate::data::DomainDataset,
        target: &crate::data::DomainDataset,
        cfg: &BenchmarkConfig,
    ) -> Result<Self> {
        let sids = source.class_ids();
        if target.class_ids().iter().any(|c| sids.contains(c)) {
            return Err(Error::data("source and target class ids overlap"));
        }
        Ok(Benchmark {
            source: split_dataset(source, cfg.source_split, cfg.data_seed)?,
            target: split_dataset(target, cfg.target_split, cfg.data_seed)?,
        })
    }

    pub fn image_size(&self) -> usize {
        self.source.base.image_size
    }

    /// Auxiliary set drawn from the target base split, checked against the
    /// target novel split.
    pub fn auxiliary(&self, num_target: usize, seed: u64) -> Result<AuxSet> {
        let aux = build_auxiliary(&self.target.base, num_target, seed)?;
        aux.check_isolation(&self.target.novel)?;
        aux.check_isolation(&self.target.eval)?;
        Ok(aux)
    }
}
