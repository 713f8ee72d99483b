use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate_audited, EvalProtocol, FeatureClassifier};
use super::meta::{meta_train, MetaTrainOutput};
use super::pretrain::{pretrain, PretrainReport};
use super::{Benchmark, Method, StageStrategy, TrainConfig};
use crate::data::{AuxSet, DomainDataset};
use crate::error::{Error, Result};
use crate::losses::{FslLossMode, LossBreakdown};
use crate::mixup::LambdaStrategy;
use crate::model::{Mode, ModelBundle};
use crate::report::{StudyReport, StudyRow};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    /// ABase and MBase under both stage strategies.
    PilotStage,
    /// MetaFDMixup over growing auxiliary sets.
    Feasibility,
    /// Single-branch and dual few-shot losses.
    AblationLoss,
    /// Mixing-ratio sampling variants.
    AblationLambda,
    /// The three baselines and MetaFDMixup.
    Baselines,
}

impl StudyKind {
    pub const ALL: [StudyKind; 5] = [
        StudyKind::PilotStage,
        StudyKind::Feasibility,
        StudyKind::AblationLoss,
        StudyKind::AblationLambda,
        StudyKind::Baselines,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StudyKind::PilotStage => "pilot_stage",
            StudyKind::Feasibility => "feasibility",
            StudyKind::AblationLoss => "ablation_loss",
            StudyKind::AblationLambda => "ablation_lambda",
            StudyKind::Baselines => "baselines",
        }
    }

    /// Accepts `snake_case`, `kebab-case` or squashed names.
    pub fn from_name(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        StudyKind::ALL
            .into_iter()
            .find(|k| k.name().replace('_', "") == norm)
            .ok_or_else(|| {
                let known: Vec<_> = StudyKind::ALL.iter().map(|k| k.name()).collect();
                Error::invalid(format!(
                    "unknown study kind `{s}` (expected one of {})",
                    known.join(", ")
                ))
            })
    }

    /// The cells of this study, each derived from `base`.
    pub fn variants(self, base: &TrainConfig) -> Vec<TrainConfig> {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            StudyKind::PilotStage => [Method::ABase, Method::MBase]
                .into_iter()
                .flat_map(|m| {
                    [StageStrategy::P1plus2, StageStrategy::P2].map(|s| {
                        with(&|c| {
                            c.method = m;
                            c.stage_strategy = s;
                        })
                    })
                })
                .collect(),
            StudyKind::Feasibility => [5, 10, 15, 20]
                .map(|n| {
                    with(&|c| {
                        c.method = Method::MetaFdMixup;
                        c.num_target = n;
                    })
                })
                .to_vec(),
            StudyKind::AblationLoss => [FslLossMode::SourceOnly, FslLossMode::AuxOnly, FslLossMode::Dual]
                .map(|l| {
                    with(&|c| {
                        c.method = Method::MetaFdMixup;
                        c.fsl_loss_mode = l;
                    })
                })
                .to_vec(),
            StudyKind::AblationLambda => [LambdaStrategy::V1, LambdaStrategy::V2, LambdaStrategy::Plain]
                .map(|l| {
                    with(&|c| {
                        c.method = Method::MetaFdMixup;
                        c.lambda_strategy = l;
                    })
                })
                .to_vec(),
            StudyKind::Baselines => Method::ALL.map(|m| with(&|c| c.method = m)).to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shard {
    SourceEval,
    SourceNovel,
    TargetNovel,
}

impl Shard {
    pub const ALL: [Shard; 3] = [Shard::SourceEval, Shard::SourceNovel, Shard::TargetNovel];

    pub fn name(self) -> &'static str {
        match self {
            Shard::SourceEval => "source_eval",
            Shard::SourceNovel => "source_novel",
            Shard::TargetNovel => "target_novel",
        }
    }

    pub fn data(self, bench: &Benchmark) -> &DomainDataset {
        match self {
            Shard::SourceEval => &bench.source.eval,
            Shard::SourceNovel => &bench.source.novel,
            Shard::TargetNovel => &bench.target.novel,
        }
    }
}

/// Which of the two meta-training checkpoints a metric belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checkpoint {
    /// Highest source-eval accuracy during meta-training.
    Best,
    Last,
}

impl Checkpoint {
    pub fn name(self) -> &'static str {
        match self {
            Checkpoint::Best => "best",
            Checkpoint::Last => "last",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySettings {
    /// Every cell is trained once per seed.
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    /// Evaluation episodes are shared by all cells and seeds.
    pub eval_seed: u64,
}

impl Default for StudySettings {
    fn default() -> Self {
        StudySettings {
            seeds: vec![0],
            eval_episodes: 1000,
            eval_seed: 1,
        }
    }
}

/// Training record of one (cell, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: TrainConfig,
    pub pretrain_final_accuracy: f64,
    pub best_epoch: usize,
    pub best_source_eval_pct: f64,
    /// Mean loss over the last meta-training epoch.
    pub final_loss: LossBreakdown,
    pub aux_images_used: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyOutput {
    pub report: StudyReport,
    pub runs: Vec<RunSummary>,
}

/// Runs study cells while sharing pretrained models and finished runs, so
/// several studies over the same benchmark repeat no work.
pub struct StudyRunner<'b> {
    bench: &'b Benchmark,
    settings: StudySettings,
    pretrained: HashMap<String, (ModelBundle, PretrainReport)>,
    finished: HashMap<String, (Vec<StudyRow>, RunSummary)>,
}

/// Key of everything pretraining depends on.
fn pretrain_key(cfg: &TrainConfig) -> String {
    let mut c = TrainConfig {
        method: Method::default(),
        fsl_loss_mode: FslLossMode::default(),
        lambda_strategy: LambdaStrategy::default(),
        alpha: 1.0,
        fixed_lambda: None,
        epochs_meta: 1,
        iterations_per_epoch: 1,
        select_episodes: 1,
        kl_direction: Default::default(),
        ..cfg.clone()
    };
    if c.stage_strategy == StageStrategy::P2 {
        c.num_target = 0;
    }
    serde_json::to_string(&c).expect("config serializes")
}

impl<'b> StudyRunner<'b> {
    pub fn new(bench: &'b Benchmark, settings: StudySettings) -> Result<Self> {
        if settings.seeds.is_empty() {
            return Err(Error::invalid("a study needs at least one seed"));
        }
        if settings.eval_episodes == 0 {
            return Err(Error::invalid("eval_episodes must be positive"));
        }
        Ok(StudyRunner {
            bench,
            settings,
            pretrained: HashMap::new(),
            finished: HashMap::new(),
        })
    }

    pub fn settings(&self) -> &StudySettings {
        &self.settings
    }

    pub fn run(&mut self, kind: StudyKind, base: &TrainConfig) -> Result<StudyOutput> {
        self.run_variants(kind.name(), &kind.variants(base))
    }

    /// Trains and evaluates every cell for every seed. Each cell's `seed`
    /// field is replaced by the settings' seeds.
    pub fn run_variants(&mut self, study: &str, cells: &[TrainConfig]) -> Result<StudyOutput> {
        if cells.is_empty() {
            return Err(Error::invalid("a study needs at least one cell"));
        }
        let mut rows = Vec::new();
        let mut runs = Vec::new();
        for cell in cells {
            for &seed in &self.settings.seeds.clone() {
                let cfg = TrainConfig { seed, ..cell.clone() };
                let (r, s) = self.run_one(&cfg)?;
                rows.extend(r.into_iter().map(|row| StudyRow {
                    study: study.to_string(),
                    ..row
                }));
                runs.push(s);
            }
        }
        Ok(StudyOutput {
            report: StudyReport { rows },
            runs,
        })
    }

    fn pretrained(&mut self, cfg: &TrainConfig) -> Result<(ModelBundle, PretrainReport)> {
        let key = pretrain_key(cfg);
        if let Some(hit) = self.pretrained.get(&key) {
            return Ok(hit.clone());
        }
        let bench = self.bench;
        let aux = match cfg.stage_strategy {
            StageStrategy::P2 => None,
            StageStrategy::P1plus2 => Some(bench.auxiliary(cfg.num_target, aux_seed(cfg.seed))?),
        };
        let mut model = ModelBundle::new(
            cfg.model_config(bench.source.base.classes.len(), bench.image_size()),
            cfg.seed,
        )?;
        let report = pretrain(&mut model, &bench.source.base, aux.as_ref(), cfg)?;
        self.pretrained.insert(key, (model.clone(), report.clone()));
        Ok((model, report))
    }

    fn run_one(&mut self, cfg: &TrainConfig) -> Result<(Vec<StudyRow>, RunSummary)> {
        cfg.validate()?;
        let key = serde_json::to_string(cfg).expect("config serializes");
        if let Some(hit) = self.finished.get(&key) {
            return Ok(hit.clone());
        }
        let (model, pre) = self.pretrained(cfg)?;
        let bench = self.bench;
        let aux = auxiliary_for(bench, cfg)?.filter(|_| cfg.method.needs_aux());
        let out = meta_train(model, &bench.source.base, &bench.source.eval, aux.as_ref(), cfg)?;
        let protocol = EvalProtocol {
            n_way: cfg.n_way,
            k_shot: cfg.k_shot,
            m_query: cfg.m_query,
            n_episodes: self.settings.eval_episodes,
            seed: self.settings.eval_seed,
        };
        let aux_ids = aux.as_ref().map(|a| a.image_ids()).unwrap_or_default();
        let mut rows = Vec::new();
        for (ck, m) in [(Checkpoint::Best, &out.best), (Checkpoint::Last, &out.last)] {
            let mut m = m.clone();
            m.mode = Mode::Eval;
            for shard in Shard::ALL {
                let data = shard.data(bench);
                let (metrics, touched) = evaluate_audited(&FeatureClassifier::new(&m, data)?, data, &protocol)?;
                if let Some(id) = touched.intersection(&aux_ids).next() {
                    return Err(Error::data(format!("evaluation touched auxiliary image {id:?}")));
                }
                rows.push(StudyRow {
                    study: String::new(),
                    method: cfg.method,
                    strategy: cfg.stage_strategy,
                    num_target: cfg.num_target,
                    shard,
                    checkpoint: ck,
                    mean_pct: metrics.mean_pct,
                    ci95_pct: metrics.ci95_pct,
                    n_episodes: metrics.n_episodes,
                    seed: cfg.seed,
                    fsl_loss: cfg.fsl_loss_mode,
                    lambda_strategy: cfg.lambda_strategy,
                });
            }
        }
        let summary = RunSummary {
            config: cfg.clone(),
            pretrain_final_accuracy: pre.epoch_train_accuracy.last().copied().unwrap_or(0.0),
            best_epoch: out.best_epoch,
            best_source_eval_pct: out.best_source_eval_pct,
            final_loss: out.history.last().expect("at least one epoch").mean_loss,
            aux_images_used: aux.as_ref().map_or(0, |a| a.accesses()),
        };
        self.finished.insert(key, (rows.clone(), summary.clone()));
        Ok((rows, summary))
    }
}

/// The auxiliary images of a run depend on its seed only, so sets with a
/// larger `num_target` contain the smaller ones.
pub fn aux_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, &[rng::tag::AUX])
}

/// The auxiliary set a run with `cfg` uses, if any.
pub fn auxiliary_for(bench: &Benchmark, cfg: &TrainConfig) -> Result<Option<AuxSet>> {
    if cfg.method.needs_aux() || cfg.stage_strategy == StageStrategy::P1plus2 {
        Ok(Some(bench.auxiliary(cfg.num_target, aux_seed(cfg.seed))?))
    } else {
        Ok(None)
    }
}

pub struct TrainRun {
    pub pretrain: PretrainReport,
    pub meta: MetaTrainOutput,
    pub aux: Option<AuxSet>,
}

/// Pretraining followed by meta-training for one configuration.
pub fn train_once(bench: &Benchmark, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let aux = auxiliary_for(bench, cfg)?;
    let mut model = ModelBundle::new(
        cfg.model_config(bench.source.base.classes.len(), bench.image_size()),
        cfg.seed,
    )?;
    let pre_aux = if cfg.stage_strategy == StageStrategy::P1plus2 {
        aux.as_ref()
    } else {
        None
    };
    let pretrain = pretrain(&mut model, &bench.source.base, pre_aux, cfg)?;
    let meta = meta_train(model, &bench.source.base, &bench.source.eval, aux.as_ref(), cfg)?;
    Ok(TrainRun { pretrain, meta, aux })
}

/// Runs one study on a fresh [`StudyRunner`].
pub fn run_study(
    kind: StudyKind,
    base: &TrainConfig,
    bench: &Benchmark,
    settings: StudySettings,
) -> Result<StudyOutput> {
    StudyRunner::new(bench, settings)?.run(kind, base)
}
