use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fdmixup::data::{export_dataset, import_dataset, DomainDataset, DomainId};
use fdmixup::model::{load_checkpoint, save_checkpoint, FslHead, Mode, ModelBundle};
use fdmixup::report::TableStyle;
use fdmixup::tensor::suite::check_primitives;
use fdmixup::tensor::GradCheckOptions;
use fdmixup::train::{
    check_total_loss, evaluate, train_once, Benchmark, Checkpoint, EvalMetrics, EvalProtocol, FeatureClassifier, Shard,
    StudyRunner, TrainConfig,
};
use fdmixup::{Error, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::manifest::Manifest;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Eval,
    Study,
    Gradcheck,
    GenData,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Study => "study",
            Command::Gradcheck => "gradcheck",
            Command::GenData => "gen-data",
        }
    }
}

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Text for stdout and the output files written, relative to the output
/// directory.
pub struct Outcome {
    pub text: String,
    pub files: Vec<String>,
}

struct Out {
    dir: PathBuf,
    files: Vec<String>,
}

impl Out {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Out {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(self.dir.join(rel), contents)?;
        self.files.push(rel.to_string());
        Ok(())
    }

    fn json(&mut self, rel: &str, v: &impl Serialize) -> Result<()> {
        self.write(rel, serde_json::to_string_pretty(v)? + "\n")
    }
}

/// Runs `cmd` and writes its outputs plus a manifest into `output.dir`.
pub fn run(cmd: Command, cfg: &ExperimentConfig) -> Result<Outcome> {
    let dir = PathBuf::from(&cfg.output.dir);
    let mut out = Out::new(&dir)?;
    let text = match cmd {
        Command::Train => train(cfg, &mut out)?,
        Command::Eval => eval(cfg, &mut out)?,
        Command::Study => study(cfg, &mut out)?,
        Command::Gradcheck => gradcheck(cfg, &mut out)?,
        Command::GenData => gen_data(cfg, &mut out)?,
    };
    let flat: serde_json::Map<String, serde_json::Value> = cfg.to_flat().into_iter().collect();
    Manifest::build(cmd.name(), serde_json::Value::Object(flat), &dir, &out.files)?.write(&dir)?;
    Ok(Outcome { text, files: out.files })
}

pub fn load_benchmark(cfg: &ExperimentConfig) -> Result<Benchmark> {
    match &cfg.data.import {
        None => Benchmark::generate(&cfg.bench),
        Some(dir) => {
            let dir = Path::new(dir);
            let (s, _) = import_dataset(&dir.join("source"))?;
            let (t, _) = import_dataset(&dir.join("target"))?;
            if s.domain != DomainId::Source || t.domain != DomainId::Target {
                return Err(Error::Data("imported datasets have the wrong domain tags".into()));
            }
            Benchmark::from_datasets(&s, &t, &cfg.bench)
        }
    }
}

fn protocol(train: &TrainConfig, cfg: &ExperimentConfig) -> EvalProtocol {
    EvalProtocol {
        n_way: train.n_way,
        k_shot: train.k_shot,
        m_query: train.m_query,
        n_episodes: cfg.eval.n_episodes,
        seed: cfg.eval.seed,
    }
}

#[derive(Serialize)]
struct ShardMetrics {
    checkpoint: Option<Checkpoint>,
    shard: Shard,
    mean_pct: f64,
    ci95_pct: f64,
    n_episodes: usize,
}

fn eval_shards(
    model: &ModelBundle,
    bench: &Benchmark,
    p: &EvalProtocol,
    ck: Option<Checkpoint>,
) -> Result<Vec<ShardMetrics>> {
    let mut m = model.clone();
    m.mode = Mode::Eval;
    Shard::ALL
        .iter()
        .map(|&shard| {
            let data: &DomainDataset = shard.data(bench);
            let EvalMetrics {
                mean_pct,
                ci95_pct,
                n_episodes,
                ..
            } = evaluate(&FeatureClassifier::new(&m, data)?, data, p)?;
            Ok(ShardMetrics {
                checkpoint: ck,
                shard,
                mean_pct,
                ci95_pct,
                n_episodes,
            })
        })
        .collect()
}

fn metrics_text(rows: &[ShardMetrics]) -> String {
    let mut s = String::new();
    for r in rows {
        let ck = r.checkpoint.map_or("", |c| c.name());
        let _ = writeln!(
            s,
            "{ck:>5} {:<13} {:6.2} ± {:.2}",
            r.shard.name(),
            r.mean_pct,
            r.ci95_pct
        );
    }
    s
}

#[derive(Serialize)]
struct TrainLog<'a> {
    pretrain: &'a fdmixup::train::PretrainReport,
    best_epoch: usize,
    best_source_eval_pct: f64,
    epochs: &'a [fdmixup::train::EpochLog],
    iterations: &'a [fdmixup::losses::LossBreakdown],
    aux_images_used: usize,
}

fn train(cfg: &ExperimentConfig, out: &mut Out) -> Result<String> {
    let bench = load_benchmark(cfg)?;
    let run = train_once(&bench, &cfg.train)?;
    let meta = |ck: Checkpoint, epoch: usize| {
        serde_json::json!({
            "checkpoint": ck.name(),
            "epoch": epoch,
            "method": cfg.train.method.name(),
            "seed": cfg.train.seed,
        })
    };
    for (ck, model, epoch) in [
        (Checkpoint::Best, &run.meta.best, run.meta.best_epoch),
        (Checkpoint::Last, &run.meta.last, cfg.train.epochs_meta),
    ] {
        let rel = format!("checkpoint_{}.fdmx", ck.name());
        save_checkpoint(model, &meta(ck, epoch), &out.dir.join(&rel))?;
        out.files.push(rel);
    }
    out.json(
        "train_log.json",
        &TrainLog {
            pretrain: &run.pretrain,
            best_epoch: run.meta.best_epoch,
            best_source_eval_pct: run.meta.best_source_eval_pct,
            epochs: &run.meta.history,
            iterations: &run.meta.iterations,
            aux_images_used: run.aux.as_ref().map_or(0, |a| a.accesses()),
        },
    )?;
    let p = protocol(&cfg.train, cfg);
    let mut rows = eval_shards(&run.meta.best, &bench, &p, Some(Checkpoint::Best))?;
    rows.extend(eval_shards(&run.meta.last, &bench, &p, Some(Checkpoint::Last))?);
    out.json("metrics.json", &rows)?;
    Ok(format!(
        "{} (seed {}), best epoch {}\n{}",
        cfg.train.method.name(),
        cfg.train.seed,
        run.meta.best_epoch,
        metrics_text(&rows)
    ))
}

fn eval(cfg: &ExperimentConfig, out: &mut Out) -> Result<String> {
    let path = cfg
        .eval
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Invalid("eval needs `eval.checkpoint` set to a checkpoint file".into()))?;
    let (model, _) = load_checkpoint(Path::new(path))?;
    let bench = load_benchmark(cfg)?;
    if model.config.image_size != bench.image_size() {
        return Err(Error::Invalid(format!(
            "checkpoint expects {}px images, the benchmark has {}px",
            model.config.image_size,
            bench.image_size()
        )));
    }
    let rows = eval_shards(&model, &bench, &protocol(&cfg.train, cfg), None)?;
    out.json("eval.json", &rows)?;
    Ok(metrics_text(&rows))
}

fn study(cfg: &ExperimentConfig, out: &mut Out) -> Result<String> {
    let kind = cfg.study_kind().map_err(|e| Error::Invalid(e.to_string()))?;
    let styles = cfg.formats().map_err(|e| Error::Invalid(e.to_string()))?;
    let bench = load_benchmark(cfg)?;
    let result = StudyRunner::new(&bench, cfg.study_settings())?.run(kind, &cfg.train)?;
    for s in &styles {
        out.write(
            &format!("study_{}.{}", kind.name(), s.extension()),
            result.report.render(*s)?,
        )?;
    }
    out.json("runs.json", &result.runs)?;
    result.report.render(TableStyle::Markdown)
}

#[derive(Serialize)]
struct GradcheckResult {
    name: String,
    max_relative_error: f64,
}

fn gradcheck(cfg: &ExperimentConfig, out: &mut Out) -> Result<String> {
    let opts = GradCheckOptions {
        eps: 1e-6,
        max_coords_per_input: None,
        seed: cfg.train.seed,
    };
    let mut results: Vec<GradcheckResult> = check_primitives(3, &opts)?
        .into_iter()
        .map(|(name, e)| GradcheckResult {
            name: name.into(),
            max_relative_error: e,
        })
        .collect();
    for (head, name) in [
        (FslHead::Proto, "total_loss_proto"),
        (FslHead::GraphProp, "total_loss_graph_prop"),
    ] {
        results.push(GradcheckResult {
            name: name.into(),
            max_relative_error: check_total_loss(head, 0.3, 4, cfg.train.seed)?,
        });
    }
    out.json("gradcheck.json", &results)?;
    let worst = results.iter().map(|r| r.max_relative_error).fold(0.0, f64::max);
    let mut text = String::new();
    for r in &results {
        let _ = writeln!(text, "{:<24} {:.3e}", r.name, r.max_relative_error);
    }
    let _ = writeln!(text, "max relative error: {worst:.3e}");
    if worst.is_nan() || worst >= GRADCHECK_TOLERANCE {
        return Err(Error::Invalid(format!(
            "gradient check failed: max relative error {worst:.3e} ≥ {GRADCHECK_TOLERANCE:.0e}\n{text}"
        )));
    }
    Ok(text)
}

fn gen_data(cfg: &ExperimentConfig, out: &mut Out) -> Result<String> {
    use fdmixup::data::generate_dataset;
    let b = &cfg.bench;
    let mut text = String::new();
    for (name, spec, classes) in [
        ("source", &b.source, b.source_classes),
        ("target", &b.target, b.target_classes),
    ] {
        let ds = generate_dataset(spec, classes, b.images_per_class, b.data_seed)?;
        let rel_dir = format!("data/{name}");
        let dir = out.dir.join(&rel_dir);
        std::fs::create_dir_all(&dir)?;
        export_dataset(&ds, &dir, b.data_seed, serde_json::to_value(spec)?)?;
        let mut files: Vec<String> = std::fs::read_dir(&dir)?
            .map(|e| e.map(|e| format!("{rel_dir}/{}", e.file_name().to_string_lossy())))
            .collect::<std::io::Result<_>>()?;
        files.sort();
        out.files.extend(files);
        let _ = writeln!(
            text,
            "{name}: {} classes × {} images → {}",
            classes,
            b.images_per_class,
            dir.display()
        );
    }
    Ok(text)
}
