//! Experiment configuration: one JSON object of flat dotted keys
//! (`"train.num_target": 20`), layered over defaults and then over
//! `key=value` overrides from the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fdmixup::report::TableStyle;
use fdmixup::train::{BenchmarkConfig, StudyKind, StudySettings, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{key}`{}", suggestion_text(.suggestion))]
    UnknownKey { key: String, suggestion: Option<String> },
    #[error("config key `{key}` is ambiguous; use one of {}", .candidates.join(", "))]
    Ambiguous { key: String, candidates: Vec<String> },
    #[error("config key `{key}`: {message}")]
    Type { key: String, message: String },
    #[error("override `{0}` is not of the form key=value")]
    Override(String),
    #[error("config file {path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

fn suggestion_text(s: &Option<String>) -> String {
    s.as_ref()
        .map(|s| format!(" (did you mean `{s}`?)"))
        .unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_episodes: usize,
    pub seed: u64,
    /// Checkpoint evaluated by `eval`.
    pub checkpoint: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_episodes: 1000,
            seed: 1,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySection {
    pub kind: String,
    pub seeds: Vec<u64>,
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection {
            kind: StudyKind::Baselines.name().into(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
    pub formats: Vec<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "out".into(),
            formats: TableStyle::ALL.iter().map(|s| s.name().to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Directory written by `gen-data`; when set, the benchmark is loaded
    /// from it instead of being generated.
    pub import: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub bench: BenchmarkConfig,
    pub eval: EvalSection,
    pub study: StudySection,
    pub output: OutputSection,
    pub data: DataSection,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .as_object_mut()
            .expect("sections are objects")
            .entry(*p)
            .or_insert_with(|| Value::Object(Map::new()));
    }
    cur.as_object_mut()
        .expect("sections are objects")
        .insert(parts[parts.len() - 1].to_string(), value);
}

impl ExperimentConfig {
    /// Every settable key with its current value.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn valid_keys() -> Vec<String> {
        ExperimentConfig::default().to_flat().into_keys().collect()
    }

    /// Full dotted key for `key`, accepting a unique final segment such as
    /// `num_target` for `train.num_target`.
    pub fn resolve_key(key: &str) -> Result<String, ConfigError> {
        let keys = Self::valid_keys();
        if keys.iter().any(|k| k == key) {
            return Ok(key.to_string());
        }
        if !key.contains('.') {
            let hits: Vec<&String> = keys.iter().filter(|k| k.rsplit('.').next() == Some(key)).collect();
            match hits.len() {
                1 => return Ok(hits[0].clone()),
                0 => {}
                _ => {
                    return Err(ConfigError::Ambiguous {
                        key: key.into(),
                        candidates: hits.into_iter().cloned().collect(),
                    })
                }
            }
        }
        Err(ConfigError::UnknownKey {
            key: key.into(),
            suggestion: nearest_key(key, &keys),
        })
    }

    /// Applies `(key, value)` pairs in order, checking each value's type.
    pub fn apply<I>(&mut self, pairs: I) -> Result<(), ConfigError>
    where
        I: IntoIterator<Item = (String, Value)>,
    {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        for (key, value) in pairs {
            let full = Self::resolve_key(&key)?;
            set_path(&mut tree, &full, value);
            if let Err(e) = serde_json::from_value::<ExperimentConfig>(tree.clone()) {
                return Err(ConfigError::Type {
                    key: full,
                    message: e.to_string(),
                });
            }
        }
        *self = serde_json::from_value(tree).expect("checked after every key");
        Ok(())
    }

    /// Parses a flat JSON object. Whitespace-only text is the empty config.
    pub fn from_json_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        if text.trim().is_empty() {
            return Ok(cfg);
        }
        let v: Value =
            serde_json::from_str(text).map_err(|e| ConfigError::Invalid(format!("config is not valid JSON: {e}")))?;
        let Value::Object(m) = v else {
            return Err(ConfigError::Invalid(
                "config must be a JSON object of dotted keys".into(),
            ));
        };
        cfg.apply(m)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_json_text(&text).map_err(|e| match e {
            ConfigError::Invalid(message) => ConfigError::File {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    /// The flat form, loadable with [`ExperimentConfig::from_json_text`].
    pub fn to_json_text(&self) -> String {
        let m: Map<String, Value> = self.to_flat().into_iter().collect();
        serde_json::to_string_pretty(&Value::Object(m)).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.study_kind()?;
        self.formats()?;
        if self.study.seeds.is_empty() {
            return Err(ConfigError::Invalid("study.seeds must not be empty".into()));
        }
        if self.eval.n_episodes == 0 {
            return Err(ConfigError::Invalid("eval.n_episodes must be positive".into()));
        }
        Ok(())
    }

    pub fn study_kind(&self) -> Result<StudyKind, ConfigError> {
        StudyKind::from_name(&self.study.kind).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn formats(&self) -> Result<Vec<TableStyle>, ConfigError> {
        self.output
            .formats
            .iter()
            .map(|f| TableStyle::from_name(f).map_err(|e| ConfigError::Invalid(e.to_string())))
            .collect()
    }

    pub fn study_settings(&self) -> StudySettings {
        StudySettings {
            seeds: self.study.seeds.clone(),
            eval_episodes: self.eval.n_episodes,
            eval_seed: self.eval.seed,
        }
    }
}

/// Splits `key=value`. The value is read as JSON when it parses, otherwise
/// as a bare string, so `method=s_base` and `seeds=[0,1]` both work.
pub fn parse_override(s: &str) -> Result<(String, Value), ConfigError> {
    let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::Override(s.into()))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(ConfigError::Override(s.into()));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

fn nearest_key(key: &str, keys: &[String]) -> Option<String> {
    let score = |k: &str| {
        let last = k.rsplit('.').next().unwrap_or(k);
        strsim::jaro_winkler(key, k).max(strsim::jaro_winkler(key, last))
    };
    keys.iter()
        .map(|k| (score(k), k))
        .filter(|(s, _)| *s > 0.7)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, k)| k.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use fdmixup::train::Method;

    #[test]
    fn empty_text_is_the_default_config() {
        let c = ExperimentConfig::from_json_text("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.train.num_target, 5);
        assert_eq!(c.train.alpha, 1.0);
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.eval.n_episodes, 1000);
        assert_eq!(ExperimentConfig::from_json_text("{}").unwrap(), c);
    }

    #[test]
    fn override_beats_file() {
        let mut c = ExperimentConfig::from_json_text(r#"{"train.num_target": 5}"#).unwrap();
        c.apply([parse_override("num_target=20").unwrap()]).unwrap();
        assert_eq!(c.train.num_target, 20);
    }

    #[test]
    fn typo_suggests_the_nearest_key() {
        let err = ExperimentConfig::from_json_text(r#"{"numm_target": 3}"#).unwrap_err();
        assert!(err.to_string().contains("did you mean `train.num_target`"), "{err}");
        let err = ExperimentConfig::resolve_key("train.numm_target").unwrap_err();
        assert!(err.to_string().contains("train.num_target"), "{err}");
    }

    #[test]
    fn type_mismatch_names_the_key() {
        let err = ExperimentConfig::from_json_text(r#"{"train.lr": "fast"}"#).unwrap_err();
        assert!(
            matches!(&err, ConfigError::Type { key, .. } if key == "train.lr"),
            "{err}"
        );
    }

    #[test]
    fn ambiguous_short_key_is_rejected() {
        let err = ExperimentConfig::resolve_key("seed").unwrap_err();
        assert!(matches!(err, ConfigError::Ambiguous { .. }), "{err}");
    }

    #[test]
    fn bare_strings_and_json_values_both_parse() {
        let mut c = ExperimentConfig::default();
        c.apply(
            [
                "method=s_base",
                "study.seeds=[4,5]",
                "train.fixed_lambda=0.5",
                "bench.source.background=[0.1,0.2,0.3]",
            ]
            .map(|s| parse_override(s).unwrap()),
        )
        .unwrap();
        assert_eq!(c.train.method, Method::SBase);
        assert_eq!(c.study.seeds, vec![4, 5]);
        assert_eq!(c.train.fixed_lambda, Some(0.5));
        assert_eq!(c.bench.source.background, [0.1, 0.2, 0.3]);
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn flat_text_round_trips() {
        let mut c = ExperimentConfig::default();
        c.apply([
            parse_override("train.lr=0.00025").unwrap(),
            parse_override("eval.checkpoint=a.fdmx").unwrap(),
        ])
        .unwrap();
        let back = ExperimentConfig::from_json_text(&c.to_json_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn sections_are_not_keys() {
        let err = ExperimentConfig::from_json_text(r#"{"train": {"lr": 0.1}}"#).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { .. }), "{err}");
    }
}
