//! Experiment configuration: JSON schema for a full run (procedure, network
//! sizes, datasets, training hyper-parameters) plus dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_blobs, gen_two_moons, load_csv, DomainDataset};
use crate::error::{Error, Result};
use crate::nets::NetworkSpec;
use crate::trainers::{BaselineOrdering, TrainConfig};

fn default_flip() -> f64 {
    0.0
}

/// One domain's data: a synthetic generator or a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    TwoMoons {
        n: usize,
        noise_sigma: f64,
        rotation_deg: f64,
        #[serde(default)]
        translation: [f64; 2],
        #[serde(default = "default_flip")]
        label_flip_frac: f64,
        seed: u64,
        domain_id: String,
    },
    Blobs {
        n: usize,
        centers: Vec<Vec<f64>>,
        sigma: f64,
        seed: u64,
        domain_id: String,
    },
    Csv {
        path: PathBuf,
    },
}

impl DatasetSpec {
    pub fn build(&self) -> Result<DomainDataset> {
        match self {
            DatasetSpec::TwoMoons {
                n,
                noise_sigma,
                rotation_deg,
                translation,
                label_flip_frac,
                seed,
                domain_id,
            } => gen_two_moons(
                *n,
                *noise_sigma,
                *rotation_deg,
                *translation,
                *label_flip_frac,
                *seed,
                domain_id.clone(),
            ),
            DatasetSpec::Blobs {
                n,
                centers,
                sigma,
                seed,
                domain_id,
            } => gen_blobs(*n, centers, *sigma, *seed, domain_id.clone()),
            DatasetSpec::Csv { path } => load_csv(path),
        }
    }
}

/// Which training procedure to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Procedure {
    Stda,
    Mtda,
    SourceOnly,
    UdaOnly,
    UdaThenKd,
    KdThenUda,
}

impl Procedure {
    pub fn baseline(self) -> Option<BaselineOrdering> {
        match self {
            Procedure::SourceOnly => Some(BaselineOrdering::SourceOnly),
            Procedure::UdaOnly => Some(BaselineOrdering::UdaOnly),
            Procedure::UdaThenKd => Some(BaselineOrdering::UdaThenKd),
            Procedure::KdThenUda => Some(BaselineOrdering::KdThenUda),
            Procedure::Stda | Procedure::Mtda => None,
        }
    }
}

fn default_run_name() -> String {
    "run".to_string()
}

/// The full run description; unknown keys are rejected on parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_run_name")]
    pub run_name: String,
    pub procedure: Procedure,
    #[serde(default)]
    pub train: TrainConfig,
    pub teacher_hidden: Vec<usize>,
    pub student_hidden: Vec<usize>,
    pub source: DatasetSpec,
    pub targets: Vec<DatasetSpec>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        parse_config(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.targets.is_empty() {
            return Err(Error::Config("at least one target dataset is required".into()));
        }
        if self.procedure != Procedure::Mtda && self.targets.len() != 1 {
            return Err(Error::Config(format!(
                "procedure {:?} takes exactly one target, got {}",
                self.procedure,
                self.targets.len()
            )));
        }
        if self.run_name.is_empty() || self.run_name.contains([',', '\n']) {
            return Err(Error::Config("run_name must be nonempty without commas".into()));
        }
        Ok(())
    }

    /// Network specs sized from the source data.
    pub fn specs(&self, source: &DomainDataset) -> Result<(NetworkSpec, NetworkSpec)> {
        let classes = source
            .class_count()
            .ok_or_else(|| Error::Config("source dataset must be labeled".into()))?;
        if classes < 2 {
            return Err(Error::Config("source needs at least two classes".into()));
        }
        let teacher = NetworkSpec::mlp(source.dim(), &self.teacher_hidden, classes);
        let student = NetworkSpec::mlp(source.dim(), &self.student_hidden, classes);
        Ok((teacher, student))
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Apply `key=value` overrides by dotted path; bare training keys (like
/// `epochs`) fall through to the `train` section. The value is parsed as
/// JSON, falling back to a string.
pub fn apply_overrides(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut root: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    for pair in overrides {
        let (key, raw) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{pair}' is not key=value")))?;
        let value: serde_json::Value =
            serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
        const TOP_LEVEL: [&str; 7] = [
            "run_name",
            "procedure",
            "train",
            "teacher_hidden",
            "student_hidden",
            "source",
            "targets",
        ];
        let mut path: Vec<&str> = key.split('.').collect();
        if !key.contains('.') && !TOP_LEVEL.contains(&path[0]) {
            path.insert(0, "train");
        }
        let mut node = &mut root;
        for seg in &path[..path.len() - 1] {
            node = node
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("override path '{key}' hits a non-object")))?
                .entry(seg.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
        node.as_object_mut()
            .ok_or_else(|| Error::Config(format!("override path '{key}' hits a non-object")))?
            .insert(path[path.len() - 1].to_string(), value);
    }
    let cfg: ExperimentConfig = serde_json::from_value(root)
        .map_err(|e| Error::Config(format!("invalid config after overrides: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"{
            "procedure": "stda",
            "teacher_hidden": [8],
            "student_hidden": [4],
            "source": {"kind": "two_moons", "n": 40, "noise_sigma": 0.1,
                       "rotation_deg": 0.0, "seed": 1, "domain_id": "source"},
            "targets": [{"kind": "two_moons", "n": 40, "noise_sigma": 0.1,
                         "rotation_deg": 30.0, "seed": 2, "domain_id": "target"}]
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = parse_config(&minimal()).unwrap();
        assert_eq!(cfg.run_name, "run");
        assert_eq!(cfg.train.epochs, 100);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = minimal().replace("\"procedure\"", "\"nonsense\": 1, \"procedure\"");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("nonsense"), "{err}");
    }

    #[test]
    fn bare_override_lands_in_train_section() {
        let cfg = apply_overrides(&minimal(), &["epochs=3".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        let cfg = apply_overrides(&minimal(), &["train.seed=9".into()]).unwrap();
        assert_eq!(cfg.train.seed, 9);
        let cfg = apply_overrides(&minimal(), &["run_name=\"abc\"".into()]).unwrap();
        assert_eq!(cfg.run_name, "abc");
    }

    #[test]
    fn mtda_requires_matching_target_count() {
        let text = minimal().replace("\"stda\"", "\"mtda\"");
        assert!(parse_config(&text).is_ok());
        let err = apply_overrides(&minimal(), &["procedure=\"uda-only\"".into()]);
        assert!(err.is_ok());
    }

    #[test]
    fn stda_rejects_multiple_targets() {
        let text = minimal().replace(
            "\"targets\": [{",
            "\"targets\": [{\"kind\": \"two_moons\", \"n\": 10, \"noise_sigma\": 0.1, \"rotation_deg\": 10.0, \"seed\": 3, \"domain_id\": \"t2\"}, {",
        );
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn dataset_specs_build() {
        let cfg = parse_config(&minimal()).unwrap();
        let source = cfg.source.build().unwrap();
        assert_eq!(source.len(), 40);
        assert!(source.is_labeled());
        let (teacher, student) = cfg.specs(&source).unwrap();
        assert_eq!(teacher.class_count, 2);
        assert_eq!(student.input_dim(), 2);
    }
}
