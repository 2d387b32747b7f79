//! Flat `key = value` simulation config.
//!
//! Blank lines and lines starting with `#` are ignored; trailing `# ...`
//! comments are stripped. Unknown and duplicate keys are errors. Relative
//! file paths resolve against the config file's directory.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::baseline::CompressionPipeline;
use crate::codec::Reconstruction;
use crate::error::{ConfigError, Error, Result};
use crate::model::{ModelKind, TrainParams};
use crate::sampler::{SamplingPolicy, DEFAULT_FLOOR};
use crate::sparsify::ThresholdScope;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    /// Gaussian blobs; `test_samples` extra samples are drawn and held out.
    Synthetic {
        samples: usize,
        test_samples: usize,
        features: usize,
        classes: usize,
        separation: f64,
    },
    /// IDX image/label files (MNIST layout).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        train_subset: Option<usize>,
        test_subset: Option<usize>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            samples: 5000,
            test_samples: 1000,
            features: 20,
            classes: 2,
            separation: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelChoice {
    pub kind: ModelKind,
    pub hidden: usize,
}

impl Default for ModelChoice {
    fn default() -> Self {
        Self {
            kind: ModelKind::LogisticRegression,
            hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub name: Option<String>,
    pub dataset: DatasetSpec,
    pub model: ModelChoice,
    pub clients: usize,
    pub rounds: usize,
    pub pipeline: CompressionPipeline,
    pub sampling: SamplingPolicy,
    pub train: TrainParams,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            name: None,
            dataset: DatasetSpec::default(),
            model: ModelChoice::default(),
            clients: 20,
            rounds: 100,
            pipeline: CompressionPipeline::dhqc(1.0),
            sampling: SamplingPolicy::Static { fraction: 0.5 },
            train: TrainParams::default(),
            seed: 0,
            output: None,
        }
    }
}

const KEYS: &[&str] = &[
    "name",
    "dataset",
    "samples",
    "test_samples",
    "features",
    "classes",
    "separation",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "train_subset",
    "test_subset",
    "model",
    "hidden",
    "clients",
    "rounds",
    "pipeline",
    "k",
    "threshold_scope",
    "reconstruct",
    "sampling",
    "fraction",
    "phi",
    "floor",
    "alpha",
    "batch_size",
    "local_epochs",
    "seed",
    "output",
];

struct Entries {
    map: HashMap<String, String>,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn parse<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
                key: key.into(),
                message: format!("`{raw}`: {e}"),
            }),
        }
    }

    fn choice(
        &mut self,
        key: &str,
        default: &str,
        allowed: &[&str],
    ) -> Result<String, ConfigError> {
        let v = self.take(key).unwrap_or_else(|| default.to_string());
        if allowed.contains(&v.as_str()) {
            Ok(v)
        } else {
            Err(ConfigError::InvalidValue {
                key: key.into(),
                message: format!("`{v}` is not one of {}", allowed.join("|")),
            })
        }
    }
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.into(),
        message: message.into(),
    }
}

impl SimConfig {
    /// Reads and validates a config file, checking that referenced data
    /// files exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::Config(ConfigError::FileNotFound(path.display().to_string()))
            }
            _ => Error::io(path, e),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let cfg = Self::parse(&text, base)?;
        cfg.check_files()?;
        Ok(cfg)
    }

    /// Parses config text; relative paths are joined onto `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut map = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: line_no })?;
            let key = key.trim();
            let value = value.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: line_no });
            }
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line: line_no,
                    key: key.into(),
                });
            }
            if map.insert(key.to_string(), value.to_string()).is_some() {
                return Err(ConfigError::DuplicateKey {
                    line: line_no,
                    key: key.into(),
                });
            }
        }
        let mut e = Entries { map };
        let d = SimConfig::default();
        let resolve = |p: String| -> PathBuf {
            let p = PathBuf::from(p);
            if p.is_relative() {
                base_dir.join(p)
            } else {
                p
            }
        };

        let name = e.take("name");
        let dataset = match e
            .choice("dataset", "synthetic", &["synthetic", "idx", "mnist"])?
            .as_str()
        {
            "synthetic" => {
                let DatasetSpec::Synthetic {
                    samples,
                    test_samples,
                    features,
                    classes,
                    separation,
                } = DatasetSpec::default()
                else {
                    unreachable!()
                };
                DatasetSpec::Synthetic {
                    samples: e.parse("samples", samples)?,
                    test_samples: e.parse("test_samples", test_samples)?,
                    features: e.parse("features", features)?,
                    classes: e.parse("classes", classes)?,
                    separation: e.parse("separation", separation)?,
                }
            }
            _ => {
                let mut path = |key: &str| {
                    e.take(key)
                        .map(&resolve)
                        .ok_or_else(|| ConfigError::Missing(key.into()))
                };
                let train_images = path("train_images")?;
                let train_labels = path("train_labels")?;
                let test_images = path("test_images")?;
                let test_labels = path("test_labels")?;
                DatasetSpec::Idx {
                    train_images,
                    train_labels,
                    test_images,
                    test_labels,
                    train_subset: Some(e.parse("train_subset", 2000)?).filter(|&n| n > 0),
                    test_subset: Some(e.parse("test_subset", 1000)?).filter(|&n| n > 0),
                }
            }
        };

        let model = ModelChoice {
            kind: match e
                .choice("model", "logistic", &["logistic", "mlp"])?
                .as_str()
            {
                "mlp" => ModelKind::Mlp1h,
                _ => ModelKind::LogisticRegression,
            },
            hidden: e.parse("hidden", d.model.hidden)?,
        };

        let k: f64 = e.parse("k", 1.0)?;
        let scope = match e
            .choice("threshold_scope", "global", &["global", "per-layer"])?
            .as_str()
        {
            "per-layer" => ThresholdScope::PerLayer,
            _ => ThresholdScope::Global,
        };
        let reconstruction = match e
            .choice("reconstruct", "lower", &["lower", "midpoint"])?
            .as_str()
        {
            "midpoint" => Reconstruction::Midpoint,
            _ => Reconstruction::LowerEdge,
        };
        let pipeline = match e
            .choice(
                "pipeline",
                "dhqc",
                &["identity", "sparsify", "ternary", "dhqc"],
            )?
            .as_str()
        {
            "identity" => CompressionPipeline::Identity,
            "ternary" => CompressionPipeline::Ternary,
            "sparsify" => CompressionPipeline::SparsifyOnly { k, scope },
            _ => CompressionPipeline::Dhqc {
                k,
                scope,
                reconstruction,
            },
        };

        let fraction = e.parse("fraction", 0.5)?;
        let phi = e.parse("phi", 0.1)?;
        let floor = e.parse("floor", DEFAULT_FLOOR)?;
        let sampling = match e
            .choice("sampling", "static", &["static", "dynamic"])?
            .as_str()
        {
            "dynamic" => SamplingPolicy::Dynamic { phi, floor },
            _ => SamplingPolicy::Static { fraction },
        };

        let cfg = SimConfig {
            name,
            dataset,
            model,
            clients: e.parse("clients", d.clients)?,
            rounds: e.parse("rounds", d.rounds)?,
            pipeline,
            sampling,
            train: TrainParams {
                alpha: e.parse("alpha", d.train.alpha)?,
                batch_size: e.parse("batch_size", d.train.batch_size)?,
                epochs: e.parse("local_epochs", d.train.epochs)?,
            },
            seed: e.parse("seed", d.seed)?,
            output: e.take("output").map(resolve),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.rounds == 0 {
            return Err(invalid("rounds", "must be >= 1"));
        }
        if self.clients == 0 {
            return Err(invalid("clients", "must be >= 1"));
        }
        if self.train.epochs == 0 {
            return Err(invalid("local_epochs", "must be >= 1"));
        }
        if self.train.batch_size == 0 {
            return Err(invalid("batch_size", "must be >= 1"));
        }
        if !(self.train.alpha.is_finite() && self.train.alpha >= 0.0) {
            return Err(invalid("alpha", "must be finite and >= 0"));
        }
        if self.model.kind == ModelKind::Mlp1h && self.model.hidden == 0 {
            return Err(invalid("hidden", "must be >= 1"));
        }
        match self.pipeline {
            CompressionPipeline::SparsifyOnly { k, .. } | CompressionPipeline::Dhqc { k, .. }
                if !(k > 0.0 && k <= 100.0) =>
            {
                return Err(invalid("k", format!("{k} outside (0, 100]")));
            }
            _ => {}
        }
        self.sampling
            .validate()
            .map_err(|e| invalid("sampling", e.to_string()))?;
        if let DatasetSpec::Synthetic {
            samples,
            features,
            classes,
            separation,
            ..
        } = self.dataset
        {
            if classes < 2 || features == 0 {
                return Err(invalid(
                    "classes",
                    "synthetic data needs >= 2 classes and >= 1 feature",
                ));
            }
            if samples < self.clients.max(classes) {
                return Err(invalid("samples", "fewer samples than clients or classes"));
            }
            if !(separation.is_finite() && separation >= 0.0) {
                return Err(invalid("separation", "must be finite and >= 0"));
            }
        }
        Ok(())
    }

    pub fn check_files(&self) -> Result<(), ConfigError> {
        if let DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = &self.dataset
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                if !p.is_file() {
                    return Err(ConfigError::FileNotFound(p.display().to_string()));
                }
            }
        }
        Ok(())
    }

    /// Short label for tables: the `name` key, else pipeline plus sampling.
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            let sampling = match self.sampling {
                SamplingPolicy::Static { .. } => "static",
                SamplingPolicy::Dynamic { .. } => "dynamic",
            };
            format!("{}-{sampling}", self.pipeline.name())
        })
    }

    /// Renders the config back into the file format.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(n) = &self.name {
            kv("name", n.clone());
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                samples,
                test_samples,
                features,
                classes,
                separation,
            } => {
                kv("dataset", "synthetic".into());
                kv("samples", samples.to_string());
                kv("test_samples", test_samples.to_string());
                kv("features", features.to_string());
                kv("classes", classes.to_string());
                kv("separation", separation.to_string());
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_subset,
                test_subset,
            } => {
                kv("dataset", "idx".into());
                kv("train_images", train_images.display().to_string());
                kv("train_labels", train_labels.display().to_string());
                kv("test_images", test_images.display().to_string());
                kv("test_labels", test_labels.display().to_string());
                kv("train_subset", train_subset.unwrap_or(0).to_string());
                kv("test_subset", test_subset.unwrap_or(0).to_string());
            }
        }
        kv(
            "model",
            match self.model.kind {
                ModelKind::LogisticRegression => "logistic",
                ModelKind::Mlp1h => "mlp",
            }
            .into(),
        );
        kv("hidden", self.model.hidden.to_string());
        kv("clients", self.clients.to_string());
        kv("rounds", self.rounds.to_string());
        kv("pipeline", self.pipeline.name().into());
        let scope_name = |s: ThresholdScope| match s {
            ThresholdScope::Global => "global",
            ThresholdScope::PerLayer => "per-layer",
        };
        match self.pipeline {
            CompressionPipeline::SparsifyOnly { k, scope } => {
                kv("k", k.to_string());
                kv("threshold_scope", scope_name(scope).into());
            }
            CompressionPipeline::Dhqc {
                k,
                scope,
                reconstruction,
            } => {
                kv("k", k.to_string());
                kv("threshold_scope", scope_name(scope).into());
                kv(
                    "reconstruct",
                    match reconstruction {
                        Reconstruction::LowerEdge => "lower",
                        Reconstruction::Midpoint => "midpoint",
                    }
                    .into(),
                );
            }
            _ => {}
        }
        match self.sampling {
            SamplingPolicy::Static { fraction } => {
                kv("sampling", "static".into());
                kv("fraction", fraction.to_string());
            }
            SamplingPolicy::Dynamic { phi, floor } => {
                kv("sampling", "dynamic".into());
                kv("phi", phi.to_string());
                kv("floor", floor.to_string());
            }
        }
        kv("alpha", self.train.alpha.to_string());
        kv("batch_size", self.train.batch_size.to_string());
        kv("local_epochs", self.train.epochs.to_string());
        kv("seed", self.seed.to_string());
        if let Some(o) = &self.output {
            kv("output", o.display().to_string());
        }
        s
    }
}
