//! Experiment configuration: TOML schema, flag overrides, provenance hash.
//!
//! A config file fully determines an experiment. Unknown keys are rejected
//! so a typo cannot silently fall back to a default, and the resolved config
//! (after flag overrides) is hashed; every artifact carries that hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use itl::{BlobSpec, BufferStrategy, Dtype, Error, Result, TrainConfig, Variant};

/// Data source: synthetic blobs generated on the fly, or dataset files
/// produced by `itl gen`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Seed for synthetic generation; independent of the training seeds.
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    10
}
fn default_dim() -> usize {
    2
}
fn default_train_per_class() -> usize {
    500
}
fn default_test_per_class() -> usize {
    200
}
fn default_radius() -> f64 {
    5.0
}
fn default_sigma() -> f64 {
    1.0
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train: None,
            test: None,
            classes: default_classes(),
            dim: default_dim(),
            train_per_class: default_train_per_class(),
            test_per_class: default_test_per_class(),
            radius: default_radius(),
            sigma: default_sigma(),
            seed: 0,
        }
    }
}

impl DataSection {
    pub fn blob_spec(&self) -> BlobSpec {
        BlobSpec {
            num_classes: self.classes,
            dim: self.dim,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            radius: self.radius,
            sigma: self.sigma,
            seed: self.seed,
        }
    }

    pub fn is_file_based(&self) -> Result<bool> {
        match (&self.train, &self.test) {
            (Some(_), Some(_)) => Ok(true),
            (None, None) => Ok(false),
            _ => Err(Error::Config(
                "data.train and data.test must be given together".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSection {
    #[serde(default = "default_tasks")]
    pub tasks: usize,
}

fn default_tasks() -> usize {
    5
}

impl Default for StreamSection {
    fn default() -> Self {
        StreamSection { tasks: default_tasks() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Mlp,
    Cnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_arch")]
    pub arch: ArchKind,
    /// Hidden widths for the MLP.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Conv channels for the CNN (two blocks).
    #[serde(default = "default_channels")]
    pub channels: [usize; 2],
}

fn default_arch() -> ArchKind {
    ArchKind::Mlp
}
fn default_hidden() -> Vec<usize> {
    vec![64, 32]
}
fn default_channels() -> [usize; 2] {
    [8, 16]
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: default_arch(),
            hidden: default_hidden(),
            channels: default_channels(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Stratified,
    Reservoir,
    Entropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferSection {
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    #[serde(default = "default_strategy")]
    pub strategy: StrategyKind,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_capacity() -> usize {
    50
}
fn default_strategy() -> StrategyKind {
    StrategyKind::Stratified
}
fn default_temperature() -> f64 {
    1.0
}

impl Default for BufferSection {
    fn default() -> Self {
        BufferSection {
            capacity: default_capacity(),
            strategy: default_strategy(),
            temperature: default_temperature(),
        }
    }
}

impl BufferSection {
    pub fn strategy(&self) -> BufferStrategy {
        match self.strategy {
            StrategyKind::Stratified => BufferStrategy::Stratified,
            StrategyKind::Reservoir => BufferStrategy::Reservoir,
            StrategyKind::Entropy => BufferStrategy::Entropy { temperature: self.temperature },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_precision")]
    pub precision: Dtype,
    #[serde(flatten)]
    pub train: TrainConfig,
}

fn default_precision() -> Dtype {
    Dtype::F32
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { precision: default_precision(), train: TrainConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_variants")]
    pub variants: Vec<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn default_variants() -> Vec<String> {
    vec!["ITL".into()]
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { variants: default_variants(), seeds: default_seeds(), out_dir: None }
    }
}

/// The full experiment file. Every section is optional in the TOML and
/// falls back to its defaults; unknown keys anywhere are an error.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub stream: StreamSection,
    pub model: ModelSection,
    pub buffer: BufferSection,
    pub train: TrainSection,
    pub run: RunSection,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {}", e)))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config encode: {}", e)))
    }

    /// Cheap structural validation before any training or file output.
    pub fn validate(&self) -> Result<()> {
        self.train.train.validate()?;
        self.data.is_file_based()?;
        self.data.blob_spec().validate()?;
        if self.stream.tasks == 0 {
            return Err(Error::Config("stream.tasks must be positive".into()));
        }
        if self.buffer.capacity == 0 {
            return Err(Error::Config("buffer.capacity must be positive".into()));
        }
        if !(self.buffer.temperature.is_finite() && self.buffer.temperature > 0.0) {
            return Err(Error::Config("buffer.temperature must be positive".into()));
        }
        if self.model.arch == ArchKind::Mlp && self.model.hidden.is_empty() {
            return Err(Error::Config("model.hidden must list at least one width".into()));
        }
        if self.run.variants.is_empty() {
            return Err(Error::Config("run.variants must list at least one variant".into()));
        }
        for v in &self.run.variants {
            v.parse::<Variant>()?;
        }
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must list at least one seed".into()));
        }
        let mut sorted = self.run.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("run.seeds contains a duplicate".into()));
        }
        Ok(())
    }

    pub fn variants(&self) -> Vec<Variant> {
        // validate() has checked these parse.
        self.run.variants.iter().map(|v| v.parse().expect("validated variant")).collect()
    }

    /// Hash of the resolved config text: the provenance token stamped onto
    /// every artifact. First 16 hex digits of SHA-256.
    pub fn hash(&self) -> Result<String> {
        hash_value(self)
    }
}

/// Provenance hash of any serializable value via its canonical TOML form.
pub fn hash_value<T: Serialize>(value: &T) -> Result<String> {
    let canon =
        toml::to_string_pretty(value).map_err(|e| Error::Config(format!("hash encode: {}", e)))?;
    let digest = Sha256::digest(canon.as_bytes());
    let mut out = String::with_capacity(16);
    for b in &digest[..8] {
        out.push_str(&format!("{:02x}", b));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_resolves_to_defaults_and_validates() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
        assert_eq!(cfg.buffer.capacity, 50);
        assert_eq!(cfg.train.precision, Dtype::F32);
        assert_eq!(cfg.run.seeds, vec![0, 1, 2]);
    }

    #[test]
    fn parse_serialize_parse_is_identity() {
        let text = r#"
            [data]
            classes = 4
            train_per_class = 40
            sigma = 0.8

            [stream]
            tasks = 2

            [model]
            arch = "mlp"
            hidden = [16]

            [buffer]
            capacity = 16
            strategy = "entropy"
            temperature = 2.0

            [train]
            precision = "f64"
            lr_specialist = 0.02
            epochs_specialist = 5

            [run]
            variants = ["B", "ITL"]
            seeds = [7]
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let round = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(round, cfg);
        assert_eq!(round.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        for text in [
            "banana = 1",
            "[data]\nbananas = 2",
            "[train]\nlr_specials = 0.1",
            "[run]\nvariant = \"B\"",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))),
                "accepted: {}",
                text
            );
        }
    }

    #[test]
    fn validation_rejects_inconsistent_sections() {
        let mut cfg = ExperimentConfig::default();
        cfg.run.variants = vec!["ITL".into(), "nope".into()];
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.run.seeds = vec![1, 1];
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.data.train = Some("only-train.bin".into());
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.model.hidden.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content_not_formatting() {
        let a = ExperimentConfig::from_toml("[buffer]\ncapacity = 50").unwrap();
        let b = ExperimentConfig::from_toml("[buffer]\n\ncapacity   = 50\n").unwrap();
        let c = ExperimentConfig::from_toml("[buffer]\ncapacity = 51").unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 16);
    }
}
