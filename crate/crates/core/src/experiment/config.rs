use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{Variant, PRETRAINED_DIR_ENV};
use crate::dataset::{DepthEncoding, Layout, Modality, SplitSpec, SynthSpec, N_FOLDS};
use crate::error::{Error, Result};
use crate::evaluation::ProtocolSpec;
use crate::training::{InitKind, ModelSpec, Scenario, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Distill,
    OneStream,
    ZeroPad,
    SingleModal,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Distill => "distill",
            Method::OneStream => "one-stream",
            Method::ZeroPad => "zero-pad",
            Method::SingleModal => "single-modal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TransferDirection {
    DepthToRgb,
    RgbToDepth,
}

impl TransferDirection {
    pub fn teacher(self) -> Modality {
        match self {
            TransferDirection::DepthToRgb => Modality::Depth,
            TransferDirection::RgbToDepth => Modality::Rgb,
        }
    }

    pub fn student(self) -> Modality {
        self.teacher().other()
    }
}

impl fmt::Display for TransferDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-to-{}", self.teacher(), self.student())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DatasetSource {
    #[default]
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub synthetic: SynthSpec,
    /// Held-out test identities of a synthetic dataset.
    pub n_test: u32,
    /// Validation identities per fold. Defaults to 10 for RobotPKU and 8
    /// otherwise.
    pub n_val: Option<usize>,
    pub root: Option<PathBuf>,
    pub layout: Option<Layout>,
    /// Directory holding `design.txt` and `test.txt`. Required for
    /// `SYNTHETIC_DIR` data unless `<root>/splits` exists.
    pub split_dir: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DatasetSource::Synthetic,
            synthetic: SynthSpec::default(),
            n_test: 16,
            n_val: None,
            root: None,
            layout: None,
            split_dir: None,
        }
    }
}

impl DatasetConfig {
    fn n_val(&self) -> usize {
        self.n_val.unwrap_or(match (self.source, self.layout) {
            (DatasetSource::Directory, Some(Layout::RobotPku)) => 10,
            _ => 8,
        })
    }

    fn split_dir(&self) -> Option<PathBuf> {
        self.split_dir
            .clone()
            .or_else(|| self.root.as_ref().map(|r| r.join("splits")).filter(|p| p.is_dir()))
    }

    /// Identity partition for this dataset.
    pub fn split(&self) -> Result<SplitSpec> {
        match self.source {
            DatasetSource::Synthetic => SplitSpec::synthetic(self.synthetic.n_identities, self.n_test, self.n_val()),
            DatasetSource::Directory => match (self.split_dir(), self.layout) {
                (Some(dir), _) => SplitSpec::from_dir(&dir, self.n_val()),
                (None, Some(Layout::Biwi)) => with_n_val(SplitSpec::biwi(), self.n_val()),
                (None, Some(Layout::RobotPku)) => with_n_val(SplitSpec::robotpku(), self.n_val()),
                _ => Err(Error::Config("dataset.split_dir is required for this layout".into())),
            },
        }
    }

    fn problems(&self, out: &mut Vec<String>) {
        match self.source {
            DatasetSource::Synthetic => {
                if let Err(e) = self.synthetic.validate() {
                    let msg = match e {
                        Error::Config(m) => m,
                        other => other.to_string(),
                    };
                    out.push(format!("dataset.synthetic: {msg}"));
                }
                if self.n_test == 0 || self.n_test >= self.synthetic.n_identities {
                    out.push(format!(
                        "dataset.n_test = {} must be in 1..{}",
                        self.n_test, self.synthetic.n_identities
                    ));
                }
            }
            DatasetSource::Directory => {
                match &self.root {
                    None => out.push("dataset.root is required for DIRECTORY data".into()),
                    Some(r) if !r.is_dir() => out.push(format!("dataset.root `{}` is not a directory", r.display())),
                    Some(_) => {}
                }
                if self.layout.is_none() {
                    out.push("dataset.layout is required for DIRECTORY data".into());
                }
                if let Some(d) = &self.split_dir {
                    if !d.is_dir() {
                        out.push(format!("dataset.split_dir `{}` is not a directory", d.display()));
                    }
                }
            }
        }
        if self.n_val() == 0 {
            out.push("dataset.n_val must be at least 1".into());
        }
    }
}

fn with_n_val(spec: SplitSpec, n_val: usize) -> Result<SplitSpec> {
    SplitSpec::new(spec.design_ids, spec.test_ids, n_val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessingConfig {
    /// Fractional bounding-box margin.
    pub margin: f32,
    pub depth_encoding: DepthEncoding,
    /// Estimate per-channel normalisation on the design identities. Without
    /// it, pixels keep their raw scale.
    pub estimate_stats: bool,
}

impl Default for PreprocessingConfig {
    fn default() -> Self {
        Self {
            margin: 0.10,
            depth_encoding: DepthEncoding::default(),
            estimate_stats: true,
        }
    }
}

/// Everything one run needs. `train.seed` and `protocol.seed` are replaced
/// per fold by seeds derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub method: Method,
    pub transfer_direction: Option<TransferDirection>,
    pub scenario: Scenario,
    /// Modalities trained and evaluated by `SINGLE_MODAL`.
    pub single_modalities: Vec<Modality>,
    pub n_folds: usize,
    pub dataset: DatasetConfig,
    pub preprocessing: PreprocessingConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub protocol: ProtocolSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment_id: "experiment".into(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            method: Method::Distill,
            transfer_direction: Some(TransferDirection::DepthToRgb),
            scenario: Scenario::COPY_FREEZE,
            single_modalities: vec![Modality::Rgb, Modality::Depth],
            n_folds: N_FOLDS,
            dataset: DatasetConfig::default(),
            preprocessing: PreprocessingConfig::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            protocol: ProtocolSpec::default(),
        }
    }
}

/// Parses a `key.path=value` override. The value is read as a TOML value and
/// falls back to a plain string.
fn parse_override(item: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{item}` is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override `{item}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("nonempty key");
    let mut cur = table;
    for seg in parents {
        let entry = cur
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{}`: `{seg}` is not a table", path.join("."))))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
        for item in overrides {
            let (path, value) = parse_override(item)?;
            apply_override(&mut table, &path, value)?;
        }
        // reparse the merged text so errors point at the offending key
        let merged = toml::to_string(&table).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        let cfg: ExperimentConfig =
            toml::from_str(&merged).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is TOML-serialisable")
    }

    /// Every violated constraint, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.experiment_id.is_empty()
            || !self
                .experiment_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            out.push(format!(
                "experiment_id `{}` must be nonempty and use only [A-Za-z0-9._-]",
                self.experiment_id
            ));
        }
        if self.n_folds == 0 || self.n_folds > N_FOLDS {
            out.push(format!("n_folds = {} must be in 1..={N_FOLDS}", self.n_folds));
        }
        if self.method == Method::Distill && self.transfer_direction.is_none() {
            out.push("transfer_direction is required when method = DISTILL".into());
        }
        if self.method == Method::SingleModal && self.single_modalities.is_empty() {
            out.push("single_modalities must name at least one modality for SINGLE_MODAL".into());
        }
        self.dataset.problems(&mut out);
        if !(0.0..=1.0).contains(&self.preprocessing.margin) {
            out.push(format!("preprocessing.margin = {} must be in [0, 1]", self.preprocessing.margin));
        }
        if self.model.embedding_dim == 0 {
            out.push("model.embedding_dim must be positive".into());
        }
        if self.model.init == InitKind::Pretrained {
            if self.model.variant == Variant::Tiny {
                out.push("model.init = PRETRAINED is not available for the TINY variant".into());
            }
            if let Some(p) = &self.model.pretrained_path {
                if !p.is_file() {
                    out.push(format!("model.pretrained_path `{}` does not exist", p.display()));
                }
            } else if std::env::var_os(PRETRAINED_DIR_ENV).is_none() {
                out.push(format!(
                    "model.init = PRETRAINED needs model.pretrained_path or {PRETRAINED_DIR_ENV}"
                ));
            }
        }
        out.extend(self.train.problems());
        if let Err(Error::Config(m)) = self.protocol.validate() {
            out.push(format!("protocol.{m}"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("\n")))
        }
    }

    /// `<output_dir>/<experiment_id>`.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.experiment_id)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_uppercase().replace('-', "_")))
            .map_err(|_| Error::Config(format!("method `{s}` is not one of DISTILL, ONE_STREAM, ZERO_PAD, SINGLE_MODAL")))
    }
}
