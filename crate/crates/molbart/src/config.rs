//! The run configuration document.
//!
//! A run is described by one TOML file with a mandatory `config_version`
//! and one table per stage. Unknown keys are rejected everywhere; missing
//! keys take their defaults. `--set dotted.key=value` overrides are applied
//! to the parsed document before it is checked, so they obey the same rules.

use std::path::{Path, PathBuf};

use molbart_core::corrupt::NoiseConfig;
use molbart_core::finetune::{r3f_sweep, GenerativeConfig, GridSpec, Metric, R3FConfig, TaskKind, TaskSpec};
use molbart_core::generate::{BeamConfig, SampleConfig};
use molbart_core::interpret::{default_c_grid, Baseline, DistanceConfig, IgTarget, ProbeConfig};
use molbart_core::model::{ModelConfig, TrainConfig};
use molbart_core::tokenizer::UnigramConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable naming the directory relative `run.output_dir`
/// values are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "MOLBART_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub tokenizer: UnigramConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub generative: GenerativeConfig,
    #[serde(default = "r3f_sweep")]
    pub r3f: Vec<R3FConfig>,
    #[serde(default)]
    pub generate: GenerateSection,
    #[serde(default)]
    pub attribute: AttributeSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub distance: DistanceSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub output_dir: PathBuf,
    /// Seed for model initialization, fine-tuning, splits and probing.
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { output_dir: PathBuf::from("run"), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SplitMethod {
    #[default]
    Scaffold,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Newline-separated SMILES files fed to `dedup`.
    pub corpus: Vec<PathBuf>,
    pub shards: usize,
    /// Labelled CSV for fine-tuning, evaluation, attribution and probing.
    pub dataset: Option<PathBuf>,
    pub split: SplitMethod,
    /// Train, valid and test fractions.
    pub fractions: (f64, f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { corpus: Vec::new(), shards: 16, dataset: None, split: SplitMethod::Scaffold, fractions: (0.8, 0.1, 0.1) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub checkpoint_every: u64,
    /// Corpus molecules used for the final masked-token recovery check.
    pub eval_molecules: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection { checkpoint_every: 100, eval_molecules: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Beam,
    Sample,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Beam => "beam",
            Strategy::Sample => "sample",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub strategy: Strategy,
    pub beam: BeamConfig,
    pub sample: SampleConfig,
    /// SMILES inputs, one per line.
    pub input: Option<PathBuf>,
    /// Sequence task whose fine-tuned model decodes; the latest
    /// pretraining checkpoint when unset.
    pub task: Option<String>,
    pub topk: Vec<usize>,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection {
            strategy: Strategy::Beam,
            beam: BeamConfig::default(),
            sample: SampleConfig::default(),
            input: None,
            task: None,
            topk: vec![1, 3, 5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributeSection {
    /// Fine-tuned task to explain; the first sentence-level task when unset.
    pub task: Option<String>,
    pub baseline: Baseline,
    pub target: IgTarget,
    pub steps: usize,
    /// Test-split molecules explained (all when 0).
    pub molecules: usize,
}

impl Default for AttributeSection {
    fn default() -> Self {
        AttributeSection { task: None, baseline: Baseline::Pad, target: IgTarget::Contrastive, steps: 50, molecules: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    /// Binary label column of the dataset; the first task's when unset.
    pub label: Option<String>,
    pub c_grid: Vec<f64>,
    pub solver: ProbeConfig,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection { label: None, c_grid: default_c_grid(), solver: ProbeConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DistanceSection {
    /// Newline-SMILES files, one representation cloud each.
    pub datasets: Vec<PathBuf>,
    pub sampling: DistanceConfig,
}

impl RunConfig {
    /// Reads `path`, applies `overrides` and resolves relative input paths
    /// against the file's directory and `output_dir` against `output_root`
    /// (falling back to the current directory).
    pub fn load(path: &Path, overrides: &[String], output_root: Option<&Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str_with(&text, overrides, &base, output_root)
    }

    pub fn from_str_with(text: &str, overrides: &[String], base: &Path, output_root: Option<&Path>) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::ConfigInvalid(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: RunConfig =
            toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| CliError::ConfigInvalid(e.to_string()))?;
        cfg.resolve_paths(base, output_root)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path, output_root: Option<&Path>) -> Result<()> {
        let cwd = std::env::current_dir().map_err(CliError::io("."))?;
        let abs = |p: &Path, root: &Path| if p.is_absolute() { p.to_path_buf() } else { cwd.join(root).join(p) };
        for p in &mut self.data.corpus {
            *p = abs(p, base);
        }
        if let Some(p) = &mut self.data.dataset {
            *p = abs(p, base);
        }
        if let Some(p) = &mut self.generate.input {
            *p = abs(p, base);
        }
        for p in &mut self.distance.datasets {
            *p = abs(p, base);
        }
        self.run.output_dir = abs(&self.run.output_dir, output_root.unwrap_or(Path::new("")));
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::ConfigInvalid(m));
        if self.config_version != CONFIG_VERSION {
            return bad(format!("config_version {} is not supported (expected {CONFIG_VERSION})", self.config_version));
        }
        if self.data.shards == 0 {
            return bad("data.shards must be positive".into());
        }
        self.noise.validate().map_err(|e| CliError::ConfigInvalid(format!("noise: {e}")))?;
        self.train.validate().map_err(|e| CliError::ConfigInvalid(format!("train: {e}")))?;
        let mut probe = self.model.clone();
        if probe.vocab_size == 0 {
            probe.vocab_size = molbart_core::tokenizer::NUM_SPECIAL + 1;
        }
        probe.validate().map_err(|e| CliError::ConfigInvalid(format!("model: {e}")))?;
        let mut names = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !names.insert(t.name.as_str()) {
                return bad(format!("task {:?} is defined twice", t.name));
            }
            if t.name.is_empty() || t.name.contains(['/', '\\']) || t.name.starts_with('.') {
                return bad(format!("task name {:?} is not usable as a directory name", t.name));
            }
            if t.label_columns.len() != 1 {
                return bad(format!("task {:?} needs exactly one label column", t.name));
            }
            let metric_ok = matches!(
                (t.kind, t.metric),
                (TaskKind::Classification { .. }, Metric::AucRoc)
                    | (TaskKind::Regression, Metric::Rmse)
                    | (TaskKind::Seq2Seq, Metric::TopkExact)
            );
            if !metric_ok {
                return bad(format!("task {:?}: metric {:?} does not fit its kind", t.name, t.metric));
            }
            if !matches!(t.kind, TaskKind::Seq2Seq) {
                t.head().map_err(|e| CliError::ConfigInvalid(format!("task {:?}: {e}", t.name)))?;
            }
        }
        for r in &self.r3f {
            r.validate().map_err(|e| CliError::ConfigInvalid(format!("r3f: {e}")))?;
        }
        if self.attribute.steps == 0 {
            return bad("attribute.steps must be positive".into());
        }
        Ok(())
    }

    /// Tasks with a prediction head.
    pub fn sentence_tasks(&self) -> Vec<&TaskSpec> {
        self.tasks.iter().filter(|t| !matches!(t.kind, TaskKind::Seq2Seq)).collect()
    }

    pub fn task(&self, name: &str) -> Result<&TaskSpec> {
        self.tasks.iter().find(|t| t.name == name).ok_or_else(|| CliError::ConfigInvalid(format!("no task named {name:?}")))
    }

    /// The fully resolved document.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::ConfigInvalid(format!("cannot serialize config: {e}")))
    }

    /// Every seed the run uses, by role.
    pub fn seeds(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("run", self.run.seed),
            ("tokenizer", self.tokenizer.rng_seed),
            ("noise", self.noise.rng_seed),
            ("train", self.train.seed),
            ("distance", self.distance.sampling.seed),
        ]
    }
}

/// Sets `a.b.c = value` in `doc`. The value is read as a TOML value when
/// it parses as one and as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::ConfigInvalid(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::ConfigInvalid(format!("bad override key {key:?}")));
    }
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just parsed"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::ConfigInvalid(format!("override {key:?}: {p:?} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
