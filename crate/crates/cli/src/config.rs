//! Run configuration: one TOML file, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use citeintent::kpt::RefinementConfig;
use citeintent::prompt::DEFAULT_PATTERN;
use citeintent::train::TrainConfig;
use citeintent::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSettings {
    /// Parsed-paper stream (JSON lines).
    pub input: Option<PathBuf>,
    pub quota: usize,
    pub field_of_study: Option<String>,
    pub section_aliases: Option<PathBuf>,
    /// Corpus archive directory, written by `ingest-corpus`.
    pub archive: Option<PathBuf>,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        CorpusSettings {
            input: None,
            quota: 100_000,
            field_of_study: None,
            section_aliases: None,
            archive: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerbalizerSettings {
    /// Verbalizer file consumed by training, evaluation and prediction.
    pub path: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub anchors: Option<PathBuf>,
    pub section_map: Option<PathBuf>,
    pub k: usize,
}

impl Default for VerbalizerSettings {
    fn default() -> Self {
        VerbalizerSettings {
            path: None,
            embeddings: None,
            anchors: None,
            section_map: None,
            k: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    pub template: String,
    /// Model identity: path to a checkpoint file.
    pub mlm: Option<String>,
    pub output_dir: PathBuf,
    pub data: DataPaths,
    pub corpus: CorpusSettings,
    pub verbalizer: VerbalizerSettings,
    pub refinement: RefinementConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema: "scicite".into(),
            template: DEFAULT_PATTERN.into(),
            mlm: None,
            output_dir: PathBuf::from("out"),
            data: DataPaths::default(),
            corpus: CorpusSettings::default(),
            verbalizer: VerbalizerSettings::default(),
            refinement: RefinementConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn parse(raw: &str) -> Result<Self> {
        toml::from_str(raw).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    /// Reads a config file; relative paths in it are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&raw)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.data.train,
            &mut self.data.dev,
            &mut self.data.test,
            &mut self.corpus.input,
            &mut self.corpus.section_aliases,
            &mut self.corpus.archive,
            &mut self.verbalizer.path,
            &mut self.verbalizer.embeddings,
            &mut self.verbalizer.anchors,
            &mut self.verbalizer.section_map,
        ] {
            rebase(base, p);
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
        if let Some(m) = &self.mlm {
            let candidate = base.join(m);
            if Path::new(m).is_relative() && candidate.exists() {
                self.mlm = Some(candidate.to_string_lossy().into_owned());
            }
        }
    }

    /// Checks values and that every pure input file named in the config
    /// exists. Artifacts produced by other commands (corpus archive,
    /// verbalizer, model) are checked by the commands that read them.
    pub fn validate(&self) -> Result<()> {
        citeintent::dataset::LabelSchema::builtin(&self.schema)?;
        citeintent::prompt::PromptTemplate::from_pattern(&self.template)
            .map_err(|e| Error::InvalidArgument(format!("template: {e}")))?;
        self.refinement.validate()?;
        self.train.validate()?;
        if self.corpus.quota == 0 {
            return Err(Error::InvalidArgument("corpus quota must be positive".into()));
        }
        if self.verbalizer.k == 0 {
            return Err(Error::InvalidArgument("verbalizer k must be positive".into()));
        }
        let inputs = [
            ("data.train", &self.data.train),
            ("data.dev", &self.data.dev),
            ("data.test", &self.data.test),
            ("corpus.input", &self.corpus.input),
            ("corpus.section_aliases", &self.corpus.section_aliases),
            ("verbalizer.embeddings", &self.verbalizer.embeddings),
            ("verbalizer.anchors", &self.verbalizer.anchors),
            ("verbalizer.section_map", &self.verbalizer.section_map),
        ];
        for (key, p) in inputs {
            if let Some(p) = p {
                require_exists(key, p)?;
            }
        }
        Ok(())
    }

    /// Resolved config as embedded in output artifacts.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}

pub fn require_exists(key: &str, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidData(format!("{key}: {} does not exist", path.display())))
    }
}

/// Returns the configured value or a usage error naming the missing key.
pub fn required<'a, T: ?Sized>(value: Option<&'a T>, key: &str) -> Result<&'a T> {
    value.ok_or_else(|| Error::InvalidArgument(format!("`{key}` is not set (config file or flag)")))
}
