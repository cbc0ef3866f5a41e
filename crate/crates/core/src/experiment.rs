//! Seed-averaged experiment runs and their reports.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_few_shot, Dataset, Label};
use crate::error::{Error, Result};
use crate::kpt::{estimate_priors, PriorEstimate};
use crate::metrics::confusion_report;
use crate::prompt::{MaskedLanguageModel, PromptTemplate};
use crate::train::{evaluate, fine_tune, Regime, TrainConfig};
use crate::verbalizer::Verbalizer;

pub struct ExperimentInputs<'a> {
    pub mlm: &'a dyn MaskedLanguageModel,
    pub verbalizer: &'a Verbalizer,
    pub template: &'a PromptTemplate,
    /// Labeled training split; its texts double as the unlabeled
    /// calibration support set.
    pub train: Option<&'a Dataset>,
    pub test: &'a Dataset,
    pub support_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub train_size: usize,
    pub epoch_losses: Vec<f64>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: Vec<Vec<u64>>,
    pub confusion_percent: Vec<Vec<f64>>,
    pub model_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool_version: String,
    pub regime: Regime,
    pub schema: String,
    pub labels: Vec<Label>,
    pub model: String,
    pub verbalizer_fingerprint: String,
    pub template: String,
    pub test_size: usize,
    pub calibrated: bool,
    pub per_seed: Vec<SeedResult>,
    pub mean_accuracy: f64,
    pub mean_macro_f1: f64,
    pub mean_confusion_percent: Vec<Vec<f64>>,
    pub config: serde_json::Value,
}

/// Outcome of a single seed, including the trained artifacts.
pub struct SeedRun {
    pub model: Box<dyn MaskedLanguageModel>,
    pub verbalizer: Verbalizer,
    pub train_size: usize,
    pub epoch_losses: Vec<f64>,
    pub calibration: Option<PriorEstimate>,
}

/// Up to `n` unlabeled train texts, drawn by a seeded shuffle.
pub fn support_texts(train: &Dataset, n: usize, seed: u64) -> Vec<String> {
    let mut idx: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(n);
    idx.sort_unstable();
    idx.into_iter().map(|i| train.instances()[i].text.clone()).collect()
}

/// Trains (unless zero-shot) and estimates calibration priors for one seed.
pub fn run_seed(inputs: &ExperimentInputs<'_>, config: &TrainConfig, seed: u64) -> Result<SeedRun> {
    let mut model = inputs.mlm.clone_box();
    let before = model.parameter_fingerprint();
    let (verbalizer, train_size, epoch_losses) = match config.regime {
        Regime::ZeroShot => (inputs.verbalizer.clone(), 0, Vec::new()),
        Regime::Supervised | Regime::KShot(_) => {
            let train = inputs
                .train
                .ok_or_else(|| Error::InvalidArgument(format!("{} runs need a train split", config.regime)))?;
            let subset;
            let train = match config.regime {
                Regime::KShot(k) => {
                    subset = sample_few_shot(train, k, seed)?;
                    &subset
                }
                _ => train,
            };
            let out = fine_tune(model.as_mut(), inputs.verbalizer, inputs.template, train, config, seed)?;
            (out.verbalizer, train.len(), out.epoch_losses)
        }
    };
    if config.regime == Regime::ZeroShot && model.parameter_fingerprint() != before {
        return Err(Error::Model("zero-shot run mutated model parameters".into()));
    }
    let calibration = if config.calibration_enabled() {
        let train = inputs.train.ok_or_else(|| {
            Error::InvalidArgument("calibration needs a train split to draw unlabeled support texts from".into())
        })?;
        let texts = support_texts(train, inputs.support_size, seed);
        Some(estimate_priors(
            model.as_ref(),
            inputs.template,
            &texts,
            &verbalizer,
            config.max_sequence_length,
        )?)
    } else {
        None
    };
    Ok(SeedRun {
        model,
        verbalizer,
        train_size,
        epoch_losses,
        calibration,
    })
}

/// Runs every configured seed and averages. Any failing seed aborts the run.
pub fn run_experiment(
    inputs: &ExperimentInputs<'_>,
    config: &TrainConfig,
    config_snapshot: serde_json::Value,
) -> Result<EvalReport> {
    config.validate()?;
    if inputs.support_size == 0 {
        return Err(Error::InvalidArgument("support_size must be positive".into()));
    }
    let schema = inputs.test.schema();
    inputs.verbalizer.ensure_schema(schema)?;
    let mut per_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        log::info!("seed {seed}: {} run", config.regime);
        let run = run_seed(inputs, config, seed)?;
        let eval = evaluate(
            run.model.as_ref(),
            &run.verbalizer,
            inputs.template,
            inputs.test,
            run.calibration.as_ref(),
            config.max_sequence_length,
        )?;
        per_seed.push(SeedResult {
            seed,
            train_size: run.train_size,
            epoch_losses: run.epoch_losses,
            accuracy: eval.accuracy,
            macro_f1: eval.macro_f1,
            confusion: eval.confusion.counts().to_vec(),
            confusion_percent: confusion_report(&eval.confusion),
            model_fingerprint: run.model.parameter_fingerprint(),
        });
    }
    let n = per_seed.len() as f64;
    let l = schema.len();
    let mut mean_confusion = vec![vec![0.0; l]; l];
    for r in &per_seed {
        for (acc, row) in mean_confusion.iter_mut().zip(&r.confusion_percent) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v / n;
            }
        }
    }
    Ok(EvalReport {
        tool_version: crate::TOOL_VERSION.to_string(),
        regime: config.regime,
        schema: schema.name().to_string(),
        labels: schema.labels().to_vec(),
        model: inputs.mlm.identity().to_string(),
        verbalizer_fingerprint: inputs.verbalizer.fingerprint(),
        template: inputs.template.pattern().to_string(),
        test_size: inputs.test.len(),
        calibrated: config.calibration_enabled(),
        mean_accuracy: per_seed.iter().map(|r| r.accuracy).sum::<f64>() / n,
        mean_macro_f1: per_seed.iter().map(|r| r.macro_f1).sum::<f64>() / n,
        per_seed,
        mean_confusion_percent: mean_confusion,
        config: config_snapshot,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::json("eval report", e))
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        serde_json::from_str(raw).map_err(|e| Error::json("eval report", e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&raw)
    }

    /// Metrics as percentages, one row per seed plus the mean, followed by
    /// the mean row-normalized confusion matrix.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "citeintent {} | {} | schema {} | model {}", self.tool_version, self.regime, self.schema, self.model);
        let _ = writeln!(s, "test instances: {} | calibrated: {}", self.test_size, self.calibrated);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:>8}  {:>9}  {:>9}", "seed", "accuracy", "macro-F1");
        for r in &self.per_seed {
            let _ = writeln!(s, "{:>8}  {:>9.2}  {:>9.2}", r.seed, 100.0 * r.accuracy, 100.0 * r.macro_f1);
        }
        let _ = writeln!(s, "{:>8}  {:>9.2}  {:>9.2}", "mean", 100.0 * self.mean_accuracy, 100.0 * self.mean_macro_f1);
        let _ = writeln!(s);
        let _ = writeln!(s, "confusion (row-normalized %, rows = gold, columns = predicted)");
        let width = self.labels.iter().map(|l| l.as_str().len()).max().unwrap_or(4).max(7);
        let _ = write!(s, "{:>width$}", "");
        for l in &self.labels {
            let _ = write!(s, "  {:>width$}", l.as_str());
        }
        let _ = writeln!(s);
        for (l, row) in self.labels.iter().zip(&self.mean_confusion_percent) {
            let _ = write!(s, "{:>width$}", l.as_str());
            for v in row {
                let _ = write!(s, "  {:>width$.1}", v);
            }
            let _ = writeln!(s);
        }
        s
    }

    /// Mean row-normalized confusion matrix as CSV.
    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("gold");
        for l in &self.labels {
            s.push(',');
            s.push_str(l.as_str());
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.mean_confusion_percent) {
            s.push_str(l.as_str());
            for v in row {
                let _ = write!(s, ",{v:.4}");
            }
            s.push('\n');
        }
        s
    }

    /// Writes `report.json`, `report.txt` and `confusion.csv` into `dir`.
    pub fn write_all(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("report.json", self.to_json()?),
            ("report.txt", self.to_text()),
            ("confusion.csv", self.confusion_csv()),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}
