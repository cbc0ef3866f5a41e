//! Fine-tuning and evaluation.
//!
//! Training minimizes cross-entropy over label logits `ln score(y)`, i.e.
//! `L = -ln(score(gold) / Σ_y score(y))`, jointly in the model parameters
//! and the label-word weights. Label-word weights are projected back onto
//! the within-label simplex after every update.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabelSchema};
use crate::error::{Error, Result};
use crate::kpt::{calibrate, PriorEstimate};
use crate::metrics::{accuracy, macro_f1, ConfusionMatrix};
use crate::prompt::{
    predict_mask, tokenize_prompt, DifferentiableMlm, MaskedLanguageModel, PromptTemplate, TokenizedPrompt,
};
use crate::verbalizer::{argmax, ResolvedVerbalizer, Verbalizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Regime {
    Supervised,
    KShot(usize),
    ZeroShot,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Supervised => f.write_str("supervised"),
            Regime::KShot(k) => write!(f, "{k}-shot"),
            Regime::ZeroShot => f.write_str("zero-shot"),
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_lowercase().replace('_', "-");
        match s.as_str() {
            "supervised" | "full" => return Ok(Regime::Supervised),
            "zero-shot" | "zeroshot" | "0-shot" => return Ok(Regime::ZeroShot),
            _ => {}
        }
        let k = s
            .strip_suffix("-shot")
            .or_else(|| s.strip_prefix("k-shot:"))
            .and_then(|n| n.parse::<usize>().ok())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown regime `{s}`")))?;
        if k == 0 {
            return Ok(Regime::ZeroShot);
        }
        Ok(Regime::KShot(k))
    }
}

impl TryFrom<String> for Regime {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Regime> for String {
    fn from(r: Regime) -> String {
        r.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Linear,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_sequence_length: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seeds: Vec<u64>,
    pub regime: Regime,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_steps: usize,
    pub train_verbalizer_weights: bool,
    /// Calibrate with contextualized priors at inference. Unset means on for
    /// zero/few-shot and off for supervised.
    pub calibrate: Option<bool>,
    /// Where to dump model and verbalizer state if training diverges.
    #[serde(skip)]
    pub divergence_dump: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_sequence_length: 512,
            batch_size: 40,
            epochs: 5,
            learning_rate: 2e-5,
            seeds: vec![13, 21, 42, 87, 100],
            regime: Regime::Supervised,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            lr_schedule: LrSchedule::Linear,
            warmup_steps: 0,
            train_verbalizer_weights: true,
            calibrate: None,
            divergence_dump: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one seed is required".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if self.max_sequence_length < 16 {
            return Err(Error::InvalidArgument("max_sequence_length must be at least 16".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument("learning_rate must be a non-negative number".into()));
        }
        if let Regime::KShot(k) = self.regime {
            if ![1, 2, 5, 10].contains(&k) {
                log::info!("{k}-shot is outside the usual 1/2/5/10 grid");
            }
        }
        Ok(())
    }

    pub fn calibration_enabled(&self) -> bool {
        self.calibrate
            .unwrap_or(!matches!(self.regime, Regime::Supervised))
    }
}

/// A tokenized training/evaluation example.
#[derive(Debug, Clone)]
pub struct Example {
    pub prompt: TokenizedPrompt,
    pub gold: usize,
}

pub fn prepare_examples(
    mlm: &dyn MaskedLanguageModel,
    template: &PromptTemplate,
    dataset: &Dataset,
    max_len: usize,
) -> Result<Vec<Example>> {
    let limit = max_len.min(mlm.max_sequence_length());
    dataset
        .instances()
        .iter()
        .map(|inst| {
            let label = inst.label.as_ref().ok_or_else(|| {
                Error::InvalidData(format!("instance `{}` has no gold label", inst.instance_id))
            })?;
            let gold = dataset.schema().index_of(label).ok_or_else(|| Error::UnknownLabel {
                label: label.to_string(),
                schema: dataset.schema().name().to_string(),
            })?;
            let prompt = tokenize_prompt(mlm.vocab(), &template.render(inst)?, limit)?;
            Ok(Example { prompt, gold })
        })
        .collect()
}

/// Mean loss and gradients over a batch.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: f64,
    pub model: Vec<f64>,
    /// Same shape as `ResolvedVerbalizer::labels`.
    pub verbalizer: Vec<Vec<f64>>,
}

fn example_loss(scores: &[f64], gold: usize) -> f64 {
    let total: f64 = scores.iter().sum();
    -(scores[gold] / total).ln()
}

/// Mean cross-entropy over `batch` (forward only).
pub fn batch_loss(mlm: &dyn MaskedLanguageModel, verbalizer: &ResolvedVerbalizer, batch: &[Example]) -> Result<f64> {
    let mut sum = 0.0;
    for ex in batch {
        let d = mlm.mask_distribution(&ex.prompt)?;
        sum += example_loss(&verbalizer.score(d.probs()), ex.gold);
    }
    Ok(sum / batch.len().max(1) as f64)
}

/// Analytic loss gradient in the model parameters and label-word weights.
pub fn loss_and_gradient(
    mlm: &dyn DifferentiableMlm,
    verbalizer: &ResolvedVerbalizer,
    batch: &[Example],
) -> Result<LossGradient> {
    let mut grad_model = vec![0.0; mlm.parameters().len()];
    let mut grad_verb: Vec<Vec<f64>> = verbalizer.labels.iter().map(|l| vec![0.0; l.len()]).collect();
    let mut loss = 0.0;
    let inv = 1.0 / batch.len().max(1) as f64;
    for ex in batch {
        let d = mlm.mask_distribution(&ex.prompt)?;
        let p = d.probs();
        let scores = verbalizer.score(p);
        let total: f64 = scores.iter().sum();
        loss += example_loss(&scores, ex.gold) * inv;
        // dL/ds_y = 1/S - [y = gold]/s_gold
        let ds: Vec<f64> = scores
            .iter()
            .enumerate()
            .map(|(y, s)| inv * (1.0 / total - if y == ex.gold { 1.0 / s } else { 0.0 }))
            .collect();
        let mut grad_p = vec![0.0; p.len()];
        for ((words, gw), dsy) in verbalizer.labels.iter().zip(grad_verb.iter_mut()).zip(&ds) {
            for ((id, w), g) in words.iter().zip(gw.iter_mut()) {
                if let Some(id) = id {
                    *g += p[*id as usize] * dsy;
                    grad_p[*id as usize] += w * dsy;
                }
            }
        }
        mlm.backward(&ex.prompt, p, &grad_p, &mut grad_model);
    }
    Ok(LossGradient {
        loss,
        model: grad_model,
        verbalizer: grad_verb,
    })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            beta1,
            beta2,
            epsilon,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.epsilon);
        }
    }
}

fn learning_rate_at(config: &TrainConfig, step: usize, total: usize) -> f64 {
    let base = config.learning_rate;
    if step < config.warmup_steps {
        return base * (step + 1) as f64 / config.warmup_steps as f64;
    }
    match config.lr_schedule {
        LrSchedule::Constant => base,
        LrSchedule::Linear => {
            let span = total.saturating_sub(config.warmup_steps).max(1) as f64;
            let done = (step - config.warmup_steps) as f64;
            base * (1.0 - done / span).max(0.0)
        }
    }
}

/// Clips negatives and renormalizes each label's weights; an all-zero label
/// becomes uniform.
fn project_simplex(weights: &mut [Vec<(Option<u32>, f64)>]) {
    for words in weights {
        for (_, w) in words.iter_mut() {
            if !w.is_finite() || *w < 0.0 {
                *w = 0.0;
            }
        }
        let sum: f64 = words.iter().map(|(_, w)| w).sum();
        let n = words.len() as f64;
        for (_, w) in words.iter_mut() {
            *w = if sum > 0.0 { *w / sum } else { 1.0 / n };
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub verbalizer: Verbalizer,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Fine-tunes `mlm` in place together with the verbalizer's label-word
/// weights. Batches are reshuffled every epoch from a ChaCha stream seeded
/// by `seed`.
pub fn fine_tune(
    mlm: &mut dyn MaskedLanguageModel,
    verbalizer: &Verbalizer,
    template: &PromptTemplate,
    train: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.regime == Regime::ZeroShot {
        return Err(Error::InvalidArgument("zero-shot runs do not train".into()));
    }
    if train.is_empty() {
        return Err(Error::InvalidData("training set is empty".into()));
    }
    verbalizer.ensure_schema(train.schema())?;
    if config.epochs == 0 {
        log::warn!("epochs = 0: model and verbalizer are unchanged");
        return Ok(TrainOutcome {
            verbalizer: verbalizer.clone(),
            epoch_losses: Vec::new(),
            steps: 0,
        });
    }
    let examples = prepare_examples(&*mlm, template, train, config.max_sequence_length)?;
    let mut resolved = verbalizer.resolve(mlm.vocab());
    let model = mlm
        .as_differentiable()
        .ok_or_else(|| Error::Model("the selected model backend is not trainable".into()))?;

    let steps_per_epoch = examples.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let verb_len: usize = resolved.labels.iter().map(Vec::len).sum();
    let mut model_opt = Adam::new(model.parameters().len(), config.adam_beta1, config.adam_beta2, config.adam_epsilon);
    let mut verb_opt = Adam::new(verb_len, config.adam_beta1, config.adam_beta2, config.adam_epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let g = match loss_and_gradient(&*model, &resolved, &batch) {
                Ok(g) if g.loss.is_finite() && g.model.iter().all(|x| x.is_finite()) => Ok(g),
                Ok(g) => Err(g.loss),
                Err(_) if model.parameters().iter().any(|x| !x.is_finite()) => Err(f64::NAN),
                Err(e) => return Err(e),
            };
            let g = match g {
                Ok(g) => g,
                Err(loss) => {
                    if let Some(dir) = &config.divergence_dump {
                        dump_state(&*model, verbalizer, &resolved, dir);
                    }
                    return Err(Error::Divergence { epoch, step, loss });
                }
            };
            epoch_loss += g.loss * batch.len() as f64;
            let lr = learning_rate_at(config, step, total_steps);
            model_opt.step(model.parameters_mut(), &g.model, lr);
            if config.train_verbalizer_weights {
                let mut flat: Vec<f64> = resolved.labels.iter().flatten().map(|(_, w)| *w).collect();
                let grads: Vec<f64> = g.verbalizer.iter().flatten().copied().collect();
                verb_opt.step(&mut flat, &grads, lr);
                let mut it = flat.into_iter();
                for words in resolved.labels.iter_mut() {
                    for (_, w) in words.iter_mut() {
                        *w = it.next().unwrap_or(0.0);
                    }
                }
                project_simplex(&mut resolved.labels);
            }
            step += 1;
        }
        let mean = epoch_loss / examples.len() as f64;
        log::info!("epoch {}/{}: loss {mean:.6}", epoch + 1, config.epochs);
        epoch_losses.push(mean);
    }

    let mut out = verbalizer.clone();
    if config.train_verbalizer_weights && config.epochs > 0 {
        for ((_, entries), words) in out.entries_mut().zip(&resolved.labels) {
            for (e, (_, w)) in entries.iter_mut().zip(words) {
                e.weight = *w;
            }
        }
        out.normalize_weights();
        out.manifest_mut().learnable_weights = true;
    }
    Ok(TrainOutcome {
        verbalizer: out,
        epoch_losses,
        steps: step,
    })
}

fn dump_state(model: &dyn DifferentiableMlm, verbalizer: &Verbalizer, resolved: &ResolvedVerbalizer, dir: &std::path::Path) {
    let _ = std::fs::create_dir_all(dir);
    if let Err(e) = model.save(&dir.join("diverged-model.json")) {
        log::error!("could not dump model state: {e}");
    }
    let mut v = verbalizer.clone();
    for ((_, entries), words) in v.entries_mut().zip(&resolved.labels) {
        for (e, (_, w)) in entries.iter_mut().zip(words) {
            e.weight = if w.is_finite() { *w } else { 0.0 };
        }
    }
    v.normalize_weights();
    if let Err(e) = crate::verbalizer::save_verbalizer(&v, dir.join("diverged-verbalizer.json")) {
        log::error!("could not dump verbalizer state: {e}");
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<usize>,
}

/// Classifies every test instance and aggregates the metrics.
pub fn evaluate(
    mlm: &dyn MaskedLanguageModel,
    verbalizer: &Verbalizer,
    template: &PromptTemplate,
    test: &Dataset,
    calibration: Option<&PriorEstimate>,
    max_len: usize,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::InvalidData("test set is empty".into()));
    }
    verbalizer.ensure_schema(test.schema())?;
    let schema: &LabelSchema = test.schema();
    let resolved = verbalizer.resolve(mlm.vocab());
    let mut confusion = ConfusionMatrix::new(schema);
    let mut predictions = Vec::with_capacity(test.len());
    for inst in test.instances() {
        let label = inst.label.as_ref().ok_or_else(|| {
            Error::InvalidData(format!("test instance `{}` has no gold label", inst.instance_id))
        })?;
        let gold = schema.index_of(label).ok_or_else(|| Error::UnknownLabel {
            label: label.to_string(),
            schema: schema.name().to_string(),
        })?;
        let mut dist = predict_mask(mlm, &template.render(inst)?, max_len)?;
        if let Some(priors) = calibration {
            dist = calibrate(&dist, priors)?;
        }
        let pred = argmax(&resolved.score(dist.probs()));
        confusion.record(gold, pred)?;
        predictions.push(pred);
    }
    Ok(Evaluation {
        accuracy: accuracy(&confusion),
        macro_f1: macro_f1(&confusion),
        confusion,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regime_parsing() {
        assert_eq!("supervised".parse::<Regime>().unwrap(), Regime::Supervised);
        assert_eq!("zero_shot".parse::<Regime>().unwrap(), Regime::ZeroShot);
        assert_eq!("10-shot".parse::<Regime>().unwrap(), Regime::KShot(10));
        assert_eq!("k_shot:5".parse::<Regime>().unwrap(), Regime::KShot(5));
        assert!("lots".parse::<Regime>().is_err());
        assert_eq!(String::from(Regime::KShot(2)), "2-shot");
    }

    #[test]
    fn defaults_follow_reference_setup() {
        let c = TrainConfig::default();
        assert_eq!(c.max_sequence_length, 512);
        assert_eq!(c.batch_size, 40);
        assert_eq!(c.epochs, 5);
        assert_eq!(c.seeds.len(), 5);
        assert!(!c.calibration_enabled());
        let z = TrainConfig { regime: Regime::ZeroShot, ..Default::default() };
        assert!(z.calibration_enabled());
    }

    #[test]
    fn linear_schedule_decays_to_zero() {
        let c = TrainConfig { learning_rate: 1.0, ..Default::default() };
        assert_eq!(learning_rate_at(&c, 0, 10), 1.0);
        assert!((learning_rate_at(&c, 5, 10) - 0.5).abs() < 1e-12);
        let w = TrainConfig { learning_rate: 1.0, warmup_steps: 2, ..Default::default() };
        assert_eq!(learning_rate_at(&w, 0, 10), 0.5);
    }

    #[test]
    fn simplex_projection() {
        let mut w = vec![vec![(Some(1), 0.5), (Some(2), -0.1), (None, 0.5)], vec![(Some(3), -1.0)]];
        project_simplex(&mut w);
        assert_eq!(w[0][1].1, 0.0);
        assert!((w[0][0].1 - 0.5).abs() < 1e-12);
        assert_eq!(w[1][0].1, 1.0);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut a = Adam::new(2, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, -1.0];
        a.step(&mut p, &[2.0, -3.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }
}
