//! Verbalizer refinements for low-resource settings: frequency cut,
//! relevance cut, contextualized-prior calibration, and learnable
//! label-word weights.
//!
//! Definitions used here:
//! - prior(w): mean mask-position probability of `w` over rendered support
//!   prompts.
//! - frequency cut: within a label, drop words whose prior is strictly below
//!   the label's `frequency_quantile` quantile (linear interpolation).
//! - relevance(w, y): mean probability of `w` over support prompts predicted
//!   as `y`, divided by its mean over all support prompts.
//! - calibration: `p̃(w) ∝ p(w) / prior(w)` over the tracked words.
//!
//! Removals never touch anchors and never shrink a label below
//! `min_words_per_label`.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prompt::{predict_mask, MaskDistribution, MaskedLanguageModel, PromptTemplate};
use crate::verbalizer::{argmax, LabelWordEntry, RefinementRecord, Verbalizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinementConfig {
    pub frequency_quantile: f64,
    pub relevance_threshold: f64,
    pub min_words_per_label: usize,
    pub support_size: usize,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig {
            frequency_quantile: 0.25,
            relevance_threshold: 1.0,
            min_words_per_label: 3,
            support_size: 200,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.frequency_quantile) {
            return Err(Error::InvalidArgument(format!(
                "frequency_quantile must be in [0, 1), got {}",
                self.frequency_quantile
            )));
        }
        if !self.relevance_threshold.is_finite() || self.relevance_threshold < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "relevance_threshold must be a non-negative number, got {}",
                self.relevance_threshold
            )));
        }
        if self.min_words_per_label == 0 {
            return Err(Error::InvalidArgument("min_words_per_label must be at least 1".into()));
        }
        if self.support_size == 0 {
            return Err(Error::InvalidArgument("support_size must be positive".into()));
        }
        Ok(())
    }
}

/// Mask-position probabilities of the support prompts, in support order.
#[derive(Debug, Clone)]
pub struct SupportDistributions {
    dists: Vec<MaskDistribution>,
    fingerprint: String,
}

impl SupportDistributions {
    pub fn compute(
        mlm: &dyn MaskedLanguageModel,
        template: &PromptTemplate,
        texts: &[String],
        max_len: usize,
    ) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::InvalidArgument("support set is empty".into()));
        }
        let dists = texts
            .iter()
            .map(|t| predict_mask(mlm, &template.render_text(t)?, max_len))
            .collect::<Result<Vec<_>>>()?;
        let mut h = Sha256::new();
        h.update(mlm.parameter_fingerprint().as_bytes());
        h.update(template.pattern().as_bytes());
        for t in texts {
            h.update([0u8]);
            h.update(t.as_bytes());
        }
        Ok(SupportDistributions {
            dists,
            fingerprint: hex::encode(h.finalize()),
        })
    }

    pub fn from_distributions(dists: Vec<MaskDistribution>, fingerprint: impl Into<String>) -> Result<Self> {
        if dists.is_empty() {
            return Err(Error::InvalidArgument("support set is empty".into()));
        }
        Ok(SupportDistributions {
            dists,
            fingerprint: fingerprint.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.dists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dists.is_empty()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn distributions(&self) -> &[MaskDistribution] {
        &self.dists
    }
}

/// Contextualized prior of each tracked word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorEstimate {
    pub priors: BTreeMap<String, f64>,
    pub support_size: usize,
    pub support_fingerprint: String,
}

impl PriorEstimate {
    pub fn prior(&self, word: &str) -> f64 {
        self.priors.get(word).copied().unwrap_or(0.0)
    }
}

/// Averages, per tracked word, the probability of its vocabulary position
/// over the support distributions. Words without a vocabulary position are
/// omitted.
pub fn estimate_priors_from(support: &SupportDistributions, tracked: &[String]) -> Result<PriorEstimate> {
    let first = support
        .dists
        .first()
        .ok_or_else(|| Error::InvalidArgument("support set is empty".into()))?;
    let vocab = first.vocab().clone();
    let n = support.len() as f64;
    let mut priors = BTreeMap::new();
    for w in tracked {
        let Some(res) = vocab.resolve_word(w) else {
            continue;
        };
        let mean = support.dists.iter().map(|d| d.prob(res.id)).sum::<f64>() / n;
        priors.insert(w.clone(), mean);
    }
    Ok(PriorEstimate {
        priors,
        support_size: support.len(),
        support_fingerprint: support.fingerprint.clone(),
    })
}

/// Priors for every word of `verbalizer`, estimated on `support_texts`.
pub fn estimate_priors(
    mlm: &dyn MaskedLanguageModel,
    template: &PromptTemplate,
    support_texts: &[String],
    verbalizer: &Verbalizer,
    max_len: usize,
) -> Result<PriorEstimate> {
    let support = SupportDistributions::compute(mlm, template, support_texts, max_len)?;
    estimate_priors_from(&support, &verbalizer.all_words())
}

/// Linear-interpolation quantile of `values` (need not be sorted).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn is_anchor(e: &LabelWordEntry) -> bool {
    e.anchor.as_deref() == Some(e.word.as_str()) && e.section.is_none()
}

/// Keeps entries flagged in `keep`, topping the survivors back up to `floor`
/// with the highest-scoring dropped entries.
fn apply_cut(entries: &[LabelWordEntry], scores: &[f64], mut keep: Vec<bool>, floor: usize) -> Vec<LabelWordEntry> {
    let kept = keep.iter().filter(|k| **k).count();
    if kept < floor {
        let mut dropped: Vec<usize> = (0..entries.len()).filter(|i| !keep[*i]).collect();
        dropped.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b)));
        for i in dropped.into_iter().take(floor - kept) {
            keep[i] = true;
        }
    }
    entries
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(e, _)| e.clone())
        .collect()
}

fn record(verbalizer: &mut Verbalizer, step: &str, params: serde_json::Value, fingerprint: &str, removed: BTreeMap<String, usize>) {
    verbalizer.normalize_weights();
    verbalizer.refresh_sizes();
    verbalizer.manifest_mut().refinements.push(RefinementRecord {
        step: step.to_string(),
        params,
        support_fingerprint: fingerprint.to_string(),
        removed,
    });
}

/// Drops rarely-predicted label words: within each label, words whose prior
/// is strictly below the label's `frequency_quantile` quantile.
pub fn frequency_refine(verbalizer: &Verbalizer, priors: &PriorEstimate, config: &RefinementConfig) -> Result<Verbalizer> {
    config.validate()?;
    let mut out = verbalizer.clone();
    let mut removed = BTreeMap::new();
    for (label, entries) in out.entries_mut() {
        let scores: Vec<f64> = entries.iter().map(|e| priors.prior(&e.word)).collect();
        let threshold = quantile(&scores, config.frequency_quantile);
        let keep: Vec<bool> = entries
            .iter()
            .zip(&scores)
            .map(|(e, s)| is_anchor(e) || *s >= threshold)
            .collect();
        let before = entries.len();
        *entries = apply_cut(entries, &scores, keep, config.min_words_per_label);
        removed.insert(label.to_string(), before - entries.len());
    }
    let params = serde_json::json!({
        "frequency_quantile": config.frequency_quantile,
        "min_words_per_label": config.min_words_per_label,
    });
    record(&mut out, "frequency", params, &priors.support_fingerprint, removed);
    out.validate()?;
    Ok(out)
}

/// Relevance ratios per label (schema order): `None` for labels that no
/// support prompt was predicted as.
pub fn relevance_scores(verbalizer: &Verbalizer, support: &SupportDistributions) -> Vec<Option<Vec<f64>>> {
    let vocab = support.dists[0].vocab().clone();
    let resolved = verbalizer.resolve(&vocab);
    let predicted: Vec<usize> = support
        .dists
        .iter()
        .map(|d| argmax(&resolved.score(d.probs())))
        .collect();
    let n_all = support.len() as f64;
    verbalizer
        .iter()
        .enumerate()
        .map(|(li, (_, entries))| {
            let members: Vec<&MaskDistribution> = support
                .dists
                .iter()
                .zip(&predicted)
                .filter(|(_, p)| **p == li)
                .map(|(d, _)| d)
                .collect();
            if members.is_empty() {
                return None;
            }
            let n_y = members.len() as f64;
            Some(
                entries
                    .iter()
                    .map(|e| {
                        let Some(res) = vocab.resolve_word(&e.word) else {
                            return 0.0;
                        };
                        let in_label = members.iter().map(|d| d.prob(res.id)).sum::<f64>() / n_y;
                        let global = support.dists.iter().map(|d| d.prob(res.id)).sum::<f64>() / n_all;
                        in_label / global.max(f64::EPSILON)
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Relevance cut over precomputed support distributions.
pub fn relevance_refine_with(verbalizer: &Verbalizer, support: &SupportDistributions, config: &RefinementConfig) -> Result<Verbalizer> {
    config.validate()?;
    let relevance = relevance_scores(verbalizer, support);
    let mut out = verbalizer.clone();
    let mut removed = BTreeMap::new();
    for ((label, entries), rel) in out.entries_mut().zip(relevance) {
        let Some(scores) = rel else {
            log::warn!("no support prompt was predicted as `{label}`; skipping its relevance cut");
            removed.insert(label.to_string(), 0);
            continue;
        };
        let keep: Vec<bool> = entries
            .iter()
            .zip(&scores)
            .map(|(e, s)| is_anchor(e) || *s >= config.relevance_threshold)
            .collect();
        let before = entries.len();
        *entries = apply_cut(entries, &scores, keep, config.min_words_per_label);
        removed.insert(label.to_string(), before - entries.len());
    }
    let params = serde_json::json!({
        "relevance_threshold": config.relevance_threshold,
        "min_words_per_label": config.min_words_per_label,
    });
    record(&mut out, "relevance", params, support.fingerprint(), removed);
    out.validate()?;
    Ok(out)
}

/// Drops label words that are not more likely on prompts predicted as their
/// own label than on the support set overall.
pub fn relevance_refine(
    verbalizer: &Verbalizer,
    mlm: &dyn MaskedLanguageModel,
    template: &PromptTemplate,
    support_texts: &[String],
    config: &RefinementConfig,
    max_len: usize,
) -> Result<Verbalizer> {
    let support = SupportDistributions::compute(mlm, template, support_texts, max_len)?;
    relevance_refine_with(verbalizer, &support, config)
}

/// Divides each tracked word's probability by its prior and renormalizes
/// over the tracked set; untracked positions get zero mass.
pub fn calibrate(dist: &MaskDistribution, priors: &PriorEstimate) -> Result<MaskDistribution> {
    let vocab = dist.vocab();
    let mut seen = HashSet::new();
    let mut tracked = Vec::new();
    for (word, prior) in &priors.priors {
        if let Some(res) = vocab.resolve_word(word) {
            if seen.insert(res.id) {
                tracked.push((res.id, prior.max(f64::EPSILON)));
            }
        }
    }
    if tracked.is_empty() {
        return Err(Error::InvalidArgument("calibration needs at least one tracked word".into()));
    }
    let mut out = vec![0.0; vocab.len()];
    let mut total = 0.0;
    for (id, prior) in &tracked {
        let v = dist.prob(*id) / prior;
        out[*id as usize] = v;
        total += v;
    }
    if total > 0.0 && total.is_finite() {
        for (id, _) in &tracked {
            out[*id as usize] /= total;
        }
    } else {
        let u = 1.0 / tracked.len() as f64;
        for (id, _) in &tracked {
            out[*id as usize] = u;
        }
    }
    MaskDistribution::new(out, vocab.clone())
}

/// Marks label-word weights as trainable, reset to uniform within each label.
pub fn attach_learnable_weights(verbalizer: &Verbalizer) -> Verbalizer {
    let mut out = verbalizer.clone();
    out.set_uniform_weights();
    out.manifest_mut().learnable_weights = true;
    out
}

fn already_applied(v: &Verbalizer, step: &str, params: &serde_json::Value, fingerprint: &str) -> bool {
    v.manifest()
        .refinements
        .iter()
        .any(|r| r.step == step && &r.params == params && r.support_fingerprint == fingerprint)
}

/// Output of [`refine_pipeline`]: the refined verbalizer and the priors to
/// calibrate with at inference.
#[derive(Debug, Clone)]
pub struct Refined {
    pub verbalizer: Verbalizer,
    pub priors: PriorEstimate,
}

/// Frequency cut, then relevance cut, then learnable weights. Steps already
/// recorded in the manifest with the same parameters and support set are
/// skipped, so re-running on the output is a no-op.
pub fn refine_pipeline(verbalizer: &Verbalizer, support: &SupportDistributions, config: &RefinementConfig) -> Result<Refined> {
    config.validate()?;
    let mut v = verbalizer.clone();
    let priors = estimate_priors_from(support, &v.all_words())?;
    let freq_params = serde_json::json!({
        "frequency_quantile": config.frequency_quantile,
        "min_words_per_label": config.min_words_per_label,
    });
    if !already_applied(&v, "frequency", &freq_params, support.fingerprint()) {
        v = frequency_refine(&v, &priors, config)?;
    }
    let rel_params = serde_json::json!({
        "relevance_threshold": config.relevance_threshold,
        "min_words_per_label": config.min_words_per_label,
    });
    if !already_applied(&v, "relevance", &rel_params, support.fingerprint()) {
        v = relevance_refine_with(&v, support, config)?;
    }
    if !v.manifest().learnable_weights {
        v = attach_learnable_weights(&v);
    }
    let priors = estimate_priors_from(support, &v.all_words())?;
    Ok(Refined { verbalizer: v, priors })
}
