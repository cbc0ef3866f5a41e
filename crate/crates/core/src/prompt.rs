//! Prompt templates, the masked-language-model port, and single-instance
//! classification.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{CitationInstance, Label};
use crate::error::{Error, Result};
use crate::kpt::{calibrate, PriorEstimate};
use crate::verbalizer::Verbalizer;
use crate::vocab::{Vocab, WordResolution};

pub const INPUT_SLOT: &str = "[X]";
pub const MASK_SLOT: &str = "[MASK]";
pub const DEFAULT_PATTERN: &str = "[X] It has a citation of type [MASK].";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Prefix,
    Cloze,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TemplateRepr", into = "TemplateRepr")]
pub struct PromptTemplate {
    kind: TemplateKind,
    pattern: String,
}

#[derive(Serialize, Deserialize)]
struct TemplateRepr {
    kind: Option<TemplateKind>,
    pattern: String,
}

impl TryFrom<TemplateRepr> for PromptTemplate {
    type Error = Error;

    fn try_from(r: TemplateRepr) -> Result<Self> {
        match r.kind {
            Some(kind) => PromptTemplate::new(kind, &r.pattern),
            None => PromptTemplate::from_pattern(&r.pattern),
        }
    }
}

impl From<PromptTemplate> for TemplateRepr {
    fn from(t: PromptTemplate) -> Self {
        TemplateRepr {
            kind: Some(t.kind),
            pattern: t.pattern,
        }
    }
}

fn slot_positions(pattern: &str) -> Result<(usize, usize)> {
    let inputs: Vec<_> = pattern.match_indices(INPUT_SLOT).collect();
    let masks: Vec<_> = pattern.match_indices(MASK_SLOT).collect();
    if inputs.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "template must contain exactly one {INPUT_SLOT} slot (found {})",
            inputs.len()
        )));
    }
    if masks.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "template must contain exactly one {MASK_SLOT} slot (found {})",
            masks.len()
        )));
    }
    Ok((inputs[0].0, masks[0].0))
}

impl PromptTemplate {
    pub fn new(kind: TemplateKind, pattern: &str) -> Result<Self> {
        let (input, mask) = slot_positions(pattern)?;
        if kind == TemplateKind::Prefix && mask < input {
            return Err(Error::InvalidArgument(
                "prefix template needs the mask slot after the input slot".into(),
            ));
        }
        Ok(PromptTemplate {
            kind,
            pattern: pattern.to_string(),
        })
    }

    /// Infers the kind: prefix when the mask follows the input and only
    /// punctuation or whitespace trails it; cloze otherwise.
    pub fn from_pattern(pattern: &str) -> Result<Self> {
        let (input, mask) = slot_positions(pattern)?;
        let tail = &pattern[mask + MASK_SLOT.len()..];
        let kind = if mask > input && tail.chars().all(|c| c.is_whitespace() || c.is_ascii_punctuation()) {
            TemplateKind::Prefix
        } else {
            TemplateKind::Cloze
        };
        PromptTemplate::new(kind, pattern)
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn render(&self, instance: &CitationInstance) -> Result<RenderedPrompt> {
        self.render_text(&instance.text)
    }

    /// Substitutes `text` verbatim into the input slot.
    pub fn render_text(&self, text: &str) -> Result<RenderedPrompt> {
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument("cannot render an empty instance".into()));
        }
        let (input, _) = slot_positions(&self.pattern)?;
        let before = self.pattern[..input].to_string();
        let after = self.pattern[input + INPUT_SLOT.len()..].to_string();
        Ok(RenderedPrompt {
            text: format!("{before}{text}{after}"),
            before,
            instance: text.to_string(),
            after,
        })
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        default_template()
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.pattern)
    }
}

/// `[X] It has a citation of type [MASK].` as a prefix template.
pub fn default_template() -> PromptTemplate {
    PromptTemplate {
        kind: TemplateKind::Prefix,
        pattern: DEFAULT_PATTERN.to_string(),
    }
}

/// A template with its input slot filled. The template text on either side
/// of the instance is kept so truncation can trim only the instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    before: String,
    instance: String,
    after: String,
}

impl RenderedPrompt {
    pub fn instance(&self) -> &str {
        &self.instance
    }
}

/// Token ids ready for a model: `[CLS] template-head instance template-tail [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPrompt {
    pub ids: Vec<u32>,
    pub mask_index: usize,
    /// Instance tokens dropped from the front to fit the length budget.
    pub truncated: usize,
}

fn tokenize_template_part(vocab: &Vocab, part: &str, out: &mut Vec<u32>) {
    let mut pieces = part.split(MASK_SLOT).peekable();
    while let Some(piece) = pieces.next() {
        out.extend(vocab.tokenize(piece));
        if pieces.peek().is_some() {
            out.push(vocab.mask_id());
        }
    }
}

/// Tokenizes a rendered prompt, trimming instance tokens from the front when
/// the sequence exceeds `max_len`. Template tokens are never dropped.
pub fn tokenize_prompt(vocab: &Vocab, prompt: &RenderedPrompt, max_len: usize) -> Result<TokenizedPrompt> {
    let mut head = Vec::new();
    tokenize_template_part(vocab, &prompt.before, &mut head);
    let mut tail = Vec::new();
    tokenize_template_part(vocab, &prompt.after, &mut tail);
    let body = vocab.tokenize(&prompt.instance);
    let fixed = head.len() + tail.len() + 2;
    if fixed > max_len {
        return Err(Error::InvalidArgument(format!(
            "template alone needs {fixed} tokens, over the {max_len}-token limit"
        )));
    }
    let budget = max_len - fixed;
    let drop = body.len().saturating_sub(budget);
    let mut ids = Vec::with_capacity(fixed + body.len() - drop);
    ids.push(vocab.cls_id());
    ids.extend(&head);
    ids.extend(&body[drop..]);
    ids.extend(&tail);
    ids.push(vocab.sep_id());
    let mask_index = ids
        .iter()
        .position(|&t| t == vocab.mask_id())
        .expect("template carries exactly one mask slot and template tokens are never truncated");
    Ok(TokenizedPrompt {
        ids,
        mask_index,
        truncated: drop,
    })
}

/// Probabilities over the model vocabulary at the mask position.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDistribution {
    probs: Vec<f64>,
    vocab: Arc<Vocab>,
}

impl MaskDistribution {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(probs: Vec<f64>, vocab: Arc<Vocab>) -> Result<Self> {
        if probs.len() != vocab.len() {
            return Err(Error::Model(format!(
                "distribution has {} entries for a {}-token vocabulary",
                probs.len(),
                vocab.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Model("distribution has negative or non-finite mass".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::Model(format!("distribution sums to {sum}, not 1")));
        }
        Ok(MaskDistribution { probs, vocab })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: Vec<f64>, vocab: Arc<Vocab>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !sum.is_finite() || sum <= 0.0 {
            return Err(Error::Model("cannot normalize zero or non-finite mass".into()));
        }
        MaskDistribution::new(weights.into_iter().map(|w| w / sum).collect(), vocab)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, id: u32) -> f64 {
        self.probs.get(id as usize).copied().unwrap_or(0.0)
    }

    pub fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }
}

/// A masked language model, queried at a single mask position.
pub trait MaskedLanguageModel: Send + Sync {
    fn identity(&self) -> &str;
    fn max_sequence_length(&self) -> usize;
    fn vocab(&self) -> &Arc<Vocab>;

    /// Distribution at `prompt.mask_index`. Must be deterministic for fixed
    /// parameters and input.
    fn mask_distribution(&self, prompt: &TokenizedPrompt) -> Result<MaskDistribution>;

    /// Hash of the current parameters.
    fn parameter_fingerprint(&self) -> String;

    fn is_trainable(&self) -> bool {
        false
    }

    fn as_differentiable(&mut self) -> Option<&mut dyn DifferentiableMlm> {
        None
    }

    fn clone_box(&self) -> Box<dyn MaskedLanguageModel>;

    /// Serializes the model as a checkpoint file loadable by
    /// [`crate::backend::load_mlm`].
    fn save(&self, path: &std::path::Path) -> Result<()>;
}

impl Clone for Box<dyn MaskedLanguageModel> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// A model whose mask distribution is differentiable in a flat parameter
/// vector.
pub trait DifferentiableMlm: MaskedLanguageModel {
    fn parameters(&self) -> &[f64];
    fn parameters_mut(&mut self) -> &mut [f64];

    /// Adds `dL/dθ` into `grad`, given the forward probabilities `probs` and
    /// the upstream gradient `grad_probs = dL/dp` at the mask position.
    fn backward(&self, prompt: &TokenizedPrompt, probs: &[f64], grad_probs: &[f64], grad: &mut [f64]);
}

/// Tokenizes with head truncation and queries the model.
pub fn predict_mask(
    mlm: &dyn MaskedLanguageModel,
    rendered: &RenderedPrompt,
    max_len: usize,
) -> Result<MaskDistribution> {
    let limit = max_len.min(mlm.max_sequence_length());
    let tokens = tokenize_prompt(mlm.vocab(), rendered, limit)?;
    mlm.mask_distribution(&tokens)
}

pub fn resolve_word(mlm: &dyn MaskedLanguageModel, word: &str) -> Option<WordResolution> {
    let r = mlm.vocab().resolve_word(word);
    match r {
        Some(res) if res.multi_piece => {
            log::debug!("label word `{word}` spans several pieces; scoring its first piece");
        }
        None => log::debug!("label word `{word}` is not in the model vocabulary"),
        _ => {}
    }
    r
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Classification {
    pub label: Label,
    pub scores: Vec<(Label, f64)>,
}

/// render → predict_mask → optional calibration → label scores → argmax.
pub fn classify(
    instance: &CitationInstance,
    template: &PromptTemplate,
    verbalizer: &Verbalizer,
    mlm: &dyn MaskedLanguageModel,
    calibration: Option<&PriorEstimate>,
    max_len: usize,
) -> Result<Classification> {
    let rendered = template.render(instance)?;
    let mut dist = predict_mask(mlm, &rendered, max_len)?;
    if let Some(priors) = calibration {
        dist = calibrate(&dist, priors)?;
    }
    let scores = crate::verbalizer::score_labels(&dist, verbalizer)?;
    let label = crate::verbalizer::argmax_label(&scores).clone();
    Ok(Classification { label, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{CLS, MASK, PAD, SEP, UNK};

    fn vocab() -> Arc<Vocab> {
        let mut toks: Vec<String> = [PAD, UNK, CLS, SEP, MASK, ".", "it", "has", "a", "citation", "of", "type", "is", "x"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        toks.extend((0..600).map(|i| format!("w{i}")));
        Arc::new(Vocab::from_tokens(toks).unwrap())
    }

    #[test]
    fn default_template_matches_reference_string() {
        let t = default_template();
        assert_eq!(t.pattern(), "[X] It has a citation of type [MASK].");
        assert_eq!(t.kind(), TemplateKind::Prefix);
        assert_eq!(t.pattern().matches(INPUT_SLOT).count(), 1);
        assert_eq!(t.pattern().matches(MASK_SLOT).count(), 1);
        assert_eq!(PromptTemplate::from_pattern(DEFAULT_PATTERN).unwrap(), t);
    }

    #[test]
    fn renders_reference_sentence() {
        let x = "This task has been shown to have the same features as in [10]";
        let r = default_template().render_text(x).unwrap();
        assert_eq!(
            r.text,
            "This task has been shown to have the same features as in [10] It has a citation of type [MASK]."
        );
    }

    #[test]
    fn template_validation() {
        assert!(PromptTemplate::from_pattern("").is_err());
        assert!(PromptTemplate::from_pattern("[X] no mask").is_err());
        assert!(PromptTemplate::from_pattern("[X] [X] [MASK]").is_err());
        assert!(PromptTemplate::new(TemplateKind::Prefix, "[MASK] then [X]").is_err());
        let c = PromptTemplate::from_pattern("[X] is a [MASK] citation.").unwrap();
        assert_eq!(c.kind(), TemplateKind::Cloze);
        assert_eq!(c.render_text("Foo [2]").unwrap().text, "Foo [2] is a [MASK] citation.");
        assert!(c.render_text("   ").is_err());
    }

    #[test]
    fn template_serde_round_trip() {
        let t = PromptTemplate::from_pattern("[X] is a [MASK] citation.").unwrap();
        let j = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<PromptTemplate>(&j).unwrap(), t);
        assert!(serde_json::from_str::<PromptTemplate>(r#"{"pattern": "no slots"}"#).is_err());
    }

    #[test]
    fn truncation_trims_instance_head_only() {
        let v = vocab();
        let long: Vec<String> = (0..600).map(|i| format!("w{i}")).collect();
        let r = default_template().render_text(&long.join(" ")).unwrap();
        let tp = tokenize_prompt(&v, &r, 512).unwrap();
        assert_eq!(tp.ids.len(), 512);
        assert_eq!(tp.ids[tp.mask_index], v.mask_id());
        // Template tail survives: "... type [MASK] . [SEP]"
        let n = tp.ids.len();
        assert_eq!(v.token(tp.ids[n - 1]), Some(SEP));
        assert_eq!(v.token(tp.ids[n - 2]), Some("."));
        assert_eq!(v.token(tp.ids[n - 3]), Some(MASK));
        // The last instance word is kept, the first ones dropped.
        assert!(tp.ids.contains(&v.id("w599").unwrap()));
        assert!(!tp.ids.contains(&v.id("w0").unwrap()));
        assert_eq!(tp.truncated, 600 - (512 - 2 - 8));
    }

    #[test]
    fn template_longer_than_limit_is_rejected() {
        let v = vocab();
        let r = default_template().render_text("x").unwrap();
        assert!(tokenize_prompt(&v, &r, 5).is_err());
    }

    #[test]
    fn cloze_mask_position() {
        let v = vocab();
        let t = PromptTemplate::from_pattern("[X] is a [MASK] citation.").unwrap();
        let tp = tokenize_prompt(&v, &t.render_text("x x").unwrap(), 64).unwrap();
        assert_eq!(tp.mask_index, 5);
    }

    #[test]
    fn distribution_invariants() {
        let v = vocab();
        let n = v.len();
        assert!(MaskDistribution::new(vec![1.0 / n as f64; n], v.clone()).is_ok());
        assert!(MaskDistribution::new(vec![0.0; n], v.clone()).is_err());
        assert!(MaskDistribution::new(vec![1.0; 3], v.clone()).is_err());
        let mut w = vec![0.0; n];
        w[7] = -1.0;
        w[8] = 2.0;
        assert!(MaskDistribution::new(w, v.clone()).is_err());
        let d = MaskDistribution::from_weights(vec![2.0; n], v).unwrap();
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
