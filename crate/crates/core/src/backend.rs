//! In-tree masked-language-model backends and checkpoint loading.
//!
//! - [`MockMlm`]: deterministic keyword-frequency distribution over a small
//!   vocabulary. No parameters; used for pipeline tests and zero-shot runs.
//! - [`BagOfContextMlm`]: `softmax(b + mean_t W[t])` over the vocabulary,
//!   where `t` ranges over the non-special prompt tokens. Fully
//!   differentiable and trainable; the reference backend for fine-tuning.
//!
//! Checkpoints are JSON files tagged with `"kind"`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prompt::{DifferentiableMlm, MaskDistribution, MaskedLanguageModel, TokenizedPrompt};
use crate::vocab::Vocab;

fn check_prompt(vocab: &Vocab, prompt: &TokenizedPrompt, max_len: usize) -> Result<()> {
    if prompt.ids.len() > max_len {
        return Err(Error::Model(format!(
            "prompt of {} tokens exceeds the model limit of {max_len}",
            prompt.ids.len()
        )));
    }
    if prompt.ids.get(prompt.mask_index) != Some(&vocab.mask_id()) {
        return Err(Error::Model("prompt has no mask token at its mask index".into()));
    }
    Ok(())
}

fn context_tokens<'a>(vocab: &'a Vocab, prompt: &'a TokenizedPrompt) -> impl Iterator<Item = u32> + 'a {
    prompt.ids.iter().copied().filter(|&t| !vocab.is_special(t))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockConfig {
    pub identity: String,
    #[serde(default = "default_max_len")]
    pub max_sequence_length: usize,
    pub vocab: Vec<String>,
    /// Mass every non-special token gets regardless of context.
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
    /// Mass added to a token each time it occurs in the prompt.
    #[serde(default = "default_copy_weight")]
    pub copy_weight: f64,
    /// Mass added to each target every time its cue occurs in the prompt.
    #[serde(default = "default_association_weight")]
    pub association_weight: f64,
    #[serde(default)]
    pub associations: BTreeMap<String, Vec<String>>,
}

impl MockConfig {
    /// Default weights, no associations.
    pub fn new(identity: impl Into<String>, vocab: Vec<String>) -> Self {
        MockConfig {
            identity: identity.into(),
            max_sequence_length: default_max_len(),
            vocab,
            smoothing: default_smoothing(),
            copy_weight: default_copy_weight(),
            association_weight: default_association_weight(),
            associations: BTreeMap::new(),
        }
    }
}

fn default_max_len() -> usize {
    512
}
fn default_smoothing() -> f64 {
    1.0
}
fn default_copy_weight() -> f64 {
    1.0
}
fn default_association_weight() -> f64 {
    4.0
}

/// Keyword-frequency mock: `p(v) ∝ smoothing + copy·count(v) + assoc·Σ cue hits`.
#[derive(Debug, Clone)]
pub struct MockMlm {
    config: MockConfig,
    vocab: Arc<Vocab>,
    links: Vec<Vec<u32>>,
}

impl MockMlm {
    pub fn new(config: MockConfig) -> Result<Self> {
        if config.max_sequence_length < 16 {
            return Err(Error::Model("max sequence length must be at least 16".into()));
        }
        if config.smoothing.is_nan() || config.smoothing <= 0.0 || config.copy_weight < 0.0 || config.association_weight < 0.0 {
            return Err(Error::Model("mock weights must be non-negative with positive smoothing".into()));
        }
        let vocab = Arc::new(Vocab::from_tokens(config.vocab.iter().cloned())?);
        let mut links = vec![Vec::new(); vocab.len()];
        for (cue, targets) in &config.associations {
            let cue_id = vocab
                .id(cue)
                .ok_or_else(|| Error::Model(format!("association cue `{cue}` not in vocabulary")))?;
            for t in targets {
                let tid = vocab
                    .id(t)
                    .ok_or_else(|| Error::Model(format!("association target `{t}` not in vocabulary")))?;
                links[cue_id as usize].push(tid);
            }
        }
        Ok(MockMlm { config, vocab, links })
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    /// Unnormalized mass per vocabulary entry.
    fn mass(&self, prompt: &TokenizedPrompt) -> Vec<f64> {
        let v = &self.vocab;
        let mut m: Vec<f64> = (0..v.len() as u32)
            .map(|i| if v.is_special(i) { 0.0 } else { self.config.smoothing })
            .collect();
        for t in context_tokens(v, prompt) {
            m[t as usize] += self.config.copy_weight;
            for &target in &self.links[t as usize] {
                m[target as usize] += self.config.association_weight;
            }
        }
        m
    }
}

impl MaskedLanguageModel for MockMlm {
    fn identity(&self) -> &str {
        &self.config.identity
    }

    fn max_sequence_length(&self) -> usize {
        self.config.max_sequence_length
    }

    fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    fn mask_distribution(&self, prompt: &TokenizedPrompt) -> Result<MaskDistribution> {
        check_prompt(&self.vocab, prompt, self.config.max_sequence_length)?;
        MaskDistribution::from_weights(self.mass(prompt), self.vocab.clone())
    }

    fn parameter_fingerprint(&self) -> String {
        let json = serde_json::to_vec(&self.config).unwrap_or_default();
        hex::encode(Sha256::digest(&json))
    }

    fn clone_box(&self) -> Box<dyn MaskedLanguageModel> {
        Box::new(self.clone())
    }

    fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &Checkpoint::Mock(self.config.clone()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BagOfContextState {
    pub identity: String,
    #[serde(default = "default_max_len")]
    pub max_sequence_length: usize,
    pub vocab: Vec<String>,
    /// Row-major `V × V` context weights followed by `V` biases.
    pub parameters: Vec<f64>,
}

/// Trainable log-linear mask predictor.
#[derive(Debug, Clone)]
pub struct BagOfContextMlm {
    identity: String,
    max_len: usize,
    vocab: Arc<Vocab>,
    params: Vec<f64>,
}

impl BagOfContextMlm {
    pub fn new(state: BagOfContextState) -> Result<Self> {
        let vocab = Arc::new(Vocab::from_tokens(state.vocab.iter().cloned())?);
        let v = vocab.len();
        if state.parameters.len() != v * v + v {
            return Err(Error::Model(format!(
                "expected {} parameters for a {v}-token vocabulary, found {}",
                v * v + v,
                state.parameters.len()
            )));
        }
        if state.max_sequence_length < 16 {
            return Err(Error::Model("max sequence length must be at least 16".into()));
        }
        Ok(BagOfContextMlm {
            identity: state.identity,
            max_len: state.max_sequence_length,
            vocab,
            params: state.parameters,
        })
    }

    /// Initializes from a mock so that `softmax(logits)` starts close to the
    /// mock's associations: `W[cue, target] = scale` for every association,
    /// `W[t, t] = scale / 2`, biases zero.
    pub fn from_mock(mock: &MockMlm, identity: impl Into<String>, scale: f64) -> Self {
        let v = mock.vocab.len();
        let mut params = vec![0.0; v * v + v];
        for (cue, targets) in mock.links.iter().enumerate() {
            if mock.vocab.is_special(cue as u32) {
                continue;
            }
            params[cue * v + cue] = scale / 2.0;
            for &t in targets {
                params[cue * v + t as usize] += scale;
            }
        }
        BagOfContextMlm {
            identity: identity.into(),
            max_len: mock.config.max_sequence_length,
            vocab: mock.vocab.clone(),
            params,
        }
    }

    pub fn state(&self) -> BagOfContextState {
        BagOfContextState {
            identity: self.identity.clone(),
            max_sequence_length: self.max_len,
            vocab: self.vocab.tokens().to_vec(),
            parameters: self.params.clone(),
        }
    }

    fn logits(&self, prompt: &TokenizedPrompt) -> Vec<f64> {
        let v = self.vocab.len();
        let bias = &self.params[v * v..];
        let mut z = bias.to_vec();
        let ctx: Vec<u32> = context_tokens(&self.vocab, prompt).collect();
        if !ctx.is_empty() {
            let inv = 1.0 / ctx.len() as f64;
            for t in ctx {
                let row = &self.params[t as usize * v..(t as usize + 1) * v];
                for (zi, w) in z.iter_mut().zip(row) {
                    *zi += w * inv;
                }
            }
        }
        for (i, zi) in z.iter_mut().enumerate() {
            if self.vocab.is_special(i as u32) {
                *zi = f64::NEG_INFINITY;
            }
        }
        z
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl MaskedLanguageModel for BagOfContextMlm {
    fn identity(&self) -> &str {
        &self.identity
    }

    fn max_sequence_length(&self) -> usize {
        self.max_len
    }

    fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    fn mask_distribution(&self, prompt: &TokenizedPrompt) -> Result<MaskDistribution> {
        check_prompt(&self.vocab, prompt, self.max_len)?;
        let p = softmax(&self.logits(prompt));
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::Model("non-finite probabilities".into()));
        }
        MaskDistribution::new(p, self.vocab.clone())
    }

    fn parameter_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn is_trainable(&self) -> bool {
        true
    }

    fn as_differentiable(&mut self) -> Option<&mut dyn DifferentiableMlm> {
        Some(self)
    }

    fn clone_box(&self) -> Box<dyn MaskedLanguageModel> {
        Box::new(self.clone())
    }

    fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &Checkpoint::BagOfContext(self.state()))
    }
}

impl DifferentiableMlm for BagOfContextMlm {
    fn parameters(&self) -> &[f64] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn backward(&self, prompt: &TokenizedPrompt, probs: &[f64], grad_probs: &[f64], grad: &mut [f64]) {
        let v = self.vocab.len();
        // Softmax Jacobian: dL/dz_i = p_i (g_i - Σ_j p_j g_j).
        let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
        let dz: Vec<f64> = probs.iter().zip(grad_probs).map(|(p, g)| p * (g - dot)).collect();
        for (gb, d) in grad[v * v..].iter_mut().zip(&dz) {
            *gb += d;
        }
        let ctx: Vec<u32> = context_tokens(&self.vocab, prompt).collect();
        if ctx.is_empty() {
            return;
        }
        let inv = 1.0 / ctx.len() as f64;
        for t in ctx {
            let row = &mut grad[t as usize * v..(t as usize + 1) * v];
            for (g, d) in row.iter_mut().zip(&dz) {
                *g += d * inv;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Checkpoint {
    Mock(MockConfig),
    BagOfContext(BagOfContextState),
}

fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let json = serde_json::to_string(ckpt).map_err(|e| Error::json("checkpoint", e))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// Resolves a model identity to a backend. Identities are paths to JSON
/// checkpoint files.
pub fn load_mlm(identity: &str) -> Result<Box<dyn MaskedLanguageModel>> {
    let path = Path::new(identity);
    if !path.is_file() {
        return Err(Error::Model(format!(
            "no checkpoint for model identity `{identity}` (expected a checkpoint file path)"
        )));
    }
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&raw)
        .map_err(|e| Error::Model(format!("{identity}: unsupported checkpoint: {e}")))?;
    Ok(match ckpt {
        Checkpoint::Mock(c) => Box::new(MockMlm::new(c)?),
        Checkpoint::BagOfContext(s) => Box::new(BagOfContextMlm::new(s)?),
    })
}
