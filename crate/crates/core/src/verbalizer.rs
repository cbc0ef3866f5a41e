//! Knowledge-expanded verbalizers: anchor words grown into label-word sets
//! over section corpora, and the mapping from mask distributions to label
//! scores.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CanonicalSection, LabelSectionMap, SectionCorpus};
use crate::dataset::{Label, LabelSchema};
use crate::embedding::{top_k_similar, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::prompt::MaskDistribution;
use crate::vocab::Vocab;

const ANCHORS: &str = include_str!("../resources/anchors.json");

pub const VERBALIZER_FORMAT_VERSION: u32 = 1;
const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Hand-picked seed words per label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorSet {
    entries: Vec<(Label, Vec<String>)>,
}

impl AnchorSet {
    pub fn new(schema: &LabelSchema, map: BTreeMap<Label, Vec<String>>) -> Result<Self> {
        for label in map.keys() {
            if !schema.contains(label) {
                return Err(Error::UnknownLabel {
                    label: label.to_string(),
                    schema: schema.name().to_string(),
                });
            }
        }
        let mut entries = Vec::with_capacity(schema.len());
        for label in schema.labels() {
            let words = map.get(label).cloned().unwrap_or_default();
            if words.is_empty() {
                return Err(Error::InvalidData(format!("label `{label}` has no anchor words")));
            }
            for w in &words {
                if w.is_empty() || w.chars().any(char::is_whitespace) || w.to_lowercase() != *w {
                    return Err(Error::InvalidData(format!(
                        "anchor `{w}` must be a single lowercase word"
                    )));
                }
            }
            entries.push((label.clone(), words));
        }
        Ok(AnchorSet { entries })
    }

    /// Reads `{label: [anchor, ...]}` (or the bundled `{"version", "anchors"}` shape).
    pub fn from_file(schema: &LabelSchema, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&raw).map_err(|e| Error::json(path.display().to_string(), e))?;
        let table = value.get("anchors").cloned().unwrap_or(value);
        let map: BTreeMap<String, Vec<String>> = serde_json::from_value(table)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        let map = map
            .into_iter()
            .filter_map(|(k, v)| schema.resolve(&k).ok().map(|l| (l, v)))
            .collect();
        AnchorSet::new(schema, map)
    }

    pub fn anchors(&self, label: &Label) -> &[String] {
        self.entries
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, a)| a.as_slice())
            .unwrap_or(&[])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Label, &[String])> {
        self.entries.iter().map(|(l, a)| (l, a.as_slice()))
    }
}

#[derive(Deserialize)]
struct AnchorResource {
    version: u32,
    anchors: BTreeMap<String, Vec<String>>,
}

fn bundled_anchors() -> &'static BTreeMap<String, Vec<String>> {
    static TABLE: OnceLock<BTreeMap<String, Vec<String>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let r: AnchorResource = serde_json::from_str(ANCHORS).expect("bundled anchor table is valid");
        debug_assert_eq!(r.version, 1);
        r.anchors
    })
}

/// The shipped anchor table for a built-in schema.
pub fn default_anchors(schema: &LabelSchema) -> Result<AnchorSet> {
    if !schema.is_builtin() {
        return Err(Error::UnknownSchema(schema.name().to_string()));
    }
    let table = bundled_anchors();
    let map = schema
        .labels()
        .iter()
        .map(|l| {
            table
                .get(l.as_str())
                .map(|a| (l.clone(), a.clone()))
                .ok_or_else(|| Error::UnknownSchema(schema.name().to_string()))
        })
        .collect::<Result<_>>()?;
    AnchorSet::new(schema, map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelWordEntry {
    pub word: String,
    pub weight: f64,
    /// Anchor whose neighbourhood produced the word; `None` for hand-written entries.
    pub anchor: Option<String>,
    /// Section corpus the word was retrieved from; `None` for anchors themselves.
    pub section: Option<CanonicalSection>,
}

/// One applied refinement step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRecord {
    pub step: String,
    pub params: serde_json::Value,
    pub support_fingerprint: String,
    pub removed: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerbalizerManifest {
    pub tool_version: String,
    pub k: Option<usize>,
    pub embedding_provider: Option<String>,
    pub corpus_fingerprint: Option<String>,
    pub set_sizes: BTreeMap<String, usize>,
    #[serde(default)]
    pub refinements: Vec<RefinementRecord>,
    #[serde(default)]
    pub learnable_weights: bool,
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

impl VerbalizerManifest {
    fn new() -> Self {
        VerbalizerManifest {
            tool_version: crate::TOOL_VERSION.to_string(),
            k: None,
            embedding_provider: None,
            corpus_fingerprint: None,
            set_sizes: BTreeMap::new(),
            refinements: Vec::new(),
            learnable_weights: false,
            config: None,
        }
    }
}

/// Per-label weighted label-word lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Verbalizer {
    schema: LabelSchema,
    entries: Vec<(Label, Vec<LabelWordEntry>)>,
    manifest: VerbalizerManifest,
}

impl Verbalizer {
    /// Builds a verbalizer from explicit word lists with uniform weights.
    pub fn from_words(schema: &LabelSchema, words: &[(&str, &[&str])]) -> Result<Self> {
        let mut map: BTreeMap<Label, Vec<LabelWordEntry>> = BTreeMap::new();
        for (label, ws) in words {
            let label = schema.resolve(label)?;
            let list = map.entry(label).or_default();
            for w in *ws {
                list.push(LabelWordEntry {
                    word: w.to_string(),
                    weight: 1.0,
                    anchor: None,
                    section: None,
                });
            }
        }
        Verbalizer::from_entries(schema, map)
    }

    /// Assembles a verbalizer from entries; weights are renormalized within
    /// each label and invariants are checked.
    pub fn from_entries(schema: &LabelSchema, map: BTreeMap<Label, Vec<LabelWordEntry>>) -> Result<Self> {
        for label in map.keys() {
            if !schema.contains(label) {
                return Err(Error::UnknownLabel {
                    label: label.to_string(),
                    schema: schema.name().to_string(),
                });
            }
        }
        let entries = schema
            .labels()
            .iter()
            .map(|l| (l.clone(), map.get(l).cloned().unwrap_or_default()))
            .collect();
        let mut v = Verbalizer {
            schema: schema.clone(),
            entries,
            manifest: VerbalizerManifest::new(),
        };
        v.normalize_weights();
        v.validate()?;
        v.refresh_sizes();
        Ok(v)
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn manifest(&self) -> &VerbalizerManifest {
        &self.manifest
    }

    pub fn manifest_mut(&mut self) -> &mut VerbalizerManifest {
        &mut self.manifest
    }

    pub fn entries(&self, label: &Label) -> &[LabelWordEntry] {
        self.entries
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, e)| e.as_slice())
            .unwrap_or(&[])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Label, &[LabelWordEntry])> {
        self.entries.iter().map(|(l, e)| (l, e.as_slice()))
    }

    pub fn words(&self, label: &Label) -> Vec<&str> {
        self.entries(label).iter().map(|e| e.word.as_str()).collect()
    }

    /// Every distinct word across labels, sorted.
    pub fn all_words(&self) -> Vec<String> {
        let mut all: Vec<String> = self
            .entries
            .iter()
            .flat_map(|(_, es)| es.iter().map(|e| e.word.clone()))
            .collect();
        all.sort();
        all.dedup();
        all
    }

    pub fn ensure_schema(&self, schema: &LabelSchema) -> Result<()> {
        if self.schema.fingerprint() != schema.fingerprint() {
            return Err(Error::SchemaMismatch {
                expected: schema.name().to_string(),
                found: self.schema.name().to_string(),
            });
        }
        Ok(())
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = (&Label, &mut Vec<LabelWordEntry>)> {
        self.entries.iter_mut().map(|(l, e)| (&*l, e))
    }

    /// Rescales weights to sum to one within each label; a label whose
    /// weights are all zero becomes uniform.
    pub fn normalize_weights(&mut self) {
        for (_, es) in &mut self.entries {
            let sum: f64 = es.iter().map(|e| e.weight.max(0.0)).sum();
            let n = es.len() as f64;
            for e in es.iter_mut() {
                e.weight = if sum > 0.0 { e.weight.max(0.0) / sum } else { 1.0 / n };
            }
        }
    }

    pub fn set_uniform_weights(&mut self) {
        for (_, es) in &mut self.entries {
            let n = es.len() as f64;
            for e in es.iter_mut() {
                e.weight = 1.0 / n;
            }
        }
    }

    pub(crate) fn refresh_sizes(&mut self) {
        self.manifest.set_sizes = self
            .entries
            .iter()
            .map(|(l, es)| (l.to_string(), es.len()))
            .collect();
    }

    pub fn validate(&self) -> Result<()> {
        for (label, es) in &self.entries {
            if es.is_empty() {
                return Err(Error::InvalidData(format!("label `{label}` has no label words")));
            }
            let mut seen = HashSet::new();
            let mut sum = 0.0;
            for e in es {
                if e.word.is_empty() {
                    return Err(Error::InvalidData(format!("empty label word under `{label}`")));
                }
                if !seen.insert(e.word.as_str()) {
                    return Err(Error::InvalidData(format!(
                        "duplicate label word `{}` under `{label}`",
                        e.word
                    )));
                }
                if !e.weight.is_finite() || e.weight < 0.0 {
                    return Err(Error::InvalidData(format!(
                        "label word `{}` has invalid weight {}",
                        e.word, e.weight
                    )));
                }
                sum += e.weight;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
                return Err(Error::InvalidData(format!(
                    "weights of `{label}` sum to {sum}, not 1"
                )));
            }
        }
        Ok(())
    }

    /// Content hash over schema, words, weights and origins.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.schema.fingerprint().as_bytes());
        for (label, es) in &self.entries {
            h.update(label.as_str().as_bytes());
            for e in es {
                h.update([0u8]);
                h.update(e.word.as_bytes());
                h.update(e.weight.to_le_bytes());
                h.update(e.anchor.as_deref().unwrap_or("").as_bytes());
                h.update(e.section.map(|s| s.as_str()).unwrap_or("").as_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Maps every label word to a vocabulary id. Unresolvable words are kept
    /// with `None` so their weight still counts against the label.
    pub fn resolve(&self, vocab: &Vocab) -> ResolvedVerbalizer {
        let labels = self
            .entries
            .iter()
            .map(|(label, es)| {
                es.iter()
                    .map(|e| {
                        let id = vocab.resolve_word(&e.word).map(|r| r.id);
                        if id.is_none() {
                            log::debug!("label word `{}` ({label}) is not in the vocabulary; it scores 0", e.word);
                        }
                        (id, e.weight)
                    })
                    .collect()
            })
            .collect();
        ResolvedVerbalizer { labels }
    }
}

/// Label words resolved against one vocabulary, in schema label order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedVerbalizer {
    pub labels: Vec<Vec<(Option<u32>, f64)>>,
}

impl ResolvedVerbalizer {
    /// `score(y) = Σ_w weight(w|y) · p(w)` over raw (possibly unnormalized) mass.
    pub fn score(&self, probs: &[f64]) -> Vec<f64> {
        self.labels
            .iter()
            .map(|words| {
                words
                    .iter()
                    .map(|(id, w)| id.map(|i| w * probs[i as usize]).unwrap_or(0.0))
                    .sum()
            })
            .collect()
    }
}

fn build_label_words(
    label: &Label,
    anchors: &[String],
    sections: &[CanonicalSection],
    corpus: &SectionCorpus,
    embedder: &dyn EmbeddingProvider,
    k: usize,
) -> Result<Vec<LabelWordEntry>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for a in anchors {
        if seen.insert(a.clone()) {
            out.push(LabelWordEntry {
                word: a.clone(),
                weight: 0.0,
                anchor: Some(a.clone()),
                section: None,
            });
        }
    }
    for a in anchors {
        for &section in sections {
            let candidates = corpus.vocabulary(section);
            let hits = top_k_similar(embedder, a, &candidates, k)?;
            log::debug!("{label}: ({a}, {section}) -> {} words", hits.len());
            for (word, _) in hits {
                if seen.insert(word.clone()) {
                    out.push(LabelWordEntry {
                        word,
                        weight: 0.0,
                        anchor: Some(a.clone()),
                        section: Some(section),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Expands each label's anchors over the corpus sections mapped to it.
///
/// A label's words are its anchors followed by the union of
/// `top_k_similar(anchor, section words, k)` over every (anchor, section)
/// pair, deduplicated by exact string. Weights start uniform.
pub fn build_verbalizer(
    schema: &LabelSchema,
    anchors: &AnchorSet,
    section_map: &LabelSectionMap,
    corpus: &SectionCorpus,
    embedder: &dyn EmbeddingProvider,
    k: usize,
) -> Result<Verbalizer> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    for (_, sections) in section_map.iter() {
        for s in sections {
            if corpus.fill(*s) == 0 {
                return Err(Error::EmptySection(s.to_string()));
            }
        }
    }
    for (_, words) in anchors.iter() {
        for a in words {
            if embedder.embed(a).is_none() {
                return Err(Error::AnchorNotEmbeddable(a.clone()));
            }
        }
    }
    let mut map = BTreeMap::new();
    for label in schema.labels() {
        let words = build_label_words(
            label,
            anchors.anchors(label),
            section_map.sections(label),
            corpus,
            embedder,
            k,
        )?;
        map.insert(label.clone(), words);
    }
    let mut v = Verbalizer::from_entries(schema, map)?;
    v.manifest.k = Some(k);
    v.manifest.embedding_provider = Some(embedder.id().to_string());
    v.manifest.corpus_fingerprint = Some(corpus.fingerprint());
    Ok(v)
}

/// Label scores in schema order.
pub fn score_labels(dist: &MaskDistribution, verbalizer: &Verbalizer) -> Result<Vec<(Label, f64)>> {
    let resolved = verbalizer.resolve(dist.vocab());
    let scores = resolved.score(dist.probs());
    Ok(verbalizer
        .schema()
        .labels()
        .iter()
        .cloned()
        .zip(scores)
        .collect())
}

/// Index of the highest score; the earliest index wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn argmax_label(scores: &[(Label, f64)]) -> &Label {
    let values: Vec<f64> = scores.iter().map(|(_, s)| *s).collect();
    &scores[argmax(&values)].0
}

pub fn predict(dist: &MaskDistribution, verbalizer: &Verbalizer) -> Result<Label> {
    let scores = score_labels(dist, verbalizer)?;
    Ok(argmax_label(&scores).clone())
}

#[derive(Serialize, Deserialize)]
struct SchemaHeader {
    name: String,
    labels: Vec<String>,
    fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct VerbalizerFile {
    version: u32,
    schema: SchemaHeader,
    manifest: VerbalizerManifest,
    labels: BTreeMap<String, Vec<LabelWordEntry>>,
}

impl Verbalizer {
    pub fn to_json(&self) -> Result<String> {
        let file = VerbalizerFile {
            version: VERBALIZER_FORMAT_VERSION,
            schema: SchemaHeader {
                name: self.schema.name().to_string(),
                labels: self.schema.labels().iter().map(|l| l.to_string()).collect(),
                fingerprint: self.schema.fingerprint(),
            },
            manifest: self.manifest.clone(),
            labels: self
                .entries
                .iter()
                .map(|(l, es)| (l.to_string(), es.clone()))
                .collect(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::json("verbalizer", e))
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| Error::json("verbalizer", e))?;
        let version = value
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::InvalidData("verbalizer file lacks a version".into()))?;
        if version != VERBALIZER_FORMAT_VERSION as u64 {
            return Err(Error::VersionMismatch {
                expected: VERBALIZER_FORMAT_VERSION,
                found: version as u32,
            });
        }
        let file: VerbalizerFile =
            serde_json::from_value(value).map_err(|e| Error::json("verbalizer", e))?;
        let labels: Vec<&str> = file.schema.labels.iter().map(String::as_str).collect();
        let schema = match LabelSchema::builtin(&file.schema.name) {
            Ok(s) => s,
            Err(_) => LabelSchema::new(file.schema.name.clone(), &labels)?,
        };
        if schema.fingerprint() != file.schema.fingerprint {
            return Err(Error::SchemaMismatch {
                expected: file.schema.fingerprint,
                found: schema.fingerprint(),
            });
        }
        let mut map = BTreeMap::new();
        for (name, es) in file.labels {
            let label = Label::new(name)?;
            if !schema.contains(&label) {
                return Err(Error::UnknownLabel {
                    label: label.to_string(),
                    schema: schema.name().to_string(),
                });
            }
            map.insert(label, es);
        }
        let entries = schema
            .labels()
            .iter()
            .map(|l| (l.clone(), map.remove(l).unwrap_or_default()))
            .collect();
        let v = Verbalizer {
            schema,
            entries,
            manifest: file.manifest,
        };
        v.validate()?;
        Ok(v)
    }
}

pub fn save_verbalizer(verbalizer: &Verbalizer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, verbalizer.to_json()? + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_verbalizer(path: impl AsRef<Path>) -> Result<Verbalizer> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Verbalizer::from_json(&raw)
}
