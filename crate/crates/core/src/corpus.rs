//! Per-section word corpora built from parsed scientific papers.
//!
//! Papers arrive as line-delimited JSON records (`paper_id`, optional
//! `field_of_study`, and `body_text` as a list of `{section, text}`
//! paragraphs). Headings are mapped onto eight canonical sections and each
//! section is filled with filtered running tokens up to a fixed quota.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Label, LabelSchema};
use crate::error::{Error, Result};

const SECTION_ALIASES: &str = include_str!("../resources/section_aliases.json");
const STOPWORDS: &str = include_str!("../resources/stopwords.txt");

pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanonicalSection {
    Introduction,
    RelatedWork,
    Motivation,
    Methodology,
    Evaluation,
    Results,
    Discussion,
    Conclusion,
}

impl CanonicalSection {
    pub const ALL: [CanonicalSection; 8] = [
        CanonicalSection::Introduction,
        CanonicalSection::RelatedWork,
        CanonicalSection::Motivation,
        CanonicalSection::Methodology,
        CanonicalSection::Evaluation,
        CanonicalSection::Results,
        CanonicalSection::Discussion,
        CanonicalSection::Conclusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CanonicalSection::Introduction => "introduction",
            CanonicalSection::RelatedWork => "related_work",
            CanonicalSection::Motivation => "motivation",
            CanonicalSection::Methodology => "methodology",
            CanonicalSection::Evaluation => "evaluation",
            CanonicalSection::Results => "results",
            CanonicalSection::Discussion => "discussion",
            CanonicalSection::Conclusion => "conclusion",
        }
    }
}

impl fmt::Display for CanonicalSection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CanonicalSection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CanonicalSection::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidData(format!("`{s}` is not a canonical section")))
    }
}

/// Heading alias table. The bundled table can be extended from a JSON file of
/// the same shape (`{"version": 1, "aliases": {"heading": "section"}}`).
#[derive(Debug, Clone)]
pub struct SectionAliases {
    aliases: BTreeMap<String, CanonicalSection>,
}

#[derive(Deserialize)]
struct AliasFile {
    version: u32,
    aliases: BTreeMap<String, CanonicalSection>,
}

impl Default for SectionAliases {
    fn default() -> Self {
        static DEFAULT: OnceLock<SectionAliases> = OnceLock::new();
        DEFAULT
            .get_or_init(|| {
                let f: AliasFile = serde_json::from_str(SECTION_ALIASES)
                    .expect("bundled section alias table is valid");
                SectionAliases { aliases: f.aliases }
            })
            .clone()
    }
}

impl SectionAliases {
    /// Adds entries from a user alias file; user entries win.
    pub fn extend_from_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: AliasFile =
            serde_json::from_str(&raw).map_err(|e| Error::json(path.display().to_string(), e))?;
        if f.version != 1 {
            return Err(Error::VersionMismatch {
                expected: 1,
                found: f.version,
            });
        }
        for (k, v) in f.aliases {
            self.aliases.insert(clean_heading(&k), v);
        }
        Ok(())
    }

    pub fn insert(&mut self, heading: &str, section: CanonicalSection) {
        self.aliases.insert(clean_heading(heading), section);
    }

    pub fn lookup(&self, raw: &str) -> Option<CanonicalSection> {
        let key = clean_heading(raw);
        if key.is_empty() {
            return None;
        }
        self.aliases.get(&key).copied()
    }

    pub fn len(&self) -> usize {
        self.aliases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aliases.is_empty()
    }
}

fn is_numbering(tok: &str) -> bool {
    let t = tok.trim_end_matches(['.', ')', ':']);
    if t.is_empty() {
        return true;
    }
    if t.chars().all(|c| c.is_ascii_digit() || c == '.') {
        return true;
    }
    const ROMAN: [&str; 12] = [
        "i", "ii", "iii", "iv", "v", "vi", "vii", "viii", "ix", "x", "xi", "xii",
    ];
    ROMAN.contains(&t)
}

/// Lowercases, drops leading section numbering ("2.1", "IV."), maps `&` to
/// `and`, strips punctuation, collapses whitespace.
fn clean_heading(raw: &str) -> String {
    let lowered = raw.to_lowercase().replace('&', " and ");
    let mut words: Vec<&str> = lowered.split_whitespace().collect();
    while words.len() > 1 && is_numbering(words[0]) {
        words.remove(0);
    }
    words
        .iter()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric() || *c == '-')
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Maps a free-form heading to a canonical section via the bundled alias
/// table. Returns `None` when nothing matches.
pub fn normalize_section_name(raw: &str) -> Option<CanonicalSection> {
    static DEFAULT: OnceLock<SectionAliases> = OnceLock::new();
    DEFAULT.get_or_init(SectionAliases::default).lookup(raw)
}

fn stopwords() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| STOPWORDS.split_whitespace().collect())
}

/// Splits on non-alphabetic characters, lowercases, and drops tokens shorter
/// than three characters and stopwords.
pub fn corpus_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|t| t.chars().count() >= 3)
        .map(str::to_lowercase)
        .filter(|t| !stopwords().contains(t.as_str()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyParagraph {
    pub section: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
enum FieldOfStudy {
    One(String),
    Many(Vec<String>),
}

/// One parsed paper in the S2ORC-like shape.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct PaperRecord {
    pub paper_id: String,
    #[serde(default, alias = "mag_field_of_study")]
    field_of_study: Option<FieldOfStudy>,
    #[serde(default)]
    pub body_text: Vec<BodyParagraph>,
}

impl PaperRecord {
    pub fn new(paper_id: impl Into<String>, body_text: Vec<BodyParagraph>) -> Self {
        PaperRecord {
            paper_id: paper_id.into(),
            field_of_study: None,
            body_text,
        }
    }

    pub fn with_fields_of_study(mut self, fields: Vec<String>) -> Self {
        self.field_of_study = Some(FieldOfStudy::Many(fields));
        self
    }

    pub fn fields_of_study(&self) -> Vec<&str> {
        match &self.field_of_study {
            None => Vec::new(),
            Some(FieldOfStudy::One(s)) => vec![s.as_str()],
            Some(FieldOfStudy::Many(v)) => v.iter().map(String::as_str).collect(),
        }
    }
}

/// Reads a line-delimited paper stream. Unparseable lines surface as `Err`
/// items so the ingester can count and skip them.
pub fn read_paper_stream(path: impl AsRef<Path>) -> Result<impl Iterator<Item = Result<PaperRecord>>> {
    let path = path.as_ref().to_path_buf();
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let reader = BufReader::new(f);
    Ok(reader
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(move |(i, line)| {
            let line = line.map_err(|e| Error::io(&path, e))?;
            serde_json::from_str::<PaperRecord>(&line).map_err(|e| Error::MalformedRecord {
                path: path.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        }))
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub quota: usize,
    /// Keep only papers whose field-of-study list contains this value
    /// (case-insensitive). Papers without metadata pass through.
    pub field_of_study: Option<String>,
    pub aliases: SectionAliases,
}

impl IngestOptions {
    pub fn new(quota: usize) -> Self {
        IngestOptions {
            quota,
            field_of_study: None,
            aliases: SectionAliases::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub quota: usize,
    pub papers_consumed: usize,
    pub papers_filtered: usize,
    pub skipped_records: usize,
    pub count_mode: String,
    pub sections: BTreeMap<CanonicalSection, usize>,
    pub fingerprint: String,
    /// Run configuration that produced the archive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

/// Filtered running tokens per canonical section, each capped at `quota`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionCorpus {
    quota: usize,
    words: BTreeMap<CanonicalSection, Vec<String>>,
    papers_consumed: usize,
    papers_filtered: usize,
    skipped_records: usize,
}

impl SectionCorpus {
    pub fn empty(quota: usize) -> Self {
        SectionCorpus {
            quota,
            words: CanonicalSection::ALL.iter().map(|s| (*s, Vec::new())).collect(),
            papers_consumed: 0,
            papers_filtered: 0,
            skipped_records: 0,
        }
    }

    /// Builds a corpus directly from per-section word lists (truncated to quota).
    pub fn from_words(quota: usize, words: BTreeMap<CanonicalSection, Vec<String>>) -> Self {
        let mut c = SectionCorpus::empty(quota);
        for (s, mut w) in words {
            w.truncate(quota);
            c.words.insert(s, w);
        }
        c
    }

    pub fn quota(&self) -> usize {
        self.quota
    }

    pub fn papers_consumed(&self) -> usize {
        self.papers_consumed
    }

    pub fn skipped_records(&self) -> usize {
        self.skipped_records
    }

    /// Running tokens of a section in stream order.
    pub fn words(&self, section: CanonicalSection) -> &[String] {
        self.words.get(&section).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn fill(&self, section: CanonicalSection) -> usize {
        self.words(section).len()
    }

    /// Distinct words of a section, sorted.
    pub fn vocabulary(&self, section: CanonicalSection) -> Vec<String> {
        let mut v: Vec<String> = self.words(section).to_vec();
        v.sort();
        v.dedup();
        v
    }

    pub fn counts(&self, section: CanonicalSection) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for w in self.words(section) {
            *m.entry(w.as_str()).or_insert(0) += 1;
        }
        m
    }

    pub fn is_full(&self) -> bool {
        CanonicalSection::ALL.iter().all(|s| self.fill(*s) >= self.quota)
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.quota as u64).to_le_bytes());
        for s in CanonicalSection::ALL {
            h.update(s.as_str().as_bytes());
            for w in self.words(s) {
                h.update([0u8]);
                h.update(w.as_bytes());
            }
            h.update([1u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest {
            format_version: CORPUS_FORMAT_VERSION,
            tool_version: crate::TOOL_VERSION.to_string(),
            quota: self.quota,
            papers_consumed: self.papers_consumed,
            papers_filtered: self.papers_filtered,
            skipped_records: self.skipped_records,
            count_mode: "running_tokens".into(),
            sections: CanonicalSection::ALL
                .iter()
                .map(|s| (*s, self.fill(*s)))
                .collect(),
            fingerprint: self.fingerprint(),
            config: None,
        }
    }

    /// Writes `<section>.txt` (one token per line, stream order) for all
    /// eight sections plus `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<CorpusManifest> {
        self.save_with_config(dir, None)
    }

    /// Like [`SectionCorpus::save`], embedding `config` in the manifest.
    pub fn save_with_config(&self, dir: impl AsRef<Path>, config: Option<serde_json::Value>) -> Result<CorpusManifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in CanonicalSection::ALL {
            let path = dir.join(format!("{}.txt", s.as_str()));
            let mut body = self.words(s).join("\n");
            if !body.is_empty() {
                body.push('\n');
            }
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        let mut manifest = self.manifest();
        manifest.config = config;
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::json("corpus manifest", e))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CorpusManifest =
            serde_json::from_str(&raw).map_err(|e| Error::json(path.display().to_string(), e))?;
        if manifest.format_version != CORPUS_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CORPUS_FORMAT_VERSION,
                found: manifest.format_version,
            });
        }
        let mut words = BTreeMap::new();
        for s in CanonicalSection::ALL {
            let path = dir.join(format!("{}.txt", s.as_str()));
            let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let list: Vec<String> = raw
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect();
            words.insert(s, list);
        }
        let corpus = SectionCorpus {
            quota: manifest.quota,
            words,
            papers_consumed: manifest.papers_consumed,
            papers_filtered: manifest.papers_filtered,
            skipped_records: manifest.skipped_records,
        };
        if corpus.fingerprint() != manifest.fingerprint {
            return Err(Error::InvalidData(format!(
                "{}: corpus files do not match manifest fingerprint",
                dir.display()
            )));
        }
        Ok(corpus)
    }
}

/// Fills each canonical section with filtered tokens, in stream order, until
/// every section holds `quota` words or the stream ends.
///
/// Unreadable records are skipped and counted. A paragraph whose heading
/// maps to no canonical section contributes nothing.
pub fn ingest_sections<I>(papers: I, options: &IngestOptions) -> Result<SectionCorpus>
where
    I: IntoIterator<Item = Result<PaperRecord>>,
{
    if options.quota == 0 {
        return Err(Error::InvalidArgument("quota must be positive".into()));
    }
    let quota = options.quota;
    let mut corpus = SectionCorpus::empty(quota);
    let wanted_field = options.field_of_study.as_ref().map(|f| f.to_lowercase());
    for record in papers {
        if corpus.is_full() {
            break;
        }
        let paper = match record {
            Ok(p) => p,
            Err(e) => {
                log::warn!("skipping unreadable paper record: {e}");
                corpus.skipped_records += 1;
                continue;
            }
        };
        if let Some(field) = &wanted_field {
            let fields = paper.fields_of_study();
            if !fields.is_empty() && !fields.iter().any(|f| f.to_lowercase() == *field) {
                corpus.papers_filtered += 1;
                continue;
            }
        }
        corpus.papers_consumed += 1;
        for para in &paper.body_text {
            let Some(section) = options.aliases.lookup(&para.section) else {
                continue;
            };
            let bucket = corpus.words.entry(section).or_default();
            if bucket.len() >= quota {
                continue;
            }
            for tok in corpus_tokens(&para.text) {
                bucket.push(tok);
                if bucket.len() >= quota {
                    break;
                }
            }
        }
    }
    Ok(corpus)
}

/// Label → sections where that intent is most used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSectionMap {
    entries: Vec<(Label, Vec<CanonicalSection>)>,
}

impl LabelSectionMap {
    /// Validates that every schema label has at least one section.
    pub fn new(schema: &LabelSchema, map: BTreeMap<Label, Vec<CanonicalSection>>) -> Result<Self> {
        let mut entries = Vec::with_capacity(schema.len());
        for label in schema.labels() {
            let sections = map.get(label).cloned().unwrap_or_default();
            if sections.is_empty() {
                return Err(Error::InvalidData(format!(
                    "label `{label}` has no mapped sections"
                )));
            }
            entries.push((label.clone(), sections));
        }
        for label in map.keys() {
            if !schema.contains(label) {
                return Err(Error::UnknownLabel {
                    label: label.to_string(),
                    schema: schema.name().to_string(),
                });
            }
        }
        Ok(LabelSectionMap { entries })
    }

    /// Loads a custom map from a JSON object `{label: [section, ...]}`.
    pub fn from_file(schema: &LabelSchema, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, Vec<CanonicalSection>> =
            serde_json::from_str(&raw).map_err(|e| Error::json(path.display().to_string(), e))?;
        let map = map
            .into_iter()
            .map(|(k, v)| Ok((schema.resolve(&k)?, v)))
            .collect::<Result<_>>()?;
        LabelSectionMap::new(schema, map)
    }

    pub fn sections(&self, label: &Label) -> &[CanonicalSection] {
        self.entries
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, s)| s.as_slice())
            .unwrap_or(&[])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Label, &[CanonicalSection])> {
        self.entries.iter().map(|(l, s)| (l, s.as_slice()))
    }
}

fn table_sections(label: &str) -> Option<&'static [CanonicalSection]> {
    use CanonicalSection::*;
    Some(match label {
        "background" => &[Introduction, RelatedWork, Motivation],
        "method" => &[Methodology],
        "result" => &[Results],
        "motivation" => &[Introduction],
        "uses" => &[Motivation, Evaluation, Methodology, Results],
        "compare_contrast" => &[RelatedWork, Results, Discussion],
        "extends" => &[Motivation, Methodology],
        "future" => &[Conclusion, Discussion],
        _ => return None,
    })
}

/// Built-in label → section table for the ACL-ARC and SciCite schemas.
pub fn default_section_map(schema: &LabelSchema) -> Result<LabelSectionMap> {
    if !schema.is_builtin() {
        return Err(Error::UnknownSchema(schema.name().to_string()));
    }
    let map = schema
        .labels()
        .iter()
        .map(|l| {
            let sections = table_sections(l.as_str())
                .ok_or_else(|| Error::UnknownSchema(schema.name().to_string()))?;
            Ok((l.clone(), sections.to_vec()))
        })
        .collect::<Result<_>>()?;
    LabelSectionMap::new(schema, map)
}
