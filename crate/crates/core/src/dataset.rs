//! Citation-intent datasets: label schemas, line-delimited record loading and
//! stratified k-shot sampling.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const LABEL_ALIASES: &str = include_str!("../resources/label_aliases.json");

/// A canonical, lowercase intent label.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Label(String);

impl Label {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(Error::InvalidArgument("label name must be non-empty".into()));
        }
        Ok(Label(name.trim().to_lowercase()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// An ordered set of labels plus the source-spelling alias table used on load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSchema {
    name: String,
    labels: Vec<Label>,
    aliases: BTreeMap<String, Label>,
}

#[derive(Deserialize)]
struct AliasResource {
    version: u32,
    schemas: BTreeMap<String, SchemaResource>,
}

#[derive(Deserialize)]
struct SchemaResource {
    labels: Vec<String>,
    aliases: BTreeMap<String, String>,
}

fn builtin_schemas() -> &'static BTreeMap<String, LabelSchema> {
    static SCHEMAS: OnceLock<BTreeMap<String, LabelSchema>> = OnceLock::new();
    SCHEMAS.get_or_init(|| {
        let res: AliasResource =
            serde_json::from_str(LABEL_ALIASES).expect("bundled label alias table is valid");
        debug_assert_eq!(res.version, 1);
        res.schemas
            .into_iter()
            .map(|(name, s)| {
                let labels: Vec<Label> = s.labels.into_iter().map(Label).collect();
                let aliases = s
                    .aliases
                    .into_iter()
                    .map(|(k, v)| (k, Label(v)))
                    .collect();
                let schema = LabelSchema {
                    name: name.clone(),
                    labels,
                    aliases,
                };
                (name, schema)
            })
            .collect()
    })
}

impl LabelSchema {
    /// Builds a custom schema. Labels are lowercased and must be distinct.
    pub fn new(name: impl Into<String>, labels: &[&str]) -> Result<Self> {
        let mut out = Vec::with_capacity(labels.len());
        let mut seen = HashSet::new();
        for l in labels {
            let label = Label::new(*l)?;
            if !seen.insert(label.clone()) {
                return Err(Error::InvalidArgument(format!("duplicate label `{label}`")));
            }
            out.push(label);
        }
        if out.is_empty() {
            return Err(Error::InvalidArgument("schema needs at least one label".into()));
        }
        let aliases = out.iter().map(|l| (l.0.clone(), l.clone())).collect();
        Ok(LabelSchema {
            name: name.into(),
            labels: out,
            aliases,
        })
    }

    /// The six-label ACL-ARC schema.
    pub fn acl_arc() -> Self {
        builtin_schemas()["acl_arc"].clone()
    }

    /// The three-label SciCite schema.
    pub fn scicite() -> Self {
        builtin_schemas()["scicite"].clone()
    }

    /// Looks up a built-in schema. Accepts `acl_arc`/`acl-arc` and `scicite`.
    pub fn builtin(name: &str) -> Result<Self> {
        let key = name.trim().to_lowercase().replace('-', "_");
        builtin_schemas()
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::UnknownSchema(name.to_string()))
    }

    pub fn is_builtin(&self) -> bool {
        builtin_schemas().get(&self.name) == Some(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &Label) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn contains(&self, label: &Label) -> bool {
        self.index_of(label).is_some()
    }

    /// Maps a source-dataset spelling to its canonical label.
    pub fn resolve(&self, raw: &str) -> Result<Label> {
        let key = raw.trim().to_lowercase();
        self.aliases
            .get(&key)
            .or_else(|| self.aliases.get(&key.replace([' ', '-'], "")))
            .cloned()
            .ok_or_else(|| Error::UnknownLabel {
                label: raw.to_string(),
                schema: self.name.clone(),
            })
    }

    /// Stable fingerprint of the schema identity (name and ordered labels).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        for l in &self.labels {
            h.update([0u8]);
            h.update(l.0.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "dev" | "validation" | "val" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// One citation sentence, optionally labeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CitationInstance {
    pub instance_id: String,
    pub text: String,
    pub label: Option<Label>,
    pub section_hint: Option<String>,
}

impl CitationInstance {
    pub fn new(instance_id: impl Into<String>, text: &str, label: Option<Label>) -> Result<Self> {
        let text = normalize_whitespace(text);
        if text.is_empty() {
            return Err(Error::InvalidArgument("citation text is empty".into()));
        }
        Ok(CitationInstance {
            instance_id: instance_id.into(),
            text,
            label,
            section_hint: None,
        })
    }
}

/// Collapses whitespace runs to single spaces and strips both ends.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone)]
pub struct Dataset {
    schema: LabelSchema,
    split: Split,
    instances: Vec<CitationInstance>,
}

impl Dataset {
    /// Validates labels against the schema and id uniqueness.
    pub fn new(schema: LabelSchema, split: Split, instances: Vec<CitationInstance>) -> Result<Self> {
        let mut ids = HashSet::with_capacity(instances.len());
        for inst in &instances {
            if let Some(label) = &inst.label {
                if !schema.contains(label) {
                    return Err(Error::UnknownLabel {
                        label: label.to_string(),
                        schema: schema.name().to_string(),
                    });
                }
            }
            if !ids.insert(inst.instance_id.as_str()) {
                return Err(Error::InvalidData(format!(
                    "duplicate instance id `{}`",
                    inst.instance_id
                )));
            }
        }
        Ok(Dataset {
            schema,
            split,
            instances,
        })
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn instances(&self) -> &[CitationInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.instances.iter().map(|i| i.text.as_str())
    }

    /// Per-label instance counts in schema order.
    pub fn label_counts(&self) -> Vec<(Label, usize)> {
        self.schema
            .labels()
            .iter()
            .map(|l| {
                let n = self
                    .instances
                    .iter()
                    .filter(|i| i.label.as_ref() == Some(l))
                    .count();
                (l.clone(), n)
            })
            .collect()
    }
}

#[derive(Deserialize)]
struct RawRecord {
    string: Option<String>,
    label: Option<serde_json::Value>,
    id: Option<serde_json::Value>,
    #[serde(rename = "sectionName")]
    section_name: Option<serde_json::Value>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    id: &'a str,
    string: &'a str,
    label: Option<&'a str>,
    #[serde(rename = "sectionName", skip_serializing_if = "Option::is_none")]
    section_name: Option<&'a str>,
}

fn value_to_string(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::Null => None,
        serde_json::Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

/// Loads a line-delimited JSON dataset file.
///
/// Each non-blank line must be an object with `string` and `label`; `id` and
/// `sectionName` are optional and other keys are ignored. A `null` label
/// yields an unlabeled instance. Missing ids default to `<split>-<line>`.
pub fn load_dataset(path: impl AsRef<Path>, schema: &LabelSchema, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let split_name = match split {
        Split::Train => "train",
        Split::Dev => "dev",
        Split::Test => "test",
    };
    let mut instances = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord =
            serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
        let text = rec.string.ok_or_else(|| Error::MissingField {
            path: path.to_path_buf(),
            line: line_no,
            field: "string",
        })?;
        let raw_label = rec.label.ok_or_else(|| Error::MissingField {
            path: path.to_path_buf(),
            line: line_no,
            field: "label",
        })?;
        let label = match value_to_string(&raw_label) {
            Some(s) => Some(schema.resolve(&s)?),
            None => None,
        };
        let id = rec
            .id
            .as_ref()
            .and_then(value_to_string)
            .unwrap_or_else(|| format!("{split_name}-{line_no}"));
        let mut inst = CitationInstance::new(id, &text, label).map_err(|_| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: line_no,
            message: "empty citation text".into(),
        })?;
        inst.section_hint = rec.section_name.as_ref().and_then(value_to_string);
        instances.push(inst);
    }
    Dataset::new(schema.clone(), split, instances)
}

/// Writes a dataset in the same line-delimited format `load_dataset` reads.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for inst in dataset.instances() {
        let rec = OutRecord {
            id: &inst.instance_id,
            string: &inst.text,
            label: inst.label.as_ref().map(Label::as_str),
            section_name: inst.section_hint.as_deref(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::json("dataset record", e))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Stratified k-shot subset: `min(k, count)` instances per label, drawn
/// uniformly without replacement from a ChaCha stream seeded by `seed`.
///
/// Selected instances keep their original dataset order.
pub fn sample_few_shot(dataset: &Dataset, k: usize, seed: u64) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if dataset.split() != Split::Train {
        return Err(Error::InvalidArgument(
            "few-shot sampling draws from the train split only".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; dataset.len()];
    for label in dataset.schema().labels() {
        let mut pool: Vec<usize> = dataset
            .instances()
            .iter()
            .enumerate()
            .filter(|(_, inst)| inst.label.as_ref() == Some(label))
            .map(|(i, _)| i)
            .collect();
        if pool.is_empty() {
            return Err(Error::InvalidData(format!(
                "label `{label}` has no training instances"
            )));
        }
        let take = k.min(pool.len());
        let (chosen, _) = pool.partial_shuffle(&mut rng, take);
        for &i in chosen.iter() {
            keep[i] = true;
        }
    }
    let instances = dataset
        .instances()
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(inst, _)| inst.clone())
        .collect();
    Dataset::new(dataset.schema().clone(), Split::Train, instances)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn synthetic(schema: &LabelSchema, per_label: &[usize]) -> Dataset {
        let mut instances = Vec::new();
        for (label, &n) in schema.labels().iter().zip(per_label) {
            for i in 0..n {
                instances.push(
                    CitationInstance::new(
                        format!("{label}-{i}"),
                        &format!("sentence {i} about {label}"),
                        Some(label.clone()),
                    )
                    .unwrap(),
                );
            }
        }
        Dataset::new(schema.clone(), Split::Train, instances).unwrap()
    }

    #[test]
    fn builtin_schema_sizes() {
        let acl = LabelSchema::acl_arc();
        let names: Vec<_> = acl.labels().iter().map(Label::as_str).collect();
        assert_eq!(
            names,
            ["background", "motivation", "extends", "uses", "compare_contrast", "future"]
        );
        let sci = LabelSchema::scicite();
        let names: Vec<_> = sci.labels().iter().map(Label::as_str).collect();
        assert_eq!(names, ["background", "method", "result"]);
        assert!(sci.is_builtin());
        assert!(!LabelSchema::new("x", &["a"]).unwrap().is_builtin());
    }

    #[test]
    fn aliases_map_source_spellings() {
        let acl = LabelSchema::acl_arc();
        assert_eq!(acl.resolve("CompareOrContrast").unwrap().as_str(), "compare_contrast");
        let sci = LabelSchema::scicite();
        assert_eq!(sci.resolve("resultComparison").unwrap().as_str(), "result");
        assert!(matches!(sci.resolve("uses"), Err(Error::UnknownLabel { .. })));
    }

    #[test]
    fn loads_single_record() {
        let f = write_tmp("{\"string\": \"We follow [3].\", \"label\": \"background\"}\n");
        let ds = load_dataset(f.path(), &LabelSchema::scicite(), Split::Train).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.instances()[0].text, "We follow [3].");
        assert_eq!(ds.instances()[0].label.as_ref().unwrap().as_str(), "background");
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let f = write_tmp("");
        let ds = load_dataset(f.path(), &LabelSchema::acl_arc(), Split::Test).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn whitespace_is_normalized_and_extra_keys_ignored() {
        let f = write_tmp(
            "{\"string\": \"  We   follow\\t[3]. \", \"label\": \"method\", \"sectionName\": \"Intro\", \"citeStart\": 4}\n",
        );
        let ds = load_dataset(f.path(), &LabelSchema::scicite(), Split::Dev).unwrap();
        assert_eq!(ds.instances()[0].text, "We follow [3].");
        assert_eq!(ds.instances()[0].section_hint.as_deref(), Some("Intro"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_tmp("{\"string\": \"a\", \"label\": \"method\"}\n{not json\n");
        match load_dataset(f.path(), &LabelSchema::scicite(), Split::Train) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_label_and_missing_field() {
        let f = write_tmp("{\"string\": \"a\", \"label\": \"uses\"}\n");
        assert!(matches!(
            load_dataset(f.path(), &LabelSchema::scicite(), Split::Train),
            Err(Error::UnknownLabel { .. })
        ));
        let f = write_tmp("{\"label\": \"method\"}\n");
        assert!(matches!(
            load_dataset(f.path(), &LabelSchema::scicite(), Split::Train),
            Err(Error::MissingField { field: "string", .. })
        ));
        let f = write_tmp("{\"string\": \"x\"}\n");
        assert!(matches!(
            load_dataset(f.path(), &LabelSchema::scicite(), Split::Train),
            Err(Error::MissingField { field: "label", .. })
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = write_tmp(
            "{\"id\": \"a\", \"string\": \"x\", \"label\": \"method\"}\n{\"id\": \"a\", \"string\": \"y\", \"label\": \"method\"}\n",
        );
        assert!(load_dataset(f.path(), &LabelSchema::scicite(), Split::Train).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let ds = synthetic(&LabelSchema::scicite(), &[2, 1, 3]);
        let out = tempfile::NamedTempFile::new().unwrap();
        save_dataset(&ds, out.path()).unwrap();
        let back = load_dataset(out.path(), ds.schema(), Split::Train).unwrap();
        assert_eq!(back.instances(), ds.instances());
    }

    #[test]
    fn few_shot_five_per_label() {
        let ds = synthetic(&LabelSchema::scicite(), &[20, 12, 9]);
        let s = sample_few_shot(&ds, 5, 7).unwrap();
        assert_eq!(s.len(), 15);
        for (_, n) in s.label_counts() {
            assert_eq!(n, 5);
        }
    }

    #[test]
    fn few_shot_scarce_label_keeps_everything() {
        let ds = synthetic(&LabelSchema::scicite(), &[20, 3, 15]);
        let s = sample_few_shot(&ds, 10, 99).unwrap();
        let method = Label::new("method").unwrap();
        let got: HashSet<_> = s
            .instances()
            .iter()
            .filter(|i| i.label.as_ref() == Some(&method))
            .map(|i| i.instance_id.clone())
            .collect();
        let expected: HashSet<_> = (0..3).map(|i| format!("method-{i}")).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn few_shot_errors() {
        let ds = synthetic(&LabelSchema::scicite(), &[2, 0, 2]);
        assert!(sample_few_shot(&ds, 1, 0).is_err());
        let ds = synthetic(&LabelSchema::scicite(), &[2, 2, 2]);
        assert!(sample_few_shot(&ds, 0, 0).is_err());
        let test = Dataset::new(ds.schema().clone(), Split::Test, ds.instances().to_vec()).unwrap();
        assert!(sample_few_shot(&test, 1, 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn few_shot_stratified_and_deterministic(
            counts in proptest::collection::vec(1usize..15, 3),
            k in 1usize..12,
            seed in proptest::prelude::any::<u64>(),
        ) {
            let ds = synthetic(&LabelSchema::scicite(), &counts);
            let a = sample_few_shot(&ds, k, seed).unwrap();
            let b = sample_few_shot(&ds, k, seed).unwrap();
            proptest::prop_assert_eq!(a.instances(), b.instances());
            for ((_, got), avail) in a.label_counts().into_iter().zip(&counts) {
                proptest::prop_assert_eq!(got, k.min(*avail));
            }
        }
    }
}
