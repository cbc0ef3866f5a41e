//! Word-embedding port and cosine nearest-neighbour search.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WordVector {
    pub word: String,
    pub components: Vec<f64>,
}

impl WordVector {
    pub fn new(word: impl Into<String>, components: Vec<f64>) -> Self {
        WordVector {
            word: word.into(),
            components,
        }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn norm(&self) -> f64 {
        self.components.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// A read-only source of static word vectors.
pub trait EmbeddingProvider: Send + Sync {
    /// Identifier recorded in verbalizer manifests.
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, word: &str) -> Option<WordVector>;
}

pub fn cosine(a: &WordVector, b: &WordVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let na = a.norm();
    if na == 0.0 {
        return Err(Error::ZeroNorm(a.word.clone()));
    }
    let nb = b.norm();
    if nb == 0.0 {
        return Err(Error::ZeroNorm(b.word.clone()));
    }
    let dot: f64 = a
        .components
        .iter()
        .zip(&b.components)
        .map(|(x, y)| x * y)
        .sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// The `k` embeddable candidates most similar to `anchor`, by descending
/// cosine with lexicographic tie-breaks. Candidates without a vector (or with
/// a zero vector) are skipped.
pub fn top_k_similar(
    provider: &dyn EmbeddingProvider,
    anchor: &str,
    candidates: &[String],
    k: usize,
) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let anchor_vec = provider
        .embed(anchor)
        .ok_or_else(|| Error::AnchorNotEmbeddable(anchor.to_string()))?;
    if anchor_vec.norm() == 0.0 {
        return Err(Error::ZeroNorm(anchor.to_string()));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let Some(v) = provider.embed(cand) else {
            continue;
        };
        if v.norm() == 0.0 {
            continue;
        }
        scored.push((cand.clone(), cosine(&anchor_vec, &v)?));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Vectors held in memory, keyed by word.
#[derive(Debug, Clone)]
pub struct InMemoryEmbeddings {
    id: String,
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl InMemoryEmbeddings {
    pub fn new(id: impl Into<String>, dim: usize) -> Self {
        InMemoryEmbeddings {
            id: id.into(),
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, word: impl Into<String>, components: Vec<f64>) -> Result<()> {
        if components.len() != self.dim {
            return Err(Error::DimensionMismatch {
                left: self.dim,
                right: components.len(),
            });
        }
        self.vectors.insert(word.into(), components);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Parses the plain-text vectors format: one `word v1 v2 ...` per line,
    /// with an optional leading `count dim` header line.
    pub fn parse_text(id: impl Into<String>, content: &str) -> Result<Self> {
        let mut lines = content.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
        let mut dim = None;
        if let Some((_, first)) = lines.peek() {
            let parts: Vec<&str> = first.split_whitespace().collect();
            if parts.len() == 2 && parts.iter().all(|p| p.parse::<usize>().is_ok()) {
                dim = Some(parts[1].parse::<usize>().unwrap_or(0));
                lines.next();
            }
        }
        let mut out: Option<InMemoryEmbeddings> = None;
        let id = id.into();
        for (i, line) in lines {
            let mut parts = line.split_whitespace();
            let word = parts.next().unwrap_or_default();
            let comps = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidData(format!("vectors line {}: {e}", i + 1)))?;
            let store = out.get_or_insert_with(|| {
                InMemoryEmbeddings::new(id.clone(), dim.unwrap_or(comps.len()))
            });
            store.insert(word, comps).map_err(|_| {
                Error::InvalidData(format!("vectors line {}: wrong dimensionality", i + 1))
            })?;
        }
        Ok(out.unwrap_or_else(|| InMemoryEmbeddings::new(id, dim.unwrap_or(0))))
    }

    pub fn load_text(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let id = format!(
            "text-vectors:{}",
            path.file_name().map(|f| f.to_string_lossy()).unwrap_or_default()
        );
        InMemoryEmbeddings::parse_text(id, &content)
    }
}

impl EmbeddingProvider for InMemoryEmbeddings {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, word: &str) -> Option<WordVector> {
        self.vectors
            .get(word)
            .map(|c| WordVector::new(word, c.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: f64, y: f64) -> WordVector {
        WordVector::new("w", vec![x, y])
    }

    #[test]
    fn cosine_cases() {
        let a = v(0.3, -2.0);
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&v(1.0, 0.0), &v(0.0, 1.0)).unwrap(), 0.0);
        assert!((cosine(&v(1.0, 1.0), &v(1.0, 0.0)).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine(&v(1.0, 0.0), &WordVector::new("z", vec![1.0, 0.0, 0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(cosine(&v(0.0, 0.0), &v(1.0, 0.0)), Err(Error::ZeroNorm(_))));
    }

    fn grid_provider() -> (InMemoryEmbeddings, Vec<String>) {
        let mut e = InMemoryEmbeddings::new("toy", 2);
        e.insert("anchor", vec![1.0, 0.25]).unwrap();
        let mut words = Vec::new();
        for i in 0..20 {
            let angle = (i as f64) * 0.31 - 2.0;
            let r = 0.5 + (i % 3) as f64;
            let w = format!("w{i:02}");
            e.insert(w.clone(), vec![r * angle.cos(), r * angle.sin()]).unwrap();
            words.push(w);
        }
        (e, words)
    }

    #[test]
    fn top_k_matches_exhaustive_sort() {
        let (e, words) = grid_provider();
        let a = e.embed("anchor").unwrap();
        // Oracle: compute each cosine by hand-rolled arithmetic, sort everything.
        let mut all: Vec<(String, f64)> = words
            .iter()
            .map(|w| {
                let b = e.embed(w).unwrap();
                let dot = a.components[0] * b.components[0] + a.components[1] * b.components[1];
                (w.clone(), dot / (a.norm() * b.norm()))
            })
            .collect();
        all.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
        let got = top_k_similar(&e, "anchor", &words, 5).unwrap();
        let got_words: Vec<_> = got.iter().map(|(w, _)| w.clone()).collect();
        let want: Vec<_> = all.iter().take(5).map(|(w, _)| w.clone()).collect();
        assert_eq!(got_words, want);
    }

    #[test]
    fn top_k_edge_cases() {
        let (e, words) = grid_provider();
        let got = top_k_similar(&e, "anchor", &["anchor".to_string()], 5).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].0, "anchor");
        let mut with_oov = words.clone();
        with_oov.push("zzzqqq".into());
        let got = top_k_similar(&e, "anchor", &with_oov, 100).unwrap();
        assert_eq!(got.len(), 20);
        assert!(matches!(
            top_k_similar(&e, "missing", &words, 3),
            Err(Error::AnchorNotEmbeddable(_))
        ));
    }

    #[test]
    fn ties_break_lexicographically() {
        let mut e = InMemoryEmbeddings::new("toy", 2);
        e.insert("a", vec![1.0, 0.0]).unwrap();
        e.insert("zeta", vec![2.0, 0.0]).unwrap();
        e.insert("beta", vec![3.0, 0.0]).unwrap();
        let c = vec!["zeta".to_string(), "beta".to_string()];
        let got = top_k_similar(&e, "a", &c, 2).unwrap();
        assert_eq!(got[0].0, "beta");
        assert_eq!(got[1].0, "zeta");
    }

    #[test]
    fn embed_contract() {
        let (e, _) = grid_provider();
        let a = e.embed("w03").unwrap();
        assert_eq!(a.dim(), 2);
        assert_eq!(Some(a), e.embed("w03"));
        assert!(e.embed("#@!garbage").is_none());
    }

    #[test]
    fn parses_text_vectors_with_and_without_header() {
        let with = InMemoryEmbeddings::parse_text("t", "2 3\nfoo 1 2 3\nbar 0.5 0 -1\n").unwrap();
        assert_eq!(with.dim(), 3);
        assert_eq!(with.len(), 2);
        let without = InMemoryEmbeddings::parse_text("t", "foo 1 2\nbar 3 4\n").unwrap();
        assert_eq!(without.dim(), 2);
        assert_eq!(without.embed("bar").unwrap().components, vec![3.0, 4.0]);
        assert!(InMemoryEmbeddings::parse_text("t", "foo 1 2\nbar 3\n").is_err());
        assert!(InMemoryEmbeddings::parse_text("t", "foo 1 x\n").is_err());
    }

    proptest! {
        #[test]
        fn ranking_is_scale_invariant(
            pts in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -4i32..5), 1..15),
            k in 1usize..16,
        ) {
            // Power-of-two scales keep every cosine bit-identical.
            let mut e1 = InMemoryEmbeddings::new("a", 2);
            let mut e2 = InMemoryEmbeddings::new("b", 2);
            e1.insert("anchor", vec![0.7, -0.3]).unwrap();
            e2.insert("anchor", vec![0.7, -0.3]).unwrap();
            let mut words = Vec::new();
            for (i, (x, y, p)) in pts.iter().enumerate() {
                if x.abs() + y.abs() < 1e-6 { continue; }
                let s = 2f64.powi(*p);
                let w = format!("c{i}");
                e1.insert(w.clone(), vec![*x, *y]).unwrap();
                e2.insert(w.clone(), vec![x * s, y * s]).unwrap();
                words.push(w);
            }
            prop_assume!(!words.is_empty());
            let a: Vec<_> = top_k_similar(&e1, "anchor", &words, k).unwrap().into_iter().map(|p| p.0).collect();
            let b: Vec<_> = top_k_similar(&e2, "anchor", &words, k).unwrap().into_iter().map(|p| p.0).collect();
            prop_assert_eq!(a, b);
            let full = top_k_similar(&e1, "anchor", &words, words.len()).unwrap();
            prop_assert_eq!(full.len(), words.len());
            for pair in full.windows(2) {
                prop_assert!(pair[0].1 >= pair[1].1);
            }
        }
    }
}
