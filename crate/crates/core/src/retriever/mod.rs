//! Exhaustive cosine retrieval over library documents, with library metadata filters.

mod embed;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::StepSpec;

pub use embed::{EmbedError, Embedder, HashingEmbedder, HttpEmbedder, HttpEmbedderConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocKind {
    LibraryDoc,
    Tutorial,
    Solution,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusDoc {
    pub doc_id: String,
    pub library: String,
    pub kind: DocKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function_name: Option<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub doc_id: String,
    pub function_name: String,
    pub usage: String,
    pub library: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderInfo {
    pub name: String,
    pub dim: usize,
}

#[derive(Debug, Error)]
pub enum RetrieverError {
    #[error("document `{doc_id}`: {reason}")]
    InvalidDoc { doc_id: String, reason: String },
    #[error("embedding failed for document `{doc_id}`: {source}")]
    Ingest { doc_id: String, source: EmbedError },
    #[error("embedding failed for query: {0}")]
    Query(EmbedError),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("vector has a non-finite entry")]
    NonFinite,
    #[error("embedder `{found}` does not match index provider `{expected}`")]
    ProviderMismatch { expected: String, found: String },
    #[error("k must be positive")]
    ZeroK,
    #[error("cannot read `{path}`: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed document at `{path}`: {message}")]
    Format { path: String, message: String },
}

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, RetrieverError> {
    if a.dim() != b.dim() {
        return Err(RetrieverError::DimMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(RetrieverError::ZeroVector);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// The searchable corpus: documents, their vectors, and a library lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    provider: ProviderInfo,
    docs: Vec<CorpusDoc>,
    vectors: Vec<EmbeddingVector>,
    by_library: BTreeMap<String, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexFile {
    provider: ProviderInfo,
    entries: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexEntry {
    doc: CorpusDoc,
    vector: EmbeddingVector,
}

fn check_vector(v: &EmbeddingVector, dim: usize) -> Result<(), RetrieverError> {
    if v.dim() != dim {
        return Err(RetrieverError::DimMismatch {
            expected: dim,
            found: v.dim(),
        });
    }
    if v.values.iter().any(|x| !x.is_finite()) {
        return Err(RetrieverError::NonFinite);
    }
    if v.norm() == 0.0 {
        return Err(RetrieverError::ZeroVector);
    }
    Ok(())
}

fn validate_doc(doc: &CorpusDoc) -> Result<(), RetrieverError> {
    let bad = |reason: &str| RetrieverError::InvalidDoc {
        doc_id: doc.doc_id.clone(),
        reason: reason.into(),
    };
    if doc.doc_id.trim().is_empty() {
        return Err(bad("doc_id must be non-empty"));
    }
    if doc.text.trim().is_empty() {
        return Err(bad("text must be non-empty"));
    }
    if doc.library.trim().is_empty() {
        return Err(bad("library must be non-empty"));
    }
    Ok(())
}

/// Embeds every document once and builds the index.
pub fn ingest(docs: Vec<CorpusDoc>, embedder: &dyn Embedder) -> Result<EmbeddingIndex, RetrieverError> {
    let mut seen = BTreeSet::new();
    for doc in &docs {
        validate_doc(doc)?;
        if !seen.insert(doc.doc_id.as_str()) {
            return Err(RetrieverError::InvalidDoc {
                doc_id: doc.doc_id.clone(),
                reason: "duplicate doc_id".into(),
            });
        }
    }
    let provider = ProviderInfo {
        name: embedder.name().to_string(),
        dim: embedder.dim(),
    };
    let mut vectors = Vec::with_capacity(docs.len());
    for doc in &docs {
        let v = embedder.embed(&doc.text).map_err(|source| RetrieverError::Ingest {
            doc_id: doc.doc_id.clone(),
            source,
        })?;
        check_vector(&v, provider.dim)?;
        vectors.push(v);
    }
    Ok(EmbeddingIndex::assemble(provider, docs, vectors))
}

impl EmbeddingIndex {
    fn assemble(provider: ProviderInfo, docs: Vec<CorpusDoc>, vectors: Vec<EmbeddingVector>) -> Self {
        let mut by_library: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, doc) in docs.iter().enumerate() {
            by_library.entry(doc.library.clone()).or_default().push(i);
        }
        Self {
            provider,
            docs,
            vectors,
            by_library,
        }
    }

    pub fn provider(&self) -> &ProviderInfo {
        &self.provider
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[CorpusDoc] {
        &self.docs
    }

    pub fn vectors(&self) -> &[EmbeddingVector] {
        &self.vectors
    }

    pub fn libraries(&self) -> impl Iterator<Item = &str> {
        self.by_library.keys().map(String::as_str)
    }

    /// Documents tagged with `library`.
    pub fn by_library(&self, library: &str) -> Vec<&CorpusDoc> {
        self.by_library
            .get(library)
            .map(|ix| ix.iter().map(|&i| &self.docs[i]).collect())
            .unwrap_or_default()
    }

    pub fn to_json(&self) -> String {
        let file = IndexFile {
            provider: self.provider.clone(),
            entries: self
                .docs
                .iter()
                .zip(&self.vectors)
                .map(|(doc, vector)| IndexEntry {
                    doc: doc.clone(),
                    vector: vector.clone(),
                })
                .collect(),
        };
        let mut out = serde_json::to_string(&file).expect("index serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self, RetrieverError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: IndexFile = serde_path_to_error::deserialize(de).map_err(|e| RetrieverError::Format {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        let mut docs = Vec::with_capacity(file.entries.len());
        let mut vectors = Vec::with_capacity(file.entries.len());
        for entry in file.entries {
            validate_doc(&entry.doc)?;
            check_vector(&entry.vector, file.provider.dim)?;
            docs.push(entry.doc);
            vectors.push(entry.vector);
        }
        Ok(Self::assemble(file.provider, docs, vectors))
    }

    pub fn load(path: &Path) -> Result<Self, RetrieverError> {
        let text = std::fs::read_to_string(path).map_err(|source| RetrieverError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Top-`k` documents by cosine similarity to `task_text`, optionally
    /// restricted to some libraries. Ties are broken by `doc_id`.
    pub fn query(
        &self,
        task_text: &str,
        library_filter: Option<&BTreeSet<String>>,
        k: usize,
        embedder: &dyn Embedder,
    ) -> Result<Vec<RetrievedItem>, RetrieverError> {
        if k == 0 {
            return Err(RetrieverError::ZeroK);
        }
        if self.docs.is_empty() {
            return Ok(Vec::new());
        }
        if embedder.name() != self.provider.name {
            return Err(RetrieverError::ProviderMismatch {
                expected: self.provider.name.clone(),
                found: embedder.name().to_string(),
            });
        }
        let q = embedder.embed(task_text).map_err(RetrieverError::Query)?;
        check_vector(&q, self.provider.dim)?;
        let mut scored: Vec<(f64, usize)> = Vec::new();
        for (i, doc) in self.docs.iter().enumerate() {
            if library_filter.is_some_and(|f| !f.contains(&doc.library)) {
                continue;
            }
            scored.push((cosine(&q, &self.vectors[i])?, i));
        }
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| self.docs[a.1].doc_id.cmp(&self.docs[b.1].doc_id))
        });
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(score, i)| {
                let doc = &self.docs[i];
                RetrievedItem {
                    doc_id: doc.doc_id.clone(),
                    function_name: doc.function_name.clone().unwrap_or_else(|| doc.doc_id.clone()),
                    usage: doc.text.clone(),
                    library: doc.library.clone(),
                    score,
                }
            })
            .collect())
    }
}

pub fn query(
    index: &EmbeddingIndex,
    task_text: &str,
    library_filter: Option<&BTreeSet<String>>,
    k: usize,
    embedder: &dyn Embedder,
) -> Result<Vec<RetrievedItem>, RetrieverError> {
    index.query(task_text, library_filter, k, embedder)
}

pub fn parse_corpus(text: &str) -> Result<Vec<CorpusDoc>, RetrieverError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| RetrieverError::Format {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Library names the benchmark draws on; used to spot library mentions.
pub const KNOWN_LIBRARIES: &[&str] = &[
    "earthengine-api",
    "cubo",
    "pystac",
    "GOES-2-Go",
    "meteostat",
    "pystac_client",
    "pytesmo",
    "planetary_computer",
    "eemont",
    "geetools",
    "GeoUtils",
    "wxee",
    "xarray-spatial",
    "GemGIS",
    "GeoPandas",
    "Gempy",
    "scikit-eo",
    "Verde",
    "segment-geospatial",
    "srai",
    "geeet",
    "gstools",
    "sen2nbar",
    "pylandtemp",
    "eradiate",
    "spectramap",
    "geemap",
    "leafmap",
    "Lonboard",
];

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '-'))
        .map(|t| t.trim_matches('-'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Retrieval runs only when the step names a library, through a hint or a
/// whole-token mention in the instruction.
pub fn should_retrieve(step: &StepSpec, known_libraries: &[impl AsRef<str>]) -> bool {
    if step.library_hints.iter().any(|h| !h.trim().is_empty()) {
        return true;
    }
    let known: BTreeSet<String> = known_libraries
        .iter()
        .map(|l| l.as_ref().to_lowercase())
        .collect();
    tokens(&step.instruction).any(|t| known.contains(&t))
}
