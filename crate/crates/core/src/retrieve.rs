//! Retrieval augmentation from an English web corpus.
//!
//! Keywords for a target-language article are its internal link targets that
//! have an English counterpart in the langlinks table. Two queries are
//! embedded (title only, title plus content keywords), the union of their
//! top-k candidates is rescored against both, and documents whose mean score
//! clears the threshold become pseudo article pairs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::align::{ArticlePair, PairId, PairSource};
use crate::ingest::{normalize_title, open_input, DumpError, LangLink, PageRecord};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("embedding batch {batch} ({first}..{end}) failed after {attempts} attempt(s): {message}")]
    Provider {
        batch: usize,
        first: usize,
        end: usize,
        attempts: u32,
        message: String,
    },
    #[error("embedding cache has no vector for {key:?}")]
    MissingKey { key: String },
    #[error("vector for {id:?} has dimension {got}, expected {expected}")]
    Dimension { id: String, expected: usize, got: usize },
    #[error("duplicate document id {0:?} in index")]
    DuplicateDoc(String),
    #[error("vector for {0:?} is zero or not finite")]
    BadVector(String),
    #[error("{path}: corrupt embedding cache at byte {offset}: {reason}")]
    CacheFormat { path: PathBuf, offset: u64, reason: String },
    #[error("{path}:{line}: {reason}")]
    Corpus { path: PathBuf, line: u64, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error("invalid retrieval configuration: {0}")]
    Config(String),
}

/// Stable 64-bit digest of a string (first 8 bytes of its SHA-256).
pub fn stable_hash(s: &str) -> u64 {
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Pair id used for a retrieved document: the high bit keeps it apart from
/// real page ids.
pub fn pseudo_page_id(doc_id: &str) -> u64 {
    stable_hash(doc_id) | 1 << 63
}

/// MediaWiki link target normalization: drop the section anchor, turn
/// underscores into spaces, collapse whitespace and upper-case the first
/// character.
pub fn normalize_link_target(raw: &str) -> String {
    let raw = raw.split('#').next().unwrap_or("");
    let spaced = normalize_title(raw);
    let collapsed = spaced.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut chars = collapsed.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Target-language title to English title, from the langlinks table.
#[derive(Debug, Default, Clone)]
pub struct TitleMap {
    map: HashMap<String, String>,
}

impl TitleMap {
    pub fn insert(&mut self, title_l: &str, title_en: &str) {
        let key = normalize_link_target(title_l);
        let value = normalize_title(title_en.trim());
        if !key.is_empty() && !value.is_empty() {
            self.map.entry(key).or_insert(value);
        }
    }

    /// Builds the map from the target language's pages and its langlinks
    /// to English. Only main-namespace pages contribute.
    pub fn from_dumps(
        pages_l: impl IntoIterator<Item = PageRecord>,
        links_l_to_en: impl IntoIterator<Item = LangLink>,
    ) -> Self {
        let titles: HashMap<u64, String> = pages_l
            .into_iter()
            .filter(|p| p.namespace == 0)
            .map(|p| (p.page_id, p.title))
            .collect();
        let mut links: Vec<LangLink> = links_l_to_en
            .into_iter()
            .filter(|l| l.target_lang == "en")
            .collect();
        // First link per page wins regardless of dump order.
        links.sort_by(|a, b| (a.from_page_id, &a.target_title).cmp(&(b.from_page_id, &b.target_title)));
        let mut out = TitleMap::default();
        for link in links {
            if let Some(title) = titles.get(&link.from_page_id) {
                out.insert(title, &link.target_title);
            }
        }
        out
    }

    pub fn get(&self, title_l: &str) -> Option<&str> {
        self.map.get(&normalize_link_target(title_l)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl<A: AsRef<str>, B: AsRef<str>> FromIterator<(A, B)> for TitleMap {
    fn from_iter<T: IntoIterator<Item = (A, B)>>(iter: T) -> Self {
        let mut out = TitleMap::default();
        for (l, en) in iter {
            out.insert(l.as_ref(), en.as_ref());
        }
        out
    }
}

pub const MAX_CONTENT_KEYWORDS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordSet {
    pub title_keyword: String,
    pub content_keywords: Vec<String>,
    /// The title had no English mapping and is used as is.
    #[serde(default)]
    pub title_unmapped: bool,
}

impl KeywordSet {
    pub fn is_empty(&self) -> bool {
        self.title_keyword.trim().is_empty() && self.content_keywords.is_empty()
    }

    pub fn title_query(&self) -> String {
        self.title_keyword.clone()
    }

    pub fn full_query(&self) -> String {
        std::iter::once(self.title_keyword.as_str())
            .chain(self.content_keywords.iter().map(String::as_str))
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn link_patterns() -> &'static (Regex, Regex) {
    static PATTERNS: std::sync::OnceLock<(Regex, Regex)> = std::sync::OnceLock::new();
    PATTERNS.get_or_init(|| {
        (
            Regex::new(r"\[\[([^\[\]|]*)(?:\|[^\[\]]*)?\]\]").expect("wiki link pattern"),
            Regex::new(r#"<a\s[^>]*?href\s*=\s*"([^"]*)""#).expect("anchor pattern"),
        )
    })
}

/// Link targets in order of appearance, in `[[T]]`, `[[T|anchor]]` and
/// `<a href="T">` form.
pub fn link_targets(text: &str) -> Vec<String> {
    let (wiki, anchor) = link_patterns();
    let mut found: Vec<(usize, String)> = wiki
        .captures_iter(text)
        .map(|c| {
            let m = c.get(1).expect("group");
            (m.start(), m.as_str().to_owned())
        })
        .collect();
    found.extend(anchor.captures_iter(text).map(|c| {
        let m = c.get(1).expect("group");
        let decoded = percent_encoding::percent_decode_str(m.as_str()).decode_utf8_lossy();
        (m.start(), decoded.into_owned())
    }));
    found.sort_by_key(|(at, _)| *at);
    found
        .into_iter()
        .map(|(_, t)| normalize_link_target(&t))
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn extract_keywords(title_l: &str, text_l: &str, map: &TitleMap) -> KeywordSet {
    let (title_keyword, title_unmapped) = match map.get(title_l) {
        Some(en) => (en.to_owned(), false),
        None => (title_l.trim().to_owned(), true),
    };
    // English keyword -> (count, first occurrence)
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    let targets = link_targets(text_l);
    for (pos, target) in targets.iter().enumerate() {
        if let Some(en) = map.get(target) {
            counts.entry(en).or_insert((0, pos)).0 += 1;
        }
    }
    let mut ranked: Vec<(&str, (usize, usize))> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
    KeywordSet {
        title_keyword,
        content_keywords: ranked
            .into_iter()
            .take(MAX_CONTENT_KEYWORDS)
            .map(|(k, _)| k.to_owned())
            .collect(),
        title_unmapped,
    }
}

/// Unit-length embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalizes `components`; fails on a zero or non-finite vector.
    pub fn new(components: Vec<f64>, key: &str) -> Result<Self, RetrievalError> {
        let norm = components.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(RetrievalError::BadVector(key.to_owned()));
        }
        Ok(EmbeddingVector(components.into_iter().map(|x| x / norm).collect()))
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        let s: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        // Adding zero folds -0.0 into 0.0 so equal scores tie.
        s.clamp(-1.0, 1.0) + 0.0
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, RetrievalError>;

    /// Vectors for corpus documents. Providers keyed by document id
    /// override this; the default embeds the text.
    fn embed_docs(&self, docs: &[(&str, &str)]) -> Result<Vec<EmbeddingVector>, RetrievalError> {
        let texts: Vec<&str> = docs.iter().map(|(_, text)| *text).collect();
        self.embed(&texts)
    }
}

/// Deterministic pseudo-embeddings: Gaussian components drawn from a
/// generator seeded by the text's hash.
pub struct MockProvider {
    pub dim: usize,
    pub seed: u64,
}

impl MockProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        MockProvider { dim, seed }
    }

    fn one(&self, text: &str) -> Result<EmbeddingVector, RetrievalError> {
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(text) ^ self.seed);
        let v = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        EmbeddingVector::new(v, text)
    }
}

impl EmbeddingProvider for MockProvider {
    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, RetrievalError> {
        texts.par_iter().map(|t| self.one(t)).collect()
    }
}

/// Precomputed vectors keyed by document id or query text.
#[derive(Debug, Default, Clone)]
pub struct FileCacheProvider {
    vectors: HashMap<String, EmbeddingVector>,
}

impl FileCacheProvider {
    pub fn open(path: &Path) -> Result<Self, RetrievalError> {
        let reader = open_input(path)?;
        Self::read(reader, path)
    }

    pub fn read(mut reader: impl Read, path: &Path) -> Result<Self, RetrievalError> {
        let mut vectors = HashMap::new();
        let mut offset = 0u64;
        let corrupt = |offset: u64, reason: &str| RetrievalError::CacheFormat {
            path: path.to_owned(),
            offset,
            reason: reason.to_owned(),
        };
        let io = |source| RetrievalError::Io {
            path: path.to_owned(),
            source,
        };
        loop {
            let record_start = offset;
            let mut len = [0u8; 4];
            match read_exact_or_eof(&mut reader, &mut len).map_err(io)? {
                0 => break,
                4 => {}
                _ => return Err(corrupt(record_start, "truncated id length")),
            }
            offset += 4;
            let mut id = vec![0u8; u32::from_le_bytes(len) as usize];
            reader
                .read_exact(&mut id)
                .map_err(|_| corrupt(offset, "truncated id"))?;
            offset += id.len() as u64;
            let id = String::from_utf8(id).map_err(|_| corrupt(record_start + 4, "id is not UTF-8"))?;
            let mut dim = [0u8; 4];
            reader
                .read_exact(&mut dim)
                .map_err(|_| corrupt(offset, "truncated dimension"))?;
            offset += 4;
            let dim = u32::from_le_bytes(dim) as usize;
            let mut raw = vec![0u8; dim * 4];
            reader
                .read_exact(&mut raw)
                .map_err(|_| corrupt(offset, "truncated components"))?;
            offset += raw.len() as u64;
            let components = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            let v = EmbeddingVector::new(components, &id)?;
            if vectors.insert(id.clone(), v).is_some() {
                return Err(corrupt(record_start, &format!("duplicate id {id:?}")));
            }
        }
        Ok(FileCacheProvider { vectors })
    }

    pub fn insert(&mut self, key: impl Into<String>, v: EmbeddingVector) {
        self.vectors.insert(key.into(), v);
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    fn lookup(&self, key: &str) -> Result<EmbeddingVector, RetrievalError> {
        self.vectors
            .get(key)
            .cloned()
            .ok_or_else(|| RetrievalError::MissingKey { key: key.to_owned() })
    }
}

fn read_exact_or_eof(reader: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Writes records in the cache format, in key order.
pub fn write_embedding_cache<'a>(
    mut out: impl Write,
    entries: impl IntoIterator<Item = (&'a str, &'a [f32])>,
) -> std::io::Result<()> {
    let sorted: BTreeMap<&str, &[f32]> = entries.into_iter().collect();
    for (id, v) in sorted {
        out.write_all(&(id.len() as u32).to_le_bytes())?;
        out.write_all(id.as_bytes())?;
        out.write_all(&(v.len() as u32).to_le_bytes())?;
        for x in v {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()
}

impl EmbeddingProvider for FileCacheProvider {
    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, RetrievalError> {
        texts.iter().map(|t| self.lookup(t)).collect()
    }

    fn embed_docs(&self, docs: &[(&str, &str)]) -> Result<Vec<EmbeddingVector>, RetrievalError> {
        docs.iter().map(|(id, _)| self.lookup(id)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WireConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub batch_size: usize,
}

impl Default for WireConfig {
    fn default() -> Self {
        WireConfig {
            endpoint: String::new(),
            token_env: None,
            timeout_secs: 60,
            max_retries: 4,
            backoff_ms: 500,
            batch_size: 64,
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct WireResponse {
    vectors: Vec<Vec<f64>>,
}

/// Remote encoder speaking `{"texts": [...]}` -> `{"vectors": [[...], ...]}`.
pub struct WireProvider {
    cfg: WireConfig,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

impl WireProvider {
    pub fn new(cfg: WireConfig) -> Result<Self, RetrievalError> {
        if cfg.endpoint.is_empty() {
            return Err(RetrievalError::Config("wire provider needs an endpoint".into()));
        }
        if cfg.batch_size == 0 {
            return Err(RetrievalError::Config("wire batch_size must be positive".into()));
        }
        let token = match &cfg.token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                RetrievalError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| RetrievalError::Config(e.to_string()))?;
        Ok(WireProvider { cfg, token, client })
    }

    fn attempt(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, String> {
        let mut req = self.client.post(&self.cfg.endpoint).json(&WireRequest { texts });
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        let body: WireResponse = resp.json().map_err(|e| format!("bad response body: {e}"))?;
        if body.vectors.len() != texts.len() {
            return Err(format!(
                "expected {} vectors, got {}",
                texts.len(),
                body.vectors.len()
            ));
        }
        Ok(body.vectors)
    }
}

impl EmbeddingProvider for WireProvider {
    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, RetrievalError> {
        let mut out = Vec::with_capacity(texts.len());
        for (batch, chunk) in texts.chunks(self.cfg.batch_size).enumerate() {
            let first = batch * self.cfg.batch_size;
            let mut attempts = 0;
            let vectors = loop {
                attempts += 1;
                match self.attempt(chunk) {
                    Ok(v) => break v,
                    Err(message) if attempts > self.cfg.max_retries => {
                        return Err(RetrievalError::Provider {
                            batch,
                            first,
                            end: first + chunk.len(),
                            attempts,
                            message,
                        })
                    }
                    Err(message) => {
                        let delay = self.cfg.backoff_ms.saturating_mul(1 << (attempts - 1).min(16));
                        log::warn!("embedding batch {batch} attempt {attempts} failed: {message}; retrying in {delay} ms");
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                }
            };
            for (text, v) in chunk.iter().zip(vectors) {
                out.push(EmbeddingVector::new(v, text)?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    Mock {
        #[serde(default = "default_mock_dim")]
        dim: usize,
        #[serde(default)]
        seed: u64,
    },
    File {
        path: PathBuf,
    },
    Wire(WireConfig),
}

fn default_mock_dim() -> usize {
    64
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Mock {
            dim: default_mock_dim(),
            seed: 0,
        }
    }
}

pub fn make_provider(cfg: &ProviderConfig) -> Result<Box<dyn EmbeddingProvider>, RetrievalError> {
    Ok(match cfg {
        ProviderConfig::Mock { dim, seed } => {
            if *dim == 0 {
                return Err(RetrievalError::Config("mock dimension must be positive".into()));
            }
            Box::new(MockProvider::new(*dim, *seed))
        }
        ProviderConfig::File { path } => Box::new(FileCacheProvider::open(path)?),
        ProviderConfig::Wire(wire) => Box::new(WireProvider::new(wire.clone())?),
    })
}

/// Candidate corpus: `{"id": ..., "text": ...}` per line.
#[derive(Debug, Default, Clone)]
pub struct CandidateCorpus {
    docs: Vec<(String, String)>,
    by_id: HashMap<String, usize>,
}

#[derive(Deserialize)]
struct CorpusLine {
    id: String,
    text: String,
}

impl CandidateCorpus {
    pub fn open(path: &Path) -> Result<Self, RetrievalError> {
        let reader = open_input(path)?;
        let mut corpus = CandidateCorpus::default();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|source| RetrievalError::Io {
                path: path.to_owned(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |reason: String| RetrievalError::Corpus {
                path: path.to_owned(),
                line: n as u64 + 1,
                reason,
            };
            let rec: CorpusLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            if !corpus.push(rec.id.clone(), rec.text) {
                return Err(err(format!("duplicate document id {:?}", rec.id)));
            }
        }
        Ok(corpus)
    }

    /// Adds a document; false if the id is taken.
    pub fn push(&mut self, id: String, text: String) -> bool {
        if self.by_id.contains_key(&id) {
            return false;
        }
        self.by_id.insert(id.clone(), self.docs.len());
        self.docs.push((id, text));
        true
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.by_id.get(id).map(|&i| self.docs[i].1.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.docs.iter().map(|(id, t)| (id.as_str(), t.as_str()))
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateDoc {
    pub doc_id: String,
    pub vector: EmbeddingVector,
}

/// Exact inner-product index.
#[derive(Debug, Default, Clone)]
pub struct VectorIndex {
    ids: Vec<String>,
    vectors: Vec<EmbeddingVector>,
    dim: Option<usize>,
}

impl VectorIndex {
    pub fn build(docs: impl IntoIterator<Item = CandidateDoc>) -> Result<Self, RetrievalError> {
        let mut index = VectorIndex::default();
        let mut seen = HashSet::new();
        for doc in docs {
            let expected = *index.dim.get_or_insert(doc.vector.dim());
            if doc.vector.dim() != expected {
                return Err(RetrievalError::Dimension {
                    id: doc.doc_id,
                    expected,
                    got: doc.vector.dim(),
                });
            }
            if !seen.insert(doc.doc_id.clone()) {
                return Err(RetrievalError::DuplicateDoc(doc.doc_id));
            }
            index.ids.push(doc.doc_id);
            index.vectors.push(doc.vector);
        }
        Ok(index)
    }

    /// Embeds every corpus document with `provider` and indexes it.
    pub fn from_corpus(
        corpus: &CandidateCorpus,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Self, RetrievalError> {
        let docs: Vec<(&str, &str)> = corpus.iter().collect();
        let vectors = provider.embed_docs(&docs)?;
        Self::build(docs.iter().zip(vectors).map(|((id, _), vector)| CandidateDoc {
            doc_id: (*id).to_owned(),
            vector,
        }))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn vector(&self, doc_id: &str) -> Option<&EmbeddingVector> {
        self.ids.iter().position(|id| id == doc_id).map(|i| &self.vectors[i])
    }

    /// Top `k` documents by inner product, descending, ties by ascending id.
    pub fn search_topk(&self, query: &EmbeddingVector, k: usize) -> Vec<(String, f64)> {
        self.search_indices(query, k)
            .into_iter()
            .map(|(i, s)| (self.ids[i].clone(), s))
            .collect()
    }

    fn search_indices(&self, query: &EmbeddingVector, k: usize) -> Vec<(usize, f64)> {
        if k == 0 || self.ids.is_empty() {
            return Vec::new();
        }
        if self.dim != Some(query.dim()) {
            return Vec::new();
        }
        let mut scored: Vec<(usize, f64)> = if self.ids.len() >= 4096 {
            self.vectors.par_iter().map(|v| query.dot(v)).enumerate().collect()
        } else {
            self.vectors.iter().map(|v| query.dot(v)).enumerate().collect()
        };
        let order = |a: &(usize, f64), b: &(usize, f64)| {
            b.1.total_cmp(&a.1).then_with(|| self.ids[a.0].cmp(&self.ids[b.0]))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        scored
    }

    fn score(&self, i: usize, query: &EmbeddingVector) -> f64 {
        query.dot(&self.vectors[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub threshold: f64,
    pub max_results: usize,
    pub candidate_pool_k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            threshold: 0.75,
            max_results: 3,
            candidate_pool_k: 100,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(RetrievalError::Config(format!(
                "threshold {} is outside [0, 1]",
                self.threshold
            )));
        }
        if self.max_results == 0 {
            return Err(RetrievalError::Config("max_results must be at least 1".into()));
        }
        if self.candidate_pool_k == 0 {
            return Err(RetrievalError::Config("candidate_pool_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub doc_id: String,
    pub s_title: f64,
    pub s_full: f64,
    pub s_final: f64,
}

/// Rescores the union of both queries' candidate pools and applies the
/// threshold and cap.
pub fn rank_candidates(
    q_title: &EmbeddingVector,
    q_full: &EmbeddingVector,
    index: &VectorIndex,
    cfg: &RetrievalConfig,
) -> Vec<RetrievalResult> {
    let mut pool: Vec<usize> = index
        .search_indices(q_title, cfg.candidate_pool_k)
        .into_iter()
        .chain(index.search_indices(q_full, cfg.candidate_pool_k))
        .map(|(i, _)| i)
        .collect();
    pool.sort_unstable();
    pool.dedup();
    let mut results: Vec<RetrievalResult> = pool
        .into_iter()
        .map(|i| {
            let s_title = index.score(i, q_title);
            let s_full = index.score(i, q_full);
            RetrievalResult {
                doc_id: index.ids[i].clone(),
                s_title,
                s_full,
                s_final: (s_title + s_full) / 2.0,
            }
        })
        .filter(|r| r.s_final >= cfg.threshold)
        .collect();
    results.sort_by(|a, b| b.s_final.total_cmp(&a.s_final).then_with(|| a.doc_id.cmp(&b.doc_id)));
    results.truncate(cfg.max_results);
    results
}

pub fn two_step_retrieve(
    ks: &KeywordSet,
    index: &VectorIndex,
    provider: &dyn EmbeddingProvider,
    cfg: &RetrievalConfig,
) -> Result<Vec<RetrievalResult>, RetrievalError> {
    if ks.is_empty() || index.is_empty() {
        return Ok(Vec::new());
    }
    let title = ks.title_query();
    let full = ks.full_query();
    let mut v = provider.embed(&[title.as_str(), full.as_str()])?;
    let q_full = v.pop().expect("two vectors");
    let q_title = v.pop().expect("two vectors");
    Ok(rank_candidates(&q_title, &q_full, index, cfg))
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalTally {
    pub articles: u64,
    pub title_unmapped: u64,
    pub no_content_keywords: u64,
    pub empty_keywords: u64,
    pub results: u64,
    pub pseudo_pairs: u64,
    pub missing_doc_text: u64,
    pub empty_doc_text: u64,
}

/// English title and body of a retrieved document: a short first line
/// serves as the title when more text follows; otherwise the id does.
pub fn split_doc_title<'a>(doc_id: &'a str, text: &'a str) -> (&'a str, &'a str) {
    const MAX_TITLE_CHARS: usize = 200;
    let trimmed = text.trim_start();
    if let Some((first, rest)) = trimmed.split_once('\n') {
        let first = first.trim();
        if !first.is_empty() && first.chars().count() <= MAX_TITLE_CHARS && !rest.trim().is_empty() {
            return (first, rest.trim_start_matches('\n'));
        }
    }
    (doc_id, text)
}

/// Target-language side of a pseudo pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetArticle {
    pub page_id: u64,
    pub title: String,
    pub text: String,
    pub lang: String,
}

pub fn build_augmented_pairs(
    target: &TargetArticle,
    results: &[RetrievalResult],
    corpus: &CandidateCorpus,
    tally: &mut RetrievalTally,
) -> Vec<ArticlePair> {
    let mut out = Vec::new();
    for r in results {
        let Some(text) = corpus.get(&r.doc_id) else {
            tally.missing_doc_text += 1;
            continue;
        };
        if text.trim().is_empty() {
            tally.empty_doc_text += 1;
            continue;
        }
        let (title_en, text_en) = split_doc_title(&r.doc_id, text);
        out.push(ArticlePair {
            pair: PairId::new(target.page_id, pseudo_page_id(&r.doc_id)),
            title_en: title_en.to_owned(),
            title_l: target.title.clone(),
            text_en: text_en.to_owned(),
            text_l: target.text.clone(),
            lang_l: target.lang.clone(),
            source: PairSource::Retrieved {
                doc_id: r.doc_id.clone(),
                score: r.s_final,
            },
        });
    }
    tally.pseudo_pairs += out.len() as u64;
    out
}

/// Per-article record written to the pseudo-pair artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub page_id: u64,
    pub keywords: KeywordSet,
    pub results: Vec<RetrievalResult>,
}

/// Runs keyword extraction, batched query embedding and ranking for many
/// targets. Output order follows `targets`.
pub fn retrieve_all(
    targets: &[TargetArticle],
    map: &TitleMap,
    index: &VectorIndex,
    provider: &dyn EmbeddingProvider,
    cfg: &RetrievalConfig,
    tally: &mut RetrievalTally,
) -> Result<Vec<RetrievalRecord>, RetrievalError> {
    const BATCH: usize = 256;
    cfg.validate()?;
    let mut out = Vec::with_capacity(targets.len());
    for chunk in targets.chunks(BATCH) {
        let keywords: Vec<KeywordSet> = chunk
            .par_iter()
            .map(|t| extract_keywords(&t.title, &t.text, map))
            .collect();
        let mut queries: Vec<String> = Vec::new();
        for ks in &keywords {
            tally.articles += 1;
            tally.title_unmapped += u64::from(ks.title_unmapped);
            tally.no_content_keywords += u64::from(ks.content_keywords.is_empty());
            if ks.is_empty() {
                tally.empty_keywords += 1;
            } else {
                queries.push(ks.title_query());
                queries.push(ks.full_query());
            }
        }
        let refs: Vec<&str> = queries.iter().map(String::as_str).collect();
        let vectors = if refs.is_empty() || index.is_empty() {
            Vec::new()
        } else {
            provider.embed(&refs)?
        };
        let mut next = vectors.chunks_exact(2);
        let ranked: Vec<(usize, Vec<RetrievalResult>)> = keywords
            .iter()
            .enumerate()
            .filter(|(_, ks)| !ks.is_empty())
            .filter_map(|(i, _)| next.next().map(|q| (i, q)))
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|(i, q)| (i, rank_candidates(&q[0], &q[1], index, cfg)))
            .collect();
        let mut by_pos: HashMap<usize, Vec<RetrievalResult>> = ranked.into_iter().collect();
        for (i, (t, ks)) in chunk.iter().zip(keywords).enumerate() {
            let results = by_pos.remove(&i).unwrap_or_default();
            tally.results += results.len() as u64;
            out.push(RetrievalRecord {
                page_id: t.page_id,
                keywords: ks,
                results,
            });
        }
    }
    Ok(out)
}
