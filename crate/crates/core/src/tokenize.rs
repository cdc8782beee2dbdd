//! Tokenizer contract used for budget accounting and window encoding.
//!
//! Every tokenizer reserves one id for the `[SPLIT]` delimiter. The
//! delimiter text is only special in [`Tokenizer::encode`]; article content
//! goes through [`Tokenizer::encode_ordinary`], which never produces the
//! reserved id, so a stray `[SPLIT]` inside an article cannot fake a context
//! boundary.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SPLIT_TEXT: &str = "[SPLIT]";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocabulary {path}: {reason}")]
    Vocab { path: PathBuf, reason: String },
    #[error("external tokenizer requires `vocab_source`")]
    MissingVocabSource,
    #[error("invalid tokenizer spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    Whitespace,
    Byte,
    External,
}

impl TokenizerKind {
    pub fn name(self) -> &'static str {
        match self {
            TokenizerKind::Whitespace => "whitespace",
            TokenizerKind::Byte => "byte",
            TokenizerKind::External => "external",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSpec {
    pub kind: TokenizerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_source: Option<PathBuf>,
    #[serde(default = "default_split_text")]
    pub split_token_text: String,
    #[serde(default)]
    pub split_token_id: u32,
}

fn default_split_text() -> String {
    DEFAULT_SPLIT_TEXT.to_owned()
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        TokenizerSpec {
            kind: TokenizerKind::Whitespace,
            vocab_source: None,
            split_token_text: default_split_text(),
            split_token_id: 0,
        }
    }
}

impl TokenizerSpec {
    pub fn whitespace() -> Self {
        Self::default()
    }

    pub fn byte() -> Self {
        TokenizerSpec {
            kind: TokenizerKind::Byte,
            ..Self::default()
        }
    }

    pub fn external(vocab: impl Into<PathBuf>) -> Self {
        TokenizerSpec {
            kind: TokenizerKind::External,
            vocab_source: Some(vocab.into()),
            ..Self::default()
        }
    }
}

/// Encoded text plus the length of its source in characters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub source_len_chars: usize,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub trait Tokenizer: Send + Sync {
    fn kind(&self) -> TokenizerKind;

    fn split_token_id(&self) -> u32;

    fn split_token_text(&self) -> &str;

    /// Encodes text with no special tokens recognised.
    fn encode_ordinary(&self, text: &str) -> Vec<u32>;

    fn count_ordinary(&self, text: &str) -> usize {
        self.encode_ordinary(text).len()
    }

    /// Encodes text, mapping every literal occurrence of the split text to
    /// the reserved id.
    fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for (i, piece) in text.split(self.split_token_text()).enumerate() {
            if i > 0 {
                ids.push(self.split_token_id());
            }
            ids.extend(self.encode_ordinary(piece));
        }
        ids
    }

    fn count(&self, text: &str) -> usize {
        text.split(self.split_token_text())
            .enumerate()
            .map(|(i, piece)| usize::from(i > 0) + self.count_ordinary(piece))
            .sum()
    }

    /// Longest prefix of `text` (cut at a char boundary, trailing whitespace
    /// removed) such that `count_ordinary(prefix + suffix) <= max_tokens`.
    fn truncate_ordinary(&self, text: &str, suffix: &str, max_tokens: usize) -> String {
        let boundaries: Vec<usize> = text
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(text.len()))
            .collect();
        let fits = |end: usize| {
            let mut candidate = text[..end].trim_end().to_owned();
            candidate.push_str(suffix);
            self.count_ordinary(&candidate) <= max_tokens
        };
        // Binary search over boundary indices for the last prefix that fits.
        let (mut lo, mut hi) = (0usize, boundaries.len());
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if fits(boundaries[mid]) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        text[..boundaries[lo]].trim_end().to_owned()
    }

    /// Observes text in corpus order before parallel encoding. Only
    /// tokenizers whose ids depend on first occurrence need this.
    fn warm_up(&self, _text: &str) {}

    /// Token-to-id table, for tokenizers that own one.
    fn vocabulary(&self) -> Option<Vec<(String, u32)>> {
        None
    }
}

pub fn make_tokenizer(spec: &TokenizerSpec) -> Result<Box<dyn Tokenizer>, TokenizerError> {
    if spec.split_token_text.is_empty() {
        return Err(TokenizerError::Spec("split_token_text must not be empty".into()));
    }
    match spec.kind {
        TokenizerKind::Whitespace => Ok(Box::new(WhitespaceTokenizer::new(
            &spec.split_token_text,
            spec.split_token_id,
        ))),
        TokenizerKind::Byte => {
            if (1..=256).contains(&spec.split_token_id) {
                return Err(TokenizerError::Spec(format!(
                    "split_token_id {} collides with byte ids 1..=256",
                    spec.split_token_id
                )));
            }
            Ok(Box::new(ByteTokenizer {
                split_text: spec.split_token_text.clone(),
                split_id: spec.split_token_id,
            }))
        }
        TokenizerKind::External => {
            let path = spec.vocab_source.as_deref().ok_or(TokenizerError::MissingVocabSource)?;
            Ok(Box::new(ExternalTokenizer::load(
                path,
                &spec.split_token_text,
                spec.split_token_id,
            )?))
        }
    }
}

pub fn encode(tokenizer: &dyn Tokenizer, text: &str) -> TokenSeq {
    TokenSeq {
        ids: tokenizer.encode(text),
        source_len_chars: text.chars().count(),
    }
}

pub fn count_tokens(tokenizer: &dyn Tokenizer, text: &str) -> usize {
    tokenizer.count(text)
}

/// Maximal non-whitespace runs, each assigned an id on first occurrence
/// starting at 1.
pub struct WhitespaceTokenizer {
    split_text: String,
    split_id: u32,
    vocab: RwLock<WhitespaceVocab>,
}

struct WhitespaceVocab {
    ids: HashMap<String, u32>,
    next: u32,
}

impl WhitespaceVocab {
    fn assign(&mut self, word: &str, split_id: u32) -> u32 {
        if let Some(&id) = self.ids.get(word) {
            return id;
        }
        if self.next == split_id {
            self.next += 1;
        }
        let id = self.next;
        self.next += 1;
        self.ids.insert(word.to_owned(), id);
        id
    }
}

impl WhitespaceTokenizer {
    pub fn new(split_text: &str, split_id: u32) -> Self {
        WhitespaceTokenizer {
            split_text: split_text.to_owned(),
            split_id,
            vocab: RwLock::new(WhitespaceVocab {
                ids: HashMap::new(),
                next: 1,
            }),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.read().expect("vocab lock poisoned").ids.len()
    }
}

impl Tokenizer for WhitespaceTokenizer {
    fn kind(&self) -> TokenizerKind {
        TokenizerKind::Whitespace
    }

    fn split_token_id(&self) -> u32 {
        self.split_id
    }

    fn split_token_text(&self) -> &str {
        &self.split_text
    }

    fn encode_ordinary(&self, text: &str) -> Vec<u32> {
        {
            let vocab = self.vocab.read().expect("vocab lock poisoned");
            let fast: Option<Vec<u32>> = text
                .split_whitespace()
                .map(|w| vocab.ids.get(w).copied())
                .collect();
            if let Some(ids) = fast {
                return ids;
            }
        }
        let mut vocab = self.vocab.write().expect("vocab lock poisoned");
        text.split_whitespace()
            .map(|w| vocab.assign(w, self.split_id))
            .collect()
    }

    fn count_ordinary(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn truncate_ordinary(&self, text: &str, suffix: &str, max_tokens: usize) -> String {
        let budget = max_tokens.saturating_sub(self.count_ordinary(suffix));
        let mut end = 0;
        let mut taken = 0;
        let mut in_word = false;
        for (i, c) in text.char_indices() {
            if c.is_whitespace() {
                in_word = false;
            } else {
                if !in_word {
                    if taken == budget {
                        break;
                    }
                    taken += 1;
                    in_word = true;
                }
                end = i + c.len_utf8();
            }
        }
        text[..end].to_owned()
    }

    fn warm_up(&self, text: &str) {
        self.encode_ordinary(text);
    }

    fn vocabulary(&self) -> Option<Vec<(String, u32)>> {
        let vocab = self.vocab.read().expect("vocab lock poisoned");
        let mut entries: Vec<_> = vocab.ids.iter().map(|(w, &id)| (w.clone(), id)).collect();
        entries.sort_by_key(|&(_, id)| id);
        Some(entries)
    }
}

/// Byte `b` maps to id `b + 1`.
pub struct ByteTokenizer {
    split_text: String,
    split_id: u32,
}

impl Tokenizer for ByteTokenizer {
    fn kind(&self) -> TokenizerKind {
        TokenizerKind::Byte
    }

    fn split_token_id(&self) -> u32 {
        self.split_id
    }

    fn split_token_text(&self) -> &str {
        &self.split_text
    }

    fn encode_ordinary(&self, text: &str) -> Vec<u32> {
        text.bytes().map(|b| u32::from(b) + 1).collect()
    }

    fn count_ordinary(&self, text: &str) -> usize {
        text.len()
    }
}

/// Subword tokenizer over a serialized vocabulary.
///
/// File format: one `token<TAB>id` per line, optionally followed by a line
/// `#merges` and then one `left right` merge rule per line in priority
/// order. With merges, words are segmented by BPE; without, by greedy
/// longest match. Characters missing from the vocabulary fall back to
/// `<0xNN>` byte tokens when present, else to an unknown token.
pub struct ExternalTokenizer {
    split_text: String,
    split_id: u32,
    vocab: HashMap<String, u32>,
    merges: HashMap<(String, String), usize>,
    max_token_chars: usize,
    unk_id: u32,
}

impl ExternalTokenizer {
    pub fn load(path: &Path, split_text: &str, split_id: u32) -> Result<Self, TokenizerError> {
        let vocab_err = |reason: String| TokenizerError::Vocab {
            path: path.to_owned(),
            reason,
        };
        let content = std::fs::read_to_string(path).map_err(|e| vocab_err(e.to_string()))?;
        let mut raw: Vec<(String, u32)> = Vec::new();
        let mut merge_rules = Vec::new();
        let mut in_merges = false;
        for (n, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if line.trim() == "#merges" {
                in_merges = true;
                continue;
            }
            if in_merges {
                let (a, b) = line
                    .split_once(' ')
                    .ok_or_else(|| vocab_err(format!("line {}: merge rule must be `left right`", n + 1)))?;
                merge_rules.push((a.to_owned(), b.to_owned()));
            } else {
                let (token, id) = line
                    .rsplit_once('\t')
                    .ok_or_else(|| vocab_err(format!("line {}: expected `token<TAB>id`", n + 1)))?;
                let id: u32 = id
                    .trim()
                    .parse()
                    .map_err(|_| vocab_err(format!("line {}: bad id {id:?}", n + 1)))?;
                raw.push((token.to_owned(), id));
            }
        }
        if raw.is_empty() {
            return Err(vocab_err("no vocabulary entries".into()));
        }

        // Keep the split id free: shift every id at or above it.
        let collides = raw.iter().any(|&(_, id)| id == split_id);
        let mut vocab = HashMap::with_capacity(raw.len());
        for (token, id) in raw {
            if token == split_text {
                continue;
            }
            let id = if collides && id >= split_id { id + 1 } else { id };
            if vocab.insert(token.clone(), id).is_some() {
                return Err(vocab_err(format!("duplicate token {token:?}")));
            }
        }
        let unk_id = ["[UNK]", "<unk>"]
            .iter()
            .find_map(|t| vocab.get(*t).copied())
            .unwrap_or_else(|| {
                let mut next = vocab.values().max().map_or(0, |m| m + 1);
                if next == split_id {
                    next += 1;
                }
                next
            });
        let max_token_chars = vocab.keys().map(|t| t.chars().count()).max().unwrap_or(1);
        let merges = merge_rules
            .into_iter()
            .enumerate()
            .map(|(rank, pair)| (pair, rank))
            .collect();
        Ok(ExternalTokenizer {
            split_text: split_text.to_owned(),
            split_id,
            vocab,
            merges,
            max_token_chars,
            unk_id,
        })
    }

    fn push_fallback(&self, piece: &str, out: &mut Vec<u32>) {
        for c in piece.chars() {
            let mut buf = [0u8; 4];
            let s = c.encode_utf8(&mut buf);
            if let Some(&id) = self.vocab.get(&*s) {
                out.push(id);
                continue;
            }
            for b in s.bytes() {
                out.push(
                    self.vocab
                        .get(&format!("<0x{b:02X}>"))
                        .copied()
                        .unwrap_or(self.unk_id),
                );
            }
        }
    }

    fn encode_word_bpe(&self, word: &str, out: &mut Vec<u32>) {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.merges
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&rank| (rank, i))
                })
                .min();
            let Some((_, i)) = best else { break };
            let right = symbols.remove(i + 1);
            symbols[i].push_str(&right);
        }
        for s in symbols {
            match self.vocab.get(&s) {
                Some(&id) => out.push(id),
                None => self.push_fallback(&s, out),
            }
        }
    }

    fn encode_word_greedy(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        let mut i = 0;
        while i < chars.len() {
            let start = chars[i].0;
            let longest = (1..=self.max_token_chars.min(chars.len() - i)).rev().find_map(|len| {
                let end = chars.get(i + len).map_or(word.len(), |&(e, _)| e);
                self.vocab.get(&word[start..end]).map(|&id| (len, id))
            });
            match longest {
                Some((len, id)) => {
                    out.push(id);
                    i += len;
                }
                None => {
                    let end = chars.get(i + 1).map_or(word.len(), |&(e, _)| e);
                    self.push_fallback(&word[start..end], out);
                    i += 1;
                }
            }
        }
    }
}

impl Tokenizer for ExternalTokenizer {
    fn kind(&self) -> TokenizerKind {
        TokenizerKind::External
    }

    fn split_token_id(&self) -> u32 {
        self.split_id
    }

    fn split_token_text(&self) -> &str {
        &self.split_text
    }

    fn encode_ordinary(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            if self.merges.is_empty() {
                self.encode_word_greedy(word, &mut out);
            } else {
                self.encode_word_bpe(word, &mut out);
            }
        }
        out
    }
}
