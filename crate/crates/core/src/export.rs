//! Validation split, binary window shards and token statistics.
//!
//! A shard file is a sequence of records, each a `u32` little-endian token
//! count followed by that many `u32` little-endian ids. Files are named
//! `windows-00000.bin`, `windows-00001.bin`, ... and described by a
//! `manifest.json` in the same directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pack::PackedContext;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: no manifest found")]
    MissingManifest { path: PathBuf },
    #[error("{path}: invalid manifest: {reason}")]
    BadManifest { path: PathBuf, reason: String },
    #[error("{path}: manifest is marked incomplete")]
    Incomplete { path: PathBuf },
    #[error("{path}: truncated record at byte {offset}")]
    Truncated { path: PathBuf, offset: u64 },
    #[error("{path}: {what} mismatch at byte {offset}: manifest says {expected}, found {found}")]
    Mismatch {
        path: PathBuf,
        offset: u64,
        what: &'static str,
        expected: u64,
        found: u64,
    },
    #[error("shard size limit must be positive")]
    ZeroShardSize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Non-negative rational below one, written as a decimal (`0.001`) or as
/// `"1/1000"`. Decimals are read exactly from their shortest representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Result<Self, String> {
        if den == 0 {
            return Err("denominator is zero".into());
        }
        if num >= den {
            return Err(format!("{num}/{den} is not below 1"));
        }
        Ok(Fraction { num, den })
    }

    /// `floor(n * self)`.
    pub fn of(self, n: usize) -> usize {
        (n as u128 * u128::from(self.num) / u128::from(self.den)) as usize
    }

    fn from_decimal(s: &str) -> Result<Self, String> {
        let bad = || format!("bad fraction {s:?}");
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if int.is_empty() && frac.is_empty() {
            return Err(bad());
        }
        if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) || frac.len() > 18 {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let int: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_v: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let num = int
            .checked_mul(den)
            .and_then(|x| x.checked_add(frac_v))
            .ok_or_else(bad)?;
        Fraction::new(num, den)
    }
}

impl Default for Fraction {
    fn default() -> Self {
        Fraction { num: 1, den: 1000 }
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Fraction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s.split_once('/') {
            Some((a, b)) => {
                let parse = |x: &str| x.trim().parse::<u64>().map_err(|_| format!("bad fraction {s:?}"));
                Fraction::new(parse(a)?, parse(b)?)
            }
            None => Fraction::from_decimal(s),
        }
    }
}

impl Serialize for Fraction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(serde_json::Number),
            Text(String),
        }
        let text = match Raw::deserialize(d)? {
            Raw::Num(n) => n.to_string(),
            Raw::Text(t) => t,
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub validation_fraction: Fraction,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            validation_fraction: Fraction::default(),
            seed: 32,
        }
    }
}

/// Sorted positions of the validation items among `n`: the first
/// `floor(n * fraction)` entries of a seeded shuffle of `0..n`.
pub fn validation_indices(n: usize, cfg: &SplitConfig) -> Vec<usize> {
    let count = cfg.validation_fraction.of(n);
    if count == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    order.truncate(count);
    order.sort_unstable();
    order
}

/// `(train, validation)`, both in input order.
pub fn split_validation<T>(items: Vec<T>, cfg: &SplitConfig) -> (Vec<T>, Vec<T>) {
    let picked = validation_indices(items.len(), cfg);
    let mut next = picked.iter().peekable();
    let (mut train, mut val) = (Vec::new(), Vec::with_capacity(picked.len()));
    for (i, item) in items.into_iter().enumerate() {
        if next.peek() == Some(&&i) {
            next.next();
            val.push(item);
        } else {
            train.push(item);
        }
    }
    (train, val)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub windows: u64,
    pub tokens: u64,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub config_digest: String,
    pub tokenizer_kind: String,
    pub n_budget: usize,
    pub window_count: u64,
    pub token_total: u64,
    pub per_language_tokens: BTreeMap<String, u64>,
    pub control_tokens: u64,
    pub seed: u64,
    pub split: Split,
    pub created_at: String,
    pub shards: Vec<ShardEntry>,
    pub complete: bool,
}

/// Manifest fields supplied by the caller; counts and the shard list are
/// filled in by the writer.
#[derive(Debug, Clone)]
pub struct ManifestMeta {
    pub config_digest: String,
    pub tokenizer_kind: String,
    pub n_budget: usize,
    pub per_language_tokens: BTreeMap<String, u64>,
    pub control_tokens: u64,
    pub seed: u64,
    pub split: Split,
    pub created_at: String,
}

pub fn shard_file_name(index: usize) -> String {
    format!("windows-{index:05}.bin")
}

struct OpenShard {
    path: PathBuf,
    out: BufWriter<File>,
    hasher: Sha256,
    entry: ShardEntry,
}

/// Writes window records into size-capped shard files. A record larger than
/// the cap gets a file of its own. Call [`finish`](Self::finish) to write
/// the manifest; dropping the writer early removes what it wrote.
pub struct ShardWriter {
    dir: PathBuf,
    max_bytes: u64,
    current: Option<OpenShard>,
    done: Vec<ShardEntry>,
    written: Vec<PathBuf>,
    finished: bool,
}

impl ShardWriter {
    /// Creates `dir` and clears shard files and the manifest left there by
    /// an earlier run.
    pub fn create(dir: &Path, max_bytes: u64) -> Result<Self, ExportError> {
        if max_bytes == 0 {
            return Err(ExportError::ZeroShardSize);
        }
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let entry = entry.map_err(io_err(dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name == MANIFEST_FILE || (name.starts_with("windows-") && name.ends_with(".bin")) {
                fs::remove_file(entry.path()).map_err(io_err(&entry.path()))?;
            }
        }
        Ok(ShardWriter {
            dir: dir.to_owned(),
            max_bytes,
            current: None,
            done: Vec::new(),
            written: Vec::new(),
            finished: false,
        })
    }

    fn close_current(&mut self) -> Result<(), ExportError> {
        if let Some(mut shard) = self.current.take() {
            shard.out.flush().map_err(io_err(&shard.path))?;
            shard.entry.sha256 = format!("{:x}", shard.hasher.finalize());
            self.done.push(shard.entry);
        }
        Ok(())
    }

    pub fn write(&mut self, ids: &[u32]) -> Result<(), ExportError> {
        let result = self.write_inner(ids);
        if result.is_err() {
            self.abort();
        }
        result
    }

    fn write_inner(&mut self, ids: &[u32]) -> Result<(), ExportError> {
        let record_bytes = 4 * (ids.len() as u64 + 1);
        let full = self
            .current
            .as_ref()
            .is_some_and(|s| s.entry.bytes > 0 && s.entry.bytes + record_bytes > self.max_bytes);
        if full {
            self.close_current()?;
        }
        if self.current.is_none() {
            let name = shard_file_name(self.done.len());
            let path = self.dir.join(&name);
            let file = File::create(&path).map_err(io_err(&path))?;
            self.written.push(path.clone());
            self.current = Some(OpenShard {
                path,
                out: BufWriter::with_capacity(1 << 20, file),
                hasher: Sha256::new(),
                entry: ShardEntry {
                    file: name,
                    windows: 0,
                    tokens: 0,
                    bytes: 0,
                    sha256: String::new(),
                },
            });
        }
        let shard = self.current.as_mut().expect("opened above");
        let mut record = Vec::with_capacity(record_bytes as usize);
        record.extend_from_slice(&(ids.len() as u32).to_le_bytes());
        for id in ids {
            record.extend_from_slice(&id.to_le_bytes());
        }
        shard.out.write_all(&record).map_err(io_err(&shard.path))?;
        shard.hasher.update(&record);
        shard.entry.windows += 1;
        shard.entry.tokens += ids.len() as u64;
        shard.entry.bytes += record_bytes;
        Ok(())
    }

    /// Removes every file this writer created.
    pub fn abort(&mut self) {
        self.current = None;
        for path in self.written.drain(..) {
            let _ = fs::remove_file(path);
        }
        self.done.clear();
        self.finished = true;
    }

    pub fn finish(mut self, meta: ManifestMeta) -> Result<ShardManifest, ExportError> {
        if let Err(e) = self.close_current() {
            self.abort();
            return Err(e);
        }
        let manifest = ShardManifest {
            config_digest: meta.config_digest,
            tokenizer_kind: meta.tokenizer_kind,
            n_budget: meta.n_budget,
            window_count: self.done.iter().map(|s| s.windows).sum(),
            token_total: self.done.iter().map(|s| s.tokens).sum(),
            per_language_tokens: meta.per_language_tokens,
            control_tokens: meta.control_tokens,
            seed: meta.seed,
            split: meta.split,
            created_at: meta.created_at,
            shards: std::mem::take(&mut self.done),
            complete: true,
        };
        let path = self.dir.join(MANIFEST_FILE);
        let write = || -> std::io::Result<()> {
            let mut text = serde_json::to_string_pretty(&manifest)?;
            text.push('\n');
            fs::write(&path, text)
        };
        if let Err(source) = write() {
            self.abort();
            return Err(ExportError::Io { path, source });
        }
        self.finished = true;
        Ok(manifest)
    }
}

impl Drop for ShardWriter {
    fn drop(&mut self) {
        if !self.finished {
            self.abort();
        }
    }
}

pub fn write_shards<'a>(
    windows: impl IntoIterator<Item = &'a [u32]>,
    dir: &Path,
    shard_max_bytes: u64,
    meta: ManifestMeta,
) -> Result<ShardManifest, ExportError> {
    let mut writer = ShardWriter::create(dir, shard_max_bytes)?;
    for ids in windows {
        writer.write(ids)?;
    }
    writer.finish(meta)
}

pub fn read_manifest(dir: &Path) -> Result<ShardManifest, ExportError> {
    let path = dir.join(MANIFEST_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(ExportError::MissingManifest { path })
        }
        Err(source) => return Err(ExportError::Io { path, source }),
    };
    serde_json::from_str(&text).map_err(|e| ExportError::BadManifest {
        path,
        reason: e.to_string(),
    })
}

/// Streams windows back in written order, checking every file against its
/// manifest entry.
pub struct ShardReader {
    dir: PathBuf,
    manifest: ShardManifest,
    shard: usize,
    current: Option<(PathBuf, BufReader<File>)>,
    offset: u64,
    windows_in_shard: u64,
    tokens_in_shard: u64,
    failed: bool,
}

impl ShardReader {
    pub fn open(dir: &Path) -> Result<Self, ExportError> {
        let manifest = read_manifest(dir)?;
        if !manifest.complete {
            return Err(ExportError::Incomplete {
                path: dir.join(MANIFEST_FILE),
            });
        }
        let listed: u64 = manifest.shards.iter().map(|s| s.windows).sum();
        if listed != manifest.window_count {
            return Err(ExportError::Mismatch {
                path: dir.join(MANIFEST_FILE),
                offset: 0,
                what: "window count",
                expected: manifest.window_count,
                found: listed,
            });
        }
        Ok(ShardReader {
            dir: dir.to_owned(),
            manifest,
            shard: 0,
            current: None,
            offset: 0,
            windows_in_shard: 0,
            tokens_in_shard: 0,
            failed: false,
        })
    }

    pub fn manifest(&self) -> &ShardManifest {
        &self.manifest
    }

    fn next_window(&mut self) -> Result<Option<Vec<u32>>, ExportError> {
        loop {
            if self.current.is_none() {
                let Some(entry) = self.manifest.shards.get(self.shard) else {
                    return Ok(None);
                };
                let path = self.dir.join(&entry.file);
                let file = File::open(&path).map_err(io_err(&path))?;
                self.current = Some((path, BufReader::with_capacity(1 << 20, file)));
                self.offset = 0;
                self.windows_in_shard = 0;
                self.tokens_in_shard = 0;
            }
            let entry = &self.manifest.shards[self.shard];
            let (path, reader) = self.current.as_mut().expect("opened above");
            let mut head = [0u8; 4];
            let got = read_full(reader, &mut head).map_err(io_err(path))?;
            if got == 0 {
                let checks = [
                    ("window count", entry.windows, self.windows_in_shard),
                    ("token count", entry.tokens, self.tokens_in_shard),
                    ("byte size", entry.bytes, self.offset),
                ];
                for (what, expected, found) in checks {
                    if expected != found {
                        return Err(ExportError::Mismatch {
                            path: path.clone(),
                            offset: self.offset,
                            what,
                            expected,
                            found,
                        });
                    }
                }
                self.current = None;
                self.shard += 1;
                continue;
            }
            if got < 4 {
                return Err(ExportError::Truncated {
                    path: path.clone(),
                    offset: self.offset,
                });
            }
            let count = u32::from_le_bytes(head) as usize;
            let mut body = vec![0u8; count * 4];
            if read_full(reader, &mut body).map_err(io_err(path))? < body.len() {
                return Err(ExportError::Truncated {
                    path: path.clone(),
                    offset: self.offset,
                });
            }
            if self.windows_in_shard == entry.windows {
                return Err(ExportError::Mismatch {
                    path: path.clone(),
                    offset: self.offset,
                    what: "window count",
                    expected: entry.windows,
                    found: entry.windows + 1,
                });
            }
            self.offset += 4 + body.len() as u64;
            self.windows_in_shard += 1;
            self.tokens_in_shard += count as u64;
            return Ok(Some(
                body.chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ));
        }
    }
}

fn read_full(reader: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
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

impl Iterator for ShardReader {
    type Item = Result<Vec<u32>, ExportError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let item = self.next_window().transpose();
        if matches!(item, Some(Err(_))) {
            self.failed = true;
        }
        item
    }
}

pub fn read_shards(dir: &Path) -> Result<Vec<Vec<u32>>, ExportError> {
    ShardReader::open(dir)?.collect()
}

/// Token counts for one source (`W` for aligned pairs, `F` for retrieved
/// pseudo pairs) in the two-row shape of the corpus table.
#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceStats {
    pub contexts: u64,
    pub pairs: u64,
    pub per_language: BTreeMap<String, u64>,
    pub control_tokens: u64,
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStats {
    pub per_language: BTreeMap<String, u64>,
    pub control_tokens: u64,
    pub contexts: u64,
    pub by_source: BTreeMap<String, SourceStats>,
}

impl TokenStats {
    fn add_context(&mut self, ctx: &PackedContext) {
        let source = self.by_source.entry(ctx.source.label().to_owned()).or_default();
        source.contexts += 1;
        if ctx.seq_index == 0 {
            source.pairs += 1;
        }
        source.control_tokens += 1;
        self.control_tokens += 1;
        self.contexts += 1;
        for seg in &ctx.segments {
            let t = u64::from(seg.tokens);
            *source.per_language.entry(seg.lang.clone()).or_default() += t;
            *self.per_language.entry(seg.lang.clone()).or_default() += t;
        }
    }

    pub fn merge(mut self, other: TokenStats) -> TokenStats {
        self.control_tokens += other.control_tokens;
        self.contexts += other.contexts;
        for (lang, t) in other.per_language {
            *self.per_language.entry(lang).or_default() += t;
        }
        for (label, s) in other.by_source {
            let mine = self.by_source.entry(label).or_default();
            mine.contexts += s.contexts;
            mine.pairs += s.pairs;
            mine.control_tokens += s.control_tokens;
            for (lang, t) in s.per_language {
                *mine.per_language.entry(lang).or_default() += t;
            }
        }
        self
    }

    pub fn total(&self) -> u64 {
        self.per_language.values().sum::<u64>() + self.control_tokens
    }

    /// Rows `(source, language, tokens)`: English first, then the target
    /// language, for each source present.
    pub fn table_rows(&self, lang_l: &str) -> Vec<(String, String, u64)> {
        let mut rows = Vec::new();
        for (label, s) in &self.by_source {
            for lang in ["en", lang_l] {
                rows.push((label.clone(), lang.to_owned(), s.per_language.get(lang).copied().unwrap_or(0)));
            }
        }
        rows
    }
}

/// Per-language token counts over packed contexts. Titles count toward
/// their language; each `[SPLIT]` counts as a control token.
pub fn compute_stats(contexts: &[PackedContext]) -> TokenStats {
    contexts
        .par_chunks(4096)
        .map(|chunk| {
            let mut s = TokenStats::default();
            for ctx in chunk {
                s.add_context(ctx);
            }
            s
        })
        .reduce(TokenStats::default, TokenStats::merge)
}

pub fn stats_of(ctx: &PackedContext) -> TokenStats {
    let mut s = TokenStats::default();
    s.add_context(ctx);
    s
}

/// `1.53B`-style rendering used in the stats report.
pub fn format_token_count(n: u64) -> String {
    let units = [(1e12, "T"), (1e9, "B"), (1e6, "M"), (1e3, "K")];
    let x = n as f64;
    for (scale, suffix) in units {
        if x >= scale {
            return format!("{:.2}{suffix}", x / scale);
        }
    }
    n.to_string()
}
