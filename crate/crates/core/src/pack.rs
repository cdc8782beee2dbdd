//! Window-split construction of cross-lingual in-contexts.
//!
//! Each bilingual pair is split into paragraphs and packed into one or more
//! contexts of at most `n_budget` tokens:
//!
//! ```text
//! T_first \n\n p1_first \n\n ... T_second \n\n p1_second \n\n ... [SPLIT]
//! ```
//!
//! Paragraphs are taken pairwise (`p_i` of both languages together) while the
//! pair fits; once one language runs out, the other continues alone. A
//! context that cannot take anything more is closed with `[SPLIT]` and the
//! next one resumes from the same cursors.
//!
//! Token accounting is per segment: each title or paragraph is counted with
//! its trailing `"\n\n"` attached, plus one token for the terminal `[SPLIT]`.
//! This is exact for tokenizers that never merge across the delimiter.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{ArticlePair, PairId, PairSource};
use crate::tokenize::Tokenizer;

/// Paragraph delimiter in article text and in rendered contexts.
pub const PARAGRAPH_DELIMITER: &str = "\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    EnFirst,
    LFirst,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::EnFirst => "en_first",
            Direction::LFirst => "l_first",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionPolicy {
    EnFirst,
    LFirst,
    Mix,
}

/// Relative weights of `en_first : l_first` under the mix policy, written
/// `"1:1"` in configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MixRatio {
    pub en_first: u32,
    pub l_first: u32,
}

impl Default for MixRatio {
    fn default() -> Self {
        MixRatio {
            en_first: 1,
            l_first: 1,
        }
    }
}

impl MixRatio {
    pub fn en_first_probability(self) -> f64 {
        f64::from(self.en_first) / (f64::from(self.en_first) + f64::from(self.l_first))
    }
}

impl fmt::Display for MixRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.en_first, self.l_first)
    }
}

impl FromStr for MixRatio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| format!("expected `en:l` weights, got {s:?}"))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<u32>()
                .map_err(|_| format!("bad weight {x:?} in mix ratio {s:?}"))
        };
        let ratio = MixRatio {
            en_first: parse(a)?,
            l_first: parse(b)?,
        };
        if ratio.en_first == 0 && ratio.l_first == 0 {
            return Err("mix ratio weights cannot both be zero".into());
        }
        Ok(ratio)
    }
}

impl Serialize for MixRatio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MixRatio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PackConfig {
    pub n_budget: usize,
    pub direction_policy: DirectionPolicy,
    pub mix_ratio: MixRatio,
    pub seed: u64,
    pub repeat_titles: bool,
    pub truncate_oversize: bool,
}

impl Default for PackConfig {
    fn default() -> Self {
        PackConfig {
            n_budget: 4096,
            direction_policy: DirectionPolicy::EnFirst,
            mix_ratio: MixRatio::default(),
            seed: 32,
            repeat_titles: true,
            truncate_oversize: true,
        }
    }
}

impl PackConfig {
    /// Two titles, one content token and `[SPLIT]`.
    pub const MIN_BUDGET: usize = 4;

    pub fn with_budget(n_budget: usize) -> Self {
        PackConfig {
            n_budget,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Title,
    Paragraph,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub lang: String,
    pub kind: SegmentKind,
    pub text: String,
    /// Tokens of `text + "\n\n"`.
    pub tokens: u32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedContext {
    pub pair: PairId,
    pub seq_index: u32,
    pub direction: Direction,
    /// Total tokens including the terminal `[SPLIT]`.
    pub token_len: u32,
    #[serde(default)]
    pub source: PairSource,
    pub segments: Vec<Segment>,
}

impl PackedContext {
    /// Segments joined by the paragraph delimiter, terminated by the split
    /// text.
    pub fn render(&self, split_text: &str) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            out.push_str(&seg.text);
            out.push_str(PARAGRAPH_DELIMITER);
        }
        out.push_str(split_text);
        out
    }

    /// Token ids, encoded segment by segment so the length equals
    /// `token_len` exactly. The last id is the split id.
    pub fn encode(&self, tokenizer: &dyn Tokenizer) -> Vec<u32> {
        let mut ids = Vec::with_capacity(self.token_len as usize);
        let mut buf = String::new();
        for seg in &self.segments {
            buf.clear();
            buf.push_str(&seg.text);
            buf.push_str(PARAGRAPH_DELIMITER);
            ids.extend(tokenizer.encode_ordinary(&buf));
        }
        ids.push(tokenizer.split_token_id());
        ids
    }

    /// Feeds every segment to the tokenizer's warm-up, in order.
    pub fn warm_up(&self, tokenizer: &dyn Tokenizer) {
        let mut buf = String::new();
        for seg in &self.segments {
            buf.clear();
            buf.push_str(&seg.text);
            buf.push_str(PARAGRAPH_DELIMITER);
            tokenizer.warm_up(&buf);
        }
    }

    /// Debug record written by `--emit-text`.
    pub fn text_record(&self, split_text: &str) -> serde_json::Value {
        serde_json::json!({
            "pair": self.pair,
            "seq_index": self.seq_index,
            "direction": self.direction,
            "token_len": self.token_len,
            "text": self.render(split_text),
        })
    }
}

/// Splits on `"\n\n"`, trims each piece and drops empty ones. Longer runs
/// of newlines collapse into a single boundary.
pub fn split_paragraphs(text: &str) -> Vec<&str> {
    text.split(PARAGRAPH_DELIMITER)
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .collect()
}

fn count_segment(tokenizer: &dyn Tokenizer, text: &str) -> usize {
    let mut buf = String::with_capacity(text.len() + PARAGRAPH_DELIMITER.len());
    buf.push_str(text);
    buf.push_str(PARAGRAPH_DELIMITER);
    tokenizer.count_ordinary(&buf)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Paragraph {
    pub text: String,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParagraphizedArticle {
    pub title: String,
    pub title_tokens: usize,
    pub paragraphs: Vec<Paragraph>,
    pub lang: String,
}

impl ParagraphizedArticle {
    pub fn new(title: &str, text: &str, lang: &str, tokenizer: &dyn Tokenizer) -> Self {
        let title = title.trim();
        ParagraphizedArticle {
            title: title.to_owned(),
            title_tokens: count_segment(tokenizer, title),
            paragraphs: split_paragraphs(text)
                .into_iter()
                .map(|p| Paragraph {
                    text: p.to_owned(),
                    tokens: count_segment(tokenizer, p),
                })
                .collect(),
            lang: lang.to_owned(),
        }
    }
}

/// What happened to one pair.
#[derive(Debug, Clone, PartialEq)]
pub enum PairOutcome {
    Packed {
        contexts: Vec<PackedContext>,
        truncated_paragraphs: u32,
    },
    /// One side has no paragraphs.
    Empty,
    /// A paragraph (or the titles) cannot fit and truncation is off or
    /// impossible.
    Oversize,
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackTally {
    pub pairs: u64,
    pub contexts: u64,
    pub truncated_paragraphs: u64,
    pub skipped_empty: u64,
    pub skipped_oversize: u64,
    pub en_first: u64,
    pub l_first: u64,
    pub tokens: u64,
}

impl PackTally {
    fn record(&mut self, direction: Direction, outcome: &PairOutcome) {
        self.pairs += 1;
        match outcome {
            PairOutcome::Packed {
                contexts,
                truncated_paragraphs,
            } => {
                match direction {
                    Direction::EnFirst => self.en_first += 1,
                    Direction::LFirst => self.l_first += 1,
                }
                self.contexts += contexts.len() as u64;
                self.truncated_paragraphs += u64::from(*truncated_paragraphs);
                self.tokens += contexts.iter().map(|c| u64::from(c.token_len)).sum::<u64>();
            }
            PairOutcome::Empty => self.skipped_empty += 1,
            PairOutcome::Oversize => self.skipped_oversize += 1,
        }
    }

    pub fn merge(&mut self, other: &PackTally) {
        self.pairs += other.pairs;
        self.contexts += other.contexts;
        self.truncated_paragraphs += other.truncated_paragraphs;
        self.skipped_empty += other.skipped_empty;
        self.skipped_oversize += other.skipped_oversize;
        self.en_first += other.en_first;
        self.l_first += other.l_first;
        self.tokens += other.tokens;
    }
}

/// Context under construction: one block per language.
struct Draft<'a> {
    first: Vec<Segment>,
    second: Vec<Segment>,
    cost: usize,
    first_lang: &'a str,
    second_lang: &'a str,
}

impl<'a> Draft<'a> {
    fn push(&mut self, first_side: bool, p: &Paragraph) {
        let (block, lang) = if first_side {
            (&mut self.first, self.first_lang)
        } else {
            (&mut self.second, self.second_lang)
        };
        block.push(Segment {
            lang: lang.to_owned(),
            kind: SegmentKind::Paragraph,
            text: p.text.clone(),
            tokens: p.tokens as u32,
            truncated: false,
        });
        self.cost += p.tokens;
    }

    fn is_empty(&self) -> bool {
        self.first.is_empty() && self.second.is_empty()
    }
}

/// Packs one pair in the given direction.
pub fn pack_pair(
    pair: &ArticlePair,
    tokenizer: &dyn Tokenizer,
    cfg: &PackConfig,
    direction: Direction,
) -> PairOutcome {
    let en = ParagraphizedArticle::new(&pair.title_en, &pair.text_en, "en", tokenizer);
    let l = ParagraphizedArticle::new(&pair.title_l, &pair.text_l, &pair.lang_l, tokenizer);
    let (first, second) = match direction {
        Direction::EnFirst => (&en, &l),
        Direction::LFirst => (&l, &en),
    };
    pack_paragraphized(first, second, tokenizer, cfg, |seq_index, token_len, segments| PackedContext {
        pair: pair.pair,
        seq_index,
        direction,
        token_len,
        source: pair.source.clone(),
        segments,
    })
}

fn title_segment(article: &ParagraphizedArticle) -> Segment {
    Segment {
        lang: article.lang.clone(),
        kind: SegmentKind::Title,
        text: article.title.clone(),
        tokens: article.title_tokens as u32,
        truncated: false,
    }
}

fn pack_paragraphized(
    first: &ParagraphizedArticle,
    second: &ParagraphizedArticle,
    tokenizer: &dyn Tokenizer,
    cfg: &PackConfig,
    make: impl Fn(u32, u32, Vec<Segment>) -> PackedContext,
) -> PairOutcome {
    if first.paragraphs.is_empty() || second.paragraphs.is_empty() {
        return PairOutcome::Empty;
    }
    let n = cfg.n_budget;
    let title_cost = first.title_tokens + second.title_tokens;
    let (p1, p2) = (&first.paragraphs, &second.paragraphs);
    let (mut i, mut j) = (0usize, 0usize);
    let mut contexts = Vec::new();
    let mut truncated_paragraphs = 0u32;

    while i < p1.len() || j < p2.len() {
        // Continuation contexts keep at least the leading title.
        let with_titles = contexts.is_empty() || cfg.repeat_titles;
        let base = 1 + if with_titles { title_cost } else { first.title_tokens };
        if base >= n {
            return PairOutcome::Oversize;
        }
        let mut draft = Draft {
            first: Vec::new(),
            second: Vec::new(),
            cost: base,
            first_lang: &first.lang,
            second_lang: &second.lang,
        };

        while i < p1.len() && j < p2.len() && draft.cost + p1[i].tokens + p2[j].tokens <= n {
            draft.push(true, &p1[i]);
            draft.push(false, &p2[j]);
            i += 1;
            j += 1;
        }
        if i < p1.len() && j == p2.len() {
            while i < p1.len() && draft.cost + p1[i].tokens <= n {
                draft.push(true, &p1[i]);
                i += 1;
            }
        } else if j < p2.len() && i == p1.len() {
            while j < p2.len() && draft.cost + p2[j].tokens <= n {
                draft.push(false, &p2[j]);
                j += 1;
            }
        }

        if draft.is_empty() {
            // Nothing fitted: make progress with the next paragraph of the
            // leading language (or the only language left).
            let first_side = i < p1.len();
            let p = if first_side { &p1[i] } else { &p2[j] };
            if draft.cost + p.tokens <= n {
                draft.push(first_side, p);
            } else if cfg.truncate_oversize {
                let text = tokenizer.truncate_ordinary(&p.text, PARAGRAPH_DELIMITER, n - base);
                if text.is_empty() {
                    return PairOutcome::Oversize;
                }
                let tokens = count_segment(tokenizer, &text);
                debug_assert!(base + tokens <= n);
                draft.push(first_side, &Paragraph { text, tokens });
                let block = if first_side { &mut draft.first } else { &mut draft.second };
                block.last_mut().expect("just pushed").truncated = true;
                truncated_paragraphs += 1;
            } else {
                return PairOutcome::Oversize;
            }
            if first_side {
                i += 1;
            } else {
                j += 1;
            }
        }

        let mut segments = Vec::with_capacity(draft.first.len() + draft.second.len() + 2);
        segments.push(title_segment(first));
        segments.append(&mut draft.first);
        if with_titles {
            segments.push(title_segment(second));
        }
        segments.append(&mut draft.second);
        debug_assert!(draft.cost <= n);
        contexts.push(make(contexts.len() as u32, draft.cost as u32, segments));
    }
    PairOutcome::Packed {
        contexts,
        truncated_paragraphs,
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic coin keyed by `(seed, id_l, id_en)`; independent of the
/// order in which pairs are visited.
pub fn mix_coin(seed: u64, pair: PairId) -> u64 {
    let h = splitmix64(seed);
    let h = splitmix64(h ^ pair.id_l);
    splitmix64(h ^ pair.id_en.rotate_left(32))
}

pub fn choose_direction(cfg: &PackConfig, pair: PairId) -> Direction {
    match cfg.direction_policy {
        DirectionPolicy::EnFirst => Direction::EnFirst,
        DirectionPolicy::LFirst => Direction::LFirst,
        DirectionPolicy::Mix => {
            let total = u128::from(cfg.mix_ratio.en_first) + u128::from(cfg.mix_ratio.l_first);
            let draw = (u128::from(mix_coin(cfg.seed, pair)) * total) >> 64;
            if draw < u128::from(cfg.mix_ratio.en_first) {
                Direction::EnFirst
            } else {
                Direction::LFirst
            }
        }
    }
}

/// Packs pairs chunk by chunk on the current rayon pool; output order is
/// pair order, then `seq_index`, whatever the pool size.
pub struct Packer<'a> {
    tokenizer: &'a dyn Tokenizer,
    cfg: &'a PackConfig,
    tally: PackTally,
}

impl<'a> Packer<'a> {
    pub fn new(tokenizer: &'a dyn Tokenizer, cfg: &'a PackConfig) -> Self {
        Packer {
            tokenizer,
            cfg,
            tally: PackTally::default(),
        }
    }

    pub fn pack_chunk(&mut self, pairs: &[ArticlePair]) -> Vec<PackedContext> {
        let outcomes: Vec<(Direction, PairOutcome)> = pairs
            .par_iter()
            .map(|pair| {
                let direction = choose_direction(self.cfg, pair.pair);
                (direction, pack_pair(pair, self.tokenizer, self.cfg, direction))
            })
            .collect();
        let mut out = Vec::new();
        for (direction, outcome) in outcomes {
            self.tally.record(direction, &outcome);
            if let PairOutcome::Packed { contexts, .. } = outcome {
                out.extend(contexts);
            }
        }
        out
    }

    pub fn tally(&self) -> &PackTally {
        &self.tally
    }

    pub fn into_tally(self) -> PackTally {
        self.tally
    }
}

pub fn pack_corpus(
    pairs: impl IntoIterator<Item = ArticlePair>,
    tokenizer: &dyn Tokenizer,
    cfg: &PackConfig,
) -> (Vec<PackedContext>, PackTally) {
    const CHUNK: usize = 1024;
    let mut packer = Packer::new(tokenizer, cfg);
    let mut out = Vec::new();
    let mut chunk = Vec::with_capacity(CHUNK);
    for pair in pairs {
        chunk.push(pair);
        if chunk.len() == CHUNK {
            out.extend(packer.pack_chunk(&chunk));
            chunk.clear();
        }
    }
    out.extend(packer.pack_chunk(&chunk));
    (out, packer.into_tally())
}
