//! Title-matched bilingual pair map and the article join.
//!
//! Links from the target-language wiki into English are resolved against the
//! English `page` table (forward map), links from English into the target
//! language against the target `page` table (reverse map); the pair set is
//! the union of both.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{ArticleLine, ArticleLines, DumpError, LangLink, PageRecord, RawArticle};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error("{path}:{line}: expected `id_l<TAB>id_en`, got {content:?}")]
    PairMapSyntax {
        path: PathBuf,
        line: usize,
        content: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// `(ID^L, ID^en)`: a page in the target-language wiki and its English
/// counterpart. Orders by `id_l` first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairId {
    pub id_l: u64,
    pub id_en: u64,
}

impl PairId {
    pub fn new(id_l: u64, id_en: u64) -> Self {
        PairId { id_l, id_en }
    }
}

/// Which sub-filters make a title "invalid". The default is the strict set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignFilter {
    pub main_namespace_only: bool,
    pub exclude_redirects: bool,
}

impl Default for AlignFilter {
    fn default() -> Self {
        AlignFilter {
            main_namespace_only: true,
            exclude_redirects: true,
        }
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignTally {
    pub forward_links: u64,
    pub reverse_links: u64,
    pub blank_titles: u64,
    pub unresolved_titles: u64,
    pub filtered_namespace: u64,
    pub filtered_redirect: u64,
    pub collisions: u64,
    pub forward_pairs: u64,
    pub reverse_pairs: u64,
    pub pairs: u64,
}

#[derive(Debug, Clone, Default)]
pub struct PairMap {
    pub pairs: BTreeSet<PairId>,
    pub tally: AlignTally,
}

#[derive(Clone, Copy)]
enum Rejection {
    Namespace,
    Redirect,
}

/// Resolves each link's target title against a page table and returns
/// `(from_page_id, resolved_page_id)` for every link that survives the
/// filters.
fn resolve_direction(
    links: Vec<LangLink>,
    pages: impl IntoIterator<Item = PageRecord>,
    filter: AlignFilter,
    tally: &mut AlignTally,
) -> Vec<(u64, u64)> {
    let mut wanted: HashSet<String> = HashSet::new();
    for link in &links {
        let title = link.target_title.trim();
        if !title.is_empty() {
            wanted.insert(title.to_owned());
        }
    }

    let mut candidates: HashMap<String, Vec<u64>> = HashMap::with_capacity(wanted.len());
    let mut rejected: HashMap<String, Rejection> = HashMap::new();
    for page in pages {
        let title = page.title.trim();
        if !wanted.contains(title) {
            continue;
        }
        let rejection = if filter.main_namespace_only && page.namespace != 0 {
            Some(Rejection::Namespace)
        } else if filter.exclude_redirects && page.is_redirect {
            Some(Rejection::Redirect)
        } else {
            None
        };
        match rejection {
            // Namespace wins over redirect so the tally is order-independent.
            Some(r) => {
                let slot = rejected.entry(title.to_owned()).or_insert(r);
                if matches!(r, Rejection::Namespace) {
                    *slot = r;
                }
            }
            None => candidates.entry(title.to_owned()).or_default().push(page.page_id),
        }
    }
    let resolved: HashMap<String, u64> = candidates
        .into_iter()
        .map(|(title, mut ids)| {
            ids.sort_unstable();
            ids.dedup();
            tally.collisions += ids.len() as u64 - 1;
            (title, ids[0])
        })
        .collect();

    let mut out = Vec::with_capacity(links.len());
    for link in links {
        let title = link.target_title.trim();
        if title.is_empty() {
            tally.blank_titles += 1;
        } else if let Some(&id) = resolved.get(title) {
            out.push((link.from_page_id, id));
        } else {
            match rejected.get(title) {
                Some(Rejection::Namespace) => tally.filtered_namespace += 1,
                Some(Rejection::Redirect) => tally.filtered_redirect += 1,
                None => tally.unresolved_titles += 1,
            }
        }
    }
    out
}

/// Builds the deduplicated union of forward (`L -> en`) and reverse
/// (`en -> L`) pairs. Link streams must already be filtered to the relevant
/// language.
pub fn build_pair_map(
    langlinks_l_to_en: impl IntoIterator<Item = LangLink>,
    pages_en: impl IntoIterator<Item = PageRecord>,
    langlinks_en_to_l: impl IntoIterator<Item = LangLink>,
    pages_l: impl IntoIterator<Item = PageRecord>,
    filter: AlignFilter,
) -> PairMap {
    let mut tally = AlignTally::default();
    let forward_links: Vec<_> = langlinks_l_to_en.into_iter().collect();
    let reverse_links: Vec<_> = langlinks_en_to_l.into_iter().collect();
    tally.forward_links = forward_links.len() as u64;
    tally.reverse_links = reverse_links.len() as u64;

    let mut pairs = BTreeSet::new();
    let forward = resolve_direction(forward_links, pages_en, filter, &mut tally);
    tally.forward_pairs = forward.len() as u64;
    pairs.extend(forward.into_iter().map(|(id_l, id_en)| PairId::new(id_l, id_en)));

    let reverse = resolve_direction(reverse_links, pages_l, filter, &mut tally);
    tally.reverse_pairs = reverse.len() as u64;
    pairs.extend(reverse.into_iter().map(|(id_en, id_l)| PairId::new(id_l, id_en)));

    tally.pairs = pairs.len() as u64;
    PairMap { pairs, tally }
}

pub fn write_pair_map<'a>(path: &Path, pairs: impl IntoIterator<Item = &'a PairId>) -> Result<(), AlignError> {
    let io_err = |source| AlignError::Io {
        path: path.to_owned(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    write_pair_map_to(&mut w, pairs).map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// One `id_l<TAB>id_en` line per pair.
pub fn write_pair_map_to<'a>(w: &mut impl Write, pairs: impl IntoIterator<Item = &'a PairId>) -> io::Result<()> {
    for p in pairs {
        writeln!(w, "{}\t{}", p.id_l, p.id_en)?;
    }
    Ok(())
}

pub fn read_pair_map(path: &Path) -> Result<BTreeSet<PairId>, AlignError> {
    let io_err = |source| AlignError::Io {
        path: path.to_owned(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut pairs = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = line
            .split_once('\t')
            .and_then(|(l, en)| Some(PairId::new(l.trim().parse().ok()?, en.trim().parse().ok()?)));
        match parsed {
            Some(p) => {
                pairs.insert(p);
            }
            None => {
                return Err(AlignError::PairMapSyntax {
                    path: path.to_owned(),
                    line: i + 1,
                    content: line,
                })
            }
        }
    }
    Ok(pairs)
}

/// Where a pair came from. Retrieved pairs pair a web document with a
/// target-language article and are packed exactly like Wikipedia pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairSource {
    #[default]
    Wikipedia,
    Retrieved { doc_id: String, score: f64 },
}

impl PairSource {
    /// Data-source label used in statistics: `W` for Wikipedia, `F` for
    /// retrieved web documents.
    pub fn label(&self) -> &'static str {
        match self {
            PairSource::Wikipedia => "W",
            PairSource::Retrieved { .. } => "F",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArticlePair {
    pub pair: PairId,
    pub title_en: String,
    pub title_l: String,
    pub text_en: String,
    pub text_l: String,
    pub lang_l: String,
    #[serde(default)]
    pub source: PairSource,
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinTally {
    pub pairs_joined: u64,
    pub pairs_missing_text: u64,
    pub pairs_blank_title: u64,
    pub duplicate_articles_en: u64,
    pub duplicate_articles_l: u64,
}

enum Skip {
    MissingText,
    BlankTitle,
}

fn make_pair(pair: PairId, en: Option<RawArticle>, l: Option<RawArticle>, lang_l: &str) -> Result<ArticlePair, Skip> {
    let (Some(en), Some(l)) = (en, l) else {
        return Err(Skip::MissingText);
    };
    if en.text.trim().is_empty() || l.text.trim().is_empty() {
        return Err(Skip::MissingText);
    }
    if en.title.trim().is_empty() || l.title.trim().is_empty() {
        return Err(Skip::BlankTitle);
    }
    Ok(ArticlePair {
        pair,
        title_en: en.title,
        title_l: l.title,
        text_en: en.text,
        text_l: l.text,
        lang_l: lang_l.to_owned(),
        source: PairSource::Wikipedia,
    })
}

fn collect_results(
    results: Vec<Result<ArticlePair, Skip>>,
    tally: &mut JoinTally,
) -> Vec<ArticlePair> {
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(p) => {
                tally.pairs_joined += 1;
                out.push(p);
            }
            Err(Skip::MissingText) => tally.pairs_missing_text += 1,
            Err(Skip::BlankTitle) => tally.pairs_blank_title += 1,
        }
    }
    out
}

/// In-memory join over article streams. Only articles referenced by some
/// pair are retained. Output is ascending by `(id_l, id_en)`.
pub fn join_articles(
    pairs: &BTreeSet<PairId>,
    articles_en: impl IntoIterator<Item = RawArticle>,
    articles_l: impl IntoIterator<Item = RawArticle>,
    lang_l: &str,
) -> (Vec<ArticlePair>, JoinTally) {
    let mut tally = JoinTally::default();
    let wanted_en: HashSet<u64> = pairs.iter().map(|p| p.id_en).collect();
    let wanted_l: HashSet<u64> = pairs.iter().map(|p| p.id_l).collect();

    fn retain(
        articles: impl IntoIterator<Item = RawArticle>,
        wanted: &HashSet<u64>,
        duplicates: &mut u64,
    ) -> HashMap<u64, RawArticle> {
        let mut seen = HashSet::new();
        let mut kept = HashMap::new();
        for a in articles {
            if !seen.insert(a.page_id) {
                *duplicates += 1;
                continue;
            }
            if wanted.contains(&a.page_id) {
                kept.insert(a.page_id, a);
            }
        }
        kept
    }

    let mut en = retain(articles_en, &wanted_en, &mut tally.duplicate_articles_en);
    let mut l = retain(articles_l, &wanted_l, &mut tally.duplicate_articles_l);
    // An English article may serve several pairs (and vice versa), so clone
    // unless this is its last use.
    let mut uses_en: HashMap<u64, usize> = HashMap::new();
    let mut uses_l: HashMap<u64, usize> = HashMap::new();
    for p in pairs {
        *uses_en.entry(p.id_en).or_default() += 1;
        *uses_l.entry(p.id_l).or_default() += 1;
    }
    fn take(map: &mut HashMap<u64, RawArticle>, uses: &mut HashMap<u64, usize>, id: u64) -> Option<RawArticle> {
        let n = uses.get_mut(&id)?;
        *n -= 1;
        if *n == 0 {
            map.remove(&id)
        } else {
            map.get(&id).cloned()
        }
    }
    let results = pairs
        .iter()
        .map(|&p| {
            let a_en = take(&mut en, &mut uses_en, p.id_en);
            let a_l = take(&mut l, &mut uses_l, p.id_l);
            make_pair(p, a_en, a_l, lang_l)
        })
        .collect();
    let out = collect_results(results, &mut tally);
    (out, tally)
}

enum IndexEntry {
    Offset { file: u32, offset: u64, len: u32 },
    /// Compressed files cannot be read at an offset; their wanted lines
    /// are kept in memory.
    Inline(Box<[u8]>),
}

/// `page_id -> location` index over an article set, so a join can fetch
/// texts from disk instead of holding whole corpora in memory.
pub struct ArticleIndex {
    files: Vec<File>,
    entries: HashMap<u64, IndexEntry>,
    lang: String,
    duplicates: u64,
    malformed: u64,
}

impl ArticleIndex {
    /// Indexes every article (or only the `wanted` ids) under `path`. The
    /// first occurrence of an id wins.
    pub fn build(path: &Path, lang: &str, wanted: Option<&HashSet<u64>>) -> Result<Self, AlignError> {
        let mut lines = ArticleLines::open(path)?;
        let paths: Vec<PathBuf> = lines.files().to_vec();
        let mut entries = HashMap::new();
        let mut seen = HashSet::new();
        let mut duplicates = 0;
        let mut malformed = 0;
        while let Some(line) = lines.next_line()? {
            let Some(parsed) = ArticleLine::parse(line.bytes) else {
                malformed += 1;
                continue;
            };
            let id = parsed.page_id().expect("validated by parse");
            if !seen.insert(id) {
                duplicates += 1;
                continue;
            }
            if wanted.is_some_and(|w| !w.contains(&id)) {
                continue;
            }
            let entry = if line.compressed {
                IndexEntry::Inline(line.bytes.into())
            } else {
                IndexEntry::Offset {
                    file: line.file_index as u32,
                    offset: line.offset,
                    len: line.bytes.len() as u32,
                }
            };
            entries.insert(id, entry);
        }
        let files = paths
            .iter()
            .map(|p| {
                File::open(p).map_err(|source| AlignError::Io {
                    path: p.clone(),
                    source,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(ArticleIndex {
            files,
            entries,
            lang: lang.to_owned(),
            duplicates,
            malformed,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    pub fn malformed(&self) -> u64 {
        self.malformed
    }

    pub fn get(&self, page_id: u64) -> Result<Option<RawArticle>, AlignError> {
        let Some(entry) = self.entries.get(&page_id) else {
            return Ok(None);
        };
        let parsed = match entry {
            IndexEntry::Inline(bytes) => ArticleLine::parse(bytes),
            IndexEntry::Offset { file, offset, len } => {
                let mut buf = vec![0u8; *len as usize];
                read_exact_at(&self.files[*file as usize], &mut buf, *offset).map_err(|source| {
                    AlignError::Io {
                        path: PathBuf::from(format!("<article file #{file}>")),
                        source,
                    }
                })?;
                ArticleLine::parse(&buf)
            }
        };
        Ok(parsed.map(|line| line.into_article(&self.lang)))
    }
}

#[cfg(unix)]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(not(unix))]
fn read_exact_at(file: &File, buf: &mut [u8], offset: u64) -> io::Result<()> {
    use std::io::{Read, Seek, SeekFrom};
    let mut f = file.try_clone()?;
    f.seek(SeekFrom::Start(offset))?;
    f.read_exact(buf)
}

/// Join through on-disk indexes. Lookups fan out over the current rayon
/// pool; output order is ascending by `(id_l, id_en)`.
pub fn join_indexed(
    pairs: &BTreeSet<PairId>,
    en: &ArticleIndex,
    l: &ArticleIndex,
    lang_l: &str,
) -> Result<(Vec<ArticlePair>, JoinTally), AlignError> {
    let ordered: Vec<PairId> = pairs.iter().copied().collect();
    let results = ordered
        .par_iter()
        .map(|&p| Ok(make_pair(p, en.get(p.id_en)?, l.get(p.id_l)?, lang_l)))
        .collect::<Result<Vec<_>, AlignError>>()?;
    let mut tally = JoinTally {
        duplicate_articles_en: en.duplicates(),
        duplicate_articles_l: l.duplicates(),
        ..JoinTally::default()
    };
    let out = collect_results(results, &mut tally);
    Ok((out, tally))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn link(from: u64, lang: &str, title: &str) -> LangLink {
        LangLink {
            from_page_id: from,
            target_lang: lang.into(),
            target_title: title.into(),
        }
    }

    fn page(id: u64, title: &str) -> PageRecord {
        PageRecord {
            page_id: id,
            namespace: 0,
            title: title.into(),
            is_redirect: false,
        }
    }

    fn article(id: u64, title: &str, text: &str, lang: &str) -> RawArticle {
        RawArticle {
            page_id: id,
            title: title.into(),
            text: text.into(),
            lang: lang.into(),
        }
    }

    fn set(pairs: &[(u64, u64)]) -> BTreeSet<PairId> {
        pairs.iter().map(|&(l, en)| PairId::new(l, en)).collect()
    }

    #[test]
    fn single_forward_link() {
        let map = build_pair_map(vec![link(10, "en", "A")], vec![page(100, "A")], vec![], vec![], AlignFilter::default());
        assert_eq!(map.pairs, set(&[(10, 100)]));
    }

    #[test]
    fn blank_title_is_removed() {
        for blank in ["", "   "] {
            let map = build_pair_map(vec![link(10, "en", blank)], vec![page(100, "A")], vec![], vec![], AlignFilter::default());
            assert!(map.pairs.is_empty());
            assert_eq!(map.tally.blank_titles, 1);
        }
    }

    #[test]
    fn reverse_links_are_unioned() {
        let map = build_pair_map(
            vec![link(10, "en", "A")],
            vec![page(100, "A")],
            vec![link(200, "es", "B")],
            vec![page(20, "B")],
            AlignFilter::default(),
        );
        assert_eq!(map.pairs, set(&[(10, 100), (20, 200)]));
        assert_eq!(map.tally.forward_pairs, 1);
        assert_eq!(map.tally.reverse_pairs, 1);
    }

    #[test]
    fn overlapping_directions_deduplicate() {
        let map = build_pair_map(
            vec![link(10, "en", "A")],
            vec![page(100, "A")],
            vec![link(100, "es", "Á")],
            vec![page(10, "Á")],
            AlignFilter::default(),
        );
        assert_eq!(map.pairs, set(&[(10, 100)]));
    }

    #[test]
    fn filters_namespace_redirect_and_unknown() {
        let pages = vec![
            PageRecord {
                namespace: 14,
                ..page(1, "Category thing")
            },
            PageRecord {
                is_redirect: true,
                ..page(2, "Redirected")
            },
            page(3, "Good"),
        ];
        let links = vec![
            link(10, "en", "Category thing"),
            link(11, "en", "Redirected"),
            link(12, "en", "Good"),
            link(13, "en", "Nowhere"),
        ];
        let map = build_pair_map(links.clone(), pages.clone(), vec![], vec![], AlignFilter::default());
        assert_eq!(map.pairs, set(&[(12, 3)]));
        assert_eq!(map.tally.filtered_namespace, 1);
        assert_eq!(map.tally.filtered_redirect, 1);
        assert_eq!(map.tally.unresolved_titles, 1);

        let lax = AlignFilter {
            main_namespace_only: false,
            exclude_redirects: false,
        };
        let map = build_pair_map(links, pages, vec![], vec![], lax);
        assert_eq!(map.pairs, set(&[(10, 1), (11, 2), (12, 3)]));
    }

    #[test]
    fn title_collision_keeps_lowest_id() {
        let pages = vec![page(50, "Dup"), page(40, "Dup"), page(60, "Dup")];
        let map = build_pair_map(vec![link(1, "en", "Dup")], pages, vec![], vec![], AlignFilter::default());
        assert_eq!(map.pairs, set(&[(1, 40)]));
        assert_eq!(map.tally.collisions, 2);
    }

    #[test]
    fn join_emits_sorted_pairs_and_tallies_missing() {
        let pairs = set(&[(2, 9), (1, 5), (3, 7)]);
        let en = vec![
            article(9, "Nine", "nine text", "en"),
            article(5, "Five", "five text", "en"),
            article(7, "Seven", "", "en"),
        ];
        let l = vec![
            article(2, "Dos", "dos", "es"),
            article(1, "Uno", "uno", "es"),
            article(3, "Tres", "tres", "es"),
        ];
        let (out, tally) = join_articles(&pairs, en, l, "es");
        let ids: Vec<_> = out.iter().map(|p| (p.pair.id_l, p.pair.id_en)).collect();
        assert_eq!(ids, vec![(1, 5), (2, 9)]);
        assert_eq!(tally.pairs_missing_text, 1);
        assert_eq!(out[0].title_l, "Uno");
        assert_eq!(out[0].lang_l, "es");
    }

    #[test]
    fn join_ignores_later_duplicates() {
        let pairs = set(&[(1, 5)]);
        let en = vec![article(5, "First", "first", "en"), article(5, "Second", "second", "en")];
        let l = vec![article(1, "Uno", "uno", "es")];
        let (out, tally) = join_articles(&pairs, en, l, "es");
        assert_eq!(out[0].text_en, "first");
        assert_eq!(tally.duplicate_articles_en, 1);
    }

    #[test]
    fn shared_english_article_serves_two_pairs() {
        let pairs = set(&[(1, 5), (2, 5)]);
        let en = vec![article(5, "Five", "five", "en")];
        let l = vec![article(1, "Uno", "uno", "es"), article(2, "Dos", "dos", "es")];
        let (out, _) = join_articles(&pairs, en, l, "es");
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn indexed_join_matches_in_memory_join() {
        let dir = tempfile::tempdir().unwrap();
        let en_path = dir.path().join("en.jsonl");
        let l_path = dir.path().join("l.jsonl");
        std::fs::write(
            &en_path,
            "{\"id\":\"5\",\"title\":\"Five\",\"text\":\"five\\n\\nmore\"}\n{\"id\":\"9\",\"title\":\"Nine\",\"text\":\"nine\"}\n{\"id\":\"5\",\"title\":\"Dup\",\"text\":\"dup\"}\n",
        )
        .unwrap();
        std::fs::write(
            &l_path,
            "{\"id\":\"1\",\"title\":\"Uno\",\"text\":\"uno\"}\n{\"id\":\"2\",\"title\":\"Dos\",\"text\":\"\"}\n",
        )
        .unwrap();
        let pairs = set(&[(1, 5), (2, 9), (3, 5)]);
        let idx_en = ArticleIndex::build(&en_path, "en", None).unwrap();
        let idx_l = ArticleIndex::build(&l_path, "es", None).unwrap();
        let (indexed, tally) = join_indexed(&pairs, &idx_en, &idx_l, "es").unwrap();

        let read = |p: &Path, lang: &str| -> Vec<RawArticle> {
            crate::ingest::ArticleReader::open(p, lang).unwrap().map(Result::unwrap).collect()
        };
        let (memory, mem_tally) = join_articles(&pairs, read(&en_path, "en"), read(&l_path, "es"), "es");
        assert_eq!(indexed, memory);
        assert_eq!(tally, mem_tally);
        assert_eq!(indexed.len(), 1);
        assert_eq!(tally.pairs_missing_text, 2);
    }

    #[test]
    fn pair_map_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        let pairs = set(&[(3, 1), (1, 2), (1, 1)]);
        write_pair_map(&path, &pairs).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "1\t1\n1\t2\n3\t1\n");
        assert_eq!(read_pair_map(&path).unwrap(), pairs);
    }

    #[test]
    fn pair_map_syntax_error_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        std::fs::write(&path, "1\t2\nbogus\n").unwrap();
        let err = read_pair_map(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    /// Small random world: page tables over a shared title alphabet and
    /// links pointing at (possibly missing or blank) titles.
    fn world() -> impl Strategy<Value = (Vec<LangLink>, Vec<PageRecord>, Vec<LangLink>, Vec<PageRecord>)> {
        let title = prop_oneof![Just(String::new()), "[A-F]{1,2}"];
        let link_s = (0u64..30, title.clone()).prop_map(|(id, t)| LangLink {
            from_page_id: id,
            target_lang: "xx".into(),
            target_title: t,
        });
        let page_s = (0u64..30, "[A-F]{1,2}", 0i64..2, any::<bool>()).prop_map(|(id, t, ns, redirect)| PageRecord {
            page_id: id,
            namespace: ns * 14,
            title: t,
            is_redirect: redirect,
        });
        (
            prop::collection::vec(link_s.clone(), 0..20),
            prop::collection::vec(page_s.clone(), 0..20),
            prop::collection::vec(link_s, 0..20),
            prop::collection::vec(page_s, 0..20),
        )
    }

    proptest! {
        #[test]
        fn union_of_directions((fwd, pen, rev, pl) in world()) {
            let f = AlignFilter::default();
            let only_f = build_pair_map(fwd.clone(), pen.clone(), vec![], vec![], f).pairs;
            let only_r = build_pair_map(vec![], vec![], rev.clone(), pl.clone(), f).pairs;
            let both = build_pair_map(fwd, pen, rev, pl, f).pairs;
            let union: BTreeSet<_> = only_f.union(&only_r).copied().collect();
            prop_assert_eq!(union, both);
        }

        #[test]
        fn language_swap_symmetry((fwd, pen, rev, pl) in world()) {
            let f = AlignFilter::default();
            let a = build_pair_map(fwd.clone(), pen.clone(), rev.clone(), pl.clone(), f).pairs;
            let b: BTreeSet<_> = build_pair_map(rev, pl, fwd, pen, f)
                .pairs
                .into_iter()
                .map(|p| PairId::new(p.id_en, p.id_l))
                .collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn permutation_invariance((fwd, pen, rev, pl) in world(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let f = AlignFilter::default();
            let a = build_pair_map(fwd.clone(), pen.clone(), rev.clone(), pl.clone(), f);
            let (mut fwd, mut pen, mut rev, mut pl) = (fwd, pen, rev, pl);
            fwd.shuffle(&mut rng);
            pen.shuffle(&mut rng);
            rev.shuffle(&mut rng);
            pl.shuffle(&mut rng);
            let b = build_pair_map(fwd, pen, rev, pl, f);
            prop_assert_eq!(a.pairs, b.pairs);
            prop_assert_eq!(a.tally, b.tally);
        }
    }
}
