//! Synthetic MediaWiki dumps and extracted articles for tests and
//! benchmarks.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::PairId;
use crate::ingest::{LangLink, PageRecord};

/// SQL literal for a dump tuple.
pub enum SqlLiteral<'a> {
    Int(i64),
    Str(&'a str),
    Null,
}

/// MySQL string escaping as written by `mysqldump`.
pub fn escape_sql(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\'' => out.push_str("\\'"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            '\0' => out.push_str("\\0"),
            '\u{1a}' => out.push_str("\\Z"),
            c => out.push(c),
        }
    }
    out
}

/// One `INSERT INTO` statement per `batch` rows, framed like a real dump.
pub fn write_sql_dump<'a, W: Write>(
    mut out: W,
    table: &str,
    rows: impl IntoIterator<Item = Vec<SqlLiteral<'a>>>,
    batch: usize,
) -> io::Result<()> {
    writeln!(out, "-- MySQL dump 10.19\n/*!40101 SET NAMES binary */;")?;
    writeln!(out, "DROP TABLE IF EXISTS `{table}`;")?;
    writeln!(out, "CREATE TABLE `{table}` (\n  `x` int\n) ENGINE=InnoDB;")?;
    let mut in_stmt = 0usize;
    for row in rows {
        if in_stmt == 0 {
            write!(out, "INSERT INTO `{table}` VALUES ")?;
        } else {
            out.write_all(b",")?;
        }
        out.write_all(b"(")?;
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.write_all(b",")?;
            }
            match v {
                SqlLiteral::Int(n) => write!(out, "{n}")?,
                SqlLiteral::Str(s) => write!(out, "'{}'", escape_sql(s))?,
                SqlLiteral::Null => out.write_all(b"NULL")?,
            }
        }
        out.write_all(b")")?;
        in_stmt += 1;
        if in_stmt == batch.max(1) {
            out.write_all(b";\n")?;
            in_stmt = 0;
        }
    }
    if in_stmt > 0 {
        out.write_all(b";\n")?;
    }
    writeln!(out, "/*!40000 ALTER TABLE `{table}` ENABLE KEYS */;")?;
    out.flush()
}

pub fn write_langlinks_sql<W: Write>(out: W, links: &[LangLink]) -> io::Result<()> {
    write_sql_dump(
        out,
        "langlinks",
        links.iter().map(|l| {
            vec![
                SqlLiteral::Int(l.from_page_id as i64),
                SqlLiteral::Str(&l.target_lang),
                SqlLiteral::Str(&l.target_title),
            ]
        }),
        500,
    )
}

/// Pages in the current 12-column `page` layout; titles are stored with
/// underscores as in real dumps.
pub fn write_pages_sql<W: Write>(out: W, pages: &[PageRecord]) -> io::Result<()> {
    let titles: Vec<String> = pages.iter().map(|p| p.title.replace(' ', "_")).collect();
    write_sql_dump(
        out,
        "page",
        pages.iter().zip(&titles).map(|(p, t)| {
            vec![
                SqlLiteral::Int(p.page_id as i64),
                SqlLiteral::Int(p.namespace),
                SqlLiteral::Str(t),
                SqlLiteral::Int(i64::from(p.is_redirect)),
                SqlLiteral::Int(0),
                SqlLiteral::Str("0.123456789"),
                SqlLiteral::Str("20240101000000"),
                SqlLiteral::Str("20240101000000"),
                SqlLiteral::Int(12345),
                SqlLiteral::Int(678),
                SqlLiteral::Str("wikitext"),
                SqlLiteral::Null,
            ]
        }),
        500,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub pairs: usize,
    pub lang_l: String,
    pub paragraphs_min: usize,
    pub paragraphs_max: usize,
    pub words_min: usize,
    pub words_max: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Number of article files per language.
    pub files_per_lang: usize,
    /// Share of pairs also linked from the English side.
    pub reverse_share: f64,
    /// Extra English pages that are redirects targeted by L links.
    pub redirects: usize,
    /// Emit `[[link]]` markup in target-language text.
    pub wiki_links: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            pairs: 100,
            lang_l: "xx".into(),
            paragraphs_min: 1,
            paragraphs_max: 6,
            words_min: 3,
            words_max: 40,
            vocab_size: 5000,
            seed: 1,
            files_per_lang: 2,
            reverse_share: 0.5,
            redirects: 0,
            wiki_links: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPaths {
    pub langlinks_en: PathBuf,
    pub langlinks_l: PathBuf,
    pub pages_en: PathBuf,
    pub pages_l: PathBuf,
    pub articles_en: PathBuf,
    pub articles_l: PathBuf,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub paths: SynthPaths,
    pub expected_pairs: BTreeSet<PairId>,
    pub paragraphs: u64,
    pub words: u64,
}

impl SynthCorpus {
    /// Pipeline configuration over this corpus with every other setting at
    /// its default.
    pub fn config_value(&self, lang_l: &str, output_dir: &Path) -> serde_json::Value {
        let p = &self.paths;
        serde_json::json!({
            "language_l": lang_l,
            "paths": {
                "langlinks_en": p.langlinks_en,
                "langlinks_l": p.langlinks_l,
                "pages_en": p.pages_en,
                "pages_l": p.pages_l,
                "articles_en": p.articles_en,
                "articles_l": p.articles_l,
                "output_dir": output_dir,
            },
        })
    }
}

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ne", "ru", "ta", "shi", "va", "do", "pe", "zu", "qua", "rin", "tel", "mor", "bas", "ei",
    "ou", "ly", "tre",
];

/// Pseudo-words built from syllables; deterministic for a given size.
pub fn make_vocabulary(size: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let n = rng.gen_range(1..=4);
        let w: String = (0..n).map(|_| *SYLLABLES.choose(&mut rng).expect("non-empty")).collect();
        let w = if seen.contains(&w) { format!("{w}{}", out.len()) } else { w };
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

pub fn page_id_en(k: usize) -> u64 {
    3 * k as u64 + 1
}

pub fn page_id_l(k: usize) -> u64 {
    5 * k as u64 + 2
}

fn title_for(k: usize, vocab: &[String], lang: &str) -> String {
    let a = &vocab[(k * 7919) % vocab.len()];
    let b = &vocab[(k * 104_729 + 13) % vocab.len()];
    let mut t = format!("{a} {b} {lang}{k}");
    if k % 17 == 3 {
        t.push_str(" O'Neil");
    }
    if k % 29 == 5 {
        t.push_str(" \\ \"q\"");
    }
    let mut chars = t.chars();
    let first = chars.next().expect("non-empty").to_uppercase().collect::<String>();
    first + chars.as_str()
}

fn paragraph(rng: &mut ChaCha8Rng, vocab: &[String], spec: &SynthSpec, link_titles: &[String]) -> String {
    let n = rng.gen_range(spec.words_min..=spec.words_max.max(spec.words_min));
    let mut p = String::with_capacity(n * 7);
    for i in 0..n {
        if i > 0 {
            p.push(' ');
        }
        if spec.wiki_links && !link_titles.is_empty() && rng.gen_bool(0.05) {
            p.push_str("[[");
            p.push_str(link_titles.choose(rng).expect("non-empty"));
            p.push_str("]]");
        } else {
            p.push_str(vocab.choose(rng).expect("non-empty"));
        }
    }
    p
}

fn article(rng: &mut ChaCha8Rng, vocab: &[String], spec: &SynthSpec, link_titles: &[String]) -> (String, usize, usize) {
    let n = rng.gen_range(spec.paragraphs_min..=spec.paragraphs_max.max(spec.paragraphs_min));
    let paras: Vec<String> = (0..n).map(|_| paragraph(rng, vocab, spec, link_titles)).collect();
    let words = paras.iter().map(|p| p.split_whitespace().count()).sum();
    (paras.join("\n\n"), n, words)
}

fn write_articles(
    dir: &Path,
    files: usize,
    articles: impl Iterator<Item = (u64, String, String)>,
) -> io::Result<()> {
    fs::create_dir_all(dir.join("AA"))?;
    let mut outs: Vec<BufWriter<File>> = (0..files.max(1))
        .map(|i| File::create(dir.join("AA").join(format!("wiki_{i:02}"))).map(BufWriter::new))
        .collect::<io::Result<_>>()?;
    let n = outs.len();
    for (i, (id, title, text)) in articles.enumerate() {
        let line = serde_json::json!({
            "id": id.to_string(),
            "url": format!("https://example.org/wiki?curid={id}"),
            "title": title,
            "text": text,
        });
        serde_json::to_writer(&mut outs[i % n], &line)?;
        outs[i % n].write_all(b"\n")?;
    }
    for out in &mut outs {
        out.flush()?;
    }
    Ok(())
}

/// Writes dumps and articles for `spec.pairs` aligned pairs under `dir`.
/// Every pair is linked from the target-language side; a share is also
/// linked from the English side. Redirect pages and a few non-main
/// namespace pages are mixed in and must be filtered by alignment.
pub fn write_synthetic_corpus(dir: &Path, spec: &SynthSpec) -> io::Result<SynthCorpus> {
    fs::create_dir_all(dir)?;
    let vocab = make_vocabulary(spec.vocab_size.max(16), spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lang = spec.lang_l.as_str();

    let titles_en: Vec<String> = (0..spec.pairs).map(|k| title_for(k, &vocab, "en")).collect();
    let titles_l: Vec<String> = (0..spec.pairs).map(|k| title_for(k, &vocab, lang)).collect();

    let mut pages_en: Vec<PageRecord> = (0..spec.pairs)
        .map(|k| PageRecord {
            page_id: page_id_en(k),
            namespace: 0,
            title: titles_en[k].clone(),
            is_redirect: false,
        })
        .collect();
    let mut pages_l: Vec<PageRecord> = (0..spec.pairs)
        .map(|k| PageRecord {
            page_id: page_id_l(k),
            namespace: 0,
            title: titles_l[k].clone(),
            is_redirect: false,
        })
        .collect();
    let mut links_l: Vec<LangLink> = (0..spec.pairs)
        .map(|k| LangLink {
            from_page_id: page_id_l(k),
            target_lang: "en".into(),
            target_title: titles_en[k].clone(),
        })
        .collect();
    let mut links_en: Vec<LangLink> = (0..spec.pairs)
        .filter(|_| rng.gen_bool(spec.reverse_share.clamp(0.0, 1.0)))
        .map(|k| LangLink {
            from_page_id: page_id_en(k),
            target_lang: lang.into(),
            target_title: titles_l[k].clone(),
        })
        .collect();
    // Noise: links into other languages, a category page with a colliding
    // title in another namespace, and redirects.
    for k in 0..spec.pairs.min(50) {
        links_en.push(LangLink {
            from_page_id: page_id_en(k),
            target_lang: "zz".into(),
            target_title: format!("Other {k}"),
        });
        pages_en.push(PageRecord {
            page_id: 9_000_000 + k as u64,
            namespace: 14,
            title: format!("Category {k}"),
            is_redirect: false,
        });
    }
    for r in 0..spec.redirects {
        let id = 8_000_000 + r as u64;
        let title = format!("Redirect target {r}");
        pages_en.push(PageRecord {
            page_id: id,
            namespace: 0,
            title: title.clone(),
            is_redirect: true,
        });
        let extra_l = 7_000_000 + r as u64;
        pages_l.push(PageRecord {
            page_id: extra_l,
            namespace: 0,
            title: format!("Redir {r}"),
            is_redirect: false,
        });
        links_l.push(LangLink {
            from_page_id: extra_l,
            target_lang: "en".into(),
            target_title: title,
        });
    }
    pages_en.shuffle(&mut rng);
    links_l.shuffle(&mut rng);

    let paths = SynthPaths {
        langlinks_en: dir.join("enwiki-langlinks.sql"),
        langlinks_l: dir.join(format!("{lang}wiki-langlinks.sql")),
        pages_en: dir.join("enwiki-page.sql"),
        pages_l: dir.join(format!("{lang}wiki-page.sql")),
        articles_en: dir.join("articles_en"),
        articles_l: dir.join(format!("articles_{lang}")),
    };
    write_langlinks_sql(BufWriter::new(File::create(&paths.langlinks_en)?), &links_en)?;
    write_langlinks_sql(BufWriter::new(File::create(&paths.langlinks_l)?), &links_l)?;
    write_pages_sql(BufWriter::new(File::create(&paths.pages_en)?), &pages_en)?;
    write_pages_sql(BufWriter::new(File::create(&paths.pages_l)?), &pages_l)?;

    let mut paragraphs = 0u64;
    let mut words = 0u64;
    let mut texts_en = Vec::with_capacity(spec.pairs);
    let mut texts_l = Vec::with_capacity(spec.pairs);
    let link_pool: Vec<String> = titles_l.iter().take(200).cloned().collect();
    for _ in 0..spec.pairs {
        let (en, pe, we) = article(&mut rng, &vocab, spec, &[]);
        let (l, pl, wl) = article(&mut rng, &vocab, spec, &link_pool);
        paragraphs += (pe + pl) as u64;
        words += (we + wl) as u64;
        texts_en.push(en);
        texts_l.push(l);
    }
    write_articles(
        &paths.articles_en,
        spec.files_per_lang,
        (0..spec.pairs).map(|k| (page_id_en(k), titles_en[k].clone(), std::mem::take(&mut texts_en[k]))),
    )?;
    write_articles(
        &paths.articles_l,
        spec.files_per_lang,
        (0..spec.pairs).map(|k| (page_id_l(k), titles_l[k].clone(), std::mem::take(&mut texts_l[k]))),
    )?;

    Ok(SynthCorpus {
        paths,
        expected_pairs: (0..spec.pairs).map(|k| PairId::new(page_id_l(k), page_id_en(k))).collect(),
        paragraphs,
        words,
    })
}

/// Candidate web corpus lines `{"id", "text"}`; every third document
/// reuses a target-language link title so retrieval has something to find.
pub fn write_candidate_corpus(path: &Path, docs: usize, spec: &SynthSpec) -> io::Result<()> {
    let vocab = make_vocabulary(spec.vocab_size.max(16), spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xc0de);
    let mut out = BufWriter::new(File::create(path)?);
    for d in 0..docs {
        let title = title_for(d % spec.pairs.max(1), &vocab, "en");
        let (body, _, _) = article(&mut rng, &vocab, spec, &[]);
        let text = format!("{title}\n{body}");
        serde_json::to_writer(&mut out, &serde_json::json!({ "id": format!("web-{d:06}"), "text": text }))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{build_pair_map, AlignFilter};
    use crate::ingest::{open_input, parse_langlinks_dump, parse_pages_dump, PageColumns};

    #[test]
    fn escaping_round_trips_through_the_parser() {
        let links = vec![LangLink {
            from_page_id: 1,
            target_lang: "en".into(),
            target_title: "a'b\\c\"d\ne\tf\0g\u{1a}h".into(),
        }];
        let mut buf = Vec::new();
        write_langlinks_sql(&mut buf, &links).unwrap();
        let back: Vec<LangLink> = parse_langlinks_dump(&buf[..], None).map(Result::unwrap).collect();
        assert_eq!(back, links);
    }

    #[test]
    fn synthetic_corpus_aligns_to_expected_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            pairs: 120,
            redirects: 7,
            ..SynthSpec::default()
        };
        let c = write_synthetic_corpus(dir.path(), &spec).unwrap();
        let links = |p: &Path, lang: &str| -> Vec<LangLink> {
            parse_langlinks_dump(open_input(p).unwrap(), Some(lang)).map(Result::unwrap).collect()
        };
        let pages = |p: &Path| -> Vec<PageRecord> {
            parse_pages_dump(open_input(p).unwrap(), PageColumns::default())
                .map(Result::unwrap)
                .collect()
        };
        let map = build_pair_map(
            links(&c.paths.langlinks_l, "en"),
            pages(&c.paths.pages_en),
            links(&c.paths.langlinks_en, "xx"),
            pages(&c.paths.pages_l),
            AlignFilter::default(),
        );
        assert_eq!(map.pairs, c.expected_pairs);
        assert_eq!(map.tally.filtered_redirect, 7);
    }
}
