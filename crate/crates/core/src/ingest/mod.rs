//! Streaming readers for MediaWiki `langlinks` / `page` SQL dumps and
//! wikiextractor-style article files.

mod articles;
mod sql;

use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use articles::{list_article_files, ArticleLine, ArticleLines, ArticleReader};
pub use sql::{SqlTuples, SqlValue};

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("dump truncated at byte {offset}: stream ended inside an INSERT statement")]
    Truncated { offset: u64 },
}

/// Counters kept by every reader. Malformed input is counted, never fatal.
#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseTally {
    /// Tuples (or lines) seen, well-formed or not.
    pub tuples: u64,
    /// Records successfully produced.
    pub records: u64,
    /// Tuples or lines that could not be parsed into a record.
    pub malformed: u64,
    /// Well-formed records excluded by a filter (e.g. language).
    pub filtered: u64,
}

impl ParseTally {
    pub fn merge(&mut self, other: &ParseTally) {
        self.tuples += other.tuples;
        self.records += other.records;
        self.malformed += other.malformed;
        self.filtered += other.filtered;
    }
}

/// One row of the `langlinks` table: page `from_page_id` in the source wiki
/// links to `target_title` in the `target_lang` wiki.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LangLink {
    pub from_page_id: u64,
    pub target_lang: String,
    pub target_title: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PageRecord {
    pub page_id: u64,
    pub namespace: i64,
    pub title: String,
    pub is_redirect: bool,
}

/// Plain-text article with paragraphs separated by blank lines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawArticle {
    pub page_id: u64,
    pub title: String,
    pub text: String,
    pub lang: String,
}

/// MediaWiki stores titles with underscores in place of spaces.
pub fn normalize_title(raw: &str) -> String {
    raw.replace('_', " ")
}

/// Opens a file for buffered reading, decompressing gzip transparently
/// (detected by magic bytes, not by extension).
pub fn open_input(path: &Path) -> Result<Box<dyn BufRead + Send>, DumpError> {
    let file = File::open(path).map_err(|source| DumpError::File {
        path: path.to_owned(),
        source,
    })?;
    let mut reader = BufReader::with_capacity(1 << 16, file);
    let magic = reader.fill_buf().map_err(|source| DumpError::File {
        path: path.to_owned(),
        source,
    })?;
    if magic.starts_with(&[0x1f, 0x8b]) {
        let decoder = flate2::bufread::MultiGzDecoder::new(reader);
        Ok(Box::new(BufReader::with_capacity(1 << 16, decoder)))
    } else {
        Ok(Box::new(reader))
    }
}

/// Column positions of the `page` table. The order has drifted across
/// MediaWiki releases (e.g. `page_restrictions` was dropped in 1.36).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PageColumns {
    pub id: usize,
    pub namespace: usize,
    pub title: usize,
    pub is_redirect: usize,
}

impl Default for PageColumns {
    fn default() -> Self {
        PageColumns {
            id: 0,
            namespace: 1,
            title: 2,
            is_redirect: 3,
        }
    }
}

/// Streams [`LangLink`]s out of a `langlinks` dump, optionally keeping only
/// links into one language.
pub struct LangLinkReader<R> {
    tuples: SqlTuples<R>,
    filter_lang: Option<String>,
}

impl<R: BufRead> LangLinkReader<R> {
    pub fn new(reader: R, filter_lang: Option<&str>) -> Self {
        LangLinkReader {
            tuples: SqlTuples::new(reader),
            filter_lang: filter_lang.map(str::to_owned),
        }
    }

    pub fn tally(&self) -> &ParseTally {
        self.tuples.tally()
    }

    fn convert(fields: &[SqlValue]) -> Option<LangLink> {
        let [from, lang, title] = fields else {
            return None;
        };
        let lang = lang.as_str()?;
        if lang.is_empty() || lang.chars().any(char::is_uppercase) {
            return None;
        }
        Some(LangLink {
            from_page_id: from.as_u64()?,
            target_lang: lang.to_owned(),
            target_title: normalize_title(title.as_str()?),
        })
    }
}

impl<R: BufRead> Iterator for LangLinkReader<R> {
    type Item = Result<LangLink, DumpError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let fields = match self.tuples.next()? {
                Ok(fields) => fields,
                Err(e) => return Some(Err(e)),
            };
            let Some(link) = Self::convert(&fields) else {
                self.tuples.tally_mut().malformed += 1;
                continue;
            };
            if matches!(&self.filter_lang, Some(lang) if *lang != link.target_lang) {
                self.tuples.tally_mut().filtered += 1;
                continue;
            }
            self.tuples.tally_mut().records += 1;
            return Some(Ok(link));
        }
    }
}

/// Streams [`PageRecord`]s out of a `page` dump. Every namespace is
/// yielded; filtering is the consumer's decision.
pub struct PageReader<R> {
    tuples: SqlTuples<R>,
    columns: PageColumns,
}

impl<R: BufRead> PageReader<R> {
    pub fn new(reader: R, columns: PageColumns) -> Self {
        PageReader {
            tuples: SqlTuples::new(reader),
            columns,
        }
    }

    pub fn tally(&self) -> &ParseTally {
        self.tuples.tally()
    }

    fn convert(&self, fields: &[SqlValue]) -> Option<PageRecord> {
        let c = self.columns;
        Some(PageRecord {
            page_id: fields.get(c.id)?.as_u64()?,
            namespace: fields.get(c.namespace)?.as_i64()?,
            title: normalize_title(fields.get(c.title)?.as_str()?),
            is_redirect: fields.get(c.is_redirect)?.as_bool()?,
        })
    }
}

impl<R: BufRead> Iterator for PageReader<R> {
    type Item = Result<PageRecord, DumpError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let fields = match self.tuples.next()? {
                Ok(fields) => fields,
                Err(e) => return Some(Err(e)),
            };
            match self.convert(&fields) {
                Some(page) => {
                    self.tuples.tally_mut().records += 1;
                    return Some(Ok(page));
                }
                None => self.tuples.tally_mut().malformed += 1,
            }
        }
    }
}

pub fn parse_langlinks_dump<R: BufRead>(reader: R, filter_lang: Option<&str>) -> LangLinkReader<R> {
    LangLinkReader::new(reader, filter_lang)
}

pub fn parse_pages_dump<R: BufRead>(reader: R, columns: PageColumns) -> PageReader<R> {
    PageReader::new(reader, columns)
}

pub fn read_extracted_articles(path: &Path, lang: &str) -> Result<ArticleReader, DumpError> {
    ArticleReader::open(path, lang)
}

/// Escapes backslash, tab and line breaks for a single TSV field.
pub fn tsv_field(s: &str) -> String {
    s.replace('\\', "\\\\")
        .replace('\t', "\\t")
        .replace('\n', "\\n")
        .replace('\r', "\\r")
}

/// Tab-separated rendering used by the `--dump-tsv` debug output.
pub trait TsvRecord {
    fn write_tsv<W: Write>(&self, w: &mut W) -> io::Result<()>;
}

impl TsvRecord for LangLink {
    fn write_tsv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(
            w,
            "{}\t{}\t{}",
            self.from_page_id,
            self.target_lang,
            tsv_field(&self.target_title)
        )
    }
}

impl TsvRecord for PageRecord {
    fn write_tsv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            self.page_id,
            self.namespace,
            tsv_field(&self.title),
            u8::from(self.is_redirect)
        )
    }
}

impl TsvRecord for RawArticle {
    fn write_tsv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            self.page_id,
            self.lang,
            tsv_field(&self.title),
            tsv_field(&self.text)
        )
    }
}

/// Reads a whole (small) input into memory. Test and fixture helper.
pub fn read_all(path: &Path) -> Result<Vec<u8>, DumpError> {
    let mut buf = Vec::new();
    open_input(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}
