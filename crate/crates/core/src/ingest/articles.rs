use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{open_input, DumpError, ParseTally, RawArticle};

/// Files making up an article set, in lexicographic path order. Hidden files
/// (leading `.`) are ignored.
pub fn list_article_files(path: &Path) -> Result<Vec<PathBuf>, DumpError> {
    let meta = std::fs::metadata(path).map_err(|source| DumpError::File {
        path: path.to_owned(),
        source,
    })?;
    if meta.is_file() {
        return Ok(vec![path.to_owned()]);
    }
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| DumpError::File {
            path: e.path().map(Path::to_owned).unwrap_or_else(|| path.to_owned()),
            source: e.into(),
        })?;
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if entry.file_type().is_file() && !hidden {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

/// Raw lines of an article set with their location, for callers that build
/// offset indexes.
pub struct ArticleLines {
    files: Vec<PathBuf>,
    next_file: usize,
    current: Option<Box<dyn BufRead + Send>>,
    current_compressed: bool,
    offset: u64,
    buf: Vec<u8>,
}

/// A line and where it came from. `offset` is a byte offset into the file
/// (into the decompressed stream when `compressed`).
pub struct LineLocation<'a> {
    pub file_index: usize,
    pub offset: u64,
    pub compressed: bool,
    pub bytes: &'a [u8],
}

impl ArticleLines {
    pub fn open(path: &Path) -> Result<Self, DumpError> {
        Ok(ArticleLines {
            files: list_article_files(path)?,
            next_file: 0,
            current: None,
            current_compressed: false,
            offset: 0,
            buf: Vec::new(),
        })
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    /// Next non-blank line, or `None` at the end of the last file.
    pub fn next_line(&mut self) -> Result<Option<LineLocation<'_>>, DumpError> {
        loop {
            if self.current.is_none() {
                let Some(path) = self.files.get(self.next_file) else {
                    return Ok(None);
                };
                self.current_compressed = is_gzip(path)?;
                self.current = Some(open_input(path)?);
                self.next_file += 1;
                self.offset = 0;
            }
            let reader = self.current.as_mut().expect("opened above");
            self.buf.clear();
            let start = self.offset;
            let n = reader
                .read_until(b'\n', &mut self.buf)
                .map_err(|source| DumpError::File {
                    path: self.files[self.next_file - 1].clone(),
                    source,
                })?;
            if n == 0 {
                self.current = None;
                continue;
            }
            self.offset += n as u64;
            if self.buf.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            return Ok(Some(LineLocation {
                file_index: self.next_file - 1,
                offset: start,
                compressed: self.current_compressed,
                bytes: &self.buf,
            }));
        }
    }
}

fn is_gzip(path: &Path) -> Result<bool, DumpError> {
    use std::io::Read;
    let mut magic = [0u8; 2];
    let mut file = std::fs::File::open(path).map_err(|source| DumpError::File {
        path: path.to_owned(),
        source,
    })?;
    let n = file.read(&mut magic).map_err(|source| DumpError::File {
        path: path.to_owned(),
        source,
    })?;
    Ok(n == 2 && magic == [0x1f, 0x8b])
}

#[derive(Deserialize)]
#[serde(untagged)]
enum IdField {
    Num(u64),
    Str(String),
}

/// One wikiextractor JSON line: `{"id": "5", "title": "...", "text": "..."}`.
#[derive(Deserialize)]
pub struct ArticleLine {
    id: IdField,
    pub title: String,
    pub text: String,
}

impl ArticleLine {
    pub fn parse(bytes: &[u8]) -> Option<ArticleLine> {
        let line: ArticleLine = serde_json::from_slice(bytes).ok()?;
        line.page_id()?;
        Some(line)
    }

    pub fn page_id(&self) -> Option<u64> {
        match &self.id {
            IdField::Num(n) => Some(*n),
            IdField::Str(s) => s.trim().parse().ok(),
        }
    }

    pub fn into_article(self, lang: &str) -> RawArticle {
        RawArticle {
            page_id: self.page_id().expect("validated in parse"),
            title: self.title,
            text: self.text,
            lang: lang.to_owned(),
        }
    }
}

/// Streams [`RawArticle`]s from a file or directory of line-delimited JSON.
/// Files are visited in lexicographic order, lines in file order. Empty
/// texts are passed through; unparseable lines are counted and skipped.
pub struct ArticleReader {
    lines: ArticleLines,
    lang: String,
    tally: ParseTally,
}

impl ArticleReader {
    pub fn open(path: &Path, lang: &str) -> Result<Self, DumpError> {
        Ok(ArticleReader {
            lines: ArticleLines::open(path)?,
            lang: lang.to_owned(),
            tally: ParseTally::default(),
        })
    }

    pub fn tally(&self) -> &ParseTally {
        &self.tally
    }
}

impl Iterator for ArticleReader {
    type Item = Result<RawArticle, DumpError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next_line() {
                Ok(Some(line)) => line,
                Ok(None) => return None,
                Err(e) => return Some(Err(e)),
            };
            self.tally.tuples += 1;
            match ArticleLine::parse(line.bytes) {
                Some(parsed) => {
                    self.tally.records += 1;
                    return Some(Ok(parsed.into_article(&self.lang)));
                }
                None => self.tally.malformed += 1,
            }
        }
    }
}
