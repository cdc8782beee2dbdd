//! Streaming tuple scanner for MediaWiki SQL dumps.
//!
//! Dumps produced by `mysqldump` consist of comments, a `CREATE TABLE`
//! statement and a sequence of extended inserts of the form
//! `INSERT INTO `table` VALUES (..),(..),..;`. The scanner never buffers more
//! than the tuple currently being lexed, so memory use is independent of the
//! dump size.

use std::io::BufRead;

use super::{DumpError, ParseTally};

/// A single column value inside a dump tuple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SqlValue {
    Null,
    /// Unquoted literal (numbers, mostly). Kept as text.
    Bare(String),
    /// Quoted string literal with escapes already resolved.
    Str(String),
}

impl SqlValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            SqlValue::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_u64(&self) -> Option<u64> {
        match self {
            SqlValue::Bare(s) => s.parse().ok(),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            SqlValue::Bare(s) => s.parse().ok(),
            _ => None,
        }
    }

    /// MySQL booleans are stored as tinyint.
    pub fn as_bool(&self) -> Option<bool> {
        self.as_i64().map(|v| v != 0)
    }
}

/// Incremental matcher for a fixed keyword (KMP over a tiny needle).
struct Needle {
    pattern: &'static [u8],
    failure: Vec<usize>,
    matched: usize,
}

impl Needle {
    fn new(pattern: &'static [u8]) -> Self {
        let mut failure = vec![0; pattern.len()];
        let mut k = 0;
        for i in 1..pattern.len() {
            while k > 0 && pattern[i] != pattern[k] {
                k = failure[k - 1];
            }
            if pattern[i] == pattern[k] {
                k += 1;
            }
            failure[i] = k;
        }
        Needle {
            pattern,
            failure,
            matched: 0,
        }
    }

    /// Feeds one byte; returns true when the full keyword has just been seen.
    fn feed(&mut self, b: u8) -> bool {
        while self.matched > 0 && self.pattern[self.matched] != b {
            self.matched = self.failure[self.matched - 1];
        }
        if self.pattern[self.matched] == b {
            self.matched += 1;
        }
        if self.matched == self.pattern.len() {
            self.matched = 0;
            true
        } else {
            false
        }
    }

    fn reset(&mut self) {
        self.matched = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    SeekInsert,
    SeekValues,
    BetweenTuples,
    FieldStart,
    Bare,
    Quoted,
    QuotedEscape,
    /// Saw a quote inside a string: either the end or the first half of `''`.
    QuoteOrDouble,
    AfterField,
}

/// Byte-level lexer state, kept apart from the reader so a filled buffer can
/// be walked without re-borrowing.
struct Lexer {
    state: State,
    insert: Needle,
    values: Needle,
    offset: u64,
    fields: Vec<SqlValue>,
    field: Vec<u8>,
    tuple_bad: bool,
    peak_field_bytes: usize,
    tally: ParseTally,
}

impl Lexer {
    fn finish_field(&mut self, quoted: bool) {
        self.peak_field_bytes = self.peak_field_bytes.max(self.field.len());
        let value = if quoted {
            match String::from_utf8(std::mem::take(&mut self.field)) {
                Ok(s) => SqlValue::Str(s),
                Err(_) => {
                    self.tuple_bad = true;
                    SqlValue::Null
                }
            }
        } else {
            let value = match std::str::from_utf8(&self.field).map(str::trim) {
                Ok("NULL") => SqlValue::Null,
                Ok(s) if !s.is_empty() => SqlValue::Bare(s.to_owned()),
                _ => {
                    self.tuple_bad = true;
                    SqlValue::Null
                }
            };
            self.field.clear();
            value
        };
        self.fields.push(value);
    }

    /// Advances by one byte. Returns true when a tuple has been closed
    /// (well-formed or not).
    fn step(&mut self, b: u8) -> bool {
        match self.state {
            State::SeekInsert => {
                if self.insert.feed(b) {
                    self.values.reset();
                    self.state = State::SeekValues;
                }
            }
            State::SeekValues => {
                if self.values.feed(b) {
                    self.state = State::BetweenTuples;
                } else if b == b';' {
                    self.state = State::SeekInsert;
                }
            }
            State::BetweenTuples => match b {
                b'(' => {
                    self.fields.clear();
                    self.field.clear();
                    self.tuple_bad = false;
                    self.state = State::FieldStart;
                }
                b',' | b' ' | b'\n' | b'\r' | b'\t' => {}
                b';' => self.state = State::SeekInsert,
                _ => {
                    // Garbage between tuples: abandon the statement.
                    self.tally.malformed += 1;
                    self.insert.reset();
                    self.state = State::SeekInsert;
                }
            },
            State::FieldStart => match b {
                b'\'' => self.state = State::Quoted,
                b' ' | b'\n' | b'\r' | b'\t' => {}
                b',' => {
                    self.tuple_bad = true;
                    self.fields.push(SqlValue::Null);
                }
                b')' => {
                    // `()` or a trailing comma.
                    self.tuple_bad = true;
                    return self.close_tuple();
                }
                _ => {
                    self.field.push(b);
                    self.state = State::Bare;
                }
            },
            State::Bare => match b {
                b',' => {
                    self.finish_field(false);
                    self.state = State::FieldStart;
                }
                b')' => {
                    self.finish_field(false);
                    return self.close_tuple();
                }
                b'\'' => {
                    self.tuple_bad = true;
                    self.field.clear();
                    self.state = State::Quoted;
                }
                _ => self.field.push(b),
            },
            State::Quoted => match b {
                b'\\' => self.state = State::QuotedEscape,
                b'\'' => self.state = State::QuoteOrDouble,
                _ => self.field.push(b),
            },
            State::QuotedEscape => {
                self.field.push(match b {
                    b'0' => 0,
                    b'b' => 0x08,
                    b'n' => b'\n',
                    b'r' => b'\r',
                    b't' => b'\t',
                    b'Z' => 0x1a,
                    other => other,
                });
                self.state = State::Quoted;
            }
            State::QuoteOrDouble => {
                if b == b'\'' {
                    self.field.push(b'\'');
                    self.state = State::Quoted;
                } else {
                    self.finish_field(true);
                    self.state = State::AfterField;
                    return self.after_field(b);
                }
            }
            State::AfterField => return self.after_field(b),
        }
        false
    }

    fn after_field(&mut self, b: u8) -> bool {
        match b {
            b',' => self.state = State::FieldStart,
            b')' => return self.close_tuple(),
            b' ' | b'\n' | b'\r' | b'\t' => {}
            _ => self.tuple_bad = true,
        }
        false
    }

    fn close_tuple(&mut self) -> bool {
        self.state = State::BetweenTuples;
        true
    }
}

/// Iterator over the raw tuples of every `INSERT` statement in a dump.
///
/// Malformed tuples are skipped and counted in [`ParseTally::malformed`]. A
/// stream that ends inside a statement yields one final
/// [`DumpError::Truncated`] after every complete tuple has been produced.
pub struct SqlTuples<R> {
    reader: R,
    lexer: Lexer,
    finished: bool,
}

impl<R: BufRead> SqlTuples<R> {
    pub fn new(reader: R) -> Self {
        SqlTuples {
            reader,
            lexer: Lexer {
                state: State::SeekInsert,
                insert: Needle::new(b"INSERT INTO"),
                values: Needle::new(b"VALUES"),
                offset: 0,
                fields: Vec::new(),
                field: Vec::new(),
                tuple_bad: false,
                peak_field_bytes: 0,
                tally: ParseTally::default(),
            },
            finished: false,
        }
    }

    pub fn tally(&self) -> &ParseTally {
        &self.lexer.tally
    }

    pub(crate) fn tally_mut(&mut self) -> &mut ParseTally {
        &mut self.lexer.tally
    }

    /// Largest number of bytes held for a single field so far.
    pub fn peak_field_bytes(&self) -> usize {
        self.lexer.peak_field_bytes
    }

    /// Bytes consumed from the underlying reader.
    pub fn offset(&self) -> u64 {
        self.lexer.offset
    }
}

impl<R: BufRead> Iterator for SqlTuples<R> {
    type Item = Result<Vec<SqlValue>, DumpError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        loop {
            let buf = match self.reader.fill_buf() {
                Ok(buf) => buf,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
                Err(e) => {
                    self.finished = true;
                    return Some(Err(DumpError::Io(e)));
                }
            };
            if buf.is_empty() {
                self.finished = true;
                return match self.lexer.state {
                    State::SeekInsert => None,
                    _ => Some(Err(DumpError::Truncated {
                        offset: self.lexer.offset,
                    })),
                };
            }
            let mut consumed = 0;
            let mut closed = false;
            for &b in buf {
                consumed += 1;
                if self.lexer.step(b) {
                    closed = true;
                    break;
                }
            }
            self.lexer.offset += consumed as u64;
            self.reader.consume(consumed);
            if closed {
                let lexer = &mut self.lexer;
                lexer.tally.tuples += 1;
                if lexer.tuple_bad {
                    lexer.tally.malformed += 1;
                    continue;
                }
                return Some(Ok(std::mem::take(&mut lexer.fields)));
            }
        }
    }
}
