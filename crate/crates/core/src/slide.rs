//! Window batching over the concatenated context stream.
//!
//! The optimized policy never cuts a context: a window ends at the last
//! split id inside its raw `n`-token range and the next window starts right
//! after it. Since every context ends with the split id and is at most `n`
//! long, this is the same as greedily filling each window with whole
//! contexts, which is what [`OptimizedSlider`] does in one pass.
//!
//! The standard policy slices the stream into fixed `n`-token ranges.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SlideError {
    #[error("context {context} has {len} tokens, more than the window size {n}")]
    Oversize { context: u64, len: usize, n: usize },
    #[error("context {context} does not end with the split id")]
    MissingSplit { context: u64 },
    #[error("context {context} has a split id at position {position} before its end")]
    InteriorSplit { context: u64, position: usize },
    #[error("window size must be positive")]
    ZeroWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlideKind {
    Optimized,
    Standard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlidePolicy {
    pub kind: SlideKind,
    /// Window size; 0 means "use the packing budget".
    pub n_budget: usize,
    pub keep_final_partial: bool,
    pub discard_tails: bool,
}

impl Default for SlidePolicy {
    fn default() -> Self {
        SlidePolicy {
            kind: SlideKind::Optimized,
            n_budget: 0,
            keep_final_partial: true,
            discard_tails: false,
        }
    }
}

/// Where a window's tokens came from: context indexes in stream order and
/// token offsets inside the first and last of them (`last_end` exclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpan {
    pub first_context: u64,
    pub first_offset: u32,
    pub last_context: u64,
    pub last_end: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowShard {
    pub ids: Vec<u32>,
    /// Tokens of the raw `n`-range left out of this window and re-read by
    /// the next one (or discarded under `discard_tails`).
    pub dropped_from_raw_span: u32,
    pub source: SourceSpan,
    pub window_index: u64,
}

fn check_context(ids: &[u32], n: usize, split_id: u32, context: u64) -> Result<(), SlideError> {
    if ids.len() > n {
        return Err(SlideError::Oversize {
            context,
            len: ids.len(),
            n,
        });
    }
    match ids.split_last() {
        Some((&last, body)) if last == split_id => match body.iter().position(|&t| t == split_id) {
            Some(position) => Err(SlideError::InteriorSplit { context, position }),
            None => Ok(()),
        },
        _ => Err(SlideError::MissingSplit { context }),
    }
}

/// Streaming optimized batcher. Feed contexts with [`push`](Self::push) and
/// collect the last window with [`finish`](Self::finish).
pub struct OptimizedSlider {
    n: usize,
    split_id: u32,
    discard_tails: bool,
    buf: Vec<u32>,
    first_context: u64,
    last_len: u32,
    next_context: u64,
    next_window: u64,
    discarded_contexts: u64,
    discarded_tokens: u64,
}

impl OptimizedSlider {
    pub fn new(n: usize, split_id: u32, discard_tails: bool) -> Result<Self, SlideError> {
        if n == 0 {
            return Err(SlideError::ZeroWindow);
        }
        Ok(OptimizedSlider {
            n,
            split_id,
            discard_tails,
            buf: Vec::with_capacity(n),
            first_context: 0,
            last_len: 0,
            next_context: 0,
            next_window: 0,
            discarded_contexts: 0,
            discarded_tokens: 0,
        })
    }

    fn emit(&mut self, dropped: usize) -> WindowShard {
        let ids = std::mem::replace(&mut self.buf, Vec::with_capacity(self.n));
        let shard = WindowShard {
            ids,
            dropped_from_raw_span: dropped as u32,
            source: SourceSpan {
                first_context: self.first_context,
                first_offset: 0,
                last_context: self.next_context - 1,
                last_end: self.last_len,
            },
            window_index: self.next_window,
        };
        self.next_window += 1;
        shard
    }

    /// Adds one context; returns the window it closed, if any.
    pub fn push(&mut self, ctx: &[u32]) -> Result<Option<WindowShard>, SlideError> {
        let index = self.next_context;
        check_context(ctx, self.n, self.split_id, index)?;
        let mut closed = None;
        if !self.buf.is_empty() && self.buf.len() + ctx.len() > self.n {
            let dropped = self.n - self.buf.len();
            closed = Some(self.emit(dropped));
            if self.discard_tails {
                // The context straddling the raw boundary loses its head to
                // the closed window, so none of it survives.
                self.next_context += 1;
                self.discarded_contexts += 1;
                self.discarded_tokens += ctx.len() as u64;
                return Ok(closed);
            }
        }
        if self.buf.is_empty() {
            self.first_context = index;
        }
        self.buf.extend_from_slice(ctx);
        self.last_len = ctx.len() as u32;
        self.next_context += 1;
        Ok(closed)
    }

    pub fn finish(mut self) -> Option<WindowShard> {
        (!self.buf.is_empty()).then(|| self.emit(0))
    }

    pub fn discarded(&self) -> (u64, u64) {
        (self.discarded_contexts, self.discarded_tokens)
    }
}

pub fn slide_optimized<'a>(
    contexts: impl IntoIterator<Item = &'a [u32]>,
    n: usize,
    split_id: u32,
) -> Result<Vec<WindowShard>, SlideError> {
    let mut slider = OptimizedSlider::new(n, split_id, false)?;
    let mut out = Vec::new();
    for ctx in contexts {
        out.extend(slider.push(ctx)?);
    }
    out.extend(slider.finish());
    Ok(out)
}

/// Streaming fixed-stride batcher.
pub struct StandardSlider {
    n: usize,
    keep_final_partial: bool,
    buf: Vec<u32>,
    start: (u64, u32),
    last_token: (u64, u32),
    next_context: u64,
    next_window: u64,
}

impl StandardSlider {
    pub fn new(n: usize, keep_final_partial: bool) -> Result<Self, SlideError> {
        if n == 0 {
            return Err(SlideError::ZeroWindow);
        }
        Ok(StandardSlider {
            n,
            keep_final_partial,
            buf: Vec::with_capacity(n),
            start: (0, 0),
            last_token: (0, 0),
            next_context: 0,
            next_window: 0,
        })
    }

    fn emit(&mut self, last_context: u64, last_end: u32) -> WindowShard {
        let ids = std::mem::replace(&mut self.buf, Vec::with_capacity(self.n));
        let shard = WindowShard {
            ids,
            dropped_from_raw_span: 0,
            source: SourceSpan {
                first_context: self.start.0,
                first_offset: self.start.1,
                last_context,
                last_end,
            },
            window_index: self.next_window,
        };
        self.next_window += 1;
        shard
    }

    /// Adds one context; returns every window it completed.
    pub fn push(&mut self, ctx: &[u32]) -> Vec<WindowShard> {
        let index = self.next_context;
        self.next_context += 1;
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < ctx.len() {
            if self.buf.is_empty() {
                self.start = (index, pos as u32);
            }
            let take = (self.n - self.buf.len()).min(ctx.len() - pos);
            self.buf.extend_from_slice(&ctx[pos..pos + take]);
            pos += take;
            self.last_token = (index, pos as u32);
            if self.buf.len() == self.n {
                out.push(self.emit(index, pos as u32));
            }
        }
        out
    }

    pub fn finish(mut self) -> Option<WindowShard> {
        if self.buf.is_empty() || !self.keep_final_partial {
            return None;
        }
        let (last_context, last_end) = self.last_token;
        Some(self.emit(last_context, last_end))
    }
}

pub fn slide_standard<'a>(
    contexts: impl IntoIterator<Item = &'a [u32]>,
    n: usize,
    keep_final_partial: bool,
) -> Result<Vec<WindowShard>, SlideError> {
    let mut slider = StandardSlider::new(n, keep_final_partial)?;
    let mut out = Vec::new();
    for ctx in contexts {
        out.extend(slider.push(ctx));
    }
    out.extend(slider.finish());
    Ok(out)
}
