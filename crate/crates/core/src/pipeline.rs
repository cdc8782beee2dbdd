//! Stage orchestration. Every stage reads its inputs from disk (dumps,
//! article files, or artifacts of an earlier stage under the output
//! directory) and writes its own artifacts there, so each stage can run on
//! its own.
//!
//! Output files are written to a temporary sibling and renamed into place,
//! so a failed stage never leaves a half-written artifact behind.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime};

use chrono::{DateTime, SecondsFormat, Utc};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};
use tempfile::NamedTempFile;
use thiserror::Error;

use crate::align::{
    build_pair_map, join_indexed, read_pair_map, write_pair_map_to, AlignError, ArticleIndex, ArticlePair, JoinTally,
    PairId,
};
use crate::config::{check, ConfigError, Diagnostic, PipelineConfig};
use crate::export::{
    format_token_count, stats_of, validation_indices, ExportError, ManifestMeta, ShardReader, ShardWriter, Split,
    TokenStats,
};
use crate::ingest::{
    open_input, parse_langlinks_dump, parse_pages_dump, read_extracted_articles, tsv_field, DumpError, TsvRecord,
};
use crate::pack::{PackedContext, Packer};
use crate::retrieve::{
    build_augmented_pairs, make_provider, retrieve_all, CandidateCorpus, RetrievalError, RetrievalTally, TargetArticle,
    TitleMap, VectorIndex,
};
use crate::slide::{OptimizedSlider, SlideError, SlideKind, StandardSlider, WindowShard};
use crate::tokenize::{make_tokenizer, Tokenizer, TokenizerError, TokenizerKind};

pub const PAIRS_FILE: &str = "pairs.tsv";
pub const DUMPS_DIR: &str = "dumps";
pub const RETRIEVAL_FILE: &str = "retrieval.jsonl";
pub const PSEUDO_PAIRS_FILE: &str = "pseudo_pairs.jsonl";
pub const CONTEXTS_FILE: &str = "contexts.jsonl";
pub const CONTEXT_TEXT_FILE: &str = "contexts.text.jsonl";
pub const SLIDE_DIR: &str = "slide";
pub const WINDOW_LOG_FILE: &str = "windows.jsonl";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const STATS_FILE: &str = "stats.json";
pub const EXPORT_DIR: &str = "export";
pub const REPORT_FILE: &str = "run_report.jsonl";

const CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Align,
    Retrieve,
    Pack,
    Slide,
    Stats,
    Export,
    All,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Align => "align",
            Stage::Retrieve => "retrieve",
            Stage::Pack => "pack",
            Stage::Slide => "slide",
            Stage::Stats => "stats",
            Stage::Export => "export",
            Stage::All => "all",
        }
    }

    /// The concrete stages this one runs. Retrieval joins `all` only when
    /// configured.
    pub fn expand(self, cfg: &PipelineConfig) -> Vec<Stage> {
        match self {
            Stage::All => {
                let mut v = vec![Stage::Align];
                if cfg.retrieval.is_some() {
                    v.push(Stage::Retrieve);
                }
                v.extend([Stage::Pack, Stage::Slide, Stage::Stats, Stage::Export]);
                v
            }
            s => vec![s],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Also write each context's rendered text.
    pub emit_text: bool,
    /// Also write every parsed dump record as TSV under `dumps/`.
    pub dump_tsv: bool,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("input error in {stage}: {message}")]
    Input { stage: &'static str, message: String },
    #[error("{stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Input { .. } => 2,
            PipelineError::Stage { .. } => 3,
        }
    }
}

/// Stage-local failure; the runner attaches the stage name.
#[derive(Debug)]
enum Fail {
    Config(Diagnostic),
    Input(String),
    Stage(String),
}

impl Fail {
    fn into_error(self, stage: Stage, cfg_name: &str) -> PipelineError {
        let stage = stage.name();
        match self {
            Fail::Config(d) => PipelineError::Config(ConfigError {
                source_name: cfg_name.to_owned(),
                diagnostics: vec![d],
            }),
            Fail::Input(message) => PipelineError::Input { stage, message },
            Fail::Stage(message) => PipelineError::Stage { stage, message },
        }
    }
}

impl From<DumpError> for Fail {
    fn from(e: DumpError) -> Self {
        Fail::Input(e.to_string())
    }
}

impl From<AlignError> for Fail {
    fn from(e: AlignError) -> Self {
        Fail::Input(e.to_string())
    }
}

impl From<TokenizerError> for Fail {
    fn from(e: TokenizerError) -> Self {
        Fail::Input(e.to_string())
    }
}

impl From<RetrievalError> for Fail {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::CacheFormat { .. }
            | RetrievalError::Corpus { .. }
            | RetrievalError::Io { .. }
            | RetrievalError::Dump(_) => Fail::Input(e.to_string()),
            _ => Fail::Stage(e.to_string()),
        }
    }
}

impl From<ExportError> for Fail {
    fn from(e: ExportError) -> Self {
        match e {
            ExportError::Io { .. } | ExportError::ZeroShardSize => Fail::Stage(e.to_string()),
            _ => Fail::Input(e.to_string()),
        }
    }
}

impl From<io::Error> for Fail {
    fn from(e: io::Error) -> Self {
        Fail::Stage(e.to_string())
    }
}

/// Line-delimited JSON event log, truncated at the start of every run.
pub struct RunReport {
    out: BufWriter<File>,
    start: Instant,
}

impl RunReport {
    pub fn create(path: &Path) -> io::Result<Self> {
        Ok(RunReport {
            out: BufWriter::new(File::create(path)?),
            start: Instant::now(),
        })
    }

    pub fn event(&mut self, event: &str, fields: Value) -> io::Result<()> {
        let mut obj = Map::new();
        obj.insert("event".into(), event.into());
        obj.insert("t".into(), json!(round3(self.start.elapsed().as_secs_f64())));
        if let Value::Object(extra) = fields {
            obj.extend(extra);
        }
        serde_json::to_writer(&mut self.out, &obj)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

#[derive(Debug, Clone)]
pub struct StageSummary {
    pub stage: Stage,
    pub elapsed_secs: f64,
    pub tallies: Value,
    pub context_count: Option<u64>,
    pub window_count: Option<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub stages: Vec<StageSummary>,
    pub elapsed_secs: f64,
}

struct StageOutcome {
    tallies: Value,
    unit: &'static str,
    items: u64,
    tokens: Option<u64>,
    context_count: Option<u64>,
    window_count: Option<u64>,
}

impl StageOutcome {
    fn new(tallies: Value, unit: &'static str, items: u64) -> Self {
        StageOutcome {
            tallies,
            unit,
            items,
            tokens: None,
            context_count: None,
            window_count: None,
        }
    }
}

struct Cx<'a> {
    cfg: &'a PipelineConfig,
    opts: &'a RunOptions,
    out: &'a Path,
    created_at: String,
    digest: String,
}

impl Cx<'_> {
    fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// An artifact another stage must have produced.
    fn require_artifact(&self, name: &str, producer: Stage) -> Result<PathBuf, Fail> {
        let p = self.artifact(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Fail::Input(format!("{} is missing; run `{producer}` first", p.display())))
        }
    }

    fn slide_dir(&self, split: Split) -> PathBuf {
        self.out.join(SLIDE_DIR).join(split.name())
    }

    fn export_dir(&self, split: Split) -> PathBuf {
        self.out.join(EXPORT_DIR).join(split.name())
    }
}

fn require<'a>(p: &'a Option<PathBuf>, field: &str) -> Result<&'a Path, Fail> {
    let Some(p) = p.as_deref() else {
        return Err(Fail::Config(Diagnostic {
            field: format!("paths.{field}"),
            message: "required by this stage".into(),
        }));
    };
    if !p.exists() {
        return Err(Fail::Input(format!("{}: not found (paths.{field})", p.display())));
    }
    Ok(p)
}

/// Runs `stage` (or every stage for [`Stage::All`]) and logs events to
/// `run_report.jsonl` in the output directory.
pub fn run(stage: Stage, cfg: &PipelineConfig, opts: &RunOptions) -> Result<RunSummary, PipelineError> {
    run_named(stage, cfg, opts, "<config>")
}

/// Same as [`run`], naming the configuration source in diagnostics.
pub fn run_named(
    stage: Stage,
    cfg: &PipelineConfig,
    opts: &RunOptions,
    cfg_name: &str,
) -> Result<RunSummary, PipelineError> {
    let diagnostics = check(cfg);
    if !diagnostics.is_empty() {
        return Err(ConfigError {
            source_name: cfg_name.to_owned(),
            diagnostics,
        }
        .into());
    }
    let out = cfg.paths.output_dir.as_path();
    let setup = |e: io::Error| PipelineError::Stage {
        stage: stage.name(),
        message: format!("{}: {e}", out.display()),
    };
    fs::create_dir_all(out).map_err(setup)?;
    let mut report = RunReport::create(&out.join(REPORT_FILE)).map_err(setup)?;
    let cx = Cx {
        cfg,
        opts,
        out,
        created_at: resolve_created_at(cfg),
        digest: cfg.digest(),
    };
    report
        .event(
            "run_start",
            json!({
                "command": stage.name(),
                "config_digest": cx.digest,
                "language_l": cfg.language_l,
                "workers": rayon::current_num_threads(),
                "created_at": cx.created_at,
            }),
        )
        .map_err(setup)?;

    let started = Instant::now();
    let mut summary = RunSummary::default();
    for s in stage.expand(cfg) {
        let report_err = |e: io::Error| PipelineError::Stage {
            stage: s.name(),
            message: format!("run report: {e}"),
        };
        log::info!("stage {s}: starting");
        report.event("stage_start", json!({ "stage": s.name() })).map_err(report_err)?;
        let t = Instant::now();
        let result = run_stage(s, &cx);
        let elapsed = t.elapsed().as_secs_f64();
        match result {
            Ok(o) => {
                let rate = |n: u64| if elapsed > 0.0 { json!(round3(n as f64 / elapsed)) } else { Value::Null };
                let mut throughput = json!({ "unit": o.unit, "items": o.items, "items_per_sec": rate(o.items) });
                if let Some(tokens) = o.tokens {
                    throughput["tokens"] = json!(tokens);
                    throughput["tokens_per_sec"] = rate(tokens);
                }
                let mut ev = json!({
                    "stage": s.name(),
                    "elapsed_secs": round3(elapsed),
                    "tallies": &o.tallies,
                    "throughput": throughput,
                });
                if let Some(c) = o.context_count {
                    ev["context_count"] = json!(c);
                }
                if let Some(w) = o.window_count {
                    ev["window_count"] = json!(w);
                }
                report.event("stage_end", ev).map_err(report_err)?;
                log::info!("stage {s}: done in {elapsed:.2}s ({} {})", o.items, o.unit);
                summary.stages.push(StageSummary {
                    stage: s,
                    elapsed_secs: elapsed,
                    tallies: o.tallies,
                    context_count: o.context_count,
                    window_count: o.window_count,
                });
            }
            Err(f) => {
                let err = f.into_error(s, cfg_name);
                let _ = report.event(
                    "stage_failed",
                    json!({ "stage": s.name(), "elapsed_secs": round3(elapsed), "error": err.to_string() }),
                );
                let _ = report.event(
                    "run_end",
                    json!({
                        "status": "failed",
                        "exit_code": err.exit_code(),
                        "elapsed_secs": round3(started.elapsed().as_secs_f64()),
                    }),
                );
                return Err(err);
            }
        }
    }
    summary.elapsed_secs = started.elapsed().as_secs_f64();
    report
        .event(
            "run_end",
            json!({ "status": "ok", "exit_code": 0, "elapsed_secs": round3(summary.elapsed_secs) }),
        )
        .map_err(setup)?;
    Ok(summary)
}

fn run_stage(stage: Stage, cx: &Cx) -> Result<StageOutcome, Fail> {
    match stage {
        Stage::Align => stage_align(cx),
        Stage::Retrieve => stage_retrieve(cx),
        Stage::Pack => stage_pack(cx),
        Stage::Slide => stage_slide(cx),
        Stage::Stats => stage_stats(cx),
        Stage::Export => stage_export(cx),
        Stage::All => unreachable!("expanded by the runner"),
    }
}

/// Manifest timestamp: `SOURCE_DATE_EPOCH`, else the configured value, else
/// the newest modification time among the configured inputs. Never the
/// wall clock, so reruns over unchanged inputs rewrite identical bytes.
pub fn resolve_created_at(cfg: &PipelineConfig) -> String {
    let fmt = |t: DateTime<Utc>| t.to_rfc3339_opts(SecondsFormat::Secs, true);
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse::<i64>().ok())
        .and_then(|secs| DateTime::from_timestamp(secs, 0))
    {
        return fmt(t);
    }
    if let Some(at) = &cfg.export.created_at {
        return at.clone();
    }
    let p = &cfg.paths;
    let inputs = [
        &p.langlinks_en,
        &p.langlinks_l,
        &p.pages_en,
        &p.pages_l,
        &p.articles_en,
        &p.articles_l,
        &p.corpus,
        &cfg.tokenizer.vocab_source,
    ];
    let newest = inputs
        .into_iter()
        .flatten()
        .flat_map(|root| walkdir::WalkDir::new(root).into_iter().filter_map(Result::ok))
        .filter(|e| e.file_type().is_file())
        .filter_map(|e| e.metadata().ok()?.modified().ok())
        .max()
        .unwrap_or(SystemTime::UNIX_EPOCH);
    fmt(DateTime::<Utc>::from(newest))
}

/// Output file written to a temporary sibling and renamed on commit.
/// Dropping it uncommitted deletes the temporary.
struct Staged {
    out: BufWriter<NamedTempFile>,
    dest: PathBuf,
}

impl Staged {
    fn new(dest: &Path) -> Result<Self, Fail> {
        let dir = dest.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Fail::Stage(format!("{}: {e}", dir.display())))?;
        let tmp = NamedTempFile::new_in(dir).map_err(|e| Fail::Stage(format!("{}: {e}", dir.display())))?;
        Ok(Staged {
            out: BufWriter::with_capacity(1 << 20, tmp),
            dest: dest.to_owned(),
        })
    }

    fn commit(self) -> Result<(), Fail> {
        let fail = |e: io::Error, dest: &Path| Fail::Stage(format!("{}: {e}", dest.display()));
        let tmp = self.out.into_inner().map_err(|e| fail(e.into_error(), &self.dest))?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(tmp.path(), fs::Permissions::from_mode(0o644)).map_err(|e| fail(e, &self.dest))?;
        }
        tmp.persist(&self.dest).map_err(|e| fail(e.error, &self.dest))?;
        Ok(())
    }
}

impl Write for Staged {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.out.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

fn write_json_line<T: Serialize + ?Sized>(w: &mut impl Write, item: &T) -> io::Result<()> {
    serde_json::to_writer(&mut *w, item)?;
    w.write_all(b"\n")
}

/// Streams a JSON-lines file in chunks parsed on the rayon pool; `f` gets
/// the index of the chunk's first record and the records in file order.
/// Returns the record count.
fn for_each_json_chunk<T, F>(path: &Path, mut f: F) -> Result<u64, Fail>
where
    T: DeserializeOwned + Send,
    F: FnMut(u64, Vec<T>) -> Result<(), Fail>,
{
    let read_err = |e: io::Error| Fail::Input(format!("{}: {e}", path.display()));
    let file = File::open(path).map_err(read_err)?;
    let mut lines = BufReader::with_capacity(1 << 20, file).lines();
    let mut base = 0u64;
    let mut line_no = 0usize;
    loop {
        let mut batch: Vec<(usize, String)> = Vec::with_capacity(CHUNK);
        for line in lines.by_ref() {
            line_no += 1;
            let line = line.map_err(read_err)?;
            if !line.trim().is_empty() {
                batch.push((line_no, line));
                if batch.len() == CHUNK {
                    break;
                }
            }
        }
        if batch.is_empty() {
            return Ok(base);
        }
        let items = batch
            .par_iter()
            .map(|(n, l)| serde_json::from_str(l).map_err(|e| Fail::Input(format!("{}:{n}: {e}", path.display()))))
            .collect::<Result<Vec<T>, Fail>>()?;
        let len = items.len() as u64;
        f(base, items)?;
        base += len;
    }
}

fn count_records(path: &Path) -> Result<u64, Fail> {
    let read_err = |e: io::Error| Fail::Input(format!("{}: {e}", path.display()));
    let reader = BufReader::with_capacity(1 << 20, File::open(path).map_err(read_err)?);
    let mut n = 0;
    for line in reader.lines() {
        if !line.map_err(read_err)?.trim().is_empty() {
            n += 1;
        }
    }
    Ok(n)
}

/// Yields items until the first error, which is parked in `slot`.
fn until_error<'a, T, E>(
    it: impl Iterator<Item = Result<T, E>> + 'a,
    slot: &'a mut Option<E>,
) -> impl Iterator<Item = T> + 'a {
    it.map_while(move |r| r.map_err(|e| *slot = Some(e)).ok())
}

fn dump_error(path: &Path, e: DumpError) -> Fail {
    Fail::Input(format!("{}: {e}", path.display()))
}

fn stage_align(cx: &Cx) -> Result<StageOutcome, Fail> {
    let cfg = cx.cfg;
    let p = &cfg.paths;
    let ll_l = require(&p.langlinks_l, "langlinks_l")?;
    let ll_en = require(&p.langlinks_en, "langlinks_en")?;
    let pages_en = require(&p.pages_en, "pages_en")?;
    let pages_l = require(&p.pages_l, "pages_l")?;
    let dumped = if cx.opts.dump_tsv { Some(dump_tsv(cx)?) } else { None };

    let mut fwd = parse_langlinks_dump(open_input(ll_l)?, Some("en"));
    let mut rev = parse_langlinks_dump(open_input(ll_en)?, Some(&cfg.language_l));
    let mut pen = parse_pages_dump(open_input(pages_en)?, cfg.page_columns);
    let mut pl = parse_pages_dump(open_input(pages_l)?, cfg.page_columns);
    let mut errs: [Option<DumpError>; 4] = Default::default();
    let map = {
        let [e0, e1, e2, e3] = &mut errs;
        build_pair_map(
            until_error(fwd.by_ref(), e0),
            until_error(pen.by_ref(), e1),
            until_error(rev.by_ref(), e2),
            until_error(pl.by_ref(), e3),
            cfg.align,
        )
    };
    for (err, path) in errs.into_iter().zip([ll_l, pages_en, ll_en, pages_l]) {
        if let Some(e) = err {
            return Err(dump_error(path, e));
        }
    }

    let mut out = Staged::new(&cx.artifact(PAIRS_FILE))?;
    write_pair_map_to(&mut out, &map.pairs)?;
    out.commit()?;

    let tuples = fwd.tally().tuples + rev.tally().tuples + pen.tally().tuples + pl.tally().tuples;
    let mut tallies = json!({
        "align": map.tally,
        "parse": {
            "langlinks_l": fwd.tally(),
            "langlinks_en": rev.tally(),
            "pages_en": pen.tally(),
            "pages_l": pl.tally(),
        },
    });
    if let Some(d) = dumped {
        tallies["dump_tsv"] = d;
    }
    Ok(StageOutcome::new(tallies, "dump_tuples", tuples))
}

/// Writes every parsed record of every configured input as TSV.
fn dump_tsv(cx: &Cx) -> Result<Value, Fail> {
    fn write_all<T: TsvRecord>(
        records: impl Iterator<Item = Result<T, DumpError>>,
        src: &Path,
        dest: PathBuf,
    ) -> Result<u64, Fail> {
        let mut out = Staged::new(&dest)?;
        let mut n = 0;
        for r in records {
            r.map_err(|e| dump_error(src, e))?.write_tsv(&mut out)?;
            n += 1;
        }
        out.commit()?;
        Ok(n)
    }
    let p = &cx.cfg.paths;
    let dir = cx.artifact(DUMPS_DIR);
    let mut counts = Map::new();
    for (name, path) in [("langlinks_en", &p.langlinks_en), ("langlinks_l", &p.langlinks_l)] {
        if let Some(path) = path {
            let n = write_all(parse_langlinks_dump(open_input(path)?, None), path, dir.join(format!("{name}.tsv")))?;
            counts.insert(name.into(), n.into());
        }
    }
    for (name, path) in [("pages_en", &p.pages_en), ("pages_l", &p.pages_l)] {
        if let Some(path) = path {
            let records = parse_pages_dump(open_input(path)?, cx.cfg.page_columns);
            let n = write_all(records, path, dir.join(format!("{name}.tsv")))?;
            counts.insert(name.into(), n.into());
        }
    }
    for (name, path, lang) in [
        ("articles_en", &p.articles_en, "en"),
        ("articles_l", &p.articles_l, cx.cfg.language_l.as_str()),
    ] {
        if let Some(path) = path.as_deref().filter(|p| p.exists()) {
            let records = read_extracted_articles(path, lang)?;
            let n = write_all(records, path, dir.join(format!("{name}.tsv")))?;
            counts.insert(name.into(), n.into());
        }
    }
    Ok(Value::Object(counts))
}

fn stage_retrieve(cx: &Cx) -> Result<StageOutcome, Fail> {
    let cfg = cx.cfg;
    let Some(section) = &cfg.retrieval else {
        return Err(Fail::Config(Diagnostic {
            field: "retrieval".into(),
            message: "the retrieve stage needs a retrieval section".into(),
        }));
    };
    let params = section.params();
    let p = &cfg.paths;
    let pairs = read_pair_map(&cx.require_artifact(PAIRS_FILE, Stage::Align)?)?;
    let corpus_path = require(&p.corpus, "corpus")?;
    let articles_l = require(&p.articles_l, "articles_l")?;
    let ll_l = require(&p.langlinks_l, "langlinks_l")?;
    let pages_l = require(&p.pages_l, "pages_l")?;

    let mut errs: [Option<DumpError>; 2] = Default::default();
    let title_map = {
        let [e0, e1] = &mut errs;
        TitleMap::from_dumps(
            until_error(parse_pages_dump(open_input(pages_l)?, cfg.page_columns), e0),
            until_error(parse_langlinks_dump(open_input(ll_l)?, Some("en")), e1),
        )
    };
    for (err, path) in errs.into_iter().zip([pages_l, ll_l]) {
        if let Some(e) = err {
            return Err(dump_error(path, e));
        }
    }

    let ids: BTreeSet<u64> = pairs.iter().map(|p| p.id_l).collect();
    let wanted: HashSet<u64> = ids.iter().copied().collect();
    let idx_l = ArticleIndex::build(articles_l, &cfg.language_l, Some(&wanted))?;
    let corpus = CandidateCorpus::open(corpus_path)?;
    let provider = make_provider(&section.provider)?;
    let index = VectorIndex::from_corpus(&corpus, provider.as_ref())?;

    let mut records_out = Staged::new(&cx.artifact(RETRIEVAL_FILE))?;
    let mut pairs_out = Staged::new(&cx.artifact(PSEUDO_PAIRS_FILE))?;
    let mut tally = RetrievalTally::default();
    let mut missing_targets = 0u64;
    let ids: Vec<u64> = ids.into_iter().collect();
    for chunk in ids.chunks(CHUNK) {
        let fetched = chunk
            .par_iter()
            .map(|&id| idx_l.get(id))
            .collect::<Result<Vec<_>, AlignError>>()?;
        let mut targets = Vec::with_capacity(fetched.len());
        for a in fetched {
            match a {
                Some(a) if !a.title.trim().is_empty() && !a.text.trim().is_empty() => targets.push(TargetArticle {
                    page_id: a.page_id,
                    title: a.title,
                    text: a.text,
                    lang: cfg.language_l.clone(),
                }),
                _ => missing_targets += 1,
            }
        }
        let records = retrieve_all(&targets, &title_map, &index, provider.as_ref(), &params, &mut tally)?;
        for (target, record) in targets.iter().zip(&records) {
            write_json_line(&mut records_out, record)?;
            for pair in build_augmented_pairs(target, &record.results, &corpus, &mut tally) {
                write_json_line(&mut pairs_out, &pair)?;
            }
        }
    }
    records_out.commit()?;
    pairs_out.commit()?;

    let tallies = json!({
        "retrieval": tally,
        "targets_missing_text": missing_targets,
        "title_map_entries": title_map.len(),
        "corpus_docs": corpus.len(),
    });
    Ok(StageOutcome::new(tallies, "articles", tally.articles))
}

fn write_contexts(
    contexts: &[PackedContext],
    out: &mut Staged,
    text: Option<&mut Staged>,
    split_text: &str,
) -> io::Result<()> {
    for c in contexts {
        write_json_line(out, c)?;
    }
    if let Some(text) = text {
        for c in contexts {
            write_json_line(text, &c.text_record(split_text))?;
        }
    }
    Ok(())
}

fn stage_pack(cx: &Cx) -> Result<StageOutcome, Fail> {
    let cfg = cx.cfg;
    let p = &cfg.paths;
    let pairs = read_pair_map(&cx.require_artifact(PAIRS_FILE, Stage::Align)?)?;
    let articles_en = require(&p.articles_en, "articles_en")?;
    let articles_l = require(&p.articles_l, "articles_l")?;
    let pseudo = match cfg.retrieval {
        Some(_) => Some(cx.require_artifact(PSEUDO_PAIRS_FILE, Stage::Retrieve)?),
        None => None,
    };
    let tok = make_tokenizer(&cfg.tokenizer)?;
    let split_text = cfg.tokenizer.split_token_text.as_str();

    let wanted_en: HashSet<u64> = pairs.iter().map(|p| p.id_en).collect();
    let wanted_l: HashSet<u64> = pairs.iter().map(|p| p.id_l).collect();
    let idx_en = ArticleIndex::build(articles_en, "en", Some(&wanted_en))?;
    let idx_l = ArticleIndex::build(articles_l, &cfg.language_l, Some(&wanted_l))?;

    let mut out = Staged::new(&cx.artifact(CONTEXTS_FILE))?;
    let mut text = if cx.opts.emit_text {
        Some(Staged::new(&cx.artifact(CONTEXT_TEXT_FILE))?)
    } else {
        None
    };
    let mut packer = Packer::new(tok.as_ref(), &cfg.pack);
    let mut join = JoinTally {
        duplicate_articles_en: idx_en.duplicates(),
        duplicate_articles_l: idx_l.duplicates(),
        ..JoinTally::default()
    };
    let ordered: Vec<PairId> = pairs.into_iter().collect();
    for chunk in ordered.chunks(CHUNK) {
        let set: BTreeSet<PairId> = chunk.iter().copied().collect();
        let (joined, t) = join_indexed(&set, &idx_en, &idx_l, &cfg.language_l)?;
        join.pairs_joined += t.pairs_joined;
        join.pairs_missing_text += t.pairs_missing_text;
        join.pairs_blank_title += t.pairs_blank_title;
        let contexts = packer.pack_chunk(&joined);
        write_contexts(&contexts, &mut out, text.as_mut(), split_text)?;
    }
    let wiki_tally = packer.tally().clone();
    let mut pseudo_pairs = 0;
    if let Some(path) = pseudo {
        pseudo_pairs = for_each_json_chunk::<ArticlePair, _>(&path, |_, pairs| {
            let contexts = packer.pack_chunk(&pairs);
            write_contexts(&contexts, &mut out, text.as_mut(), split_text)?;
            Ok(())
        })?;
    }
    out.commit()?;
    if let Some(text) = text {
        text.commit()?;
    }

    let tally = packer.into_tally();
    let tallies = json!({
        "join": join,
        "pack": tally,
        "wikipedia_contexts": wiki_tally.contexts,
        "pseudo_pairs": pseudo_pairs,
        "malformed_article_lines": { "en": idx_en.malformed(), cfg.language_l.clone(): idx_l.malformed() },
    });
    let mut o = StageOutcome::new(tallies, "pairs", tally.pairs);
    o.tokens = Some(tally.tokens);
    o.context_count = Some(tally.contexts);
    Ok(o)
}

enum AnySlider {
    Optimized(OptimizedSlider),
    Standard(StandardSlider),
}

/// One split's window stream: slider, shard writer and provenance log.
struct Lane {
    split: Split,
    slider: Option<AnySlider>,
    writer: ShardWriter,
    log: Staged,
    stats: TokenStats,
    /// Global context index of each context fed to this lane.
    globals: Vec<u64>,
    windows: u64,
    tokens: u64,
    full_windows: u64,
}

fn relabel(e: SlideError, context: u64) -> SlideError {
    match e {
        SlideError::Oversize { len, n, .. } => SlideError::Oversize { context, len, n },
        SlideError::MissingSplit { .. } => SlideError::MissingSplit { context },
        SlideError::InteriorSplit { position, .. } => SlideError::InteriorSplit { context, position },
        SlideError::ZeroWindow => SlideError::ZeroWindow,
    }
}

impl Lane {
    fn new(cx: &Cx, split: Split) -> Result<Self, Fail> {
        let cfg = cx.cfg;
        let n = cfg.window_size();
        let slider = match cfg.slide.kind {
            SlideKind::Optimized => AnySlider::Optimized(
                OptimizedSlider::new(n, cfg.tokenizer.split_token_id, cfg.slide.discard_tails)
                    .map_err(|e| Fail::Stage(e.to_string()))?,
            ),
            SlideKind::Standard => AnySlider::Standard(
                StandardSlider::new(n, cfg.slide.keep_final_partial).map_err(|e| Fail::Stage(e.to_string()))?,
            ),
        };
        let dir = cx.slide_dir(split);
        Ok(Lane {
            split,
            slider: Some(slider),
            writer: ShardWriter::create(&dir, u64::MAX)?,
            log: Staged::new(&dir.join(WINDOW_LOG_FILE))?,
            stats: TokenStats::default(),
            globals: Vec::new(),
            windows: 0,
            tokens: 0,
            full_windows: 0,
        })
    }

    fn push(&mut self, global: u64, ctx: &PackedContext, ids: &[u32], n: usize) -> Result<(), Fail> {
        self.globals.push(global);
        let kept = match self.slider.as_mut().expect("lane not finished") {
            AnySlider::Optimized(s) => {
                let before = s.discarded().0;
                let closed = s.push(ids).map_err(|e| Fail::Stage(relabel(e, global).to_string()))?;
                let kept = s.discarded().0 == before;
                if let Some(w) = closed {
                    self.emit(w, n)?;
                }
                kept
            }
            AnySlider::Standard(s) => {
                for w in s.push(ids) {
                    self.emit(w, n)?;
                }
                true
            }
        };
        if kept {
            self.stats = std::mem::take(&mut self.stats).merge(stats_of(ctx));
        }
        Ok(())
    }

    fn emit(&mut self, w: WindowShard, n: usize) -> Result<(), Fail> {
        self.writer.write(&w.ids)?;
        let src = w.source;
        write_json_line(
            &mut self.log,
            &json!({
                "window": w.window_index,
                "tokens": w.ids.len(),
                "dropped_from_raw_span": w.dropped_from_raw_span,
                "first_context": self.globals[src.first_context as usize],
                "first_offset": src.first_offset,
                "last_context": self.globals[src.last_context as usize],
                "last_end": src.last_end,
            }),
        )?;
        self.windows += 1;
        self.tokens += w.ids.len() as u64;
        self.full_windows += u64::from(w.ids.len() == n);
        Ok(())
    }

    fn finish(mut self, cx: &Cx, n: usize) -> Result<Value, Fail> {
        let (last, discarded) = match self.slider.take().expect("lane finished once") {
            AnySlider::Optimized(s) => {
                let discarded = s.discarded();
                (s.finish(), discarded)
            }
            AnySlider::Standard(s) => (s.finish(), (0, 0)),
        };
        if let Some(w) = last {
            self.emit(w, n)?;
        }
        let cfg = cx.cfg;
        let manifest = self.writer.finish(ManifestMeta {
            config_digest: cx.digest.clone(),
            tokenizer_kind: cfg.tokenizer.kind.name().to_owned(),
            n_budget: n,
            per_language_tokens: self.stats.per_language.clone(),
            control_tokens: self.stats.control_tokens,
            seed: cfg.split.seed,
            split: self.split,
            created_at: cx.created_at.clone(),
        })?;
        self.log.commit()?;
        let fill = if self.windows == 0 {
            Value::Null
        } else {
            json!(round3(self.tokens as f64 / (self.windows as f64 * n as f64)))
        };
        Ok(json!({
            "contexts": self.globals.len(),
            "windows": manifest.window_count,
            "tokens": manifest.token_total,
            "full_windows": self.full_windows,
            "mean_fill": fill,
            "discarded_contexts": discarded.0,
            "discarded_tokens": discarded.1,
        }))
    }
}

fn stage_slide(cx: &Cx) -> Result<StageOutcome, Fail> {
    let cfg = cx.cfg;
    let path = cx.require_artifact(CONTEXTS_FILE, Stage::Pack)?;
    let tok = make_tokenizer(&cfg.tokenizer)?;
    let tok: &dyn Tokenizer = tok.as_ref();
    let n = cfg.window_size();

    // Whitespace ids are assigned by first occurrence, so the vocabulary is
    // fixed in stream order before encoding fans out.
    let count = if tok.kind() == TokenizerKind::Whitespace {
        for_each_json_chunk::<PackedContext, _>(&path, |_, contexts| {
            for c in &contexts {
                c.warm_up(tok);
            }
            Ok(())
        })?
    } else {
        count_records(&path)?
    };
    let validation = validation_indices(count as usize, &cfg.split);
    let is_validation = |i: u64| validation.binary_search(&(i as usize)).is_ok();

    let mut lanes = [Lane::new(cx, Split::Train)?, Lane::new(cx, Split::Validation)?];
    for_each_json_chunk::<PackedContext, _>(&path, |base, contexts| {
        let encoded: Vec<Vec<u32>> = contexts.par_iter().map(|c| c.encode(tok)).collect();
        for (k, (ctx, ids)) in contexts.iter().zip(encoded).enumerate() {
            let global = base + k as u64;
            if ids.len() != ctx.token_len as usize {
                return Err(Fail::Stage(format!(
                    "context {global} encodes to {} tokens but was packed at {}; the tokenizer changed since `pack`",
                    ids.len(),
                    ctx.token_len
                )));
            }
            lanes[usize::from(is_validation(global))].push(global, ctx, &ids, n)?;
        }
        Ok(())
    })?;
    let [train, validation] = lanes;
    let train = train.finish(cx, n)?;
    let validation = validation.finish(cx, n)?;

    let mut vocab_size = Value::Null;
    if let Some(vocab) = tok.vocabulary() {
        let mut out = Staged::new(&cx.artifact(VOCAB_FILE))?;
        writeln!(out, "{}\t{}", cfg.tokenizer.split_token_id, tsv_field(&cfg.tokenizer.split_token_text))?;
        for (token, id) in &vocab {
            writeln!(out, "{id}\t{}", tsv_field(token))?;
        }
        out.commit()?;
        vocab_size = json!(vocab.len() + 1);
    }

    let windows = train["windows"].as_u64().unwrap_or(0) + validation["windows"].as_u64().unwrap_or(0);
    let tokens = train["tokens"].as_u64().unwrap_or(0) + validation["tokens"].as_u64().unwrap_or(0);
    let tallies = json!({
        "policy": cfg.slide.kind,
        "window_size": n,
        "contexts": count,
        "train": train,
        "validation": validation,
        "vocab_size": vocab_size,
    });
    let mut o = StageOutcome::new(tallies, "contexts", count);
    o.tokens = Some(tokens);
    o.window_count = Some(windows);
    Ok(o)
}

fn stats_json(s: &TokenStats) -> Value {
    json!({
        "contexts": s.contexts,
        "per_language": s.per_language,
        "control_tokens": s.control_tokens,
        "total_tokens": s.total(),
    })
}

fn stage_stats(cx: &Cx) -> Result<StageOutcome, Fail> {
    let cfg = cx.cfg;
    let path = cx.require_artifact(CONTEXTS_FILE, Stage::Pack)?;
    let count = count_records(&path)?;
    let validation = validation_indices(count as usize, &cfg.split);
    let is_validation = |i: u64| validation.binary_search(&(i as usize)).is_ok();

    let mut train = TokenStats::default();
    let mut val = TokenStats::default();
    for_each_json_chunk::<PackedContext, _>(&path, |base, contexts| {
        let (t, v) = contexts
            .par_iter()
            .enumerate()
            .map(|(k, c)| {
                let s = stats_of(c);
                if is_validation(base + k as u64) {
                    (TokenStats::default(), s)
                } else {
                    (s, TokenStats::default())
                }
            })
            .reduce(
                || (TokenStats::default(), TokenStats::default()),
                |(a, b), (c, d)| (a.merge(c), b.merge(d)),
            );
        train = std::mem::take(&mut train).merge(t);
        val = std::mem::take(&mut val).merge(v);
        Ok(())
    })?;
    let all = train.clone().merge(val.clone());

    let table: Vec<Value> = all
        .table_rows(&cfg.language_l)
        .into_iter()
        .map(|(source, language, tokens)| {
            json!({
                "source": source,
                "language": language,
                "tokens": tokens,
                "display": format_token_count(tokens),
            })
        })
        .collect();
    let mut doc = stats_json(&all);
    doc["language_l"] = json!(cfg.language_l);
    doc["table"] = json!(table);
    doc["by_source"] = json!(all.by_source);
    doc["splits"] = json!({ "train": stats_json(&train), "validation": stats_json(&val) });

    let mut out = Staged::new(&cx.artifact(STATS_FILE))?;
    serde_json::to_writer_pretty(&mut out, &doc).map_err(io::Error::from)?;
    out.write_all(b"\n")?;
    out.commit()?;

    let mut o = StageOutcome::new(stats_json(&all), "contexts", count);
    o.tokens = Some(all.total());
    o.context_count = Some(count);
    Ok(o)
}

fn stage_export(cx: &Cx) -> Result<StageOutcome, Fail> {
    let cfg = cx.cfg;
    let mut tallies = Map::new();
    let mut windows = 0;
    let mut tokens = 0;
    for split in [Split::Train, Split::Validation] {
        let src = cx.slide_dir(split);
        if !src.exists() {
            return Err(Fail::Input(format!("{} is missing; run `slide` first", src.display())));
        }
        let reader = ShardReader::open(&src)?;
        let m = reader.manifest().clone();
        if m.config_digest != cx.digest {
            log::warn!(
                "{}: windows were produced under config digest {}, current is {}",
                src.display(),
                m.config_digest,
                cx.digest
            );
        }
        let mut writer = ShardWriter::create(&cx.export_dir(split), cfg.export.shard_max_bytes)?;
        for ids in reader {
            writer.write(&ids?)?;
        }
        let manifest = writer.finish(ManifestMeta {
            config_digest: m.config_digest,
            tokenizer_kind: m.tokenizer_kind,
            n_budget: m.n_budget,
            per_language_tokens: m.per_language_tokens,
            control_tokens: m.control_tokens,
            seed: m.seed,
            split,
            created_at: cx.created_at.clone(),
        })?;
        windows += manifest.window_count;
        tokens += manifest.token_total;
        tallies.insert(
            split.name().into(),
            json!({
                "windows": manifest.window_count,
                "tokens": manifest.token_total,
                "shards": manifest.shards.len(),
            }),
        );
    }
    let vocab = cx.artifact(VOCAB_FILE);
    if vocab.exists() {
        let mut out = Staged::new(&cx.out.join(EXPORT_DIR).join(VOCAB_FILE))?;
        io::copy(&mut File::open(&vocab).map_err(|e| Fail::Input(format!("{}: {e}", vocab.display())))?, &mut out)?;
        out.commit()?;
    }
    let mut o = StageOutcome::new(Value::Object(tallies), "windows", windows);
    o.tokens = Some(tokens);
    o.window_count = Some(windows);
    Ok(o)
}
