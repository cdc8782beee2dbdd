//! Pipeline configuration: one JSON document, optionally patched by dotted
//! `field.path=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::align::AlignFilter;
use crate::export::SplitConfig;
use crate::ingest::PageColumns;
use crate::pack::PackConfig;
use crate::retrieve::{ProviderConfig, RetrievalConfig};
use crate::slide::SlidePolicy;
use crate::tokenize::{TokenizerKind, TokenizerSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// English wiki `langlinks` dump (links en -> L).
    pub langlinks_en: Option<PathBuf>,
    /// Target wiki `langlinks` dump (links L -> en).
    pub langlinks_l: Option<PathBuf>,
    pub pages_en: Option<PathBuf>,
    pub pages_l: Option<PathBuf>,
    pub articles_en: Option<PathBuf>,
    pub articles_l: Option<PathBuf>,
    /// Candidate web corpus, `{"id", "text"}` lines.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub threshold: f64,
    pub max_results: usize,
    pub candidate_pool_k: usize,
    pub provider: ProviderConfig,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        let d = RetrievalConfig::default();
        RetrievalSection {
            threshold: d.threshold,
            max_results: d.max_results,
            candidate_pool_k: d.candidate_pool_k,
            provider: ProviderConfig::default(),
        }
    }
}

impl RetrievalSection {
    pub fn params(&self) -> RetrievalConfig {
        RetrievalConfig {
            threshold: self.threshold,
            max_results: self.max_results,
            candidate_pool_k: self.candidate_pool_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    pub shard_max_bytes: u64,
    /// Fixed manifest timestamp (RFC 3339).
    pub created_at: Option<String>,
}

impl Default for ExportSection {
    fn default() -> Self {
        ExportSection {
            shard_max_bytes: 256 << 20,
            created_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub language_l: String,
    pub paths: Paths,
    #[serde(default)]
    pub tokenizer: TokenizerSpec,
    #[serde(default)]
    pub pack: PackConfig,
    #[serde(default)]
    pub slide: SlidePolicy,
    #[serde(default)]
    pub retrieval: Option<RetrievalSection>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub align: AlignFilter,
    #[serde(default)]
    pub page_columns: PageColumns,
    #[serde(default)]
    pub export: ExportSection,
}

impl PipelineConfig {
    /// Window size used by sliding: the slide budget, or the packing budget
    /// when unset.
    pub fn window_size(&self) -> usize {
        if self.slide.n_budget == 0 {
            self.pack.n_budget
        } else {
            self.slide.n_budget
        }
    }

    /// SHA-256 over the canonical JSON of every setting that affects
    /// outputs. Paths and the manifest timestamp are left out.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            map.remove("paths");
            if let Some(Value::Object(export)) = map.get_mut("export") {
                export.remove("created_at");
            }
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        format!("{:x}", Sha256::digest(canonical.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub source_name: String,
    pub diagnostics: Vec<Diagnostic>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration {}", self.source_name)?;
        for d in &self.diagnostics {
            write!(f, "\n  {d}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

fn diag(field: &str, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        field: field.to_owned(),
        message: message.into(),
    }
}

/// A dotted override such as `pack.n_budget=2048`. The value is read as
/// JSON when it parses, as a plain string otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

impl std::str::FromStr for Override {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (path, raw) = s
            .split_once('=')
            .ok_or_else(|| format!("override {s:?} is not of the form field.path=value"))?;
        let path: Vec<String> = path.trim().split('.').map(str::to_owned).collect();
        if path.iter().any(String::is_empty) {
            return Err(format!("override {s:?} has an empty field name"));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
        Ok(Override { path, value })
    }
}

impl Override {
    pub fn new(path: &str, value: Value) -> Self {
        Override {
            path: path.split('.').map(str::to_owned).collect(),
            value,
        }
    }

    fn apply(&self, root: &mut Value) -> Result<(), Diagnostic> {
        let field = self.path.join(".");
        let mut node = root;
        for (i, key) in self.path.iter().enumerate() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            }
            let Value::Object(map) = node else {
                return Err(diag(&self.path[..i].join("."), "is not an object"));
            };
            if i + 1 == self.path.len() {
                map.insert(key.clone(), self.value.clone());
                return Ok(());
            }
            node = map.entry(key.clone()).or_insert(Value::Null);
        }
        Err(diag(&field, "empty override"))
    }
}

/// Parses `text`, applies the overrides in order and validates the result.
pub fn parse_config(text: &str, source_name: &str, overrides: &[Override]) -> Result<PipelineConfig, ConfigError> {
    let fail = |diagnostics| ConfigError {
        source_name: source_name.to_owned(),
        diagnostics,
    };
    let mut value: Value = serde_json::from_str(text).map_err(|e| {
        fail(vec![diag(
            "<document>",
            format!("not valid JSON at line {} column {}: {e}", e.line(), e.column()),
        )])
    })?;
    for o in overrides {
        o.apply(&mut value).map_err(|d| fail(vec![d]))?;
    }
    let cfg: PipelineConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "<document>".to_owned() } else { path };
        fail(vec![diag(&field, e.into_inner().to_string())])
    })?;
    let diagnostics = check(&cfg);
    if diagnostics.is_empty() {
        Ok(cfg)
    } else {
        Err(fail(diagnostics))
    }
}

pub fn load_config(path: &Path, overrides: &[Override]) -> Result<PipelineConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        source_name: path.display().to_string(),
        diagnostics: vec![diag("<file>", format!("cannot read {}: {e}", path.display()))],
    })?;
    parse_config(&text, &path.display().to_string(), overrides)
}

/// Structural and cross-field checks. Never touches the filesystem or the
/// network.
pub fn check(cfg: &PipelineConfig) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let lang = cfg.language_l.as_str();
    if lang.is_empty() || lang == "en" || !lang.chars().all(|c| c.is_ascii_lowercase() || c == '-' || c == '_') {
        out.push(diag(
            "language_l",
            format!("{lang:?} must be a lowercase wiki code other than \"en\""),
        ));
    }
    if cfg.pack.n_budget < PackConfig::MIN_BUDGET {
        out.push(diag(
            "pack.n_budget",
            format!("{} is below the minimum of {}", cfg.pack.n_budget, PackConfig::MIN_BUDGET),
        ));
    }
    if cfg.slide.n_budget != 0 && cfg.slide.n_budget != cfg.pack.n_budget {
        out.push(diag(
            "slide.n_budget",
            format!(
                "slide.n_budget={} differs from pack.n_budget={}; windows must match the packing budget",
                cfg.slide.n_budget, cfg.pack.n_budget
            ),
        ));
    }
    if cfg.tokenizer.kind == TokenizerKind::External && cfg.tokenizer.vocab_source.is_none() {
        out.push(diag("tokenizer.vocab_source", "required for an external tokenizer"));
    }
    if cfg.tokenizer.split_token_text.is_empty() {
        out.push(diag("tokenizer.split_token_text", "must not be empty"));
    }
    if cfg.tokenizer.kind == TokenizerKind::Byte && (1..=256).contains(&cfg.tokenizer.split_token_id) {
        out.push(diag("tokenizer.split_token_id", "collides with byte ids 1..=256"));
    }
    if cfg.export.shard_max_bytes == 0 {
        out.push(diag("export.shard_max_bytes", "must be positive"));
    }
    if let Some(at) = &cfg.export.created_at {
        if chrono::DateTime::parse_from_rfc3339(at).is_err() {
            out.push(diag("export.created_at", format!("{at:?} is not an RFC 3339 timestamp")));
        }
    }
    if let Some(r) = &cfg.retrieval {
        if !(0.0..=1.0).contains(&r.threshold) {
            out.push(diag("retrieval.threshold", format!("{} is outside [0, 1]", r.threshold)));
        }
        if r.max_results == 0 {
            out.push(diag("retrieval.max_results", "must be at least 1"));
        }
        if r.candidate_pool_k == 0 {
            out.push(diag("retrieval.candidate_pool_k", "must be at least 1"));
        }
        if cfg.paths.corpus.is_none() {
            out.push(diag("paths.corpus", "required when retrieval is configured"));
        }
        match &r.provider {
            ProviderConfig::Mock { dim, .. } if *dim == 0 => {
                out.push(diag("retrieval.provider.dim", "must be positive"));
            }
            ProviderConfig::Wire(w) if w.endpoint.is_empty() => {
                out.push(diag("retrieval.provider.endpoint", "must not be empty"));
            }
            ProviderConfig::Wire(w) if w.batch_size == 0 => {
                out.push(diag("retrieval.provider.batch_size", "must be positive"));
            }
            _ => {}
        }
    }
    out
}

/// Configured input paths that do not exist on disk.
pub fn check_paths(cfg: &PipelineConfig) -> Vec<Diagnostic> {
    let p = &cfg.paths;
    let inputs = [
        ("paths.langlinks_en", &p.langlinks_en),
        ("paths.langlinks_l", &p.langlinks_l),
        ("paths.pages_en", &p.pages_en),
        ("paths.pages_l", &p.pages_l),
        ("paths.articles_en", &p.articles_en),
        ("paths.articles_l", &p.articles_l),
        ("paths.corpus", &p.corpus),
        ("tokenizer.vocab_source", &cfg.tokenizer.vocab_source),
    ];
    inputs
        .into_iter()
        .filter_map(|(field, path)| {
            let path = path.as_deref()?;
            (!path.exists()).then(|| diag(field, format!("{} does not exist", path.display())))
        })
        .collect()
}
