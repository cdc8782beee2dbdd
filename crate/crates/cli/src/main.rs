use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use crossctx::config::{check_paths, load_config, ConfigError, Override};
use crossctx::pipeline::{self, PipelineError, RunOptions, RunSummary, Stage};
use crossctx::synth::{write_candidate_corpus, write_synthetic_corpus, SynthSpec};

/// Builds cross-lingual in-context pretraining data from Wikipedia dumps.
#[derive(Parser, Debug)]
#[command(name = "crossctx", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the page-id pair map from langlinks and page dumps.
    Align(RunArgs),
    /// Retrieve web documents for target-language articles.
    Retrieve(RunArgs),
    /// Pack article pairs into contexts.
    Pack(RunArgs),
    /// Encode contexts and batch them into windows.
    Slide(RunArgs),
    /// Write per-language token statistics.
    Stats(RunArgs),
    /// Write the final shards and manifests.
    Export(RunArgs),
    /// Run every stage in order.
    All(RunArgs),
    /// Check a configuration file without running anything.
    Validate(ConfigArgs),
    /// Write a synthetic dump set and a matching configuration.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Pipeline configuration (JSON).
    #[arg(long, short)]
    config: PathBuf,

    /// Override a configuration field, e.g. `--set pack.n_budget=2048`.
    #[arg(long = "set", value_name = "FIELD=VALUE")]
    overrides: Vec<Override>,

    /// Seed for both packing and the validation split, unless either is set
    /// with `--set`.
    #[arg(long)]
    seed: Option<u64>,

    /// Drop the context that straddles each window boundary.
    #[arg(long)]
    discard_tails: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,

    /// Also write each context's rendered text to contexts.text.jsonl.
    #[arg(long)]
    emit_text: bool,

    /// Also write every parsed dump record as TSV under dumps/.
    #[arg(long)]
    dump_tsv: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Directory for the generated inputs, config.json and outputs.
    #[arg(long)]
    out: PathBuf,

    #[arg(long, default_value_t = 1000)]
    pairs: usize,

    #[arg(long, default_value = "xx")]
    lang: String,

    #[arg(long, default_value_t = 1)]
    paragraphs_min: usize,

    #[arg(long, default_value_t = 6)]
    paragraphs_max: usize,

    #[arg(long, default_value_t = 3)]
    words_min: usize,

    #[arg(long, default_value_t = 40)]
    words_max: usize,

    #[arg(long, default_value_t = 1)]
    seed: u64,

    /// Also write a candidate web corpus of this many documents and enable
    /// retrieval with the mock embedder.
    #[arg(long)]
    corpus_docs: Option<usize>,
}

impl ConfigArgs {
    /// Flag-derived overrides first, so explicit `--set` values win.
    fn overrides(&self) -> Vec<Override> {
        let mut out = Vec::new();
        if let Some(seed) = self.seed {
            out.push(Override::new("pack.seed", seed.into()));
            out.push(Override::new("split.seed", seed.into()));
        }
        if self.discard_tails {
            out.push(Override::new("slide.discard_tails", true.into()));
        }
        out.extend(self.overrides.iter().cloned());
        out
    }

    fn load(&self) -> Result<crossctx::config::PipelineConfig, ConfigError> {
        load_config(&self.config, &self.overrides())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .init();

    let (stage, args) = match cli.command {
        Command::Align(a) => (Stage::Align, a),
        Command::Retrieve(a) => (Stage::Retrieve, a),
        Command::Pack(a) => (Stage::Pack, a),
        Command::Slide(a) => (Stage::Slide, a),
        Command::Stats(a) => (Stage::Stats, a),
        Command::Export(a) => (Stage::Export, a),
        Command::All(a) => (Stage::All, a),
        Command::Validate(a) => return validate(&a),
        Command::Synth(a) => {
            return match synth(&a) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(3)
                }
            }
        }
    };

    let cfg = match args.config.load() {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let opts = RunOptions {
        emit_text: args.emit_text,
        dump_tsv: args.dump_tsv,
    };
    let name = args.config.config.display().to_string();
    let result = match cli.workers {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| pipeline::run_named(stage, &cfg, &opts, &name)),
            Err(e) => {
                eprintln!("error: cannot start {n} workers: {e}");
                return ExitCode::from(3);
            }
        },
        None => pipeline::run_named(stage, &cfg, &opts, &name),
    };
    match result {
        Ok(summary) => {
            print_summary(&summary, &cfg.paths.output_dir);
            ExitCode::SUCCESS
        }
        Err(e) => report_failure(&e),
    }
}

fn report_failure(e: &PipelineError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn print_summary(summary: &RunSummary, out: &Path) {
    for s in &summary.stages {
        let mut line = format!("{:<8} {:>8.2}s", s.stage.name(), s.elapsed_secs);
        if let Some(c) = s.context_count {
            line.push_str(&format!("  contexts={c}"));
        }
        if let Some(w) = s.window_count {
            line.push_str(&format!("  windows={w}"));
        }
        println!("{line}");
    }
    println!("report: {}", out.join(pipeline::REPORT_FILE).display());
}

fn validate(args: &ConfigArgs) -> ExitCode {
    let cfg = match args.load() {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let missing = check_paths(&cfg);
    if !missing.is_empty() {
        let e = ConfigError {
            source_name: args.config.display().to_string(),
            diagnostics: missing,
        };
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    println!("{}: ok (digest {})", args.config.display(), cfg.digest());
    ExitCode::SUCCESS
}

fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let spec = SynthSpec {
        pairs: args.pairs,
        lang_l: args.lang.clone(),
        paragraphs_min: args.paragraphs_min,
        paragraphs_max: args.paragraphs_max,
        words_min: args.words_min,
        words_max: args.words_max,
        seed: args.seed,
        ..SynthSpec::default()
    };
    let input = args.out.join("input");
    let corpus = write_synthetic_corpus(&input, &spec).with_context(|| format!("writing {}", input.display()))?;
    let mut cfg = corpus.config_value(&args.lang, &args.out.join("output"));
    if let Some(docs) = args.corpus_docs {
        let path = input.join("web.jsonl");
        write_candidate_corpus(&path, docs, &spec).with_context(|| format!("writing {}", path.display()))?;
        cfg["paths"]["corpus"] = serde_json::json!(path);
        cfg["retrieval"] = serde_json::json!({ "provider": { "kind": "mock" } });
    }
    let cfg_path = args.out.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)? + "\n")
        .with_context(|| format!("writing {}", cfg_path.display()))?;
    println!(
        "{} pairs, {} paragraphs, {} words; config: {}",
        corpus.expected_pairs.len(),
        corpus.paragraphs,
        corpus.words,
        cfg_path.display()
    );
    Ok(())
}
