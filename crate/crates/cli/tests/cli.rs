use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn crossctx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossctx"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// One pair: English "Cat" (page 10) and target-language "Gato" (page 20),
/// linked from the target side only.
fn write_pair_fixture(dir: &Path) -> Value {
    let w = |name: &str, text: &str| {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    };
    let ll_l = w("xxwiki-langlinks.sql", "INSERT INTO `langlinks` VALUES (20,'en','Cat');\n");
    let ll_en = w("enwiki-langlinks.sql", "INSERT INTO `langlinks` VALUES (99,'de','Katze');\n");
    let pages_en = w("enwiki-page.sql", "INSERT INTO `page` VALUES (10,0,'Cat',0),(11,0,'Dog',0);\n");
    let pages_l = w("xxwiki-page.sql", "INSERT INTO `page` VALUES (20,0,'Gato',0);\n");
    let art_en = w(
        "articles_en.jsonl",
        &(json!({"id": "10", "title": "Cat", "text": "a b c\n\nd e"}).to_string() + "\n"),
    );
    let art_l = w(
        "articles_xx.jsonl",
        &(json!({"id": "20", "title": "Gato", "text": "x y z w\n\nv u"}).to_string() + "\n"),
    );
    json!({
        "language_l": "xx",
        "paths": {
            "langlinks_en": ll_en, "langlinks_l": ll_l,
            "pages_en": pages_en, "pages_l": pages_l,
            "articles_en": art_en, "articles_l": art_l,
            "output_dir": dir.join("out"),
        },
        "pack": {"n_budget": 10},
    })
}

fn write_config(dir: &Path, cfg: &Value) -> String {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p.display().to_string()
}

fn report(out: &Path) -> Vec<Value> {
    fs::read_to_string(out.join("run_report.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn help_prints_usage_and_exits_zero() {
    let o = crossctx(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("Usage:"));
    for cmd in ["align", "pack", "slide", "retrieve", "stats", "export", "all", "validate"] {
        assert!(text.contains(cmd), "{cmd} not listed");
    }
}

#[test]
fn missing_config_file_fails() {
    let o = crossctx(&["all", "--config", "/nonexistent/config.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cannot read"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = crossctx(&["pack", "--config", "x.json", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn pack_on_the_two_context_fixture_reports_two_contexts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_pair_fixture(dir.path());
    let path = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");

    let o = crossctx(&["align", "--config", &path]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("pairs.tsv")).unwrap(), "20\t10\n");

    let o = crossctx(&["pack", "--config", &path, "--emit-text"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let events = report(&out);
    let end = events.iter().find(|e| e["event"] == "stage_end").unwrap();
    assert_eq!(end["stage"], "pack");
    assert_eq!(end["context_count"], 2);

    let texts: Vec<Value> = fs::read_to_string(out.join("contexts.text.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let lens: Vec<_> = texts.iter().map(|t| t["token_len"].as_u64().unwrap()).collect();
    assert_eq!(lens, [10, 7]);
    assert_eq!(texts[0]["text"], "Cat\n\na b c\n\nGato\n\nx y z w\n\n[SPLIT]");
    assert_eq!(texts[1]["text"], "Cat\n\nd e\n\nGato\n\nv u\n\n[SPLIT]");
    assert_eq!(texts[1]["seq_index"], 1);
    assert_eq!(texts[0]["direction"], "en_first");
}

#[test]
fn all_runs_end_to_end_with_workers_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_pair_fixture(dir.path());
    let path = write_config(dir.path(), &cfg);
    let o = crossctx(&["all", "--config", &path, "--workers", "2", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("windows=2"), "{stdout}");

    let out = dir.path().join("out");
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(out.join("export/train/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["window_count"], 2);
    assert_eq!(manifest["token_total"], 17);
    assert_eq!(manifest["seed"], 7);
    let start = &report(&out)[0];
    assert_eq!(start["workers"], 2);
}

#[test]
fn seed_flag_yields_to_explicit_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_pair_fixture(dir.path());
    let path = write_config(dir.path(), &cfg);
    let o = crossctx(&["all", "--config", &path, "--seed", "7", "--set", "split.seed=9"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest: Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("out/export/train/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["seed"], 9);
}

#[test]
fn stage_without_its_inputs_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_pair_fixture(dir.path());
    let path = write_config(dir.path(), &cfg);
    let o = crossctx(&["slide", "--config", &path]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("run `pack` first"));
}

#[test]
fn contexts_that_disagree_with_the_tokenizer_fail_slide() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_pair_fixture(dir.path());
    let path = write_config(dir.path(), &cfg);
    assert_eq!(crossctx(&["align", "--config", &path]).status.code(), Some(0));
    assert_eq!(crossctx(&["pack", "--config", &path]).status.code(), Some(0));
    let contexts = dir.path().join("out/contexts.jsonl");
    let text = fs::read_to_string(&contexts).unwrap().replace("\"token_len\":10", "\"token_len\":11");
    fs::write(&contexts, text).unwrap();
    let o = crossctx(&["slide", "--config", &path]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("context 0 encodes to 10 tokens"));
    assert!(!dir.path().join("out/slide/train/manifest.json").exists());
}

#[test]
fn validate_reports_field_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_pair_fixture(dir.path());
    let path = write_config(dir.path(), &cfg);

    let o = crossctx(&["validate", "--config", &path]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let o = crossctx(&["validate", "--config", &path, "--set", "slide.n_budget=2048"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("slide.n_budget") && err.contains("pack.n_budget"), "{err}");

    let mut bad = cfg.clone();
    bad["paths"]["corpus"] = json!(dir.path().join("web.jsonl"));
    bad["retrieval"] = json!({"threshold": 1.5});
    let o = crossctx(&["validate", "--config", &write_config(dir.path(), &bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("retrieval.threshold"));

    let mut missing = cfg.clone();
    missing["paths"]["pages_en"] = json!("/nonexistent/page.sql");
    let o = crossctx(&["validate", "--config", &write_config(dir.path(), &missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("paths.pages_en"));

    let o = crossctx(&["validate", "--config", &path, "--set", "pack.nbudget=5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("pack.nbudget"));
}

#[test]
fn synth_writes_a_runnable_config() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("demo");
    let root_s = root.display().to_string();
    let o = crossctx(&["synth", "--out", &root_s, "--pairs", "40", "--corpus-docs", "30"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cfg = root.join("config.json").display().to_string();
    let o = crossctx(&["all", "--config", &cfg, "--set", "pack.n_budget=128"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(root.join("output/export/train/manifest.json").is_file());
    assert!(root.join("output/pseudo_pairs.jsonl").is_file());
}
