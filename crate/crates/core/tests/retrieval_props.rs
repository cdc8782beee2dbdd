use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crossctx::retrieve::{
    extract_keywords, rank_candidates, CandidateDoc, EmbeddingProvider, EmbeddingVector, RetrievalConfig,
    RetrievalError, TitleMap, VectorIndex, WireConfig, WireProvider,
};
use proptest::prelude::*;

fn unit(c: Vec<f64>) -> Option<EmbeddingVector> {
    EmbeddingVector::new(c, "x").ok()
}

fn vectors(dim: usize, max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    // Coarse grid so ties actually occur.
    prop::collection::vec(prop::collection::vec(-3i8..=3, dim).prop_map(|v| v.into_iter().map(f64::from).collect()), 0..max)
}

fn index_of(vs: &[Vec<f64>]) -> (VectorIndex, Vec<(String, EmbeddingVector)>) {
    let docs: Vec<(String, EmbeddingVector)> = vs
        .iter()
        .enumerate()
        .filter_map(|(i, v)| unit(v.clone()).map(|u| (format!("d{:03}", (i * 37) % 1000), u)))
        .collect();
    let mut seen = std::collections::HashSet::new();
    let docs: Vec<_> = docs.into_iter().filter(|(id, _)| seen.insert(id.clone())).collect();
    let idx = VectorIndex::build(docs.iter().map(|(id, v)| CandidateDoc { doc_id: id.clone(), vector: v.clone() })).unwrap();
    (idx, docs)
}

fn dot(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    // Scores are bounded to [-1, 1]; rounding can push a self-match past 1.
    a.components().iter().zip(b.components()).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

/// Full scan: score everything, sort by score then id.
fn full_scan(docs: &[(String, EmbeddingVector)], q: &EmbeddingVector, k: usize) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = docs.iter().map(|(id, v)| (id.clone(), dot(q, v))).collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Scores every document against both queries, no pool restriction.
fn full_rescore(docs: &[(String, EmbeddingVector)], qt: &EmbeddingVector, qf: &EmbeddingVector, threshold: f64) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = docs
        .iter()
        .map(|(id, v)| (id.clone(), (dot(qt, v) + dot(qf, v)) / 2.0))
        .filter(|(_, s)| *s >= threshold)
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn topk_equals_full_scan(vs in vectors(3, 60), q in prop::collection::vec(-3i8..=3, 3), k in 0usize..70) {
        let Some(q) = unit(q.into_iter().map(f64::from).collect()) else { return Ok(()) };
        let (idx, docs) = index_of(&vs);
        let got = idx.search_topk(&q, k);
        let want = full_scan(&docs, &q, k);
        prop_assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            prop_assert_eq!(&g.0, &w.0);
            prop_assert!((g.1 - w.1).abs() < 1e-12);
        }
    }

    #[test]
    fn insertion_order_does_not_matter(vs in vectors(3, 40), q in prop::collection::vec(-3i8..=3, 3), k in 1usize..10) {
        let Some(q) = unit(q.into_iter().map(f64::from).collect()) else { return Ok(()) };
        let (idx, docs) = index_of(&vs);
        let rev = VectorIndex::build(docs.iter().rev().map(|(id, v)| CandidateDoc { doc_id: id.clone(), vector: v.clone() })).unwrap();
        prop_assert_eq!(idx.search_topk(&q, k), rev.search_topk(&q, k));
    }

    #[test]
    fn ranked_results_obey_mean_threshold_and_cap(vs in vectors(4, 50), qt in prop::collection::vec(-3i8..=3, 4),
                                                  qf in prop::collection::vec(-3i8..=3, 4), threshold in 0.0f64..1.0,
                                                  max_results in 1usize..5, pool in 1usize..60) {
        let (Some(qt), Some(qf)) = (unit(qt.into_iter().map(f64::from).collect()), unit(qf.into_iter().map(f64::from).collect())) else { return Ok(()) };
        let (idx, docs) = index_of(&vs);
        let cfg = RetrievalConfig { threshold, max_results, candidate_pool_k: pool };
        let got = rank_candidates(&qt, &qf, &idx, &cfg);
        prop_assert!(got.len() <= max_results);
        for r in &got {
            prop_assert!((r.s_final - (r.s_title + r.s_full) / 2.0).abs() <= 1e-9);
            prop_assert!(r.s_final >= threshold);
            for s in [r.s_title, r.s_full, r.s_final] {
                prop_assert!((-1.0..=1.0).contains(&s));
            }
        }
        // A pool covering the whole corpus is the same as rescoring everything.
        let everything = RetrievalConfig { threshold, max_results: usize::MAX, candidate_pool_k: docs.len().max(1) };
        let full: Vec<String> = rank_candidates(&qt, &qf, &idx, &everything).into_iter().map(|r| r.doc_id).collect();
        let want: Vec<String> = full_rescore(&docs, &qt, &qf, threshold).into_iter().map(|r| r.0).collect();
        prop_assert_eq!(full, want);
    }

    #[test]
    fn enlarging_pool_keeps_previous_results(vs in vectors(4, 50), qt in prop::collection::vec(-3i8..=3, 4),
                                             qf in prop::collection::vec(-3i8..=3, 4), k in 1usize..30, extra in 0usize..30) {
        let (Some(qt), Some(qf)) = (unit(qt.into_iter().map(f64::from).collect()), unit(qf.into_iter().map(f64::from).collect())) else { return Ok(()) };
        let (idx, _) = index_of(&vs);
        let small = RetrievalConfig { threshold: 0.0, max_results: usize::MAX, candidate_pool_k: k };
        let large = RetrievalConfig { candidate_pool_k: k + extra, ..small.clone() };
        let before = rank_candidates(&qt, &qf, &idx, &small);
        let after: Vec<String> = rank_candidates(&qt, &qf, &idx, &large).into_iter().map(|r| r.doc_id).collect();
        for r in before {
            prop_assert!(after.contains(&r.doc_id));
        }
    }

    #[test]
    fn keyword_ranking_matches_counter(links in prop::collection::vec(0usize..15, 0..40)) {
        let map: TitleMap = (0..12).map(|i| (format!("L{i}"), format!("E{i}"))).collect();
        let text: String = links.iter().map(|i| format!("[[L{i}]] ")).collect();
        let ks = extract_keywords("T", &text, &map);
        let mut counter: HashMap<usize, (usize, usize)> = HashMap::new();
        for (pos, &i) in links.iter().enumerate() {
            if i < 12 {
                counter.entry(i).or_insert((0, pos)).0 += 1;
            }
        }
        let mut want: Vec<(usize, (usize, usize))> = counter.into_iter().collect();
        want.sort_by_key(|&(_, (count, first))| (std::cmp::Reverse(count), first));
        let want: Vec<String> = want.into_iter().take(10).map(|(i, _)| format!("E{i}")).collect();
        prop_assert_eq!(ks.content_keywords, want);
    }
}

#[test]
fn exact_search_on_ten_thousand_docs() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let docs: Vec<(String, EmbeddingVector)> = (0..10_000)
        .map(|i| (format!("doc{i:05}"), unit((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()))
        .collect();
    let idx = VectorIndex::build(docs.iter().map(|(id, v)| CandidateDoc { doc_id: id.clone(), vector: v.clone() })).unwrap();
    for _ in 0..5 {
        let q = unit((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        for k in [1, 10, 100, 10_000] {
            let got: Vec<String> = idx.search_topk(&q, k).into_iter().map(|r| r.0).collect();
            let want: Vec<String> = full_scan(&docs, &q, k).into_iter().map(|r| r.0).collect();
            assert_eq!(got, want);
        }
    }
}

/// Minimal HTTP endpoint: the first `failures` requests get a 503, later
/// ones get a vector per text whose first component is its length.
fn serve(failures: usize) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line.trim().to_string();
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            let n = counter.fetch_add(1, Ordering::SeqCst);
            let (status, payload) = if n < failures {
                ("503 Service Unavailable", "{}".to_string())
            } else {
                let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
                assert!(auth.eq_ignore_ascii_case("authorization: Bearer sekrit"), "{auth}");
                let vectors: Vec<Vec<f64>> = req["texts"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|t| vec![t.as_str().unwrap().len() as f64, 1.0])
                    .collect();
                ("200 OK", serde_json::json!({ "vectors": vectors }).to_string())
            };
            let resp = format!(
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}/embed"), hits)
}

fn wire(endpoint: String, max_retries: u32) -> WireProvider {
    std::env::set_var("CROSSCTX_TEST_TOKEN", "sekrit");
    WireProvider::new(WireConfig {
        endpoint,
        token_env: Some("CROSSCTX_TEST_TOKEN".into()),
        timeout_secs: 5,
        max_retries,
        backoff_ms: 1,
        batch_size: 2,
    })
    .unwrap()
}

#[test]
fn wire_provider_retries_then_succeeds() {
    let (endpoint, hits) = serve(2);
    let p = wire(endpoint, 3);
    let v = p.embed(&["a", "bbb", "cc"]).unwrap();
    assert_eq!(v.len(), 3);
    for x in &v {
        assert!((x.norm() - 1.0).abs() < 1e-6);
    }
    let expected = EmbeddingVector::new(vec![3.0, 1.0], "").unwrap();
    assert!((v[1].components()[0] - expected.components()[0]).abs() < 1e-12);
    // Two failures, then one request per batch of two.
    assert_eq!(hits.load(Ordering::SeqCst), 4);
}

#[test]
fn wire_provider_gives_up_naming_the_batch() {
    let (endpoint, _) = serve(usize::MAX);
    let err = wire(endpoint, 1).embed(&["a"]).unwrap_err();
    match err {
        RetrievalError::Provider { batch, attempts, ref message, .. } => {
            assert_eq!((batch, attempts), (0, 2));
            assert!(message.contains("503"));
        }
        other => panic!("unexpected {other}"),
    }
}
