mod common;

use common::pack_reference::{reference_pack, RefOutcome};
use crossctx::align::{ArticlePair, PairId, PairSource};
use crossctx::pack::{pack_corpus, pack_pair, Direction, DirectionPolicy, PackConfig, PairOutcome, SegmentKind};
use crossctx::tokenize::{make_tokenizer, Tokenizer, TokenizerSpec};
use proptest::prelude::*;

fn ws() -> Box<dyn Tokenizer> {
    make_tokenizer(&TokenizerSpec::whitespace()).unwrap()
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "bb", "c", "dd", "e", "ff", "g", "[SPLIT]x", "é"]).prop_map(String::from)
}

fn paragraph() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..9).prop_map(|w| w.join(" "))
}

fn article() -> impl Strategy<Value = String> {
    prop::collection::vec(paragraph(), 0..7).prop_map(|p| p.join("\n\n"))
}

fn title() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..3).prop_map(|w| w.join(" "))
}

prop_compose! {
    fn article_pair()(id_l in 0u64..1000, id_en in 0u64..1000, t_en in title(), t_l in title(),
                      en in article(), l in article()) -> ArticlePair {
        ArticlePair {
            pair: PairId::new(id_l, id_en),
            title_en: t_en,
            title_l: t_l,
            text_en: en,
            text_l: l,
            lang_l: "xx".into(),
            source: PairSource::Wikipedia,
        }
    }
}

fn config(n: usize, repeat_titles: bool, truncate_oversize: bool) -> PackConfig {
    PackConfig {
        repeat_titles,
        truncate_oversize,
        ..PackConfig::with_budget(n)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn matches_brute_force_reference(p in article_pair(), n in 4usize..40, repeat in any::<bool>(),
                                     truncate in any::<bool>(), l_first in any::<bool>()) {
        let t = ws();
        let direction = if l_first { Direction::LFirst } else { Direction::EnFirst };
        let got = pack_pair(&p, &*t, &config(n, repeat, truncate), direction);
        let (t1, x1, t2, x2) = match direction {
            Direction::EnFirst => (&p.title_en, &p.text_en, &p.title_l, &p.text_l),
            Direction::LFirst => (&p.title_l, &p.text_l, &p.title_en, &p.text_en),
        };
        let want = reference_pack(t1, x1, t2, x2, n, repeat, truncate);
        match (got, want) {
            (PairOutcome::Packed { contexts, .. }, RefOutcome::Packed(reference)) => {
                prop_assert_eq!(contexts.len(), reference.len());
                for (c, r) in contexts.iter().zip(&reference) {
                    let texts: Vec<_> = c.segments.iter().map(|s| s.text.clone()).collect();
                    prop_assert_eq!(&texts, &r.segments);
                    prop_assert_eq!(c.token_len as usize, r.len);
                }
            }
            (PairOutcome::Empty, RefOutcome::Empty) | (PairOutcome::Oversize, RefOutcome::Oversize) => {}
            (g, w) => prop_assert!(false, "library {:?} vs reference {:?}", g, w),
        }
    }

    #[test]
    fn contexts_respect_budget_and_end_with_one_split(p in article_pair(), n in 4usize..40) {
        let t = ws();
        if let PairOutcome::Packed { contexts, .. } = pack_pair(&p, &*t, &PackConfig::with_budget(n), Direction::EnFirst) {
            for c in &contexts {
                let ids = c.encode(&*t);
                prop_assert!(ids.len() <= n);
                prop_assert_eq!(ids.len(), c.token_len as usize);
                prop_assert_eq!(*ids.last().unwrap(), t.split_token_id());
                prop_assert_eq!(ids.iter().filter(|&&x| x == t.split_token_id()).count(), 1);
            }
        }
    }

    #[test]
    fn paragraph_order_is_preserved(p in article_pair(), n in 4usize..40) {
        let t = ws();
        let cfg = PackConfig::with_budget(n);
        if let PairOutcome::Packed { contexts, .. } = pack_pair(&p, &*t, &cfg, Direction::EnFirst) {
            for (lang, text, title) in [("en", &p.text_en, &p.title_en), ("xx", &p.text_l, &p.title_l)] {
                let original: Vec<&str> = text.split("\n\n").map(str::trim).filter(|s| !s.is_empty()).collect();
                let mut seen = Vec::new();
                for c in &contexts {
                    let titles: Vec<_> = c.segments.iter()
                        .filter(|s| s.kind == SegmentKind::Title && s.lang == lang).collect();
                    prop_assert_eq!(titles.len(), 1);
                    prop_assert_eq!(&titles[0].text, title.trim());
                    for s in c.segments.iter().filter(|s| s.kind == SegmentKind::Paragraph && s.lang == lang) {
                        seen.push((s.text.clone(), s.truncated));
                    }
                }
                prop_assert_eq!(seen.len(), original.len());
                for ((s, truncated), o) in seen.iter().zip(&original) {
                    if *truncated {
                        prop_assert!(o.starts_with(s.as_str()));
                    } else {
                        prop_assert_eq!(s.as_str(), *o);
                    }
                }
            }
        }
    }

    #[test]
    fn output_independent_of_worker_count(pairs in prop::collection::vec(article_pair(), 0..24), n in 4usize..30,
                                          seed in any::<u64>()) {
        let cfg = PackConfig { direction_policy: DirectionPolicy::Mix, seed, ..PackConfig::with_budget(n) };
        let run = |workers: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
            pool.install(|| {
                let t = ws();
                let (contexts, tally) = pack_corpus(pairs.clone(), &*t, &cfg);
                let rendered: Vec<String> = contexts.iter().map(|c| c.render("[SPLIT]")).collect();
                (rendered, contexts.iter().map(|c| (c.pair, c.seq_index, c.direction)).collect::<Vec<_>>(), tally)
            })
        };
        prop_assert_eq!(run(1), run(4));
    }
}

#[test]
fn mix_ratio_is_respected_in_aggregate() {
    let cfg = PackConfig {
        direction_policy: DirectionPolicy::Mix,
        mix_ratio: "3:1".parse().unwrap(),
        seed: 11,
        ..PackConfig::default()
    };
    let n = 20_000u64;
    let en_first = (0..n)
        .filter(|&k| crossctx::pack::choose_direction(&cfg, PairId::new(k, k * 7 + 1)) == Direction::EnFirst)
        .count() as f64;
    let share = en_first / n as f64;
    // Binomial sd at p=0.75, n=20000 is about 0.003.
    assert!((share - 0.75).abs() < 0.015, "share {share}");
}
