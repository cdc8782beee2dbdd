mod common;

use common::slide_reference::{contexts_with_lengths, fixed_slices, positional_windows};
use crossctx::slide::{slide_optimized, slide_standard, OptimizedSlider, SlideError};
use proptest::prelude::*;

fn lens(windows: &[crossctx::slide::WindowShard]) -> Vec<usize> {
    windows.iter().map(|w| w.ids.len()).collect()
}

fn streams() -> impl Strategy<Value = (usize, Vec<usize>)> {
    (1usize..64).prop_flat_map(|n| (Just(n), prop::collection::vec(1..=n, 0..60)))
}

#[test]
fn fixed_examples() {
    let c = contexts_with_lengths(&[5, 5, 5]);
    let w = slide_optimized(c.iter().map(Vec::as_slice), 8, 0).unwrap();
    assert_eq!(lens(&w), vec![5, 5, 5]);
    assert_eq!(w.iter().map(|w| w.dropped_from_raw_span).collect::<Vec<_>>(), vec![3, 3, 0]);

    let c = contexts_with_lengths(&[3, 4, 5]);
    let w = slide_optimized(c.iter().map(Vec::as_slice), 8, 0).unwrap();
    assert_eq!(lens(&w), vec![7, 5]);
    assert_eq!((w[0].source.first_context, w[0].source.last_context), (0, 1));

    let s = slide_standard(c.iter().map(Vec::as_slice), 8, true).unwrap();
    assert_eq!(lens(&s), vec![8, 4]);
    assert_eq!(*s[0].ids.last().unwrap(), c[2][0]);
    assert_eq!((s[0].source.last_context, s[0].source.last_end), (2, 1));
    assert_eq!((s[1].source.first_context, s[1].source.first_offset), (2, 1));

    let c = contexts_with_lengths(&[8]);
    assert_eq!(lens(&slide_optimized(c.iter().map(Vec::as_slice), 8, 0).unwrap()), vec![8]);

    let c = contexts_with_lengths(&[8, 8]);
    assert_eq!(lens(&slide_standard(c.iter().map(Vec::as_slice), 8, true).unwrap()), vec![8, 8]);
    let c = contexts_with_lengths(&[5]);
    assert!(slide_standard(c.iter().map(Vec::as_slice), 8, false).unwrap().is_empty());
}

#[test]
fn invalid_contexts_are_rejected_with_their_index() {
    let bad = [vec![1, 0], vec![1, 2, 3]];
    assert_eq!(
        slide_optimized(bad.iter().map(Vec::as_slice), 8, 0).unwrap_err(),
        SlideError::MissingSplit { context: 1 }
    );
    let long = [vec![1, 2, 3, 0]];
    assert!(matches!(
        slide_optimized(long.iter().map(Vec::as_slice), 3, 0),
        Err(SlideError::Oversize { context: 0, len: 4, n: 3 })
    ));
    let inner = [vec![1, 0, 2, 0]];
    assert!(matches!(
        slide_optimized(inner.iter().map(Vec::as_slice), 8, 0),
        Err(SlideError::InteriorSplit { context: 0, position: 1 })
    ));
    assert!(slide_optimized(std::iter::empty(), 8, 0).unwrap().is_empty());
}

#[test]
fn discard_tails_drops_straddling_contexts() {
    let c = contexts_with_lengths(&[3, 4, 5, 2, 6]);
    let mut slider = OptimizedSlider::new(8, 0, true).unwrap();
    let mut out = Vec::new();
    for ctx in &c {
        out.extend(slider.push(ctx).unwrap());
    }
    assert_eq!(slider.discarded(), (1, 5));
    out.extend(slider.finish());
    // [3,4] | ctx 2 straddles and is discarded | [2,6]
    assert_eq!(lens(&out), vec![7, 8]);
    assert_eq!(out[1].source.first_context, 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn optimized_matches_positional_reference((n, lengths) in streams()) {
        let contexts = contexts_with_lengths(&lengths);
        let stream: Vec<u32> = contexts.concat();
        let windows = slide_optimized(contexts.iter().map(Vec::as_slice), n, 0).unwrap();
        let got: Vec<Vec<u32>> = windows.iter().map(|w| w.ids.clone()).collect();
        prop_assert_eq!(&got, &positional_windows(&stream, n, 0));
        prop_assert_eq!(got.concat(), stream);

        let mut ctx = 0usize;
        for (k, w) in windows.iter().enumerate() {
            prop_assert_eq!(w.window_index as usize, k);
            prop_assert!(!w.ids.is_empty() && w.ids.len() <= n);
            prop_assert_eq!(*w.ids.last().unwrap(), 0);
            // Whole contexts only, in order.
            prop_assert_eq!(w.source.first_context as usize, ctx);
            let whole: usize = lengths[ctx..=w.source.last_context as usize].iter().sum();
            prop_assert_eq!(whole, w.ids.len());
            ctx = w.source.last_context as usize + 1;
            if let Some(&next) = lengths.get(ctx) {
                prop_assert!(w.ids.len() + next > n);
                prop_assert_eq!(w.dropped_from_raw_span as usize, n - w.ids.len());
            } else {
                prop_assert_eq!(w.dropped_from_raw_span, 0);
            }
        }
        prop_assert_eq!(ctx, lengths.len());
    }

    #[test]
    fn standard_is_an_exact_partition((n, lengths) in streams(), keep in any::<bool>()) {
        let contexts = contexts_with_lengths(&lengths);
        let stream: Vec<u32> = contexts.concat();
        let windows = slide_standard(contexts.iter().map(Vec::as_slice), n, keep).unwrap();
        let got: Vec<Vec<u32>> = windows.iter().map(|w| w.ids.clone()).collect();
        prop_assert_eq!(&got, &fixed_slices(&stream, n, keep));
        let mut flat = 0usize;
        let starts: Vec<usize> = lengths.iter().scan(0, |acc, &l| { let s = *acc; *acc += l; Some(s) }).collect();
        for w in &windows {
            let a = starts[w.source.first_context as usize] + w.source.first_offset as usize;
            let b = starts[w.source.last_context as usize] + w.source.last_end as usize;
            prop_assert_eq!(a, flat);
            prop_assert_eq!(b - a, w.ids.len());
            flat = b;
        }
    }
}
