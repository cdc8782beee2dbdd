//! Brute-force packing reference for the whitespace tokenizer. Every
//! decision renders the tentative context as a string and counts its words,
//! so it shares no accounting code with the library.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefContext {
    pub segments: Vec<String>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RefOutcome {
    Packed(Vec<RefContext>),
    Empty,
    Oversize,
}

fn paragraphs(text: &str) -> Vec<String> {
    text.split("\n\n")
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect()
}

/// `second_title` is false for continuation contexts without repeated
/// titles, which keep only the leading one.
fn layout(titles: (&str, &str), second_title: bool, first: &[String], second: &[String]) -> Vec<String> {
    let mut out = vec![titles.0.to_string()];
    out.extend(first.iter().cloned());
    if second_title {
        out.push(titles.1.to_string());
    }
    out.extend(second.iter().cloned());
    out
}

fn rendered_len(segments: &[String]) -> usize {
    let mut s = String::new();
    for seg in segments {
        s.push_str(seg);
        s.push_str("\n\n");
    }
    s.push_str("[SPLIT]");
    s.split_whitespace().count()
}

fn word_prefix(text: &str, k: usize) -> String {
    let mut words = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                words += 1;
                if words == k {
                    return text[..i].to_string();
                }
            }
            in_word = false;
        } else {
            in_word = true;
        }
    }
    text.to_string()
}

pub fn reference_pack(
    title_first: &str,
    text_first: &str,
    title_second: &str,
    text_second: &str,
    n: usize,
    repeat_titles: bool,
    truncate: bool,
) -> RefOutcome {
    let p1 = paragraphs(text_first);
    let p2 = paragraphs(text_second);
    if p1.is_empty() || p2.is_empty() {
        return RefOutcome::Empty;
    }
    let titles = (title_first.trim(), title_second.trim());
    let (mut i, mut j) = (0, 0);
    let mut out: Vec<RefContext> = Vec::new();
    while i < p1.len() || j < p2.len() {
        let t = out.is_empty() || repeat_titles;
        let fits = |a: &[String], b: &[String]| rendered_len(&layout(titles, t, a, b)) <= n;
        let (mut a, mut b): (Vec<String>, Vec<String>) = (vec![], vec![]);
        if !fits(&a, &b) || rendered_len(&layout(titles, t, &a, &b)) == n {
            return RefOutcome::Oversize;
        }
        loop {
            if i < p1.len() && j < p2.len() {
                let mut a2 = a.clone();
                a2.push(p1[i].clone());
                let mut b2 = b.clone();
                b2.push(p2[j].clone());
                if fits(&a2, &b2) {
                    a = a2;
                    b = b2;
                    i += 1;
                    j += 1;
                    continue;
                }
                break;
            } else if i < p1.len() {
                let mut a2 = a.clone();
                a2.push(p1[i].clone());
                if fits(&a2, &b) {
                    a = a2;
                    i += 1;
                    continue;
                }
                break;
            } else if j < p2.len() {
                let mut b2 = b.clone();
                b2.push(p2[j].clone());
                if fits(&a, &b2) {
                    b = b2;
                    j += 1;
                    continue;
                }
                break;
            } else {
                break;
            }
        }
        if a.is_empty() && b.is_empty() {
            let first_side = i < p1.len();
            let p = if first_side { &p1[i] } else { &p2[j] };
            let place = |text: String| {
                if first_side {
                    (vec![text], vec![])
                } else {
                    (vec![], vec![text])
                }
            };
            let (wa, wb) = place(p.clone());
            if fits(&wa, &wb) {
                (a, b) = (wa, wb);
            } else if truncate {
                let words = p.split_whitespace().count();
                let k = (1..words).rev().find(|&k| {
                    let (ta, tb) = place(word_prefix(p, k));
                    fits(&ta, &tb)
                });
                match k {
                    Some(k) => (a, b) = place(word_prefix(p, k)),
                    None => return RefOutcome::Oversize,
                }
            } else {
                return RefOutcome::Oversize;
            }
            if first_side {
                i += 1;
            } else {
                j += 1;
            }
        }
        let segments = layout(titles, t, &a, &b);
        let len = rendered_len(&segments);
        out.push(RefContext { segments, len });
    }
    RefOutcome::Packed(out)
}
