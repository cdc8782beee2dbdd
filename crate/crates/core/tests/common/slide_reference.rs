//! Positional window simulation over the flat token stream: each window
//! covers raw range [s, s+n), keeps tokens through the last split id in
//! that range and the next window starts right after it.

pub fn positional_windows(stream: &[u32], n: usize, split_id: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut s = 0;
    while s < stream.len() {
        let end = (s + n).min(stream.len());
        let p = (s..end)
            .rev()
            .find(|&k| stream[k] == split_id)
            .expect("every context fits a window");
        out.push(stream[s..=p].to_vec());
        s = p + 1;
    }
    out
}

/// Consecutive `n`-token slices of the stream.
pub fn fixed_slices(stream: &[u32], n: usize, keep_final_partial: bool) -> Vec<Vec<u32>> {
    stream
        .chunks(n)
        .filter(|c| c.len() == n || keep_final_partial)
        .map(<[u32]>::to_vec)
        .collect()
}

/// Contexts of the given lengths: ascending non-split ids then split id 0.
pub fn contexts_with_lengths(lengths: &[usize]) -> Vec<Vec<u32>> {
    let mut next = 1u32;
    lengths
        .iter()
        .map(|&len| {
            let mut ctx: Vec<u32> = (0..len - 1)
                .map(|_| {
                    next += 1;
                    next
                })
                .collect();
            ctx.push(0);
            ctx
        })
        .collect()
}
