use rand::{Rng, SeedableRng};

/// Explicit Fisher-Yates from the top index down, drawing each swap
/// partner uniformly from `0..=i` as a u32 range. Returns the first
/// `n * num / den` positions, sorted.
pub fn reference_validation(n: usize, num: u64, den: u64, seed: u64) -> Vec<usize> {
    let count = (n as u128 * num as u128 / den as u128) as usize;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut i = n;
    while i > 1 {
        i -= 1;
        let j = rng.gen_range(0..(i as u32 + 1)) as usize;
        order.swap(i, j);
    }
    let mut picked = order[..count].to_vec();
    picked.sort();
    picked
}
