use rand::Rng;

use super::DataError;

/// Draws `count` items uniformly from `0..n_items` excluding `positive`,
/// independently (with replacement across draws).
pub fn sample_negatives<R: Rng>(positive: u32, n_items: usize, count: usize, rng: &mut R) -> Result<Vec<u32>, DataError> {
    if n_items < 2 {
        return Err(DataError::TooFewItems { n_items });
    }
    Ok((0..count)
        .map(|_| {
            let r = rng.gen_range(0..n_items as u32 - 1);
            if r >= positive {
                r + 1
            } else {
                r
            }
        })
        .collect())
}
