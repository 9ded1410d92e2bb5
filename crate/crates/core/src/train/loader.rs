//! Chunked shuffling: the pixel order is cut into contiguous chunks, the
//! chunks are visited in random order and pixels are shuffled within each
//! chunk before being cut into batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Batches of pixel indices for one epoch. Every index in `0..n_pixels`
/// appears exactly once; a batch never spans two chunks.
pub fn chunked_batches(
    n_pixels: usize,
    batch_size: usize,
    chunk_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    assert!(batch_size > 0 && chunk_size > 0, "batch and chunk sizes must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);

    let n_chunks = n_pixels.div_ceil(chunk_size);
    let mut order: Vec<usize> = (0..n_chunks).collect();
    order.shuffle(&mut rng);

    let mut batches = Vec::new();
    for c in order {
        let mut idx: Vec<usize> = (c * chunk_size..((c + 1) * chunk_size).min(n_pixels)).collect();
        idx.shuffle(&mut rng);
        batches.extend(idx.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches
}

/// Number of batches [`chunked_batches`] yields per epoch.
pub fn batches_per_epoch(n_pixels: usize, batch_size: usize, chunk_size: usize) -> usize {
    let full = n_pixels / chunk_size;
    let rest = n_pixels % chunk_size;
    full * chunk_size.div_ceil(batch_size) + rest.div_ceil(batch_size)
}
