//! Synthetic training corpus: smooth-gradient backgrounds with one bright rectangular
//! defect each.

use crate::mask::AnomalyMask;
use crate::rng::RandomStream;
use crate::tensor::Tensor;

/// `count` single-channel `size × size` images with their defect masks. Sample `i` is
/// drawn from stream `i`, so corpora of different lengths share a prefix.
pub fn synthetic_corpus(count: usize, size: usize, seed: u64) -> Vec<(Tensor, AnomalyMask)> {
    (0..count)
        .map(|i| synthetic_sample(size, &mut RandomStream::new(seed, i as u64)))
        .collect()
}

fn synthetic_sample(size: usize, rng: &mut RandomStream) -> (Tensor, AnomalyMask) {
    let base = rng.uniform_range(0.2, 0.35);
    let gx = rng.uniform_range(-0.1, 0.1);
    let gy = rng.uniform_range(-0.1, 0.1);
    let span = size.saturating_sub(1).max(1) as f64;
    let max_side = 12.min(size);
    let min_side = 4.min(max_side);
    let bh = rng.uniform_int(min_side, max_side);
    let bw = rng.uniform_int(min_side, max_side);
    let top = rng.uniform_int(0, size - bh);
    let left = rng.uniform_int(0, size - bw);
    let level = rng.uniform_range(0.85, 1.0);
    let mask = AnomalyMask::from_fn(size, size, |i, j| {
        (top..top + bh).contains(&i) && (left..left + bw).contains(&j)
    });
    let mut x = Tensor::zeros(1, size, size);
    for i in 0..size {
        for j in 0..size {
            let v = if mask.is_set(i, j) {
                level
            } else {
                base + gx * j as f64 / span + gy * i as f64 / span
            };
            x.set(0, i, j, v);
        }
    }
    (x, mask)
}
