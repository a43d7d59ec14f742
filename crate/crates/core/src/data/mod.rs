//! Synthetic corpus, YLD-style segmentation and corpus storage.

pub mod corpus;
pub mod disk;
pub mod yld;

pub use corpus::{generate_corpus, generate_corpus_with, CorpusConfig, Identity, SyntheticSample};
pub use yld::{detect, extract_clips, yld_segment, yld_segment_with, Clip, FaceMatcher, Segment, TemplateMatcher};

/// Deterministic train/validation split: a seeded shuffle of `0..n`, the
/// first `ceil(n · val_fraction)` indices (at least one when `n ≥ 2`) held out.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let val = if n < 2 {
        0
    } else {
        ((n as f64 * val_fraction).ceil() as usize).clamp(1, n - 1)
    };
    let held = idx[..val].to_vec();
    let mut train = idx[val..].to_vec();
    train.sort_unstable();
    let mut held = held;
    held.sort_unstable();
    (train, held)
}
