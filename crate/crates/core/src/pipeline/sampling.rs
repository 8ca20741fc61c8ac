//! Segment-based frame sampling.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::nn::seeded_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// one uniformly random frame per segment
    Train,
    /// the centre frame of every segment
    Test,
}

/// Splits `[0, seq_len)` into `n_frames` equal segments and picks one index
/// from each. Segment `j` covers `[⌊j·T/n⌋, ⌊(j+1)·T/n⌋)`; its centre is
/// `⌊(2j+1)·T/(2n)⌋`. A segment shorter than one frame maps to its clamped
/// start. The result is ascending.
pub fn tsn_sample(seq_len: usize, n_frames: usize, mode: SampleMode, seed: u64) -> Result<Vec<usize>> {
    ensure!(n_frames >= 1, "n_frames must be at least 1");
    ensure!(seq_len >= 1, "cannot sample from an empty sequence");
    let mut rng = seeded_rng(seed, 0);
    let out = (0..n_frames)
        .map(|j| match mode {
            SampleMode::Test => (2 * j + 1) * seq_len / (2 * n_frames),
            SampleMode::Train => {
                let lo = j * seq_len / n_frames;
                let hi = (j + 1) * seq_len / n_frames;
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo.min(seq_len - 1)
                }
            }
        })
        .collect();
    Ok(out)
}
