//! Seeded problem instances shared by tests, the CLI and benchmarks.

use ndarray::Array3;
use rand::{seq::index::sample, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{LayerId, LogitBlock};
use crate::error::Result;

/// Logit gap between the dominant and the suppressed token.
pub const SUPPRESSION_GAP: f64 = 5.0;

/// A layer in which one target token's logits sit a constant gap below the
/// dominant target's.
#[derive(Debug, Clone)]
pub struct SuppressedInstance {
    pub block: LogitBlock,
    pub dominant: usize,
    pub suppressed: usize,
}

impl SuppressedInstance {
    pub fn targets(&self) -> Vec<usize> {
        let mut t = vec![self.dominant, self.suppressed];
        t.sort_unstable();
        t
    }
}

/// `H = 2`, `w = 8`, `N = 8`, `d = 8`; the dominant column is lifted by 3 and the
/// suppressed column is the dominant one minus [`SUPPRESSION_GAP`].
pub fn suppressed_instance(seed: u64) -> Result<SuppressedInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, n, d) = (2, 8, 8, 8);
    let noise = Normal::new(0.0, 1.5).expect("valid sigma");
    let mut logits = Array3::from_shape_simple_fn((h, w * w, n), || noise.sample(&mut rng));
    let picks = sample(&mut rng, n, 2).into_vec();
    let (dominant, suppressed) = (picks[0], picks[1]);
    for head in 0..h {
        for m in 0..w * w {
            logits[[head, m, dominant]] += 3.0;
            logits[[head, m, suppressed]] = logits[[head, m, dominant]] - SUPPRESSION_GAP;
        }
    }
    Ok(SuppressedInstance {
        block: LogitBlock::new(logits, d, LayerId(0), w)?,
        dominant,
        suppressed,
    })
}
