//! Dynamic chunk masks for dual-mode attention.

use rand::Rng;

/// Boolean attention constraint: frame i may attend to frame j iff
/// `allowed(i, j)`. With chunk size c > 0 that is j ≤ (⌊i/c⌋+1)·c − 1 —
/// every frame sees its whole current chunk plus all previous frames.
/// chunk_size 0 encodes the full sequence (all-true).
#[derive(Debug, Clone)]
pub struct ChunkMask {
    size: usize,
    chunk_size: usize,
    allowed: Vec<bool>,
}

impl ChunkMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.size + j]
    }

    /// Per-row end of the allowed prefix: row i may attend to columns
    /// `[0, limit[i])`. Chunk masks are always prefix-shaped.
    pub fn row_limits(&self) -> Vec<usize> {
        (0..self.size)
            .map(|i| {
                if self.chunk_size == 0 {
                    self.size
                } else {
                    ((i / self.chunk_size + 1) * self.chunk_size).min(self.size)
                }
            })
            .collect()
    }
}

/// Build the T×T chunk mask for chunk size c (0 = full sequence).
pub fn make_chunk_mask(t_m: usize, chunk_size: usize) -> ChunkMask {
    assert!(t_m >= 1, "mask needs at least one frame");
    let mut allowed = vec![false; t_m * t_m];
    for i in 0..t_m {
        let limit = if chunk_size == 0 {
            t_m
        } else {
            ((i / chunk_size + 1) * chunk_size).min(t_m)
        };
        for j in 0..limit {
            allowed[i * t_m + j] = true;
        }
    }
    ChunkMask { size: t_m, chunk_size, allowed }
}

pub const MAX_TRAIN_CHUNK: usize = 8;

/// Training-time chunk draw: full sequence (0) with probability 0.5,
/// otherwise uniform over 1..=8 frames (10–80 ms at a 10 ms shift).
pub fn sample_training_chunk<R: Rng>(rng: &mut R) -> usize {
    if rng.random::<f64>() < 0.5 {
        0
    } else {
        rng.random_range(1..=MAX_TRAIN_CHUNK)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_sequence_mask_is_all_true() {
        let m = make_chunk_mask(4, 0);
        for i in 0..4 {
            for j in 0..4 {
                assert!(m.allowed(i, j));
            }
        }
        assert_eq!(m.row_limits(), vec![4, 4, 4, 4]);
    }

    #[test]
    fn chunk_one_is_pure_causal() {
        let m = make_chunk_mask(4, 1);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.allowed(i, j), j <= i, "({i},{j})");
            }
        }
    }

    #[test]
    fn chunk_two_matches_bruteforce_definition() {
        let m = make_chunk_mask(6, 2);
        for i in 0..6 {
            for j in 0..6 {
                let expect = j <= (i / 2 + 1) * 2 - 1;
                assert_eq!(m.allowed(i, j), expect, "({i},{j})");
            }
        }
    }

    #[test]
    fn exhaustive_bruteforce_oracle_small_sizes() {
        for t in 1..=16 {
            for c in 0..=8 {
                let m = make_chunk_mask(t, c);
                for i in 0..t {
                    for j in 0..t {
                        let expect = if c == 0 { true } else { j <= (i / c + 1) * c - 1 };
                        assert_eq!(m.allowed(i, j), expect, "T={t} c={c} ({i},{j})");
                    }
                }
                // row_limits is the same mask in prefix form
                let limits = m.row_limits();
                for i in 0..t {
                    for j in 0..t {
                        assert_eq!(m.allowed(i, j), j < limits[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn chunk_sampler_is_reproducible() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..32).map(|_| sample_training_chunk(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn chunk_sampler_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 10_000;
        let mut zero = 0usize;
        let mut counts = [0usize; MAX_TRAIN_CHUNK];
        for _ in 0..n {
            let c = sample_training_chunk(&mut rng);
            if c == 0 {
                zero += 1;
            } else {
                counts[c - 1] += 1;
            }
        }
        let p0 = zero as f64 / n as f64;
        assert!((p0 - 0.5).abs() <= 0.02, "P(full)={p0}");
        // χ² over the 8 chunk bins at α = 0.01 (df = 7, critical 18.475)
        let rest: usize = counts.iter().sum();
        let expect = rest as f64 / 8.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expect;
                d * d / expect
            })
            .sum();
        assert!(chi2 < 18.475, "chi2={chi2} counts={counts:?}");
    }
}
