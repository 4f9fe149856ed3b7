//! Counter-based random streams.
//!
//! Every random quantity in an experiment is drawn from a stream addressed by
//! a path of integers (master seed, run, purpose, episode, ...). A stream can
//! be recreated in isolation from its path, so any single episode of any run
//! is reproducible without replaying the ones before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator handed to rollouts, trainers and samplers.
pub type StreamRng = ChaCha8Rng;

/// Purpose tags keep streams used for different jobs disjoint.
pub mod purpose {
    pub const EPISODE: u64 = 1;
    pub const EVALUATION: u64 = 2;
    pub const TRAINING: u64 = 3;
    pub const LEAST_SQUARES: u64 = 4;
    pub const FISHER: u64 = 5;
    pub const INIT: u64 = 6;
    pub const PROBE: u64 = 7;
    pub const BOOTSTRAP: u64 = 8;
    /// Parent of the per-run streams of an experiment.
    pub const RUN: u64 = 9;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Address of a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    state: u64,
    depth: u32,
}

impl StreamKey {
    pub fn new(master_seed: u64) -> Self {
        Self {
            state: splitmix64(master_seed),
            depth: 0,
        }
    }

    /// Derives the sub-stream `tag` of this stream.
    #[must_use]
    pub fn child(self, tag: u64) -> Self {
        // Mixing the depth in keeps (a, b) and (b, a) paths apart.
        let mixed = splitmix64(self.state ^ splitmix64(tag ^ ((self.depth as u64 + 1) << 56)));
        Self {
            state: mixed,
            depth: self.depth + 1,
        }
    }

    pub fn children(self, tags: &[u64]) -> Self {
        tags.iter().fold(self, |key, &tag| key.child(tag))
    }

    pub fn rng(self) -> StreamRng {
        let mut seed = [0u8; 32];
        let mut s = self.state;
        for chunk in seed.chunks_exact_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        StreamRng::from_seed(seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_path_same_stream() {
        let a: Vec<u64> = StreamKey::new(7)
            .children(&[1, 2, 3])
            .rng()
            .random_iter()
            .take(8)
            .collect();
        let b: Vec<u64> = StreamKey::new(7)
            .child(1)
            .child(2)
            .child(3)
            .rng()
            .random_iter()
            .take(8)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn sibling_and_transposed_paths_differ() {
        let base = StreamKey::new(7);
        let draw = |k: StreamKey| k.rng().random::<u64>();
        assert_ne!(draw(base.child(1)), draw(base.child(2)));
        assert_ne!(draw(base.children(&[1, 2])), draw(base.children(&[2, 1])));
        assert_ne!(draw(base.child(0)), draw(base));
        assert_ne!(draw(StreamKey::new(8).child(1)), draw(base.child(1)));
    }

    #[test]
    fn adjacent_seeds_are_uncorrelated() {
        // Sample correlation of uniform draws from streams s and s+1.
        let n = 20_000;
        let mut a = StreamKey::new(100).child(purpose::EPISODE).rng();
        let mut b = StreamKey::new(101).child(purpose::EPISODE).rng();
        let (mut sab, mut sa, mut sb, mut saa, mut sbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let x: f64 = a.random();
            let y: f64 = b.random();
            sab += x * y;
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
        }
        let nf = n as f64;
        let cov = sab / nf - sa * sb / nf / nf;
        let corr = cov / ((saa / nf - (sa / nf).powi(2)) * (sbb / nf - (sb / nf).powi(2))).sqrt();
        // 4 standard errors of a null correlation
        assert!(corr.abs() < 4.0 / nf.sqrt(), "corr = {corr}");
    }
}
