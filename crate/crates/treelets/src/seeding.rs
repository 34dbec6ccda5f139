//! Deterministic random-number streams.
//!
//! Every stochastic routine in the crate takes a `u64` seed and derives its
//! generators through [`stream_rng`]. Substreams are independent by stream
//! index rather than by seed arithmetic, so nested procedures (folds,
//! bootstrap replicates, repeated trials) can draw from disjoint streams
//! without coordinating seed offsets.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Generator for `(seed, stream)`. Identical inputs yield identical output
/// sequences on every platform; distinct stream indices under the same seed
/// yield statistically independent sequences.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives an independent child seed from a root seed and an index, for
/// experiments that hand each replicate its own seeded generator.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    stream_rng(seed, index).random()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_inputs_reproduce() {
        let a: Vec<u64> = (0..8).map(|_| stream_rng(42, 3).random()).collect();
        let mut rng = stream_rng(42, 3);
        let b: Vec<u64> = (0..8).map(|_| rng.random()).collect();
        assert_eq!(a[0], b[0]);
        let c: Vec<u64> = {
            let mut rng = stream_rng(42, 3);
            (0..8).map(|_| rng.random()).collect()
        };
        assert_eq!(b, c);
    }

    #[test]
    fn streams_differ() {
        let mut r0 = stream_rng(42, 0);
        let mut r1 = stream_rng(42, 1);
        let a: Vec<u64> = (0..4).map(|_| r0.random()).collect();
        let b: Vec<u64> = (0..4).map(|_| r1.random()).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn seeds_differ() {
        let a: u64 = stream_rng(1, 0).random();
        let b: u64 = stream_rng(2, 0).random();
        assert_ne!(a, b);
    }

    /// Frozen first draws; guards against an accidental generator or
    /// seeding-scheme change that would silently invalidate stored results.
    #[test]
    fn sequence_is_frozen() {
        let mut rng = stream_rng(0, 0);
        assert_eq!(rng.random::<u64>(), 13486662071293341567);
        assert_eq!(rng.random::<u64>(), 14267822071968393595);
        assert_eq!(stream_rng(42, 7).random::<u64>(), 18398896560331411741);
    }
}
