//! Named random sub-streams derived from a single master seed.
//!
//! Every consumer of randomness asks for a stream by `(purpose, index)`, so a
//! client's draws never depend on how many other clients were processed first
//! or on which thread ran them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    DatasetClient = 1,
    DatasetShared = 2,
    ShardSizes = 3,
    Partition = 4,
    Profile = 5,
    ClientSampling = 6,
    LocalSgd = 7,
    RoundCosts = 8,
}

/// Stream for `purpose` and `index` under `seed`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) ^ index);
    rng
}

/// Stream for a `(round, client)` pair, used by local SGD.
pub fn round_client_stream(seed: u64, round: usize, client: usize) -> ChaCha8Rng {
    stream(
        seed,
        Purpose::LocalSgd,
        ((round as u64) << 24) ^ client as u64,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, Purpose::DatasetClient, 3).random();
        let b: u64 = stream(7, Purpose::DatasetClient, 3).random();
        let c: u64 = stream(7, Purpose::DatasetClient, 4).random();
        let d: u64 = stream(7, Purpose::Profile, 3).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
