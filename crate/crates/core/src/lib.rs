//! Cross-device user matching from browse logs.
//!
//! The pipeline links device-level identities by pairwise classification:
//!
//! 1. [`corpus`] loads browse logs, fid→URL/title maps, and training pairs.
//! 2. [`profiles`] aggregates each user into TF-IDF vectors (title words,
//!    event ids, URL prefixes at four levels) plus temporal histograms.
//! 3. [`keyurl`] ranks URLs by how much more often they co-occur in matching
//!    pairs than in random pairs (lift), and assigns rank groups/buckets.
//! 4. [`features`] extracts a fixed 657-dimensional feature vector per user
//!    pair across three pillars: general similarity, key-URL group counts,
//!    and fine-grained footprints.
//! 5. [`sampling`] builds the training set by iterative negative sampling
//!    with a logistic-regression kernel model.
//! 6. [`learners`] houses the in-repo logistic regression and gradient
//!    boosted decision trees plus ranking metrics.
//! 7. [`pipeline`] runs inference: candidate blocking, LR filtering, GBDT
//!    scoring, submission selection, and evaluation.
//! 8. [`synthgen`] generates a seeded synthetic corpus with ground truth so
//!    the whole pipeline can be verified end to end.
//!
//! All randomness flows from explicit seeds and every stage writes
//! byte-deterministic artifacts, independent of worker-thread count.

pub mod config;
pub mod corpus;
mod error;
pub mod features;
pub mod keyurl;
pub mod learners;
pub mod pipeline;
pub mod profiles;
pub mod sampling;
pub mod stages;
pub mod synthgen;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};

pub(crate) mod seeding {
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use sha2::{Digest, Sha256};

    /// Derive an independent RNG stream from a base seed and a label.
    ///
    /// Hash-based derivation keeps per-entity streams stable no matter how
    /// work is split across threads.
    pub fn derive_rng(seed: u64, stream: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(seed.to_le_bytes());
        hasher.update(stream.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }
}
