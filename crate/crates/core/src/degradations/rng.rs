use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Recorded in every manifest so a reader knows how the corruptions were drawn.
pub const RNG_ALGORITHM: &str = "chacha8 (rand_chacha seed_from_u64) + box-muller";

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Per-entry seed: first 8 bytes (LE) of SHA-256 over the global seed, the
/// image index and the task id.
pub fn derive_seed(global_seed: u64, image_index: u64, task_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(image_index.to_le_bytes());
    h.update(task_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_separate_entries() {
        let a = derive_seed(7, 0, "noise30");
        assert_eq!(a, derive_seed(7, 0, "noise30"));
        assert_ne!(a, derive_seed(7, 1, "noise30"));
        assert_ne!(a, derive_seed(7, 0, "noise50"));
        assert_ne!(a, derive_seed(8, 0, "noise30"));
    }
}
