use sha2::{Digest, Sha256};

/// First eight bytes of the SHA-256 of the length-prefixed parts.
pub fn hash64(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Seed of the policy randomness for one sweep cell.
pub fn episode_seed(base_seed: u64, policy_name: &str, param_value: f64, seed_index: usize) -> u64 {
    hash64(&[
        &base_seed.to_le_bytes(),
        policy_name.as_bytes(),
        &param_value.to_bits().to_le_bytes(),
        &(seed_index as u64).to_le_bytes(),
    ])
}

/// Seed of the environment for one seed index, shared by every policy.
pub fn environment_seed(base_seed: u64, seed_index: usize) -> u64 {
    hash64(&[
        &base_seed.to_le_bytes(),
        b"env",
        &(seed_index as u64).to_le_bytes(),
    ])
}
