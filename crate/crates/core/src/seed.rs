//! Seed derivation.
//!
//! A derived seed is the first eight bytes (little endian) of
//! `SHA-256("<label>:<master>")` with the top bit cleared, so every seed is
//! also a valid TOML integer and a config echo can be pasted back into a
//! manifest. Distinct labels give independent streams, so adding a consumer
//! never shifts the seeds of existing ones.

use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, label: &str) -> u64 {
    let digest = Sha256::digest(format!("{label}:{master}").as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes) & (i64::MAX as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_label_sensitive() {
        assert_eq!(derive_seed(7, "data"), derive_seed(7, "data"));
        assert_ne!(derive_seed(7, "data"), derive_seed(7, "init"));
        assert_ne!(derive_seed(7, "data"), derive_seed(8, "data"));
        // frozen so manifests stay reproducible across releases
        let d = Sha256::digest(b"data:7");
        let mut want = [0u8; 8];
        want.copy_from_slice(&d[..8]);
        want[7] &= 0x7f;
        assert_eq!(derive_seed(7, "data").to_le_bytes(), want);
        for m in 0..200 {
            assert!(derive_seed(m, "init") <= i64::MAX as u64);
        }
    }
}
