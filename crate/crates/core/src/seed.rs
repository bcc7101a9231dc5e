//! Seed derivation. Every random stage draws from
//! `derive_seed(root, stage, index)`, so a single root seed fixes a whole run.

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn derive_seed(root: u64, stage: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(stage.as_bytes())) ^ splitmix64(index))
}

/// Seed for a per-user stage, keyed by the user id rather than its position.
pub fn user_seed(root: u64, stage: &str, user: &str) -> u64 {
    derive_seed(root, stage, fnv1a(user.as_bytes()))
}
