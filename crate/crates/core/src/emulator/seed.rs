//! Counter-mode seed derivation: every random stream in a dataset is a pure
//! function of the master seed and a path of integers.

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `derive_seed(s, &[a, b])` = splitmix64(splitmix64(s ^ splitmix64(a)) ^ splitmix64(b)).
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(master, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}
