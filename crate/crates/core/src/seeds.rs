//! Hash-derived seeds and content fingerprints.
//!
//! Every random stream in the pipeline is derived from the master seed plus a
//! tag and a tuple of identifying parts, so any single repetition, class or
//! head can be regenerated in isolation and in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// A component of a derived seed.
#[derive(Clone, Copy, Debug)]
pub enum Part<'a> {
    U64(u64),
    Str(&'a str),
}

impl From<u64> for Part<'_> {
    fn from(v: u64) -> Self {
        Part::U64(v)
    }
}

impl From<usize> for Part<'_> {
    fn from(v: usize) -> Self {
        Part::U64(v as u64)
    }
}

impl<'a> From<&'a str> for Part<'a> {
    fn from(v: &'a str) -> Self {
        Part::Str(v)
    }
}

fn digest(tag: &str, parts: &[Part<'_>]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    for p in parts {
        match p {
            Part::U64(v) => {
                h.update([0u8]);
                h.update(v.to_le_bytes());
            }
            Part::Str(s) => {
                h.update([1u8]);
                h.update((s.len() as u64).to_le_bytes());
                h.update(s.as_bytes());
            }
        }
    }
    h.finalize().into()
}

/// A 64-bit seed derived from `tag` and `parts`.
pub fn derive_seed(tag: &str, parts: &[Part<'_>]) -> u64 {
    let d = digest(tag, parts);
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// A ChaCha8 stream seeded from the full 256-bit digest of `tag` and `parts`.
pub fn rng_for(tag: &str, parts: &[Part<'_>]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(digest(tag, parts))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Fingerprint of a serializable value: SHA-256 over its JSON encoding.
/// Structs serialize fields in declaration order and maps used in configs are
/// `BTreeMap`s, so the encoding is canonical.
pub fn fingerprint<T: Serialize + ?Sized>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("fingerprinted values serialize");
    sha256_hex(&json)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn seeds_depend_on_every_part() {
        let a = derive_seed("episode", &[7u64.into(), "s1".into(), 0usize.into()]);
        assert_eq!(a, derive_seed("episode", &[7u64.into(), "s1".into(), 0usize.into()]));
        assert_ne!(a, derive_seed("episode", &[7u64.into(), "s1".into(), 1usize.into()]));
        assert_ne!(a, derive_seed("episode", &[7u64.into(), "s3".into(), 0usize.into()]));
        assert_ne!(a, derive_seed("partition", &[7u64.into(), "s1".into(), 0usize.into()]));
        // length prefixes keep ("ab","c") and ("a","bc") apart
        assert_ne!(derive_seed("t", &["ab".into(), "c".into()]), derive_seed("t", &["a".into(), "bc".into()]));
    }

    #[test]
    fn streams_are_reproducible() {
        let x: Vec<u32> = rng_for("t", &[1u64.into()]).random_iter().take(4).collect();
        let y: Vec<u32> = rng_for("t", &[1u64.into()]).random_iter().take(4).collect();
        assert_eq!(x, y);
    }

    #[test]
    fn hex_encoding() {
        assert_eq!(hex(&[0, 15, 255]), "000fff");
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
