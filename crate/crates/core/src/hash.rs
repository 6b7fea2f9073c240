use sha2::{Digest, Sha256};

/// 64-bit content hash: the first eight bytes of SHA-256, as 16 hex digits.
pub fn content_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_vector() {
        // SHA-256("abc") begins ba7816bf8f01cfea.
        assert_eq!(content_hash(b"abc"), "ba7816bf8f01cfea");
    }
}
