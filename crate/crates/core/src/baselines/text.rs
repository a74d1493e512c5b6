/// FNV-1a, 64-bit. Stable across platforms and processes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, b| (h ^ *b as u64).wrapping_mul(PRIME))
}

/// Lowercased alphanumeric runs of at least two characters.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_lowercase)
}

/// Hashed bag of words: each token adds one to bucket `hash(token) % dim`,
/// then the vector is L1-normalized unless it is all zeros.
pub fn hashed_text_vector(text: &str, dim: usize) -> Vec<f64> {
    assert!(dim >= 1, "hashed text dimension must be positive");
    let mut v = vec![0.0; dim];
    for token in tokenize(text) {
        v[(fnv1a64(token.as_bytes()) % dim as u64) as usize] += 1.0;
    }
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|x| *x /= total);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_text_is_zero() {
        assert_eq!(hashed_text_vector("", 8), vec![0.0; 8]);
        assert_eq!(hashed_text_vector("a ! ?", 4), vec![0.0; 4]);
    }

    #[test]
    fn single_token_mass() {
        let v = hashed_text_vector("rock rock rock", 8);
        assert_eq!(v.iter().filter(|x| **x > 0.0).count(), 1);
        assert_eq!(v.iter().sum::<f64>(), 1.0);
        assert_eq!(v[(fnv1a64(b"rock") % 8) as usize], 1.0);
    }

    #[test]
    fn case_and_punctuation_insensitive() {
        assert_eq!(hashed_text_vector("Rock, ROCK!", 16), hashed_text_vector("rock rock", 16));
    }
}
