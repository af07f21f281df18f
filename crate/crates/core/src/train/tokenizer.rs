//! Byte-level tokenizer with three special ids above the byte range.

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

/// `BOS` followed by the UTF-8 bytes of `text`.
pub fn encode(text: &str) -> Vec<u32> {
    std::iter::once(BOS).chain(text.bytes().map(u32::from)).collect()
}

/// `encode` plus a trailing `EOS`.
pub fn encode_document(text: &str) -> Vec<u32> {
    let mut ids = encode(text);
    ids.push(EOS);
    ids
}

/// Bytes of non-special ids, decoded lossily.
pub fn decode(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specials_sit_above_bytes() {
        assert_eq!(encode("a"), vec![BOS, 97]);
        assert_eq!(*encode_document("").last().unwrap(), EOS);
        assert_eq!(decode(&[BOS, 104, 105, EOS, PAD]), "hi");
    }

    proptest! {
        #[test]
        fn round_trips_text(s in "\\PC{0,40}") {
            prop_assert_eq!(decode(&encode_document(&s)), s);
        }
    }
}
