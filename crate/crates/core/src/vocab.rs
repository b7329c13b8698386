//! Byte-level vocabulary.
//!
//! Ids `0..=255` are raw bytes, followed by two specials. Every byte string
//! encodes without loss, so the built-in backends never see an unknown token.

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Ordered token ids.
pub type TokenSeq = Vec<TokenId>;

pub const BYTE_TOKENS: usize = 256;
pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const VOCAB_SIZE: usize = 258;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Vocab;

impl Vocab {
    pub const fn size(&self) -> usize {
        VOCAB_SIZE
    }

    pub const fn bos(&self) -> TokenId {
        BOS
    }

    pub const fn eos(&self) -> TokenId {
        EOS
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id as usize >= BYTE_TOKENS
    }
}

/// One token per byte. No BOS or EOS is inserted.
pub fn encode(text: impl AsRef<[u8]>) -> TokenSeq {
    text.as_ref().iter().map(|&b| TokenId::from(b)).collect()
}

/// Decodes byte tokens back to bytes.
///
/// With `strict` set, a special token is an error; otherwise specials are
/// skipped. Ids beyond the vocabulary are always rejected.
pub fn decode(tokens: &[TokenId], strict: bool) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(tokens.len());
    for &id in tokens {
        match id {
            0..=255 => out.push(id as u8),
            BOS | EOS if !strict => {}
            BOS | EOS => return Err(Error::SpecialTokenInOutput(id)),
            _ => {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab_size: VOCAB_SIZE,
                })
            }
        }
    }
    Ok(out)
}

/// Checks that every id fits a vocabulary of `vocab_size`.
pub fn validate(tokens: &[TokenId], vocab_size: usize) -> Result<()> {
    match tokens.iter().find(|&&id| id as usize >= vocab_size) {
        Some(&id) => Err(Error::TokenOutOfRange { id, vocab_size }),
        None => Ok(()),
    }
}

/// Incremental UTF-8 assembly for streamed byte tokens.
///
/// Bytes are held back until they complete a valid character, so the pieces
/// returned by [`Utf8Stream::push`] concatenate to the lossy decoding of the
/// whole byte sequence.
#[derive(Debug, Default)]
pub struct Utf8Stream {
    pending: Vec<u8>,
}

impl Utf8Stream {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, token: TokenId) -> String {
        if token as usize >= BYTE_TOKENS {
            return String::new();
        }
        self.pending.push(token as u8);
        let mut out = String::new();
        loop {
            match std::str::from_utf8(&self.pending) {
                Ok(s) => {
                    out.push_str(s);
                    self.pending.clear();
                    return out;
                }
                Err(e) => {
                    let valid = e.valid_up_to();
                    out.push_str(std::str::from_utf8(&self.pending[..valid]).unwrap());
                    match e.error_len() {
                        // incomplete sequence at the end: wait for more bytes
                        None => {
                            self.pending.drain(..valid);
                            return out;
                        }
                        Some(bad) => {
                            out.push(char::REPLACEMENT_CHARACTER);
                            self.pending.drain(..valid + bad);
                        }
                    }
                }
            }
        }
    }

    /// Emits whatever is still buffered.
    pub fn finish(&mut self) -> String {
        let s = String::from_utf8_lossy(&self.pending).into_owned();
        self.pending.clear();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_examples() {
        assert!(encode("").is_empty());
        assert_eq!(encode("ab"), vec![97, 98]);
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode(&[104, 105], true).unwrap(), b"hi");
        assert!(decode(&[], true).unwrap().is_empty());
    }

    #[test]
    fn specials_in_strict_mode() {
        assert!(matches!(
            decode(&[104, EOS], true),
            Err(Error::SpecialTokenInOutput(EOS))
        ));
        assert_eq!(decode(&[BOS, 104, EOS], false).unwrap(), b"h");
        assert!(matches!(
            decode(&[300], false),
            Err(Error::TokenOutOfRange { id: 300, .. })
        ));
    }

    #[test]
    fn utf8_stream_holds_partial_chars() {
        let text = "héllo ✓";
        let mut s = Utf8Stream::new();
        let mut pieces: Vec<String> = encode(text).into_iter().map(|t| s.push(t)).collect();
        pieces.push(s.finish());
        assert_eq!(pieces.concat(), text);
        // 'é' is two bytes: the first yields nothing
        assert_eq!(pieces[1], "");
        assert_eq!(pieces[2], "é");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn bytes_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            prop_assert_eq!(decode(&encode(&bytes), true).unwrap(), bytes);
        }

        #[test]
        fn tokens_round_trip(tokens in proptest::collection::vec(0u32..256, 0..64)) {
            prop_assert_eq!(encode(decode(&tokens, true).unwrap()), tokens);
        }

        #[test]
        fn utf8_stream_matches_lossy(bytes in proptest::collection::vec(any::<u8>(), 0..32)) {
            let mut s = Utf8Stream::new();
            let mut out: String = encode(&bytes).into_iter().map(|t| s.push(t)).collect();
            out.push_str(&s.finish());
            prop_assert_eq!(out, String::from_utf8_lossy(&bytes).into_owned());
        }
    }
}
