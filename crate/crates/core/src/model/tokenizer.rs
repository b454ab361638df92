use std::ops::Range;

use crate::dist::{TokenId, TokenSeq};
use crate::error::{Error, Result};

/// End-of-sequence id of the byte tokenizer, one past the byte range.
pub const BYTE_EOS: TokenId = TokenId(256);

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> TokenSeq;

    fn decode(&self, tokens: &[TokenId]) -> Result<String>;

    /// Tokens together with the byte span of `text` each one covers.
    fn encode_with_offsets(&self, _text: &str) -> Result<Vec<(TokenId, Range<usize>)>> {
        Err(Error::OffsetsUnavailable)
    }

    fn vocab_size(&self) -> usize;

    fn eos(&self) -> TokenId;
}

/// One token per byte, plus an end-of-sequence id.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> TokenSeq {
        text.bytes().map(|b| TokenId(b as u32)).collect()
    }

    /// The end-of-sequence marker produces no text.
    fn decode(&self, tokens: &[TokenId]) -> Result<String> {
        let mut bytes = Vec::with_capacity(tokens.len());
        for &t in tokens {
            match t.0 {
                b @ 0..=255 => bytes.push(b as u8),
                256 => {}
                other => return Err(Error::UnknownToken(other)),
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    fn encode_with_offsets(&self, text: &str) -> Result<Vec<(TokenId, Range<usize>)>> {
        Ok(text.bytes().enumerate().map(|(i, b)| (TokenId(b as u32), i..i + 1)).collect())
    }

    fn vocab_size(&self) -> usize {
        257
    }

    fn eos(&self) -> TokenId {
        BYTE_EOS
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::tokens;
    use proptest::prelude::*;

    #[test]
    fn bytes_round_trip() {
        let t = ByteTokenizer;
        assert_eq!(t.encode("ab"), tokens(&[97, 98]));
        assert_eq!(t.decode(&tokens(&[97, 98])).unwrap(), "ab");
        assert!(t.encode("").is_empty());
        assert_eq!(t.decode(&[]).unwrap(), "");
    }

    #[test]
    fn unknown_id() {
        assert!(matches!(ByteTokenizer.decode(&tokens(&[300])), Err(Error::UnknownToken(300))));
    }

    #[test]
    fn multiline_code() {
        let src = "fn main() {\n    println!(\"hi\");\r\n}\n\n";
        assert_eq!(ByteTokenizer.decode(&ByteTokenizer.encode(src)).unwrap(), src);
    }

    proptest! {
        #[test]
        fn any_string_round_trips(s in any::<String>()) {
            let t = ByteTokenizer;
            prop_assert_eq!(t.decode(&t.encode(&s)).unwrap(), s);
        }
    }
}
