//! Byte-level tokenizer: ids 0..=255 are raw bytes, 256 is BOS, 257 is EOS.

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const VOCAB_SIZE: usize = 258;

pub type TokenSeq = Vec<u32>;

pub fn tokenize(text: &str) -> TokenSeq {
    text.bytes().map(u32::from).collect()
}

/// Drops BOS/EOS. Invalid UTF-8 is replaced, so arbitrary byte strings decode.
pub fn detokenize(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

pub fn detokenize_bytes(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect()
}

/// `[BOS] ++ bytes(part_0) ++ bytes(part_1) ++ ...`
pub fn with_bos(parts: &[&str]) -> TokenSeq {
    let mut out = vec![BOS];
    for p in parts {
        out.extend(tokenize(p));
    }
    out
}
