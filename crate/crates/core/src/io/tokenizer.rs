//! Byte-level tokenizer: ids `0..256` are raw bytes, 256 is end-of-text.

use std::path::Path;

use crate::error::{Error, Result};

pub const EOT: usize = 256;
pub const VOCAB_SIZE: usize = 257;

/// Bytes of `text` as ids, without the end-of-text marker.
pub fn encode(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

/// Token stream of a document: its bytes followed by [`EOT`].
pub fn tokenize(text: &str) -> Vec<usize> {
    let mut ids = encode(text);
    ids.push(EOT);
    ids
}

/// Reads and tokenizes a UTF-8 file.
pub fn tokenize_file(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(tokenize(&text))
}

/// Inverse of [`tokenize`]: drops end-of-text ids and decodes the bytes.
pub fn detokenize(ids: &[usize]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            EOT => {}
            b if b < 256 => bytes.push(b as u8),
            bad => return Err(Error::Contract(format!("token id {bad} outside byte vocabulary"))),
        }
    }
    String::from_utf8(bytes).map_err(|e| Error::Contract(format!("decoded bytes are not UTF-8: {e}")))
}
