//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by four specials.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const SEP: u32 = 258;
pub const PAD: u32 = 259;
pub const BYTE_VOCAB: usize = 260;

pub fn tokenize(text: &str) -> Vec<u32> {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b)).collect()
}

/// Inverse of [`tokenize_bytes`]; specials render as `<bos>`, `<eos>`,
/// `<sep>` and `<pad>`.
pub fn detokenize_bytes(tokens: &[u32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        match t {
            0..=255 => out.push(t as u8),
            BOS => out.extend_from_slice(b"<bos>"),
            EOS => out.extend_from_slice(b"<eos>"),
            SEP => out.extend_from_slice(b"<sep>"),
            PAD => out.extend_from_slice(b"<pad>"),
            _ => {
                return Err(Error::Decode {
                    id: t,
                    vocab_size: BYTE_VOCAB,
                })
            }
        }
    }
    Ok(out)
}

/// Lossy UTF-8 rendering of [`detokenize_bytes`].
pub fn detokenize(tokens: &[u32]) -> Result<String> {
    Ok(String::from_utf8_lossy(&detokenize_bytes(tokens)?).into_owned())
}

/// Reads a token stream file: one JSON array of integers per line.
pub fn read_token_stream(path: &Path) -> Result<Vec<Vec<u32>>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_token_stream(path: &Path, sequences: &[Vec<u32>]) -> Result<()> {
    let mut buf = Vec::new();
    for seq in sequences {
        serde_json::to_writer(&mut buf, seq)?;
        buf.push(b'\n');
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}
