//! `LIEQCORP` token files: magic, version u32, vocab bound u32, then
//! `[len u32][len x u32]` records until end of file.

use std::path::Path;

use lieq_core::TokenCorpus;

use crate::container;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LIEQCORP";
pub const VERSION: u32 = 1;

pub fn encode_corpus(corpus: &TokenCorpus) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&corpus.vocab_bound().to_le_bytes());
    for seq in corpus.sequences() {
        out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
        for t in seq {
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    out
}

pub fn decode_corpus(bytes: &[u8]) -> Result<TokenCorpus> {
    container::check_magic(bytes, MAGIC)?;
    container::check_version(bytes, VERSION)?;
    let vocab = container::read_u32(bytes, 12).ok_or_else(|| Error::Truncated("vocab bound".into()))?;
    let mut at = 16;
    let mut sequences = Vec::new();
    while at < bytes.len() {
        let record = sequences.len();
        let len = container::read_u32(bytes, at)
            .ok_or_else(|| Error::Truncated(format!("length of record {record}")))? as usize;
        at += 4;
        let body = len
            .checked_mul(4)
            .and_then(|n| bytes.get(at..at + n))
            .ok_or_else(|| Error::Truncated(format!("record {record}")))?;
        sequences.push(body.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect());
        at += len * 4;
    }
    Ok(TokenCorpus::new(vocab, sequences)?)
}

pub fn save_corpus(corpus: &TokenCorpus, path: &Path) -> Result<()> {
    container::write_file(path, &encode_corpus(corpus))
}

pub fn load_corpus(path: &Path) -> Result<TokenCorpus> {
    decode_corpus(&container::read_file(path)?)
}
