//! Byte-level text pipeline (vocabulary of 256).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SequenceBatch;
use crate::error::{Error, Result};

pub const BYTE_VOCAB: usize = 256;

pub fn tokenize_bytes(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::TokenOutOfRange {
                id,
                vocab: BYTE_VOCAB,
            })
        })
        .collect()
}

pub fn load_corpus(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(tokenize_bytes(&bytes))
}

/// `batch` windows of `context_len + 1` tokens at seeded random offsets.
pub fn batch_text(
    corpus: &[usize],
    context_len: usize,
    batch: usize,
    seed: u64,
) -> Result<SequenceBatch> {
    let window = context_len + 1;
    if corpus.len() <= window {
        return Err(Error::CorpusTooShort {
            len: corpus.len(),
            window,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts = corpus.len() - window + 1;
    let mut tokens = Vec::with_capacity(batch * window);
    for _ in 0..batch {
        let s = rng.gen_range(0..starts);
        tokens.extend_from_slice(&corpus[s..s + window]);
    }
    SequenceBatch::discrete(tokens, batch, window, BYTE_VOCAB)
}

/// Entropy (nats) of the empirical byte distribution.
pub fn unigram_entropy(corpus: &[usize]) -> f64 {
    let mut counts = [0usize; BYTE_VOCAB];
    for &t in corpus {
        counts[t.min(BYTE_VOCAB - 1)] += 1;
    }
    let n = corpus.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}
