//! Byte-level corpora: loading, train/val splitting, and a deterministic
//! synthetic text generator for self-contained experiments.

use std::path::Path;

use moelab_core::rng::SeededRng;
use moelab_core::{Error, Result};

/// Read a file as byte-level token ids (0-255).
pub fn load_corpus(path: &Path) -> Result<Vec<u16>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("corpus {}: {e}", path.display())))?;
    if bytes.is_empty() {
        return Err(Error::Data(format!("corpus {} is empty", path.display())));
    }
    Ok(bytes.into_iter().map(u16::from).collect())
}

/// Deterministic contiguous split: validation is the trailing fraction.
pub fn split_corpus(tokens: &[u16], val_fraction: f64) -> Result<(&[u16], &[u16])> {
    let val_len = (tokens.len() as f64 * val_fraction).round() as usize;
    let train_len = tokens.len().saturating_sub(val_len);
    if train_len < 2 || val_len < 2 {
        return Err(Error::Data(format!(
            "split {val_fraction} of {} tokens leaves train={train_len}, val={val_len}; both need >= 2",
            tokens.len()
        )));
    }
    Ok((&tokens[..train_len], &tokens[train_len..]))
}

const SENTENCE_LEN: (usize, usize) = (4, 13);
const WORDS: usize = 700;

/// Deterministic English-like filler text: seeded vocabulary with a skewed
/// rank distribution, sentence and paragraph structure. Same seed and size,
/// same bytes.
pub fn synthetic_corpus(seed: u64, min_bytes: usize) -> Vec<u8> {
    // distinct stream from any model/training seed usage
    let mut rng = SeededRng::new(seed ^ 0x7031_c0de);
    // letters weighted roughly by English frequency
    const LETTERS: &[u8] = b"etaoinshrdlucmfwypvbgkjqxz";
    let mut words: Vec<Vec<u8>> = Vec::with_capacity(WORDS);
    for _ in 0..WORDS {
        let len = 2 + rng.below(8);
        let mut w = Vec::with_capacity(len);
        for _ in 0..len {
            // triangular-ish skew toward common letters
            let a = rng.below(LETTERS.len());
            let b = rng.below(LETTERS.len());
            w.push(LETTERS[a.min(b)]);
        }
        words.push(w);
    }
    // rank weights ~ 1/(rank + 3), sampled via cumulative table
    let weights: Vec<f64> = (0..WORDS).map(|r| 1.0 / (r as f64 + 3.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut cumulative = Vec::with_capacity(WORDS);
    let mut acc = 0.0;
    for w in &weights {
        acc += w / total;
        cumulative.push(acc);
    }
    let pick = |rng: &mut SeededRng| -> usize {
        let u = rng.uniform(0.0, 1.0);
        cumulative.partition_point(|&c| c < u).min(WORDS - 1)
    };

    let mut out = Vec::with_capacity(min_bytes + 128);
    let mut sentences_in_paragraph = 0;
    while out.len() < min_bytes {
        let n_words = SENTENCE_LEN.0 + rng.below(SENTENCE_LEN.1 - SENTENCE_LEN.0 + 1);
        for i in 0..n_words {
            let w = &words[pick(&mut rng)];
            if i == 0 {
                out.push(w[0].to_ascii_uppercase());
                out.extend_from_slice(&w[1..]);
            } else {
                out.push(b' ');
                if i + 1 < n_words && rng.below(12) == 0 {
                    out.pop();
                    out.extend_from_slice(b", ");
                }
                out.extend_from_slice(w);
            }
        }
        out.push(b'.');
        sentences_in_paragraph += 1;
        if sentences_in_paragraph >= 5 + rng.below(6) {
            out.extend_from_slice(b"\n\n");
            sentences_in_paragraph = 0;
        } else {
            out.push(b' ');
        }
    }
    out
}
