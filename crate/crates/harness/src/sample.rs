//! Sampling: prior draws pushed through the flow stack and decoded, one
//! sentence per line, plus a distinct-sentence ratio as a cheap diversity
//! report.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rnf_core::data::Vocab;
use rnf_core::flows::FlowStack;
use rnf_core::nets::{DecodeMode, ParamStore, SeqVae};

use crate::{standard_normal_matrix, Result};

/// Draw `n` prior samples, map them through the stack, and decode. The same
/// seed yields the same sentences; temperature sampling consumes the same
/// RNG after the prior draw.
pub fn sample_sentences(
    model: &SeqVae,
    store: &ParamStore,
    stack: &FlowStack,
    n: usize,
    max_len: usize,
    mode: DecodeMode,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let z = standard_normal_matrix(&mut rng, n, model.config().latent);
    let z_final = if stack.is_empty() {
        z
    } else {
        stack.apply(&z)?.0
    };
    Ok(model.decode_sample(store, &z_final, max_len, mode, &mut rng)?)
}

/// Token ids to text lines.
pub fn render_sentences(vocab: &Vocab, sentences: &[Vec<usize>]) -> Result<Vec<String>> {
    let mut lines = Vec::with_capacity(sentences.len());
    for ids in sentences {
        lines.push(vocab.decode(ids)?.join(" "));
    }
    Ok(lines)
}

/// Write one sentence per line; zero sentences produce an empty file.
pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in lines {
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

/// Fraction of pairwise-distinct lines; `None` for an empty batch.
pub fn distinct_ratio(lines: &[String]) -> Option<f64> {
    if lines.is_empty() {
        return None;
    }
    let distinct: HashSet<&str> = lines.iter().map(String::as_str).collect();
    Some(distinct.len() as f64 / lines.len() as f64)
}
