//! Corpus handling: vocabulary, batching, and synthetic datasets.
//!
//! Real corpora arrive as UTF-8 text, one whitespace-tokenized sentence per
//! line, one file per split. [`synthetic_grammar`] generates a small
//! template-grammar corpus with latent topic structure for desk-scale
//! experiments, and [`swiss_roll`] produces the classic curved 2-manifold
//! for geometry demos.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

/// Number of reserved token ids.
pub const RESERVED: usize = 4;

/// Sentences longer than this are truncated before any counting.
pub const MAX_SENTENCE_LEN: usize = 200;

const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token to dense-id map with four reserved ids. Tokens are ranked by
/// corpus frequency with lexicographic tiebreak, and everything beyond the
/// cap encodes to `UNK`.
#[derive(Clone, Debug)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.id_to_token
            .get(id)
            .map(|s| s.as_str())
            .ok_or(CoreError::VocabOutOfRange {
                id,
                size: self.id_to_token.len(),
            })
    }

    pub fn id(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&UNK)
    }

    /// Encode one sentence, truncating to [`MAX_SENTENCE_LEN`] tokens.
    pub fn encode_line(&self, line: &str) -> Vec<usize> {
        tokenize(line)
            .take(MAX_SENTENCE_LEN)
            .map(|t| self.id(&t))
            .collect()
    }

    /// Decode ids back to tokens; reserved ids render as their markers.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.token(i).map(String::from)).collect()
    }

    /// Persist as `token<TAB>id` lines in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for (id, tok) in self.id_to_token.iter().enumerate() {
            writeln!(f, "{tok}\t{id}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut id_to_token = Vec::new();
        for (lineno, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.split_once('\t').ok_or_else(|| CoreError::Parse {
                what: format!("vocab line {} lacks a tab", lineno + 1),
            })?;
            let id: usize = id.parse().map_err(|_| CoreError::Parse {
                what: format!("vocab line {}: bad id {id:?}", lineno + 1),
            })?;
            if id != id_to_token.len() {
                return Err(CoreError::Parse {
                    what: format!("vocab line {}: ids not dense", lineno + 1),
                });
            }
            id_to_token.push(tok.to_string());
        }
        if id_to_token.len() < RESERVED {
            return Err(CoreError::Parse {
                what: "vocab file missing reserved tokens".to_string(),
            });
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            id_to_token,
            token_to_id,
        })
    }
}

fn tokenize(line: &str) -> impl Iterator<Item = String> + '_ {
    line.split_whitespace().map(|t| t.to_lowercase())
}

/// Build a vocabulary from text lines. Sentences are truncated to
/// [`MAX_SENTENCE_LEN`] tokens before counting, tokens are ranked by
/// frequency then lexicographically, and the top `cap - 4` survive next to
/// the reserved ids.
pub fn build_vocab<I: IntoIterator<Item = String>>(lines: I, cap: usize) -> Result<Vocab> {
    if cap < RESERVED + 1 {
        return Err(CoreError::Domain {
            op: "vocabulary cap must exceed the reserved ids",
        });
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut nonempty = false;
    for line in lines {
        for tok in tokenize(&line).take(MAX_SENTENCE_LEN) {
            nonempty = true;
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    if !nonempty {
        return Err(CoreError::EmptyInput {
            what: "vocabulary text stream",
        });
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(cap - RESERVED);

    let mut id_to_token: Vec<String> =
        RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    id_to_token.extend(ranked.into_iter().map(|(t, _)| t));
    let token_to_id = id_to_token
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    Ok(Vocab {
        id_to_token,
        token_to_id,
    })
}

/// Sentences encoded as id sequences, each at most [`MAX_SENTENCE_LEN`]
/// tokens (before the EOS the batcher appends).
#[derive(Clone, Debug)]
pub struct Corpus {
    sentences: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn new(sentences: Vec<Vec<usize>>, vocab_size: usize) -> Result<Self> {
        for s in &sentences {
            if s.len() > MAX_SENTENCE_LEN {
                return Err(CoreError::Domain {
                    op: "corpus sentence exceeds the length cap",
                });
            }
            for &id in s {
                if id >= vocab_size {
                    return Err(CoreError::VocabOutOfRange {
                        id,
                        size: vocab_size,
                    });
                }
            }
        }
        Ok(Corpus { sentences })
    }

    pub fn from_lines<I: IntoIterator<Item = String>>(lines: I, vocab: &Vocab) -> Result<Self> {
        let sentences: Vec<Vec<usize>> = lines
            .into_iter()
            .map(|l| vocab.encode_line(&l))
            .filter(|s| !s.is_empty())
            .collect();
        Corpus::new(sentences, vocab.size())
    }

    pub fn load(path: &Path, vocab: &Vocab) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let lines: Vec<String> = std::io::BufReader::new(f)
            .lines()
            .collect::<std::io::Result<_>>()?;
        Corpus::from_lines(lines, vocab)
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn sentence(&self, i: usize) -> &[usize] {
        &self.sentences[i]
    }

    pub fn sentences(&self) -> &[Vec<usize>] {
        &self.sentences
    }

    /// Token count including the EOS each sentence gains in batches.
    pub fn token_count_with_eos(&self) -> usize {
        self.sentences.iter().map(|s| s.len() + 1).sum()
    }
}

/// One padded batch. `ids` is `B x L` row-major where each row ends with
/// EOS and is padded with PAD; `lengths` counts real tokens including EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    batch: usize,
    len: usize,
    lengths: Vec<usize>,
}

impl TokenBatch {
    /// Assemble from raw sentences (without EOS; it is appended here).
    pub fn from_sentences(sentences: &[&[usize]]) -> Result<TokenBatch> {
        if sentences.is_empty() {
            return Err(CoreError::EmptyInput {
                what: "batch sentence list",
            });
        }
        let lengths: Vec<usize> = sentences.iter().map(|s| s.len() + 1).collect();
        let len = *lengths.iter().max().expect("nonempty");
        let batch = sentences.len();
        let mut ids = vec![PAD; batch * len];
        for (r, s) in sentences.iter().enumerate() {
            ids[r * len..r * len + s.len()].copy_from_slice(s);
            ids[r * len + s.len()] = EOS;
        }
        Ok(TokenBatch {
            ids,
            batch,
            len,
            lengths,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn max_len(&self) -> usize {
        self.len
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.len..(r + 1) * self.len]
    }

    /// Target id at position `t` for every row.
    pub fn targets_at(&self, t: usize) -> Vec<usize> {
        (0..self.batch).map(|r| self.ids[r * self.len + t]).collect()
    }

    /// Decoder input ids at position `t`: BOS at `t = 0`, otherwise the
    /// previous target.
    pub fn inputs_at(&self, t: usize) -> Vec<usize> {
        if t == 0 {
            vec![BOS; self.batch]
        } else {
            self.targets_at(t - 1)
        }
    }

    /// `[B, 1]` mask: 1.0 where position `t` is a real token (incl. EOS).
    pub fn mask_col(&self, t: usize) -> Tensor {
        let col: Vec<f64> = self
            .lengths
            .iter()
            .map(|&l| if t < l { 1.0 } else { 0.0 })
            .collect();
        Tensor::matrix(self.batch, 1, col).expect("mask col")
    }

    /// Real-token count over the whole batch (incl. EOS).
    pub fn token_count(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Pad every row out to `len`, leaving content untouched. Used by
    /// padding-invariance tests.
    pub fn repadded(&self, len: usize) -> Result<TokenBatch> {
        if len < self.len {
            return Err(CoreError::Domain {
                op: "repadded length below batch length",
            });
        }
        let mut ids = vec![PAD; self.batch * len];
        for r in 0..self.batch {
            ids[r * len..r * len + self.len].copy_from_slice(self.row(r));
        }
        Ok(TokenBatch {
            ids,
            batch: self.batch,
            len,
            lengths: self.lengths.clone(),
        })
    }
}

/// Seeded epoch batcher: shuffles sentence order per epoch, then yields
/// consecutive padded batches (the trailing short batch included).
pub struct Batcher<'a> {
    corpus: &'a Corpus,
    batch_size: usize,
    order: Vec<usize>,
    next: usize,
}

impl<'a> Batcher<'a> {
    pub fn new(corpus: &'a Corpus, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(CoreError::Domain {
                op: "batch size must be positive",
            });
        }
        if corpus.is_empty() {
            return Err(CoreError::EmptyInput { what: "corpus" });
        }
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        Ok(Batcher {
            corpus,
            batch_size,
            order,
            next: 0,
        })
    }

    /// Sentence visit order for this epoch.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn batches_total(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Skip the first `n` batches; used for mid-epoch resume. Named to
    /// avoid colliding with `Iterator::skip`, which would win method
    /// resolution with its by-value receiver.
    pub fn skip_batches(&mut self, n: usize) {
        self.next = (self.next + n * self.batch_size).min(self.order.len());
    }
}

impl<'a> Iterator for Batcher<'a> {
    type Item = TokenBatch;

    fn next(&mut self) -> Option<TokenBatch> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let rows: Vec<&[usize]> = self.order[self.next..end]
            .iter()
            .map(|&i| self.corpus.sentence(i))
            .collect();
        self.next = end;
        Some(TokenBatch::from_sentences(&rows).expect("nonempty slice"))
    }
}

// ---------------------------------------------------------------------------
// Synthetic template grammar.
//
// Four topics, each with two fixed-shape templates. A sentence is drawn by
// picking a topic uniformly, a template uniformly within the topic, and each
// slot's filler uniformly from its word list. Slots never share fillers
// across positions inside a template, so the unigram distribution is exactly
// enumerable.

struct Slot(&'static [&'static str]);

struct Template(&'static [Slot]);

const WEATHER_T1: Template = Template(&[
    Slot(&["the"]),
    Slot(&["morning", "evening"]),
    Slot(&["rain", "snow", "wind"]),
    Slot(&["was"]),
    Slot(&["cold", "bright"]),
]);
const WEATHER_T2: Template = Template(&[
    Slot(&["cold", "bright"]),
    Slot(&["rain", "snow"]),
    Slot(&["fell"]),
    Slot(&["over"]),
    Slot(&["the"]),
    Slot(&["harbor", "valley", "road"]),
]);
const MARKET_T1: Template = Template(&[
    Slot(&["the"]),
    Slot(&["traders", "farmers"]),
    Slot(&["sold", "bought"]),
    Slot(&["grain", "wool", "bread"]),
    Slot(&["quickly", "slowly"]),
]);
const MARKET_T2: Template = Template(&[
    Slot(&["the"]),
    Slot(&["price"]),
    Slot(&["of"]),
    Slot(&["grain", "wool", "tea"]),
    Slot(&["rose"]),
    Slot(&["over"]),
    Slot(&["the"]),
    Slot(&["morning", "evening"]),
    Slot(&["quickly", "slowly"]),
]);
const TRAVEL_T1: Template = Template(&[
    Slot(&["we", "they"]),
    Slot(&["sailed", "walked"]),
    Slot(&["toward", "past"]),
    Slot(&["the"]),
    Slot(&["harbor", "valley", "bridge"]),
]);
const TRAVEL_T2: Template = Template(&[
    Slot(&["the"]),
    Slot(&["road", "bridge"]),
    Slot(&["to"]),
    Slot(&["the"]),
    Slot(&["harbor", "valley"]),
    Slot(&["was"]),
    Slot(&["warm", "cold"]),
]);
const KITCHEN_T1: Template = Template(&[
    Slot(&["she", "he"]),
    Slot(&["baked", "tasted"]),
    Slot(&["the"]),
    Slot(&["bread", "soup", "tea"]),
]);
const KITCHEN_T2: Template = Template(&[
    Slot(&["she", "he"]),
    Slot(&["sold", "bought"]),
    Slot(&["the"]),
    Slot(&["warm"]),
    Slot(&["bread", "soup", "tea"]),
    Slot(&["this"]),
    Slot(&["morning", "evening"]),
]);

const TOPICS: [[&Template; 2]; 4] = [
    [&WEATHER_T1, &WEATHER_T2],
    [&MARKET_T1, &MARKET_T2],
    [&TRAVEL_T1, &TRAVEL_T2],
    [&KITCHEN_T1, &KITCHEN_T2],
];

/// Exact unigram distribution of the grammar as (token, probability) pairs,
/// by enumeration over topics, templates, and slot fillers. Probabilities
/// are per-token (normalized by expected sentence length).
pub fn grammar_unigram_distribution() -> Vec<(String, f64)> {
    let mut mass: HashMap<String, f64> = HashMap::new();
    let mut expected_len = 0.0;
    let sentence_p = 1.0 / (TOPICS.len() * 2) as f64;
    for topic in &TOPICS {
        for template in topic {
            expected_len += sentence_p * template.0.len() as f64;
            for slot in template.0 {
                let word_p = sentence_p / slot.0.len() as f64;
                for &w in slot.0 {
                    *mass.entry(w.to_string()).or_insert(0.0) += word_p;
                }
            }
        }
    }
    let mut out: Vec<(String, f64)> = mass
        .into_iter()
        .map(|(w, m)| (w, m / expected_len))
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Analytic per-token unigram entropy of the grammar, in nats.
pub fn grammar_unigram_entropy() -> f64 {
    grammar_unigram_distribution()
        .iter()
        .map(|(_, p)| if *p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum()
}

/// Text lines of the synthetic corpus; deterministic under `seed`.
pub fn synthetic_grammar_lines(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut lines = Vec::with_capacity(n);
    for _ in 0..n {
        let topic = &TOPICS[rng.random_range(0..TOPICS.len())];
        let template = topic[rng.random_range(0..2)];
        let words: Vec<&str> = template
            .0
            .iter()
            .map(|slot| slot.0[rng.random_range(0..slot.0.len())])
            .collect();
        lines.push(words.join(" "));
    }
    lines
}

/// Synthetic corpus plus its vocabulary. Sentences come from a fixed
/// four-topic template grammar (about forty word types, lengths five to
/// eight), giving latent structure a model can pick up at desk scale.
pub fn synthetic_grammar(n: usize, seed: u64) -> Result<(Corpus, Vocab)> {
    // Rank every grammar word by its analytic mass instead of a sampled
    // count so the vocabulary is identical for every (n, seed).
    let mut ranked = grammar_unigram_distribution();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    let mut id_to_token: Vec<String> =
        RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
    id_to_token.extend(ranked.into_iter().map(|(w, _)| w));
    let token_to_id: HashMap<String, usize> = id_to_token
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    let vocab = Vocab {
        id_to_token,
        token_to_id,
    };

    let lines = synthetic_grammar_lines(n, seed);
    let sentences: Vec<Vec<usize>> = lines.iter().map(|l| vocab.encode_line(l)).collect();
    let corpus = Corpus::new(sentences, vocab.size())?;
    Ok((corpus, vocab))
}

/// Swiss-roll point cloud: ambient positions `(t cos t, h, t sin t)` with
/// `t` in `[1.5 pi, 4.5 pi]`, plus isotropic Gaussian noise, and the 2-D
/// intrinsic coordinates `(arc length s(t), h)`.
pub struct SwissRoll {
    /// `n x 3` ambient positions.
    pub points: Tensor,
    /// `n x 2` intrinsic coordinates.
    pub intrinsic: Tensor,
}

fn roll_arc_length(t: f64) -> f64 {
    // Arc length of the spiral (t cos t, t sin t) from 0: integral of
    // sqrt(1 + t^2) dt.
    0.5 * (t * (1.0 + t * t).sqrt() + (t + (1.0 + t * t).sqrt()).ln())
}

pub fn swiss_roll(n: usize, noise: f64, seed: u64) -> Result<SwissRoll> {
    if noise < 0.0 {
        return Err(CoreError::Domain {
            op: "swiss roll noise must be nonnegative",
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let t_lo = 1.5 * std::f64::consts::PI;
    let t_hi = 4.5 * std::f64::consts::PI;
    let mut points = Vec::with_capacity(n * 3);
    let mut intrinsic = Vec::with_capacity(n * 2);
    for _ in 0..n {
        let t = rng.random_range(t_lo..t_hi);
        let h = rng.random_range(0.0..10.0);
        let (mut x, mut y, mut z) = (t * t.cos(), h, t * t.sin());
        if noise > 0.0 {
            let e: [f64; 3] = [
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ];
            x += noise * e[0];
            y += noise * e[1];
            z += noise * e[2];
        }
        points.extend_from_slice(&[x, y, z]);
        intrinsic.extend_from_slice(&[roll_arc_length(t) - roll_arc_length(t_lo), h]);
    }
    Ok(SwissRoll {
        points: Tensor::matrix(n, 3, points)?,
        intrinsic: Tensor::matrix(n, 2, intrinsic)?,
    })
}
