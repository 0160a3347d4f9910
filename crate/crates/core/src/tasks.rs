//! Data generation and ingestion: the synthetic sequence-copy task plus a
//! character-level next-token task over plain text, and the shared
//! evaluation pass.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cells::{lru, tanh, CellParameters};
use crate::error::{Result, TpcError};
use crate::num::{cross_entropy, mix_seed, Real};

pub const COPY_SEQ_LEN: usize = 40;
pub const COPY_DIGITS: usize = 30;
pub const COPY_LAG: usize = 10;
pub const COPY_VOCAB: usize = 10;

/// Disjoint seed namespaces for the deterministic data streams.
#[derive(Clone, Copy, Debug)]
pub enum StreamKind {
    Train,
    Eval,
    DropoutMask,
    Shuffle,
}

pub fn stream_seed(data_seed: u64, kind: StreamKind, index: u64) -> u64 {
    mix_seed(data_seed, kind as u64 + 1, index)
}

/// One input/target sequence with one-hot inputs and a boolean mask marking
/// the positions scored for accuracy.
#[derive(Clone, Debug)]
pub struct Sequence<F> {
    pub inputs: Array2<F>,
    pub input_tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub mask: Vec<bool>,
}

impl<F: Real> Sequence<F> {
    pub fn from_tokens(
        input_tokens: Vec<usize>,
        targets: Vec<Option<usize>>,
        mask: Vec<bool>,
        input_dim: usize,
    ) -> Self {
        let t = input_tokens.len();
        let mut inputs = Array2::zeros((t, input_dim));
        for (row, &tok) in input_tokens.iter().enumerate() {
            inputs[[row, tok]] = F::one();
        }
        Self {
            inputs,
            input_tokens,
            targets,
            mask,
        }
    }

    pub fn len(&self) -> usize {
        self.input_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_tokens.is_empty()
    }

    pub fn input_row(&self, t: usize) -> Array1<F> {
        self.inputs.row(t).to_owned()
    }
}

#[derive(Clone, Debug)]
pub struct SequenceBatch<F> {
    pub sequences: Vec<Sequence<F>>,
}

/// Uniform i.i.d. digits 1–9 for 30 steps followed by padding, with the
/// digit sequence repeated 10 steps later in the targets. Deterministic in
/// the seed.
pub fn generate_copy_batch<F: Real>(batch_size: usize, seed: u64, mask_all: bool) -> SequenceBatch<F> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = (0..batch_size)
        .map(|_| {
            let digits: Vec<usize> = (0..COPY_DIGITS).map(|_| rng.random_range(1..=9)).collect();
            let mut input_tokens = vec![0usize; COPY_SEQ_LEN];
            input_tokens[..COPY_DIGITS].copy_from_slice(&digits);
            let mut targets = vec![Some(0usize); COPY_SEQ_LEN];
            for (i, &d) in digits.iter().enumerate() {
                targets[i + COPY_LAG] = Some(d);
            }
            let mask = (0..COPY_SEQ_LEN)
                .map(|t| mask_all || t >= COPY_LAG)
                .collect();
            Sequence::from_tokens(input_tokens, targets, mask, COPY_VOCAB)
        })
        .collect();
    SequenceBatch { sequences }
}

/// Character vocabulary with a deterministic ordering. When the distinct
/// character count exceeds the limit, the least frequent characters map to a
/// trailing unknown token.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    pub chars: Vec<char>,
    map: HashMap<char, usize>,
    pub unk: Option<usize>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.chars.len() + usize::from(self.unk.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn encode(&self, c: char) -> usize {
        match self.map.get(&c) {
            Some(&i) => i,
            None => self.unk.expect("character outside vocabulary without unk"),
        }
    }

    pub fn decode(&self, id: usize) -> char {
        if id < self.chars.len() {
            self.chars[id]
        } else {
            '\u{FFFD}'
        }
    }
}

/// Reads a UTF-8 text file, lowercases it, and tokenises it at character
/// level under a vocabulary cap.
pub fn ingest_text_corpus(path: &Path, vocab_limit: usize) -> Result<(Vec<usize>, Vocabulary)> {
    let text = std::fs::read_to_string(path)?;
    ingest_text(&text, vocab_limit)
}

pub fn ingest_text(text: &str, vocab_limit: usize) -> Result<(Vec<usize>, Vocabulary)> {
    if vocab_limit < 2 {
        return Err(TpcError::Usage("vocab limit must be at least 2".into()));
    }
    let lowered: Vec<char> = text.chars().flat_map(|c| c.to_lowercase()).collect();
    if lowered.is_empty() {
        return Err(TpcError::Corpus("empty corpus".into()));
    }
    let mut freq: HashMap<char, u64> = HashMap::new();
    for &c in &lowered {
        *freq.entry(c).or_insert(0) += 1;
    }
    let mut kept: Vec<char> = if freq.len() > vocab_limit {
        let mut by_freq: Vec<(char, u64)> = freq.iter().map(|(&c, &n)| (c, n)).collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        by_freq.truncate(vocab_limit - 1);
        by_freq.into_iter().map(|(c, _)| c).collect()
    } else {
        freq.keys().copied().collect()
    };
    kept.sort_unstable();
    let map: HashMap<char, usize> = kept.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let unk = if freq.len() > vocab_limit {
        Some(kept.len())
    } else {
        None
    };
    let vocab = Vocabulary {
        chars: kept,
        map,
        unk,
    };
    let tokens = lowered.iter().map(|&c| vocab.encode(c)).collect();
    Ok((tokens, vocab))
}

pub fn decode_tokens(tokens: &[usize], vocab: &Vocabulary) -> String {
    tokens.iter().map(|&t| vocab.decode(t)).collect()
}

/// Splits a token stream into non-overlapping fixed-length windows with
/// next-token targets. The final position of the last window has no target
/// when the stream ends there.
pub fn chunk_windows<F: Real>(tokens: &[usize], window: usize, input_dim: usize) -> Vec<Sequence<F>> {
    assert!(window > 0);
    let count = tokens.len() / window;
    (0..count)
        .map(|i| {
            let start = i * window;
            let input_tokens = tokens[start..start + window].to_vec();
            let targets: Vec<Option<usize>> = (0..window)
                .map(|j| tokens.get(start + j + 1).copied())
                .collect();
            let mask = targets.iter().map(|t| t.is_some()).collect();
            Sequence::from_tokens(input_tokens, targets, mask, input_dim)
        })
        .collect()
}

/// Deterministic synthetic prose with a mid-range dependency: each sentence
/// draws all of its words from one topic bank, so letters seen early in a
/// sentence predict the letters of later words.
pub fn synthetic_corpus(min_bytes: usize, seed: u64) -> String {
    const BANKS: [&[&str]; 3] = [
        &["apple", "amber", "arrow", "atlas", "album", "acorn", "aloud", "agate"],
        &["bison", "bread", "brook", "blaze", "bloom", "badge", "birch", "bound"],
        &["cider", "coral", "crane", "cloud", "chess", "charm", "civet", "comet"],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(min_bytes + 64);
    while out.len() < min_bytes {
        let bank = BANKS[rng.random_range(0..BANKS.len())];
        let words = rng.random_range(6..=10);
        for w in 0..words {
            if w > 0 {
                out.push(' ');
            }
            out.push_str(bank[rng.random_range(0..bank.len())]);
        }
        out.push_str(". ");
    }
    out
}

/// Aggregate evaluation metrics. `mean_ce` and `accuracy` are computed over
/// masked positions; `accuracy_all` over every supervised position.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct EvalMetrics {
    pub mean_ce: f64,
    pub accuracy: f64,
    pub accuracy_all: f64,
    pub perplexity: f64,
}

/// Deterministic forward pass over one sequence: logits per step, dropout
/// disabled.
pub fn sequence_logits<F: Real>(params: &CellParameters<F>, seq: &Sequence<F>) -> Vec<Array1<F>> {
    match params {
        CellParameters::Tanh(cell) => {
            let mut h = Array1::zeros(cell.dims().recurrent);
            (0..seq.len())
                .map(|t| {
                    let (h_next, z) = tanh::forward(cell, &seq.input_row(t), &h);
                    h = h_next;
                    z
                })
                .collect()
        }
        CellParameters::Lru(cell) => {
            let n = cell.dims().recurrent;
            let mut h_re = Array1::zeros(n);
            let mut h_im = Array1::zeros(n);
            (0..seq.len())
                .map(|t| {
                    let ff = lru::forward(cell, &seq.input_row(t), &h_re, &h_im, None);
                    h_re = ff.h_re;
                    h_im = ff.h_im;
                    ff.logits
                })
                .collect()
        }
    }
}

/// Scores precomputed logits against the sequences' targets.
pub fn score_logits<F: Real>(sequences: &[Sequence<F>], logits: &[Vec<Array1<F>>]) -> EvalMetrics {
    let mut ce_sum = 0.0;
    let mut masked = 0usize;
    let mut masked_hits = 0usize;
    let mut all = 0usize;
    let mut all_hits = 0usize;
    for (seq, seq_logits) in sequences.iter().zip(logits) {
        for t in 0..seq.len() {
            let Some(target) = seq.targets[t] else { continue };
            let z = &seq_logits[t];
            let pred = z
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            all += 1;
            all_hits += usize::from(pred == target);
            if seq.mask[t] {
                masked += 1;
                masked_hits += usize::from(pred == target);
                ce_sum += cross_entropy(z, target, F::zero()).to_f64();
            }
        }
    }
    let mean_ce = if masked > 0 { ce_sum / masked as f64 } else { 0.0 };
    EvalMetrics {
        mean_ce,
        accuracy: if masked > 0 {
            masked_hits as f64 / masked as f64
        } else {
            0.0
        },
        accuracy_all: if all > 0 {
            all_hits as f64 / all as f64
        } else {
            0.0
        },
        perplexity: mean_ce.exp(),
    }
}

/// Evaluation-only pass over a set of sequences.
pub fn evaluate<F: Real>(params: &CellParameters<F>, sequences: &[Sequence<F>]) -> EvalMetrics {
    let logits: Vec<Vec<Array1<F>>> = sequences
        .par_iter()
        .map(|seq| sequence_logits(params, seq))
        .collect();
    score_logits(sequences, &logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn copy_batch_satisfies_layout_invariants() {
        let batch = generate_copy_batch::<f64>(8, 123, false);
        for seq in &batch.sequences {
            assert_eq!(seq.len(), COPY_SEQ_LEN);
            for t in 0..COPY_DIGITS {
                assert!((1..=9).contains(&seq.input_tokens[t]));
                assert_eq!(seq.targets[t + COPY_LAG], Some(seq.input_tokens[t]));
            }
            for t in COPY_DIGITS..COPY_SEQ_LEN {
                assert_eq!(seq.input_tokens[t], 0);
            }
            for t in 0..COPY_LAG {
                assert_eq!(seq.targets[t], Some(0));
                assert!(!seq.mask[t]);
            }
            assert_eq!(seq.mask.iter().filter(|&&m| m).count(), COPY_DIGITS);
            // one-hot rows
            for t in 0..COPY_SEQ_LEN {
                let row = seq.input_row(t);
                assert_eq!(row.sum(), 1.0);
                assert_eq!(row[seq.input_tokens[t]], 1.0);
            }
        }
    }

    #[test]
    fn copy_batch_is_deterministic_and_namespaced() {
        let a = generate_copy_batch::<f64>(4, stream_seed(7, StreamKind::Train, 0), false);
        let b = generate_copy_batch::<f64>(4, stream_seed(7, StreamKind::Train, 0), false);
        let c = generate_copy_batch::<f64>(4, stream_seed(7, StreamKind::Eval, 0), false);
        assert_eq!(a.sequences[0].input_tokens, b.sequences[0].input_tokens);
        assert_ne!(a.sequences[0].input_tokens, c.sequences[0].input_tokens);
    }

    #[test]
    fn copy_digits_are_uniform_by_chi_square() {
        // ~1e5 digit draws; chi-square over 9 bins, 8 dof, p > 0.01 cut 20.09
        let batch = generate_copy_batch::<f32>(3340, 999, false);
        let mut counts = [0u64; 10];
        for seq in &batch.sequences {
            for t in 0..COPY_DIGITS {
                counts[seq.input_tokens[t]] += 1;
            }
        }
        let n: u64 = counts[1..].iter().sum();
        assert!(n >= 100_000);
        let expected = n as f64 / 9.0;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 20.09, "chi2 = {chi2}");
        assert_eq!(counts[0], 0);
    }

    #[test]
    fn abab_chunks_and_vocab() {
        let (tokens, vocab) = ingest_text("abab", 10).unwrap();
        assert_eq!(vocab.chars, vec!['a', 'b']);
        assert!(vocab.unk.is_none());
        let chunks = chunk_windows::<f64>(&tokens, 2, vocab.len());
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].input_tokens, vec![0, 1]);
        assert_eq!(chunks[1].input_tokens, vec![0, 1]);
        // next-token targets; the final corpus position has none
        assert_eq!(chunks[0].targets, vec![Some(1), Some(0)]);
        assert_eq!(chunks[1].targets, vec![Some(1), None]);
    }

    #[test]
    fn ingest_round_trips_lowercased_text() {
        let text = "Hello, World! 123";
        let (tokens, vocab) = ingest_text(text, 64).unwrap();
        assert_eq!(decode_tokens(&tokens, &vocab), text.to_lowercase());
    }

    #[test]
    fn chunk_count_is_floor_len_over_window() {
        let (tokens, vocab) = ingest_text("abcdefghij", 26).unwrap();
        assert_eq!(chunk_windows::<f64>(&tokens, 3, vocab.len()).len(), 3);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(ingest_text("", 10).is_err());
    }

    #[test]
    fn overflowing_vocab_maps_rare_chars_to_unk() {
        let (tokens, vocab) = ingest_text("aaab bbzq", 4).unwrap();
        assert_eq!(vocab.len(), 4);
        assert!(vocab.unk.is_some());
        assert_eq!(tokens.len(), 9);
    }

    #[test]
    fn perfect_predictor_scores_full_accuracy() {
        let batch = generate_copy_batch::<f64>(3, 17, false);
        let logits: Vec<Vec<Array1<f64>>> = batch
            .sequences
            .iter()
            .map(|seq| {
                (0..seq.len())
                    .map(|t| {
                        let mut z = Array1::zeros(COPY_VOCAB);
                        if let Some(tgt) = seq.targets[t] {
                            z[tgt] = 50.0;
                        }
                        z
                    })
                    .collect()
            })
            .collect();
        let m = score_logits(&batch.sequences, &logits);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.accuracy_all, 1.0);
        assert!(m.mean_ce < 1e-10);
    }

    #[test]
    fn masked_accuracy_ignores_unmasked_positions() {
        let batch = generate_copy_batch::<f64>(2, 21, false);
        let make = |corrupt_unmasked: bool| -> Vec<Vec<Array1<f64>>> {
            batch
                .sequences
                .iter()
                .map(|seq| {
                    (0..seq.len())
                        .map(|t| {
                            let mut z = Array1::zeros(COPY_VOCAB);
                            let tgt = seq.targets[t].unwrap();
                            if seq.mask[t] || !corrupt_unmasked {
                                z[tgt] = 10.0;
                            } else {
                                z[(tgt + 1) % COPY_VOCAB] = 10.0;
                            }
                            z
                        })
                        .collect()
                })
                .collect()
        };
        let clean = score_logits(&batch.sequences, &make(false));
        let corrupted = score_logits(&batch.sequences, &make(true));
        assert_eq!(clean.accuracy, corrupted.accuracy);
        assert_eq!(clean.mean_ce, corrupted.mean_ce);
        assert!(corrupted.accuracy_all < clean.accuracy_all);
    }

    #[test]
    fn chance_level_on_copy_task_with_random_weights() {
        use crate::cells::{init_parameters, CellFamily, Dims, LruInit};
        let dims = Dims {
            input: 10,
            recurrent: 32,
            hidden: 32,
            output: 10,
        };
        let params =
            init_parameters::<f64>(CellFamily::TanhRnn, dims, 0.0, LruInit::default(), 3).unwrap();
        let batch = generate_copy_batch::<f64>(200, 4, false);
        let m = evaluate(&params, &batch.sequences);
        assert!((m.accuracy - 0.1).abs() < 0.05, "accuracy {}", m.accuracy);
        assert!((m.mean_ce - (10.0f64).ln()).abs() < 0.25, "ce {}", m.mean_ce);
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_sized() {
        let a = synthetic_corpus(2000, 5);
        let b = synthetic_corpus(2000, 5);
        assert_eq!(a, b);
        assert!(a.len() >= 2000);
        assert!(a.contains(". "));
    }
}
