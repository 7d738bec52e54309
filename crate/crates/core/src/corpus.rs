//! Parallel corpora, upsampled multi-pair datasets and token-bounded batches.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::{BpeError, BpeModel, Specials};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line count mismatch: source has {0} lines, target has {1}")]
    LineCountMismatch(usize, usize),
    #[error("{path}: invalid UTF-8 on line {line}")]
    Utf8 { path: String, line: usize },
    #[error("no corpora given")]
    NoCorpora,
    #[error("corpus for pair {0} is empty")]
    EmptyCorpus(usize),
    #[error("unknown pair id {0}")]
    UnknownPair(usize),
    #[error("token budget {budget} is smaller than the longest target ({longest} tokens)")]
    BudgetTooSmall { budget: usize, longest: usize },
    #[error("invalid language pair: {0}")]
    InvalidPair(String),
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LanguagePair {
    pub id: usize,
    pub src: String,
    pub tgt: String,
}

impl LanguagePair {
    pub fn new(id: usize, src: &str, tgt: &str) -> Result<Self, CorpusError> {
        if src == tgt {
            return Err(CorpusError::InvalidPair(format!("{src}-{tgt}")));
        }
        Ok(LanguagePair {
            id,
            src: src.to_string(),
            tgt: tgt.to_string(),
        })
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.src, self.tgt)
    }
}

/// One sentence pair. Both sides end with the end-of-sentence id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct ParallelCorpus {
    pub pair: LanguagePair,
    pub examples: Vec<Example>,
    pub vocab_size: usize,
    pub specials: Specials,
    /// Pairs dropped at load time for exceeding `max_len` or being empty.
    pub dropped: usize,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn max_target_len(&self) -> usize {
        self.examples.iter().map(|e| e.tgt.len()).max().unwrap_or(0)
    }

    pub fn target_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.tgt.len()).sum()
    }

    /// First `n` examples, used for capped dev evaluation.
    pub fn head(&self, n: usize) -> ParallelCorpus {
        let mut c = self.clone();
        c.examples.truncate(n);
        c
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Maximum tokens per side, counting the language tag and end marker.
    pub max_len: usize,
    /// Prepend the target-language tag to the source side.
    pub tag_source: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            max_len: 256,
            tag_source: true,
        }
    }
}

pub(crate) fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let bytes = fs::read(path)?;
    let mut body: &[u8] = &bytes;
    if body.last() == Some(&b'\n') {
        body = &body[..body.len() - 1];
    }
    if body.is_empty() && bytes.is_empty() {
        return Ok(Vec::new());
    }
    body.split(|&b| b == b'\n')
        .enumerate()
        .map(|(i, line)| {
            let line = line.strip_suffix(b"\r").unwrap_or(line);
            std::str::from_utf8(line)
                .map(str::to_string)
                .map_err(|_| CorpusError::Utf8 {
                    path: path.display().to_string(),
                    line: i + 1,
                })
        })
        .collect()
}

/// Tokenizes aligned sentence lists into a corpus.
pub fn build_corpus(
    src_lines: &[String],
    tgt_lines: &[String],
    pair: LanguagePair,
    bpe: &BpeModel,
    opts: LoadOptions,
) -> Result<ParallelCorpus, CorpusError> {
    if src_lines.len() != tgt_lines.len() {
        return Err(CorpusError::LineCountMismatch(
            src_lines.len(),
            tgt_lines.len(),
        ));
    }
    let specials = bpe.specials();
    let tag = opts.tag_source.then_some(pair.tgt.as_str());
    let mut examples = Vec::with_capacity(src_lines.len());
    let mut dropped = 0;
    for (s, t) in src_lines.iter().zip(tgt_lines) {
        let mut src = bpe.encode(s, tag)?;
        let mut tgt = bpe.encode(t, None)?;
        let src_words = src.len() - usize::from(tag.is_some());
        if src_words == 0 || tgt.is_empty() {
            dropped += 1;
            continue;
        }
        src.push(specials.eos);
        tgt.push(specials.eos);
        if src.len() > opts.max_len || tgt.len() > opts.max_len {
            dropped += 1;
            continue;
        }
        examples.push(Example { src, tgt });
    }
    if dropped > 0 {
        log::info!("{}: dropped {dropped} sentence pairs", pair.name());
    }
    Ok(ParallelCorpus {
        pair,
        examples,
        vocab_size: bpe.vocab_size(),
        specials,
        dropped,
    })
}

pub fn load_parallel(
    src_path: &Path,
    tgt_path: &Path,
    pair: LanguagePair,
    bpe: &BpeModel,
    opts: LoadOptions,
) -> Result<ParallelCorpus, CorpusError> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    build_corpus(&src, &tgt, pair, bpe, opts)
}

/// All pairs of a multilingual run, upsampled to equal epoch length.
#[derive(Debug, Clone)]
pub struct MultiDataset {
    pub corpora: Vec<ParallelCorpus>,
    /// Epoch-0 index list per pair: the originals followed by upsampled draws.
    pub indices: Vec<Vec<usize>>,
    pub epoch_len: usize,
    seed: u64,
}

impl MultiDataset {
    pub fn num_pairs(&self) -> usize {
        self.corpora.len()
    }

    pub fn corpus(&self, pair_id: usize) -> Result<&ParallelCorpus, CorpusError> {
        self.corpora
            .get(pair_id)
            .ok_or(CorpusError::UnknownPair(pair_id))
    }

    /// Index list for a given epoch. Epoch 0 is the stored list; later epochs
    /// redraw the upsampled extras.
    pub fn epoch_indices(&self, pair_id: usize, epoch: u64) -> Vec<usize> {
        if epoch == 0 {
            return self.indices[pair_id].clone();
        }
        let n = self.corpora[pair_id].len();
        upsampled_indices(n, self.epoch_len, self.seed, pair_id, epoch)
    }
}

fn upsampled_indices(n: usize, target: usize, seed: u64, pair_id: usize, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if target > n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((pair_id as u64) << 32) | epoch);
        idx.extend((n..target).map(|_| rng.random_range(0..n)));
    }
    idx
}

/// Extends every pair by sampling its own examples with replacement until all
/// pairs reach the size of the largest one.
pub fn upsample(corpora: Vec<ParallelCorpus>, rng_seed: u64) -> Result<MultiDataset, CorpusError> {
    if corpora.is_empty() {
        return Err(CorpusError::NoCorpora);
    }
    for c in &corpora {
        if c.is_empty() {
            return Err(CorpusError::EmptyCorpus(c.pair.id));
        }
    }
    let epoch_len = corpora.iter().map(|c| c.len()).max().unwrap_or(0);
    let indices = corpora
        .iter()
        .enumerate()
        .map(|(p, c)| upsampled_indices(c.len(), epoch_len, rng_seed, p, 0))
        .collect();
    Ok(MultiDataset {
        corpora,
        indices,
        epoch_len,
        seed: rng_seed,
    })
}

/// Padded mini-batch for one pair. `tgt_in` is `tgt_out` shifted right behind
/// the begin marker.
#[derive(Debug, Clone)]
pub struct Batch {
    pub pair_id: usize,
    pub src: Array2<u32>,
    pub tgt_in: Array2<u32>,
    pub tgt_out: Array2<u32>,
    pub tgt_mask: Array2<bool>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
    /// Index of each row's example in the (pre-upsampling) corpus.
    pub example_ids: Vec<usize>,
}

impl Batch {
    pub fn from_examples(
        pair_id: usize,
        examples: &[(usize, &Example)],
        specials: Specials,
    ) -> Batch {
        let b = examples.len();
        let s = examples.iter().map(|(_, e)| e.src.len()).max().unwrap_or(0);
        let t = examples.iter().map(|(_, e)| e.tgt.len()).max().unwrap_or(0);
        let mut src = Array2::from_elem((b, s), specials.pad);
        let mut tgt_in = Array2::from_elem((b, t), specials.pad);
        let mut tgt_out = Array2::from_elem((b, t), specials.pad);
        let mut tgt_mask = Array2::from_elem((b, t), false);
        for (row, (_, e)) in examples.iter().enumerate() {
            for (j, &tok) in e.src.iter().enumerate() {
                src[[row, j]] = tok;
            }
            for (j, &tok) in e.tgt.iter().enumerate() {
                tgt_out[[row, j]] = tok;
                tgt_mask[[row, j]] = true;
                tgt_in[[row, j]] = if j == 0 { specials.bos } else { e.tgt[j - 1] };
            }
        }
        Batch {
            pair_id,
            src,
            tgt_in,
            tgt_out,
            tgt_mask,
            src_lens: examples.iter().map(|(_, e)| e.src.len()).collect(),
            tgt_lens: examples.iter().map(|(_, e)| e.tgt.len()).collect(),
            example_ids: examples.iter().map(|(i, _)| *i).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.src_lens.len()
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_lens.iter().sum()
    }

    /// Un-padded target sequence of row `b`.
    pub fn target(&self, b: usize) -> Vec<u32> {
        self.tgt_out.row(b).iter().take(self.tgt_lens[b]).copied().collect()
    }

    pub fn source(&self, b: usize) -> Vec<u32> {
        self.src.row(b).iter().take(self.src_lens[b]).copied().collect()
    }
}

/// Splits a corpus into consecutive batches bounded by target tokens, in
/// corpus order. Used for forced decoding and evaluation.
pub fn sequential_batches(corpus: &ParallelCorpus, token_budget: usize) -> Vec<Batch> {
    let mut batches = Vec::new();
    let mut current: Vec<(usize, &Example)> = Vec::new();
    let mut tokens = 0;
    for (i, e) in corpus.examples.iter().enumerate() {
        if !current.is_empty() && tokens + e.tgt.len() > token_budget {
            batches.push(Batch::from_examples(corpus.pair.id, &current, corpus.specials));
            current.clear();
            tokens = 0;
        }
        tokens += e.tgt.len();
        current.push((i, e));
    }
    if !current.is_empty() {
        batches.push(Batch::from_examples(corpus.pair.id, &current, corpus.specials));
    }
    batches
}

/// Per-pair sampler walking a fresh permutation of the epoch list each epoch.
#[derive(Debug, Clone)]
pub struct PairSampler {
    pair_id: usize,
    token_budget: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl PairSampler {
    pub fn new(
        dataset: &MultiDataset,
        pair_id: usize,
        token_budget: usize,
        seed: u64,
    ) -> Result<Self, CorpusError> {
        let corpus = dataset.corpus(pair_id)?;
        let longest = corpus.max_target_len();
        if token_budget < longest {
            return Err(CorpusError::BudgetTooSmall {
                budget: token_budget,
                longest,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(pair_id as u64);
        let mut order = dataset.epoch_indices(pair_id, 0);
        order.shuffle(&mut rng);
        Ok(PairSampler {
            pair_id,
            token_budget,
            rng,
            order,
            cursor: 0,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Greedily fills a batch from the current epoch permutation. A batch never
    /// spans two epochs.
    pub fn next_batch(&mut self, dataset: &MultiDataset) -> Batch {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.order = dataset.epoch_indices(self.pair_id, self.epoch);
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let corpus = &dataset.corpora[self.pair_id];
        let mut picked: Vec<(usize, &Example)> = Vec::new();
        let mut tokens = 0;
        while self.cursor < self.order.len() {
            let idx = self.order[self.cursor];
            let e = &corpus.examples[idx];
            if !picked.is_empty() && tokens + e.tgt.len() > self.token_budget {
                break;
            }
            tokens += e.tgt.len();
            picked.push((idx, e));
            self.cursor += 1;
        }
        Batch::from_examples(self.pair_id, &picked, corpus.specials)
    }
}

/// Convenience wrapper for one-off sampling with a caller-owned generator.
pub fn sample_batch<R: Rng>(
    dataset: &MultiDataset,
    pair_id: usize,
    token_budget: usize,
    rng: &mut R,
) -> Result<Batch, CorpusError> {
    let mut sampler = PairSampler::new(dataset, pair_id, token_budget, rng.random())?;
    Ok(sampler.next_batch(dataset))
}
