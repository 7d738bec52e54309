//! Offline teacher outputs: per-position top-K distributions from forced
//! decoding, their binary trace format, and sequence-level pseudo corpora.
//!
//! Trace layout (little-endian): magic `PDTK`, `u32` version, `u32` pair id,
//! `u32` K, `u32` vocabulary size, `u64` example count; per example a `u32`
//! length `T` followed by `T × K` pairs of `(u32 id, f32 prob)`.

use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::{BpeError, BpeModel};
use crate::corpus::{sequential_batches, ParallelCorpus};
use crate::eval::{translate, DecodeOptions, EvalError};
use crate::loss::TopKRecord;
use crate::model::{forward, ModelError, Mode, Params};
use crate::Real;

const MAGIC: &[u8; 4] = b"PDTK";
const VERSION: u32 = 1;
/// Target tokens per forced-decoding batch.
const EXPORT_BUDGET: usize = 4096;

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("K={k} must lie in 1..={vocab}")]
    InvalidK { k: usize, vocab: usize },
    #[error("teacher vocabulary {teacher} differs from corpus vocabulary {corpus}")]
    VocabMismatch { teacher: usize, corpus: usize },
    #[error("not a trace file (bad magic)")]
    BadMagic,
    #[error("unsupported trace version {0}")]
    Version(u32),
    #[error("trace has K={found}, expected K={expected}")]
    KMismatch { expected: usize, found: usize },
    #[error("truncated trace")]
    Truncated,
    #[error("trace does not match corpus: {0}")]
    Misaligned(String),
    #[error("malformed trace: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for TeacherError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            TeacherError::Truncated
        } else {
            TeacherError::Io(e)
        }
    }
}

/// Records of one example, stored flat: position `t` owns
/// `ids[t*K..(t+1)*K]` and the matching slice of `probs`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub ids: Vec<u32>,
    pub probs: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTrace {
    pub pair_id: u32,
    pub k: usize,
    pub vocab_size: usize,
    pub entries: Vec<TraceEntry>,
}

impl TeacherTrace {
    /// Number of records stored for example `i`.
    pub fn positions(&self, i: usize) -> usize {
        self.entries[i].ids.len() / self.k
    }

    pub fn record(&self, i: usize, t: usize) -> TopKRecord<'_> {
        let e = &self.entries[i];
        let r = t * self.k..(t + 1) * self.k;
        TopKRecord {
            token_ids: &e.ids[r.clone()],
            probs: &e.probs[r],
        }
    }

    pub fn records(&self, i: usize) -> Vec<TopKRecord<'_>> {
        (0..self.positions(i)).map(|t| self.record(i, t)).collect()
    }

    /// Checks that the trace has one record per target token of `corpus`.
    pub fn check_alignment(&self, corpus: &ParallelCorpus) -> Result<(), TeacherError> {
        if self.vocab_size != corpus.vocab_size {
            return Err(TeacherError::VocabMismatch {
                teacher: self.vocab_size,
                corpus: corpus.vocab_size,
            });
        }
        if self.entries.len() != corpus.len() {
            return Err(TeacherError::Misaligned(format!(
                "{} trace entries for {} examples",
                self.entries.len(),
                corpus.len()
            )));
        }
        for (i, e) in corpus.examples.iter().enumerate() {
            if self.positions(i) != e.tgt.len() {
                return Err(TeacherError::Misaligned(format!(
                    "example {i}: {} records for {} target tokens",
                    self.positions(i),
                    e.tgt.len()
                )));
            }
        }
        Ok(())
    }
}

/// The `k` most probable ids of a log-distribution, descending, ties to the
/// lower id, renormalized to sum to one. Also returns the mass the `k` ids
/// held before renormalization.
pub fn select_topk<F: Real>(logprobs: &[F], k: usize) -> (Vec<u32>, Vec<f32>, f64) {
    let mut order: Vec<u32> = (0..logprobs.len() as u32).collect();
    let cmp = |a: &u32, b: &u32| {
        logprobs[*b as usize]
            .partial_cmp(&logprobs[*a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    let raw: Vec<f64> = order
        .iter()
        .map(|&i| logprobs[i as usize].as_f64().exp())
        .collect();
    let mass: f64 = raw.iter().sum();
    let probs = raw.iter().map(|p| (p / mass) as f32).collect();
    (order, probs, mass)
}

/// Forced-decodes every example on its reference prefix and keeps the top-K
/// of each position.
pub fn export_topk(
    teacher: &Params<f32>,
    corpus: &ParallelCorpus,
    k: usize,
) -> Result<TeacherTrace, TeacherError> {
    let vocab = teacher.config.vocab_size;
    if vocab != corpus.vocab_size {
        return Err(TeacherError::VocabMismatch {
            teacher: vocab,
            corpus: corpus.vocab_size,
        });
    }
    if k == 0 || k > vocab {
        return Err(TeacherError::InvalidK { k, vocab });
    }
    let batches = sequential_batches(corpus, EXPORT_BUDGET.max(corpus.max_target_len()));
    let per_batch: Vec<Vec<TraceEntry>> = batches
        .par_iter()
        .map(|batch| {
            // Eval mode ignores the generator.
            let out = forward(teacher, batch, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
            let entries = (0..batch.size())
                .map(|b| {
                    let len = batch.tgt_lens[b];
                    let mut ids = Vec::with_capacity(len * k);
                    let mut probs = Vec::with_capacity(len * k);
                    for t in 0..len {
                        let row = out.logprobs.slice(ndarray::s![b, t, ..]);
                        let (i, p, _) = select_topk(row.as_slice().expect("contiguous"), k);
                        ids.extend(i);
                        probs.extend(p);
                    }
                    TraceEntry { ids, probs }
                })
                .collect();
            Ok(entries)
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(TeacherTrace {
        pair_id: corpus.pair.id as u32,
        k,
        vocab_size: vocab,
        entries: per_batch.into_iter().flatten().collect(),
    })
}

pub fn save_trace(trace: &TeacherTrace, path: &Path) -> Result<(), TeacherError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    for v in [VERSION, trace.pair_id, trace.k as u32, trace.vocab_size as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(trace.entries.len() as u64).to_le_bytes())?;
    for e in &trace.entries {
        w.write_all(&((e.ids.len() / trace.k) as u32).to_le_bytes())?;
        for (id, p) in e.ids.iter().zip(&e.probs) {
            w.write_all(&id.to_le_bytes())?;
            w.write_all(&p.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a trace. With `expected_k`, a trace of any other K is rejected.
pub fn load_trace(path: &Path, expected_k: Option<usize>) -> Result<TeacherTrace, TeacherError> {
    let bytes = fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TeacherError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(TeacherError::Version(version));
    }
    let pair_id = read_u32(&mut r)?;
    let k = read_u32(&mut r)? as usize;
    let vocab_size = read_u32(&mut r)? as usize;
    if let Some(expected) = expected_k {
        if expected != k {
            return Err(TeacherError::KMismatch { expected, found: k });
        }
    }
    if k == 0 || k > vocab_size {
        return Err(TeacherError::InvalidK { k, vocab: vocab_size });
    }
    let mut n = [0u8; 8];
    r.read_exact(&mut n)?;
    let n = u64::from_le_bytes(n) as usize;
    // Every example needs at least its length field.
    if n > r.len() / 4 {
        return Err(TeacherError::Truncated);
    }
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let t = read_u32(&mut r)? as usize;
        let count = t * k;
        if r.len() < count * 8 {
            return Err(TeacherError::Truncated);
        }
        let (data, rest) = r.split_at(count * 8);
        r = rest;
        let mut ids = Vec::with_capacity(count);
        let mut probs = Vec::with_capacity(count);
        for pair in data.chunks_exact(8) {
            let id = u32::from_le_bytes(pair[..4].try_into().expect("4 bytes"));
            if id as usize >= vocab_size {
                return Err(TeacherError::Format(format!(
                    "example {i}: token id {id} outside vocabulary of {vocab_size}"
                )));
            }
            ids.push(id);
            probs.push(f32::from_le_bytes(pair[4..].try_into().expect("4 bytes")));
        }
        entries.push(TraceEntry { ids, probs });
    }
    if !r.is_empty() {
        return Err(TeacherError::Format(format!(
            "{} trailing bytes after {n} examples",
            r.len()
        )));
    }
    Ok(TeacherTrace {
        pair_id,
        k,
        vocab_size,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqKdReport {
    pub sentences: usize,
    /// Indices of sentences whose hypothesis hit the length cap without an
    /// end marker.
    pub truncated: Vec<usize>,
}

/// Beam-decodes every source with the teacher and returns the decoded
/// source and hypothesis text, line-aligned.
pub fn seqkd_corpus(
    teacher: &Params<f32>,
    corpus: &ParallelCorpus,
    bpe: &BpeModel,
    opts: DecodeOptions,
) -> Result<(Vec<String>, Vec<String>, SeqKdReport), TeacherError> {
    let hyps: Vec<_> = corpus
        .examples
        .par_iter()
        .map(|e| translate(teacher, &e.src, corpus.specials, opts))
        .collect::<Result<_, _>>()?;
    let mut src = Vec::with_capacity(hyps.len());
    let mut tgt = Vec::with_capacity(hyps.len());
    let mut truncated = Vec::new();
    for (i, (e, h)) in corpus.examples.iter().zip(&hyps).enumerate() {
        src.push(bpe.decode(&e.src)?);
        tgt.push(bpe.decode(&h.tokens)?);
        if h.truncated {
            truncated.push(i);
        }
    }
    let report = SeqKdReport {
        sentences: hyps.len(),
        truncated,
    };
    Ok((src, tgt, report))
}

/// Writes a pseudo-parallel corpus (`src_path`, `tgt_path`) whose targets
/// are the teacher's 1-best translations, plus a JSON sidecar listing
/// truncated hypotheses.
pub fn export_seqkd(
    teacher: &Params<f32>,
    corpus: &ParallelCorpus,
    bpe: &BpeModel,
    opts: DecodeOptions,
    src_path: &Path,
    tgt_path: &Path,
    report_path: &Path,
) -> Result<SeqKdReport, TeacherError> {
    let (src, tgt, report) = seqkd_corpus(teacher, corpus, bpe, opts)?;
    let join = |lines: &[String]| {
        let mut s = lines.join("\n");
        s.push('\n');
        s
    };
    fs::write(src_path, join(&src))?;
    fs::write(tgt_path, join(&tgt))?;
    let json = serde_json::to_string_pretty(&report).map_err(io::Error::other)?;
    fs::write(report_path, json)?;
    Ok(report)
}
