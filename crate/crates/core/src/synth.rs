//! Synthetic multilingual corpora.
//!
//! A base-language corpus is sampled from a random lexicon. Each target
//! language is an invertible transform of it: a permutation of the lexicon,
//! a letter substitution into its own script, and reversal of consecutive
//! word windows. Training targets may optionally carry word-level noise.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// First code point of the alphabet used by the n-th cipher language.
/// Each block holds at least 26 consecutive letters.
const SCRIPTS: [u32; 8] = [
    0x41,   // Latin capitals
    0x430,  // Cyrillic
    0x561,  // Armenian
    0x10D0, // Georgian
    0x5D0,  // Hebrew
    0x1200, // Ethiopic
    0x3041, // Hiragana
    0x0E01, // Thai
];
const BASE_LETTERS: u32 = 26;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least {0} target languages")]
    TooFewPairs(usize),
    #[error("at most {} cipher languages are supported", SCRIPTS.len())]
    TooManyPairs,
    #[error("output path {0} is used more than once")]
    OverlappingPaths(PathBuf),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("word {0:?} is not in the lexicon")]
    UnknownWord(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// How one target language is derived from the base language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub code: String,
    /// Permute the lexicon and substitute letters. `false` gives the identity
    /// language (targets equal sources).
    pub cipher: bool,
    /// Reverse every run of `window` consecutive words; 1 keeps order.
    pub window: usize,
    /// Probability of replacing a training-target word by a random word.
    #[serde(default)]
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub base: String,
    pub languages: Vec<LanguageSpec>,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub lexicon: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Zipf exponent of word frequencies.
    pub zipf: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Four cipher languages with windows 1, 2, 3 and 2.
    pub fn four_pairs(train: usize, dev: usize, test: usize, seed: u64) -> Self {
        let languages = [("xa", 1), ("xb", 2), ("xc", 3), ("xd", 2)]
            .into_iter()
            .map(|(code, window)| LanguageSpec {
                code: code.into(),
                cipher: true,
                window,
                noise: 0.0,
            })
            .collect();
        SynthSpec {
            base: "en".into(),
            languages,
            train,
            dev,
            test,
            lexicon: 400,
            min_words: 4,
            max_words: 12,
            zipf: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.languages.len() < 2 {
            return Err(SynthError::TooFewPairs(2));
        }
        if self.languages.iter().filter(|l| l.cipher).count() > SCRIPTS.len() {
            return Err(SynthError::TooManyPairs);
        }
        let fail = |m: &str| Err(SynthError::Spec(m.into()));
        if self.lexicon < 2 || self.min_words == 0 || self.min_words > self.max_words {
            return fail("need lexicon ≥ 2 and 1 ≤ min_words ≤ max_words");
        }
        if self.train == 0 || !(self.zipf > 0.0) {
            return fail("train size and zipf exponent must be positive");
        }
        let mut codes = HashSet::new();
        for l in &self.languages {
            if l.window == 0 || !(0.0..1.0).contains(&l.noise) {
                return fail("window must be ≥ 1 and noise in [0, 1)");
            }
            if l.code == self.base || !codes.insert(&l.code) {
                return fail("language codes must be distinct from each other and the base");
            }
        }
        Ok(())
    }
}

/// Reverses consecutive runs of `window` items; its own inverse.
pub fn reorder<T: Clone>(words: &[T], window: usize) -> Vec<T> {
    words
        .chunks(window.max(1))
        .flat_map(|c| c.iter().rev().cloned())
        .collect()
}

fn substitute(word: &str, script: u32) -> String {
    word.chars()
        .map(|c| char::from_u32(script + (c as u32 - 'a' as u32)).expect("valid code point"))
        .collect()
}

/// A derived language together with the data needed to invert it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cipher {
    pub code: String,
    pub window: usize,
    /// Target word for each base lexicon index.
    pub words: Vec<String>,
}

impl Cipher {
    pub fn encode(&self, base: &[usize]) -> Vec<String> {
        reorder(base, self.window)
            .into_iter()
            .map(|w| self.words[w].clone())
            .collect()
    }

    /// Map from target words back to base words.
    pub fn inverse(&self, lexicon: &[String]) -> HashMap<String, String> {
        self.words
            .iter()
            .cloned()
            .zip(lexicon.iter().cloned())
            .collect()
    }
}

/// Applies a published inverse map to one target line.
pub fn invert_line(line: &str, inverse: &HashMap<String, String>, window: usize) -> Result<String, SynthError> {
    let words: Vec<&str> = line.split_whitespace().collect();
    let base: Vec<String> = words
        .iter()
        .map(|w| inverse.get(*w).cloned().ok_or_else(|| SynthError::UnknownWord(w.to_string())))
        .collect::<Result<_, _>>()?;
    Ok(reorder(&base, window).join(" "))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub code: String,
    pub train: Split,
    pub dev: Split,
    pub test: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub lexicon: Vec<String>,
    pub ciphers: Vec<Cipher>,
    pub pairs: Vec<SynthPair>,
}

fn random_lexicon(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut words = Vec::with_capacity(n);
    while words.len() < n {
        let len = rng.random_range(2..=6);
        let w: String = (0..len)
            .map(|_| char::from_u32('a' as u32 + rng.random_range(0..BASE_LETTERS)).expect("letter"))
            .collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

/// Generates every split of every pair. The base sentences are shared, so
/// the pairs form a one-to-many multilingual corpus.
pub fn generate(spec: &SynthSpec) -> Result<SynthData, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lexicon = random_lexicon(spec.lexicon, &mut rng);
    let mut script = SCRIPTS.iter();
    let ciphers: Vec<Cipher> = spec
        .languages
        .iter()
        .map(|l| {
            let words = if l.cipher {
                let mut perm: Vec<usize> = (0..spec.lexicon).collect();
                perm.shuffle(&mut rng);
                let s = *script.next().expect("validated count");
                perm.iter().map(|&j| substitute(&lexicon[j], s)).collect()
            } else {
                lexicon.clone()
            };
            Cipher {
                code: l.code.clone(),
                window: l.window,
                words,
            }
        })
        .collect();

    let zipf = Zipf::new(spec.lexicon as f64, spec.zipf).map_err(|e| SynthError::Spec(e.to_string()))?;
    let total = spec.train + spec.dev + spec.test;
    let sentences: Vec<Vec<usize>> = (0..total)
        .map(|_| {
            let n = rng.random_range(spec.min_words..=spec.max_words);
            (0..n).map(|_| zipf.sample(&mut rng) as usize - 1).collect()
        })
        .collect();
    let text = |ids: &[usize]| ids.iter().map(|&w| lexicon[w].as_str()).collect::<Vec<_>>().join(" ");

    let pairs = spec
        .languages
        .iter()
        .zip(&ciphers)
        .enumerate()
        .map(|(li, (l, c))| {
            let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
            noise_rng.set_stream(li as u64 + 1);
            let mut split = |range: std::ops::Range<usize>, noisy: bool| {
                let mut src = Vec::with_capacity(range.len());
                let mut tgt = Vec::with_capacity(range.len());
                for s in &sentences[range] {
                    src.push(text(s));
                    let mut words = c.encode(s);
                    if noisy && l.noise > 0.0 {
                        for w in words.iter_mut() {
                            if noise_rng.random_bool(l.noise) {
                                *w = c.words[noise_rng.random_range(0..spec.lexicon)].clone();
                            }
                        }
                    }
                    tgt.push(words.join(" "));
                }
                Split { src, tgt }
            };
            let train = split(0..spec.train, true);
            let dev = split(spec.train..spec.train + spec.dev, false);
            let test = split(spec.train + spec.dev..total, false);
            SynthPair {
                code: l.code.clone(),
                train,
                dev,
                test,
            }
        })
        .collect();
    Ok(SynthData {
        spec: spec.clone(),
        lexicon,
        ciphers,
        pairs,
    })
}

/// Files of one split: `<dir>/<split>.<base>-<code>.{src,tgt}`.
pub fn split_paths(dir: &Path, base: &str, code: &str, split: &str) -> (PathBuf, PathBuf) {
    let stem = format!("{split}.{base}-{code}");
    (dir.join(format!("{stem}.src")), dir.join(format!("{stem}.tgt")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseMap {
    pub code: String,
    pub window: usize,
    pub words: HashMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub spec: SynthSpec,
    pub files: Vec<PathBuf>,
}

fn write_lines(path: &Path, lines: &[String]) -> io::Result<()> {
    let mut s = lines.join("\n");
    s.push('\n');
    fs::write(path, s)
}

/// Writes every split plus one inverse map per language and a manifest.
/// `overrides` relocates individual output files; any two outputs that
/// resolve to the same path are rejected before anything is written.
pub fn write(
    data: &SynthData,
    dir: &Path,
    overrides: &HashMap<PathBuf, PathBuf>,
) -> Result<SynthManifest, SynthError> {
    let base = &data.spec.base;
    let resolve = |p: PathBuf| overrides.get(&p).cloned().unwrap_or(p);
    let mut jobs: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    for (pair, cipher) in data.pairs.iter().zip(&data.ciphers) {
        for (name, split) in [("train", &pair.train), ("dev", &pair.dev), ("test", &pair.test)] {
            let (s, t) = split_paths(dir, base, &pair.code, name);
            for (p, lines) in [(s, &split.src), (t, &split.tgt)] {
                let mut text = lines.join("\n");
                text.push('\n');
                jobs.push((resolve(p), text.into_bytes()));
            }
        }
        let inverse = InverseMap {
            code: cipher.code.clone(),
            window: cipher.window,
            words: cipher.inverse(&data.lexicon),
        };
        let json = serde_json::to_vec_pretty(&inverse).map_err(io::Error::other)?;
        jobs.push((resolve(dir.join(format!("inverse.{}.json", pair.code))), json));
    }
    let mut seen = HashSet::new();
    for (p, _) in &jobs {
        if !seen.insert(p.clone()) {
            return Err(SynthError::OverlappingPaths(p.clone()));
        }
    }
    fs::create_dir_all(dir)?;
    for (p, bytes) in &jobs {
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, bytes)?;
    }
    let manifest = SynthManifest {
        spec: data.spec.clone(),
        files: jobs.into_iter().map(|(p, _)| p).collect(),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(io::Error::other)?;
    fs::write(dir.join("manifest.json"), json)?;
    write_lines(&dir.join(format!("lexicon.{base}")), &data.lexicon)?;
    Ok(manifest)
}
