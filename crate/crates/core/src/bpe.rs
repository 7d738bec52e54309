//! Joint byte pair encoding shared by every language in a run.
//!
//! Words are split into characters with an end-of-word marker attached to the
//! final character, then merged greedily by learned priority. A single model is
//! learned over the pooled corpora of all languages so that teachers and the
//! multilingual student share one output vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const END_OF_WORD: &str = "</w>";
pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";

const HEADER_PREFIX: &str = "bpe v1";

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("cannot learn BPE from an empty corpus")]
    EmptyCorpus,
    #[error("unknown target language tag {0:?}")]
    UnknownTag(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("malformed BPE model file at line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ids of the reserved symbols. They always occupy the lowest ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
}

impl Default for Specials {
    fn default() -> Self {
        Specials {
            pad: 0,
            bos: 1,
            eos: 2,
            unk: 3,
        }
    }
}

/// Language tag token for a target language code, e.g. `<2de>`.
pub fn tag_token(code: &str) -> String {
    format!("<2{code}>")
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '“' | '”' | '‘' | '’' | '«' | '»' | '…' | '–' | '—' | '¡' | '¿' | '·' | '。' | '、'
        )
}

/// Whitespace split with every punctuation character emitted as its own word.
pub fn pretokenize(raw: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in raw.split_whitespace() {
        let mut current = String::new();
        for c in chunk.chars() {
            if is_punctuation(c) {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(c.to_string());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let last = chars.len().saturating_sub(1);
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i == last {
                format!("{c}{END_OF_WORD}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    specials: Specials,
    tags: HashMap<String, u32>,
}

impl BpeModel {
    fn from_parts(merges: Vec<(String, String)>, tokens: Vec<String>) -> Result<Self, BpeError> {
        let ids: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if ids.len() != tokens.len() {
            return Err(BpeError::Format {
                line: 0,
                reason: "duplicate token in vocabulary".into(),
            });
        }
        let lookup = |name: &str| {
            ids.get(name).copied().ok_or_else(|| BpeError::Format {
                line: 0,
                reason: format!("missing special token {name}"),
            })
        };
        let specials = Specials {
            pad: lookup(PAD)?,
            bos: lookup(BOS)?,
            eos: lookup(EOS)?,
            unk: lookup(UNK)?,
        };
        let tags = tokens
            .iter()
            .enumerate()
            .filter_map(|(i, t)| {
                t.strip_prefix("<2")
                    .and_then(|rest| rest.strip_suffix('>'))
                    .map(|code| (code.to_string(), i as u32))
            })
            .collect();
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Ok(BpeModel {
            merges,
            ranks,
            tokens,
            ids,
            specials,
            tags,
        })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn tag_id(&self, code: &str) -> Option<u32> {
        self.tags.get(code).copied()
    }

    /// Number of ids reserved for specials and language tags.
    pub fn num_reserved(&self) -> usize {
        4 + self.tags.len()
    }

    pub fn is_reserved(&self, id: u32) -> bool {
        (id as usize) < self.num_reserved()
    }

    fn segment_word(&self, word: &str) -> Vec<String> {
        let mut symbols = word_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&rank| (rank, i))
                })
                .min();
            let Some((_, i)) = best else { break };
            let right = symbols.remove(i + 1);
            symbols[i].push_str(&right);
        }
        symbols
    }

    /// Encodes a raw sentence. With `tgt_tag` set, the language tag id is
    /// prepended. No begin or end markers are added.
    pub fn encode(&self, sentence: &str, tgt_tag: Option<&str>) -> Result<Vec<u32>, BpeError> {
        let mut out = Vec::new();
        if let Some(code) = tgt_tag {
            let id = self
                .tag_id(code)
                .ok_or_else(|| BpeError::UnknownTag(code.to_string()))?;
            out.push(id);
        }
        for word in pretokenize(sentence) {
            for sym in self.segment_word(&word) {
                out.push(self.id(&sym).unwrap_or(self.specials.unk));
            }
        }
        Ok(out)
    }

    /// Joins subwords back into space-separated words. Specials and tags are
    /// skipped.
    pub fn decode(&self, ids: &[u32]) -> Result<String, BpeError> {
        let mut text = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(BpeError::IdOutOfRange {
                id,
                size: self.vocab_size(),
            })?;
            if self.is_reserved(id) {
                continue;
            }
            match tok.strip_suffix(END_OF_WORD) {
                Some(stem) => {
                    text.push_str(stem);
                    text.push(' ');
                }
                None => text.push_str(tok),
            }
        }
        Ok(text.trim_end().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER_PREFIX} {}\n", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        out.push_str("---\n");
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{t}\t{i}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, BpeError> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, reason: &str| BpeError::Format {
            line: line + 1,
            reason: reason.to_string(),
        };
        let (_, header) = lines.next().ok_or_else(|| bad(0, "empty file"))?;
        let count: usize = header
            .strip_prefix(HEADER_PREFIX)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| bad(0, "expected header `bpe v1 <num_merges>`"))?;
        let mut merges = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, line) = lines.next().ok_or_else(|| bad(0, "missing merge lines"))?;
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| bad(n, "merge line must be `left right`"))?;
            merges.push((l.to_string(), r.to_string()));
        }
        match lines.next() {
            Some((_, "---")) => {}
            Some((n, _)) => return Err(bad(n, "expected `---` separator")),
            None => return Err(bad(0, "missing `---` separator")),
        }
        let mut tokens = Vec::new();
        for (n, line) in lines {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| bad(n, "vocab line must be `token<TAB>id`"))?;
            let id: usize = id.parse().map_err(|_| bad(n, "invalid id"))?;
            if id != tokens.len() {
                return Err(bad(n, "ids must be dense and ascending"));
            }
            tokens.push(tok.to_string());
        }
        Self::from_parts(merges, tokens)
    }

    pub fn save(&self, path: &Path) -> Result<(), BpeError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BpeError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

type Pair = (u32, u32);

/// Learns `num_merges` merges over the pooled word counts of every corpus.
/// `target_langs` receive `<2xx>` tag tokens right after the specials.
pub fn learn_bpe<S: AsRef<str>>(
    corpora: &[Vec<S>],
    num_merges: usize,
    target_langs: &[String],
) -> Result<BpeModel, BpeError> {
    let mut word_counts: HashMap<String, u64> = HashMap::new();
    for line in corpora.iter().flatten() {
        for w in pretokenize(line.as_ref()) {
            *word_counts.entry(w).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(BpeError::EmptyCorpus);
    }

    // Symbols are interned; `names[id]` is the symbol string.
    let mut names: Vec<String> = Vec::new();
    let mut interned: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: String, names: &mut Vec<String>| -> u32 {
        *interned.entry(s.clone()).or_insert_with(|| {
            names.push(s);
            (names.len() - 1) as u32
        })
    };

    let mut sorted_words: Vec<(String, u64)> = word_counts.into_iter().collect();
    sorted_words.sort();
    let mut words: Vec<(Vec<u32>, u64)> = sorted_words
        .into_iter()
        .map(|(w, c)| {
            let syms = word_symbols(&w)
                .into_iter()
                .map(|s| intern(s, &mut names))
                .collect();
            (syms, c)
        })
        .collect();
    // Every seen character gets both its inner and word-final symbol, so any
    // word over known characters can be encoded.
    let base_symbols: BTreeSet<String> = names
        .iter()
        .flat_map(|n| {
            let c = n.strip_suffix(END_OF_WORD).unwrap_or(n);
            [c.to_string(), format!("{c}{END_OF_WORD}")]
        })
        .collect();

    let mut pair_counts: HashMap<Pair, i64> = HashMap::new();
    for (syms, c) in &words {
        for w in syms.windows(2) {
            *pair_counts.entry((w[0], w[1])).or_default() += *c as i64;
        }
    }

    let mut merges = Vec::new();
    while merges.len() < num_merges {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(a, ca), (b, cb)| {
                ca.cmp(cb).then_with(|| {
                    // Lexicographically smallest (left, right) wins ties.
                    let ka = (&names[a.0 as usize], &names[a.1 as usize]);
                    let kb = (&names[b.0 as usize], &names[b.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(p, _)| *p);
        let Some((left, right)) = best else { break };
        let merged_name = format!("{}{}", names[left as usize], names[right as usize]);
        merges.push((names[left as usize].clone(), names[right as usize].clone()));
        let merged = intern(merged_name, &mut names);

        for (syms, c) in words.iter_mut() {
            if !syms.windows(2).any(|w| w[0] == left && w[1] == right) {
                continue;
            }
            let c = *c as i64;
            for w in syms.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() -= c;
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            for w in out.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += c;
            }
            *syms = out;
        }
        pair_counts.retain(|_, c| *c > 0);
    }

    let mut tokens: Vec<String> = vec![PAD.into(), BOS.into(), EOS.into(), UNK.into()];
    for code in target_langs {
        let tag = tag_token(code);
        if !tokens.contains(&tag) {
            tokens.push(tag);
        }
    }
    let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    for sym in base_symbols {
        if seen.insert(sym.clone()) {
            tokens.push(sym);
        }
    }
    for (l, r) in &merges {
        let sym = format!("{l}{r}");
        if seen.insert(sym.clone()) {
            tokens.push(sym);
        }
    }
    BpeModel::from_parts(merges, tokens)
}
