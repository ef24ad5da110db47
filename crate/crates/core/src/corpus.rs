//! Corpus ingestion: character and word vocabularies, aligned char/word
//! encoding, the 8-bit binary view of a text and seeded line splits.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{streams, Rng};

pub const UNK: &str = "<UNK>";
pub const BITS_PER_CHAR: usize = 8;

/// Bijection between the characters of the training text and `0..d`.
/// Ids are assigned in code-point order. Id `d` is reserved for characters
/// never seen in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<char>", into = "Vec<char>")]
pub struct CharVocab {
    chars: Vec<char>,
    ids: HashMap<char, u32>,
}

impl CharVocab {
    pub fn build(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::Input("cannot build a character vocabulary from empty text".into()));
        }
        let mut chars: Vec<char> = text.chars().collect();
        chars.sort_unstable();
        chars.dedup();
        CharVocab::from_chars(chars)
    }

    /// The two-symbol alphabet used in bit mode; `'0'` and `'1'` are ids 0 and 1.
    pub fn binary() -> Self {
        CharVocab::from_chars(vec!['0', '1']).expect("two distinct symbols")
    }

    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if ids.insert(c, i as u32).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry {c:?}")));
            }
        }
        if chars.is_empty() {
            return Err(Error::Input("empty character vocabulary".into()));
        }
        Ok(CharVocab { chars, ids })
    }

    /// Alphabet size `d`.
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn unseen_id(&self) -> u32 {
        self.chars.len() as u32
    }

    pub fn id(&self, c: char) -> Option<u32> {
        self.ids.get(&c).copied()
    }

    pub fn char_of(&self, id: u32) -> Option<char> {
        self.chars.get(id as usize).copied()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Encodes every character, mapping unknown ones to [`Self::unseen_id`].
    /// Returns the ids and the number of unseen characters.
    pub fn encode(&self, text: &str) -> (Vec<u32>, usize) {
        let unseen = self.unseen_id();
        let mut misses = 0;
        let ids = text
            .chars()
            .map(|c| {
                self.id(c).unwrap_or_else(|| {
                    misses += 1;
                    unseen
                })
            })
            .collect();
        (ids, misses)
    }

    /// Unseen ids decode to U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.char_of(i).unwrap_or(char::REPLACEMENT_CHARACTER))
            .collect()
    }

    /// One escaped character per line, line number = id.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for &c in &self.chars {
            out.push_str(&escape_char(c));
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let chars = text
            .lines()
            .map(|line| {
                let s = unescape(line)?;
                let mut it = s.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Ok(c),
                    _ => Err(Error::Input(format!("bad vocabulary line {line:?}"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        CharVocab::from_chars(chars)
    }
}

impl TryFrom<Vec<char>> for CharVocab {
    type Error = Error;
    fn try_from(chars: Vec<char>) -> Result<Self> {
        CharVocab::from_chars(chars)
    }
}

impl From<CharVocab> for Vec<char> {
    fn from(v: CharVocab) -> Self {
        v.chars
    }
}

/// Word dictionary: id 0 is `<UNK>`, the rest ordered by descending training
/// frequency with lexicographic tie-breaking. Because of that order, the
/// first `k_out` ids form the restricted output vocabulary of the mixed
/// model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct WordVocab {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl WordVocab {
    pub const UNK_ID: u32 = 0;

    pub fn build(text: &str, top_k: usize) -> Result<Self> {
        if top_k < 1 {
            return Err(Error::Param("word vocabulary size must be at least 1".into()));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let mut any = false;
        for tok in text.split_whitespace() {
            any = true;
            if tok != UNK {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::Input("cannot build a word vocabulary from empty text".into()));
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let words = std::iter::once(UNK.to_string())
            .chain(ranked.into_iter().take(top_k - 1).map(|(w, _)| w.to_string()))
            .collect();
        WordVocab::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Input(format!("word vocabulary must start with {UNK}")));
        }
        let mut ids = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Input(format!("invalid word entry {w:?}")));
            }
            if ids.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(WordVocab { words, ids })
    }

    /// Vocabulary size `k`, `<UNK>` included.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn lookup(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    /// Like [`Self::lookup`] but maps unknown words to `<UNK>`.
    pub fn id(&self, word: &str) -> u32 {
        self.lookup(word).unwrap_or(Self::UNK_ID)
    }

    pub fn word_of(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for w in &self.words {
            out.push_str(w);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        WordVocab::from_words(text.lines().map(str::to_string).collect())
    }
}

impl TryFrom<Vec<String>> for WordVocab {
    type Error = Error;
    fn try_from(words: Vec<String>) -> Result<Self> {
        WordVocab::from_words(words)
    }
}

impl From<WordVocab> for Vec<String> {
    fn from(v: WordVocab) -> Self {
        v.words
    }
}

/// A corpus as aligned character and word id sequences.
///
/// `word_of_char[t]` is the index of the token character `t` belongs to; a
/// token's trailing whitespace belongs to it and leading whitespace before
/// the first token belongs to token 0. Streams built from raw symbol
/// sequences (bit mode) carry no word information.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedStream {
    pub chars: Vec<u32>,
    pub words: Vec<u32>,
    pub word_of_char: Vec<u32>,
    /// Characters that were not in the vocabulary.
    pub unseen: usize,
}

impl EncodedStream {
    pub fn from_chars(chars: Vec<u32>) -> Self {
        EncodedStream {
            chars,
            words: Vec::new(),
            word_of_char: Vec::new(),
            unseen: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn has_words(&self) -> bool {
        !self.words.is_empty() && self.word_of_char.len() == self.chars.len()
    }

    /// True when character `t` is the last one of its word (trailing
    /// whitespace included).
    pub fn is_word_end(&self, t: usize) -> bool {
        t + 1 == self.word_of_char.len() || self.word_of_char[t + 1] != self.word_of_char[t]
    }
}

pub fn encode_stream(text: &str, cv: &CharVocab, wv: &WordVocab) -> EncodedStream {
    let (chars, unseen) = cv.encode(text);
    let mut words = Vec::new();
    let mut word_of_char = Vec::with_capacity(chars.len());
    let mut current = String::new();
    let mut prev_ws = true;
    for c in text.chars() {
        let ws = c.is_whitespace();
        if !ws && prev_ws && !current.is_empty() {
            words.push(wv.id(&current));
            current.clear();
        }
        if !ws {
            current.push(c);
        }
        prev_ws = ws;
        word_of_char.push(words.len() as u32);
    }
    if !current.is_empty() {
        words.push(wv.id(&current));
    }
    if words.is_empty() {
        word_of_char.clear();
    }
    EncodedStream {
        chars,
        words,
        word_of_char,
        unseen,
    }
}

/// A text expanded to its 8-bit representation, most significant bit first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitStream {
    pub bits: Vec<u32>,
}

impl BitStream {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn char_count(&self) -> usize {
        self.bits.len() / BITS_PER_CHAR
    }

    pub fn to_stream(&self) -> EncodedStream {
        EncodedStream::from_chars(self.bits.clone())
    }
}

pub fn encode_bits(text: &str) -> Result<BitStream> {
    let mut bits = Vec::with_capacity(text.len() * BITS_PER_CHAR);
    for c in text.chars() {
        let code = c as u32;
        if code > 0xff {
            return Err(Error::Input(format!(
                "character {c:?} (U+{code:04X}) does not fit in 8 bits"
            )));
        }
        for shift in (0..BITS_PER_CHAR).rev() {
            bits.push((code >> shift) & 1);
        }
    }
    Ok(BitStream { bits })
}

/// Inverse of [`encode_bits`]; bytes are read back as code points 0..=255.
pub fn decode_bits(bits: &[u32]) -> Result<String> {
    if bits.len() % BITS_PER_CHAR != 0 {
        return Err(Error::Input(format!(
            "{} bits is not a whole number of characters",
            bits.len()
        )));
    }
    bits.chunks_exact(BITS_PER_CHAR)
        .map(|chunk| {
            chunk.iter().try_fold(0u32, |acc, &b| match b {
                0 | 1 => Ok((acc << 1) | b),
                _ => Err(Error::Input(format!("bit value {b}"))),
            })
        })
        .map(|code| code.map(|c| char::from_u32(c).expect("code point below 256")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 60_000,
            valid: 10_000,
            test: 10_000,
        }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.valid + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded Fisher–Yates permutation of `0..n`, cut into train/valid/test in
/// order. Indices past `sizes.total()` are dropped.
pub fn split_indices(n: usize, seed: u64, sizes: SplitSizes) -> Result<Split<usize>> {
    if n < sizes.total() {
        return Err(Error::Input(format!(
            "corpus has {n} lines, split needs {}",
            sizes.total()
        )));
    }
    let mut rng = Rng::derive(seed, streams::SPLIT);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        perm.swap(i, j);
    }
    let test = perm[sizes.train + sizes.valid..sizes.total()].to_vec();
    let valid = perm[sizes.train..sizes.train + sizes.valid].to_vec();
    perm.truncate(sizes.train);
    Ok(Split {
        train: perm,
        valid,
        test,
    })
}

pub fn split_lines<T: Clone>(lines: &[T], seed: u64, sizes: SplitSizes) -> Result<Split<T>> {
    let idx = split_indices(lines.len(), seed, sizes)?;
    let pick = |ids: &[usize]| ids.iter().map(|&i| lines[i].clone()).collect();
    Ok(Split {
        train: pick(&idx.train),
        valid: pick(&idx.valid),
        test: pick(&idx.test),
    })
}

/// Fraction of whitespace-delimited tokens that fall outside the vocabulary.
/// Literal `<UNK>` tokens are in-vocabulary by definition.
pub fn oov_rate(wv: &WordVocab, text: &str) -> Result<f64> {
    let mut total = 0usize;
    let mut oov = 0usize;
    for tok in text.split_whitespace() {
        total += 1;
        if wv.lookup(tok).is_none() {
            oov += 1;
        }
    }
    if total == 0 {
        return Err(Error::Input("no tokens in text".into()));
    }
    Ok(oov as f64 / total as f64)
}

/// Escapes a character for line-oriented files: `\\`, `\n`, `\t`, `\r`,
/// `\s` (space) and `\u{hex}` for other control characters.
pub fn escape_char(c: char) -> String {
    match c {
        '\\' => "\\\\".into(),
        '\n' => "\\n".into(),
        '\t' => "\\t".into(),
        '\r' => "\\r".into(),
        ' ' => "\\s".into(),
        c if c.is_control() || c.is_whitespace() => format!("\\u{{{:x}}}", c as u32),
        c => c.to_string(),
    }
}

pub fn escape_str(s: &str) -> String {
    s.chars().map(escape_char).collect()
}

pub fn unescape(s: &str) -> Result<String> {
    let bad = || Error::Input(format!("bad escape sequence in {s:?}"));
    let mut out = String::new();
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next().ok_or_else(bad)? {
            '\\' => out.push('\\'),
            'n' => out.push('\n'),
            't' => out.push('\t'),
            'r' => out.push('\r'),
            's' => out.push(' '),
            'u' => {
                if it.next() != Some('{') {
                    return Err(bad());
                }
                let hex: String = it.by_ref().take_while(|&h| h != '}').collect();
                let code = u32::from_str_radix(&hex, 16).map_err(|_| bad())?;
                out.push(char::from_u32(code).ok_or_else(bad)?);
            }
            _ => return Err(bad()),
        }
    }
    Ok(out)
}
