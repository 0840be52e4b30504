//! Function-name tokenizer: raw symbol names to ordered word sequences over a
//! fixed vocabulary.
//!
//! Names are normalized into lowercase fragments (split on `_` and other
//! non-alphanumerics, letter/digit boundaries and lower-to-upper camelCase
//! boundaries). Each fragment is then decomposed into vocabulary words by a
//! recursive longest-prefix match. Fragments with no decomposition are dropped.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_VOCAB_SIZE: usize = 1024;
pub const DEFAULT_MAX_WORDS: usize = 20;

pub const PAD: &str = "[PAD]";
pub const EOS: &str = "[EOS]";
pub const CLS: &str = "[CLS]";
pub const MASK: &str = "[MASK]";

/// Ids of the special tokens. Specials occupy ids `0..4`; words follow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad: u32,
    pub eos: u32,
    pub cls: u32,
    pub mask: u32,
}

impl Default for Specials {
    fn default() -> Self {
        Specials {
            pad: 0,
            eos: 1,
            cls: 2,
            mask: 3,
        }
    }
}

impl Specials {
    pub const COUNT: u32 = 4;

    pub fn contains(&self, id: u32) -> bool {
        id == self.pad || id == self.eos || id == self.cls || id == self.mask
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
    specials: Specials,
    abbreviations: HashMap<String, Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    words: Vec<String>,
    specials: Specials,
    #[serde(default, skip_serializing_if = "HashMap::is_empty")]
    abbreviations: HashMap<String, String>,
}

/// Splits a raw name into lowercase fragments.
pub fn normalize(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut prev: Option<char> = None;
    for ch in raw.chars() {
        if !ch.is_ascii_alphanumeric() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            prev = None;
            continue;
        }
        if let Some(p) = prev {
            let boundary = (p.is_ascii_digit() != ch.is_ascii_digit())
                || (p.is_ascii_lowercase() && ch.is_ascii_uppercase());
            if boundary && !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        }
        cur.push(ch.to_ascii_lowercase());
        prev = Some(ch);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl Vocabulary {
    /// Keeps the `vocab_size` most frequent normalized fragments of the
    /// corpus; frequency ties are broken lexicographically.
    pub fn build<S: AsRef<str>>(raw_names: &[S], vocab_size: usize) -> Result<Self> {
        if raw_names.is_empty() {
            return Err(Error::EmptyCorpus("no function names to build a vocabulary from"));
        }
        if vocab_size == 0 {
            return Err(Error::config("vocabulary size must be at least 1"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for name in raw_names {
            for frag in normalize(name.as_ref()) {
                *counts.entry(frag).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus("corpus names contain no alphanumeric words"));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(vocab_size);
        Self::from_words(ranked.into_iter().map(|(w, _)| w).collect())
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let specials = Specials::default();
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains('_') {
                return Err(Error::Malformed(format!("invalid vocabulary word {w:?}")));
            }
            if index.insert(w.clone(), Specials::COUNT + i as u32).is_some() {
                return Err(Error::Malformed(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Vocabulary {
            words,
            index,
            specials,
            abbreviations: HashMap::new(),
        })
    }

    /// Installs a substitution table applied to fragments before
    /// decomposition, e.g. `init -> initialise`. Replacements may contain
    /// several `_`-separated words.
    pub fn with_abbreviations(mut self, table: HashMap<String, String>) -> Self {
        self.abbreviations = table
            .into_iter()
            .map(|(k, v)| (k.to_ascii_lowercase(), normalize(&v)))
            .collect();
        self
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    /// Total id space: specials plus words.
    pub fn size(&self) -> usize {
        self.words.len() + Specials::COUNT as usize
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn is_word(&self, id: u32) -> bool {
        id >= Specials::COUNT && ((id - Specials::COUNT) as usize) < self.words.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        let s = self.specials;
        match id {
            i if i == s.pad => Some(PAD),
            i if i == s.eos => Some(EOS),
            i if i == s.cls => Some(CLS),
            i if i == s.mask => Some(MASK),
            i if self.is_word(i) => Some(&self.words[(i - Specials::COUNT) as usize]),
            _ => None,
        }
    }

    fn decompose(&self, frag: &str, memo: &mut HashMap<usize, Option<Vec<u32>>>) -> Option<Vec<u32>> {
        if frag.is_empty() {
            return Some(Vec::new());
        }
        if let Some(hit) = memo.get(&frag.len()) {
            return hit.clone();
        }
        let mut result = None;
        for end in (1..=frag.len()).rev() {
            if let Some(id) = self.id(&frag[..end]) {
                if let Some(mut rest) = self.decompose(&frag[end..], memo) {
                    rest.insert(0, id);
                    result = Some(rest);
                    break;
                }
            }
        }
        memo.insert(frag.len(), result.clone());
        result
    }

    /// Tokenizes a raw name into at most `max_words` word ids plus `[EOS]`.
    pub fn tokenize(&self, raw: &str, max_words: usize) -> NameSequence {
        let mut ids = Vec::new();
        for frag in normalize(raw) {
            let expanded = match self.abbreviations.get(&frag) {
                Some(rep) => rep.clone(),
                None => vec![frag],
            };
            for piece in expanded {
                // memo is keyed by suffix length, valid within one fragment
                let mut memo = HashMap::new();
                if let Some(found) = self.decompose(&piece, &mut memo) {
                    ids.extend(found);
                }
            }
        }
        ids.truncate(max_words);
        ids.push(self.specials.eos);
        NameSequence { ids }
    }

    /// Joins the words of `seq` with `_`.
    pub fn detokenize(&self, seq: &NameSequence) -> Result<String> {
        let words = self.words_of(seq)?;
        Ok(words.join("_"))
    }

    /// Word strings of a valid sequence, specials omitted.
    pub fn words_of(&self, seq: &NameSequence) -> Result<Vec<String>> {
        seq.validate(self)?;
        Ok(seq
            .word_ids(self.specials)
            .iter()
            .map(|&id| self.token(id).expect("validated").to_string())
            .collect())
    }

    /// Stable digest of the vocabulary contents.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        let mut abbrev: Vec<_> = self.abbreviations.iter().collect();
        abbrev.sort();
        for (k, v) in abbrev {
            h.update(k.as_bytes());
            h.update([1u8]);
            h.update(v.join("_").as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabularyFile {
            words: self.words.clone(),
            specials: self.specials,
            abbreviations: self
                .abbreviations
                .iter()
                .map(|(k, v)| (k.clone(), v.join("_")))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabularyFile = serde_json::from_str(text)?;
        if file.specials != Specials::default() {
            return Err(Error::Malformed("unexpected special-token ids".into()));
        }
        Ok(Self::from_words(file.words)?.with_abbreviations(file.abbreviations))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// A tokenized name: word ids followed by exactly one `[EOS]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NameSequence {
    pub ids: Vec<u32>,
}

impl NameSequence {
    pub fn from_words(words: &[u32], eos: u32) -> Self {
        let mut ids = words.to_vec();
        ids.push(eos);
        NameSequence { ids }
    }

    /// Word ids up to the first special token.
    pub fn word_ids(&self, specials: Specials) -> &[u32] {
        let end = self
            .ids
            .iter()
            .position(|&id| specials.contains(id))
            .unwrap_or(self.ids.len());
        &self.ids[..end]
    }

    pub fn num_words(&self, specials: Specials) -> usize {
        self.word_ids(specials).len()
    }

    /// Checks the layout `word* [EOS] [PAD]*` and that every id is known.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let s = vocab.specials();
        let mut seen_eos = false;
        for (pos, &id) in self.ids.iter().enumerate() {
            if vocab.token(id).is_none() {
                return Err(Error::CorruptSequence(format!("unknown id {id} at position {pos}")));
            }
            if seen_eos {
                if id != s.pad {
                    return Err(Error::CorruptSequence(format!(
                        "id {id} after [EOS] at position {pos}"
                    )));
                }
            } else if id == s.eos {
                seen_eos = true;
            } else if s.contains(id) {
                return Err(Error::CorruptSequence(format!(
                    "special id {id} before [EOS] at position {pos}"
                )));
            }
        }
        if !seen_eos {
            return Err(Error::CorruptSequence("missing [EOS]".into()));
        }
        Ok(())
    }

    /// Ids padded with `[PAD]` (or truncated) to exactly `len` entries.
    pub fn padded(&self, len: usize, pad: u32) -> Vec<u32> {
        let mut out: Vec<u32> = self.ids.iter().copied().take(len).collect();
        out.resize(len, pad);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(words: &[&str]) -> Vocabulary {
        Vocabulary::from_words(words.iter().map(|w| w.to_string()).collect()).unwrap()
    }

    #[test]
    fn normalize_boundaries() {
        assert_eq!(normalize("removeFromEdited"), ["remove", "from", "edited"]);
        assert_eq!(normalize("__libc_csu_init"), ["libc", "csu", "init"]);
        assert_eq!(normalize("sha256Update"), ["sha", "256", "update"]);
        assert_eq!(normalize("HTTPGet"), ["httpget"]);
        assert!(normalize("___").is_empty());
    }

    #[test]
    fn build_counts_and_ties() {
        let v = Vocabulary::build(&["get_name", "get_path"], 3).unwrap();
        assert_eq!(v.words(), ["get", "name", "path"]);
        let v = Vocabulary::build(&["get_name", "get_path"], 2).unwrap();
        assert_eq!(v.words(), ["get", "name"]);
        let v = Vocabulary::build(&["main"], 1024).unwrap();
        assert_eq!(v.words(), ["main"]);
        assert_eq!(v.size(), 5);
    }

    #[test]
    fn build_rejects_empty() {
        let empty: [&str; 0] = [];
        assert!(matches!(Vocabulary::build(&empty, 8), Err(Error::EmptyCorpus(_))));
        assert!(Vocabulary::build(&["a"], 0).is_err());
    }

    #[test]
    fn tokenize_known_examples() {
        let v = vocab(&["convert", "hex", "to", "int", "remove", "from", "main"]);
        let seq = v.tokenize("convert_hex_to_int", DEFAULT_MAX_WORDS);
        assert_eq!(v.words_of(&seq).unwrap(), ["convert", "hex", "to", "int"]);
        assert_eq!(*seq.ids.last().unwrap(), v.specials().eos);
        let seq = v.tokenize("removeFromEdited", DEFAULT_MAX_WORDS);
        assert_eq!(v.detokenize(&seq).unwrap(), "remove_from");
        let seq = v.tokenize("main", DEFAULT_MAX_WORDS);
        assert_eq!(seq.ids, [v.id("main").unwrap(), v.specials().eos]);
    }

    #[test]
    fn recursive_longest_match() {
        let v = vocab(&["str", "string", "ing", "len", "cpy", "strcpy"]);
        let seq = v.tokenize("strlen", 20);
        assert_eq!(v.words_of(&seq).unwrap(), ["str", "len"]);
        // longest prefix "string" leaves "x" undecomposable; backtracks
        let v = vocab(&["str", "string", "ingx"]);
        let seq = v.tokenize("stringx", 20);
        assert_eq!(v.words_of(&seq).unwrap(), ["str", "ingx"]);
    }

    #[test]
    fn abbreviations_expand_before_decomposition() {
        let table = HashMap::from([("init".to_string(), "initialise".to_string())]);
        let v = vocab(&["initialise", "buffer"]).with_abbreviations(table);
        let seq = v.tokenize("init_buffer", 20);
        assert_eq!(v.detokenize(&seq).unwrap(), "initialise_buffer");
    }

    #[test]
    fn truncation_keeps_eos() {
        let v = vocab(&["a", "b"]);
        let seq = v.tokenize("a_b_a_b_a", 3);
        assert_eq!(seq.ids.len(), 4);
        assert_eq!(seq.num_words(v.specials()), 3);
        assert!(seq.validate(&v).is_ok());
    }

    #[test]
    fn detokenize_errors() {
        let v = vocab(&["get"]);
        let s = v.specials();
        let get = v.id("get").unwrap();
        assert_eq!(v.detokenize(&NameSequence { ids: vec![s.eos] }).unwrap(), "");
        let bad = NameSequence { ids: vec![get, s.pad, s.eos] };
        assert!(matches!(v.detokenize(&bad), Err(Error::CorruptSequence(_))));
        let unknown = NameSequence { ids: vec![99, s.eos] };
        assert!(v.detokenize(&unknown).is_err());
        let trailing = NameSequence { ids: vec![get, s.eos, s.pad, s.pad] };
        assert_eq!(v.detokenize(&trailing).unwrap(), "get");
    }

    #[test]
    fn json_round_trip_keeps_ids() {
        let v = Vocabulary::build(&["get_name", "set_name", "free_list"], 16).unwrap();
        let back = Vocabulary::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(v, back);
        for w in v.words() {
            assert_eq!(v.id(w), back.id(w));
        }
        assert_eq!(v.content_hash(), back.content_hash());
    }
}
