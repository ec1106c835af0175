//! Text normalization and byte-pair-encoding subword tokenization.
//!
//! Words are split into characters plus an end-of-word marker symbol, and
//! merges are learned greedily on adjacent symbol pairs. Ties between equally
//! frequent pairs go to the lexicographically smallest `(left, right)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
/// Appended to every word before splitting into symbols. Non-ASCII, so it
/// never collides with normalized text.
pub const END_OF_WORD: &str = "\u{b7}";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

const SPECIALS: [&str; 4] = [PAD, BOS, EOS, UNK];
const FILE_MAGIC: &str = "bpe-v1";
const VOCAB_SENTINEL: &str = "#vocab";

/// Desk-scale default vocabulary size.
pub const DESK_VOCAB_SIZE: usize = 2_000;
/// Vocabulary size used for the full-scale configuration.
pub const FULL_VOCAB_SIZE: usize = 50_000;

/// Normalization and truncation settings.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Preprocessor {
    pub max_tokens: usize,
    pub lowercase: bool,
    pub ascii_only: bool,
}

impl Default for Preprocessor {
    fn default() -> Self {
        Preprocessor {
            max_tokens: 600,
            lowercase: true,
            ascii_only: true,
        }
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || !(c.is_alphanumeric() || c.is_whitespace())
}

impl Preprocessor {
    pub fn new(max_tokens: usize) -> Result<Self> {
        let p = Preprocessor {
            max_tokens,
            ..Default::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tokens < 3 {
            return Err(Error::Config(format!(
                "max_tokens must be at least 3, got {}",
                self.max_tokens
            )));
        }
        Ok(())
    }

    /// Filters, lowercases and splits `text` into words. Leading and trailing
    /// punctuation is detached one character at a time; internal characters
    /// (hyphens, apostrophes, periods) stay with the word.
    pub fn preprocess(&self, text: &str) -> Vec<String> {
        let mut cleaned: String = if self.ascii_only {
            text.chars().filter(char::is_ascii).collect()
        } else {
            text.to_string()
        };
        if self.lowercase {
            cleaned = cleaned.to_lowercase();
        }
        let mut words = Vec::new();
        for chunk in cleaned.split_whitespace() {
            let chars: Vec<char> = chunk.chars().collect();
            let start = chars.iter().position(|&c| !is_punct(c));
            let Some(start) = start else {
                words.extend(chars.iter().map(|c| c.to_string()));
                continue;
            };
            let end = chars.iter().rposition(|&c| !is_punct(c)).unwrap() + 1;
            words.extend(chars[..start].iter().map(|c| c.to_string()));
            words.push(chars[start..end].iter().collect());
            words.extend(chars[end..].iter().map(|c| c.to_string()));
        }
        words
    }

    /// `[BOS] + ids[..max_tokens − 2] + [EOS]`.
    pub fn frame(&self, ids: &[usize]) -> Vec<usize> {
        let keep = ids.len().min(self.max_tokens - 2);
        let mut out = Vec::with_capacity(keep + 2);
        out.push(BOS_ID);
        out.extend_from_slice(&ids[..keep]);
        out.push(EOS_ID);
        out
    }
}

/// Pads framed sequences to the batch maximum. Returns the padded ids and a
/// validity mask (`true` for real tokens).
pub fn pad_batch(framed: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = framed.iter().map(Vec::len).max().unwrap_or(0);
    framed
        .iter()
        .map(|seq| {
            let mut ids = seq.clone();
            let mut mask = vec![true; seq.len()];
            ids.resize(width, PAD_ID);
            mask.resize(width, false);
            (ids, mask)
        })
        .unzip()
}

/// Learned merge rules and vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    symbols: Vec<String>,
    ids: HashMap<String, usize>,
    ranks: HashMap<(usize, usize), (usize, usize)>,
    eow: usize,
}

impl BpeModel {
    fn from_parts(merges: Vec<(String, String)>, symbols: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if ids.insert(s.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary symbol {s:?}")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if ids.get(*s) != Some(&i) {
                return Err(Error::Data(format!("special token {s} must have id {i}")));
            }
        }
        let eow = *ids
            .get(END_OF_WORD)
            .ok_or_else(|| Error::Data("vocabulary lacks the end-of-word marker".into()))?;
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |s: &str| {
                ids.get(s)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("merge {rank} references unknown symbol {s:?}")))
            };
            let key = (lookup(l)?, lookup(r)?);
            let merged = lookup(&format!("{l}{r}"))?;
            ranks.entry(key).or_insert((rank, merged));
        }
        Ok(BpeModel {
            merges,
            symbols,
            ids,
            ranks,
            eow,
        })
    }

    /// Learns merges over `corpus` (sequences of preprocessed words) until the
    /// vocabulary holds `vocab_size` symbols or no pair occurs twice.
    pub fn train(corpus: &[Vec<String>], vocab_size: usize) -> Result<Self> {
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for word in corpus.iter().flatten() {
            *freq.entry(word.as_str()).or_default() += 1;
        }
        if freq.is_empty() {
            return Err(Error::Data("cannot train a tokenizer on an empty corpus".into()));
        }
        let chars: BTreeSet<String> = freq
            .keys()
            .flat_map(|w| w.chars())
            .map(String::from)
            .filter(|c| c != END_OF_WORD)
            .collect();
        let mut symbols: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        symbols.extend(chars);
        symbols.push(END_OF_WORD.to_string());
        if vocab_size < symbols.len() {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} is below the {} base symbols",
                symbols.len()
            )));
        }
        let mut ids: HashMap<String, usize> =
            symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let eow = ids[END_OF_WORD];

        let mut words: Vec<(Vec<usize>, usize)> = freq
            .iter()
            .map(|(w, &n)| {
                let mut seq: Vec<usize> = w
                    .chars()
                    .map(|c| ids.get(c.to_string().as_str()).copied().unwrap_or(UNK_ID))
                    .collect();
                seq.push(eow);
                (seq, n)
            })
            .collect();

        let mut merges = Vec::new();
        let mut banned: BTreeSet<(usize, usize)> = BTreeSet::new();
        while symbols.len() < vocab_size {
            let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
            for (seq, n) in &words {
                for pair in seq.windows(2) {
                    if pair[0] == UNK_ID || pair[1] == UNK_ID {
                        continue;
                    }
                    *counts.entry((pair[0], pair[1])).or_default() += n;
                }
            }
            let best = counts
                .iter()
                .filter(|(pair, &c)| c >= 2 && !banned.contains(pair))
                .max_by(|(pa, ca), (pb, cb)| {
                    ca.cmp(cb).then_with(|| {
                        let ka = (&symbols[pa.0], &symbols[pa.1]);
                        let kb = (&symbols[pb.0], &symbols[pb.1]);
                        kb.cmp(&ka)
                    })
                })
                .map(|(p, _)| *p);
            let Some((l, r)) = best else { break };
            let merged = format!("{}{}", symbols[l], symbols[r]);
            if SPECIALS.contains(&merged.as_str()) {
                banned.insert((l, r));
                continue;
            }
            let id = match ids.get(&merged) {
                Some(&id) => id,
                None => {
                    symbols.push(merged.clone());
                    ids.insert(merged, symbols.len() - 1);
                    symbols.len() - 1
                }
            };
            merges.push((symbols[l].clone(), symbols[r].clone()));
            for (seq, _) in &mut words {
                merge_pair(seq, l, r, id);
            }
        }
        BpeModel::from_parts(merges, symbols)
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.ids.get(symbol).copied()
    }

    pub fn encode_word(&self, word: &str) -> Vec<usize> {
        let mut seq: Vec<usize> = word
            .chars()
            .map(|c| {
                let s = c.to_string();
                if s == END_OF_WORD {
                    UNK_ID
                } else {
                    self.ids.get(&s).copied().unwrap_or(UNK_ID)
                }
            })
            .collect();
        seq.push(self.eow);
        loop {
            let best = seq
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&(rank, id)| (rank, p[0], p[1], id)))
                .min();
            let Some((_, l, r, id)) = best else { break };
            merge_pair(&mut seq, l, r, id);
        }
        seq
    }

    pub fn encode(&self, words: &[String]) -> Vec<usize> {
        words.iter().flat_map(|w| self.encode_word(w)).collect()
    }

    /// Encodes and also returns, per token, the index of its source word.
    pub fn encode_aligned(&self, words: &[String]) -> (Vec<usize>, Vec<usize>) {
        let mut ids = Vec::new();
        let mut word_of = Vec::new();
        for (wi, w) in words.iter().enumerate() {
            let toks = self.encode_word(w);
            word_of.extend(std::iter::repeat(wi).take(toks.len()));
            ids.extend(toks);
        }
        (ids, word_of)
    }

    /// Words joined by single spaces. BOS/EOS/PAD are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut text = String::new();
        for &id in ids {
            if matches!(id, PAD_ID | BOS_ID | EOS_ID) {
                continue;
            }
            text.push_str(self.symbols.get(id).map_or(UNK, String::as_str));
        }
        text.split(END_OF_WORD)
            .filter(|w| !w.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{FILE_MAGIC} {}", self.symbols.len());
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        let _ = writeln!(out, "{VOCAB_SENTINEL}");
        for (i, s) in self.symbols.iter().enumerate() {
            let _ = writeln!(out, "{s}\t{i}");
        }
        out
    }

    pub fn from_file_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Data("empty tokenizer file".into()))?;
        let size: usize = header
            .strip_prefix(FILE_MAGIC)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| Error::Data(format!("bad tokenizer header {header:?}")))?;
        let mut merges = Vec::new();
        let mut found_sentinel = false;
        for line in lines.by_ref() {
            if line == VOCAB_SENTINEL {
                found_sentinel = true;
                break;
            }
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| Error::Data(format!("bad merge line {line:?}")))?;
            merges.push((l.to_string(), r.to_string()));
        }
        if !found_sentinel {
            return Err(Error::Data("tokenizer file lacks #vocab section".into()));
        }
        let mut symbols = Vec::with_capacity(size);
        for line in lines {
            let (sym, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Data(format!("bad vocab line {line:?}")))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Data(format!("bad vocab id in {line:?}")))?;
            if id != symbols.len() {
                return Err(Error::Data(format!("vocab ids must be dense, found {id}")));
            }
            symbols.push(sym.to_string());
        }
        if symbols.len() != size {
            return Err(Error::Data(format!(
                "header declares {size} symbols, file has {}",
                symbols.len()
            )));
        }
        BpeModel::from_parts(merges, symbols)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file_str(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the serialized file, hex encoded. Checkpoints record it.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn merge_pair(seq: &mut Vec<usize>, l: usize, r: usize, id: usize) {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == l && seq[i + 1] == r {
            out.push(id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

/// A note after normalization, subword encoding and framing.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedText {
    pub words: Vec<String>,
    /// `BOS … EOS` token ids.
    pub ids: Vec<usize>,
    /// Source word of each framed position; `None` for BOS and EOS.
    pub word_of: Vec<Option<usize>>,
}

/// Preprocessor plus BPE model.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub pre: Preprocessor,
    pub bpe: BpeModel,
}

impl Tokenizer {
    pub fn new(pre: Preprocessor, bpe: BpeModel) -> Self {
        Tokenizer { pre, bpe }
    }

    pub fn encode(&self, text: &str) -> EncodedText {
        let words = self.pre.preprocess(text);
        let (ids, word_of) = self.bpe.encode_aligned(&words);
        let framed = self.pre.frame(&ids);
        let mut aligned = Vec::with_capacity(framed.len());
        aligned.push(None);
        aligned.extend(word_of[..framed.len() - 2].iter().map(|&w| Some(w)));
        aligned.push(None);
        EncodedText {
            words,
            ids: framed,
            word_of: aligned,
        }
    }
}
