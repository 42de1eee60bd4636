//! Subword tokenizers and token-budget analysis.
//!
//! Both tokenizers share five reserved ids: `[PAD]=0`, `[UNK]=1`,
//! `[CLS]=2`, `[SEP]=3`, `[MASK]=4`. Learned vocabulary starts at id 5, and
//! `vocab_size` arguments count learned entries only.
//!
//! The BPE base alphabet is characters, not bytes, and whitespace is an
//! ordinary character. One tokenizer therefore handles English prose and
//! DNA the same way.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasetgen::PairRecord;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
const N_SPECIAL: u32 = SPECIALS.len() as u32;

const FORMAT_VERSION: &str = "v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocab size {requested} is smaller than the base alphabet ({alphabet})")]
    VocabTooSmall { requested: usize, alphabet: usize },
    #[error("token {0:?} is already in the vocabulary")]
    DuplicateToken(String),
    #[error("empty token")]
    EmptyToken,
    #[error("tokenizer file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}

/// Behaviour shared by the BPE and WordPiece tokenizers.
pub trait Tokenizer {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn decode(&self, ids: &[u32]) -> String;
    /// Total id space, specials included.
    fn vocab_len(&self) -> usize;
    fn token(&self, id: u32) -> Option<&str>;
    fn serialize(&self) -> String;
}

fn escape_token(tok: &str, out: &mut String) {
    for c in tok.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            ' ' => out.push_str("\\s"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c if c.is_control() => {
                let _ = write!(out, "\\u{{{:x}}}", c as u32);
            }
            c => out.push(c),
        }
    }
}

fn unescape_token(s: &str, line: usize) -> Result<String, TokError> {
    let err = |msg: &str| TokError::Format { line, msg: msg.to_string() };
    let mut out = String::new();
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('s') => out.push(' '),
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('u') => {
                if chars.next() != Some('{') {
                    return Err(err("bad \\u escape"));
                }
                let hex: String = chars.by_ref().take_while(|&c| c != '}').collect();
                let v = u32::from_str_radix(&hex, 16).map_err(|_| err("bad \\u escape"))?;
                out.push(char::from_u32(v).ok_or_else(|| err("bad code point"))?);
            }
            _ => return Err(err("bad escape")),
        }
    }
    if out.is_empty() {
        return Err(err("empty token"));
    }
    Ok(out)
}

/// Character-level byte-pair-encoding tokenizer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeTokenizer {
    /// id → token string; ids below 5 are the specials.
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    merges: Vec<(u32, u32)>,
    /// (left, right) → (rank, merged id)
    ranks: HashMap<(u32, u32), (usize, u32)>,
    char_ids: HashMap<char, u32>,
}

#[derive(PartialEq, Eq)]
struct HeapPair {
    count: i64,
    left: String,
    right: String,
    pair: (u32, u32),
}

impl Ord for HeapPair {
    fn cmp(&self, other: &Self) -> Ordering {
        // Max count first, then lexicographically smallest (left, right).
        self.count.cmp(&other.count).then_with(|| other.left.cmp(&self.left)).then_with(|| other.right.cmp(&self.right))
    }
}

impl PartialOrd for HeapPair {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl BpeTokenizer {
    fn empty() -> Self {
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        BpeTokenizer {
            tokens,
            ids: HashMap::new(),
            merges: Vec::new(),
            ranks: HashMap::new(),
            char_ids: HashMap::new(),
        }
    }

    fn push_token(&mut self, tok: String) -> u32 {
        let id = self.tokens.len() as u32;
        self.ids.insert(tok.clone(), id);
        if tok.chars().count() == 1 {
            self.char_ids.insert(tok.chars().next().unwrap(), id);
        }
        self.tokens.push(tok);
        id
    }

    fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let merged = format!("{}{}", self.tokens[left as usize], self.tokens[right as usize]);
        let id = match self.ids.get(&merged) {
            Some(&id) => id,
            None => self.push_token(merged),
        };
        self.ranks.insert((left, right), (self.merges.len(), id));
        self.merges.push((left, right));
        id
    }

    /// Learns merges until the learned vocabulary (alphabet plus merged
    /// tokens) reaches `vocab_size` or no adjacent pair occurs twice.
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Self, TokError> {
        let mut word_counts: BTreeMap<&str, i64> = BTreeMap::new();
        for s in corpus {
            let s = s.as_ref();
            if !s.is_empty() {
                *word_counts.entry(s).or_insert(0) += 1;
            }
        }
        if word_counts.is_empty() {
            return Err(TokError::EmptyCorpus);
        }
        let alphabet: BTreeSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
        if vocab_size < alphabet.len() {
            return Err(TokError::VocabTooSmall { requested: vocab_size, alphabet: alphabet.len() });
        }

        let mut tok = BpeTokenizer::empty();
        for c in &alphabet {
            tok.push_token(c.to_string());
        }
        let mut words: Vec<Vec<u32>> = Vec::with_capacity(word_counts.len());
        let mut freqs: Vec<i64> = Vec::with_capacity(word_counts.len());
        for (w, &c) in &word_counts {
            words.push(w.chars().map(|ch| tok.char_ids[&ch]).collect());
            freqs.push(c);
        }

        let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
        let mut where_is: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
        for (wi, w) in words.iter().enumerate() {
            for p in w.windows(2) {
                let pair = (p[0], p[1]);
                *pair_counts.entry(pair).or_insert(0) += freqs[wi];
                where_is.entry(pair).or_default().insert(wi);
            }
        }
        let mut heap: BinaryHeap<HeapPair> =
            pair_counts.iter().map(|(&pair, &count)| tok.heap_entry(pair, count)).collect();

        let learned = |t: &BpeTokenizer| t.tokens.len() - N_SPECIAL as usize;
        while learned(&tok) < vocab_size {
            let Some(top) = heap.pop() else { break };
            let current = pair_counts.get(&top.pair).copied().unwrap_or(0);
            if current != top.count {
                if current > 0 {
                    heap.push(tok.heap_entry(top.pair, current));
                }
                continue;
            }
            if current < 2 {
                break;
            }
            let (a, b) = top.pair;
            let z = tok.push_merge(a, b);
            let mut affected: Vec<usize> = where_is.remove(&top.pair).unwrap_or_default().into_iter().collect();
            affected.sort_unstable();
            let mut touched: HashSet<(u32, u32)> = HashSet::new();
            for wi in affected {
                let f = freqs[wi];
                for (pair, delta) in merge_word(&mut words[wi], a, b, z) {
                    *pair_counts.entry(pair).or_insert(0) += delta * f;
                    if delta > 0 {
                        where_is.entry(pair).or_default().insert(wi);
                        touched.insert(pair);
                    }
                }
            }
            pair_counts.remove(&top.pair);
            let mut touched: Vec<_> = touched.into_iter().collect();
            touched.sort_unstable();
            for pair in touched {
                let c = pair_counts.get(&pair).copied().unwrap_or(0);
                if c > 0 {
                    heap.push(tok.heap_entry(pair, c));
                }
            }
        }
        Ok(tok)
    }

    fn heap_entry(&self, pair: (u32, u32), count: i64) -> HeapPair {
        HeapPair {
            count,
            left: self.tokens[pair.0 as usize].clone(),
            right: self.tokens[pair.1 as usize].clone(),
            pair,
        }
    }

    /// A merge-free tokenizer over the given characters.
    pub fn char_level(alphabet: impl IntoIterator<Item = char>) -> Self {
        let set: BTreeSet<char> = alphabet.into_iter().collect();
        let mut tok = BpeTokenizer::empty();
        for c in set {
            tok.push_token(c.to_string());
        }
        tok
    }

    pub fn merges(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.merges.iter().map(|&(l, r)| (self.tokens[l as usize].as_str(), self.tokens[r as usize].as_str()))
    }

    pub fn n_merges(&self) -> usize {
        self.merges.len()
    }

    pub fn alphabet(&self) -> BTreeSet<char> {
        self.char_ids.keys().copied().collect()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    /// Adds `tokens` to the vocabulary, appending merges so each one is
    /// producible. Missing single characters join the alphabet and missing
    /// intermediate prefixes are added too. Returns the new vocabulary
    /// entries in id order.
    pub fn extend(&mut self, tokens: &[String]) -> Result<Vec<String>, TokError> {
        let mut seen = HashSet::new();
        for t in tokens {
            if t.is_empty() {
                return Err(TokError::EmptyToken);
            }
            if self.ids.contains_key(t) || !seen.insert(t) {
                return Err(TokError::DuplicateToken(t.clone()));
            }
        }
        let start = self.tokens.len();
        for t in tokens {
            let chars: Vec<char> = t.chars().collect();
            let mut acc = match self.char_ids.get(&chars[0]) {
                Some(&id) => id,
                None => self.push_token(chars[0].to_string()),
            };
            for &c in &chars[1..] {
                let cid = match self.char_ids.get(&c) {
                    Some(&id) => id,
                    None => self.push_token(c.to_string()),
                };
                let merged = format!("{}{}", self.tokens[acc as usize], c);
                acc = match (self.ids.get(&merged), self.ranks.get(&(acc, cid))) {
                    (Some(&id), Some(_)) => id,
                    _ => self.push_merge(acc, cid),
                };
            }
        }
        Ok(self.tokens[start..].to_vec())
    }

    /// Applies merges in rank order: repeatedly merges the lowest-ranked
    /// adjacent pair, leftmost first. This equals applying each merge in turn
    /// over the whole sequence, because a merge can only create pairs of
    /// higher rank than itself.
    fn encode_chars(&self, text: &str) -> Vec<u32> {
        let mut sym: Vec<u32> = text.chars().map(|c| self.char_ids.get(&c).copied().unwrap_or(UNK_ID)).collect();
        let n = sym.len();
        if n < 2 || self.ranks.is_empty() {
            return sym;
        }
        let mut prev: Vec<usize> = (0..n).map(|i| i.wrapping_sub(1)).collect();
        let mut next: Vec<usize> = (1..=n).collect();
        let mut alive = vec![true; n];
        let mut heap = BinaryHeap::new();
        for i in 0..n - 1 {
            if let Some(&(rank, _)) = self.ranks.get(&(sym[i], sym[i + 1])) {
                heap.push(Reverse((rank, i, sym[i], sym[i + 1])));
            }
        }
        while let Some(Reverse((rank, i, l, r))) = heap.pop() {
            if !alive[i] || sym[i] != l {
                continue;
            }
            let j = next[i];
            if j >= n || !alive[j] || sym[j] != r {
                continue;
            }
            let (_, z) = self.ranks[&(l, r)];
            sym[i] = z;
            alive[j] = false;
            next[i] = next[j];
            if next[i] < n {
                prev[next[i]] = i;
            }
            let p = prev[i];
            if p < n {
                if let Some(&(rk, _)) = self.ranks.get(&(sym[p], z)) {
                    heap.push(Reverse((rk, p, sym[p], z)));
                }
            }
            let q = next[i];
            if q < n {
                if let Some(&(rk, _)) = self.ranks.get(&(z, sym[q])) {
                    heap.push(Reverse((rk, i, z, sym[q])));
                }
            }
            let _ = rank;
        }
        sym.into_iter().zip(alive).filter_map(|(s, a)| a.then_some(s)).collect()
    }

    pub fn parse(text: &str) -> Result<Self, TokError> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, msg: &str| TokError::Format { line: line + 1, msg: msg.to_string() };
        match lines.next() {
            Some((_, h)) if h == format!("genepair-tokenizer {FORMAT_VERSION} bpe") => {}
            _ => return Err(bad(0, "expected bpe tokenizer header")),
        }
        expect_section(&mut lines, "[vocab]")?;
        let mut tok = BpeTokenizer::empty();
        let mut merge_lines = Vec::new();
        let mut in_merges = false;
        for (i, line) in lines {
            if !in_merges && line == "[merges]" {
                in_merges = true;
                continue;
            }
            if in_merges {
                merge_lines.push((i, line));
            } else {
                let t = unescape_token(line, i + 1)?;
                if tok.ids.contains_key(&t) {
                    return Err(bad(i, "duplicate vocab entry"));
                }
                tok.push_token(t);
            }
        }
        if !in_merges {
            return Err(bad(0, "missing [merges] section"));
        }
        for (i, line) in merge_lines {
            let (l, r) = line.split_once(' ').ok_or_else(|| bad(i, "merge needs two tokens"))?;
            let (l, r) = (unescape_token(l, i + 1)?, unescape_token(r, i + 1)?);
            let lid = *tok.ids.get(&l).ok_or_else(|| bad(i, "unknown merge token"))?;
            let rid = *tok.ids.get(&r).ok_or_else(|| bad(i, "unknown merge token"))?;
            let merged = format!("{l}{r}");
            let z = *tok.ids.get(&merged).ok_or_else(|| bad(i, "merge result missing from vocab"))?;
            tok.ranks.insert((lid, rid), (tok.merges.len(), z));
            tok.merges.push((lid, rid));
        }
        Ok(tok)
    }
}

fn expect_section<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>, name: &str) -> Result<(), TokError> {
    match lines.next() {
        Some((_, l)) if l == name => Ok(()),
        Some((i, _)) => Err(TokError::Format { line: i + 1, msg: format!("expected {name}") }),
        None => Err(TokError::Format { line: 0, msg: format!("missing {name}") }),
    }
}

/// Merges every non-overlapping `(a, b)` left to right, returning pair-count
/// deltas (unweighted).
fn merge_word(word: &mut Vec<u32>, a: u32, b: u32, z: u32) -> Vec<((u32, u32), i64)> {
    let mut changes = Vec::new();
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == a && word[i + 1] == b {
            if let Some(&prev) = out.last() {
                changes.push(((prev, a), -1));
                changes.push(((prev, z), 1));
            }
            changes.push(((a, b), -1));
            if i + 2 < word.len() {
                let nx = word[i + 2];
                changes.push(((b, nx), -1));
                changes.push(((z, nx), 1));
            }
            out.push(z);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
    changes
}

impl Tokenizer for BpeTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_chars(text)
    }

    fn decode(&self, ids: &[u32]) -> String {
        decode_with(&self.tokens, ids)
    }

    fn vocab_len(&self) -> usize {
        self.tokens.len()
    }

    fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    fn serialize(&self) -> String {
        let mut out = format!("genepair-tokenizer {FORMAT_VERSION} bpe\n[vocab]\n");
        for t in &self.tokens[N_SPECIAL as usize..] {
            escape_token(t, &mut out);
            out.push('\n');
        }
        out.push_str("[merges]\n");
        for (l, r) in self.merges() {
            escape_token(l, &mut out);
            out.push(' ');
            escape_token(r, &mut out);
            out.push('\n');
        }
        out
    }
}

fn decode_with(tokens: &[String], ids: &[u32]) -> String {
    let mut out = String::new();
    for &id in ids {
        match id {
            PAD_ID => {}
            id if id < N_SPECIAL => out.push_str(SPECIALS[id as usize]),
            id => {
                if let Some(t) = tokens.get(id as usize) {
                    out.push_str(t);
                } else {
                    out.push_str(SPECIALS[UNK_ID as usize]);
                }
            }
        }
    }
    out
}

/// Greedy longest-match tokenizer. Text is split on whitespace; within a
/// word, pieces after the first are looked up with `continuation` prepended.
/// Each maximal unmatched span becomes a single `[UNK]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordPieceTokenizer {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    continuation: String,
    max_piece_chars: usize,
}

impl WordPieceTokenizer {
    pub fn new<S: Into<String>>(vocab: impl IntoIterator<Item = S>, continuation: &str) -> Result<Self, TokError> {
        let mut tok = WordPieceTokenizer {
            tokens: SPECIALS.iter().map(|s| s.to_string()).collect(),
            ids: HashMap::new(),
            continuation: continuation.to_string(),
            max_piece_chars: 0,
        };
        for t in vocab {
            tok.add(t.into())?;
        }
        Ok(tok)
    }

    fn add(&mut self, t: String) -> Result<u32, TokError> {
        if t.is_empty() {
            return Err(TokError::EmptyToken);
        }
        if self.ids.contains_key(&t) {
            return Err(TokError::DuplicateToken(t));
        }
        let id = self.tokens.len() as u32;
        self.max_piece_chars = self.max_piece_chars.max(t.chars().count());
        self.ids.insert(t.clone(), id);
        self.tokens.push(t);
        Ok(id)
    }

    /// Vocabulary made of every whitespace-free BPE token, with an empty
    /// continuation marker so pieces match anywhere inside a word.
    pub fn from_bpe(bpe: &BpeTokenizer) -> Self {
        let vocab = bpe.tokens[N_SPECIAL as usize..].iter().filter(|t| !t.chars().any(char::is_whitespace)).cloned();
        WordPieceTokenizer::new(vocab, "").expect("BPE vocab entries are unique and non-empty")
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn continuation(&self) -> &str {
        &self.continuation
    }

    /// Appends new vocabulary entries. Returns them in id order.
    pub fn extend(&mut self, tokens: &[String]) -> Result<Vec<String>, TokError> {
        for (i, t) in tokens.iter().enumerate() {
            if self.ids.contains_key(t) || tokens[..i].contains(t) {
                return Err(TokError::DuplicateToken(t.clone()));
            }
        }
        for t in tokens {
            self.add(t.clone())?;
        }
        Ok(tokens.to_vec())
    }

    fn encode_word(&self, word: &[char], out: &mut Vec<u32>) {
        let mut pos = 0;
        let mut in_unk = false;
        let mut key = String::new();
        while pos < word.len() {
            let mut found = None;
            let max_end = (pos + self.max_piece_chars).min(word.len());
            for end in (pos + 1..=max_end).rev() {
                key.clear();
                if pos > 0 {
                    key.push_str(&self.continuation);
                }
                key.extend(&word[pos..end]);
                if let Some(&id) = self.ids.get(&key) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    out.push(id);
                    pos = end;
                    in_unk = false;
                }
                None => {
                    if !in_unk {
                        out.push(UNK_ID);
                        in_unk = true;
                    }
                    pos += 1;
                }
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self, TokError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == format!("genepair-tokenizer {FORMAT_VERSION} wordpiece") => {}
            _ => return Err(TokError::Format { line: 1, msg: "expected wordpiece tokenizer header".into() }),
        }
        expect_section(&mut lines, "[continuation]")?;
        let continuation = match lines.next() {
            Some((_, "")) => String::new(),
            Some((i, l)) => unescape_token(l, i + 1)?,
            None => return Err(TokError::Format { line: 0, msg: "missing continuation marker".into() }),
        };
        expect_section(&mut lines, "[vocab]")?;
        let mut tok = WordPieceTokenizer::new(Vec::<String>::new(), &continuation)?;
        for (i, line) in lines {
            let t = unescape_token(line, i + 1)?;
            tok.add(t).map_err(|e| TokError::Format { line: i + 1, msg: e.to_string() })?;
        }
        Ok(tok)
    }
}

impl Tokenizer for WordPieceTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        let mut word = Vec::new();
        for c in text.chars().chain(std::iter::once(' ')) {
            if c.is_whitespace() {
                if !word.is_empty() {
                    self.encode_word(&word, &mut out);
                    word.clear();
                }
            } else {
                word.push(c);
            }
        }
        out
    }

    /// Pieces are joined without separators; word boundaries are not
    /// recoverable.
    fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                PAD_ID => {}
                id if id < N_SPECIAL => out.push_str(SPECIALS[id as usize]),
                id => match self.tokens.get(id as usize) {
                    Some(t) => out.push_str(
                        t.strip_prefix(self.continuation.as_str())
                            .filter(|_| !self.continuation.is_empty())
                            .unwrap_or(t),
                    ),
                    None => out.push_str(SPECIALS[UNK_ID as usize]),
                },
            }
        }
        out
    }

    fn vocab_len(&self) -> usize {
        self.tokens.len()
    }

    fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    fn serialize(&self) -> String {
        let mut out = format!("genepair-tokenizer {FORMAT_VERSION} wordpiece\n[continuation]\n");
        escape_token(&self.continuation, &mut out);
        out.push_str("\n[vocab]\n");
        for t in &self.tokens[N_SPECIAL as usize..] {
            escape_token(t, &mut out);
            out.push('\n');
        }
        out
    }
}

/// Either tokenizer kind, as loaded from a tokenizer file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnyTokenizer {
    Bpe(BpeTokenizer),
    WordPiece(WordPieceTokenizer),
}

impl AnyTokenizer {
    pub fn parse(text: &str) -> Result<Self, TokError> {
        let header = text.lines().next().unwrap_or("");
        if header.ends_with(" wordpiece") {
            WordPieceTokenizer::parse(text).map(AnyTokenizer::WordPiece)
        } else {
            BpeTokenizer::parse(text).map(AnyTokenizer::Bpe)
        }
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self, TokError> {
        let mut s = String::new();
        r.read_to_string(&mut s).map_err(|e| TokError::Io(e.to_string()))?;
        AnyTokenizer::parse(&s)
    }

    pub fn extend(&mut self, tokens: &[String]) -> Result<Vec<String>, TokError> {
        match self {
            AnyTokenizer::Bpe(t) => t.extend(tokens),
            AnyTokenizer::WordPiece(t) => t.extend(tokens),
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        match self {
            AnyTokenizer::Bpe(t) => t.id_of(token).is_some(),
            AnyTokenizer::WordPiece(t) => t.id_of(token).is_some(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AnyTokenizer::Bpe(_) => "bpe",
            AnyTokenizer::WordPiece(_) => "wordpiece",
        }
    }
}

impl Tokenizer for AnyTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        match self {
            AnyTokenizer::Bpe(t) => t.encode(text),
            AnyTokenizer::WordPiece(t) => t.encode(text),
        }
    }
    fn decode(&self, ids: &[u32]) -> String {
        match self {
            AnyTokenizer::Bpe(t) => t.decode(ids),
            AnyTokenizer::WordPiece(t) => t.decode(ids),
        }
    }
    fn vocab_len(&self) -> usize {
        match self {
            AnyTokenizer::Bpe(t) => t.vocab_len(),
            AnyTokenizer::WordPiece(t) => t.vocab_len(),
        }
    }
    fn token(&self, id: u32) -> Option<&str> {
        match self {
            AnyTokenizer::Bpe(t) => t.token(id),
            AnyTokenizer::WordPiece(t) => t.token(id),
        }
    }
    fn serialize(&self) -> String {
        match self {
            AnyTokenizer::Bpe(t) => t.serialize(),
            AnyTokenizer::WordPiece(t) => t.serialize(),
        }
    }
}

/// How a sentence pair becomes one input sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PairMode {
    /// `encode(s1 ‖ s2)`, no separators.
    DecoderConcat,
    /// `[CLS] s1 [SEP] s2 [SEP]`.
    EncoderSep,
}

/// Encodes a record to exactly `max_len` ids. Over-long inputs lose the
/// right end of `sentence2` first, then of `sentence1`; short ones are
/// right-padded with `[PAD]`.
pub fn encode_pair<T: Tokenizer + ?Sized>(tok: &T, rec: &PairRecord, mode: PairMode, max_len: usize) -> Vec<u32> {
    assert!(max_len >= 8, "max_len must be at least 8");
    let mut ids = match mode {
        PairMode::DecoderConcat => {
            let mut joined = String::with_capacity(rec.sentence1.len() + rec.sentence2.len());
            joined.push_str(&rec.sentence1);
            joined.push_str(&rec.sentence2);
            let mut ids = tok.encode(&joined);
            ids.truncate(max_len);
            ids
        }
        PairMode::EncoderSep => {
            let mut a = tok.encode(&rec.sentence1);
            let mut b = tok.encode(&rec.sentence2);
            let budget = max_len - 3;
            if a.len() + b.len() > budget {
                b.truncate(budget.saturating_sub(a.len()));
                a.truncate(budget);
            }
            let mut ids = Vec::with_capacity(max_len);
            ids.push(CLS_ID);
            ids.extend(a);
            ids.push(SEP_ID);
            ids.extend(b);
            ids.push(SEP_ID);
            ids
        }
    };
    ids.resize(max_len, PAD_ID);
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub n_strings: usize,
    pub total_chars: usize,
    pub total_tokens: usize,
    pub chars_per_token: f64,
    pub unknown_tokens: usize,
    /// Token length in characters → count. `[UNK]` counts as length 1.
    pub histogram: BTreeMap<usize, usize>,
}

pub fn token_stats<T: Tokenizer + ?Sized, S: AsRef<str>>(tok: &T, corpus: &[S]) -> Result<TokenStats, TokError> {
    if corpus.is_empty() {
        return Err(TokError::EmptyCorpus);
    }
    let mut stats = TokenStats {
        n_strings: corpus.len(),
        total_chars: 0,
        total_tokens: 0,
        chars_per_token: 0.0,
        unknown_tokens: 0,
        histogram: BTreeMap::new(),
    };
    for s in corpus {
        let s = s.as_ref();
        stats.total_chars += s.chars().count();
        let ids = tok.encode(s);
        stats.total_tokens += ids.len();
        for id in ids {
            let len = if id == UNK_ID {
                stats.unknown_tokens += 1;
                1
            } else {
                tok.token(id).map(|t| t.chars().count()).unwrap_or(1)
            };
            *stats.histogram.entry(len).or_insert(0) += 1;
        }
    }
    if stats.total_tokens == 0 {
        return Err(TokError::EmptyCorpus);
    }
    stats.chars_per_token = stats.total_chars as f64 / stats.total_tokens as f64;
    Ok(stats)
}

/// Characters per sequence so that a pair fits `target_tokens`:
/// `floor(target_tokens · chars_per_token / 2)`.
pub fn fit_truncation(target_tokens: usize, chars_per_token: f64) -> usize {
    assert!(target_tokens >= 2, "target_tokens must be at least 2");
    // Slack absorbs representation error such as 50 * 1.6 = 79.999...
    ((target_tokens as f64 * chars_per_token / 2.0) + 1e-9).floor() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(a: &str, b: &str) -> PairRecord {
        PairRecord { sentence1: a.into(), sentence2: b.into(), label: 1 }
    }

    /// Straightforward re-implementation: recount all pairs each round.
    fn naive_bpe(corpus: &[&str], vocab_size: usize) -> Vec<(String, String)> {
        let mut words: Vec<Vec<String>> = corpus.iter().map(|w| w.chars().map(|c| c.to_string()).collect()).collect();
        let mut vocab: BTreeSet<String> = words.iter().flatten().cloned().collect();
        let mut merges = Vec::new();
        while vocab.len() < vocab_size {
            let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
            for w in &words {
                for p in w.windows(2) {
                    *counts.entry((p[0].clone(), p[1].clone())).or_insert(0) += 1;
                }
            }
            let best = counts.iter().max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)));
            let Some(((l, r), &c)) = best else { break };
            if c < 2 {
                break;
            }
            let (l, r) = (l.clone(), r.clone());
            for w in &mut words {
                let mut out = Vec::new();
                let mut i = 0;
                while i < w.len() {
                    if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                        out.push(format!("{l}{r}"));
                        i += 2;
                    } else {
                        out.push(w[i].clone());
                        i += 1;
                    }
                }
                *w = out;
            }
            vocab.insert(format!("{l}{r}"));
            merges.push((l, r));
        }
        merges
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let tok = BpeTokenizer::train(&["abab abab"], 4).unwrap();
        assert_eq!(tok.merges().next(), Some(("a", "b")));
        assert_eq!(tok.n_merges(), 1);
    }

    #[test]
    fn alphabet_sized_vocab_has_no_merges() {
        let tok = BpeTokenizer::train(&["ACGT", "GATTACA"], 4).unwrap();
        assert_eq!(tok.n_merges(), 0);
        assert_eq!(tok.encode("ACGT").len(), 4);
        assert!(matches!(BpeTokenizer::train(&["ACGT"], 3), Err(TokError::VocabTooSmall { .. })));
        assert_eq!(BpeTokenizer::train::<&str>(&[], 10), Err(TokError::EmptyCorpus));
    }

    #[test]
    fn trainer_matches_naive_recount() {
        let corpus = [
            "the cat sat on the mat",
            "the dog sat on the log",
            "aaaa aaa aa",
            "ACGTACGTACGT",
            "the cat sat on the mat",
            "banana bandana",
        ];
        for vocab in [20, 30, 45, 60] {
            let tok = BpeTokenizer::train(&corpus, vocab).unwrap();
            let got: Vec<(String, String)> = tok.merges().map(|(a, b)| (a.to_string(), b.to_string())).collect();
            assert_eq!(got, naive_bpe(&corpus, vocab), "vocab {vocab}");
        }
    }

    #[test]
    fn deterministic_training() {
        let corpus = ["hello world", "hello there", "world peace"];
        let a = BpeTokenizer::train(&corpus, 20).unwrap();
        let b = BpeTokenizer::train(&corpus, 20).unwrap();
        assert_eq!(a.serialize(), b.serialize());
    }

    #[test]
    fn serialization_roundtrip() {
        let corpus = ["hello world\\ x", "tab\there", "new line café"];
        let tok = BpeTokenizer::train(&corpus, 25).unwrap();
        let text = tok.serialize();
        let back = BpeTokenizer::parse(&text).unwrap();
        assert_eq!(back, tok);
        assert_eq!(back.serialize(), text);
        match AnyTokenizer::parse(&text).unwrap() {
            AnyTokenizer::Bpe(b) => assert_eq!(b, tok),
            _ => panic!(),
        }
        assert!(BpeTokenizer::parse("nope").is_err());
    }

    #[test]
    fn unknown_chars_map_to_unk() {
        let tok = BpeTokenizer::char_level("ACGT".chars());
        assert_eq!(tok.encode("AXC"), vec![tok.id_of("A").unwrap(), UNK_ID, tok.id_of("C").unwrap()]);
    }

    #[test]
    fn extend_adds_producible_tokens() {
        let mut tok = BpeTokenizer::train(&["ACGTACGT", "TTGCA"], 6).unwrap();
        let before = tok.vocab_len();
        let added = tok.extend(&["ACGTA".to_string(), "NN".to_string()]).unwrap();
        assert_eq!(tok.vocab_len(), before + added.len());
        assert!(added.contains(&"ACGTA".to_string()));
        assert!(added.contains(&"N".to_string()));
        assert_eq!(tok.encode("ACGTA"), vec![tok.id_of("ACGTA").unwrap()]);
        assert_eq!(tok.decode(&tok.encode("TTACGTANN")), "TTACGTANN");
        assert!(matches!(tok.extend(&["ACGTA".to_string()]), Err(TokError::DuplicateToken(_))));
        let reparsed = BpeTokenizer::parse(&tok.serialize()).unwrap();
        assert_eq!(reparsed.encode("GACGTAC"), tok.encode("GACGTAC"));
    }

    #[test]
    fn wordpiece_examples() {
        let tok = WordPieceTokenizer::new(["A", "C", "G", "T", "AC"], "").unwrap();
        let id = |t: &str| tok.id_of(t).unwrap();
        assert_eq!(tok.encode("ACG"), vec![id("AC"), id("G")]);
        assert_eq!(tok.encode(""), Vec::<u32>::new());
        assert_eq!(tok.encode("X"), vec![UNK_ID]);
        assert_eq!(tok.encode("XXA"), vec![UNK_ID, id("A")]);
        assert_eq!(tok.encode("AC GT"), vec![id("AC"), id("G"), id("T")]);
    }

    #[test]
    fn wordpiece_continuation_marker() {
        let tok = WordPieceTokenizer::new(["un", "##aff", "##able", "aff"], "##").unwrap();
        let id = |t: &str| tok.id_of(t).unwrap();
        assert_eq!(tok.encode("unaffable aff"), vec![id("un"), id("##aff"), id("##able"), id("aff")]);
        assert_eq!(tok.decode(&tok.encode("unaffable")), "unaffable");
        let back = WordPieceTokenizer::parse(&tok.serialize()).unwrap();
        assert_eq!(back, tok);
        assert!(WordPieceTokenizer::new(["a", "a"], "").is_err());
    }

    #[test]
    fn encoder_pair_layout() {
        let tok = WordPieceTokenizer::new(["A", "C", "G", "T"], "").unwrap();
        let ids = encode_pair(&tok, &rec("A", "C"), PairMode::EncoderSep, 8);
        let (a, c) = (tok.id_of("A").unwrap(), tok.id_of("C").unwrap());
        assert_eq!(ids, vec![CLS_ID, a, SEP_ID, c, SEP_ID, PAD_ID, PAD_ID, PAD_ID]);
    }

    #[test]
    fn encoder_truncates_second_sentence_first() {
        let tok = BpeTokenizer::char_level("ACGT".chars());
        let ids = encode_pair(&tok, &rec("AAAA", "CCCCCC"), PairMode::EncoderSep, 8);
        assert_eq!(ids.len(), 8);
        assert_eq!(tok.decode(&ids), "[CLS]AAAA[SEP]C[SEP]");
        let ids = encode_pair(&tok, &rec("AAAAAAAA", "CC"), PairMode::EncoderSep, 8);
        assert_eq!(tok.decode(&ids), "[CLS]AAAAA[SEP][SEP]");
    }

    #[test]
    fn decoder_concat_has_no_separators() {
        let tok = BpeTokenizer::char_level("ACGT".chars());
        let ids = encode_pair(&tok, &rec("ACG", "TTA"), PairMode::DecoderConcat, 10);
        assert_eq!(ids.len(), 10);
        assert!(!ids.contains(&SEP_ID) && !ids.contains(&CLS_ID));
        assert_eq!(tok.decode(&ids), "ACGTTA");
        let ids = encode_pair(&tok, &rec("ACGTACGT", "TTTTT"), PairMode::DecoderConcat, 8);
        assert_eq!(tok.decode(&ids), "ACGTACGT");
    }

    #[test]
    fn char_level_stats() {
        let tok = BpeTokenizer::char_level("ACGT".chars());
        let s = token_stats(&tok, &["ACGT", "GGA"]).unwrap();
        assert_eq!(s.chars_per_token, 1.0);
        assert_eq!(s.total_chars, 7);
        assert_eq!(s.histogram.values().sum::<usize>(), s.total_tokens);
        assert_eq!(token_stats::<_, &str>(&tok, &[]), Err(TokError::EmptyCorpus));
    }

    #[test]
    fn truncation_arithmetic() {
        assert_eq!(fit_truncation(50, 1.6), 40);
        assert_eq!(fit_truncation(50, 4.5), 112);
        assert_eq!(fit_truncation(2, 1.0), 1);
        // Reference points: 113/50 and 1336/982 characters per token.
        assert!((113.0f64 / 50.0 * 2.0 - 4.5).abs() < 0.1);
        assert!((1336.0f64 / 982.0 - 1.6).abs() < 0.25);
    }

    proptest! {
        #[test]
        fn bpe_roundtrip(corpus in prop::collection::vec("[a-e ]{1,30}", 1..8), probe in "[a-e ]{0,60}", extra in 0usize..30) {
            let tok = BpeTokenizer::train(&corpus, 6 + extra).unwrap();
            let alphabet = tok.alphabet();
            let probe: String = probe.chars().filter(|c| alphabet.contains(c)).collect();
            prop_assert_eq!(tok.decode(&tok.encode(&probe)), probe);
        }

        #[test]
        fn more_merges_never_more_tokens(corpus in prop::collection::vec("[ab c]{1,40}", 1..6), v in 4usize..30) {
            let small = BpeTokenizer::train(&corpus, v).unwrap();
            let big = BpeTokenizer::train(&corpus, v + 5).unwrap();
            let count = |t: &BpeTokenizer| corpus.iter().map(|s| t.encode(s).len()).sum::<usize>();
            prop_assert!(count(&big) <= count(&small));
        }

        #[test]
        fn pair_encoding_has_exact_length(a in "[ACGT]{1,80}", b in "[ACGT]{1,80}", max_len in 8usize..64, enc in any::<bool>()) {
            let tok = BpeTokenizer::train(&["ACGTACGGTACA", "TTGACA"], 8).unwrap();
            let mode = if enc { PairMode::EncoderSep } else { PairMode::DecoderConcat };
            prop_assert_eq!(encode_pair(&tok, &rec(&a, &b), mode, max_len).len(), max_len);
        }
    }
}
