//! WordPiece-style subword tokenization.
//!
//! Vocabularies are grown by repeatedly merging the most frequent adjacent
//! piece pair; encoding applies greedy longest-match-first per word, with
//! non-initial pieces carrying a `##` prefix.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

pub const PAD: u32 = 0;
pub const START: u32 = 1;
pub const END: u32 = 2;
pub const UNK: u32 = 3;

pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
pub const URL_TOKEN: &str = "<url>";
pub const USER_TOKEN: &str = "<user>";
pub const CONTINUATION: &str = "##";

/// Smallest accepted `vocab_size` for [`train_vocab`].
pub const MIN_VOCAB_SIZE: usize = 261;
pub const DEFAULT_VOCAB_SIZE: usize = 8192;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("token id {id} out of range for vocabulary of {size}")]
    Index { id: u32, size: usize },
    #[error("vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:https?://|www\.)\S+").unwrap())
}

fn mention_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"@\w+").unwrap())
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<url>|<user>").unwrap())
}

/// Replaces URLs with `<url>` and @-mentions with `<user>`, leaving the
/// rest of the text untouched. Applied before anything is written to disk.
pub fn anonymize(text: &str) -> String {
    let no_urls = url_re().replace_all(text, "<url>");
    mention_re().replace_all(&no_urls, "<user>").into_owned()
}

/// Lowercases, replaces URLs with `<url>` and @-mentions with `<user>`,
/// splits punctuation into separate words and collapses whitespace.
pub fn normalize(text: &str) -> String {
    let lower = text.to_lowercase();
    let no_urls = url_re().replace_all(&lower, " <url> ");
    let anon = mention_re().replace_all(&no_urls, " <user> ");

    let mut spaced = String::with_capacity(anon.len() + 8);
    let mut last = 0;
    for m in placeholder_re().find_iter(&anon) {
        split_punct(&anon[last..m.start()], &mut spaced);
        let _ = write!(spaced, " {} ", m.as_str());
        last = m.end();
    }
    split_punct(&anon[last..], &mut spaced);
    spaced.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn split_punct(segment: &str, out: &mut String) {
    for c in segment.chars() {
        if c.is_alphanumeric() || c.is_whitespace() {
            out.push(c);
        } else {
            out.push(' ');
            out.push(c);
            out.push(' ');
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from the specials followed by `tokens` in order.
    /// Duplicates and tokens equal to a special are ignored.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for s in SPECIALS {
            v.push(s.to_string());
        }
        for t in tokens {
            v.push(t.into());
        }
        v
    }

    fn push(&mut self, token: String) -> bool {
        if self.token_to_id.contains_key(&token) {
            return false;
        }
        self.token_to_id
            .insert(token.clone(), self.id_to_token.len() as u32);
        self.id_to_token.push(token);
        true
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.id_to_token.iter().map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.id_to_token {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..4] != SPECIALS {
            return Err(TokenizerError::Format(
                "first four lines must be the special tokens".into(),
            ));
        }
        let mut v = Vocabulary::from_tokens(Vec::<String>::new());
        for (i, line) in lines.iter().enumerate().skip(SPECIALS.len()) {
            if line.is_empty() || !v.push(line.to_string()) {
                return Err(TokenizerError::Format(format!(
                    "line {}: empty or duplicate token {line:?}",
                    i + 1
                )));
            }
        }
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn base_alphabet(corpus_chars: &[char]) -> Vec<String> {
    let mut chars: Vec<char> = ('!'..='~').collect();
    let mut extra: Vec<char> = corpus_chars
        .iter()
        .copied()
        .filter(|c| !c.is_ascii())
        .collect();
    extra.sort_unstable();
    extra.dedup();
    chars.extend(extra);
    let mut out = vec![URL_TOKEN.to_string(), USER_TOKEN.to_string()];
    out.extend(chars.iter().map(|c| c.to_string()));
    out.extend(chars.iter().map(|c| format!("{CONTINUATION}{c}")));
    out
}

fn merged_piece(a: &str, b: &str) -> String {
    format!("{a}{}", b.strip_prefix(CONTINUATION).unwrap_or(b))
}

fn word_pieces(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                c.to_string()
            } else {
                format!("{CONTINUATION}{c}")
            }
        })
        .collect()
}

/// Trains a vocabulary of at most `vocab_size` entries. The base alphabet
/// (specials, placeholders, printable ASCII and every corpus character, each
/// in initial and `##` form) is always present; the remaining slots are
/// filled by merging the most frequent adjacent pair, ties going to the pair
/// of lowest piece ids. Merging stops when a pair count drops below
/// `min_freq` or no pairs remain.
pub fn train_vocab<S: AsRef<str>>(
    corpus: &[S],
    vocab_size: usize,
    min_freq: usize,
) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(TokenizerError::Contract("empty corpus".into()));
    }
    if vocab_size < MIN_VOCAB_SIZE {
        return Err(TokenizerError::Contract(format!(
            "vocab_size must exceed {}, got {vocab_size}",
            MIN_VOCAB_SIZE - 1
        )));
    }
    let mut word_counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for w in normalize(text.as_ref()).split(' ') {
            if !w.is_empty() && w != URL_TOKEN && w != USER_TOKEN {
                *word_counts.entry(w.to_string()).or_default() += 1;
            }
        }
    }
    let all_chars: Vec<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
    let mut vocab = Vocabulary::from_tokens(base_alphabet(&all_chars));

    // Words in sorted order so piece ids and merges are reproducible.
    let mut words: Vec<(String, usize)> = word_counts.into_iter().collect();
    words.sort_unstable();
    let mut seqs: Vec<Vec<u32>> = words
        .iter()
        .map(|(w, _)| {
            word_pieces(w)
                .iter()
                .map(|p| vocab.id(p).expect("base alphabet"))
                .collect()
        })
        .collect();
    let freqs: Vec<i64> = words.iter().map(|(_, c)| *c as i64).collect();

    type Pair = (u32, u32);
    let mut counts: HashMap<Pair, i64> = HashMap::new();
    let mut where_: HashMap<Pair, HashSet<usize>> = HashMap::new();
    for (wi, seq) in seqs.iter().enumerate() {
        for p in seq.windows(2) {
            *counts.entry((p[0], p[1])).or_default() += freqs[wi];
            where_.entry((p[0], p[1])).or_default().insert(wi);
        }
    }
    let mut heap: BinaryHeap<(i64, Reverse<Pair>)> =
        counts.iter().map(|(&p, &c)| (c, Reverse(p))).collect();
    // Piece strings indexed by id; merges may recreate an existing piece, in
    // which case the existing id is reused.
    while vocab.len() < vocab_size {
        let Some((count, Reverse(pair))) = heap.pop() else {
            break;
        };
        if counts.get(&pair).copied() != Some(count) || count <= 0 {
            continue;
        }
        if (count as usize) < min_freq.max(1) {
            break;
        }
        let piece = merged_piece(vocab.token(pair.0).unwrap(), vocab.token(pair.1).unwrap());
        vocab.push(piece.clone());
        let new_id = vocab.id(&piece).unwrap();

        let affected: Vec<usize> = where_
            .remove(&pair)
            .map(|s| s.into_iter().collect())
            .unwrap_or_default();
        let mut touched: HashSet<Pair> = HashSet::new();
        for wi in affected {
            let f = freqs[wi];
            let seq = &seqs[wi];
            for p in seq.windows(2) {
                let key = (p[0], p[1]);
                *counts.get_mut(&key).unwrap() -= f;
                touched.insert(key);
                if let Some(set) = where_.get_mut(&key) {
                    set.remove(&wi);
                }
            }
            let mut merged = Vec::with_capacity(seq.len());
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(seq[i]);
                    i += 1;
                }
            }
            for p in merged.windows(2) {
                let key = (p[0], p[1]);
                *counts.entry(key).or_default() += f;
                touched.insert(key);
                where_.entry(key).or_default().insert(wi);
            }
            seqs[wi] = merged;
        }
        counts.remove(&pair);
        for key in touched {
            if let Some(&c) = counts.get(&key) {
                if c > 0 {
                    heap.push((c, Reverse(key)));
                }
            }
        }
    }
    Ok(vocab)
}

/// Fixed-length id sequence: `START … END` then `PAD` up to `max_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Number of ids before padding.
    pub true_length: usize,
}

impl TokenSequence {
    /// Frames already-segmented content ids.
    pub fn frame(content: &[u32], max_len: usize) -> Self {
        assert!(max_len >= 2, "max_len must leave room for START and END");
        let mut ids = Vec::with_capacity(max_len);
        ids.push(START);
        if content.len() <= max_len - 2 {
            ids.extend_from_slice(content);
            ids.push(END);
        } else {
            ids.extend_from_slice(&content[..max_len - 1]);
        }
        let true_length = ids.len();
        ids.resize(max_len, PAD);
        TokenSequence { ids, true_length }
    }

    pub fn has_end(&self) -> bool {
        self.ids[..self.true_length].contains(&END)
    }
}

/// Greedy longest-match-first segmentation of one normalized word.
pub fn segment_word(vocab: &Vocabulary, word: &str, out: &mut Vec<u32>) {
    if let Some(id) = vocab.id(word) {
        out.push(id);
        return;
    }
    let bounds: Vec<usize> = word
        .char_indices()
        .map(|(i, _)| i)
        .chain([word.len()])
        .collect();
    let mut start = 0;
    let mut probe = String::new();
    while start + 1 < bounds.len() {
        let mut found = None;
        for end in (start + 1..bounds.len()).rev() {
            probe.clear();
            if start > 0 {
                probe.push_str(CONTINUATION);
            }
            probe.push_str(&word[bounds[start]..bounds[end]]);
            if let Some(id) = vocab.id(&probe) {
                found = Some((id, end));
                break;
            }
        }
        match found {
            Some((id, end)) => {
                out.push(id);
                start = end;
            }
            None => {
                out.push(UNK);
                start += 1;
            }
        }
    }
}

/// Content ids of `text` after normalization, without framing.
pub fn encode_content(vocab: &Vocabulary, text: &str) -> Vec<u32> {
    let mut ids = Vec::new();
    for word in normalize(text).split(' ').filter(|w| !w.is_empty()) {
        segment_word(vocab, word, &mut ids);
    }
    ids
}

pub fn encode(vocab: &Vocabulary, text: &str, max_len: usize) -> TokenSequence {
    TokenSequence::frame(&encode_content(vocab, text), max_len)
}

/// Joins pieces with spaces, fusing `##` continuations onto their
/// predecessor and dropping PAD/START/END.
pub fn decode(vocab: &Vocabulary, ids: &[u32]) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        let token = vocab.token(id).ok_or(TokenizerError::Index {
            id,
            size: vocab.len(),
        })?;
        if matches!(id, PAD | START | END) {
            continue;
        }
        match token.strip_prefix(CONTINUATION) {
            Some(rest) if !out.is_empty() && id != UNK => out.push_str(rest),
            _ => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(token);
            }
        }
    }
    Ok(out)
}
