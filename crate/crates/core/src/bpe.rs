//! Byte Pair Encoding over normalized names.
//!
//! Words are the separator-delimited segments of a normalized name, so a
//! merge never crosses the first/last name boundary. The trainer keeps a
//! pair-count table and updates it incrementally per affected word; ties in
//! frequency go to the lexicographically smallest concatenation, then to the
//! smallest `(left, right)` pair.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::normalize::{NormalizedName, Scheme};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const N_SPECIALS: usize = SPECIALS.len();

pub const DEFAULT_MAX_VOCAB: usize = 500;
pub const DEFAULT_MAX_LEN: usize = 32;

const HEADER_PREFIX: &str = "bpe-vocab";
const FORMAT_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("cannot train a tokenizer on an empty corpus")]
    EmptyCorpus,
    #[error("max_vocab {max_vocab} cannot hold {required} specials and alphabet characters")]
    BudgetTooSmall { max_vocab: usize, required: usize },
    #[error("max_len {0} is below the minimum of 3")]
    MaxLenTooSmall(usize),
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("cannot access vocabulary file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported vocabulary format `{0}`")]
    Version(String),
    #[error("malformed vocabulary at line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Merge {
    pub left: u32,
    pub right: u32,
    pub output: u32,
}

/// Specials, alphabet and ordered merge rules with contiguous ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    max_vocab: usize,
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
    n_chars: usize,
    merges: Vec<Merge>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.max_vocab == other.max_vocab
            && self.tokens == other.tokens
            && self.n_chars == other.n_chars
            && self.merges == other.merges
    }
}

impl Eq for Vocabulary {}

impl Vocabulary {
    fn with_alphabet(max_vocab: usize, alphabet: &BTreeSet<char>) -> Self {
        let mut vocab = Self {
            max_vocab,
            tokens: Vec::new(),
            token_to_id: HashMap::new(),
            n_chars: alphabet.len(),
            merges: Vec::new(),
            ranks: HashMap::new(),
        };
        for s in SPECIALS {
            vocab.push_token(s.to_string());
        }
        for c in alphabet {
            vocab.push_token(c.to_string());
        }
        vocab
    }

    fn push_token(&mut self, token: String) -> u32 {
        let id = self.tokens.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    /// Registers `left + right`, reusing the id when the concatenation
    /// already exists.
    fn push_merge(&mut self, left: u32, right: u32) -> Merge {
        let joined = format!("{}{}", self.tokens[left as usize], self.tokens[right as usize]);
        let output = match self.token_to_id.get(&joined) {
            Some(&id) => id,
            None => self.push_token(joined),
        };
        let merge = Merge {
            left,
            right,
            output,
        };
        self.ranks.insert((left, right), (self.merges.len(), output));
        self.merges.push(merge);
        merge
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn max_vocab(&self) -> usize {
        self.max_vocab
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn alphabet(&self) -> impl Iterator<Item = char> + '_ {
        self.tokens[N_SPECIALS..N_SPECIALS + self.n_chars]
            .iter()
            .filter_map(|t| t.chars().next())
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < N_SPECIALS
    }

    /// Merge rules as token strings, in rank order.
    pub fn merge_strings(&self) -> Vec<(String, String)> {
        self.merges
            .iter()
            .map(|m| {
                (
                    self.tokens[m.left as usize].clone(),
                    self.tokens[m.right as usize].clone(),
                )
            })
            .collect()
    }

    /// Applies merges to one segment, lowest rank first.
    fn encode_segment(&self, segment: &str, out: &mut Vec<u32>) {
        let mut ids: Vec<u32> = segment
            .chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.id(c.encode_utf8(&mut buf)).unwrap_or(UNK_ID)
            })
            .collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, _)| (rank, w[0], w[1])))
                .min();
            let Some((rank, left, right)) = best else {
                break;
            };
            let output = self.merges[rank].output;
            let mut merged = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
                    merged.push(output);
                    i += 2;
                } else {
                    merged.push(ids[i]);
                    i += 1;
                }
            }
            ids = merged;
        }
        out.extend(ids);
    }

    /// Serializes to the line-oriented text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER_PREFIX} {FORMAT_VERSION} max_vocab={}", self.max_vocab);
        for s in SPECIALS {
            let _ = writeln!(out, "special {s}");
        }
        for c in self.alphabet() {
            let _ = writeln!(out, "char {c}");
        }
        for (left, right) in self.merge_strings() {
            let _ = writeln!(out, "merge {left} {right}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, BpeError> {
        let malformed = |line: usize, message: String| BpeError::Malformed { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

        let (_, header) = lines
            .next()
            .ok_or_else(|| malformed(1, "empty file".into()))?;
        let mut parts = header.split(' ');
        if parts.next() != Some(HEADER_PREFIX) {
            return Err(malformed(1, format!("bad header `{header}`")));
        }
        match parts.next() {
            Some(FORMAT_VERSION) => {}
            Some(other) => return Err(BpeError::Version(other.to_string())),
            None => return Err(malformed(1, "missing version".into())),
        }
        let max_vocab = parts
            .next()
            .and_then(|p| p.strip_prefix("max_vocab="))
            .and_then(|n| n.parse::<usize>().ok())
            .ok_or_else(|| malformed(1, "missing max_vocab=<n>".into()))?;
        if parts.next().is_some() {
            return Err(malformed(1, "trailing header fields".into()));
        }

        let mut specials = Vec::new();
        let mut alphabet = Vec::new();
        let mut merges = Vec::new();
        for (no, line) in lines {
            let (kind, rest) = line
                .split_once(' ')
                .ok_or_else(|| malformed(no, format!("expected `<kind> <value>`, got `{line}`")))?;
            match kind {
                "special" => {
                    if !alphabet.is_empty() || !merges.is_empty() {
                        return Err(malformed(no, "special after char/merge lines".into()));
                    }
                    specials.push(rest.to_string());
                }
                "char" => {
                    if !merges.is_empty() {
                        return Err(malformed(no, "char after merge lines".into()));
                    }
                    let mut chars = rest.chars();
                    match (chars.next(), chars.next()) {
                        (Some(c), None) if !c.is_whitespace() => alphabet.push((no, c)),
                        _ => return Err(malformed(no, format!("`{rest}` is not one character"))),
                    }
                }
                "merge" => {
                    let (left, right) = rest
                        .split_once(' ')
                        .filter(|(l, r)| !l.is_empty() && !r.is_empty() && !r.contains(' '))
                        .ok_or_else(|| malformed(no, format!("bad merge `{rest}`")))?;
                    merges.push((no, left.to_string(), right.to_string()));
                }
                other => return Err(malformed(no, format!("unknown line kind `{other}`"))),
            }
        }

        if specials != SPECIALS {
            return Err(malformed(
                2,
                format!("specials must be exactly {}", SPECIALS.join(" ")),
            ));
        }
        let mut set = BTreeSet::new();
        for &(no, c) in &alphabet {
            if !set.insert(c) {
                return Err(malformed(no, format!("duplicate char `{c}`")));
            }
        }
        if !alphabet.windows(2).all(|w| w[0].1 < w[1].1) {
            return Err(malformed(N_SPECIALS + 2, "chars must be in ascending order".into()));
        }

        let mut vocab = Vocabulary::with_alphabet(max_vocab, &set);
        for (no, left, right) in merges {
            let l = vocab
                .id(&left)
                .ok_or_else(|| malformed(no, format!("merge references unknown token `{left}`")))?;
            let r = vocab
                .id(&right)
                .ok_or_else(|| malformed(no, format!("merge references unknown token `{right}`")))?;
            if vocab.ranks.contains_key(&(l, r)) {
                return Err(malformed(no, format!("duplicate merge `{left} {right}`")));
            }
            vocab.push_merge(l, r);
        }
        if vocab.len() > max_vocab {
            return Err(malformed(
                1,
                format!("{} tokens exceed max_vocab={max_vocab}", vocab.len()),
            ));
        }
        Ok(vocab)
    }
}

pub fn save_vocab(vocab: &Vocabulary, path: &Path) -> Result<(), BpeError> {
    std::fs::write(path, vocab.to_text()).map_err(|source| BpeError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary, BpeError> {
    let text = std::fs::read_to_string(path).map_err(|source| BpeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Vocabulary::from_text(&text)
}

struct Word {
    ids: Vec<u32>,
    count: i64,
}

impl Word {
    fn pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.ids.windows(2).map(|w| (w[0], w[1]))
    }

    /// Replaces non-overlapping occurrences left to right. Returns whether
    /// anything changed.
    fn merge(&mut self, left: u32, right: u32, output: u32) -> bool {
        let mut changed = false;
        let mut out = Vec::with_capacity(self.ids.len());
        let mut i = 0;
        while i < self.ids.len() {
            if i + 1 < self.ids.len() && self.ids[i] == left && self.ids[i + 1] == right {
                out.push(output);
                i += 2;
                changed = true;
            } else {
                out.push(self.ids[i]);
                i += 1;
            }
        }
        self.ids = out;
        changed
    }
}

/// Trains a vocabulary of at most `max_vocab` tokens (specials and alphabet
/// included). Merging stops early once no pair occurs at least twice.
pub fn train_bpe(corpus: &[NormalizedName], max_vocab: usize) -> Result<Vocabulary, BpeError> {
    if corpus.is_empty() {
        return Err(BpeError::EmptyCorpus);
    }
    let mut word_counts: HashMap<&str, i64> = HashMap::new();
    for name in corpus {
        for seg in name.segments().filter(|s| !s.is_empty()) {
            *word_counts.entry(seg).or_default() += 1;
        }
    }
    let mut unique: Vec<(&str, i64)> = word_counts.into_iter().collect();
    unique.sort_unstable();

    let alphabet: BTreeSet<char> = unique.iter().flat_map(|(w, _)| w.chars()).collect();
    let required = N_SPECIALS + alphabet.len();
    if max_vocab < required {
        return Err(BpeError::BudgetTooSmall {
            max_vocab,
            required,
        });
    }
    let mut vocab = Vocabulary::with_alphabet(max_vocab, &alphabet);

    let mut words: Vec<Word> = unique
        .iter()
        .map(|(w, count)| Word {
            ids: w
                .chars()
                .map(|c| vocab.id(&c.to_string()).expect("alphabet covers corpus"))
                .collect(),
            count: *count,
        })
        .collect();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut occurs_in: HashMap<(u32, u32), BTreeSet<usize>> = HashMap::new();
    for (wi, word) in words.iter().enumerate() {
        for pair in word.pairs() {
            *pair_counts.entry(pair).or_default() += word.count;
            occurs_in.entry(pair).or_default().insert(wi);
        }
    }

    while vocab.len() < max_vocab {
        let mut best: Option<((u32, u32), i64, String)> = None;
        for (&pair, &count) in &pair_counts {
            if count < 2 {
                continue;
            }
            let joined = format!("{}{}", vocab.tokens[pair.0 as usize], vocab.tokens[pair.1 as usize]);
            if SPECIALS.contains(&joined.as_str()) {
                continue;
            }
            let better = match &best {
                None => true,
                Some((bpair, bcount, bjoined)) => {
                    count > *bcount
                        || (count == *bcount
                            && (joined.as_str(), &vocab.tokens[pair.0 as usize], &vocab.tokens[pair.1 as usize])
                                < (bjoined.as_str(), &vocab.tokens[bpair.0 as usize], &vocab.tokens[bpair.1 as usize]))
                }
            };
            if better {
                best = Some((pair, count, joined));
            }
        }
        let Some(((left, right), _, _)) = best else {
            break;
        };

        let merge = vocab.push_merge(left, right);
        let affected = occurs_in.remove(&(left, right)).unwrap_or_default();
        for wi in affected {
            let word = &mut words[wi];
            let count = word.count;
            let before: Vec<(u32, u32)> = word.pairs().collect();
            if !word.merge(left, right, merge.output) {
                continue;
            }
            for pair in before {
                if let Some(c) = pair_counts.get_mut(&pair) {
                    *c -= count;
                }
            }
            for pair in words[wi].pairs() {
                *pair_counts.entry(pair).or_default() += count;
                occurs_in.entry(pair).or_default().insert(wi);
            }
        }
        pair_counts.retain(|_, c| *c > 0);
    }
    Ok(vocab)
}

/// Framed, padded token ids with a validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    /// Set on positions that begin a word segment.
    pub word_start: Vec<bool>,
    pub scheme: Scheme,
}

impl TokenSequence {
    /// Number of unpadded positions, [CLS] and [SEP] included.
    pub fn length(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

pub fn encode(
    name: &NormalizedName,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenSequence, BpeError> {
    if max_len < 3 {
        return Err(BpeError::MaxLenTooSmall(max_len));
    }
    let mut body = Vec::new();
    let mut starts = Vec::new();
    for seg in name.segments().filter(|s| !s.is_empty()) {
        let first = body.len();
        vocab.encode_segment(seg, &mut body);
        starts.push(first);
    }
    let mut word_start = vec![false; body.len()];
    for s in starts {
        if s < word_start.len() {
            word_start[s] = true;
        }
    }
    body.truncate(max_len - 2);
    word_start.truncate(max_len - 2);

    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(&body);
    ids.push(SEP_ID);
    let unpadded = ids.len();
    ids.resize(max_len, PAD_ID);

    let mut mask = vec![1u8; unpadded];
    mask.resize(max_len, 0);
    let mut starts = vec![false];
    starts.extend(word_start);
    starts.resize(max_len, false);
    Ok(TokenSequence {
        ids,
        mask,
        word_start: starts,
        scheme: name.scheme(),
    })
}

/// Concatenates non-special tokens, inserting the scheme separator between
/// word segments.
pub fn decode(seq: &TokenSequence, vocab: &Vocabulary) -> Result<String, BpeError> {
    let mut out = String::new();
    let mut emitted = false;
    for (i, &id) in seq.ids.iter().enumerate() {
        let token = vocab.token(id).ok_or(BpeError::IdOutOfRange {
            id,
            size: vocab.len(),
        })?;
        if Vocabulary::is_special(id) {
            continue;
        }
        if emitted && seq.word_start.get(i).copied().unwrap_or(false) {
            out.push(seq.scheme.separator());
        }
        out.push_str(token);
        emitted = true;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalize::{normalize_case_marked, normalize_underscore};
    use proptest::prelude::*;

    /// Each entry is "first last"; normalized with the underscore scheme so
    /// case is left alone.
    fn words(ws: &[&str]) -> Vec<NormalizedName> {
        ws.iter()
            .map(|w| {
                let (f, l) = w.split_once(' ').unwrap_or((w, w));
                normalize_underscore(f, l).unwrap()
            })
            .collect()
    }

    fn abab_vocab() -> Vocabulary {
        let mut vocab = Vocabulary::with_alphabet(9, &['a', 'b'].into_iter().collect());
        let ab = vocab.push_merge(vocab.id("a").unwrap(), vocab.id("b").unwrap());
        vocab.push_merge(ab.output, ab.output);
        vocab
    }

    #[test]
    fn trains_abab() {
        // "abab abab" counts as two occurrences of the word "abab".
        let corpus = words(&["abab abab"]);
        let vocab = train_bpe(&corpus, 9).unwrap();
        assert_eq!(
            vocab.merge_strings(),
            vec![("a".into(), "b".into()), ("ab".into(), "ab".into())]
        );
        assert_eq!(vocab.len(), 9);
        assert_eq!(vocab, abab_vocab());
    }

    #[test]
    fn no_budget_no_merges() {
        let corpus = words(&["ab ab"]);
        let vocab = train_bpe(&corpus, 7).unwrap();
        assert!(vocab.merges().is_empty());
        assert_eq!(vocab.len(), 7);
    }

    #[test]
    fn budget_too_small() {
        let corpus = words(&["ab ab"]);
        assert!(matches!(
            train_bpe(&corpus, 6),
            Err(BpeError::BudgetTooSmall { required: 7, .. })
        ));
        assert!(matches!(train_bpe(&[], 100), Err(BpeError::EmptyCorpus)));
    }

    #[test]
    fn singleton_pairs_are_not_merged() {
        let corpus = words(&["abc xyz"]);
        let vocab = train_bpe(&corpus, 100).unwrap();
        assert!(vocab.merges().is_empty());
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ba" and "ab" both occur twice; "ab" < "ba".
        let corpus = words(&["ab ba", "ab ba"]);
        let vocab = train_bpe(&corpus, 8).unwrap();
        assert_eq!(vocab.merge_strings(), vec![("a".into(), "b".into())]);
    }

    #[test]
    fn encode_abab() {
        let vocab = abab_vocab();
        let name = normalize_underscore("abab", "ab").unwrap();
        let seq = encode(&name, &vocab, 8).unwrap();
        let toks: Vec<_> = seq.ids.iter().map(|&i| vocab.token(i).unwrap()).collect();
        assert_eq!(
            toks,
            vec![CLS, "abab", "ab", SEP, PAD, PAD, PAD, PAD]
        );
        assert_eq!(seq.mask, vec![1, 1, 1, 1, 0, 0, 0, 0]);
        assert_eq!(seq.length(), 4);
        assert_eq!(decode(&seq, &vocab).unwrap(), "abab_ab");
    }

    #[test]
    fn no_merges_gives_characters() {
        let name = normalize_case_marked("george", "smith").unwrap();
        let corpus = vec![name.clone()];
        let vocab = train_bpe(&corpus, N_SPECIALS + 9).unwrap();
        assert!(vocab.merges().is_empty());
        let seq = encode(&name, &vocab, 32).unwrap();
        assert_eq!(seq.length(), 2 + "georgeSMITH".chars().count());
        assert_eq!(decode(&seq, &vocab).unwrap(), "george SMITH");
    }

    #[test]
    fn unknown_chars_and_truncation() {
        let vocab = abab_vocab();
        let name = normalize_underscore("abz", "ab").unwrap();
        let seq = encode(&name, &vocab, 32).unwrap();
        assert_eq!(&seq.ids[..5], &[CLS_ID, vocab.id("ab").unwrap(), UNK_ID, vocab.id("ab").unwrap(), SEP_ID]);

        let name = normalize_underscore("aaaaaaaa", "a").unwrap();
        let seq = encode(&name, &vocab, 5).unwrap();
        assert_eq!(seq.ids.len(), 5);
        assert_eq!(seq.ids[0], CLS_ID);
        assert_eq!(seq.ids[4], SEP_ID);
        assert!(seq.mask.iter().all(|&m| m == 1));
        assert!(matches!(encode(&name, &vocab, 2), Err(BpeError::MaxLenTooSmall(2))));
    }

    #[test]
    fn decode_specials_only_and_out_of_range() {
        let vocab = abab_vocab();
        let seq = TokenSequence {
            ids: vec![CLS_ID, SEP_ID, PAD_ID, PAD_ID],
            mask: vec![1, 1, 0, 0],
            word_start: vec![false; 4],
            scheme: Scheme::CaseMarked,
        };
        assert_eq!(decode(&seq, &vocab).unwrap(), "");
        let bad = TokenSequence {
            ids: vec![CLS_ID, 99, SEP_ID],
            mask: vec![1, 1, 1],
            word_start: vec![false, true, false],
            scheme: Scheme::CaseMarked,
        };
        assert!(matches!(decode(&bad, &vocab), Err(BpeError::IdOutOfRange { id: 99, .. })));
    }

    #[test]
    fn vocab_text_round_trip() {
        let vocab = abab_vocab();
        let text = vocab.to_text();
        assert_eq!(
            text,
            "bpe-vocab v1 max_vocab=9\nspecial [PAD]\nspecial [UNK]\nspecial [CLS]\nspecial [SEP]\nspecial [MASK]\nchar a\nchar b\nmerge a b\nmerge ab ab\n"
        );
        let loaded = Vocabulary::from_text(&text).unwrap();
        assert_eq!(loaded, vocab);
        assert_eq!(loaded.to_text(), text);
    }

    #[test]
    fn hand_written_vocab_loads() {
        let text = "bpe-vocab v1 max_vocab=7\nspecial [PAD]\nspecial [UNK]\nspecial [CLS]\nspecial [SEP]\nspecial [MASK]\nchar x\nchar y\n";
        let vocab = Vocabulary::from_text(text).unwrap();
        assert_eq!(vocab.len(), 7);
        assert!(vocab.merges().is_empty());
        assert_eq!(vocab.id("y"), Some(6));
    }

    #[test]
    fn rejects_bad_files() {
        let base = "bpe-vocab v1 max_vocab=9\nspecial [PAD]\nspecial [UNK]\nspecial [CLS]\nspecial [SEP]\nspecial [MASK]\nchar a\nchar b\n";
        let unknown = format!("{base}merge a c\n");
        assert!(matches!(
            Vocabulary::from_text(&unknown),
            Err(BpeError::Malformed { line: 9, .. })
        ));
        let version = base.replace("v1", "v2");
        assert!(matches!(Vocabulary::from_text(&version), Err(BpeError::Version(v)) if v == "v2"));
        let over = base.replace("max_vocab=9", "max_vocab=6");
        assert!(Vocabulary::from_text(&over).is_err());
        let bad_special = base.replace("[UNK]", "[UNKNOWN]");
        assert!(Vocabulary::from_text(&bad_special).is_err());
        assert!(Vocabulary::from_text("").is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab = abab_vocab();
        save_vocab(&vocab, &path).unwrap();
        assert_eq!(load_vocab(&path).unwrap(), vocab);
        assert!(matches!(
            load_vocab(&dir.path().join("missing.txt")),
            Err(BpeError::Io { .. })
        ));
    }

    fn corpus_strategy() -> impl Strategy<Value = Vec<NormalizedName>> {
        prop::collection::vec(("[a-e]{1,7}", "[a-e]{1,7}"), 1..30).prop_map(|pairs| {
            pairs
                .into_iter()
                .map(|(f, l)| normalize_case_marked(&f, &l).unwrap())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn vocab_respects_budget(corpus in corpus_strategy(), extra in 0usize..40) {
            let alphabet: BTreeSet<char> = corpus.iter().flat_map(|n| n.segments().flat_map(str::chars).collect::<Vec<_>>()).collect();
            let max_vocab = N_SPECIALS + alphabet.len() + extra;
            let vocab = train_bpe(&corpus, max_vocab).unwrap();
            prop_assert!(vocab.len() <= max_vocab);
            for (i, t) in vocab.tokens.iter().enumerate() {
                prop_assert_eq!(vocab.id(t), Some(i as u32));
            }
            for (rank, m) in vocab.merges().iter().enumerate() {
                let out = vocab.token(m.output).unwrap();
                prop_assert_eq!(out, format!("{}{}", vocab.token(m.left).unwrap(), vocab.token(m.right).unwrap()));
                // inputs exist before the merge that uses them
                let earlier = |id: u32| (id as usize) < N_SPECIALS + vocab.n_chars
                    || vocab.merges()[..rank].iter().any(|p| p.output == id);
                prop_assert!(earlier(m.left) && earlier(m.right));
            }
            let again = train_bpe(&corpus, max_vocab).unwrap();
            prop_assert_eq!(vocab.to_text(), again.to_text());
        }

        #[test]
        fn encode_invariants(corpus in corpus_strategy(), max_len in 3usize..20, probe in ("[a-g]{1,9}", "[a-g]{1,9}")) {
            let vocab = train_bpe(&corpus, 60).unwrap();
            let name = normalize_case_marked(&probe.0, &probe.1).unwrap();
            let seq = encode(&name, &vocab, max_len).unwrap();
            prop_assert_eq!(&seq, &encode(&name, &vocab, max_len).unwrap());
            prop_assert_eq!(seq.ids.len(), max_len);
            prop_assert_eq!(seq.mask.len(), max_len);
            prop_assert_eq!(seq.ids[0], CLS_ID);
            let n = seq.length();
            prop_assert!(seq.mask[..n].iter().all(|&m| m == 1));
            prop_assert!(seq.mask[n..].iter().all(|&m| m == 0));
            prop_assert_eq!(seq.ids[n - 1], SEP_ID);
            prop_assert!(seq.ids[n..].iter().all(|&i| i == PAD_ID));
            prop_assert!(seq.ids.iter().all(|&i| (i as usize) < vocab.len()));
        }
    }
}
