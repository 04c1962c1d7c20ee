//! Word-level tokenization over a closed vocabulary and the two-section
//! report representation shared by the policy, workflow and reward code.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

/// Index into a [`Vocab`].
pub type TokenId = u32;

pub const EOS_TOKEN: &str = "<eos>";
pub const HEADER_MARK: &str = "###";
pub const FINDINGS_WORD: &str = "Findings";
pub const IMPRESSION_WORD: &str = "Impression";
pub const FINDINGS_HEADER: &str = "### Findings";
pub const IMPRESSION_HEADER: &str = "### Impression";
pub const DEFAULT_MAX_LEN: usize = 64;

/// Words of the synthetic report corpus, in index order after `<eos>`.
const SYNTHETIC_WORDS: &[&str] = &[
    HEADER_MARK,
    FINDINGS_WORD,
    IMPRESSION_WORD,
    "the",
    "left",
    "right",
    "lung",
    "is",
    "clear",
    "there",
    "a",
    "pleural",
    "effusion",
    "shows",
    "consolidation",
    "pneumothorax",
    "heart",
    "size",
    "normal",
    "enlarged",
    "with",
    "cardiomegaly",
    "mediastinum",
    "markedly",
    "widened",
    "no",
    "acute",
    "findings",
    "and",
    "without",
    "mild",
    "small",
    "stable",
    "lungs",
    "are",
    "of",
    "in",
    "evidence",
    "focal",
    "bilateral",
    "seen",
    "cardiac",
    "silhouette",
    "edema",
    "opacity",
    "atelectasis",
    "lobe",
    "unchanged",
    "new",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TextError {
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("missing section header {0:?}")]
    MissingHeader(&'static str),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    BadTokenId { id: TokenId, size: usize },
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("vocabulary i/o: {0}")]
    Io(String),
}

/// Closed word vocabulary. Index 0 is always `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    eos_id: TokenId,
    max_len: usize,
}

impl Vocab {
    pub fn new(tokens: Vec<String>, max_len: usize) -> Result<Self, TextError> {
        if max_len == 0 {
            return Err(TextError::InvalidVocab("max_len must be at least 1".into()));
        }
        if tokens.first().map(String::as_str) != Some(EOS_TOKEN) {
            return Err(TextError::InvalidVocab(format!(
                "first token must be {EOS_TOKEN}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(TextError::InvalidVocab(format!(
                    "token {i} is empty or contains whitespace"
                )));
            }
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(TextError::InvalidVocab(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self {
            tokens,
            index,
            eos_id: 0,
            max_len,
        })
    }

    /// The vocabulary of the synthetic radiology corpus.
    pub fn synthetic() -> Self {
        let tokens = std::iter::once(EOS_TOKEN)
            .chain(SYNTHETIC_WORDS.iter().copied())
            .map(str::to_owned)
            .collect();
        Self::new(tokens, DEFAULT_MAX_LEN).expect("built-in vocabulary is valid")
    }

    pub fn with_max_len(mut self, max_len: usize) -> Result<Self, TextError> {
        if max_len == 0 {
            return Err(TextError::InvalidVocab("max_len must be at least 1".into()));
        }
        self.max_len = max_len;
        Ok(self)
    }

    /// Parse the line-per-token vocabulary format.
    pub fn parse(text: &str, max_len: usize) -> Result<Self, TextError> {
        let tokens = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_owned())
            .filter(|l| !l.is_empty())
            .collect();
        Self::new(tokens, max_len)
    }

    pub fn load(path: &Path, max_len: usize) -> Result<Self, TextError> {
        let text = std::fs::read_to_string(path).map_err(|e| TextError::Io(e.to_string()))?;
        Self::parse(&text, max_len)
    }

    /// One token per line; line number is the token index.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Map whitespace-separated words to ids, without a terminator.
    pub fn encode_words(&self, text: &str) -> Result<Vec<TokenId>, TextError> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| TextError::UnknownWord(w.to_owned())))
            .collect()
    }

    /// Space-joined words for `ids`, skipping the terminator.
    pub fn decode_words(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == self.eos_id {
                continue;
            }
            if let Some(w) = self.word(id) {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(w);
            }
        }
        out
    }
}

/// Generated or tokenized output of one agent.
///
/// `terminated` holds iff the last id is `<eos>` or the length reached
/// `max_len`. `len()` counts every emitted token including `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    terminated: bool,
}

impl TokenSequence {
    /// Build a sequence, validating ids and deriving `terminated`.
    pub fn new(ids: Vec<TokenId>, vocab: &Vocab) -> Result<Self, TextError> {
        for &id in &ids {
            if id as usize >= vocab.len() {
                return Err(TextError::BadTokenId {
                    id,
                    size: vocab.len(),
                });
            }
        }
        if ids.len() > vocab.max_len() {
            return Err(TextError::TooLong {
                len: ids.len(),
                max_len: vocab.max_len(),
            });
        }
        if let Some(pos) = ids.iter().position(|&id| id == vocab.eos_id()) {
            if pos + 1 != ids.len() {
                return Err(TextError::InvalidVocab(
                    "eos may only appear as the final token".into(),
                ));
            }
        }
        let terminated =
            ids.last() == Some(&vocab.eos_id()) || ids.len() == vocab.max_len();
        Ok(Self { ids, terminated })
    }

    /// Unchecked constructor used by the sampler, which upholds the invariants.
    pub(crate) fn from_parts(ids: Vec<TokenId>, terminated: bool) -> Self {
        Self { ids, terminated }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    /// Ids with a trailing `<eos>` removed.
    pub fn content(&self, vocab: &Vocab) -> &[TokenId] {
        match self.ids.last() {
            Some(&last) if last == vocab.eos_id() => &self.ids[..self.ids.len() - 1],
            _ => &self.ids,
        }
    }
}

/// Words of `text` followed by `<eos>`.
///
/// Texts longer than `max_len - 1` words are rejected rather than truncated.
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<TokenSequence, TextError> {
    let mut ids = vocab.encode_words(text)?;
    ids.push(vocab.eos_id());
    TokenSequence::new(ids, vocab)
}

pub fn detokenize(seq: &TokenSequence, vocab: &Vocab) -> String {
    vocab.decode_words(seq.ids())
}

/// A report split into its Findings and Impression sections.
///
/// Sections hold word ids only: no headers, no terminator. `malformed` is set
/// when the text the report came from lacked the expected headers.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Report {
    pub findings: Vec<TokenId>,
    pub impression: Vec<TokenId>,
    pub malformed: bool,
}

impl Report {
    pub fn new(findings: Vec<TokenId>, impression: Vec<TokenId>) -> Self {
        Self {
            findings,
            impression,
            malformed: false,
        }
    }

    /// Findings followed by impression.
    pub fn concatenated(&self) -> Vec<TokenId> {
        let mut all = Vec::with_capacity(self.findings.len() + self.impression.len());
        all.extend_from_slice(&self.findings);
        all.extend_from_slice(&self.impression);
        all
    }

    pub fn sections(&self) -> [&[TokenId]; 2] {
        [&self.findings, &self.impression]
    }

    /// The two-section layout with header lines.
    pub fn render(&self, vocab: &Vocab) -> String {
        format!(
            "{FINDINGS_HEADER}\n{}\n{IMPRESSION_HEADER}\n{}",
            vocab.decode_words(&self.findings),
            vocab.decode_words(&self.impression)
        )
    }
}

/// Position of the header `### <word>` among `words`, searching from `from`.
fn find_header(words: &[&str], from: usize, name: &str) -> Option<usize> {
    (from..words.len().saturating_sub(1))
        .find(|&i| words[i] == HEADER_MARK && words[i + 1] == name)
}

/// Parse `### Findings ... ### Impression ...`.
///
/// Headers are located on the word stream, so both the line-oriented
/// rendered layout and space-joined policy output parse the same way. Any
/// text before the Findings header is ignored.
pub fn split_report(text: &str, vocab: &Vocab) -> Result<Report, TextError> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let f = find_header(&words, 0, FINDINGS_WORD).ok_or(TextError::MissingHeader(FINDINGS_HEADER))?;
    let i = find_header(&words, f + 2, IMPRESSION_WORD)
        .ok_or(TextError::MissingHeader(IMPRESSION_HEADER))?;
    let encode = |ws: &[&str]| -> Result<Vec<TokenId>, TextError> {
        ws.iter()
            .map(|w| vocab.id(w).ok_or_else(|| TextError::UnknownWord((*w).to_owned())))
            .collect()
    };
    Ok(Report::new(encode(&words[f + 2..i])?, encode(&words[i + 2..])?))
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.ids)
    }
}
