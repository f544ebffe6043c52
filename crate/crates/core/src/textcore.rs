//! Shared multilingual subword vocabulary and greedy longest-match tokenization.
//!
//! The vocabulary holds every character seen at build time in two forms (a bare
//! word-initial piece and a `##` continuation piece) plus the most frequent whole
//! words. Any word built from known characters therefore segments without `[UNK]`.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::ops::Deref;

use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_PIECE: &str = "[PAD]";
pub const UNK_PIECE: &str = "[UNK]";
pub const CONTINUATION_PREFIX: &str = "##";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("max_size {max_size} cannot hold the {required} reserved and character pieces")]
    VocabTooSmall { max_size: usize, required: usize },
    #[error("vocab file line {line}: {reason}")]
    BadVocabFile { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// NFKC, lowercase, and collapse whitespace runs to single spaces.
///
/// Queries and product descriptions go through the same pipeline.
pub fn normalize(text: &str) -> String {
    let folded: String = text.nfkc().collect::<String>().to_lowercase();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalized whitespace-delimited words.
pub fn words(text: &str) -> Vec<String> {
    normalize(text)
        .split(' ')
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Tokenized text. Never contains [`PAD_ID`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        debug_assert!(!ids.contains(&PAD_ID));
        TokenSeq(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.0
    }
}

impl Deref for TokenSeq {
    type Target = [u32];

    fn deref(&self) -> &[u32] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
    max_word_chars: usize,
}

impl Vocab {
    fn from_pieces(pieces: Vec<String>) -> Self {
        let index = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
        let max_word_chars = pieces
            .iter()
            .skip(2)
            .map(|p| p.strip_prefix(CONTINUATION_PREFIX).unwrap_or(p).chars().count())
            .max()
            .unwrap_or(0);
        Vocab {
            pieces,
            index,
            max_word_chars,
        }
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    /// Longest piece length in characters, ignoring the continuation prefix.
    pub fn max_word_chars(&self) -> usize {
        self.max_word_chars
    }

    pub fn write_to<W: Write>(&self, mut sink: W) -> std::io::Result<()> {
        for piece in &self.pieces {
            sink.write_all(piece.as_bytes())?;
            sink.write_all(b"\n")?;
        }
        sink.flush()
    }

    pub fn read_from<R: BufRead>(source: R) -> Result<Self, TextError> {
        let mut pieces = Vec::new();
        for (i, line) in source.lines().enumerate() {
            let line = line?;
            let expected = match i {
                0 => Some(PAD_PIECE),
                1 => Some(UNK_PIECE),
                _ => None,
            };
            if let Some(expected) = expected {
                if line != expected {
                    return Err(TextError::BadVocabFile {
                        line: i + 1,
                        reason: format!("expected '{expected}', found '{line}'"),
                    });
                }
            } else if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(TextError::BadVocabFile {
                    line: i + 1,
                    reason: "piece is empty or contains whitespace".into(),
                });
            }
            pieces.push(line);
        }
        if pieces.len() < 2 {
            return Err(TextError::BadVocabFile {
                line: pieces.len() + 1,
                reason: "missing reserved pieces".into(),
            });
        }
        let vocab = Vocab::from_pieces(pieces);
        if vocab.index.len() != vocab.pieces.len() {
            return Err(TextError::BadVocabFile {
                line: 0,
                reason: "duplicate pieces".into(),
            });
        }
        Ok(vocab)
    }

    /// SHA-256 over the serialized vocab file, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for piece in &self.pieces {
            hasher.update(piece.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

/// Build a vocabulary from text lines.
///
/// Ids: `[PAD]`, `[UNK]`, then each observed character (sorted) as a bare piece
/// followed by its continuation piece, then whole words with frequency at least
/// `min_freq`, most frequent first with lexicographic tie-break, until
/// `max_size` pieces.
pub fn build_vocab<I, S>(corpus: I, max_size: usize, min_freq: usize) -> Result<Vocab, TextError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut freq: HashMap<String, usize> = HashMap::new();
    let mut alphabet: BTreeSet<char> = BTreeSet::new();
    for line in corpus {
        for word in words(line.as_ref()) {
            alphabet.extend(word.chars());
            *freq.entry(word).or_default() += 1;
        }
    }
    if alphabet.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let required = 2 + 2 * alphabet.len();
    if max_size < required {
        return Err(TextError::VocabTooSmall { max_size, required });
    }

    let mut pieces = vec![PAD_PIECE.to_owned(), UNK_PIECE.to_owned()];
    for c in &alphabet {
        pieces.push(c.to_string());
        pieces.push(format!("{CONTINUATION_PREFIX}{c}"));
    }

    let mut ranked: Vec<(&String, &usize)> = freq
        .iter()
        .filter(|(w, &n)| n >= min_freq.max(1) && w.chars().count() > 1)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    let room = max_size - pieces.len();
    pieces.extend(ranked.into_iter().take(room).map(|(w, _)| w.clone()));

    Ok(Vocab::from_pieces(pieces))
}

/// Greedy longest-prefix segmentation of normalized, whitespace-split text.
pub fn tokenize(text: &str, vocab: &Vocab) -> TokenSeq {
    let mut ids = Vec::new();
    let mut buf = String::new();
    for word in words(text) {
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        while start < chars.len() {
            let longest = vocab.max_word_chars.min(chars.len() - start);
            let mut matched = None;
            for end in (start + 1..=start + longest).rev() {
                buf.clear();
                if start > 0 {
                    buf.push_str(CONTINUATION_PREFIX);
                }
                buf.extend(&chars[start..end]);
                if let Some(id) = vocab.id(&buf) {
                    matched = Some((id, end));
                    break;
                }
            }
            match matched {
                Some((id, end)) => {
                    ids.push(id);
                    start = end;
                }
                None => {
                    ids.push(UNK_ID);
                    start += 1;
                }
            }
        }
    }
    TokenSeq::new(ids)
}
