//! Word-level tokenizer over a line-per-token vocabulary file.

use std::collections::HashMap;
use std::path::Path;

use super::EncoderError;

pub const CLS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const UNK_ID: u32 = 2;

const RESERVED: [&str; 3] = ["[CLS]", "[PAD]", "[UNK]"];

/// Vocabulary shipped with the synthetic scene grammar.
pub const BUILTIN_VOCAB: &str = include_str!("../../assets/vocab.txt");

#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

/// Token ids with an attention mask; position 0 is always `[CLS]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// The same tokens padded (or truncated) to `max_len`.
    pub fn repadded(&self, max_len: usize) -> TokenSeq {
        let mut ids = self.ids.clone();
        let mut mask = self.mask.clone();
        ids.resize(max_len, PAD_ID);
        mask.resize(max_len, false);
        TokenSeq { ids, mask }
    }
}

impl Vocab {
    /// One token per line; the line number is the id. The first three lines
    /// must be `[CLS]`, `[PAD]`, `[UNK]`.
    pub fn parse(text: &str) -> Result<Vocab, EncoderError> {
        let tokens: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        for (i, want) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(want) {
                return Err(EncoderError::Vocab(format!("line {} must be {want}", i + 1)));
            }
        }
        let mut ids = HashMap::new();
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(EncoderError::Vocab(format!("line {} is empty", i + 1)));
            }
            if ids.insert(tok.clone(), i as u32).is_some() {
                return Err(EncoderError::Vocab(format!("duplicate token '{tok}' on line {}", i + 1)));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    pub fn load(path: &Path) -> Result<Vocab, EncoderError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EncoderError::Vocab(format!("{}: {e}", path.display())))?;
        Vocab::parse(&text)
    }

    pub fn builtin() -> Vocab {
        Vocab::parse(BUILTIN_VOCAB).expect("shipped vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Lowercases, splits on whitespace and punctuation, maps unknown words to
    /// `[UNK]`, prepends `[CLS]`, then truncates or pads to `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<TokenSeq, EncoderError> {
        let words = split_words(text);
        if words.is_empty() {
            return Err(EncoderError::EmptyText);
        }
        if max_len == 0 {
            return Err(EncoderError::Vocab("max_len must be at least 1".into()));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS_ID);
        ids.extend(words.iter().map(|w| self.id(w).unwrap_or(UNK_ID)));
        ids.truncate(max_len);
        let real = ids.len();
        ids.resize(max_len, PAD_ID);
        let mask = (0..max_len).map(|i| i < real).collect();
        Ok(TokenSeq { ids, mask })
    }

    /// Space-joined words of the unmasked, non-special tokens.
    pub fn detokenize(&self, seq: &TokenSeq) -> String {
        seq.ids
            .iter()
            .zip(&seq.mask)
            .filter(|(&id, &m)| m && id != CLS_ID && id != PAD_ID)
            .map(|(&id, _)| self.token(id).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '[' && c != ']'))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_rejected() {
        let v = Vocab::builtin();
        assert!(matches!(v.tokenize("", 32), Err(EncoderError::EmptyText)));
        assert!(matches!(v.tokenize(" ,. ", 32), Err(EncoderError::EmptyText)));
    }

    #[test]
    fn case_is_normalised() {
        let v = Vocab::builtin();
        assert_eq!(v.tokenize("Red circle", 16).unwrap(), v.tokenize("red circle", 16).unwrap());
    }

    #[test]
    fn ids_follow_vocabulary_lines() {
        let v = Vocab::builtin();
        let text = "a red circle near a blue square";
        let seq = v.tokenize(text, 16).unwrap();
        let lines: Vec<&str> = BUILTIN_VOCAB.lines().collect();
        let expect: Vec<u32> = std::iter::once(0)
            .chain(text.split(' ').map(|w| lines.iter().position(|l| *l == w).unwrap() as u32))
            .collect();
        assert_eq!(&seq.ids[..8], &expect[..]);
        assert!(seq.ids[8..].iter().all(|&i| i == PAD_ID));
        assert_eq!(seq.real_len(), 8);
        assert_eq!(v.detokenize(&seq), text);
        assert_eq!(v.detokenize(&v.tokenize("A Red, CIRCLE!", 8).unwrap()), "a red circle");
    }

    #[test]
    fn unknown_and_truncation() {
        let v = Vocab::builtin();
        let seq = v.tokenize("a zebra", 4).unwrap();
        assert_eq!(seq.ids, vec![CLS_ID, v.id("a").unwrap(), UNK_ID, PAD_ID]);
        let long = v.tokenize("a a a a a a", 3).unwrap();
        assert_eq!(long.ids.len(), 3);
        assert!(long.mask.iter().all(|&m| m));
    }

    #[test]
    fn bad_vocab_files() {
        assert!(Vocab::parse("a\nb\n").is_err());
        assert!(Vocab::parse("[CLS]\n[PAD]\n[UNK]\nx\nx\n").is_err());
    }
}
