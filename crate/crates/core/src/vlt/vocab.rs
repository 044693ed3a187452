//! Token vocabulary and fixed-length sequence encoding.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::VltError;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token-to-id bijection with the four reserved specials at ids 0..4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from a corpus; non-special tokens are sorted so the id
    /// assignment is independent of corpus order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Vocab, VltError> {
        let mut words: Vec<String> = texts
            .into_iter()
            .flat_map(|t| t.split_whitespace())
            .map(|w| w.to_lowercase())
            .collect();
        words.sort();
        words.dedup();
        if words.is_empty() {
            return Err(VltError::EmptyVocab);
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        Ok(Vocab::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    /// Rebuild the lookup index (needed after serde deserialization, which
    /// skips it).
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(|s| s.as_str()).unwrap_or(SPECIALS[UNK])
    }

    /// One token per line, id = line number.
    pub fn save(&self, path: &Path) -> Result<(), VltError> {
        Ok(std::fs::write(path, self.tokens.join("\n") + "\n")?)
    }

    pub fn load(path: &Path) -> Result<Vocab, VltError> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        for (i, special) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(|t| t.as_str()) != Some(*special) {
                return Err(VltError::BadVocabFile {
                    line: i + 1,
                    reason: format!("expected special token {special:?}"),
                });
            }
        }
        Ok(Vocab::from_tokens(tokens))
    }
}

/// Fixed-length token sequence: [BOS, tokens.., EOS, PAD..]; `mask` flags
/// the non-PAD positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSeq, VltError> {
    if vocab.is_empty() {
        return Err(VltError::EmptyVocab);
    }
    let words: Vec<usize> =
        text.split_whitespace().map(|w| vocab.id(&w.to_lowercase())).collect();
    if words.len() + 2 > max_len {
        return Err(VltError::TextTooLong { words: words.len(), max: max_len });
    }
    let mut ids = vec![BOS];
    ids.extend(words);
    ids.push(EOS);
    let used = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| i < used).collect();
    Ok(TokenSeq { ids, mask })
}

pub fn detokenize(seq: &TokenSeq, vocab: &Vocab) -> String {
    seq.ids
        .iter()
        .take_while(|&&id| id != EOS)
        .filter(|&&id| id != PAD && id != BOS)
        .map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["the car stops", "because the traffic light turns red"]).unwrap()
    }

    #[test]
    fn specials_are_reserved() {
        let v = vocab();
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<bos>"), BOS);
        assert_eq!(v.id("<eos>"), EOS);
        assert_eq!(v.id("<unk>"), UNK);
    }

    #[test]
    fn tokenize_frames_with_specials_and_padding() {
        let v = vocab();
        let seq = tokenize("the car stops", &v, 8).unwrap();
        assert_eq!(seq.ids[0], BOS);
        assert_eq!(seq.ids[4], EOS);
        assert_eq!(&seq.ids[5..], [PAD, PAD, PAD]);
        assert_eq!(seq.mask, [true, true, true, true, true, false, false, false]);
    }

    #[test]
    fn round_trip_on_closed_vocabulary() {
        let v = vocab();
        for text in ["the car stops", "because the traffic light turns red"] {
            let seq = tokenize(text, &v, 12).unwrap();
            assert_eq!(detokenize(&seq, &v), text);
        }
    }

    #[test]
    fn oov_maps_to_unk() {
        let v = vocab();
        let seq = tokenize("the zeppelin stops", &v, 8).unwrap();
        assert_eq!(seq.ids[2], UNK);
    }

    #[test]
    fn overlong_text_rejected() {
        let v = vocab();
        assert!(matches!(
            tokenize("the car stops", &v, 4),
            Err(VltError::TextTooLong { words: 3, max: 4 })
        ));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(Vocab::build([]), Err(VltError::EmptyVocab)));
    }

    #[test]
    fn file_round_trip() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let back = Vocab::load(&path).unwrap();
        assert_eq!(v.tokens, back.tokens);
        assert_eq!(back.id("car"), v.id("car"));
    }

    #[test]
    fn corrupt_vocab_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        std::fs::write(&path, "car\nthe\n").unwrap();
        assert!(matches!(Vocab::load(&path), Err(VltError::BadVocabFile { line: 1, .. })));
    }
}
