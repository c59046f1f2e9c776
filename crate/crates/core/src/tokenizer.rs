//! Closed word-level vocabulary with the role markers the chain needs.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::corpus::Dialogue;
use crate::error::{Error, Result};
use crate::preprocess::{Segment, SegmentKind, HL, SEP};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const HL_ID: TokenId = 4;
pub const SEP_ID: TokenId = 5;
pub const ANS: TokenId = 6;
pub const QUES: TokenId = 7;

pub const SPECIALS: [&str; 8] = ["PAD", "BOS", "EOS", "UNK", HL, SEP, "ANS", "QUES"];
pub const N_SPECIALS: usize = SPECIALS.len();

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

/// Lowercased word pieces: alphanumeric runs, single punctuation
/// characters, and the literal `[HL]` / `[SEP]` markers.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let next_marker = [HL, SEP]
            .iter()
            .filter_map(|m| rest.find(m).map(|i| (i, *m)))
            .min_by_key(|&(i, _)| i);
        let (plain, marker) = match next_marker {
            Some((i, m)) => (&rest[..i], Some(m)),
            None => (rest, None),
        };
        split_words(plain, &mut out);
        match marker {
            Some(m) => {
                out.push(m.to_string());
                rest = &rest[plain.len() + m.len()..];
            }
            None => break,
        }
    }
    out
}

fn split_words(text: &str, out: &mut Vec<String>) {
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.extend(std::iter::once(c.to_lowercase().collect::<String>()));
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
}

/// Tokens joined by single spaces; the surface form `decode` produces.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

impl Vocab {
    /// Words ranked by corpus frequency, ties broken by first appearance.
    pub fn build(corpus: &[Dialogue], max_size: usize) -> Result<Vocab> {
        if max_size < N_SPECIALS {
            return Err(Error::Argument(format!(
                "max_size {max_size} leaves no room for the {N_SPECIALS} special tokens"
            )));
        }
        if corpus.is_empty() {
            return Err(Error::Argument("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
        let mut seen = 0usize;
        let mut add = |text: &str| {
            for tok in tokenize(text) {
                if tok == HL || tok == SEP {
                    continue;
                }
                let e = counts.entry(tok).or_insert((0, seen));
                e.0 += 1;
                seen += 1;
            }
        };
        for d in corpus {
            add(&d.passage.text);
            for t in &d.turns {
                add(&t.question);
                add(&t.answer);
            }
        }
        let mut words: Vec<(String, (usize, usize))> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .take(max_size)
            .collect();
        Vocab::from_tokens(tokens)
    }

    fn from_tokens(id_to_token: Vec<String>) -> Result<Vocab> {
        if id_to_token.len() < N_SPECIALS
            || id_to_token[..N_SPECIALS].iter().zip(SPECIALS).any(|(a, b)| a != b)
        {
            return Err(Error::Validation("vocabulary must start with the special tokens".into()));
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (i, t) in id_to_token.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn encode_text(&self, text: &str) -> Vec<TokenId> {
        tokenize(text)
            .iter()
            .map(|t| match t.as_str() {
                HL => HL_ID,
                SEP => SEP_ID,
                w => self.id(w),
            })
            .collect()
    }

    /// Answers get a leading `ANS`, questions `QUES ... EOS`, A* a leading `BOS`.
    pub fn encode(&self, segment: &Segment) -> Vec<TokenId> {
        let body = self.encode_text(&segment.text);
        let mut ids = Vec::with_capacity(body.len() + 2);
        match segment.kind {
            SegmentKind::PassageAstar => {
                ids.push(BOS);
                ids.extend(body);
            }
            SegmentKind::Answer => {
                ids.push(ANS);
                ids.extend(body);
            }
            SegmentKind::Question => {
                ids.push(QUES);
                ids.extend(body);
                ids.push(EOS);
            }
        }
        ids
    }

    /// Surface text with role markers (`PAD`, `BOS`, `EOS`, `ANS`, `QUES`) dropped.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Argument(format!("token id {id} outside vocabulary of {}", self.len())))?;
            if matches!(id, PAD | BOS | EOS | ANS | QUES) {
                continue;
            }
            words.push(tok);
        }
        Ok(words.join(" "))
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut s = self.id_to_token.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_tokens(s.lines().map(str::to_string).collect())
    }

    /// Fraction of word tokens in `texts` that map to `UNK`.
    pub fn unk_rate<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> f64 {
        let (mut unk, mut total) = (0usize, 0usize);
        for t in texts {
            for tok in tokenize(t) {
                total += 1;
                if tok != HL && tok != SEP && !self.contains(&tok) {
                    unk += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            unk as f64 / total as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, split_train_test, DialogueTurn, Passage, RationaleSpan};
    use proptest::prelude::*;

    fn one_sentence() -> Vec<Dialogue> {
        vec![Dialogue {
            passage: Passage {
                id: "x".into(),
                text: "A cat.".into(),
            },
            turns: vec![DialogueTurn {
                question: "A?".into(),
                answer: "cat".into(),
                rationale: RationaleSpan::new(0, 6),
            }],
        }]
    }

    #[test]
    fn tiny_vocab() {
        let v = Vocab::build(&one_sentence(), 16).unwrap();
        assert_eq!(v.len(), 8 + 4);
        for w in ["a", "cat", ".", "?"] {
            assert!(v.contains(w));
            assert!(v.id(w) as usize >= N_SPECIALS);
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s), i as TokenId);
        }
        assert_eq!(Vocab::build(&one_sentence(), 16).unwrap(), v);
        assert!(matches!(Vocab::build(&one_sentence(), 7), Err(Error::Argument(_))));
    }

    #[test]
    fn truncation_keeps_most_frequent() {
        let v = Vocab::build(&one_sentence(), 9).unwrap();
        assert_eq!(v.len(), 9);
        // "a" appears twice ("A cat." and "A?"), "cat" twice, "." once.
        assert_eq!(v.token(8), Some("a"));
    }

    #[test]
    fn segment_encoding() {
        let v = Vocab::build(&generate_synthetic(20, 0).unwrap(), 500).unwrap();
        let q = v.encode(&Segment::new(SegmentKind::Question, "Who?"));
        assert_eq!(q, vec![QUES, v.id("who"), v.id("?"), EOS]);
        assert_eq!(v.decode(&q).unwrap(), "who ?");
        let a = v.encode(&Segment::new(SegmentKind::Answer, "yes"));
        assert_eq!(a, vec![ANS, v.id("yes")]);
        let s = v.encode(&Segment::new(SegmentKind::PassageAstar, "x [HL] Who [HL]. [SEP] yes"));
        assert_eq!(s[0], BOS);
        assert_eq!(s.iter().filter(|&&t| t == HL_ID).count(), 2);
        assert_eq!(s.iter().filter(|&&t| t == SEP_ID).count(), 1);
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert!(matches!(v.decode(&[v.len() as TokenId]), Err(Error::Argument(_))));
        assert_eq!(v.encode_text("zebra"), vec![UNK]);
    }

    #[test]
    fn glued_markers_are_recognized() {
        assert_eq!(tokenize("The[HL] cat [HL]sat."), vec!["the", "[HL]", "cat", "[HL]", "sat", "."]);
    }

    #[test]
    fn held_out_unk_rate_is_low() {
        let ds = generate_synthetic(500, 0).unwrap();
        let (train, test) = split_train_test(&ds, 0.2, 1).unwrap();
        let v = Vocab::build(&train, 2000).unwrap();
        let texts = test.iter().flat_map(|d| {
            std::iter::once(d.passage.text.as_str())
                .chain(d.turns.iter().flat_map(|t| [t.question.as_str(), t.answer.as_str()]))
        });
        assert!(v.unk_rate(texts) < 0.01);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::build(&generate_synthetic(10, 0).unwrap(), 100).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().take(8).collect::<Vec<_>>(), SPECIALS.to_vec());
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }

    proptest! {
        #[test]
        fn decode_encode_round_trip(idx in proptest::collection::vec(0usize..1000, 1..30)) {
            let ds = generate_synthetic(30, 4).unwrap();
            let v = Vocab::build(&ds, 2000).unwrap();
            let words: Vec<&str> = ds.iter().flat_map(|d| d.passage.text.split_whitespace()).collect();
            let text: Vec<&str> = idx.iter().map(|&i| words[i % words.len()]).collect();
            let text = text.join(" ");
            for kind in [SegmentKind::Question, SegmentKind::Answer] {
                let ids = v.encode(&Segment::new(kind, text.clone()));
                prop_assert!(!ids.is_empty());
                prop_assert_eq!(v.decode(&ids).unwrap(), normalize(&text));
                let again = v.encode(&Segment::new(kind, v.decode(&ids).unwrap()));
                prop_assert_eq!(again, ids);
            }
        }
    }
}
