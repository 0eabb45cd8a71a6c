//! Vocabulary, word tokenizer and the three input layouts.
//!
//! | variant | layout                                                        | supervision          |
//! |---------|---------------------------------------------------------------|----------------------|
//! | V1      | `[CLS] anchor [SEP] target [SEP] code`                        | pooled, on `[CLS]`   |
//! | V2      | `[CLS] anchor [SEP] target [SEP] code [SEP] title`            | pooled, on `[CLS]`   |
//! | V3      | `[CLS] anchor [SEP] code title [SEP] [TAR] t1 [TAR] t2 ...`   | every token of `ti`  |
//!
//! Gold scores live in-band in [`EncodedSequence::token_targets`]; every
//! position that carries no supervision holds [`SENTINEL`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;

use serde::Serialize;

use crate::corpus::{ContextTable, PhraseRecord};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const TAR: TokenId = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[TAR]"];

/// Gold value of positions excluded from the loss.
pub const SENTINEL: f64 = -1.0;

#[derive(Debug, thiserror::Error)]
pub enum TextError {
    #[error("vocabulary cap must be at least 6, got {0}")]
    CapTooSmall(usize),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("max_len {max_len} is too small for the {layout} layout (need at least {min})")]
    MaxLenTooSmall {
        layout: &'static str,
        max_len: usize,
        min: usize,
    },
    #[error("malformed vocabulary file: {0}")]
    BadVocabFile(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Splits text into lowercase word tokens. Whitespace separates tokens and every
/// character that is neither alphanumeric nor whitespace is a token of its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Token to id map with the five reserved tokens at ids 0..5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Vocabulary over anchors, targets, context codes and context titles.
    pub fn build(
        records: &[PhraseRecord],
        contexts: &ContextTable,
        cap: usize,
    ) -> Result<Self, TextError> {
        let texts = records
            .iter()
            .flat_map(|r| [r.anchor.as_str(), r.target.as_str(), r.context.as_str()])
            .chain(
                contexts
                    .iter()
                    .flat_map(|(code, title)| [Some(code), title])
                    .flatten(),
            );
        Self::from_texts(texts, cap)
    }

    /// Keeps the `cap - 5` most frequent words, ties broken lexicographically.
    pub fn from_texts<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        cap: usize,
    ) -> Result<Self, TextError> {
        if cap < 6 {
            return Err(TextError::CapTooSmall(cap));
        }
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for w in split_words(text) {
                *freq.entry(w).or_default() += 1;
            }
        }
        for r in RESERVED {
            freq.remove(r);
        }
        let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
        // BTreeMap order is lexicographic; a stable sort keeps it among equal counts.
        ranked.sort_by(|a, b| b.1.cmp(&a.1));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .take(cap)
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Writes one token per line; the line number is the id.
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), TextError> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, TextError> {
        let tokens = r.lines().collect::<Result<Vec<_>, _>>()?;
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(TextError::BadVocabFile(
                "reserved tokens missing from lines 0..5".into(),
            ));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(TextError::BadVocabFile("duplicate token".into()));
        }
        if vocab
            .tokens
            .iter()
            .any(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(TextError::BadVocabFile("empty or whitespace token".into()));
        }
        Ok(vocab)
    }

    /// 64-bit FNV-1a hash of the serialized vocabulary, used to tie a
    /// checkpoint to the vocabulary it was trained with.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tokens {
            for b in t.bytes().chain(std::iter::once(b'\n')) {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// One (anchor, context) pair with all of its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedExample {
    pub anchor: String,
    pub context: String,
    pub targets: Vec<String>,
    pub scores: Vec<f64>,
    /// Record id of each target.
    pub ids: Vec<String>,
}

/// Groups records by (anchor, context) in order of first appearance; targets
/// keep their input order.
pub fn group_by_anchor_context<'a, I>(records: I) -> Vec<GroupedExample>
where
    I: IntoIterator<Item = &'a PhraseRecord>,
{
    let mut index: HashMap<(&str, &str), usize> = HashMap::new();
    let mut groups: Vec<GroupedExample> = Vec::new();
    for r in records {
        let slot = *index.entry((&r.anchor, &r.context)).or_insert_with(|| {
            groups.push(GroupedExample {
                anchor: r.anchor.clone(),
                context: r.context.clone(),
                targets: Vec::new(),
                scores: Vec::new(),
                ids: Vec::new(),
            });
            groups.len() - 1
        });
        let g = &mut groups[slot];
        g.targets.push(r.target.clone());
        g.scores.push(r.score.value());
        g.ids.push(r.id.clone());
    }
    groups
}

/// Token range that carries the prediction for one target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TargetSpan {
    /// Target index within its group (always 0 for V1/V2).
    pub target: usize,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncodedSequence {
    pub ids: Vec<TokenId>,
    /// 1 for real tokens, 0 for padding.
    pub attention_mask: Vec<u8>,
    pub token_targets: Vec<f64>,
    pub spans: Vec<TargetSpan>,
    /// Record id for each entry of `spans`.
    pub pair_ids: Vec<String>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of supervised positions.
    pub fn supervised(&self) -> usize {
        self.token_targets
            .iter()
            .filter(|&&g| g != SENTINEL)
            .count()
    }

    /// Single-line JSON rendering for debug dumps.
    pub fn to_debug_line(&self) -> String {
        serde_json::to_string(self).expect("sequence serializes")
    }
}

impl fmt::Display for EncodedSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_debug_line())
    }
}

/// Pads `seq` with `[PAD]` up to `max_len`. Padded positions are sentinel
/// scored and masked out of attention.
pub fn pad_to(seq: &EncodedSequence, max_len: usize) -> Result<EncodedSequence, TextError> {
    if seq.len() > max_len {
        return Err(TextError::TooLong {
            len: seq.len(),
            max_len,
        });
    }
    let mut out = seq.clone();
    out.ids.resize(max_len, PAD);
    out.attention_mask.resize(max_len, 0);
    out.token_targets.resize(max_len, SENTINEL);
    Ok(out)
}

/// Shortens the lists in `parts` (earliest index first) until their total
/// length fits in `budget`.
fn trim_to_budget(parts: &mut [&mut Vec<TokenId>], budget: usize) {
    let mut total: usize = parts.iter().map(|p| p.len()).sum();
    for p in parts.iter_mut() {
        if total <= budget {
            break;
        }
        let cut = (total - budget).min(p.len());
        p.truncate(p.len() - cut);
        total -= cut;
    }
}

/// Builds encoded sequences for any of the three layouts.
#[derive(Debug, Clone, Copy)]
pub struct SequenceBuilder<'a> {
    pub vocab: &'a Vocabulary,
    pub contexts: &'a ContextTable,
    pub max_len: usize,
}

impl<'a> SequenceBuilder<'a> {
    pub fn new(vocab: &'a Vocabulary, contexts: &'a ContextTable, max_len: usize) -> Self {
        SequenceBuilder {
            vocab,
            contexts,
            max_len,
        }
    }

    fn code_token(&self, code: &str) -> Vec<TokenId> {
        self.vocab.tokenize(code)
    }

    fn title_tokens(&self, code: &str) -> Vec<TokenId> {
        self.contexts
            .title(code)
            .map(|t| self.vocab.tokenize(t))
            .unwrap_or_default()
    }

    fn pooled(
        &self,
        record: &PhraseRecord,
        mut context: Vec<TokenId>,
        layout: &'static str,
    ) -> Result<EncodedSequence, TextError> {
        const FIXED: usize = 3;
        if self.max_len < FIXED {
            return Err(TextError::MaxLenTooSmall {
                layout,
                max_len: self.max_len,
                min: FIXED,
            });
        }
        let mut anchor = self.vocab.tokenize(&record.anchor);
        let mut target = self.vocab.tokenize(&record.target);
        let before = anchor.len() + target.len() + context.len();
        trim_to_budget(
            &mut [&mut context, &mut target, &mut anchor],
            self.max_len - FIXED,
        );
        // A context section that lost its whole title keeps no dangling [SEP].
        if context.last() == Some(&SEP) {
            context.pop();
        }
        if anchor.len() + target.len() + context.len() < before {
            log::debug!(
                "{layout} sequence for record {} truncated to {}",
                record.id,
                self.max_len
            );
        }

        let mut ids = Vec::with_capacity(self.max_len);
        ids.push(CLS);
        ids.extend(&anchor);
        ids.push(SEP);
        ids.extend(&target);
        ids.push(SEP);
        ids.extend(&context);
        let mut token_targets = vec![SENTINEL; ids.len()];
        token_targets[0] = record.score.value();
        Ok(EncodedSequence {
            attention_mask: vec![1; ids.len()],
            ids,
            token_targets,
            spans: vec![TargetSpan {
                target: 0,
                range: 0..1,
            }],
            pair_ids: vec![record.id.clone()],
        })
    }

    /// `[CLS] anchor [SEP] target [SEP] code`, gold score on `[CLS]`.
    /// Over-long inputs lose context tokens first, then target, then anchor.
    pub fn v1(&self, record: &PhraseRecord) -> Result<EncodedSequence, TextError> {
        self.pooled(record, self.code_token(&record.context), "V1")
    }

    /// As [`v1`](Self::v1) with the context title appended after another `[SEP]`.
    pub fn v2(&self, record: &PhraseRecord) -> Result<EncodedSequence, TextError> {
        let mut context = self.code_token(&record.context);
        let title = self.title_tokens(&record.context);
        if !title.is_empty() {
            context.push(SEP);
            context.extend(title);
        }
        self.pooled(record, context, "V2")
    }

    /// Grouped layout. Targets that do not fit are carried over to a further
    /// sequence that repeats the anchor/context header; a target is never split.
    pub fn v3(&self, group: &GroupedExample) -> Result<Vec<EncodedSequence>, TextError> {
        // [CLS] [SEP] [SEP] plus at least one [TAR] and one target token.
        const MIN: usize = 5;
        if self.max_len < MIN {
            return Err(TextError::MaxLenTooSmall {
                layout: "V3",
                max_len: self.max_len,
                min: MIN,
            });
        }
        let mut anchor = self.vocab.tokenize(&group.anchor);
        let mut context = self.code_token(&group.context);
        context.extend(self.title_tokens(&group.context));
        trim_to_budget(&mut [&mut context, &mut anchor], self.max_len - MIN);

        let mut header = Vec::with_capacity(anchor.len() + context.len() + 3);
        header.push(CLS);
        header.extend(&anchor);
        header.push(SEP);
        header.extend(&context);
        header.push(SEP);

        let fresh = |header: &[TokenId]| EncodedSequence {
            ids: header.to_vec(),
            attention_mask: vec![1; header.len()],
            token_targets: vec![SENTINEL; header.len()],
            spans: Vec::new(),
            pair_ids: Vec::new(),
        };

        let mut out = Vec::new();
        let mut cur = fresh(&header);
        for (i, ((target, &score), id)) in group
            .targets
            .iter()
            .zip(&group.scores)
            .zip(&group.ids)
            .enumerate()
        {
            let mut tokens = self.vocab.tokenize(target);
            let room = self.max_len - header.len() - 1;
            if tokens.len() > room {
                log::warn!(
                    "target of record {id} truncated from {} to {room} tokens",
                    tokens.len()
                );
                tokens.truncate(room);
            }
            if cur.len() + 1 + tokens.len() > self.max_len {
                out.push(std::mem::replace(&mut cur, fresh(&header)));
            }
            cur.ids.push(TAR);
            cur.token_targets.push(SENTINEL);
            let start = cur.ids.len();
            cur.ids.extend(&tokens);
            cur.token_targets
                .extend(std::iter::repeat_n(score, tokens.len()));
            cur.attention_mask.resize(cur.ids.len(), 1);
            cur.spans.push(TargetSpan {
                target: i,
                range: start..cur.ids.len(),
            });
            cur.pair_ids.push(id.clone());
        }
        if !cur.spans.is_empty() {
            out.push(cur);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Score;

    fn record(anchor: &str, target: &str, context: &str, score: u8) -> PhraseRecord {
        PhraseRecord {
            id: "r".into(),
            anchor: anchor.into(),
            target: target.into(),
            context: context.into(),
            score: Score::from_hundredths(score).unwrap(),
        }
    }

    fn vocab_of(words: &str) -> Vocabulary {
        Vocabulary::from_texts([words], 1000).unwrap()
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(
            split_words("Abatement of pollution"),
            ["abatement", "of", "pollution"]
        );
        assert!(split_words("").is_empty());
        assert_eq!(split_words("anti-aging"), ["anti", "-", "aging"]);
        assert_eq!(
            split_words("  (A47)  x,y"),
            ["(", "a47", ")", "x", ",", "y"]
        );
    }

    #[test]
    fn tokenize_maps_unknown_to_unk() {
        let v = vocab_of("abatement of pollution");
        let ids = v.tokenize("Abatement of pollution");
        assert_eq!(ids, vec![v.id("abatement"), v.id("of"), v.id("pollution")]);
        assert!(ids.iter().all(|&i| i >= 5));
        assert_eq!(v.tokenize("zebra"), vec![UNK]);
        assert!(v.tokenize("").is_empty());
    }

    #[test]
    fn vocab_reserved_and_cap() {
        let v = vocab_of("abatement of pollution");
        assert_eq!(v.len(), 8);
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(r), i as TokenId);
        }
        // "b" twice and "a" three times outrank the eight singletons.
        let v = Vocabulary::from_texts(["a a a b b c d e f g h i j"], 7).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.token(5), Some("a"));
        assert_eq!(v.token(6), Some("b"));
        assert_eq!(v.id("c"), UNK);
        assert!(matches!(
            Vocabulary::from_texts(["x"], 5),
            Err(TextError::CapTooSmall(5))
        ));
        let empty = Vocabulary::from_texts(std::iter::empty(), 10).unwrap();
        assert_eq!(empty.len(), 5);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = vocab_of("a b c anti-aging");
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        let back = Vocabulary::read(&buf[..]).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.fingerprint(), v.fingerprint());
        assert!(Vocabulary::read("a\nb\n".as_bytes()).is_err());
    }

    #[test]
    fn v1_layout() {
        let v = vocab_of("a b a47");
        let ctx = ContextTable::new();
        let b = SequenceBuilder::new(&v, &ctx, 400);
        let s = b.v1(&record("a", "b", "A47", 50)).unwrap();
        assert_eq!(
            s.ids,
            vec![CLS, v.id("a"), SEP, v.id("b"), SEP, v.id("a47")]
        );
        assert_eq!(s.token_targets, vec![0.5, -1.0, -1.0, -1.0, -1.0, -1.0]);
        assert_eq!(
            s.spans,
            vec![TargetSpan {
                target: 0,
                range: 0..1
            }]
        );
        assert_eq!(s.ids.iter().filter(|&&i| i == SEP).count(), 2);
    }

    #[test]
    fn v2_layout_with_and_without_title() {
        let v = vocab_of("a t a47 furniture");
        let mut ctx = ContextTable::new();
        ctx.insert("A47", Some("FURNITURE".into()));
        let b = SequenceBuilder::new(&v, &ctx, 400);
        let s = b.v2(&record("a", "t", "A47", 25)).unwrap();
        let expect = [
            CLS,
            v.id("a"),
            SEP,
            v.id("t"),
            SEP,
            v.id("a47"),
            SEP,
            v.id("furniture"),
        ];
        assert_eq!(s.ids, expect);

        let empty = ContextTable::new();
        let b2 = SequenceBuilder::new(&v, &empty, 400);
        let r = record("a", "t", "A47", 25);
        assert_eq!(b2.v2(&r).unwrap(), b2.v1(&r).unwrap());
    }

    #[test]
    fn v2_title_truncated_structure_kept() {
        let v = vocab_of("a t a47 one two three four");
        let mut ctx = ContextTable::new();
        ctx.insert("A47", Some("one two three four".into()));
        let b = SequenceBuilder::new(&v, &ctx, 10);
        let s = b.v2(&record("a", "t", "A47", 25)).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(
            &s.ids[..8],
            &[
                CLS,
                v.id("a"),
                SEP,
                v.id("t"),
                SEP,
                v.id("a47"),
                SEP,
                v.id("one")
            ]
        );
    }

    #[test]
    fn v1_truncates_context_then_target() {
        let v = vocab_of("a b c d e f a47");
        let ctx = ContextTable::new();
        let b = SequenceBuilder::new(&v, &ctx, 6);
        let s = b.v1(&record("a", "b c d", "A47", 50)).unwrap();
        assert_eq!(s.ids, vec![CLS, v.id("a"), SEP, v.id("b"), v.id("c"), SEP]);
        assert_eq!(s.ids[0], CLS);
    }

    #[test]
    fn v3_worked_example() {
        let v = vocab_of("a b c d a47");
        let ctx = ContextTable::new();
        let b = SequenceBuilder::new(&v, &ctx, 400);
        let g = GroupedExample {
            anchor: "a".into(),
            context: "A47".into(),
            targets: vec!["b".into(), "c d".into()],
            scores: vec![0.5, 0.75],
            ids: vec!["p1".into(), "p2".into()],
        };
        let seqs = b.v3(&g).unwrap();
        assert_eq!(seqs.len(), 1);
        let s = &seqs[0];
        let (a, bb, c, d, k) = (v.id("a"), v.id("b"), v.id("c"), v.id("d"), v.id("a47"));
        assert_eq!(s.ids, vec![CLS, a, SEP, k, SEP, TAR, bb, TAR, c, d]);
        assert_eq!(
            s.token_targets,
            vec![-1.0, -1.0, -1.0, -1.0, -1.0, -1.0, 0.5, -1.0, 0.75, 0.75]
        );
        assert_eq!(s.spans[1].range, 8..10);
        assert_eq!(s.pair_ids, ["p1", "p2"]);
    }

    #[test]
    fn grouping() {
        let mut recs = vec![
            record("x", "t1", "A47", 0),
            record("x", "t2", "A47", 25),
            record("x", "t3", "B01", 50),
            record("x", "t4", "A47", 75),
        ];
        for (i, r) in recs.iter_mut().enumerate() {
            r.id = format!("i{i}");
        }
        let g = group_by_anchor_context(&recs);
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].targets, ["t1", "t2", "t4"]);
        assert_eq!(g[0].ids, ["i0", "i1", "i3"]);
        assert_eq!(g[1].scores, [0.5]);
    }

    #[test]
    fn padding() {
        let v = vocab_of("a b a47");
        let ctx = ContextTable::new();
        let s = SequenceBuilder::new(&v, &ctx, 400)
            .v1(&record("a", "b", "A47", 50))
            .unwrap();
        let p = pad_to(&s, 8).unwrap();
        assert_eq!(&p.ids[6..], &[PAD, PAD]);
        assert_eq!(&p.token_targets[6..], &[SENTINEL, SENTINEL]);
        assert_eq!(&p.attention_mask[6..], &[0, 0]);
        assert_eq!(pad_to(&p, 8).unwrap(), p);
        assert!(matches!(pad_to(&p, 7), Err(TextError::TooLong { .. })));
    }
}
