//! Turns a dialogue into model-ready sub-dialogue examples.
//!
//! For an n-turn dialogue, example i covers turns 1..=i. Its first segment
//! is A*: the passage with turn i's rationale wrapped in `[HL]` markers,
//! joined to the first answer by `[SEP]`. Turn 1's question follows, then
//! one (answer, question) pair per later turn.

use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, RationaleSpan};
use crate::error::{Error, Result};

pub const HL: &str = "[HL]";
pub const SEP: &str = "[SEP]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SegmentKind {
    PassageAstar,
    Answer,
    Question,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: String,
}

impl Segment {
    pub fn new(kind: SegmentKind, text: impl Into<String>) -> Self {
        Segment {
            kind,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubDialogueExample {
    pub dialogue_id: String,
    /// 1-based index of the final turn.
    pub target_turn: usize,
    pub segments: Vec<Segment>,
    /// Segments holding the final turn's answer and question, ascending.
    /// For a first-turn example the answer lives inside A* (index 0).
    pub loss_segments: Vec<usize>,
}

/// Which parts of the input encoding are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputOptions {
    pub history: bool,
    pub highlight: bool,
    pub aq_order: bool,
}

impl Default for InputOptions {
    fn default() -> Self {
        InputOptions {
            history: true,
            highlight: true,
            aq_order: true,
        }
    }
}

/// Wraps the span in paired `[HL]` markers: `"[HL] "` before, `" [HL]"`
/// after. Deleting both markers gives back the input.
pub fn insert_highlight(passage_text: &str, span: RationaleSpan) -> Result<String> {
    span.validate(passage_text)?;
    let (a, b) = span.byte_range(passage_text);
    let mut out = String::with_capacity(passage_text.len() + 2 * HL.len() + 2);
    out.push_str(&passage_text[..a]);
    out.push_str(HL);
    out.push(' ');
    out.push_str(&passage_text[a..b]);
    out.push(' ');
    out.push_str(HL);
    out.push_str(&passage_text[b..]);
    Ok(out)
}

/// Inverse of [`insert_highlight`]; text without markers is returned as is.
pub fn remove_highlight(text: &str) -> String {
    let open = format!("{HL} ");
    let close = format!(" {HL}");
    match text.find(&open) {
        Some(i) => {
            let mut s = String::with_capacity(text.len());
            s.push_str(&text[..i]);
            s.push_str(&text[i + open.len()..]);
            match s.find(&close) {
                Some(j) => {
                    s.replace_range(j..j + close.len(), "");
                    s
                }
                None => s,
            }
        }
        None => text.to_string(),
    }
}

pub fn build_astar(highlighted_passage: &str, first_answer: &str) -> Result<Segment> {
    if highlighted_passage.trim().is_empty() || first_answer.trim().is_empty() {
        return Err(Error::Validation("A* inputs must be non-empty".into()));
    }
    if highlighted_passage.contains(SEP) || first_answer.contains(SEP) {
        return Err(Error::Validation(format!(
            "reserved token {SEP} in A* input"
        )));
    }
    Ok(Segment::new(
        SegmentKind::PassageAstar,
        format!("{highlighted_passage} {SEP} {first_answer}"),
    ))
}

/// Splits an A* text into (passage part, first answer).
pub fn split_astar(text: &str) -> Option<(&str, &str)> {
    text.split_once(&format!(" {SEP} "))
}

pub fn expand_subdialogues(d: &Dialogue) -> Result<Vec<SubDialogueExample>> {
    d.validate()?;
    let first_answer = &d.turns[0].answer;
    (1..=d.turns.len())
        .map(|n| {
            let target = &d.turns[n - 1];
            let highlighted = insert_highlight(&d.passage.text, target.rationale)?;
            let astar = build_astar(&highlighted, first_answer)?;
            let structure = Structure {
                astar: astar.text,
                first_question: Some(d.turns[0].question.clone()),
                later: d.turns[1..n]
                    .iter()
                    .map(|t| (t.answer.clone(), t.question.clone()))
                    .collect(),
            };
            Ok(structure.emit(d.id().to_string(), n, true))
        })
        .collect()
}

/// Expands and applies input options in one go.
pub fn preprocess_dialogue(d: &Dialogue, opts: InputOptions) -> Result<Vec<SubDialogueExample>> {
    expand_subdialogues(d)?
        .into_iter()
        .map(|ex| apply_options(&ex, opts))
        .collect()
}

/// Places each turn's answer before (`aq_order`) or after its question.
/// Turn 1's answer sits inside A*, so turn 1 only ever contributes Q1.
pub fn order_turns(example: &SubDialogueExample, aq_order: bool) -> Result<SubDialogueExample> {
    let s = Structure::parse(example)?;
    Ok(s.emit(example.dialogue_id.clone(), example.target_turn, aq_order))
}

/// Applies the disabled parts of `opts` to an example. Idempotent, so an
/// example that was already ablated at preprocessing time is unaffected.
pub fn apply_options(example: &SubDialogueExample, opts: InputOptions) -> Result<SubDialogueExample> {
    let aq_now = Structure::aq_order_of(example)?;
    let mut s = Structure::parse(example)?;
    if !opts.history && !s.later.is_empty() {
        let last = s.later.pop();
        s.first_question = None;
        s.later = last.into_iter().collect();
    }
    if !opts.highlight {
        s.astar = remove_highlight(&s.astar);
    }
    let aq = opts.aq_order && aq_now.unwrap_or(true);
    Ok(s.emit(example.dialogue_id.clone(), example.target_turn, aq))
}

/// Index of the final turn's question segment.
pub fn final_question_index(example: &SubDialogueExample) -> Option<usize> {
    example
        .loss_segments
        .iter()
        .copied()
        .find(|&i| example.segments.get(i).map(|s| s.kind) == Some(SegmentKind::Question))
}

pub fn validate_example(example: &SubDialogueExample) -> Result<()> {
    let s = Structure::parse(example)?;
    let reemitted = s.emit(
        example.dialogue_id.clone(),
        example.target_turn,
        Structure::aq_order_of(example)?.unwrap_or(true),
    );
    if reemitted.loss_segments != example.loss_segments {
        return Err(Error::Validation(format!(
            "example {}#{}: loss_segments {:?} do not match the final turn {:?}",
            example.dialogue_id, example.target_turn, example.loss_segments, reemitted.loss_segments
        )));
    }
    if example.segments.iter().any(|s| s.text.trim().is_empty()) {
        return Err(Error::Validation(format!(
            "example {}#{}: empty segment",
            example.dialogue_id, example.target_turn
        )));
    }
    Ok(())
}

/// Order-independent view of an example.
struct Structure {
    astar: String,
    first_question: Option<String>,
    /// (answer, question) for each turn after the first that is present.
    later: Vec<(String, String)>,
}

impl Structure {
    fn invalid(example: &SubDialogueExample, why: &str) -> Error {
        Error::Validation(format!(
            "example {}#{}: {why}",
            example.dialogue_id, example.target_turn
        ))
    }

    fn parse(example: &SubDialogueExample) -> Result<Structure> {
        let segs = &example.segments;
        let first = segs
            .first()
            .filter(|s| s.kind == SegmentKind::PassageAstar)
            .ok_or_else(|| Self::invalid(example, "first segment must be PASSAGE_ASTAR"))?;
        let mut rest = &segs[1..];
        let mut first_question = None;
        if rest.len() % 2 == 1 {
            if rest[0].kind != SegmentKind::Question {
                return Err(Self::invalid(example, "expected the first question after A*"));
            }
            first_question = Some(rest[0].text.clone());
            rest = &rest[1..];
        }
        let mut later = Vec::with_capacity(rest.len() / 2);
        for pair in rest.chunks(2) {
            let (a, q) = match (pair[0].kind, pair[1].kind) {
                (SegmentKind::Answer, SegmentKind::Question) => (&pair[0], &pair[1]),
                (SegmentKind::Question, SegmentKind::Answer) => (&pair[1], &pair[0]),
                _ => return Err(Self::invalid(example, "turn segments must pair an answer with a question")),
            };
            later.push((a.text.clone(), q.text.clone()));
        }
        if first_question.is_none() && later.is_empty() {
            return Err(Self::invalid(example, "no question segment"));
        }
        Ok(Structure {
            astar: first.text.clone(),
            first_question,
            later,
        })
    }

    /// `Some(true)` for answer-first pairs, `Some(false)` for question-first,
    /// `None` when there are no pairs.
    fn aq_order_of(example: &SubDialogueExample) -> Result<Option<bool>> {
        let segs = &example.segments;
        let start = if segs.len() % 2 == 0 { 2 } else { 1 };
        let mut order = None;
        for pair in segs.get(start..).unwrap_or(&[]).chunks(2) {
            let aq = pair[0].kind == SegmentKind::Answer;
            match order {
                None => order = Some(aq),
                Some(o) if o != aq => return Err(Self::invalid(example, "mixed turn ordering")),
                _ => {}
            }
        }
        Ok(order)
    }

    fn emit(self, dialogue_id: String, target_turn: usize, aq_order: bool) -> SubDialogueExample {
        let mut segments = vec![Segment::new(SegmentKind::PassageAstar, self.astar)];
        let mut loss_segments = Vec::with_capacity(2);
        if let Some(q) = self.first_question {
            segments.push(Segment::new(SegmentKind::Question, q));
        }
        let n_later = self.later.len();
        for (i, (a, q)) in self.later.into_iter().enumerate() {
            let (a, q) = (
                Segment::new(SegmentKind::Answer, a),
                Segment::new(SegmentKind::Question, q),
            );
            if aq_order {
                segments.push(a);
                segments.push(q);
            } else {
                segments.push(q);
                segments.push(a);
            }
            if i + 1 == n_later {
                let base = segments.len() - 2;
                loss_segments.extend([base, base + 1]);
            }
        }
        if loss_segments.is_empty() {
            loss_segments.extend([0, 1]);
        }
        SubDialogueExample {
            dialogue_id,
            target_turn,
            segments,
            loss_segments,
        }
    }
}
