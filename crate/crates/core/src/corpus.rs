//! Dialogue corpora: CoQA ingestion, train/test splitting and a synthetic
//! template corpus small enough to train on a laptop.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Markers inserted by preprocessing; raw corpus text may not contain them.
pub const RESERVED_TOKENS: [&str; 2] = ["[HL]", "[SEP]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub id: String,
    pub text: String,
}

/// Half-open character (not byte) range into a passage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct RationaleSpan {
    pub start: usize,
    pub end: usize,
}

impl From<[usize; 2]> for RationaleSpan {
    fn from([start, end]: [usize; 2]) -> Self {
        RationaleSpan { start, end }
    }
}

impl From<RationaleSpan> for [usize; 2] {
    fn from(s: RationaleSpan) -> Self {
        [s.start, s.end]
    }
}

impl RationaleSpan {
    pub fn new(start: usize, end: usize) -> Self {
        RationaleSpan { start, end }
    }

    pub fn validate(&self, text: &str) -> Result<()> {
        let len = text.chars().count();
        if self.start < self.end && self.end <= len {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "span [{}, {}) outside passage of {} characters",
                self.start, self.end, len
            )))
        }
    }

    /// Byte offsets of the span in `text`. The span must be valid.
    pub fn byte_range(&self, text: &str) -> (usize, usize) {
        (char_to_byte(text, self.start), char_to_byte(text, self.end))
    }

    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        let (a, b) = self.byte_range(text);
        &text[a..b]
    }
}

fn char_to_byte(text: &str, idx: usize) -> usize {
    text.char_indices()
        .nth(idx)
        .map(|(b, _)| b)
        .unwrap_or(text.len())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub question: String,
    pub answer: String,
    #[serde(rename = "span")]
    pub rationale: RationaleSpan,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub passage: Passage,
    pub turns: Vec<DialogueTurn>,
}

#[derive(Serialize, Deserialize)]
struct DialogueRecord {
    id: String,
    passage: String,
    turns: Vec<DialogueTurn>,
}

impl Serialize for Dialogue {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        DialogueRecord {
            id: self.passage.id.clone(),
            passage: self.passage.text.clone(),
            turns: self.turns.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Dialogue {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = DialogueRecord::deserialize(d)?;
        Ok(Dialogue {
            passage: Passage {
                id: r.id,
                text: r.passage,
            },
            turns: r.turns,
        })
    }
}

pub fn contains_reserved(text: &str) -> bool {
    RESERVED_TOKENS.iter().any(|t| text.contains(t))
}

impl Dialogue {
    pub fn id(&self) -> &str {
        &self.passage.id
    }

    pub fn validate(&self) -> Result<()> {
        let id = self.id();
        if self.passage.text.trim().is_empty() {
            return Err(Error::Validation(format!("dialogue {id}: empty passage")));
        }
        if contains_reserved(&self.passage.text) {
            return Err(Error::Validation(format!(
                "dialogue {id}: passage contains a reserved marker"
            )));
        }
        if self.turns.is_empty() {
            return Err(Error::Validation(format!("dialogue {id}: no turns")));
        }
        for (i, t) in self.turns.iter().enumerate() {
            if t.question.trim().is_empty() || t.answer.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "dialogue {id}, turn {}: empty question or answer",
                    i + 1
                )));
            }
            if contains_reserved(&t.question) || contains_reserved(&t.answer) {
                return Err(Error::Validation(format!(
                    "dialogue {id}, turn {}: reserved marker in question or answer",
                    i + 1
                )));
            }
            t.rationale.validate(&self.passage.text).map_err(|e| {
                Error::Validation(format!("dialogue {id}, turn {}: {e}", i + 1))
            })?;
        }
        Ok(())
    }
}

pub fn qa_pair_count(dialogues: &[Dialogue]) -> usize {
    dialogues.iter().map(|d| d.turns.len()).sum()
}

// ---------------------------------------------------------------------------
// CoQA

#[derive(Deserialize)]
struct CoqaRecord {
    id: String,
    story: String,
    questions: Vec<CoqaQuestion>,
    answers: Vec<CoqaAnswer>,
}

#[derive(Deserialize)]
struct CoqaQuestion {
    input_text: String,
    turn_id: i64,
}

#[derive(Deserialize)]
struct CoqaAnswer {
    input_text: String,
    span_start: i64,
    span_end: i64,
    turn_id: i64,
}

#[derive(Debug, Clone)]
pub struct CoqaCorpus {
    pub dialogues: Vec<Dialogue>,
    /// Question/answer pairs present in the file, before any drops.
    pub raw_qa_pairs: usize,
    /// Pairs dropped because the answer is "unknown" or has no span.
    pub dropped_unanswerable: usize,
}

/// Loads a CoQA-format file. Unanswerable turns (no rationale span) are
/// dropped and counted; every kept turn is validated against its passage.
pub fn load_coqa(path: &Path) -> Result<CoqaCorpus> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root: serde_json::Value =
        serde_json::from_str(&raw).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let data = root
        .get("data")
        .and_then(|d| d.as_array())
        .ok_or_else(|| Error::parse(path.display().to_string(), "missing top-level \"data\" array"))?;

    let mut corpus = CoqaCorpus {
        dialogues: Vec::with_capacity(data.len()),
        raw_qa_pairs: 0,
        dropped_unanswerable: 0,
    };
    for (idx, value) in data.iter().enumerate() {
        let name = value
            .get("id")
            .and_then(|v| v.as_str())
            .map(|s| format!("record {idx} (id {s})"))
            .unwrap_or_else(|| format!("record {idx}"));
        let rec: CoqaRecord =
            serde_json::from_value(value.clone()).map_err(|e| Error::parse(&name, e))?;

        let answers: BTreeMap<i64, &CoqaAnswer> =
            rec.answers.iter().map(|a| (a.turn_id, a)).collect();
        let mut questions: Vec<&CoqaQuestion> = rec.questions.iter().collect();
        questions.sort_by_key(|q| q.turn_id);
        corpus.raw_qa_pairs += questions.len();

        let passage_len = rec.story.chars().count();
        let mut turns = Vec::with_capacity(questions.len());
        for (ti, q) in questions.iter().enumerate() {
            let a = answers.get(&q.turn_id).ok_or_else(|| {
                Error::parse(&name, format!("no answer for turn_id {}", q.turn_id))
            })?;
            let answer = a.input_text.trim();
            if a.span_start < 0 || a.span_end < 0 || answer.eq_ignore_ascii_case("unknown") {
                corpus.dropped_unanswerable += 1;
                continue;
            }
            let span = RationaleSpan::new(a.span_start as usize, a.span_end as usize);
            if span.validate(&rec.story).is_err() {
                return Err(Error::Validation(format!(
                    "dialogue {}, turn index {ti}: span [{}, {}) outside passage of {passage_len} characters",
                    rec.id, a.span_start, a.span_end
                )));
            }
            turns.push(DialogueTurn {
                question: q.input_text.trim().to_string(),
                answer: answer.to_string(),
                rationale: span,
            });
        }
        if turns.is_empty() {
            continue;
        }
        let d = Dialogue {
            passage: Passage {
                id: rec.id,
                text: rec.story,
            },
            turns,
        };
        d.validate()?;
        corpus.dialogues.push(d);
    }
    if corpus.dropped_unanswerable > 0 {
        log::info!(
            "dropped {} unanswerable turns from {}",
            corpus.dropped_unanswerable,
            path.display()
        );
    }
    Ok(corpus)
}

// ---------------------------------------------------------------------------
// Splitting

/// Partitions whole dialogues into (train, test). Both halves keep input
/// order; the held-out set has `round(test_fraction * n)` dialogues.
pub fn split_train_test(
    dialogues: &[Dialogue],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<Dialogue>, Vec<Dialogue>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    if dialogues.is_empty() {
        return Err(Error::Argument("cannot split an empty corpus".into()));
    }
    let n_test = (test_fraction * dialogues.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..dialogues.len()).collect();
    order.shuffle(&mut rng::seeded(seed));
    let mut held_out = vec![false; dialogues.len()];
    for &i in &order[..n_test] {
        held_out[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (d, &h) in dialogues.iter().zip(&held_out) {
        if h {
            test.push(d.clone());
        } else {
            train.push(d.clone());
        }
    }
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Synthetic corpus

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QuestionFamily {
    Factoid,
    YesNo,
    Explanation,
}

/// Coarse question family, read off the leading word.
pub fn question_family(question: &str) -> QuestionFamily {
    let first = question
        .split_whitespace()
        .next()
        .unwrap_or("")
        .to_lowercase();
    match first.as_str() {
        "why" => QuestionFamily::Explanation,
        "does" | "is" | "do" | "was" | "did" => QuestionFamily::YesNo,
        _ => QuestionFamily::Factoid,
    }
}

const PEOPLE: [(&str, bool); 20] = [
    ("Alice", true),
    ("Bob", false),
    ("Carol", true),
    ("David", false),
    ("Emma", true),
    ("Frank", false),
    ("Grace", true),
    ("Henry", false),
    ("Irene", true),
    ("Jack", false),
    ("Kate", true),
    ("Liam", false),
    ("Mia", true),
    ("Noah", false),
    ("Olivia", true),
    ("Peter", false),
    ("Rosa", true),
    ("Sam", false),
    ("Tina", true),
    ("Victor", false),
];
const CITIES: [&str; 14] = [
    "Paris", "Rome", "Berlin", "Madrid", "Vienna", "Lisbon", "Oslo", "Dublin", "Prague",
    "Athens", "Warsaw", "Zurich", "Boston", "Denver",
];
const JOBS: [&str; 12] = [
    "teacher", "doctor", "baker", "pilot", "farmer", "nurse", "painter", "lawyer", "chef",
    "writer", "dentist", "sailor",
];
const PETS: [&str; 10] = [
    "dog", "cat", "parrot", "rabbit", "horse", "turtle", "hamster", "goldfish", "lizard",
    "pony",
];
const FOODS: [&str; 12] = [
    "pizza", "apples", "soup", "rice", "cheese", "pasta", "bread", "cherries", "salad",
    "noodles", "honey", "carrots",
];
const MOODS: [&str; 5] = ["happy", "sad", "tired", "busy", "excited"];
const REASONS: [&str; 10] = [
    "the weather was nice",
    "the train was late",
    "work was long",
    "the team won",
    "the cake burned",
    "the music was loud",
    "a letter arrived",
    "the garden bloomed",
    "the exam was hard",
    "the trip was fun",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Relation {
    LivesIn,
    WorksAs,
    Owns,
    Likes,
    FriendOf,
    Age,
    Mood,
}

const FACT_RELATIONS: [Relation; 6] = [
    Relation::LivesIn,
    Relation::WorksAs,
    Relation::Owns,
    Relation::Likes,
    Relation::FriendOf,
    Relation::Age,
];

#[derive(Debug, Clone)]
struct Fact {
    entity: usize,
    relation: Relation,
    value: String,
    /// Second value slot (the reason for a mood).
    extra: String,
}

impl Fact {
    fn sentence(&self) -> String {
        let e = PEOPLE[self.entity].0;
        let v = &self.value;
        match self.relation {
            Relation::LivesIn => format!("{e} lives in {v}."),
            Relation::WorksAs => format!("{e} works as a {v}."),
            Relation::Owns => format!("{e} has a {v}."),
            Relation::Likes => format!("{e} likes {v}."),
            Relation::FriendOf => format!("{e} is friends with {v}."),
            Relation::Age => format!("{e} is {v} years old."),
            Relation::Mood => format!("{e} is {v} because {}.", self.extra),
        }
    }

    fn factoid(&self, subject: &str) -> (String, String) {
        let v = &self.value;
        match self.relation {
            Relation::LivesIn => (format!("Where does {subject} live?"), v.clone()),
            Relation::WorksAs => (format!("What does {subject} do for work?"), format!("a {v}")),
            Relation::Owns => (format!("What pet does {subject} have?"), format!("a {v}")),
            Relation::Likes => (format!("What does {subject} like to eat?"), v.clone()),
            Relation::FriendOf => (format!("Who is {subject} friends with?"), v.clone()),
            Relation::Age => (format!("How old is {subject}?"), v.clone()),
            Relation::Mood => (
                format!("Why is {subject} {v}?"),
                format!("because {}", self.extra),
            ),
        }
    }

    fn yes_no(&self, subject: &str, asked: &str) -> String {
        match self.relation {
            Relation::LivesIn => format!("Does {subject} live in {asked}?"),
            Relation::WorksAs => format!("Is {subject} a {asked}?"),
            Relation::Owns => format!("Does {subject} have a {asked}?"),
            Relation::Likes => format!("Does {subject} like {asked}?"),
            Relation::FriendOf => format!("Is {subject} friends with {asked}?"),
            Relation::Age => format!("Is {subject} {asked} years old?"),
            Relation::Mood => format!("Is {subject} {asked}?"),
        }
    }
}

fn pick<'a, R: rand::Rng>(rng: &mut R, pool: &[&'a str]) -> &'a str {
    pool[rng.random_range(0..pool.len())]
}

fn sample_value<R: rand::Rng>(rng: &mut R, relation: Relation, entity: usize) -> String {
    match relation {
        Relation::LivesIn => pick(rng, &CITIES).to_string(),
        Relation::WorksAs => pick(rng, &JOBS).to_string(),
        Relation::Owns => pick(rng, &PETS).to_string(),
        Relation::Likes => pick(rng, &FOODS).to_string(),
        Relation::FriendOf => loop {
            let p = rng.random_range(0..PEOPLE.len());
            if p != entity {
                break PEOPLE[p].0.to_string();
            }
        },
        Relation::Age => rng.random_range(5..=90).to_string(),
        Relation::Mood => pick(rng, &MOODS).to_string(),
    }
}

/// Template dialogues: 4-8 fact sentences about two or three people, then
/// 2-5 turns of factoid, yes/no and why questions. A question about the same
/// person as the previous turn refers to them by pronoun.
pub fn generate_synthetic(n_dialogues: usize, seed: u64) -> Result<Vec<Dialogue>> {
    if n_dialogues < 1 {
        return Err(Error::Argument("n_dialogues must be at least 1".into()));
    }
    let mut rng = rng::seeded(seed);
    (0..n_dialogues)
        .map(|i| {
            let d = synth_dialogue(&mut rng, format!("syn-{seed}-{i:05}"));
            d.validate().map(|_| d)
        })
        .collect()
}

fn synth_dialogue(rng: &mut rng::Rng, id: String) -> Dialogue {
    let n_people = rng.random_range(2..=3);
    let mut people: Vec<usize> = (0..PEOPLE.len()).collect();
    people.shuffle(rng);
    people.truncate(n_people);

    let n_sentences = rng.random_range(4..=8);
    // Every person gets one mood fact so each passage supports a why question.
    let mut facts: Vec<Fact> = Vec::with_capacity(n_sentences);
    let mut candidates: Vec<(usize, Relation)> = people
        .iter()
        .flat_map(|&p| FACT_RELATIONS.iter().map(move |&r| (p, r)))
        .collect();
    candidates.shuffle(rng);
    let mood_slots = n_people.min(n_sentences / 2);
    for &p in people.iter().take(mood_slots) {
        let value = sample_value(rng, Relation::Mood, p);
        let extra = pick(rng, &REASONS).to_string();
        facts.push(Fact {
            entity: p,
            relation: Relation::Mood,
            value,
            extra,
        });
    }
    for &(p, r) in candidates.iter().take(n_sentences - facts.len()) {
        let value = sample_value(rng, r, p);
        facts.push(Fact {
            entity: p,
            relation: r,
            value,
            extra: String::new(),
        });
    }
    facts.shuffle(rng);

    let mut text = String::new();
    let mut spans = Vec::with_capacity(facts.len());
    for f in &facts {
        if !text.is_empty() {
            text.push(' ');
        }
        let start = text.chars().count();
        text.push_str(&f.sentence());
        spans.push(RationaleSpan::new(start, text.chars().count()));
    }

    let n_turns = rng.random_range(2..=5).min(facts.len());
    let mut used = vec![false; facts.len()];
    let mut turns = Vec::with_capacity(n_turns);
    let mut prev_entity: Option<usize> = None;
    for _ in 0..n_turns {
        let stay = prev_entity.filter(|_| rng.random_bool(0.5));
        let pool: Vec<usize> = (0..facts.len())
            .filter(|&j| !used[j] && stay.is_none_or(|e| facts[j].entity == e))
            .collect();
        let pool = if pool.is_empty() {
            (0..facts.len()).filter(|&j| !used[j]).collect()
        } else {
            pool
        };
        let j = pool[rng.random_range(0..pool.len())];
        used[j] = true;
        let fact = &facts[j];
        let (name, female) = PEOPLE[fact.entity];
        let subject = if prev_entity == Some(fact.entity) {
            if female {
                "she"
            } else {
                "he"
            }
        } else {
            name
        };
        let (question, answer) = if fact.relation != Relation::Mood && rng.random_bool(0.4) {
            if rng.random_bool(0.5) {
                (fact.yes_no(subject, &fact.value), "yes".to_string())
            } else {
                let asked = loop {
                    let v = sample_value(rng, fact.relation, fact.entity);
                    if v != fact.value {
                        break v;
                    }
                };
                (fact.yes_no(subject, &asked), "no".to_string())
            }
        } else {
            fact.factoid(subject)
        };
        let question = capitalize(&question);
        turns.push(DialogueTurn {
            question,
            answer,
            rationale: spans[j],
        });
        prev_entity = Some(fact.entity);
    }

    Dialogue {
        passage: Passage { id, text },
        turns,
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

// ---------------------------------------------------------------------------
// JSON Lines interchange

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| Error::parse(path.display().to_string(), e))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("{} line {}", path.display(), i + 1), e))?;
        items.push(item);
    }
    Ok(items)
}

/// Reads a corpus: CoQA-format JSON when the extension is `.json`,
/// otherwise the JSON Lines dialogue format.
pub fn read_corpus(path: &Path) -> Result<Vec<Dialogue>> {
    if path.extension().is_some_and(|e| e == "json") {
        return Ok(load_coqa(path)?.dialogues);
    }
    let dialogues: Vec<Dialogue> = read_jsonl(path)?;
    for d in &dialogues {
        d.validate()?;
    }
    Ok(dialogues)
}
