//! Lexical overlap metrics between generated and reference questions, plus
//! perplexity of the reference questions under a trained chain.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chain::{self, ChainConfig, GenerationRecord, ParamSet};
use crate::corpus::read_jsonl;
use crate::error::{Error, Result};
use crate::preprocess::{final_question_index, SubDialogueExample};
use crate::tokenizer::{tokenize, Vocab};

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-1..=max_n: clipped n-gram counts pooled over all pairs,
/// geometric mean of the precisions up to each order, times the brevity
/// penalty `exp(1 - r/c)` when the candidates are shorter overall. No
/// smoothing.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>], max_n: usize) -> Result<Vec<f64>> {
    if candidates.len() != references.len() {
        return Err(Error::Argument(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() || max_n == 0 {
        return Err(Error::Argument("bleu needs at least one pair and order".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=max_n {
            let rc = ngrams(r, n);
            for (g, k) in ngrams(c, n) {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    let bp = if c_len == 0 {
        0.0
    } else if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..max_n {
        if matched[n] == 0 || total[n] == 0 {
            zero = true;
        } else {
            log_sum += (matched[n] as f64 / total[n] as f64).ln();
        }
        out.push(if zero {
            0.0
        } else {
            bp * (log_sum / (n + 1) as f64).exp()
        });
    }
    Ok(out)
}

/// Sentence BLEU with add-one smoothing on orders two and up.
pub fn sentence_bleu(candidate: &[String], reference: &[String], max_n: usize) -> Vec<f64> {
    let c_len = candidate.len();
    let bp = if c_len == 0 {
        return vec![0.0; max_n];
    } else if c_len < reference.len() {
        (1.0 - reference.len() as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let mut log_sum = 0.0;
    (1..=max_n)
        .map(|n| {
            let rc = ngrams(reference, n);
            let m: usize = ngrams(candidate, n)
                .into_iter()
                .map(|(g, k)| k.min(rc.get(g).copied().unwrap_or(0)))
                .sum();
            let t = c_len.saturating_sub(n - 1);
            let p = if n == 1 {
                m as f64 / t as f64
            } else {
                (m as f64 + 1.0) / (t as f64 + 1.0)
            };
            if p == 0.0 {
                log_sum = f64::NEG_INFINITY;
            } else {
                log_sum += p.ln();
            }
            bp * (log_sum / n as f64).exp()
        })
        .collect()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS-based F1.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::Argument("rouge_l needs non-empty sequences".into()));
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return Ok(0.0);
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// Exact-match METEOR: each candidate token aligns to the leftmost unused
/// identical reference token; the fragmentation penalty counts chunks of
/// matches contiguous in both sequences.
pub fn meteor_lite(candidate: &[String], reference: &[String]) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::Argument("meteor_lite needs non-empty sequences".into()));
    }
    let mut used = vec![false; reference.len()];
    let mut align: Vec<Option<usize>> = Vec::with_capacity(candidate.len());
    for tok in candidate {
        let hit = (0..reference.len()).find(|&j| !used[j] && &reference[j] == tok);
        if let Some(j) = hit {
            used[j] = true;
        }
        align.push(hit);
    }
    let m = align.iter().flatten().count();
    if m == 0 {
        return Ok(0.0);
    }
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for a in &align {
        match (prev, a) {
            (Some(p), Some(j)) if *j == p + 1 => {}
            (_, Some(_)) => chunks += 1,
            _ => {}
        }
        prev = *a;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    Ok(fmean * (1.0 - penalty))
}

/// Perplexity of the final-turn gold questions, pooled per token,
/// teacher-forced through the chain.
pub fn perplexity(
    params: &ParamSet<f32>,
    cc: &ChainConfig,
    vocab: &Vocab,
    examples: &[SubDialogueExample],
) -> Result<f64> {
    let sums = examples
        .iter()
        .map(|ex| chain::flow_loss(cc, params, ex, vocab).map(|o| (o.nll_q_sum, o.n_q)))
        .collect::<Result<Vec<_>>>()?;
    pooled_perplexity(sums)
}

/// `exp(total NLL / total tokens)` over (NLL sum, token count) parts.
pub fn pooled_perplexity(parts: impl IntoIterator<Item = (f64, usize)>) -> Result<f64> {
    let (nll, count) = parts
        .into_iter()
        .fold((0.0f64, 0usize), |(s, n), (a, b)| (s + a, n + b));
    if count == 0 {
        return Err(Error::Argument("no question tokens to score".into()));
    }
    Ok((nll / count as f64).exp())
}

pub const REPORT_NOTES: [&str; 2] = [
    "meteor_lite: exact-match unigram alignment only (no stemming or synonyms), alpha=0.9 beta=3 gamma=0.5",
    "bleu: corpus-level, unsmoothed",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor_lite: f64,
    pub perplexity: Option<f64>,
    pub n_examples: usize,
    pub notes: Vec<String>,
}

impl MetricReport {
    /// Scores tokenized pairs; perplexity is attached separately.
    pub fn score(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<MetricReport> {
        let b = bleu(candidates, references, 4)?;
        let n = candidates.len() as f64;
        let (mut rl, mut mt) = (0.0, 0.0);
        for (c, r) in candidates.iter().zip(references) {
            // An empty generation scores zero rather than failing the report.
            if !c.is_empty() && !r.is_empty() {
                rl += rouge_l(c, r)?;
                mt += meteor_lite(c, r)?;
            }
        }
        Ok(MetricReport {
            bleu1: b[0],
            bleu2: b[1],
            bleu3: b[2],
            bleu4: b[3],
            rouge_l: rl / n,
            meteor_lite: mt / n,
            perplexity: None,
            n_examples: candidates.len(),
            notes: REPORT_NOTES.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn table_header() -> String {
        format!(
            "{:<18} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>6}",
            "Model", "P", "B1", "B2", "B3", "B4", "M", "RL", "N"
        )
    }

    /// One row in the column layout of the header; scores shown as percentages.
    pub fn table_row(&self, label: &str) -> String {
        let ppl = self
            .perplexity
            .map(|p| format!("{p:.2}"))
            .unwrap_or_else(|| "-".into());
        format!(
            "{:<18} {:>7} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>6}",
            label,
            ppl,
            100.0 * self.bleu1,
            100.0 * self.bleu2,
            100.0 * self.bleu3,
            100.0 * self.bleu4,
            100.0 * self.meteor_lite,
            100.0 * self.rouge_l,
            self.n_examples
        )
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::table_header())?;
        writeln!(f, "{}", self.table_row("generated"))?;
        for n in &self.notes {
            writeln!(f, "# {n}")?;
        }
        Ok(())
    }
}

/// Optional model for perplexity in [`evaluate`].
pub struct PerplexityModel<'a> {
    pub params: &'a ParamSet<f32>,
    pub chain: &'a ChainConfig,
    pub vocab: &'a Vocab,
}

/// Scores a generation file against the gold questions of a preprocessed
/// example file, matched on (dialogue id, turn).
pub fn evaluate(
    generations_file: &Path,
    gold_file: &Path,
    model: Option<PerplexityModel<'_>>,
) -> Result<MetricReport> {
    let gens: Vec<GenerationRecord> = read_jsonl(generations_file)?;
    let gold: Vec<SubDialogueExample> = read_jsonl(gold_file)?;
    evaluate_records(&gens, &gold, model)
}

pub fn evaluate_records(
    gens: &[GenerationRecord],
    gold: &[SubDialogueExample],
    model: Option<PerplexityModel<'_>>,
) -> Result<MetricReport> {
    if gens.is_empty() {
        return Err(Error::Argument("generation file is empty".into()));
    }
    let mut by_key: BTreeMap<(String, usize), &SubDialogueExample> = BTreeMap::new();
    for ex in gold {
        by_key.insert((ex.dialogue_id.clone(), ex.target_turn), ex);
    }
    let mut missing = Vec::new();
    let mut cands = Vec::with_capacity(gens.len());
    let mut refs = Vec::with_capacity(gens.len());
    let mut matched = Vec::with_capacity(gens.len());
    for g in gens {
        match by_key.get(&(g.dialogue_id.clone(), g.turn)) {
            Some(ex) => {
                let qi = final_question_index(ex).ok_or_else(|| {
                    Error::Validation(format!("gold example {}#{} has no final question", ex.dialogue_id, ex.target_turn))
                })?;
                cands.push(tokenize(&g.generated_question));
                refs.push(tokenize(&ex.segments[qi].text));
                matched.push((*ex).clone());
            }
            None => missing.push(format!("{}#{}", g.dialogue_id, g.turn)),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Alignment(format!(
            "generations without gold examples: {}",
            missing.join(", ")
        )));
    }
    let mut report = MetricReport::score(&cands, &refs)?;
    if let Some(m) = model {
        report.perplexity = Some(perplexity(m.params, m.chain, m.vocab, &matched)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let c = vec![toks("what is the name of the dog"), toks("where does he live")];
        assert_eq!(bleu(&c, &c, 4).unwrap(), vec![1.0; 4]);
        let d = vec![toks("x y z"), toks("u v")];
        assert_eq!(bleu(&c, &d, 4).unwrap(), vec![0.0; 4]);
        assert!(matches!(bleu(&c, &d[..1], 4), Err(Error::Argument(_))));
    }

    #[test]
    fn bleu_clipping_without_brevity_penalty() {
        // c = 3 > r = 2, so no brevity penalty; clipped unigram precision 1/3.
        let b = bleu(&[toks("the the the")], &[toks("the cat")], 4).unwrap();
        assert!((b[0] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(b[1], 0.0);
    }

    #[test]
    fn bleu_brevity_penalty_for_short_candidates() {
        let b = bleu(&[toks("the cat")], &[toks("the cat sat")], 2).unwrap();
        let bp = (1.0f64 - 3.0 / 2.0).exp();
        assert!((b[0] - bp).abs() < 1e-12);
        assert!((b[1] - bp).abs() < 1e-12);
    }

    #[test]
    fn sentence_bleu_smooths_higher_orders() {
        let s = sentence_bleu(&toks("a b c"), &toks("a x c"), 2);
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-12);
        // bigrams: 0 matches of 2 -> (0+1)/(2+1)
        assert!((s[1] - (2.0f64 / 3.0 * 1.0 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l(&toks("a b c"), &toks("a b c")).unwrap(), 1.0);
        assert!((rouge_l(&toks("a b c d"), &toks("a c b d")).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(rouge_l(&toks("a b"), &toks("c d")).unwrap(), 0.0);
        assert!(rouge_l(&[], &toks("a")).is_err());
    }

    #[test]
    fn meteor_examples() {
        let s = meteor_lite(&toks("a b c d"), &toks("a b c d")).unwrap();
        assert!((s - 0.9921875).abs() < 1e-12);
        assert_eq!(meteor_lite(&toks("x"), &toks("y")).unwrap(), 0.0);
        let s = meteor_lite(&toks("the cat sat"), &toks("the cat slept")).unwrap();
        assert!((s - 0.625).abs() < 1e-12);
        assert!(meteor_lite(&toks("a"), &[]).is_err());
    }

    #[test]
    fn meteor_counts_crossing_chunks() {
        // "b a" vs "a b": two matches, each its own chunk.
        let s = meteor_lite(&toks("b a"), &toks("a b")).unwrap();
        let expected = 1.0 * (1.0 - 0.5 * 1.0f64.powi(3));
        assert!((s - expected).abs() < 1e-12);
    }

    #[test]
    fn perplexity_of_fixed_probabilities() {
        let nll = [0.5f64, 0.25, 0.125].iter().map(|p| -p.ln()).sum::<f64>();
        assert!((pooled_perplexity([(nll, 3)]).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(pooled_perplexity([(0.0, 5)]).unwrap(), 1.0);
        assert!(pooled_perplexity([]).is_err());
    }

    fn gold(id: &str, turn: usize, question: &str) -> SubDialogueExample {
        use crate::preprocess::{Segment, SegmentKind};
        SubDialogueExample {
            dialogue_id: id.into(),
            target_turn: turn,
            segments: vec![
                Segment::new(SegmentKind::PassageAstar, "P [SEP] a"),
                Segment::new(SegmentKind::Question, question),
            ],
            loss_segments: vec![0, 1],
        }
    }

    fn generated(id: &str, turn: usize, question: &str) -> GenerationRecord {
        GenerationRecord {
            dialogue_id: id.into(),
            turn,
            gold_question: String::new(),
            generated_question: question.into(),
            truncated: false,
        }
    }

    #[test]
    fn evaluate_identity_and_contract() {
        let g = [gold("d1", 1, "Where does she live?"), gold("d2", 1, "Is he a pilot?")];
        let same = [generated("d2", 1, "Is he a pilot?"), generated("d1", 1, "Where does she live?")];
        let r = evaluate_records(&same, &g, None).unwrap();
        assert_eq!([r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.rouge_l], [1.0; 5]);
        assert_eq!(r.perplexity, None);
        assert!(matches!(evaluate_records(&[], &g, None), Err(Error::Argument(_))));
        let stray = [generated("d1", 1, "x"), generated("d9", 2, "y")];
        match evaluate_records(&stray, &g, None) {
            Err(Error::Alignment(m)) => assert!(m.contains("d9#2") && !m.contains("d1#1")),
            other => panic!("expected alignment error, got {other:?}"),
        }
    }

    #[test]
    fn three_pair_fixture() {
        // Hand-computed: unigrams 7/10, bigrams 1/7, no trigram matches,
        // c = 10 > r = 9.
        let c = vec![toks("a b c d"), toks("the cat sat"), toks("the the the")];
        let r = vec![toks("a c b d"), toks("the cat slept"), toks("the cat")];
        let m = MetricReport::score(&c, &r).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 5e-5;
        assert!(close(m.bleu1, 0.7));
        assert!(close(m.bleu2, 0.3162));
        assert_eq!((m.bleu3, m.bleu4), (0.0, 0.0));
        assert!(close(m.rouge_l, 0.6056));
        assert!(close(m.meteor_lite, 0.4544));
    }

    use proptest::prelude::*;

    fn sentence() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 1..10)
            .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #[test]
        fn scores_stay_in_unit_interval(c in sentence(), r in sentence()) {
            let rl = rouge_l(&c, &r).unwrap();
            let mt = meteor_lite(&c, &r).unwrap();
            let b = bleu(&[c.clone()], &[r.clone()], 4).unwrap();
            prop_assert!((0.0..=1.0).contains(&rl));
            prop_assert!((0.0..=1.0).contains(&mt));
            prop_assert!(b.iter().all(|x| (0.0..=1.0).contains(x)));
            // LCS is symmetric, so is its F1.
            prop_assert_eq!(rl, rouge_l(&r, &c).unwrap());
        }

        #[test]
        fn identity_is_perfect(c in sentence()) {
            prop_assert_eq!(rouge_l(&c, &c).unwrap(), 1.0);
            prop_assert_eq!(bleu(&[c.clone()], &[c.clone()], 1).unwrap()[0], 1.0);
            let m = c.len() as f64;
            prop_assert!((meteor_lite(&c, &c).unwrap() - (1.0 - 0.5 / m.powi(3))).abs() < 1e-12);
        }
    }

    #[test]
    fn report_table_has_columns() {
        let c = vec![toks("a b")];
        let r = MetricReport::score(&c, &c).unwrap();
        assert!(MetricReport::table_header().contains("B1"));
        assert!(r.table_row("x").contains("100.00"));
        assert_eq!(r.notes.len(), 2);
    }
}
