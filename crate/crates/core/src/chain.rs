//! The chained answer-encoding (AE) / question-generation (QG) engine.
//!
//! A sub-dialogue is consumed segment by segment. A* and answers go through
//! the AE parameters, questions through the QG parameters; every call reads
//! and extends one key/value cache. Only the final turn is scored: its
//! answer (inside A* for the first turn) and its question, each as a
//! per-token mean, summed.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cross_entropy, forward_rows, KvCache, Mode, ModelConfig, Params, Scalar, Tape};
use crate::preprocess::{apply_options, final_question_index, InputOptions, SegmentKind, SubDialogueExample};
use crate::rng::{self, Rng};
use crate::sampler::{decode_sequence, SamplerConfig};
use crate::tokenizer::{TokenId, Vocab, EOS, PAD, QUES, SEP_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Ablation {
    NoHistory,
    NoHighlight,
    NoAqOrder,
    NoAe,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::NoHistory,
        Ablation::NoHighlight,
        Ablation::NoAqOrder,
        Ablation::NoAe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoHistory => "NO_HISTORY",
            Ablation::NoHighlight => "NO_HIGHLIGHT",
            Ablation::NoAqOrder => "NO_AQ_ORDER",
            Ablation::NoAe => "NO_AE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub shared_params: bool,
    pub ablations: BTreeSet<Ablation>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            shared_params: true,
            ablations: BTreeSet::new(),
        }
    }
}

impl ChainConfig {
    pub fn with_ablation(mut self, a: Ablation) -> Self {
        self.ablations.insert(a);
        self
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn input_options(&self) -> InputOptions {
        InputOptions {
            history: !self.has(Ablation::NoHistory),
            highlight: !self.has(Ablation::NoHighlight),
            aq_order: !self.has(Ablation::NoAqOrder),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.has(Ablation::NoAe) && !self.shared_params {
            return Err(Error::Config(
                "NO_AE uses a single module and cannot be combined with separate parameters".into(),
            ));
        }
        Ok(())
    }

    /// Checks that `params` has the shape this config expects.
    pub fn check_params<T>(&self, params: &ParamSet<T>) -> Result<()> {
        self.validate()?;
        match (self.shared_params, params) {
            (true, ParamSet::Shared(_)) | (false, ParamSet::Split { .. }) => Ok(()),
            (true, _) => Err(Error::Config("shared_params is on but two parameter sets were given".into())),
            (false, _) => Err(Error::Config("shared_params is off but one parameter set was given".into())),
        }
    }
}

/// One parameter set used by both modules, or one per module.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamSet<T> {
    Shared(Params<T>),
    Split { ae: Params<T>, qg: Params<T> },
}

impl<T: Scalar> ParamSet<T> {
    pub fn init(cc: &ChainConfig, cfg: &ModelConfig, seed: u64) -> Self {
        if cc.shared_params {
            ParamSet::Shared(Params::init(cfg, seed))
        } else {
            ParamSet::Split {
                ae: Params::init(cfg, seed),
                qg: Params::init(cfg, rng::splitmix(seed ^ 0x5147)),
            }
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.first().cfg
    }

    fn first(&self) -> &Params<T> {
        match self {
            ParamSet::Shared(p) => p,
            ParamSet::Split { ae, .. } => ae,
        }
    }

    pub fn for_role(&self, role: Role) -> &Params<T> {
        match (self, role) {
            (ParamSet::Shared(p), _) => p,
            (ParamSet::Split { ae, .. }, Role::Ae) => ae,
            (ParamSet::Split { qg, .. }, Role::Qg) => qg,
        }
    }

    /// Parameter sets in slot order (`[shared]` or `[ae, qg]`).
    pub fn slots(&self) -> Vec<&Params<T>> {
        match self {
            ParamSet::Shared(p) => vec![p],
            ParamSet::Split { ae, qg } => vec![ae, qg],
        }
    }

    pub fn slots_mut(&mut self) -> Vec<&mut Params<T>> {
        match self {
            ParamSet::Shared(p) => vec![p],
            ParamSet::Split { ae, qg } => vec![ae, qg],
        }
    }

    /// Group names used in checkpoints, matching [`ParamSet::slots`].
    pub fn group_names(&self) -> &'static [&'static str] {
        match self {
            ParamSet::Shared(_) => &["shared"],
            ParamSet::Split { .. } => &["ae", "qg"],
        }
    }

    fn slot_of(&self, role: Role) -> usize {
        match (self, role) {
            (ParamSet::Split { .. }, Role::Qg) => 1,
            _ => 0,
        }
    }

    /// Rebuilds a set of the same variant from slot-ordered parts.
    pub fn from_slots(&self, mut parts: Vec<Params<T>>) -> Self {
        match self {
            ParamSet::Shared(_) => ParamSet::Shared(parts.remove(0)),
            ParamSet::Split { .. } => {
                let qg = parts.pop().expect("two slots");
                let ae = parts.pop().expect("two slots");
                ParamSet::Split { ae, qg }
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.slots().iter().map(|p| p.num_params()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        match self {
            ParamSet::Shared(p) => ParamSet::Shared(p.cast()),
            ParamSet::Split { ae, qg } => ParamSet::Split {
                ae: ae.cast(),
                qg: qg.cast(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Ae,
    Qg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Answer,
    Question,
}

/// One module call of an encoded example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedCall {
    pub role: Role,
    pub ids: Vec<TokenId>,
    /// Gold next token for every row (`labels[r] = ids[r + 1]`, `PAD` on
    /// the last row). Kept apart from `ids` so labels can be altered
    /// without touching the inputs.
    pub labels: Vec<TokenId>,
    /// Rows scored by this call; empty unless `term` is set.
    pub loss_rows: Vec<usize>,
    pub term: Option<Term>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub id: String,
    pub calls: Vec<EncodedCall>,
}

impl EncodedExample {
    pub fn total_len(&self) -> usize {
        self.calls.iter().map(|c| c.ids.len()).sum()
    }

    /// All ids in consumption order, as one sequence.
    pub fn concat_ids(&self) -> Vec<TokenId> {
        self.calls.iter().flat_map(|c| c.ids.iter().copied()).collect()
    }
}

fn example_label(ex: &SubDialogueExample) -> String {
    format!("{}#{}", ex.dialogue_id, ex.target_turn)
}

/// Applies the input ablations of `cc` to `ex`.
pub fn prepare_example(cc: &ChainConfig, ex: &SubDialogueExample) -> Result<SubDialogueExample> {
    apply_options(ex, cc.input_options())
}

/// Tokenizes an (already prepared) example into module calls with targets.
pub fn encode_example(cc: &ChainConfig, ex: &SubDialogueExample, vocab: &Vocab) -> Result<EncodedExample> {
    let id = example_label(ex);
    let mut calls = Vec::with_capacity(ex.segments.len());
    for (si, seg) in ex.segments.iter().enumerate() {
        let ids = vocab.encode(seg);
        let mut labels: Vec<TokenId> = ids[1..].to_vec();
        labels.push(PAD);
        let role = match seg.kind {
            _ if cc.has(Ablation::NoAe) => Role::Qg,
            SegmentKind::PassageAstar | SegmentKind::Answer => Role::Ae,
            SegmentKind::Question => Role::Qg,
        };
        let (term, loss_rows) = if !ex.loss_segments.contains(&si) {
            (None, Vec::new())
        } else {
            match seg.kind {
                SegmentKind::Question => (Some(Term::Question), (0..ids.len() - 1).collect()),
                SegmentKind::Answer => (Some(Term::Answer), (0..ids.len() - 1).collect()),
                SegmentKind::PassageAstar => {
                    let sep = ids.iter().position(|&t| t == SEP_ID).ok_or_else(|| {
                        Error::Validation(format!("example {id}: A* without {}", crate::preprocess::SEP))
                    })?;
                    (Some(Term::Answer), (sep..ids.len() - 1).collect())
                }
            }
        };
        // Without the AE module the answer is context only.
        let (term, loss_rows) = match term {
            Some(Term::Answer) if cc.has(Ablation::NoAe) => (None, Vec::new()),
            t => (t, loss_rows),
        };
        if term.is_some() && loss_rows.is_empty() {
            return Err(Error::Validation(format!("example {id}: scored segment {si} has no tokens")));
        }
        calls.push(EncodedCall {
            role,
            ids,
            labels,
            loss_rows,
            term,
        });
    }
    if !calls.iter().any(|c| c.term == Some(Term::Question)) {
        return Err(Error::Validation(format!("example {id}: no scored question")));
    }
    Ok(EncodedExample { id, calls })
}

/// Result of running the chain over one example.
#[derive(Debug, Clone)]
pub struct FlowOutput<T> {
    /// `loss_a + loss_q`.
    pub loss: f64,
    pub loss_a: f64,
    pub loss_q: f64,
    pub nll_a_sum: f64,
    pub n_a: usize,
    pub nll_q_sum: f64,
    pub n_q: usize,
    /// Cache length after the last call.
    pub cache_len: usize,
    pub grads: Option<ParamSet<T>>,
}

fn reborrow<'b>(mode: &'b mut Mode<'_>) -> Mode<'b> {
    match mode {
        Mode::Eval => Mode::Eval,
        Mode::Train(r) => Mode::Train(&mut **r),
    }
}

/// Runs encoded calls through the chain. `loss_a` is zero when no answer
/// is scored.
pub fn flow_forward_encoded<T: Scalar>(
    params: &ParamSet<T>,
    enc: &EncodedExample,
    mut mode: Mode<'_>,
    want_grads: bool,
) -> Result<FlowOutput<T>> {
    let cfg = params.config();
    if enc.total_len() > cfg.max_positions {
        return Err(Error::Capacity(format!(
            "example {} encodes to {} tokens, max_positions is {}",
            enc.id,
            enc.total_len(),
            cfg.max_positions
        )));
    }
    let count = |t: Term| -> usize {
        enc.calls.iter().filter(|c| c.term == Some(t)).map(|c| c.loss_rows.len()).sum()
    };
    let (n_a, n_q) = (count(Term::Answer), count(Term::Question));

    let mut tape = Tape::new(cfg);
    let mut nll = [0.0f64; 2];
    let mut dlogits = Vec::with_capacity(enc.calls.len());
    for call in &enc.calls {
        let p = params.for_role(call.role);
        let logits = tape
            .push(p, params.slot_of(call.role), &call.ids, &call.loss_rows, reborrow(&mut mode))
            .map_err(|e| match e {
                Error::Capacity(m) => Error::Capacity(format!("example {}: {m}", enc.id)),
                other => other,
            })?;
        match call.term {
            Some(term) => {
                let (k, n) = match term {
                    Term::Answer => (0, n_a),
                    Term::Question => (1, n_q),
                };
                let targets: Vec<TokenId> = call.loss_rows.iter().map(|&r| call.labels[r]).collect();
                let (s, dl) = cross_entropy(&logits, cfg.vocab_size, &targets, T::c(1.0 / n as f64));
                nll[k] += s;
                dlogits.push(dl);
            }
            None => dlogits.push(Vec::new()),
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    let (loss_a, loss_q) = (mean(nll[0], n_a), mean(nll[1], n_q));
    if !(loss_a.is_finite() && loss_q.is_finite()) {
        return Err(Error::Numeric {
            layer: cfg.n_layers,
            what: format!("non-finite loss on example {}", enc.id),
        });
    }
    let grads = want_grads.then(|| params.from_slots(tape.backward(&params.slots(), &dlogits)));
    Ok(FlowOutput {
        loss: loss_a + loss_q,
        loss_a,
        loss_q,
        nll_a_sum: nll[0],
        n_a,
        nll_q_sum: nll[1],
        n_q,
        cache_len: tape.len(),
        grads,
    })
}

/// Prepares, encodes and runs one example.
pub fn flow_forward<T: Scalar>(
    cc: &ChainConfig,
    params: &ParamSet<T>,
    ex: &SubDialogueExample,
    vocab: &Vocab,
    mode: Mode<'_>,
    want_grads: bool,
) -> Result<FlowOutput<T>> {
    cc.check_params(params)?;
    let prepared = prepare_example(cc, ex)?;
    let enc = encode_example(cc, &prepared, vocab)?;
    flow_forward_encoded(params, &enc, mode, want_grads)
}

/// Evaluation-mode loss without gradients.
pub fn flow_loss<T: Scalar>(
    cc: &ChainConfig,
    params: &ParamSet<T>,
    ex: &SubDialogueExample,
    vocab: &Vocab,
) -> Result<FlowOutput<T>> {
    flow_forward(cc, params, ex, vocab, Mode::Eval, false)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub ids: Vec<TokenId>,
    pub truncated: bool,
}

/// Teacher-forces every segment before the final question, then decodes
/// the question with the QG parameters starting from `QUES`.
pub fn generate_question(
    cc: &ChainConfig,
    params: &ParamSet<f32>,
    ex: &SubDialogueExample,
    vocab: &Vocab,
    sampler: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Generation> {
    cc.check_params(params)?;
    sampler.validate()?;
    let prepared = prepare_example(cc, ex)?;
    let qi = final_question_index(&prepared)
        .ok_or_else(|| Error::Validation(format!("example {} has no final question", example_label(ex))))?;
    let mut prefix = prepared.clone();
    prefix.segments.truncate(qi);
    let cfg = params.config();
    let mut cache = KvCache::new(cfg);
    for seg in &prefix.segments {
        let role = match seg.kind {
            _ if cc.has(Ablation::NoAe) => Role::Qg,
            SegmentKind::Question => Role::Qg,
            _ => Role::Ae,
        };
        let ids = vocab.encode(seg);
        forward_rows(params.for_role(role), &ids, &mut cache, &[], Mode::Eval).map_err(|e| match e {
            Error::Capacity(m) => Error::Capacity(format!("example {}: {m}", example_label(ex))),
            other => other,
        })?;
    }
    let qg = params.for_role(Role::Qg);
    let mut failure = None;
    let step = |so_far: &[TokenId]| -> Option<Vec<f32>> {
        let next = *so_far.last().unwrap_or(&QUES);
        if cache.len() >= cfg.max_positions {
            return None;
        }
        match forward_rows(qg, &[next], &mut cache, &[0], Mode::Eval) {
            Ok(l) => Some(l),
            Err(e) => {
                failure = Some(e);
                None
            }
        }
    };
    let out = decode_sequence(step, EOS, sampler, rng);
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(Generation {
        ids: out.ids,
        truncated: out.truncated,
    })
}

/// One line of a generations file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub dialogue_id: String,
    pub turn: usize,
    pub gold_question: String,
    pub generated_question: String,
    pub truncated: bool,
}

/// Generates the final question of every example. Example `i` samples from
/// its own stream derived from `sampler.seed`, so output does not depend on
/// thread count.
pub fn generate_records(
    cc: &ChainConfig,
    params: &ParamSet<f32>,
    examples: &[SubDialogueExample],
    vocab: &Vocab,
    sampler: &SamplerConfig,
) -> Result<Vec<GenerationRecord>> {
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = rng::derived(sampler.seed, i as u64, 0);
            let g = generate_question(cc, params, ex, vocab, sampler, &mut rng)?;
            let qi = final_question_index(ex)
                .ok_or_else(|| Error::Validation(format!("example {} has no final question", example_label(ex))))?;
            Ok(GenerationRecord {
                dialogue_id: ex.dialogue_id.clone(),
                turn: ex.target_turn,
                gold_question: ex.segments[qi].text.clone(),
                generated_question: vocab.decode(&g.ids)?,
                truncated: g.truncated,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_synthetic;
    use crate::model::forward;
    use crate::preprocess::{expand_subdialogues, Segment};
    use crate::tokenizer::{ANS, BOS};

    fn setup() -> (Vocab, Vec<SubDialogueExample>) {
        let ds = generate_synthetic(6, 11).unwrap();
        let vocab = Vocab::build(&ds, 400).unwrap();
        let exs = ds.iter().flat_map(|d| expand_subdialogues(d).unwrap()).collect();
        (vocab, exs)
    }

    fn tiny(v: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: v,
            max_positions: 256,
            dropout: 0.0,
        }
    }

    fn multi_turn(exs: &[SubDialogueExample], turn: usize) -> &SubDialogueExample {
        exs.iter().find(|e| e.target_turn == turn).unwrap()
    }

    #[test]
    fn first_turn_is_two_calls() {
        let (vocab, exs) = setup();
        let ex = multi_turn(&exs, 1);
        let enc = encode_example(&ChainConfig::default(), ex, &vocab).unwrap();
        assert_eq!(enc.calls.len(), 2);
        assert_eq!((enc.calls[0].role, enc.calls[1].role), (Role::Ae, Role::Qg));
        assert_eq!(enc.calls[0].ids[0], BOS);
        assert_eq!(enc.calls[0].term, Some(Term::Answer));
        assert_eq!(enc.calls[1].term, Some(Term::Question));
        // The answer rows start at SEP and predict the words after it.
        let sep = enc.calls[0].ids.iter().position(|&t| t == SEP_ID).unwrap();
        assert_eq!(enc.calls[0].loss_rows[0], sep);
        let answer_words = vocab.encode_text(&ex.segments[0].text.split_once(" [SEP] ").unwrap().1);
        let targets: Vec<_> = enc.calls[0].loss_rows.iter().map(|&r| enc.calls[0].labels[r]).collect();
        assert_eq!(targets, answer_words);
        assert_eq!(*enc.calls[1].labels.iter().rev().nth(1).unwrap(), EOS);
    }

    #[test]
    fn later_turn_scores_only_final_pair() {
        let (vocab, exs) = setup();
        let ex = multi_turn(&exs, 3);
        let enc = encode_example(&ChainConfig::default(), ex, &vocab).unwrap();
        let scored: Vec<usize> = (0..enc.calls.len()).filter(|&i| enc.calls[i].term.is_some()).collect();
        assert_eq!(scored, ex.loss_segments);
        let a = &enc.calls[scored[0]];
        assert_eq!(a.ids[0], ANS);
        assert_eq!(a.loss_rows, (0..a.ids.len() - 1).collect::<Vec<_>>());
    }

    /// One forward over the concatenated sequence, scored on the same rows.
    fn concat_losses(p: &Params<f64>, enc: &EncodedExample) -> (f64, f64) {
        let ids = enc.concat_ids();
        let (logits, _) = forward(p, &ids, &KvCache::new(&p.cfg), Mode::Eval).unwrap();
        let v = p.cfg.vocab_size;
        let mut sums = [(0.0, 0usize); 2];
        let mut off = 0;
        for c in &enc.calls {
            if let Some(t) = c.term {
                let k = (t == Term::Question) as usize;
                for &r in &c.loss_rows {
                    let row = &logits[(off + r) * v..(off + r + 1) * v];
                    let (nll, _) = cross_entropy(row, v, &[c.labels[r]], 1.0);
                    sums[k].0 += nll;
                    sums[k].1 += 1;
                }
            }
            off += c.ids.len();
        }
        let m = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
        (m(sums[0]), m(sums[1]))
    }

    #[test]
    fn shared_chain_equals_concatenated_forward() {
        let (vocab, exs) = setup();
        let cc = ChainConfig::default();
        let params = ParamSet::<f64>::init(&cc, &tiny(vocab.len()), 3);
        let ParamSet::Shared(p) = &params else { unreachable!() };
        for ex in exs.iter().filter(|e| e.target_turn <= 3) {
            let enc = encode_example(&cc, ex, &vocab).unwrap();
            let out = flow_forward_encoded(&params, &enc, Mode::Eval, false).unwrap();
            let (a, q) = concat_losses(p, &enc);
            assert!(((a + q) - out.loss).abs() <= 1e-5 * out.loss);
            assert!((q - out.loss_q).abs() <= 1e-5 * out.loss_q);
            assert_eq!(out.cache_len, enc.total_len());
        }
    }

    #[test]
    fn non_final_labels_do_not_matter() {
        let (vocab, exs) = setup();
        let cc = ChainConfig::default();
        let params = ParamSet::<f32>::init(&cc, &tiny(vocab.len()), 3);
        let ex = multi_turn(&exs, 3);
        let enc = encode_example(&cc, ex, &vocab).unwrap();
        let base = flow_forward_encoded(&params, &enc, Mode::Eval, false).unwrap().loss;
        let mut mutated = enc.clone();
        for c in mutated.calls.iter_mut().filter(|c| c.term.is_none()) {
            c.labels.iter_mut().for_each(|l| *l = (*l + 1) % vocab.len() as u32);
        }
        let after = flow_forward_encoded(&params, &mutated, Mode::Eval, false).unwrap().loss;
        assert_eq!(base.to_bits(), after.to_bits());
    }

    #[test]
    fn question_loss_reaches_ae_parameters() {
        let (vocab, exs) = setup();
        let cc = ChainConfig {
            shared_params: false,
            ..Default::default()
        };
        let params = ParamSet::<f64>::init(&cc, &tiny(vocab.len()), 3);
        let ex = multi_turn(&exs, 2);
        let mut enc = encode_example(&cc, ex, &vocab).unwrap();
        for c in enc.calls.iter_mut().filter(|c| c.term == Some(Term::Answer)) {
            c.term = None;
            c.loss_rows.clear();
        }
        let out = flow_forward_encoded(&params, &enc, Mode::Eval, true).unwrap();
        assert_eq!(out.loss_a, 0.0);
        let ParamSet::Split { ae, qg } = out.grads.unwrap() else { unreachable!() };
        let norm = |p: &Params<f64>| p.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm(&ae) > 1e-6, "AE grads vanish");
        assert!(norm(&qg) > 1e-6);
    }

    #[test]
    fn no_ae_is_question_only_single_role() {
        let (vocab, exs) = setup();
        let cc = ChainConfig::default().with_ablation(Ablation::NoAe);
        let enc = encode_example(&cc, multi_turn(&exs, 2), &vocab).unwrap();
        assert!(enc.calls.iter().all(|c| c.role == Role::Qg));
        assert!(enc.calls.iter().all(|c| c.term != Some(Term::Answer)));
        let params = ParamSet::<f64>::init(&cc, &tiny(vocab.len()), 1);
        let out = flow_forward(&cc, &params, multi_turn(&exs, 2), &vocab, Mode::Eval, false).unwrap();
        assert_eq!(out.loss, out.loss_q);
        let ParamSet::Shared(p) = &params else { unreachable!() };
        let (_, q) = concat_losses(p, &enc);
        assert!((q - out.loss).abs() <= 1e-9 * q);
        let split = ChainConfig {
            shared_params: false,
            ..cc
        };
        assert!(matches!(split.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn mismatched_param_set_is_config_error() {
        let (vocab, exs) = setup();
        let split = ChainConfig {
            shared_params: false,
            ..Default::default()
        };
        let params = ParamSet::<f32>::init(&ChainConfig::default(), &tiny(vocab.len()), 1);
        assert!(matches!(
            flow_loss(&split, &params, &exs[0], &vocab),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn capacity_error_names_example() {
        let (vocab, exs) = setup();
        let mut cfg = tiny(vocab.len());
        cfg.max_positions = 8;
        let cc = ChainConfig::default();
        let params = ParamSet::<f32>::init(&cc, &cfg, 1);
        match flow_loss(&cc, &params, &exs[0], &vocab) {
            Err(Error::Capacity(m)) => assert!(m.contains(&exs[0].dialogue_id), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ablations_change_the_encoding() {
        let (vocab, exs) = setup();
        let ex = multi_turn(&exs, 3);
        let full = encode_example(&ChainConfig::default(), ex, &vocab).unwrap();
        let hist = ChainConfig::default().with_ablation(Ablation::NoHistory);
        let enc = encode_example(&hist, &prepare_example(&hist, ex).unwrap(), &vocab).unwrap();
        assert_eq!(enc.calls.len(), 3);
        assert!(enc.total_len() < full.total_len());
        let hl = ChainConfig::default().with_ablation(Ablation::NoHighlight);
        let enc = encode_example(&hl, &prepare_example(&hl, ex).unwrap(), &vocab).unwrap();
        assert!(!enc.concat_ids().contains(&crate::tokenizer::HL_ID));
        let aq = ChainConfig::default().with_ablation(Ablation::NoAqOrder);
        let p = prepare_example(&aq, ex).unwrap();
        let kinds: Vec<_> = p.segments.iter().map(|s| s.kind).collect();
        assert_eq!(kinds[kinds.len() - 2], SegmentKind::Question);
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let (vocab, exs) = setup();
        let cc = ChainConfig::default();
        let params = ParamSet::<f32>::init(&cc, &tiny(vocab.len()), 5);
        let sc = SamplerConfig {
            max_new_tokens: 6,
            ..SamplerConfig::greedy()
        };
        let ex = multi_turn(&exs, 2);
        let a = generate_question(&cc, &params, ex, &vocab, &sc, &mut rng::seeded(0)).unwrap();
        let b = generate_question(&cc, &params, ex, &vocab, &sc, &mut rng::seeded(99)).unwrap();
        assert_eq!(a, b);
        assert!(a.ids.len() <= 6);
        assert_eq!(a.truncated, a.ids.len() == 6);
        let recs = generate_records(&cc, &params, &exs[..3], &vocab, &sc).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].turn, exs[0].target_turn);
    }

    #[test]
    fn generation_without_question_is_rejected() {
        let (vocab, _) = setup();
        let ex = SubDialogueExample {
            dialogue_id: "x".into(),
            target_turn: 1,
            segments: vec![Segment::new(SegmentKind::PassageAstar, "a b [SEP] c")],
            loss_segments: vec![0, 1],
        };
        let cc = ChainConfig::default();
        let params = ParamSet::<f32>::init(&cc, &tiny(vocab.len()), 5);
        assert!(generate_question(&cc, &params, &ex, &vocab, &SamplerConfig::greedy(), &mut rng::seeded(0)).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng as _;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn non_target_labels_never_reach_the_loss(
                data_seed in 0u64..1000,
                mutation_seed in any::<u64>(),
                shared in any::<bool>(),
                ablation in prop::option::of(prop::sample::select(Ablation::ALL.to_vec())),
            ) {
                let ds = generate_synthetic(2, data_seed).unwrap();
                let vocab = Vocab::build(&ds, 400).unwrap();
                let ex = expand_subdialogues(&ds[0]).unwrap().pop().unwrap();
                let mut cc = ChainConfig { shared_params: shared, ..Default::default() };
                if let Some(a) = ablation {
                    cc.ablations.insert(a);
                    if a == Ablation::NoAe {
                        cc.shared_params = true;
                    }
                }
                let params = ParamSet::<f32>::init(&cc, &tiny(vocab.len()), data_seed);
                let enc = encode_example(&cc, &prepare_example(&cc, &ex).unwrap(), &vocab).unwrap();
                let base = flow_forward_encoded(&params, &enc, Mode::Eval, false).unwrap();
                prop_assert_eq!(base.cache_len, enc.total_len());
                let mut r = rng::seeded(mutation_seed);
                let mut m = enc.clone();
                for c in m.calls.iter_mut() {
                    for (row, l) in c.labels.iter_mut().enumerate() {
                        if !c.loss_rows.contains(&row) {
                            *l = r.random_range(0..vocab.len() as u32);
                        }
                    }
                }
                let after = flow_forward_encoded(&params, &m, Mode::Eval, false).unwrap();
                prop_assert_eq!(base.loss.to_bits(), after.loss.to_bits());
            }
        }
    }

}
