//! AdamW training of the chain over sub-dialogue examples.
//!
//! Each optimizer step draws `batch_size` examples from a per-epoch
//! shuffle, runs them in parallel (each with its own dropout stream) and
//! sums their gradients in example order, so results do not depend on the
//! number of threads.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{encode_example, flow_forward, flow_forward_encoded, prepare_example, ChainConfig, EncodedExample, ParamSet};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, read_tensor_file, save_checkpoint, write_tensor_file, Checkpoint, CheckpointMeta, Mode, ModelConfig, Params, Scalar};
use crate::preprocess::SubDialogueExample;
use crate::rng;
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    /// Log (and evaluate dev loss) every this many steps; 0 means once per epoch.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-5,
            warmup_ratio: 0.1,
            total_steps: 1000,
            batch_size: 8,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: Some(1.0),
            seed: 0,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio must lie in [0, 1), got {}", self.warmup_ratio));
        }
        if self.total_steps < 1 || self.batch_size < 1 {
            return bad("total_steps and batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || self.weight_decay < 0.0 {
            return bad("adam_eps must be positive and weight_decay non-negative".into());
        }
        if self.grad_clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip_norm must be positive".into());
        }
        Ok(())
    }

    /// Steps covering `epochs` passes over `n_examples`.
    pub fn steps_for_epochs(&self, epochs: usize, n_examples: usize) -> usize {
        (epochs * n_examples).div_ceil(self.batch_size).max(1)
    }
}

/// Number of warmup steps: `warmup_ratio × total_steps`, rounded.
pub fn warmup_steps(tc: &TrainConfig) -> usize {
    let w = (tc.warmup_ratio * tc.total_steps as f64).round() as usize;
    w.min(tc.total_steps.saturating_sub(1))
}

/// Linear warmup to `learning_rate` over [`warmup_steps`], then linear
/// decay to zero at `total_steps`.
pub fn lr_at(step: usize, tc: &TrainConfig) -> f64 {
    let total = tc.total_steps as f64;
    let warm = warmup_steps(tc) as f64;
    let s = (step as f64).min(total);
    if s < warm {
        tc.learning_rate * s / warm
    } else {
        tc.learning_rate * (total - s) / (total - warm)
    }
}

/// AdamW moments, one pair of buffers per parameter slot.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: usize,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet<f32>) -> Self {
        let zeros = || params.slots().iter().map(|p| vec![0.0; p.num_params()]).collect();
        OptimizerState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// AdamW hyper-parameters for one update.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(tc: &TrainConfig, lr: f64) -> Self {
        AdamW {
            lr,
            beta1: tc.adam_beta1,
            beta2: tc.adam_beta2,
            eps: tc.adam_eps,
            weight_decay: tc.weight_decay,
        }
    }

    /// Updates one slice at optimizer step `t` (1-based). `decay` enables
    /// the decoupled weight decay for this slice.
    #[allow(clippy::too_many_arguments)]
    pub fn update<T: Scalar>(&self, p: &mut [T], m: &mut [T], v: &mut [T], g: &[T], t: usize, decay: bool, gscale: f64) {
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let shrink = if decay { 1.0 - self.lr * self.weight_decay } else { 1.0 };
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        for i in 0..p.len() {
            let gi = g[i] * T::c(gscale);
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let mhat = m[i].to_f64().unwrap_or(f64::NAN) / bc1;
            let vhat = v[i].to_f64().unwrap_or(f64::NAN) / bc2;
            let pi = p[i].to_f64().unwrap_or(f64::NAN) * shrink;
            p[i] = T::c(pi - self.lr * mhat / (vhat.sqrt() + self.eps));
        }
    }
}

/// One AdamW step with optional global-norm clipping. Returns the gradient
/// norm before clipping.
pub fn adamw_step(
    params: &mut ParamSet<f32>,
    state: &mut OptimizerState,
    grads: &ParamSet<f32>,
    lr: f64,
    tc: &TrainConfig,
) -> Result<f64> {
    let names = params.group_names();
    let gslots = grads.slots();
    let mut sq = 0.0f64;
    for (gi, g) in gslots.iter().enumerate() {
        for t in &g.layout.tensors {
            let mut s = 0.0f64;
            for &x in &g.data[t.range()] {
                s += (x as f64) * (x as f64);
            }
            if !s.is_finite() {
                return Err(Error::NonFiniteGradient(format!("{}.{}", names[gi], t.name)));
            }
            sq += s;
        }
    }
    let norm = sq.sqrt();
    let gscale = match tc.grad_clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.step += 1;
    let opt = AdamW::from_config(tc, lr);
    for (si, p) in params.slots_mut().into_iter().enumerate() {
        let layout = p.layout.clone();
        for t in &layout.tensors {
            let r = t.range();
            opt.update(
                &mut p.data[r.clone()],
                &mut state.m[si][r.clone()],
                &mut state.v[si][r.clone()],
                &gslots[si].data[r],
                state.step,
                t.kind.decays(),
                gscale,
            );
        }
    }
    Ok(norm)
}

/// Mean example loss and pooled per-token loss over a set of examples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalLoss {
    pub mean_loss: f64,
    pub mean_loss_a: f64,
    pub mean_loss_q: f64,
    /// Total answer and question NLL over total scored tokens.
    pub per_token: f64,
}

pub fn evaluate_loss(
    cc: &ChainConfig,
    params: &ParamSet<f32>,
    examples: &[SubDialogueExample],
    vocab: &Vocab,
) -> Result<EvalLoss> {
    let encoded = encode_all(cc, examples, vocab)?;
    evaluate_encoded(params, &encoded)
}

fn evaluate_encoded(params: &ParamSet<f32>, encoded: &[EncodedExample]) -> Result<EvalLoss> {
    if encoded.is_empty() {
        return Err(Error::Argument("no examples to evaluate".into()));
    }
    let outs: Vec<_> = encoded
        .par_iter()
        .map(|e| flow_forward_encoded(params, e, Mode::Eval, false))
        .collect::<Result<_>>()?;
    let n = outs.len() as f64;
    let (mut l, mut la, mut lq, mut nll, mut tok) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for o in &outs {
        l += o.loss;
        la += o.loss_a;
        lq += o.loss_q;
        nll += o.nll_a_sum + o.nll_q_sum;
        tok += o.n_a + o.n_q;
    }
    Ok(EvalLoss {
        mean_loss: l / n,
        mean_loss_a: la / n,
        mean_loss_q: lq / n,
        per_token: nll / tok.max(1) as f64,
    })
}

fn encode_all(cc: &ChainConfig, examples: &[SubDialogueExample], vocab: &Vocab) -> Result<Vec<EncodedExample>> {
    examples
        .iter()
        .map(|ex| encode_example(cc, &prepare_example(cc, ex)?, vocab))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub loss_a: f64,
    pub loss_q: f64,
    pub dev_loss: Option<f64>,
    pub wall_time_s: f64,
}

pub const LOG_HEADER: &str = "step,lr,train_loss,loss_a,loss_q,dev_loss,wall_time_s";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.6e},{:.6},{:.6},{:.6},{},{:.3}",
            self.step,
            self.lr,
            self.train_loss,
            self.loss_a,
            self.loss_q,
            self.dev_loss.map(|d| format!("{d:.6}")).unwrap_or_default(),
            self.wall_time_s
        )
    }
}

/// Where (and whether) training writes files.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Receives `train_log.csv`, `best.ckpt`, `last.ckpt` and `last.opt`.
    pub out_dir: Option<PathBuf>,
    /// Continue from a `last.ckpt` (its `.opt` sidecar is read too).
    pub resume: Option<PathBuf>,
    /// Stop after this step while keeping the schedule of `total_steps`.
    pub stop_at: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ParamSet<f32>,
    pub log: Vec<LogRow>,
    pub best_dev_loss: Option<f64>,
    pub best_step: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Example index for the `j`-th draw of optimizer step `step` (1-based):
/// consecutive draws walk a fresh shuffle every epoch.
struct Schedule {
    n: usize,
    seed: u64,
    epoch: usize,
    perm: Vec<usize>,
}

impl Schedule {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Schedule {
            n,
            seed,
            epoch: usize::MAX,
            perm: Vec::new(),
        };
        s.load(0);
        s
    }

    fn load(&mut self, epoch: usize) {
        if self.epoch != epoch {
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut rng::derived(self.seed, epoch as u64, 0xE90C));
            self.epoch = epoch;
        }
    }

    fn draw(&mut self, global: usize) -> usize {
        self.load(global / self.n);
        self.perm[global % self.n]
    }
}

pub fn save_params(path: &Path, params: &ParamSet<f32>, cc: &ChainConfig, meta: CheckpointMeta) -> Result<()> {
    let mut meta = meta;
    if meta.extra.is_null() {
        meta.extra = serde_json::json!({});
    }
    meta.extra["chain"] = serde_json::to_value(cc).map_err(|e| Error::parse("chain config", e))?;
    let groups = params
        .group_names()
        .iter()
        .zip(params.slots())
        .map(|(g, p)| (g.to_string(), p.clone()))
        .collect();
    save_checkpoint(
        path,
        &Checkpoint {
            config: params.config().clone(),
            meta,
            groups,
        },
    )
}

/// Loads parameters and the chain config stored with them.
pub fn load_params(path: &Path, expected: Option<&ModelConfig>) -> Result<(ParamSet<f32>, ChainConfig, CheckpointMeta)> {
    let ck = load_checkpoint(path, expected)?;
    let cc: ChainConfig = match ck.meta.extra.get("chain") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::parse(path.display().to_string(), e))?,
        None => ChainConfig::default(),
    };
    let mut params = match (ck.group("shared"), ck.group("ae"), ck.group("qg")) {
        (Some(p), None, None) => ParamSet::Shared(p.clone()),
        (None, Some(ae), Some(qg)) => ParamSet::Split {
            ae: ae.clone(),
            qg: qg.clone(),
        },
        _ => return Err(Error::parse(path.display().to_string(), "expected a shared or an ae+qg parameter set")),
    };
    if let Some(cfg) = expected {
        for p in params.slots_mut() {
            p.cfg.dropout = cfg.dropout;
        }
    }
    cc.check_params(&params)?;
    Ok((params, cc, ck.meta))
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("opt")
}

fn save_optimizer(path: &Path, params: &ParamSet<f32>, st: &OptimizerState) -> Result<()> {
    let cfg = params.config();
    let wrap = |data: &Vec<f32>| Params {
        cfg: cfg.clone(),
        layout: params.slots()[0].layout.clone(),
        data: data.clone(),
    };
    let mut owned = Vec::new();
    for (i, g) in params.group_names().iter().enumerate() {
        owned.push((format!("m_{g}"), wrap(&st.m[i])));
        owned.push((format!("v_{g}"), wrap(&st.v[i])));
    }
    let groups: Vec<(&str, &Params<f32>)> = owned.iter().map(|(n, p)| (n.as_str(), p)).collect();
    let meta = CheckpointMeta {
        step: st.step,
        ..Default::default()
    };
    write_tensor_file(path, cfg, &meta, &groups)
}

fn load_optimizer(path: &Path, params: &ParamSet<f32>) -> Result<OptimizerState> {
    let ck = read_tensor_file(path)?;
    let mut st = OptimizerState::new(params);
    for (i, g) in params.group_names().iter().enumerate() {
        let want = st.m[i].len();
        let get = |k: &str| {
            ck.group(&format!("{k}_{g}"))
                .filter(|p| p.data.len() == want)
                .map(|p| p.data.clone())
                .ok_or_else(|| Error::parse(path.display().to_string(), format!("missing moments for {g}")))
        };
        st.m[i] = get("m")?;
        st.v[i] = get("v")?;
    }
    st.step = ck.meta.step;
    Ok(st)
}

/// Trains from a fresh initialization (seeded by `tc.seed`) or from
/// `opts.resume`. Dev loss is evaluated at every log point and the
/// parameters with the lowest dev loss are kept as `best.ckpt`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    cc: &ChainConfig,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    vocab: &Vocab,
    examples: &[SubDialogueExample],
    dev: &[SubDialogueExample],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    cc.validate()?;
    cfg.validate()?;
    tc.validate()?;
    if examples.is_empty() {
        return Err(Error::Argument("no training examples".into()));
    }
    if cfg.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocab_size {} differs from vocabulary size {}",
            cfg.vocab_size,
            vocab.len()
        )));
    }
    let train_enc = encode_all(cc, examples, vocab)?;
    let dev_enc = encode_all(cc, dev, vocab)?;
    for e in train_enc.iter().chain(&dev_enc) {
        if e.total_len() > cfg.max_positions {
            return Err(Error::Capacity(format!(
                "example {} encodes to {} tokens, max_positions is {}",
                e.id,
                e.total_len(),
                cfg.max_positions
            )));
        }
    }

    let (mut params, mut state) = match &opts.resume {
        Some(path) => {
            let (p, stored_cc, _) = load_params(path, Some(cfg))?;
            if &stored_cc != cc {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with chain config {stored_cc:?}",
                    path.display()
                )));
            }
            let st = load_optimizer(&sidecar(path), &p)?;
            (p, st)
        }
        None => {
            let p = ParamSet::init(cc, cfg, tc.seed);
            let st = OptimizerState::new(&p);
            (p, st)
        }
    };
    let start_step = state.step;
    if start_step >= tc.total_steps {
        return Err(Error::Config(format!(
            "checkpoint is at step {start_step}, nothing left of {} total steps",
            tc.total_steps
        )));
    }

    let out_dir = opts.out_dir.as_deref();
    let mut log_file = match out_dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let path = d.join("train_log.csv");
            let append = opts.resume.is_some() && path.exists();
            let mut f = fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if !append {
                writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let best_path = out_dir.map(|d| d.join("best.ckpt"));
    let last_path = out_dir.map(|d| d.join("last.ckpt"));

    let n = train_enc.len();
    let log_every = if tc.log_every == 0 { n.div_ceil(tc.batch_size) } else { tc.log_every };
    let mut sched = Schedule::new(n, tc.seed);
    let clock = Instant::now();
    let mut log = Vec::new();
    let (mut best_dev, mut best_step, mut best_saved) = (None::<f64>, None, None);
    let (mut acc_l, mut acc_a, mut acc_q, mut acc_n) = (0.0, 0.0, 0.0, 0usize);

    let end = opts.stop_at.unwrap_or(tc.total_steps).min(tc.total_steps);
    for step in start_step + 1..=end {
        let batch: Vec<usize> = (0..tc.batch_size)
            .map(|j| sched.draw((step - 1) * tc.batch_size + j))
            .collect();
        let outs: Vec<_> = batch
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let mut r = rng::derived(tc.seed, step as u64, j as u64);
                flow_forward_encoded(&params, &train_enc[i], Mode::Train(&mut r), true)
            })
            .collect();
        let mut grads: Option<ParamSet<f32>> = None;
        let mut batch_loss = 0.0;
        for o in outs {
            let o = match o {
                Ok(o) => o,
                Err(Error::Numeric { .. }) => {
                    return Err(Error::Diverged { step, last_good: best_saved.clone() });
                }
                Err(e) => return Err(e),
            };
            batch_loss += o.loss;
            acc_a += o.loss_a;
            acc_q += o.loss_q;
            let g = o.grads.expect("gradients requested");
            match &mut grads {
                None => grads = Some(g),
                Some(total) => {
                    for (t, s) in total.slots_mut().into_iter().zip(g.slots()) {
                        t.add_assign(s);
                    }
                }
            }
        }
        if !batch_loss.is_finite() {
            return Err(Error::Diverged { step, last_good: best_saved.clone() });
        }
        acc_l += batch_loss;
        acc_n += batch.len();
        let mut grads = grads.expect("non-empty batch");
        let inv = 1.0 / batch.len() as f32;
        grads.slots_mut().into_iter().for_each(|g| g.scale(inv));
        let lr = lr_at(step, tc);
        match adamw_step(&mut params, &mut state, &grads, lr, tc) {
            Ok(_) => {}
            Err(Error::NonFiniteGradient(name)) => {
                warn!("non-finite gradient in {name} at step {step}");
                return Err(Error::Diverged { step, last_good: best_saved.clone() });
            }
            Err(e) => return Err(e),
        }
        if !params.slots().iter().all(|p| p.all_finite()) {
            return Err(Error::Diverged { step, last_good: best_saved.clone() });
        }

        if step % log_every == 0 || step == end {
            let dev_loss = if dev_enc.is_empty() {
                None
            } else {
                Some(evaluate_encoded(&params, &dev_enc)?.mean_loss)
            };
            let k = acc_n.max(1) as f64;
            let row = LogRow {
                step,
                lr,
                train_loss: acc_l / k,
                loss_a: acc_a / k,
                loss_q: acc_q / k,
                dev_loss,
                wall_time_s: clock.elapsed().as_secs_f64(),
            };
            (acc_l, acc_a, acc_q, acc_n) = (0.0, 0.0, 0.0, 0);
            info!(
                "step {step} lr {lr:.3e} train {:.4} dev {}",
                row.train_loss,
                dev_loss.map(|d| format!("{d:.4}")).unwrap_or_else(|| "-".into())
            );
            if let Some((f, path)) = &mut log_file {
                writeln!(f, "{}", row.csv()).map_err(|e| Error::io(&*path, e))?;
            }
            let score = dev_loss.unwrap_or(row.train_loss);
            if best_dev.is_none_or(|b| score < b) {
                best_dev = Some(score);
                best_step = Some(step);
                if let Some(p) = &best_path {
                    let meta = CheckpointMeta {
                        step,
                        train_loss: Some(row.train_loss),
                        dev_loss,
                        extra: serde_json::Value::Null,
                    };
                    save_params(p, &params, cc, meta)?;
                    best_saved = Some(p.clone());
                }
            }
            log.push(row);
        }
    }

    if let Some(p) = &last_path {
        let last = log.last();
        let meta = CheckpointMeta {
            step: state.step,
            train_loss: last.map(|r| r.train_loss),
            dev_loss: last.and_then(|r| r.dev_loss),
            extra: serde_json::Value::Null,
        };
        save_params(p, &params, cc, meta)?;
        save_optimizer(&sidecar(p), &params, &state)?;
    }
    Ok(TrainReport {
        params,
        log,
        best_dev_loss: best_dev,
        best_step,
        best_checkpoint: best_saved,
        last_checkpoint: last_path,
    })
}

/// One compared coordinate of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub samples: Vec<GradSample>,
}

impl GradCheck {
    pub fn worst(&self) -> Option<&GradSample> {
        self.samples.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares analytic chain gradients with central differences on
/// `n_samples` parameters, in f64 with dropout off. Coordinates are drawn
/// by picking a tensor, then an entry, so small tensors are checked too.
pub fn grad_check(
    cc: &ChainConfig,
    cfg: &ModelConfig,
    ex: &SubDialogueExample,
    vocab: &Vocab,
    n_samples: usize,
    step_size: f64,
    seed: u64,
) -> Result<GradCheck> {
    let mut cfg = cfg.clone();
    cfg.dropout = 0.0;
    let params = ParamSet::<f64>::init(cc, &cfg, seed);
    grad_check_params(cc, &params, ex, vocab, n_samples, step_size, seed)
}

pub fn grad_check_params(
    cc: &ChainConfig,
    params: &ParamSet<f64>,
    ex: &SubDialogueExample,
    vocab: &Vocab,
    n_samples: usize,
    step_size: f64,
    seed: u64,
) -> Result<GradCheck> {
    let out = flow_forward(cc, params, ex, vocab, Mode::Eval, true)?;
    let grads = out.grads.expect("gradients requested");
    let mut r = rng::derived(seed, 0x6C4E, 0);
    let names = params.group_names();
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let slot = r.random_range(0..names.len());
        let layout = params.slots()[slot].layout.clone();
        let t = &layout.tensors[r.random_range(0..layout.tensors.len())];
        let i = t.offset + r.random_range(0..t.len());
        let eval = |delta: f64| -> Result<f64> {
            let mut p = params.clone();
            p.slots_mut()[slot].data[i] += delta;
            Ok(flow_forward(cc, &p, ex, vocab, Mode::Eval, false)?.loss)
        };
        let numeric = (eval(step_size)? - eval(-step_size)?) / (2.0 * step_size);
        let analytic = grads.slots()[slot].data[i];
        samples.push(GradSample {
            name: format!("{}.{}[{}]", names[slot], t.name, i - t.offset),
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = samples.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    Ok(GradCheck { max_rel_error, samples })
}

/// Scale below which a gradient cannot be told apart from the rounding
/// noise of a central difference (about `1e-16 · loss / h`, i.e. ~1e-12 at
/// `h = 1e-3`). Some gradients are exactly zero, e.g. key biases, which
/// shift every attention score of a query equally.
pub const GRAD_NOISE_FLOOR: f64 = 1e-8;

/// `|a − b| / max(|a| + |b|, GRAD_NOISE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(GRAD_NOISE_FLOOR)
}
