//! `chaincqg` command line: gen-data, preprocess, train, generate,
//! evaluate and ablate.
//!
//! Settings come from an optional JSON run config (`--config`), overridden
//! by flags. Every command writes the resolved config next to its output.
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::ablation::{run_sweep, SweepConfig};
use crate::chain::{generate_records, Ablation, ChainConfig};
use crate::corpus::{generate_synthetic, read_corpus, read_jsonl, split_train_test, write_jsonl};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, PerplexityModel};
use crate::model::{ModelConfig, DEFAULT_MAX_POSITIONS};
use crate::preprocess::{preprocess_dialogue, SubDialogueExample};
use crate::sampler::{SamplerConfig, SamplerMode};
use crate::tokenizer::Vocab;
use crate::trainer::{load_params, train, TrainConfig, TrainOptions};

pub const THREADS_ENV: &str = "CHAINQG_THREADS";

/// Model shape: a named preset with optional per-field overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_model: Option<usize>,
    pub d_ff: Option<usize>,
    pub max_positions: Option<usize>,
    pub dropout: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "small".into(),
            n_layers: None,
            n_heads: None,
            d_model: None,
            d_ff: None,
            max_positions: Some(DEFAULT_MAX_POSITIONS),
            dropout: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::preset(&self.preset, vocab_size)?;
        c.n_layers = self.n_layers.unwrap_or(c.n_layers);
        c.n_heads = self.n_heads.unwrap_or(c.n_heads);
        c.d_model = self.d_model.unwrap_or(c.d_model);
        c.d_ff = self.d_ff.unwrap_or(c.d_ff);
        c.max_positions = self.max_positions.unwrap_or(c.max_positions);
        c.dropout = self.dropout.unwrap_or(c.dropout);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dialogues generated by `gen-data`.
    pub n: usize,
    pub seed: u64,
    /// Largest vocabulary `preprocess`/`ablate` will build.
    pub vocab_size: usize,
    /// Held-out share of dialogues for `ablate` (and `preprocess --test-out`).
    pub test_fraction: f64,
    /// Training epochs; when set, overrides `train.total_steps`.
    pub epochs: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n: 100,
            seed: 0,
            vocab_size: 5000,
            test_fraction: 0.2,
            epochs: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSection {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub examples: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test_out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub generations: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything a run needs, as loaded from `--config` and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub chain: ChainConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DataSection,
    pub paths: PathSection,
    /// Seeds of the ablation sweep.
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSection::default(),
            chain: ChainConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            data: DataSection::default(),
            paths: PathSection::default(),
            seeds: vec![0, 1, 2],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn echo(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::parse("run config", e))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Parser, Debug)]
#[command(name = "chaincqg", version, about = "Chained answer-aware conversational question generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dialogue corpus as JSON Lines.
    GenData(GenDataArgs),
    /// Build the vocabulary and expand dialogues into sub-dialogue examples.
    Preprocess(PreprocessArgs),
    /// Train the chain; writes a log and checkpoints into --out.
    Train(TrainArgs),
    /// Generate the final question of each example.
    Generate(GenerateArgs),
    /// Score generations against gold examples.
    Evaluate(EvaluateArgs),
    /// Train and score the full model and its four ablations per seed.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// JSON run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
pub struct AblationFlags {
    #[arg(long)]
    pub no_history: bool,
    #[arg(long)]
    pub no_highlight: bool,
    #[arg(long)]
    pub no_aq_order: bool,
    #[arg(long)]
    pub no_ae: bool,
    #[arg(long, value_name = "BOOL")]
    pub shared_params: Option<bool>,
}

impl AblationFlags {
    fn apply(&self, cc: &mut ChainConfig) {
        for (on, a) in [
            (self.no_history, Ablation::NoHistory),
            (self.no_highlight, Ablation::NoHighlight),
            (self.no_aq_order, Ablation::NoAqOrder),
            (self.no_ae, Ablation::NoAe),
        ] {
            if on {
                cc.ablations.insert(a);
            }
        }
        if let Some(s) = self.shared_params {
            cc.shared_params = s;
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct SamplerFlags {
    #[arg(long)]
    pub greedy: bool,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

impl SamplerFlags {
    fn apply(&self, sc: &mut SamplerConfig) {
        if self.greedy {
            sc.mode = SamplerMode::Greedy;
        }
        if let Some(v) = self.top_p {
            sc.top_p = v;
        }
        if let Some(v) = self.top_k {
            sc.top_k = v;
        }
        if let Some(v) = self.temperature {
            sc.temperature = v;
        }
        if let Some(v) = self.max_new_tokens {
            sc.max_new_tokens = v;
        }
    }
}

#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

impl TrainFlags {
    fn apply(&self, rc: &mut RunConfig) {
        if let Some(p) = &self.preset {
            rc.model.preset = p.clone();
        }
        if let Some(s) = self.steps {
            rc.train.total_steps = s;
            rc.data.epochs = None;
        }
        if let Some(e) = self.epochs {
            rc.data.epochs = Some(e);
        }
        if let Some(b) = self.batch_size {
            rc.train.batch_size = b;
        }
        if let Some(lr) = self.lr {
            rc.train.learning_rate = lr;
        }
        if let Some(d) = self.dropout {
            rc.model.dropout = Some(d);
        }
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of dialogues.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Vocabulary file to write.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Also hold out dialogues into this file (vocabulary from the rest).
    #[arg(long)]
    pub test_out: Option<PathBuf>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[command(flatten)]
    pub ablations: AblationFlags,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Preprocessed training examples.
    #[arg(long)]
    pub examples: Option<PathBuf>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Resume from this checkpoint (and its .opt sidecar).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub ablations: AblationFlags,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub examples: Option<PathBuf>,
    #[command(flatten)]
    pub sampler: SamplerFlags,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub generations: Option<PathBuf>,
    /// Preprocessed examples holding the gold questions.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Adds perplexity of the gold questions (needs --vocab).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dialogue corpus, split into train and held-out dialogues.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    #[arg(long, value_name = "BOOL")]
    pub shared_params: Option<bool>,
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut rc = match &common.config {
        Some(p) => {
            require_input(p, "--config")?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        rc.data.seed = s;
        rc.train.seed = s;
        rc.sampler.seed = s;
    }
    if let Some(o) = &common.out {
        rc.paths.out = Some(o.clone());
    }
    Ok(rc)
}

fn set(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if let Some(p) = flag {
        *slot = Some(p.clone());
    }
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Argument(format!("{flag} is required")))
}

fn require_input<'a>(p: &'a Path, flag: &str) -> Result<&'a Path> {
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::Argument(format!("{flag} {} does not exist", p.display())))
    }
}

fn require_input_opt<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    require_input(require(p, flag)?, flag)
}

/// `dir/name.jsonl` → `dir/name.config.json`.
fn echo_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.config.json"))
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let mut rc = base_config(&a.common)?;
    if let Some(n) = a.n {
        rc.data.n = n;
    }
    if rc.data.n == 0 {
        return Err(Error::Argument("--n must be at least 1".into()));
    }
    let out = require(&rc.paths.out, "--out")?.to_path_buf();
    let dialogues = generate_synthetic(rc.data.n, rc.data.seed)?;
    write_jsonl(&out, &dialogues)?;
    rc.echo(&echo_path(&out))?;
    println!("wrote {} dialogues to {}", dialogues.len(), out.display());
    Ok(())
}

fn expand(dialogues: &[crate::corpus::Dialogue], cc: &ChainConfig) -> Result<Vec<SubDialogueExample>> {
    let opts = cc.input_options();
    let mut out = Vec::new();
    for d in dialogues {
        out.extend(preprocess_dialogue(d, opts)?);
    }
    Ok(out)
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    let mut rc = base_config(&a.common)?;
    set(&mut rc.paths.corpus, &a.corpus);
    set(&mut rc.paths.vocab, &a.vocab);
    set(&mut rc.paths.test_out, &a.test_out);
    if let Some(v) = a.vocab_size {
        rc.data.vocab_size = v;
    }
    if let Some(f) = a.test_fraction {
        rc.data.test_fraction = f;
    }
    a.ablations.apply(&mut rc.chain);
    let corpus = require_input_opt(&rc.paths.corpus, "--corpus")?;
    let out = require(&rc.paths.out, "--out")?.to_path_buf();
    let vocab_path = rc
        .paths
        .vocab
        .clone()
        .unwrap_or_else(|| out.with_file_name("vocab.txt"));
    rc.paths.vocab = Some(vocab_path.clone());

    let dialogues = read_corpus(corpus)?;
    let (train_d, test_d) = match &rc.paths.test_out {
        Some(_) => split_train_test(&dialogues, rc.data.test_fraction, rc.data.seed)?,
        None => (dialogues, Vec::new()),
    };
    let vocab = Vocab::build(&train_d, rc.data.vocab_size)?;
    vocab.save(&vocab_path)?;
    let examples = expand(&train_d, &rc.chain)?;
    write_jsonl(&out, &examples)?;
    println!("wrote {} examples to {} (vocabulary {} tokens)", examples.len(), out.display(), vocab.len());
    if let Some(t) = &rc.paths.test_out {
        let held = expand(&test_d, &rc.chain)?;
        write_jsonl(t, &held)?;
        println!("wrote {} held-out examples to {}", held.len(), t.display());
    }
    rc.echo(&echo_path(&out))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut rc = base_config(&a.common)?;
    set(&mut rc.paths.examples, &a.examples);
    set(&mut rc.paths.dev, &a.dev);
    set(&mut rc.paths.vocab, &a.vocab);
    set(&mut rc.paths.checkpoint, &a.checkpoint);
    a.train.apply(&mut rc);
    a.ablations.apply(&mut rc.chain);
    rc.chain.validate()?;
    let out = require(&rc.paths.out, "--out")?.to_path_buf();
    let vocab = Vocab::load(require_input_opt(&rc.paths.vocab, "--vocab")?)?;
    let examples: Vec<SubDialogueExample> = read_jsonl(require_input_opt(&rc.paths.examples, "--examples")?)?;
    let dev: Vec<SubDialogueExample> = match &rc.paths.dev {
        Some(p) => read_jsonl(require_input(p, "--dev")?)?,
        None => Vec::new(),
    };
    if let Some(c) = &rc.paths.checkpoint {
        require_input(c, "--checkpoint")?;
    }
    let cfg = rc.model.resolve(vocab.len())?;
    if let Some(e) = rc.data.epochs {
        rc.train.total_steps = rc.train.steps_for_epochs(e, examples.len());
    }
    rc.echo(&out.join("resolved_config.json"))?;
    info!("training {} examples for {} steps", examples.len(), rc.train.total_steps);
    let report = train(
        &rc.chain,
        &cfg,
        &rc.train,
        &vocab,
        &examples,
        &dev,
        &TrainOptions {
            out_dir: Some(out.clone()),
            resume: rc.paths.checkpoint.clone(),
            stop_at: None,
        },
    )?;
    if let Some(last) = report.log.last() {
        println!(
            "step {} train_loss {:.4} dev_loss {}",
            last.step,
            last.train_loss,
            last.dev_loss.map(|d| format!("{d:.4}")).unwrap_or_else(|| "-".into())
        );
    }
    println!("checkpoints in {}", out.display());
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let mut rc = base_config(&a.common)?;
    set(&mut rc.paths.checkpoint, &a.checkpoint);
    set(&mut rc.paths.vocab, &a.vocab);
    set(&mut rc.paths.examples, &a.examples);
    a.sampler.apply(&mut rc.sampler);
    rc.sampler.validate()?;
    let ckpt = require_input_opt(&rc.paths.checkpoint, "--checkpoint")?;
    let vocab = Vocab::load(require_input_opt(&rc.paths.vocab, "--vocab")?)?;
    let examples: Vec<SubDialogueExample> = read_jsonl(require_input_opt(&rc.paths.examples, "--examples")?)?;
    let out = require(&rc.paths.out, "--out")?.to_path_buf();
    let (params, cc, _) = load_params(ckpt, None)?;
    if params.config().vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "checkpoint vocabulary {} differs from --vocab {}",
            params.config().vocab_size,
            vocab.len()
        )));
    }
    rc.chain = cc.clone();
    let records = generate_records(&cc, &params, &examples, &vocab, &rc.sampler)?;
    write_jsonl(&out, &records)?;
    rc.echo(&echo_path(&out))?;
    let truncated = records.iter().filter(|r| r.truncated).count();
    println!("wrote {} generations to {} ({truncated} truncated)", records.len(), out.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let mut rc = base_config(&a.common)?;
    set(&mut rc.paths.generations, &a.generations);
    set(&mut rc.paths.gold, &a.gold);
    set(&mut rc.paths.checkpoint, &a.checkpoint);
    set(&mut rc.paths.vocab, &a.vocab);
    let gens = require_input_opt(&rc.paths.generations, "--generations")?;
    let gold = require_input_opt(&rc.paths.gold, "--gold")?;
    let model = match &rc.paths.checkpoint {
        Some(c) => {
            let (params, cc, _) = load_params(require_input(c, "--checkpoint")?, None)?;
            let vocab = Vocab::load(require_input_opt(&rc.paths.vocab, "--vocab")?)?;
            Some((params, cc, vocab))
        }
        None => None,
    };
    let report = evaluate(
        gens,
        gold,
        model.as_ref().map(|(p, c, v)| PerplexityModel {
            params: p,
            chain: c,
            vocab: v,
        }),
    )?;
    print!("{report}");
    if let Some(out) = &rc.paths.out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::parse("report", e))?;
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(out, json + "\n").map_err(|e| Error::io(out, e))?;
        rc.echo(&echo_path(out))?;
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut rc = base_config(&a.common)?;
    set(&mut rc.paths.corpus, &a.corpus);
    if let Some(s) = &a.seeds {
        rc.seeds = s.clone();
    }
    if let Some(s) = a.shared_params {
        rc.chain.shared_params = s;
    }
    a.train.apply(&mut rc);
    a.sampler.apply(&mut rc.sampler);
    rc.sampler.validate()?;
    if !rc.chain.ablations.is_empty() {
        return Err(Error::Config("the ablation sweep's base chain config must have no ablations".into()));
    }
    let corpus = require_input_opt(&rc.paths.corpus, "--corpus")?;
    let out = require(&rc.paths.out, "--out")?.to_path_buf();
    let dialogues = read_corpus(corpus)?;
    let (train_d, test_d) = split_train_test(&dialogues, rc.data.test_fraction, rc.data.seed)?;
    let vocab = Vocab::build(&train_d, rc.data.vocab_size)?;
    // Ablations are applied inside the chain, so examples are built once.
    let train_set = expand(&train_d, &ChainConfig::default())?;
    let test_set = expand(&test_d, &ChainConfig::default())?;
    let cfg = rc.model.resolve(vocab.len())?;
    if let Some(e) = rc.data.epochs {
        rc.train.total_steps = rc.train.steps_for_epochs(e, train_set.len());
    }
    rc.echo(&out.join("resolved_config.json"))?;
    let sc = SweepConfig {
        model: cfg,
        chain: rc.chain.clone(),
        train: rc.train.clone(),
        sampler: rc.sampler.clone(),
        seeds: rc.seeds.clone(),
    };
    let table = run_sweep(&sc, &vocab, &train_set, &test_set)?;
    let text = table.render();
    fs::write(out.join("ablation_table.txt"), &text).map_err(|e| Error::io(out.join("ablation_table.txt"), e))?;
    let json = serde_json::to_string_pretty(&table).map_err(|e| Error::parse("ablation table", e))?;
    fs::write(out.join("ablation_table.json"), json + "\n").map_err(|e| Error::io(out.join("ablation_table.json"), e))?;
    print!("{text}");
    Ok(())
}

/// Exit status for an error: 1 for bad input or configuration, 2 for
/// failures while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Argument(_) | Error::Config(_) | Error::Validation(_) | Error::Parse { .. } => 1,
        _ => 2,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A pool may already exist when called twice in one process (tests).
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<(), (i32, String)>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            return Err((code, e.render().to_string()));
        }
    };
    let result = configure_threads().and_then(|_| match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
    });
    result.map_err(|e| (exit_code(&e), format!("error: {e}")))
}

pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    match run(std::env::args_os()) {
        Ok(()) => 0,
        Err((0, msg)) => {
            print!("{msg}");
            0
        }
        Err((code, msg)) => {
            eprintln!("{msg}");
            if code == 1 {
                eprintln!("run `chaincqg --help` for usage");
            }
            code
        }
    }
}
