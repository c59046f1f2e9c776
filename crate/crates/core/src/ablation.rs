//! Sweep of the full chain against its four single-ablation variants.
//!
//! Every variant trains under the same budget and seeds, generates the
//! final question of each held-out example and is scored against gold.

use std::fmt::Write as _;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::chain::{generate_records, Ablation, ChainConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_records, MetricReport};
use crate::model::ModelConfig;
use crate::preprocess::SubDialogueExample;
use crate::sampler::SamplerConfig;
use crate::tokenizer::Vocab;
use crate::trainer::{train, TrainConfig, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    Without(Ablation),
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::Without(Ablation::NoHistory),
        Variant::Without(Ablation::NoHighlight),
        Variant::Without(Ablation::NoAqOrder),
        Variant::Without(Ablation::NoAe),
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Without(Ablation::NoHistory) => "w/o history",
            Variant::Without(Ablation::NoHighlight) => "w/o highlight",
            Variant::Without(Ablation::NoAqOrder) => "w/o AQ order",
            Variant::Without(Ablation::NoAe) => "w/o AE module",
        }
    }

    pub fn chain_config(self, base: &ChainConfig) -> ChainConfig {
        let mut cc = base.clone();
        if let Variant::Without(a) = self {
            cc.ablations.insert(a);
            // The single-module variant always shares its one parameter set.
            if a == Ablation::NoAe {
                cc.shared_params = true;
            }
        }
        cc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub model: ModelConfig,
    pub chain: ChainConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: Variant,
    pub label: String,
    pub seed: u64,
    /// `None` when training failed.
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Per-variant mean over successful seeds, in variant order.
    pub means: Vec<SweepRow>,
}

impl SweepTable {
    pub fn mean(&self, v: Variant) -> Option<&MetricReport> {
        self.means.iter().find(|r| r.variant == v).and_then(|r| r.report.as_ref())
    }

    /// Text table: one row per (variant, seed), then one mean row per variant.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", MetricReport::table_header());
        let rows = self.rows.iter().map(|r| (r, format!("{} s{}", r.label, r.seed)));
        let means = self.means.iter().map(|r| (r, format!("{} mean", r.label)));
        for (r, label) in rows.chain(means) {
            match &r.report {
                Some(m) => {
                    let _ = writeln!(s, "{}", m.table_row(&label));
                }
                None => {
                    let why = r.error.as_deref().unwrap_or("no successful seed");
                    let _ = writeln!(s, "{label:<18} FAILED: {why}");
                }
            }
        }
        s
    }
}

fn mean_report(reports: &[&MetricReport]) -> Option<MetricReport> {
    let first = reports.first()?;
    let k = reports.len() as f64;
    let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / k;
    let ppl: Option<Vec<f64>> = reports.iter().map(|r| r.perplexity).collect();
    Some(MetricReport {
        bleu1: avg(|r| r.bleu1),
        bleu2: avg(|r| r.bleu2),
        bleu3: avg(|r| r.bleu3),
        bleu4: avg(|r| r.bleu4),
        rouge_l: avg(|r| r.rouge_l),
        meteor_lite: avg(|r| r.meteor_lite),
        perplexity: ppl.map(|p| p.iter().sum::<f64>() / k),
        n_examples: first.n_examples,
        notes: first.notes.clone(),
    })
}

/// Trains and scores one variant for one seed.
pub fn run_variant(
    sc: &SweepConfig,
    variant: Variant,
    seed: u64,
    vocab: &Vocab,
    train_set: &[SubDialogueExample],
    test_set: &[SubDialogueExample],
) -> Result<MetricReport> {
    let cc = variant.chain_config(&sc.chain);
    let tc = TrainConfig {
        seed,
        ..sc.train.clone()
    };
    let report = train(&cc, &sc.model, &tc, vocab, train_set, &[], &TrainOptions::default())?;
    let sampler = SamplerConfig {
        seed,
        ..sc.sampler.clone()
    };
    let gens = generate_records(&cc, &report.params, test_set, vocab, &sampler)?;
    evaluate_records(&gens, test_set, None)
}

/// Runs every variant for every seed. A failed variant is recorded and the
/// sweep moves on.
pub fn run_sweep(
    sc: &SweepConfig,
    vocab: &Vocab,
    train_set: &[SubDialogueExample],
    test_set: &[SubDialogueExample],
) -> Result<SweepTable> {
    if sc.seeds.is_empty() {
        return Err(Error::Config("ablation sweep needs at least one seed".into()));
    }
    if test_set.is_empty() {
        return Err(Error::Argument("ablation sweep needs held-out examples".into()));
    }
    let mut rows = Vec::new();
    for &seed in &sc.seeds {
        for v in Variant::ALL {
            info!("ablation: {} seed {seed}", v.label());
            let (report, error) = match run_variant(sc, v, seed, vocab, train_set, test_set) {
                Ok(r) => (Some(r), None),
                Err(e @ (Error::Diverged { .. } | Error::Numeric { .. } | Error::NonFiniteGradient(_))) => {
                    warn!("variant {} seed {seed} failed: {e}", v.label());
                    (None, Some(e.to_string()))
                }
                Err(e) => return Err(e),
            };
            rows.push(SweepRow {
                variant: v,
                label: v.label().to_string(),
                seed,
                report,
                error,
            });
        }
    }
    let means = Variant::ALL
        .iter()
        .map(|&v| {
            let ok: Vec<&MetricReport> = rows
                .iter()
                .filter(|r| r.variant == v)
                .filter_map(|r| r.report.as_ref())
                .collect();
            SweepRow {
                variant: v,
                label: v.label().to_string(),
                seed: 0,
                report: mean_report(&ok),
                error: None,
            }
        })
        .collect();
    Ok(SweepTable { rows, means })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_synthetic;
    use crate::preprocess::expand_subdialogues;

    #[test]
    fn table_bookkeeping() {
        let ds = generate_synthetic(6, 2).unwrap();
        let vocab = Vocab::build(&ds, 500).unwrap();
        let ex: Vec<_> = ds.iter().flat_map(|d| expand_subdialogues(d).unwrap()).collect();
        let (train_set, test_set) = ex.split_at(ex.len() - 4);
        let sc = SweepConfig {
            model: ModelConfig {
                n_layers: 1,
                n_heads: 1,
                d_model: 8,
                d_ff: 16,
                vocab_size: vocab.len(),
                max_positions: 256,
                dropout: 0.0,
            },
            chain: ChainConfig::default(),
            train: TrainConfig {
                total_steps: 2,
                batch_size: 2,
                learning_rate: 1e-3,
                ..Default::default()
            },
            sampler: SamplerConfig {
                max_new_tokens: 4,
                ..SamplerConfig::greedy()
            },
            seeds: vec![0, 1],
        };
        let t = run_sweep(&sc, &vocab, train_set, test_set).unwrap();
        assert_eq!(t.rows.len(), 10);
        assert_eq!(t.means.len(), 5);
        assert!(t.mean(Variant::Full).is_some());
        let text = t.render();
        assert_eq!(text.lines().count(), 1 + 10 + 5);
        assert_eq!(run_sweep(&sc, &vocab, train_set, test_set).unwrap(), t);
    }

    #[test]
    fn no_ae_variant_forces_shared() {
        let base = ChainConfig {
            shared_params: false,
            ..Default::default()
        };
        let cc = Variant::Without(Ablation::NoAe).chain_config(&base);
        assert!(cc.shared_params);
        assert!(cc.validate().is_ok());
        assert!(!Variant::Full.chain_config(&base).shared_params);
    }
}
