use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use super::{ModelConfig, Scalar};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    TokenEmbedding,
    PositionEmbedding,
    Weight,
    Bias,
    NormGain,
    NormBias,
}

impl TensorKind {
    /// Decoupled weight decay skips layer norms and position embeddings.
    pub fn decays(self) -> bool {
        matches!(self, TensorKind::TokenEmbedding | TensorKind::Weight | TensorKind::Bias)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: TensorKind,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of one block's tensors in the flat parameter vector.
/// Projection matrices are stored input-major (`in × out`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub wte: usize,
    pub wpe: usize,
    pub layers: Vec<LayerIdx>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub len: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let mut tensors = Vec::new();
        let mut off = 0;
        let mut add = |name: String, shape: Vec<usize>, kind: TensorKind| {
            let start = off;
            let info = TensorInfo {
                name,
                shape,
                offset: start,
                kind,
            };
            off += info.len();
            tensors.push(info);
            start
        };
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let wte = add("wte".into(), vec![cfg.vocab_size, d], TensorKind::TokenEmbedding);
        let wpe = add("wpe".into(), vec![cfg.max_positions, d], TensorKind::PositionEmbedding);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let mut t = |suffix: &str, shape: Vec<usize>, kind| add(format!("h.{l}.{suffix}"), shape, kind);
            use TensorKind::*;
            layers.push(LayerIdx {
                ln1_g: t("ln_1.g", vec![d], NormGain),
                ln1_b: t("ln_1.b", vec![d], NormBias),
                wq: t("attn.q.w", vec![d, d], Weight),
                bq: t("attn.q.b", vec![d], Bias),
                wk: t("attn.k.w", vec![d, d], Weight),
                bk: t("attn.k.b", vec![d], Bias),
                wv: t("attn.v.w", vec![d, d], Weight),
                bv: t("attn.v.b", vec![d], Bias),
                wo: t("attn.o.w", vec![d, d], Weight),
                bo: t("attn.o.b", vec![d], Bias),
                ln2_g: t("ln_2.g", vec![d], NormGain),
                ln2_b: t("ln_2.b", vec![d], NormBias),
                w1: t("mlp.fc.w", vec![d, f], Weight),
                b1: t("mlp.fc.b", vec![f], Bias),
                w2: t("mlp.proj.w", vec![f, d], Weight),
                b2: t("mlp.proj.b", vec![d], Bias),
            });
        }
        let lnf_g = add("ln_f.g".into(), vec![d], TensorKind::NormGain);
        let lnf_b = add("ln_f.b".into(), vec![d], TensorKind::NormBias);
        Layout {
            tensors,
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            len: off,
        }
    }

    pub fn find(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Tensor containing flat index `i`.
    pub fn tensor_at(&self, i: usize) -> &TensorInfo {
        let pos = self.tensors.partition_point(|t| t.offset <= i);
        &self.tensors[pos - 1]
    }
}

/// All learnable weights of one model, stored flat in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub cfg: ModelConfig,
    pub layout: Arc<Layout>,
    pub data: Vec<T>,
}

impl<T: Scalar> Params<T> {
    /// Weights and embeddings from N(0, 0.02), biases zero, norm gains one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Params<T> {
        let layout = Arc::new(Layout::new(cfg));
        let mut data = vec![T::zero(); layout.len];
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let mut rng = rng::seeded(seed);
        for t in &layout.tensors {
            let slot = &mut data[t.range()];
            match t.kind {
                TensorKind::TokenEmbedding | TensorKind::PositionEmbedding | TensorKind::Weight => {
                    for x in slot {
                        *x = T::c(normal.sample(&mut rng));
                    }
                }
                TensorKind::NormGain => slot.iter_mut().for_each(|x| *x = T::one()),
                TensorKind::Bias | TensorKind::NormBias => {}
            }
        }
        Params {
            cfg: cfg.clone(),
            layout,
            data,
        }
    }

    pub fn zeros_like(&self) -> Params<T> {
        Params {
            cfg: self.cfg.clone(),
            layout: Arc::clone(&self.layout),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub(crate) fn s(&self, off: usize, len: usize) -> &[T] {
        &self.data[off..off + len]
    }

    pub(crate) fn s_mut(&mut self, off: usize, len: usize) -> &mut [T] {
        &mut self.data[off..off + len]
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.find(name).map(|t| &self.data[t.range()])
    }

    pub fn add_assign(&mut self, other: &Params<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            cfg: self.cfg.clone(),
            layout: Arc::clone(&self.layout),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
