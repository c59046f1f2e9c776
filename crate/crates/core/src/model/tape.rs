use rand::Rng as _;

use super::scalar::{mm, mm_at_acc, mm_bt};
use super::{Mode, ModelConfig, Params, Scalar};
use crate::error::{Error, Result};
use crate::rng::Rng;

const LN_EPS: f64 = 1e-5;

/// Per-layer keys and values of every position fed so far, `len × d_model`
/// each, heads laid out contiguously within a row.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T> {
    d_model: usize,
    len: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        KvCache {
            d_model: cfg.d_model,
            len: 0,
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self, layer: usize) -> &[T] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[T] {
        &self.values[layer]
    }

    fn consistent(&self) -> bool {
        self.keys
            .iter()
            .chain(&self.values)
            .all(|k| k.len() == self.len * self.d_model)
    }
}

struct LayerTrace<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    /// `n_heads × n × total`, zero beyond the causal limit.
    probs: Vec<T>,
    att: Vec<T>,
    drop_o: Option<Vec<T>>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    h2: Vec<T>,
    f: Vec<T>,
    g: Vec<T>,
    drop_y: Option<Vec<T>>,
}

struct CallTrace<T> {
    slot: usize,
    ids: Vec<u32>,
    start: usize,
    drop_emb: Option<Vec<T>>,
    layers: Vec<LayerTrace<T>>,
    rows: Vec<usize>,
    xhatf: Vec<T>,
    rstdf: Vec<T>,
    hf: Vec<T>,
}

fn layer_norm<T: Scalar>(x: &[T], d: usize, gain: &[T], bias: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = x.len() / d;
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n];
    let mut y = vec![T::zero(); x.len()];
    let dn = T::c(d as f64);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let r = T::one() / (var + T::c(LN_EPS)).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = h * gain[j] + bias[j];
        }
    }
    (xhat, rstd, y)
}

/// Adds the input gradient of one layer-norm row to `dx`, accumulating
/// gain and bias gradients.
#[allow(clippy::too_many_arguments)]
fn layer_norm_back<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: T,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
) {
    let d = dy.len();
    let dn = T::c(d as f64);
    let mut sum_dxhat = T::zero();
    let mut sum_dxhat_xhat = T::zero();
    for j in 0..d {
        let g = dy[j] * gain[j];
        sum_dxhat += g;
        sum_dxhat_xhat += g * xhat[j];
        dgain[j] += dy[j] * xhat[j];
        dbias[j] += dy[j];
    }
    let (m1, m2) = (sum_dxhat / dn, sum_dxhat_xhat / dn);
    for j in 0..d {
        dx[j] += rstd * (dy[j] * gain[j] - m1 - xhat[j] * m2);
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::c(0.044715) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::c((2.0 / std::f64::consts::PI).sqrt());
    let u = k * (x + T::c(0.044715) * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::c(3.0 * 0.044715) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
}

fn add_bias<T: Scalar>(y: &mut [T], b: &[T]) {
    for row in y.chunks_mut(b.len()) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
}

fn col_sum_acc<T: Scalar>(dy: &[T], db: &mut [T]) {
    for row in dy.chunks(db.len()) {
        for (g, &v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
}

fn dropout<T: Scalar>(x: &mut [T], p: f64, rng: Option<&mut Rng>) -> Option<Vec<T>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = T::c(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    for (v, &m) in x.iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

fn apply_mask<T: Scalar>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

fn check_finite<T: Scalar>(x: &[T], layer: usize, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer,
            what: what.to_string(),
        })
    }
}

/// Runs one call over `ids`, appending to `cache`, and returns logits for
/// the requested local rows (`rows.len() × vocab_size`).
fn run_call<T: Scalar>(
    p: &Params<T>,
    cache: &mut KvCache<T>,
    ids: &[u32],
    rows: &[usize],
    mode: &mut Mode<'_>,
    slot: usize,
    record: bool,
) -> Result<(Vec<T>, Option<CallTrace<T>>)> {
    let cfg = &p.cfg;
    let lay = &*p.layout;
    let (d, ff, vocab) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let (nh, dh) = (cfg.n_heads, cfg.d_head());
    let n = ids.len();
    let c = cache.len;
    let total = c + n;
    if n == 0 {
        return Err(Error::Argument("forward needs at least one token".into()));
    }
    if total > cfg.max_positions {
        return Err(Error::Capacity(format!(
            "{c} cached + {n} new positions exceed max_positions {}",
            cfg.max_positions
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Argument(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= n) {
        return Err(Error::Argument(format!("logit row {r} outside call of {n} tokens")));
    }
    debug_assert!(cache.consistent());
    let pdrop = cfg.dropout;
    let mut rng: Option<&mut Rng> = match mode {
        Mode::Train(r) if pdrop > 0.0 => Some(&mut **r),
        _ => None,
    };

    let mut x = vec![T::zero(); n * d];
    let wte = p.s(lay.wte, vocab * d);
    let wpe = p.s(lay.wpe, cfg.max_positions * d);
    for (i, &id) in ids.iter().enumerate() {
        let (tok, pos) = (&wte[id as usize * d..][..d], &wpe[(c + i) * d..][..d]);
        for j in 0..d {
            x[i * d + j] = tok[j] + pos[j];
        }
    }
    let drop_emb = dropout(&mut x, pdrop, rng.as_deref_mut());

    let scale = T::c(1.0 / (dh as f64).sqrt());
    let mut layers = Vec::with_capacity(if record { cfg.n_layers } else { 0 });
    for (l, li) in lay.layers.iter().enumerate() {
        let (xhat1, rstd1, h1) = layer_norm(&x, d, p.s(li.ln1_g, d), p.s(li.ln1_b, d));
        let mut q = vec![T::zero(); n * d];
        let mut k = vec![T::zero(); n * d];
        let mut v = vec![T::zero(); n * d];
        mm(&h1, p.s(li.wq, d * d), &mut q, n, d, d, false);
        mm(&h1, p.s(li.wk, d * d), &mut k, n, d, d, false);
        mm(&h1, p.s(li.wv, d * d), &mut v, n, d, d, false);
        add_bias(&mut q, p.s(li.bq, d));
        add_bias(&mut k, p.s(li.bk, d));
        add_bias(&mut v, p.s(li.bv, d));
        cache.keys[l].extend_from_slice(&k);
        cache.values[l].extend_from_slice(&v);
        let keys = &cache.keys[l];
        let values = &cache.values[l];

        let mut probs = vec![T::zero(); nh * n * total];
        let mut att = vec![T::zero(); n * d];
        for h in 0..nh {
            let ho = h * dh;
            for i in 0..n {
                let visible = c + i + 1;
                let qi = &q[i * d + ho..][..dh];
                let prow = &mut probs[(h * n + i) * total..][..visible];
                let mut max = T::neg_infinity();
                for (j, s) in prow.iter_mut().enumerate() {
                    let kj = &keys[j * d + ho..][..dh];
                    let mut dot = T::zero();
                    for t in 0..dh {
                        dot += qi[t] * kj[t];
                    }
                    *s = dot * scale;
                    if *s > max {
                        max = *s;
                    }
                }
                let mut z = T::zero();
                for s in prow.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let out = &mut att[i * d + ho..][..dh];
                for (j, s) in prow.iter_mut().enumerate() {
                    *s /= z;
                    let vj = &values[j * d + ho..][..dh];
                    for t in 0..dh {
                        out[t] += *s * vj[t];
                    }
                }
            }
        }

        let mut o = vec![T::zero(); n * d];
        mm(&att, p.s(li.wo, d * d), &mut o, n, d, d, false);
        add_bias(&mut o, p.s(li.bo, d));
        let drop_o = dropout(&mut o, pdrop, rng.as_deref_mut());
        for (xv, ov) in x.iter_mut().zip(&o) {
            *xv += *ov;
        }

        let (xhat2, rstd2, h2) = layer_norm(&x, d, p.s(li.ln2_g, d), p.s(li.ln2_b, d));
        let mut f = vec![T::zero(); n * ff];
        mm(&h2, p.s(li.w1, d * ff), &mut f, n, d, ff, false);
        add_bias(&mut f, p.s(li.b1, ff));
        let g: Vec<T> = f.iter().map(|&z| gelu(z)).collect();
        let mut y = vec![T::zero(); n * d];
        mm(&g, p.s(li.w2, ff * d), &mut y, n, ff, d, false);
        add_bias(&mut y, p.s(li.b2, d));
        let drop_y = dropout(&mut y, pdrop, rng.as_deref_mut());
        for (xv, yv) in x.iter_mut().zip(&y) {
            *xv += *yv;
        }
        check_finite(&x, l, "block output")?;

        if record {
            layers.push(LayerTrace {
                xhat1,
                rstd1,
                h1,
                q,
                probs,
                att,
                drop_o,
                xhat2,
                rstd2,
                h2,
                f,
                g,
                drop_y,
            });
        }
    }
    cache.len = total;

    let mut xr = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        xr.extend_from_slice(&x[r * d..(r + 1) * d]);
    }
    let (xhatf, rstdf, hf) = layer_norm(&xr, d, p.s(lay.lnf_g, d), p.s(lay.lnf_b, d));
    let mut logits = vec![T::zero(); rows.len() * vocab];
    mm_bt(&hf, wte, &mut logits, rows.len(), d, vocab, false);
    check_finite(&logits, cfg.n_layers, "logits")?;

    let trace = record.then(|| CallTrace {
        slot,
        ids: ids.to_vec(),
        start: c,
        drop_emb,
        layers,
        rows: rows.to_vec(),
        xhatf,
        rstdf,
        hf,
    });
    Ok((logits, trace))
}

/// Full-row forward: logits for every position of `ids` (`|ids| × vocab`)
/// and a new cache extending `past`.
pub fn forward<T: Scalar>(
    params: &Params<T>,
    ids: &[u32],
    past: &KvCache<T>,
    mut mode: Mode<'_>,
) -> Result<(Vec<T>, KvCache<T>)> {
    let mut cache = past.clone();
    let rows: Vec<usize> = (0..ids.len()).collect();
    let (logits, _) = run_call(params, &mut cache, ids, &rows, &mut mode, 0, false)?;
    Ok((logits, cache))
}

/// Like [`forward`] but extends `cache` in place and computes only `rows`.
pub fn forward_rows<T: Scalar>(
    params: &Params<T>,
    ids: &[u32],
    cache: &mut KvCache<T>,
    rows: &[usize],
    mut mode: Mode<'_>,
) -> Result<Vec<T>> {
    Ok(run_call(params, cache, ids, rows, &mut mode, 0, false)?.0)
}

/// Records a chain of calls sharing one cache so gradients can flow from
/// any call back through every earlier call that fed the cache.
pub struct Tape<T> {
    cache: KvCache<T>,
    /// Positions present before the first recorded call; treated as constants.
    frozen: usize,
    calls: Vec<CallTrace<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        Tape {
            cache: KvCache::new(cfg),
            frozen: 0,
            calls: Vec::new(),
        }
    }

    /// Continues from an existing cache whose entries receive no gradient.
    pub fn from_cache(cache: KvCache<T>) -> Self {
        Tape {
            frozen: cache.len(),
            cache,
            calls: Vec::new(),
        }
    }

    pub fn cache(&self) -> &KvCache<T> {
        &self.cache
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }

    /// Feeds `ids` through `params`, tagging the call with parameter `slot`
    /// for [`Tape::backward`]. Returns logits for the local `rows`.
    pub fn push(
        &mut self,
        params: &Params<T>,
        slot: usize,
        ids: &[u32],
        rows: &[usize],
        mut mode: Mode<'_>,
    ) -> Result<Vec<T>> {
        let (logits, trace) = run_call(params, &mut self.cache, ids, rows, &mut mode, slot, true)?;
        self.calls.push(trace.expect("recorded"));
        Ok(logits)
    }

    /// Gradients of `Σ dlogits · logits` with respect to each parameter
    /// slot. `dlogits[i]` matches the logits returned by the i-th push.
    pub fn backward(&self, params: &[&Params<T>], dlogits: &[Vec<T>]) -> Vec<Params<T>> {
        assert_eq!(dlogits.len(), self.calls.len(), "one dlogits block per call");
        let mut grads: Vec<Params<T>> = params.iter().map(|p| p.zeros_like()).collect();
        let cfg = &params[0].cfg;
        let (d, ff, vocab) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let (nh, dh) = (cfg.n_heads, cfg.d_head());
        let total = self.cache.len;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let mut dkeys = vec![vec![T::zero(); total * d]; cfg.n_layers];
        let mut dvals = vec![vec![T::zero(); total * d]; cfg.n_layers];

        for (call, dl) in self.calls.iter().zip(dlogits).rev() {
            let p = params[call.slot];
            let g = &mut grads[call.slot];
            let lay = &*p.layout;
            let n = call.ids.len();
            let c = call.start;
            let nr = call.rows.len();
            assert_eq!(dl.len(), nr * vocab, "dlogits shape");

            let mut dx = vec![T::zero(); n * d];
            if nr > 0 {
                let mut dhf = vec![T::zero(); nr * d];
                mm(dl, p.s(lay.wte, vocab * d), &mut dhf, nr, vocab, d, false);
                mm_at_acc(dl, &call.hf, g.s_mut(lay.wte, vocab * d), vocab, nr, d);
                let gain = p.s(lay.lnf_g, d);
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for (r, &row) in call.rows.iter().enumerate() {
                    layer_norm_back(
                        &dhf[r * d..(r + 1) * d],
                        &call.xhatf[r * d..(r + 1) * d],
                        call.rstdf[r],
                        gain,
                        &mut dgain,
                        &mut dbias,
                        &mut dx[row * d..(row + 1) * d],
                    );
                }
                acc(g.s_mut(lay.lnf_g, d), &dgain);
                acc(g.s_mut(lay.lnf_b, d), &dbias);
            }

            for (l, li) in lay.layers.iter().enumerate().rev() {
                let lt = &call.layers[l];

                // feed-forward
                let mut dy = dx.clone();
                apply_mask(&mut dy, &lt.drop_y);
                let mut dgel = vec![T::zero(); n * ff];
                mm_bt(&dy, p.s(li.w2, ff * d), &mut dgel, n, d, ff, false);
                mm_at_acc(&lt.g, &dy, g.s_mut(li.w2, ff * d), ff, n, d);
                col_sum_acc(&dy, g.s_mut(li.b2, d));
                for (dv, &fv) in dgel.iter_mut().zip(&lt.f) {
                    *dv *= gelu_grad(fv);
                }
                let mut dh2 = vec![T::zero(); n * d];
                mm_bt(&dgel, p.s(li.w1, d * ff), &mut dh2, n, ff, d, false);
                mm_at_acc(&lt.h2, &dgel, g.s_mut(li.w1, d * ff), d, n, ff);
                col_sum_acc(&dgel, g.s_mut(li.b1, ff));
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                let gain2 = p.s(li.ln2_g, d);
                for i in 0..n {
                    layer_norm_back(
                        &dh2[i * d..(i + 1) * d],
                        &lt.xhat2[i * d..(i + 1) * d],
                        lt.rstd2[i],
                        gain2,
                        &mut dgain,
                        &mut dbias,
                        &mut dx[i * d..(i + 1) * d],
                    );
                }
                acc(g.s_mut(li.ln2_g, d), &dgain);
                acc(g.s_mut(li.ln2_b, d), &dbias);

                // attention output projection
                let mut dout = dx.clone();
                apply_mask(&mut dout, &lt.drop_o);
                let mut datt = vec![T::zero(); n * d];
                mm_bt(&dout, p.s(li.wo, d * d), &mut datt, n, d, d, false);
                mm_at_acc(&lt.att, &dout, g.s_mut(li.wo, d * d), d, n, d);
                col_sum_acc(&dout, g.s_mut(li.bo, d));

                // attention core; keys/values may belong to earlier calls
                let keys = &self.cache.keys[l];
                let values = &self.cache.values[l];
                let dk_all = &mut dkeys[l];
                let dv_all = &mut dvals[l];
                let mut dq = vec![T::zero(); n * d];
                let mut dp = vec![T::zero(); c + n];
                for h in 0..nh {
                    let ho = h * dh;
                    for i in 0..n {
                        let visible = c + i + 1;
                        let prow = &lt.probs[(h * n + i) * (c + n)..][..visible];
                        let da = &datt[i * d + ho..][..dh];
                        let mut wsum = T::zero();
                        for j in 0..visible {
                            let vj = &values[j * d + ho..][..dh];
                            let mut s = T::zero();
                            for t in 0..dh {
                                s += da[t] * vj[t];
                            }
                            dp[j] = s;
                            wsum += prow[j] * s;
                            let dvj = &mut dv_all[j * d + ho..][..dh];
                            for t in 0..dh {
                                dvj[t] += prow[j] * da[t];
                            }
                        }
                        let qi = &lt.q[i * d + ho..][..dh];
                        let dqi = &mut dq[i * d + ho..][..dh];
                        for j in 0..visible {
                            let ds = prow[j] * (dp[j] - wsum) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            let kj = &keys[j * d + ho..][..dh];
                            let dkj = &mut dk_all[j * d + ho..][..dh];
                            for t in 0..dh {
                                dqi[t] += ds * kj[t];
                                dkj[t] += ds * qi[t];
                            }
                        }
                    }
                }

                // This call's own keys/values now hold every downstream contribution.
                let dk_own = &dk_all[c * d..(c + n) * d];
                let dv_own = &dv_all[c * d..(c + n) * d];
                let mut dh1 = vec![T::zero(); n * d];
                mm_bt(&dq, p.s(li.wq, d * d), &mut dh1, n, d, d, false);
                mm_bt(dk_own, p.s(li.wk, d * d), &mut dh1, n, d, d, true);
                mm_bt(dv_own, p.s(li.wv, d * d), &mut dh1, n, d, d, true);
                mm_at_acc(&lt.h1, &dq, g.s_mut(li.wq, d * d), d, n, d);
                mm_at_acc(&lt.h1, dk_own, g.s_mut(li.wk, d * d), d, n, d);
                mm_at_acc(&lt.h1, dv_own, g.s_mut(li.wv, d * d), d, n, d);
                col_sum_acc(&dq, g.s_mut(li.bq, d));
                col_sum_acc(dk_own, g.s_mut(li.bk, d));
                col_sum_acc(dv_own, g.s_mut(li.bv, d));
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                let gain1 = p.s(li.ln1_g, d);
                for i in 0..n {
                    layer_norm_back(
                        &dh1[i * d..(i + 1) * d],
                        &lt.xhat1[i * d..(i + 1) * d],
                        lt.rstd1[i],
                        gain1,
                        &mut dgain,
                        &mut dbias,
                        &mut dx[i * d..(i + 1) * d],
                    );
                }
                acc(g.s_mut(li.ln1_g, d), &dgain);
                acc(g.s_mut(li.ln1_b, d), &dbias);
            }

            apply_mask(&mut dx, &call.drop_emb);
            for (i, &id) in call.ids.iter().enumerate() {
                let row = &dx[i * d..(i + 1) * d];
                acc(&mut g.s_mut(lay.wte, vocab * d)[id as usize * d..][..d], row);
                acc(&mut g.s_mut(lay.wpe, cfg.max_positions * d)[(c + i) * d..][..d], row);
            }
        }
        debug_assert!(self.calls.first().is_none_or(|c| c.start >= self.frozen));
        grads
    }
}

fn acc<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Summed cross-entropy (natural log) of `rows × vocab` logits against
/// `targets`, and `weight · (softmax − onehot)` as the logit gradient.
pub fn cross_entropy<T: Scalar>(logits: &[T], vocab: usize, targets: &[u32], weight: T) -> (f64, Vec<T>) {
    assert_eq!(logits.len(), targets.len() * vocab);
    let mut nll = 0.0f64;
    let mut grad = vec![T::zero(); logits.len()];
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + z.ln();
        nll += (lse - row[t as usize]).to_f64().unwrap_or(f64::NAN);
        let gr = &mut grad[r * vocab..(r + 1) * vocab];
        for (gv, &v) in gr.iter_mut().zip(row) {
            *gv = (v - lse).exp() * weight;
        }
        gr[t as usize] -= weight;
    }
    (nll, grad)
}

/// Mean cross-entropy over masked positions of a single call and its exact
/// gradient. `target_mask[t]` scores the logits at `t` against `ids[t + 1]`;
/// the last position has no in-call target and must be unmasked. `past`
/// entries are constants.
pub fn loss_and_grads<T: Scalar>(
    params: &Params<T>,
    ids: &[u32],
    target_mask: &[bool],
    past: Option<&KvCache<T>>,
    mode: Mode<'_>,
) -> Result<(f64, Params<T>)> {
    if target_mask.len() != ids.len() {
        return Err(Error::Argument("target_mask must match ids".into()));
    }
    if target_mask.last() == Some(&true) {
        return Err(Error::Argument("the last position has no target".into()));
    }
    let rows: Vec<usize> = (0..ids.len()).filter(|&t| target_mask[t]).collect();
    if rows.is_empty() {
        return Err(Error::Argument("target_mask selects no position".into()));
    }
    let targets: Vec<u32> = rows.iter().map(|&t| ids[t + 1]).collect();
    let mut tape = match past {
        Some(c) => Tape::from_cache(c.clone()),
        None => Tape::new(&params.cfg),
    };
    let logits = tape.push(params, 0, ids, &rows, mode)?;
    let w = T::c(1.0 / rows.len() as f64);
    let (nll, dl) = cross_entropy(&logits, params.cfg.vocab_size, &targets, w);
    let grads = tape.backward(&[params], &[dl]).pop().expect("one slot");
    Ok((nll / rows.len() as f64, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            vocab_size: 23,
            max_positions: 32,
            dropout: 0.1,
        }
    }

    fn ids(n: usize, seed: u32) -> Vec<u32> {
        (0..n as u32).map(|i| (i * 7 + seed * 3 + 1) % 23).collect()
    }

    /// Params with O(1) weights so attention is far from uniform.
    fn sharp(c: &ModelConfig) -> Params<f64> {
        let mut p = Params::<f64>::init(c, 5);
        for (i, x) in p.data.iter_mut().enumerate() {
            *x += 0.3 * ((i as f64) * 0.61).sin();
        }
        p
    }

    #[test]
    fn split_forward_matches_one_shot() {
        let c = cfg();
        let p = Params::<f32>::init(&c, 1);
        let x = ids(9, 0);
        let (full, cache_full) = forward(&p, &x, &KvCache::new(&c), Mode::Eval).unwrap();
        let (_, cache_a) = forward(&p, &x[..4], &KvCache::new(&c), Mode::Eval).unwrap();
        let (tail, cache_b) = forward(&p, &x[4..], &cache_a, Mode::Eval).unwrap();
        assert_eq!(cache_a.len(), 4);
        assert_eq!(cache_b.len(), 9);
        let v = c.vocab_size;
        for r in 0..5 {
            for j in 0..v {
                let (a, b) = (full[(4 + r) * v + j], tail[r * v + j]);
                assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-3), "{a} vs {b}");
            }
        }
        for l in 0..c.n_layers {
            assert_eq!(cache_full.keys(l).len(), cache_b.keys(l).len());
        }
    }

    #[test]
    fn single_token_softmax_normalizes() {
        let c = cfg();
        let p = Params::<f32>::init(&c, 2);
        let (logits, cache) = forward(&p, &[3], &KvCache::new(&c), Mode::Eval).unwrap();
        let max = logits.iter().cloned().fold(f32::MIN, f32::max);
        let z: f64 = logits.iter().map(|&l| ((l - max) as f64).exp()).sum();
        let total: f64 = logits.iter().map(|&l| ((l - max) as f64).exp() / z).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let c = cfg();
        let p = sharp(&c);
        let mut tape = Tape::new(&c);
        tape.push(&p, 0, &ids(5, 1), &[4], Mode::Eval).unwrap();
        tape.push(&p, 0, &ids(4, 2), &[3], Mode::Eval).unwrap();
        for call in &tape.calls {
            let n = call.ids.len();
            let total = call.start + n;
            for lt in &call.layers {
                for h in 0..c.n_heads {
                    for i in 0..n {
                        let row = &lt.probs[(h * n + i) * total..][..total];
                        let s: f64 = row.iter().sum();
                        assert!((s - 1.0).abs() < 1e-6);
                        assert!(row[call.start + i + 1..].iter().all(|&x| x == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn causality() {
        let c = cfg();
        let p = sharp(&c);
        let x = ids(8, 3);
        let (a, _) = forward(&p, &x, &KvCache::new(&c), Mode::Eval).unwrap();
        let mut y = x.clone();
        y[5] = (y[5] + 4) % 23;
        y[7] = (y[7] + 9) % 23;
        let (b, _) = forward(&p, &y, &KvCache::new(&c), Mode::Eval).unwrap();
        let v = c.vocab_size;
        assert_eq!(a[..5 * v], b[..5 * v]);
        assert_ne!(a[5 * v..6 * v], b[5 * v..6 * v]);
    }

    #[test]
    fn eval_is_deterministic_and_train_uses_dropout() {
        let c = cfg();
        let p = Params::<f32>::init(&c, 9);
        let x = ids(6, 0);
        let (a, _) = forward(&p, &x, &KvCache::new(&c), Mode::Eval).unwrap();
        let (b, _) = forward(&p, &x, &KvCache::new(&c), Mode::Eval).unwrap();
        assert_eq!(a, b);
        let mut r1 = seeded(1);
        let (t1, _) = forward(&p, &x, &KvCache::new(&c), Mode::Train(&mut r1)).unwrap();
        let mut r2 = seeded(1);
        let (t2, _) = forward(&p, &x, &KvCache::new(&c), Mode::Train(&mut r2)).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, a);
    }

    #[test]
    fn capacity_and_argument_errors() {
        let c = cfg();
        let p = Params::<f32>::init(&c, 0);
        let (_, cache) = forward(&p, &ids(30, 0), &KvCache::new(&c), Mode::Eval).unwrap();
        assert!(matches!(forward(&p, &ids(3, 0), &cache, Mode::Eval), Err(Error::Capacity(_))));
        assert!(matches!(forward(&p, &[], &KvCache::new(&c), Mode::Eval), Err(Error::Argument(_))));
        assert!(matches!(forward(&p, &[99], &KvCache::new(&c), Mode::Eval), Err(Error::Argument(_))));
    }

    #[test]
    fn non_finite_weights_report_layer() {
        let c = cfg();
        let mut p = Params::<f32>::init(&c, 0);
        let off = p.layout.layers[1].w2;
        p.data[off] = f32::INFINITY;
        match forward(&p, &ids(3, 0), &KvCache::new(&c), Mode::Eval) {
            Err(Error::Numeric { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fresh_model_loss_near_uniform() {
        let c = cfg();
        let p = Params::<f64>::init(&c, 4);
        let x = ids(10, 1);
        let mut mask = vec![true; 10];
        mask[9] = false;
        let (loss, _) = loss_and_grads(&p, &x, &mask, None, Mode::Eval).unwrap();
        let uniform = (c.vocab_size as f64).ln();
        assert!((loss - uniform).abs() < 0.05 * uniform, "{loss} vs {uniform}");
    }

    #[test]
    fn loss_rejects_bad_masks() {
        let c = cfg();
        let p = Params::<f64>::init(&c, 4);
        let x = ids(4, 1);
        assert!(loss_and_grads(&p, &x, &[false; 4], None, Mode::Eval).is_err());
        assert!(loss_and_grads(&p, &x, &[false, false, false, true], None, Mode::Eval).is_err());
        assert!(loss_and_grads(&p, &x, &[true; 3], None, Mode::Eval).is_err());
    }

    #[test]
    fn masked_out_labels_do_not_matter() {
        let c = cfg();
        let p = Params::<f64>::init(&c, 4);
        let x = ids(8, 2);
        let mask = [false, true, false, true, false, false, true, false];
        let (l1, _) = loss_and_grads(&p, &x, &mask, None, Mode::Eval).unwrap();
        // ids[1] is an input but not a target (mask[0] is off); ids[5] likewise.
        let (mut y1, mut y2) = (x.clone(), x.clone());
        y1[6] = (y1[6] + 1) % 23; // this one is an input AND not a target...
        y2[2] = (y2[2] + 1) % 23; // ...while ids[2] is the target of row 1
        let (a, _) = loss_and_grads(&p, &y1, &mask, None, Mode::Eval).unwrap();
        let (b, _) = loss_and_grads(&p, &y2, &mask, None, Mode::Eval).unwrap();
        assert_ne!(a, l1); // changing an input changes later predictions
        assert_ne!(b, l1);
        let targets_of = |m: &[bool], v: &[u32]| -> Vec<u32> {
            (0..v.len()).filter(|&t| m[t]).map(|t| v[t + 1]).collect()
        };
        assert_eq!(targets_of(&mask, &x), vec![x[2], x[4], x[7]]);
    }

    fn finite_diff_check(p: &Params<f64>, x: &[u32], mask: &[bool], coords: &[usize], tol: f64) {
        let (_, g) = loss_and_grads(p, x, mask, None, Mode::Eval).unwrap();
        let h = 1e-4;
        for &i in coords {
            let mut plus = p.clone();
            plus.data[i] += h;
            let mut minus = p.clone();
            minus.data[i] -= h;
            let lp = loss_and_grads(&plus, x, mask, None, Mode::Eval).unwrap().0;
            let lm = loss_and_grads(&minus, x, mask, None, Mode::Eval).unwrap().0;
            let num = (lp - lm) / (2.0 * h);
            let a = g.data[i];
            let rel = crate::trainer::relative_error(a, num);
            assert!(rel < tol, "{} [{i}]: analytic {a} numeric {num} rel {rel}", p.layout.tensor_at(i).name);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut c = cfg();
        c.dropout = 0.0;
        let p = sharp(&c);
        let x = ids(7, 4);
        let mask = [false, true, true, false, true, true, false];
        let coords: Vec<usize> = p
            .layout
            .tensors
            .iter()
            .flat_map(|t| [t.offset, t.offset + t.len() / 2, t.offset + t.len() - 1])
            .filter(|&i| {
                let t = p.layout.tensor_at(i);
                // Only rows of tokens/positions that occur carry gradient, and
                // key biases shift all scores of a query equally.
                t.name != "wte" && t.name != "wpe" && !t.name.ends_with("attn.k.b")
            })
            .chain([x[2] as usize * c.d_model + 3, p.layout.wpe + 2 * c.d_model + 5])
            .collect();
        finite_diff_check(&p, &x, &mask, &coords, 1e-4);
        let (_, g) = loss_and_grads(&p, &x, &mask, None, Mode::Eval).unwrap();
        for li in &p.layout.layers {
            assert!(g.data[li.bk..li.bk + c.d_model].iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn gradients_flow_through_cached_calls() {
        let mut c = cfg();
        c.dropout = 0.0;
        let p = sharp(&c);
        let q = {
            let mut q = sharp(&c);
            q.data.iter_mut().enumerate().for_each(|(i, x)| *x += 0.05 * (i as f64 * 1.3).cos());
            q
        };
        let a = ids(5, 1);
        let b = ids(4, 2);
        let run = |pa: &Params<f64>, pb: &Params<f64>| {
            let mut tape = Tape::new(&c);
            tape.push(pa, 0, &a, &[], Mode::Eval).unwrap();
            let logits = tape.push(pb, 1, &b, &[1, 2], Mode::Eval).unwrap();
            let (nll, dl) = cross_entropy(&logits, c.vocab_size, &[b[2], b[3]], 0.5);
            (nll / 2.0, tape, dl)
        };
        let (_, tape, dl) = run(&p, &q);
        let grads = tape.backward(&[&p, &q], &[vec![], dl]);
        // The first call only feeds the cache, yet its parameters get gradient.
        let li = p.layout.layers[0];
        let h = 1e-4;
        for i in [li.wk + 3, li.wv + 17, li.ln1_g + 2, p.layout.wpe + 2 * c.d_model + 1] {
            let mut pp = p.clone();
            pp.data[i] += h;
            let mut pm = p.clone();
            pm.data[i] -= h;
            let num = (run(&pp, &q).0 - run(&pm, &q).0) / (2.0 * h);
            let an = grads[0].data[i];
            assert!(an != 0.0);
            assert!((an - num).abs() / (an.abs() + num.abs()) < 1e-5, "{i}: {an} vs {num}");
        }
    }
}
