//! Pre-norm decoder forward pass and its hand-written reverse pass.
//!
//! Weights are stored as `f32`; every activation, accumulation and gradient
//! is carried in `f64`.

use std::collections::{BTreeMap, BTreeSet};

use super::store::{attn_norm_name, ffn_norm_name, projection_name, FINAL_NORM, LM_HEAD, TOKEN_EMBEDDING};
use super::{AdapterSet, LoraAdapter, ModelConfig, ModelError, ParameterStore, Projection, Tensor};

/// The set of parameter names allowed to receive gradients.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FreezeMask(BTreeSet<String>);

impl FreezeMask {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        FreezeMask(names.into_iter().map(Into::into).collect())
    }

    /// Embedding and output head only.
    pub fn embeddings_and_head() -> Self {
        FreezeMask::new([TOKEN_EMBEDDING, LM_HEAD])
    }

    /// Embedding, head and every adapter tensor.
    pub fn embeddings_head_and_adapters(adapters: &AdapterSet) -> Self {
        let mut m = Self::embeddings_and_head();
        m.0.extend(adapters.parameter_names());
        m
    }

    /// Every base parameter plus every adapter tensor.
    pub fn everything(store: &ParameterStore, adapters: &AdapterSet) -> Self {
        let mut m = FreezeMask::new(store.names());
        m.0.extend(adapters.parameter_names());
        m
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Non-empty and naming only parameters that exist.
    pub fn validate(&self, store: &ParameterStore, adapters: &AdapterSet) -> Result<(), ModelError> {
        if self.0.is_empty() {
            return Err(ModelError::Config("freeze mask selects no parameters".into()));
        }
        for n in &self.0 {
            if store.get(n).is_none() && adapters.tensor(n).is_none() {
                return Err(ModelError::UnknownParameter(n.clone()));
            }
        }
        Ok(())
    }
}

/// Gradients keyed by parameter name, flattened row-major.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Vec<f64>>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Vec<f64>) {
        self.0.insert(name.into(), g);
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.0.values_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Adds `other` element-wise, creating missing entries.
    pub fn accumulate(&mut self, other: Gradients) {
        for (name, g) in other.0 {
            match self.0.get_mut(&name) {
                Some(dst) => dst.iter_mut().zip(&g).for_each(|(d, v)| *d += v),
                None => {
                    self.0.insert(name, g);
                }
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.0.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    fn slot(&mut self, name: &str, len: usize) -> &mut [f64] {
        self.0.entry(name.to_string()).or_insert_with(|| vec![0.0; len])
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Logits for token ids at or above this bound are set to `-inf`.
    pub vocab_limit: Option<usize>,
}

/// `[batch × seq × vocab]` scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub batch: usize,
    pub seq: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn at(&self, b: usize, t: usize) -> &[f64] {
        let off = (b * self.seq + t) * self.vocab;
        &self.data[off..off + self.vocab]
    }
}

/// Runs the model over a rectangular batch of token ids.
pub fn forward(store: &ParameterStore, adapters: &AdapterSet, ids: &[Vec<u32>]) -> Result<Logits, ModelError> {
    forward_with(store, adapters, ids, &ForwardOptions::default())
}

pub fn forward_with(
    store: &ParameterStore,
    adapters: &AdapterSet,
    ids: &[Vec<u32>],
    opts: &ForwardOptions,
) -> Result<Logits, ModelError> {
    let seq = ids.first().map_or(0, Vec::len);
    if ids.iter().any(|r| r.len() != seq) {
        return Err(ModelError::Shape("token rows differ in length".into()));
    }
    let vocab = store.config().vocab_size;
    let mut data = Vec::with_capacity(ids.len() * seq * vocab);
    for row in ids {
        let (mut logits, _) = forward_sequence(store, adapters, row, false)?;
        if let Some(limit) = opts.vocab_limit {
            for t in 0..seq {
                logits[t * vocab + limit.min(vocab)..(t + 1) * vocab].fill(f64::NEG_INFINITY);
            }
        }
        data.extend(logits);
    }
    Ok(Logits { batch: ids.len(), seq, vocab, data })
}

struct Linear<'a> {
    name: String,
    w: &'a Tensor,
    lora: Option<&'a LoraAdapter>,
}

impl<'a> Linear<'a> {
    fn new(store: &'a ParameterStore, adapters: &'a AdapterSet, name: String) -> Result<Self, ModelError> {
        let w = store.tensor(&name)?;
        let lora = adapters.for_target(&name);
        Ok(Linear { name, w, lora })
    }

    fn d_out(&self) -> usize {
        self.w.rows()
    }

    fn d_in(&self) -> usize {
        self.w.cols()
    }

    /// Returns the output and, when adapted, the rank-space activation `x Aᵀ`.
    fn forward(&self, x: &[f64], t: usize) -> (Vec<f64>, Option<Vec<f64>>) {
        let (d_in, d_out) = (self.d_in(), self.d_out());
        let mut y = vec![0.0; t * d_out];
        matmul_wt(x, t, d_in, self.w.data(), d_out, &mut y);
        let u = self.lora.map(|ad| {
            let r = ad.rank;
            let mut u = vec![0.0; t * r];
            matmul_wt(x, t, d_in, ad.a.data(), r, &mut u);
            let mut delta = vec![0.0; t * d_out];
            matmul_wt(&u, t, r, ad.b.data(), d_out, &mut delta);
            let s = ad.scale();
            y.iter_mut().zip(&delta).for_each(|(yv, dv)| *yv += s * dv);
            u
        });
        (y, u)
    }

    fn backward(
        &self,
        x: &[f64],
        u: Option<&[f64]>,
        dy: &[f64],
        t: usize,
        dx: &mut [f64],
        mask: &FreezeMask,
        grads: &mut Gradients,
    ) {
        let (d_in, d_out) = (self.d_in(), self.d_out());
        matmul_w_acc(dy, t, d_out, self.w.data(), d_in, dx);
        if mask.contains(&self.name) {
            outer_acc(dy, t, d_out, x, d_in, grads.slot(&self.name, d_out * d_in));
        }
        if let (Some(ad), Some(u)) = (self.lora, u) {
            let r = ad.rank;
            let s = ad.scale();
            let sdy: Vec<f64> = dy.iter().map(|v| v * s).collect();
            let b_name = ad.b_name();
            if mask.contains(&b_name) {
                outer_acc(&sdy, t, d_out, u, r, grads.slot(&b_name, d_out * r));
            }
            let mut du = vec![0.0; t * r];
            matmul_w_acc(&sdy, t, d_out, ad.b.data(), r, &mut du);
            let a_name = ad.a_name();
            if mask.contains(&a_name) {
                outer_acc(&du, t, r, x, d_in, grads.slot(&a_name, r * d_in));
            }
            matmul_w_acc(&du, t, r, ad.a.data(), d_in, dx);
        }
    }
}

/// `y[t, o] = Σ_i x[t, i] · w[o, i]`
fn matmul_wt(x: &[f64], t: usize, d_in: usize, w: &[f32], d_out: usize, y: &mut [f64]) {
    for ti in 0..t {
        let xr = &x[ti * d_in..(ti + 1) * d_in];
        let yr = &mut y[ti * d_out..(ti + 1) * d_out];
        for (o, yv) in yr.iter_mut().enumerate() {
            let wr = &w[o * d_in..(o + 1) * d_in];
            *yv = xr.iter().zip(wr).map(|(a, b)| a * *b as f64).sum();
        }
    }
}

/// `dx[t, i] += Σ_o dy[t, o] · w[o, i]`
fn matmul_w_acc(dy: &[f64], t: usize, d_out: usize, w: &[f32], d_in: usize, dx: &mut [f64]) {
    for ti in 0..t {
        let dxr = &mut dx[ti * d_in..(ti + 1) * d_in];
        for o in 0..d_out {
            let g = dy[ti * d_out + o];
            if g == 0.0 {
                continue;
            }
            let wr = &w[o * d_in..(o + 1) * d_in];
            dxr.iter_mut().zip(wr).for_each(|(d, wv)| *d += g * *wv as f64);
        }
    }
}

/// `dw[o, i] += Σ_t dy[t, o] · x[t, i]`
fn outer_acc(dy: &[f64], t: usize, d_out: usize, x: &[f64], d_in: usize, dw: &mut [f64]) {
    for ti in 0..t {
        let xr = &x[ti * d_in..(ti + 1) * d_in];
        for o in 0..d_out {
            let g = dy[ti * d_out + o];
            if g == 0.0 {
                continue;
            }
            let dwr = &mut dw[o * d_in..(o + 1) * d_in];
            dwr.iter_mut().zip(xr).for_each(|(d, xv)| *d += g * xv);
        }
    }
}

fn rms_norm(x: &[f64], t: usize, d: usize, gain: &[f32], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; t * d];
    let mut inv = vec![0.0; t];
    for ti in 0..t {
        let xr = &x[ti * d..(ti + 1) * d];
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + eps).sqrt();
        inv[ti] = r;
        for j in 0..d {
            out[ti * d + j] = xr[j] * r * gain[j] as f64;
        }
    }
    (out, inv)
}

#[allow(clippy::too_many_arguments)]
fn rms_norm_backward(
    x: &[f64],
    inv: &[f64],
    gain: &[f32],
    dn: &[f64],
    t: usize,
    d: usize,
    dx: &mut [f64],
    dgain: Option<&mut [f64]>,
) {
    let mut dgain = dgain;
    for ti in 0..t {
        let xr = &x[ti * d..(ti + 1) * d];
        let dnr = &dn[ti * d..(ti + 1) * d];
        let r = inv[ti];
        let dot: f64 = (0..d).map(|j| dnr[j] * gain[j] as f64 * xr[j]).sum();
        let coef = r * r * r * dot / d as f64;
        for j in 0..d {
            dx[ti * d + j] += r * dnr[j] * gain[j] as f64 - xr[j] * coef;
        }
        if let Some(g) = dgain.as_deref_mut() {
            for j in 0..d {
                g[j] += dnr[j] * xr[j] * r;
            }
        }
    }
}

/// Rotary tables: `(cos, sin)` of shape `[t × head_dim/2]`.
fn rope_tables(cfg: &ModelConfig, t: usize) -> (Vec<f64>, Vec<f64>) {
    let half = cfg.head_dim() / 2;
    let mut cos = vec![0.0; t * half];
    let mut sin = vec![0.0; t * half];
    for pos in 0..t {
        for i in 0..half {
            let theta = cfg.rotary_base.powf(-2.0 * i as f64 / cfg.head_dim() as f64);
            let a = pos as f64 * theta;
            cos[pos * half + i] = a.cos();
            sin[pos * half + i] = a.sin();
        }
    }
    (cos, sin)
}

/// Rotates adjacent pairs `(2i, 2i+1)` of every head. `sign = -1` applies the
/// inverse rotation, which is the transpose used by the reverse pass.
fn apply_rope(x: &mut [f64], t: usize, cfg: &ModelConfig, cos: &[f64], sin: &[f64], sign: f64) {
    let (d, hd) = (cfg.d_model, cfg.head_dim());
    let half = hd / 2;
    for pos in 0..t {
        for h in 0..cfg.n_heads {
            for i in 0..half {
                let base = pos * d + h * hd + 2 * i;
                let (c, s) = (cos[pos * half + i], sign * sin[pos * half + i]);
                let (a, b) = (x[base], x[base + 1]);
                x[base] = a * c - b * s;
                x[base + 1] = a * s + b * c;
            }
        }
    }
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn silu_grad(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

struct LayerCache {
    x_in: Vec<f64>,
    inv1: Vec<f64>,
    n1: Vec<f64>,
    u_q: Option<Vec<f64>>,
    u_k: Option<Vec<f64>>,
    u_v: Option<Vec<f64>>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    u_o: Option<Vec<f64>>,
    x_mid: Vec<f64>,
    inv2: Vec<f64>,
    n2: Vec<f64>,
    gate: Vec<f64>,
    up: Vec<f64>,
    u_gate: Option<Vec<f64>>,
    u_up: Option<Vec<f64>>,
    h: Vec<f64>,
    u_down: Option<Vec<f64>>,
}

pub(crate) struct SequenceCache {
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    inv_f: Vec<f64>,
    nf: Vec<f64>,
}

fn check_ids(cfg: &ModelConfig, ids: &[u32]) -> Result<(), ModelError> {
    if ids.len() > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong { len: ids.len(), max: cfg.max_seq_len });
    }
    if let Some((pos, &id)) = ids.iter().enumerate().find(|(_, &id)| id as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange { id, position: pos, vocab_size: cfg.vocab_size });
    }
    Ok(())
}

/// Logits `[t × V]` for one sequence, optionally keeping activations for
/// [`backward_sequence`].
pub(crate) fn forward_sequence(
    store: &ParameterStore,
    adapters: &AdapterSet,
    ids: &[u32],
    keep: bool,
) -> Result<(Vec<f64>, Option<SequenceCache>), ModelError> {
    adapters.ensure_live()?;
    let cfg = store.config();
    check_ids(cfg, ids)?;
    let (t, d, hd, nh) = (ids.len(), cfg.d_model, cfg.head_dim(), cfg.n_heads);
    let emb = store.tensor(TOKEN_EMBEDDING)?;
    let mut x: Vec<f64> = Vec::with_capacity(t * d);
    for &id in ids {
        x.extend(emb.row(id as usize).iter().map(|&v| v as f64));
    }
    let (cos, sin) = rope_tables(cfg, t);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut caches = Vec::new();

    for l in 0..cfg.n_layers {
        let g1 = store.tensor(&attn_norm_name(l))?;
        let (n1, inv1) = rms_norm(&x, t, d, g1.data(), cfg.norm_eps);
        let lin = |p| Linear::new(store, adapters, projection_name(l, p));
        let (mut q, u_q) = lin(Projection::Q)?.forward(&n1, t);
        let (mut k, u_k) = lin(Projection::K)?.forward(&n1, t);
        let (v, u_v) = lin(Projection::V)?.forward(&n1, t);
        apply_rope(&mut q, t, cfg, &cos, &sin, 1.0);
        apply_rope(&mut k, t, cfg, &cos, &sin, 1.0);

        let mut probs = vec![0.0; nh * t * t];
        let mut ctx = vec![0.0; t * d];
        for h in 0..nh {
            let off = h * hd;
            for ti in 0..t {
                let qr = &q[ti * d + off..ti * d + off + hd];
                let pr = &mut probs[(h * t + ti) * t..(h * t + ti + 1) * t];
                let mut max = f64::NEG_INFINITY;
                for s in 0..=ti {
                    let kr = &k[s * d + off..s * d + off + hd];
                    let a = scale * qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>();
                    pr[s] = a;
                    max = max.max(a);
                }
                let mut z = 0.0;
                for p in pr.iter_mut().take(ti + 1) {
                    *p = (*p - max).exp();
                    z += *p;
                }
                for p in pr.iter_mut().take(ti + 1) {
                    *p /= z;
                }
                let cr = &mut ctx[ti * d + off..ti * d + off + hd];
                for s in 0..=ti {
                    let p = pr[s];
                    let vr = &v[s * d + off..s * d + off + hd];
                    cr.iter_mut().zip(vr).for_each(|(c, vv)| *c += p * vv);
                }
            }
        }
        let (attn_out, u_o) = lin(Projection::O)?.forward(&ctx, t);
        let x_in = x;
        let x_mid: Vec<f64> = x_in.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

        let g2 = store.tensor(&ffn_norm_name(l))?;
        let (n2, inv2) = rms_norm(&x_mid, t, d, g2.data(), cfg.norm_eps);
        let (gate, u_gate) = lin(Projection::Gate)?.forward(&n2, t);
        let (up, u_up) = lin(Projection::Up)?.forward(&n2, t);
        let h: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
        let (down, u_down) = lin(Projection::Down)?.forward(&h, t);
        x = x_mid.iter().zip(&down).map(|(a, b)| a + b).collect();

        if keep {
            caches.push(LayerCache {
                x_in,
                inv1,
                n1,
                u_q,
                u_k,
                u_v,
                q,
                k,
                v,
                probs,
                ctx,
                u_o,
                x_mid,
                inv2,
                n2,
                gate,
                up,
                u_gate,
                u_up,
                h,
                u_down,
            });
        }
    }

    let gf = store.tensor(FINAL_NORM)?;
    let (nf, inv_f) = rms_norm(&x, t, d, gf.data(), cfg.norm_eps);
    let head = store.tensor(LM_HEAD)?;
    let vsz = cfg.vocab_size;
    let mut logits = vec![0.0; t * vsz];
    matmul_wt(&nf, t, d, head.data(), vsz, &mut logits);

    let cache = keep.then(|| SequenceCache { ids: ids.to_vec(), layers: caches, x_final: x, inv_f, nf });
    Ok((logits, cache))
}

/// Accumulates into `grads` the gradient of a scalar loss whose gradient
/// with respect to this sequence's logits is `dlogits`. Only names in `mask`
/// receive storage.
pub(crate) fn backward_sequence(
    store: &ParameterStore,
    adapters: &AdapterSet,
    cache: &SequenceCache,
    dlogits: &[f64],
    mask: &FreezeMask,
    grads: &mut Gradients,
) -> Result<(), ModelError> {
    let cfg = store.config();
    let (t, d, hd, nh, vsz) = (cache.ids.len(), cfg.d_model, cfg.head_dim(), cfg.n_heads, cfg.vocab_size);
    let f = cfg.d_ffn;
    let scale = 1.0 / (hd as f64).sqrt();
    let (cos, sin) = rope_tables(cfg, t);

    let head = store.tensor(LM_HEAD)?;
    if mask.contains(LM_HEAD) {
        outer_acc(dlogits, t, vsz, &cache.nf, d, grads.slot(LM_HEAD, vsz * d));
    }
    let mut dnf = vec![0.0; t * d];
    matmul_w_acc(dlogits, t, vsz, head.data(), d, &mut dnf);

    let gf = store.tensor(FINAL_NORM)?;
    let mut dx = vec![0.0; t * d];
    let mut dgf = mask.contains(FINAL_NORM).then(|| vec![0.0; d]);
    rms_norm_backward(&cache.x_final, &cache.inv_f, gf.data(), &dnf, t, d, &mut dx, dgf.as_deref_mut());
    if let Some(g) = dgf {
        add_into(grads.slot(FINAL_NORM, d), &g);
    }

    for l in (0..cfg.n_layers).rev() {
        let c = &cache.layers[l];
        let lin = |p| Linear::new(store, adapters, projection_name(l, p));

        // feed-forward branch: x = x_mid + down(h)
        let mut dh = vec![0.0; t * f];
        lin(Projection::Down)?.backward(&c.h, c.u_down.as_deref(), &dx, t, &mut dh, mask, grads);
        let mut dgate = vec![0.0; t * f];
        let mut dup = vec![0.0; t * f];
        for i in 0..t * f {
            dgate[i] = dh[i] * c.up[i] * silu_grad(c.gate[i]);
            dup[i] = dh[i] * silu(c.gate[i]);
        }
        let mut dn2 = vec![0.0; t * d];
        lin(Projection::Gate)?.backward(&c.n2, c.u_gate.as_deref(), &dgate, t, &mut dn2, mask, grads);
        lin(Projection::Up)?.backward(&c.n2, c.u_up.as_deref(), &dup, t, &mut dn2, mask, grads);
        let g2_name = ffn_norm_name(l);
        let g2 = store.tensor(&g2_name)?;
        let mut dx_mid = dx.clone();
        let mut dg2 = mask.contains(&g2_name).then(|| vec![0.0; d]);
        rms_norm_backward(&c.x_mid, &c.inv2, g2.data(), &dn2, t, d, &mut dx_mid, dg2.as_deref_mut());
        if let Some(g) = dg2 {
            add_into(grads.slot(&g2_name, d), &g);
        }

        // attention branch: x_mid = x_in + o(ctx)
        let mut dctx = vec![0.0; t * d];
        lin(Projection::O)?.backward(&c.ctx, c.u_o.as_deref(), &dx_mid, t, &mut dctx, mask, grads);
        let mut dq = vec![0.0; t * d];
        let mut dk = vec![0.0; t * d];
        let mut dv = vec![0.0; t * d];
        let mut dp = vec![0.0; t];
        for h in 0..nh {
            let off = h * hd;
            for ti in 0..t {
                let pr = &c.probs[(h * t + ti) * t..(h * t + ti + 1) * t];
                let dcr = &dctx[ti * d + off..ti * d + off + hd];
                let mut dot = 0.0;
                for s in 0..=ti {
                    let vr = &c.v[s * d + off..s * d + off + hd];
                    dp[s] = dcr.iter().zip(vr).map(|(a, b)| a * b).sum();
                    dot += pr[s] * dp[s];
                    let p = pr[s];
                    let dvr = &mut dv[s * d + off..s * d + off + hd];
                    dvr.iter_mut().zip(dcr).for_each(|(a, b)| *a += p * b);
                }
                for s in 0..=ti {
                    let da = pr[s] * (dp[s] - dot) * scale;
                    if da == 0.0 {
                        continue;
                    }
                    for j in 0..hd {
                        dq[ti * d + off + j] += da * c.k[s * d + off + j];
                        dk[s * d + off + j] += da * c.q[ti * d + off + j];
                    }
                }
            }
        }
        apply_rope(&mut dq, t, cfg, &cos, &sin, -1.0);
        apply_rope(&mut dk, t, cfg, &cos, &sin, -1.0);
        let mut dn1 = vec![0.0; t * d];
        lin(Projection::Q)?.backward(&c.n1, c.u_q.as_deref(), &dq, t, &mut dn1, mask, grads);
        lin(Projection::K)?.backward(&c.n1, c.u_k.as_deref(), &dk, t, &mut dn1, mask, grads);
        lin(Projection::V)?.backward(&c.n1, c.u_v.as_deref(), &dv, t, &mut dn1, mask, grads);
        let g1_name = attn_norm_name(l);
        let g1 = store.tensor(&g1_name)?;
        let mut dx_in = dx_mid;
        let mut dg1 = mask.contains(&g1_name).then(|| vec![0.0; d]);
        rms_norm_backward(&c.x_in, &c.inv1, g1.data(), &dn1, t, d, &mut dx_in, dg1.as_deref_mut());
        if let Some(g) = dg1 {
            add_into(grads.slot(&g1_name, d), &g);
        }
        dx = dx_in;
    }

    if mask.contains(TOKEN_EMBEDDING) {
        let slot = grads.slot(TOKEN_EMBEDDING, vsz * d);
        for (ti, &id) in cache.ids.iter().enumerate() {
            let row = &mut slot[id as usize * d..(id as usize + 1) * d];
            add_into(row, &dx[ti * d..(ti + 1) * d]);
        }
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
