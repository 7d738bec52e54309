//! Batched forward pass over packed (unpadded) rows and its exact reverse pass.
//!
//! Sequences of a batch are packed back to back, so linear layers never touch
//! padding. Attention runs per sequence and per head on the packed rows.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use super::ops::{
    apply_mask, dropout_mask, layer_norm, layer_norm_backward, linear, linear_backward,
    log_softmax_rows, matmul, softmax_rows, NormCache,
};
use super::params::{AttnIds, FfnIds, Gradients, NormIds, Params};
use super::ModelError;
use crate::corpus::Batch;
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Start offset and length of each sequence within the packed rows.
#[derive(Debug, Clone)]
pub(crate) struct Segments {
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
}

impl Segments {
    pub fn new(lens: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in lens {
            offsets.push(acc);
            acc += l;
        }
        Segments {
            offsets,
            lens: lens.to_vec(),
        }
    }
}

pub(crate) struct AttnCache<F> {
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Pre-dropout attention weights per (sequence, head).
    probs: Vec<Array2<F>>,
    drops: Vec<Option<Array2<F>>>,
    ctx: Array2<F>,
}

pub(crate) struct FfnCache<F> {
    pre: Array2<F>,
    hidden: Array2<F>,
    drop: Option<Array2<F>>,
}

pub(crate) struct EncCache<F> {
    input: Array2<F>,
    attn: AttnCache<F>,
    attn_drop: Option<Array2<F>>,
    ln1_out: Array2<F>,
    ln1: NormCache<F>,
    ffn: FfnCache<F>,
    ffn_drop: Option<Array2<F>>,
    ln2: NormCache<F>,
}

struct DecCache<F> {
    input: Array2<F>,
    self_attn: AttnCache<F>,
    self_drop: Option<Array2<F>>,
    ln1_out: Array2<F>,
    ln1: NormCache<F>,
    cross_attn: AttnCache<F>,
    cross_drop: Option<Array2<F>>,
    ln2_out: Array2<F>,
    ln2: NormCache<F>,
    ffn: FfnCache<F>,
    ffn_drop: Option<Array2<F>>,
    ln3: NormCache<F>,
}

struct Cache<F> {
    generation: u64,
    src_tokens: Vec<u32>,
    tgt_tokens: Vec<u32>,
    src_seg: Segments,
    tgt_seg: Segments,
    encoder: Vec<EncCache<F>>,
    decoder: Vec<DecCache<F>>,
    enc_out: Array2<F>,
    dec_out: Array2<F>,
    logprobs: Array2<F>,
}

/// Log-probabilities `[B, T, V]` plus the activations needed by [`backward`]
/// when produced in train mode. Padding rows hold the uniform distribution.
pub struct ForwardOutput<F> {
    pub logprobs: Array3<F>,
    cache: Option<Cache<F>>,
}

impl<F: Real> ForwardOutput<F> {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

/// Sparse per-position target weights. The implied loss is
/// `-Σ_{b,t} Σ_{(k,w)} w · logprobs[b,t,k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetWeights<F> {
    pub batch: usize,
    pub time: usize,
    pub entries: Vec<Vec<(u32, F)>>,
}

impl<F: Real> TargetWeights<F> {
    pub fn empty(batch: usize, time: usize) -> Self {
        TargetWeights {
            batch,
            time,
            entries: vec![Vec::new(); batch * time],
        }
    }

    pub fn at(&self, b: usize, t: usize) -> &[(u32, F)] {
        &self.entries[b * self.time + t]
    }

    pub fn at_mut(&mut self, b: usize, t: usize) -> &mut Vec<(u32, F)> {
        &mut self.entries[b * self.time + t]
    }

    pub fn scale(&mut self, factor: F) {
        for e in self.entries.iter_mut().flatten() {
            e.1 *= factor;
        }
    }

    /// `a · self + b · other`, keeping both supports.
    pub fn combine(&self, a: F, other: &TargetWeights<F>, b: F) -> TargetWeights<F> {
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(x, y)| {
                x.iter()
                    .map(|&(k, w)| (k, a * w))
                    .chain(y.iter().map(|&(k, w)| (k, b * w)))
                    .collect()
            })
            .collect();
        TargetWeights {
            batch: self.batch,
            time: self.time,
            entries,
        }
    }
}

fn check_tokens(tokens: &[u32], vocab: usize) -> Result<(), ModelError> {
    match tokens.iter().find(|&&t| t as usize >= vocab) {
        Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab }),
        None => Ok(()),
    }
}

pub(crate) fn embed<F: Real>(params: &Params<F>, tokens: &[u32], seg: &Segments) -> Array2<F> {
    let d = params.config.d_model;
    let scale = F::of((d as f64).sqrt());
    let table = params.mat(params.layout.embed);
    let mut x = Array2::zeros((tokens.len(), d));
    for (&off, &len) in seg.offsets.iter().zip(&seg.lens) {
        for t in 0..len {
            let row = off + t;
            let e = table.row(tokens[row] as usize);
            let p = params.positions.row(t);
            for ((o, &ev), &pv) in x.row_mut(row).iter_mut().zip(e).zip(p) {
                *o = ev * scale + pv;
            }
        }
    }
    x
}

/// Multi-head attention. With `causal`, query `i` of a sequence sees keys
/// `0..=i` of the same sequence.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention<F: Real, R: Rng>(
    params: &Params<F>,
    ids: &AttnIds,
    xq: ArrayView2<F>,
    xkv: ArrayView2<F>,
    q_seg: &Segments,
    kv_seg: &Segments,
    causal: bool,
    mut rng: Option<&mut R>,
) -> (Array2<F>, AttnCache<F>) {
    let cfg = &params.config;
    let (heads, dh) = (cfg.n_heads, cfg.head_dim());
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let q = linear(xq, params.mat(ids.wq), params.vec(ids.bq));
    let k = linear(xkv, params.mat(ids.wk), params.vec(ids.bk));
    let v = linear(xkv, params.mat(ids.wv), params.vec(ids.bv));
    let mut ctx = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(q_seg.lens.len() * heads);
    let mut drops = Vec::with_capacity(q_seg.lens.len() * heads);
    for b in 0..q_seg.lens.len() {
        let (qo, ql) = (q_seg.offsets[b], q_seg.lens[b]);
        let (ko, kl) = (kv_seg.offsets[b], kv_seg.lens[b]);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qb = q.slice(s![qo..qo + ql, cols.clone()]);
            let kb = k.slice(s![ko..ko + kl, cols.clone()]);
            let vb = v.slice(s![ko..ko + kl, cols.clone()]);
            let mut scores = matmul(qb, kb.t());
            scores *= scale;
            if causal {
                for i in 0..ql {
                    for j in i + 1..kl {
                        scores[[i, j]] = F::neg_infinity();
                    }
                }
            }
            softmax_rows(scores.view_mut());
            let drop = dropout_mask(rng.as_deref_mut(), cfg.dropout, (ql, kl));
            let mut out = ctx.slice_mut(s![qo..qo + ql, cols]);
            match &drop {
                Some(m) => {
                    let pd = &scores * m;
                    general_mat_mul(F::one(), &pd, &vb, F::zero(), &mut out);
                }
                None => general_mat_mul(F::one(), &scores, &vb, F::zero(), &mut out),
            }
            probs.push(scores);
            drops.push(drop);
        }
    }
    let out = linear(ctx.view(), params.mat(ids.wo), params.vec(ids.bo));
    (
        out,
        AttnCache {
            q,
            k,
            v,
            probs,
            drops,
            ctx,
        },
    )
}

/// Returns `(d_xq, d_xkv)`.
#[allow(clippy::too_many_arguments)]
fn attention_backward<F: Real>(
    params: &Params<F>,
    ids: &AttnIds,
    cache: &AttnCache<F>,
    xq: ArrayView2<F>,
    xkv: ArrayView2<F>,
    q_seg: &Segments,
    kv_seg: &Segments,
    dout: ArrayView2<F>,
    grads: &mut Gradients<F>,
) -> (Array2<F>, Array2<F>) {
    let cfg = &params.config;
    let (heads, dh) = (cfg.n_heads, cfg.head_dim());
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let dctx = linear_grad(params, grads, ids.wo, ids.bo, cache.ctx.view(), dout);
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    let mut idx = 0;
    for b in 0..q_seg.lens.len() {
        let (qo, ql) = (q_seg.offsets[b], q_seg.lens[b]);
        let (ko, kl) = (kv_seg.offsets[b], kv_seg.lens[b]);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &cache.probs[idx];
            let drop = &cache.drops[idx];
            idx += 1;
            let dctx_b = dctx.slice(s![qo..qo + ql, cols.clone()]);
            let vb = cache.v.slice(s![ko..ko + kl, cols.clone()]);
            let mut dp = matmul(dctx_b, vb.t());
            {
                let mut dvb = dv.slice_mut(s![ko..ko + kl, cols.clone()]);
                match drop {
                    Some(m) => {
                        let pd = p * m;
                        general_mat_mul(F::one(), &pd.t(), &dctx_b, F::one(), &mut dvb);
                        dp *= m;
                    }
                    None => general_mat_mul(F::one(), &p.t(), &dctx_b, F::one(), &mut dvb),
                }
            }
            // softmax backward: dS = P ⊙ (dP - rowsum(dP ⊙ P))
            for (mut dpr, pr) in dp.rows_mut().into_iter().zip(p.rows()) {
                let dot = dpr.iter().zip(pr.iter()).map(|(&a, &b)| a * b).sum::<F>();
                for (d, &pv) in dpr.iter_mut().zip(pr.iter()) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            let qb = cache.q.slice(s![qo..qo + ql, cols.clone()]);
            let kb = cache.k.slice(s![ko..ko + kl, cols.clone()]);
            let mut dqb = dq.slice_mut(s![qo..qo + ql, cols.clone()]);
            general_mat_mul(F::one(), &dp, &kb, F::one(), &mut dqb);
            let mut dkb = dk.slice_mut(s![ko..ko + kl, cols]);
            general_mat_mul(F::one(), &dp.t(), &qb, F::one(), &mut dkb);
        }
    }
    let dxq = linear_grad(params, grads, ids.wq, ids.bq, xq, dq.view());
    let mut dxkv = linear_grad(params, grads, ids.wk, ids.bk, xkv, dk.view());
    dxkv += &linear_grad(params, grads, ids.wv, ids.bv, xkv, dv.view());
    (dxq, dxkv)
}

pub(crate) fn feed_forward<F: Real, R: Rng>(
    params: &Params<F>,
    ids: &FfnIds,
    x: ArrayView2<F>,
    rng: Option<&mut R>,
) -> (Array2<F>, FfnCache<F>) {
    let pre = linear(x, params.mat(ids.w1), params.vec(ids.b1));
    let mut hidden = pre.mapv(|v| v.max(F::zero()));
    let drop = dropout_mask(rng, params.config.dropout, hidden.dim());
    apply_mask(&mut hidden, &drop);
    let out = linear(hidden.view(), params.mat(ids.w2), params.vec(ids.b2));
    (out, FfnCache { pre, hidden, drop })
}

fn feed_forward_backward<F: Real>(
    params: &Params<F>,
    ids: &FfnIds,
    cache: &FfnCache<F>,
    x: ArrayView2<F>,
    dout: ArrayView2<F>,
    grads: &mut Gradients<F>,
) -> Array2<F> {
    let mut dhidden = linear_grad(params, grads, ids.w2, ids.b2, cache.hidden.view(), dout);
    apply_mask(&mut dhidden, &cache.drop);
    ndarray::Zip::from(&mut dhidden)
        .and(&cache.pre)
        .for_each(|d, &p| {
            if p <= F::zero() {
                *d = F::zero();
            }
        });
    linear_grad(params, grads, ids.w1, ids.b1, x, dhidden.view())
}

fn linear_grad<F: Real>(
    params: &Params<F>,
    grads: &mut Gradients<F>,
    w: usize,
    b: usize,
    x: ArrayView2<F>,
    dy: ArrayView2<F>,
) -> Array2<F> {
    let (dw, db) = grads.mat_vec_mut(w, b);
    linear_backward(x, params.mat(w), dy, dw, db)
}

pub(crate) fn norm<F: Real>(
    params: &Params<F>,
    ids: &NormIds,
    x: ArrayView2<F>,
) -> (Array2<F>, NormCache<F>) {
    layer_norm(x, params.vec(ids.gain), params.vec(ids.bias))
}

fn norm_backward<F: Real>(
    params: &Params<F>,
    ids: &NormIds,
    cache: &NormCache<F>,
    dy: ArrayView2<F>,
    grads: &mut Gradients<F>,
) -> Array2<F> {
    let (dg, db) = grads.vec_pair_mut(ids.gain, ids.bias);
    layer_norm_backward(cache, params.vec(ids.gain), dy, dg, db)
}

fn pack(batch_rows: &ndarray::Array2<u32>, lens: &[usize]) -> Vec<u32> {
    let mut out = Vec::with_capacity(lens.iter().sum());
    for (row, &len) in batch_rows.rows().into_iter().zip(lens) {
        out.extend(row.iter().take(len));
    }
    out
}

/// Runs the encoder on packed source rows. Shared with incremental decoding.
pub(crate) fn encode<F: Real, R: Rng>(
    params: &Params<F>,
    src_tokens: &[u32],
    src_seg: &Segments,
    mut rng: Option<&mut R>,
    mut caches: Option<&mut Vec<EncCache<F>>>,
) -> Array2<F> {
    let p = params.config.dropout;
    let mut x = embed(params, src_tokens, src_seg);
    for layer in &params.layout.encoder {
        let (mut a, attn) = attention(
            params,
            &layer.attn,
            x.view(),
            x.view(),
            src_seg,
            src_seg,
            false,
            rng.as_deref_mut(),
        );
        let attn_drop = dropout_mask(rng.as_deref_mut(), p, a.dim());
        apply_mask(&mut a, &attn_drop);
        a += &x;
        let (h, ln1) = norm(params, &layer.ln1, a.view());
        let (mut f, ffn) = feed_forward(params, &layer.ffn, h.view(), rng.as_deref_mut());
        let ffn_drop = dropout_mask(rng.as_deref_mut(), p, f.dim());
        apply_mask(&mut f, &ffn_drop);
        f += &h;
        let (out, ln2) = norm(params, &layer.ln2, f.view());
        if let Some(c) = caches.as_deref_mut() {
            c.push(EncCache {
                input: x,
                attn,
                attn_drop,
                ln1_out: h,
                ln1,
                ffn,
                ffn_drop,
                ln2,
            });
        }
        x = out;
    }
    x
}

/// Forward pass. In [`Mode::Train`] dropout is drawn from `rng` and the
/// activations are kept for [`backward`]; eval mode is deterministic.
pub fn forward<F: Real, R: Rng>(
    params: &Params<F>,
    batch: &Batch,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardOutput<F>, ModelError> {
    let cfg = &params.config;
    let max_len = cfg.max_len;
    for &len in batch.src_lens.iter().chain(&batch.tgt_lens) {
        if len > max_len {
            return Err(ModelError::TooLong { len, max_len });
        }
    }
    let src_seg = Segments::new(&batch.src_lens);
    let tgt_seg = Segments::new(&batch.tgt_lens);
    let src_tokens = pack(&batch.src, &batch.src_lens);
    let tgt_tokens = pack(&batch.tgt_in, &batch.tgt_lens);
    check_tokens(&src_tokens, cfg.vocab_size)?;
    check_tokens(&tgt_tokens, cfg.vocab_size)?;
    check_tokens(&pack(&batch.tgt_out, &batch.tgt_lens), cfg.vocab_size)?;

    let train = mode == Mode::Train;
    let mut rng = train.then_some(rng);
    let p = cfg.dropout;

    let mut enc_handles = Vec::new();
    let enc_out = encode(
        params,
        &src_tokens,
        &src_seg,
        rng.as_deref_mut(),
        train.then_some(&mut enc_handles),
    );

    let mut dec_caches = Vec::new();
    let mut x = embed(params, &tgt_tokens, &tgt_seg);
    for layer in &params.layout.decoder {
        let (mut s, self_attn) = attention(
            params,
            &layer.self_attn,
            x.view(),
            x.view(),
            &tgt_seg,
            &tgt_seg,
            true,
            rng.as_deref_mut(),
        );
        let self_drop = dropout_mask(rng.as_deref_mut(), p, s.dim());
        apply_mask(&mut s, &self_drop);
        s += &x;
        let (h1, ln1) = norm(params, &layer.ln1, s.view());
        let (mut c, cross_attn) = attention(
            params,
            &layer.cross_attn,
            h1.view(),
            enc_out.view(),
            &tgt_seg,
            &src_seg,
            false,
            rng.as_deref_mut(),
        );
        let cross_drop = dropout_mask(rng.as_deref_mut(), p, c.dim());
        apply_mask(&mut c, &cross_drop);
        c += &h1;
        let (h2, ln2) = norm(params, &layer.ln2, c.view());
        let (mut f, ffn) = feed_forward(params, &layer.ffn, h2.view(), rng.as_deref_mut());
        let ffn_drop = dropout_mask(rng.as_deref_mut(), p, f.dim());
        apply_mask(&mut f, &ffn_drop);
        f += &h2;
        let (out, ln3) = norm(params, &layer.ln3, f.view());
        if train {
            dec_caches.push(DecCache {
                input: x,
                self_attn,
                self_drop,
                ln1_out: h1,
                ln1,
                cross_attn,
                cross_drop,
                ln2_out: h2,
                ln2,
                ffn,
                ffn_drop,
                ln3,
            });
        }
        x = out;
    }

    let logprobs_packed = output_logprobs(params, x.view());
    let (bsz, tlen) = batch.tgt_in.dim();
    let v = cfg.vocab_size;
    let uniform = -F::of((v as f64).ln());
    let mut dense = Array3::from_elem((bsz, tlen, v), uniform);
    for b in 0..bsz {
        let off = tgt_seg.offsets[b];
        for t in 0..tgt_seg.lens[b] {
            dense
                .slice_mut(s![b, t, ..])
                .assign(&logprobs_packed.row(off + t));
        }
    }
    let cache = train.then(|| Cache {
        generation: params.generation(),
        src_tokens,
        tgt_tokens,
        src_seg,
        tgt_seg,
        encoder: enc_handles,
        decoder: dec_caches,
        enc_out,
        dec_out: x,
        logprobs: logprobs_packed,
    });
    Ok(ForwardOutput {
        logprobs: dense,
        cache,
    })
}

/// Tied output projection followed by log-softmax.
pub(crate) fn output_logprobs<F: Real>(params: &Params<F>, y: ArrayView2<F>) -> Array2<F> {
    let emb = params.mat(params.layout.embed);
    let mut logits = linear(y, emb.t(), params.vec(params.layout.out_bias));
    log_softmax_rows(logits.view_mut());
    logits
}

/// Gradient of the loss implied by `weights` with respect to every parameter.
pub fn backward<F: Real>(
    params: &Params<F>,
    output: &ForwardOutput<F>,
    weights: &TargetWeights<F>,
) -> Result<Gradients<F>, ModelError> {
    let mut grads = Gradients::zeros_like(params);
    backward_into(params, output, weights, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but accumulates into an existing buffer.
pub fn backward_into<F: Real>(
    params: &Params<F>,
    output: &ForwardOutput<F>,
    weights: &TargetWeights<F>,
    grads: &mut Gradients<F>,
) -> Result<(), ModelError> {
    let cache = output
        .cache
        .as_ref()
        .ok_or(ModelError::StaleActivations("forward ran in eval mode"))?;
    if cache.generation != params.generation() {
        return Err(ModelError::StaleActivations(
            "parameters changed since the forward pass",
        ));
    }
    if grads.values.len() != params.values.len() {
        return Err(ModelError::Shape("gradient buffer does not match params".into()));
    }
    let (bsz, tlen, _) = output.logprobs.dim();
    if weights.batch != bsz || weights.time != tlen {
        return Err(ModelError::Shape(format!(
            "weights are [{}, {}] but logprobs are [{bsz}, {tlen}]",
            weights.batch, weights.time
        )));
    }
    let layout = params.layout.clone();
    let d = params.config.d_model;

    // d loss / d logits = (Σw) · softmax - w
    let mut dlogits = Array2::zeros(cache.logprobs.raw_dim());
    for b in 0..bsz {
        let off = cache.tgt_seg.offsets[b];
        for t in 0..cache.tgt_seg.lens[b] {
            let w = weights.at(b, t);
            if w.is_empty() {
                continue;
            }
            let total = w.iter().map(|&(_, x)| x).sum::<F>();
            let row = off + t;
            let mut drow = dlogits.row_mut(row);
            for (o, &lp) in drow.iter_mut().zip(cache.logprobs.row(row)) {
                *o = total * lp.exp();
            }
            for &(k, x) in w {
                drow[k as usize] -= x;
            }
        }
    }

    let emb = params.mat(layout.embed);
    grads
        .vec_mut(layout.out_bias)
        .scaled_add(F::one(), &dlogits.sum_axis(Axis(0)));
    {
        let mut de = grads.mat_mut(layout.embed);
        general_mat_mul(F::one(), &dlogits.t(), &cache.dec_out, F::one(), &mut de);
    }
    let mut dx = matmul(dlogits.view(), emb);

    let mut denc = Array2::zeros(cache.enc_out.raw_dim());
    for (ids, c) in layout.decoder.iter().zip(&cache.decoder).rev() {
        let dsum3 = norm_backward(params, &ids.ln3, &c.ln3, dx.view(), grads);
        let mut dh2 = dsum3.clone();
        let mut df = dsum3;
        apply_mask(&mut df, &c.ffn_drop);
        dh2 += &feed_forward_backward(params, &ids.ffn, &c.ffn, c.ln2_out.view(), df.view(), grads);

        let dsum2 = norm_backward(params, &ids.ln2, &c.ln2, dh2.view(), grads);
        let mut dh1 = dsum2.clone();
        let mut dc = dsum2;
        apply_mask(&mut dc, &c.cross_drop);
        let (dq, dkv) = attention_backward(
            params,
            &ids.cross_attn,
            &c.cross_attn,
            c.ln1_out.view(),
            cache.enc_out.view(),
            &cache.tgt_seg,
            &cache.src_seg,
            dc.view(),
            grads,
        );
        dh1 += &dq;
        denc += &dkv;

        let dsum1 = norm_backward(params, &ids.ln1, &c.ln1, dh1.view(), grads);
        let mut dinput = dsum1.clone();
        let mut ds = dsum1;
        apply_mask(&mut ds, &c.self_drop);
        let (dq, dkv) = attention_backward(
            params,
            &ids.self_attn,
            &c.self_attn,
            c.input.view(),
            c.input.view(),
            &cache.tgt_seg,
            &cache.tgt_seg,
            ds.view(),
            grads,
        );
        dinput += &dq;
        dinput += &dkv;
        dx = dinput;
    }
    embed_backward(grads, layout.embed, &cache.tgt_tokens, dx.view(), d);

    let mut dx = denc;
    for (ids, c) in layout.encoder.iter().zip(&cache.encoder).rev() {
        let dsum2 = norm_backward(params, &ids.ln2, &c.ln2, dx.view(), grads);
        let mut dh = dsum2.clone();
        let mut df = dsum2;
        apply_mask(&mut df, &c.ffn_drop);
        dh += &feed_forward_backward(params, &ids.ffn, &c.ffn, c.ln1_out.view(), df.view(), grads);

        let dsum1 = norm_backward(params, &ids.ln1, &c.ln1, dh.view(), grads);
        let mut dinput = dsum1.clone();
        let mut da = dsum1;
        apply_mask(&mut da, &c.attn_drop);
        let (dq, dkv) = attention_backward(
            params,
            &ids.attn,
            &c.attn,
            c.input.view(),
            c.input.view(),
            &cache.src_seg,
            &cache.src_seg,
            da.view(),
            grads,
        );
        dinput += &dq;
        dinput += &dkv;
        dx = dinput;
    }
    embed_backward(grads, layout.embed, &cache.src_tokens, dx.view(), d);
    Ok(())
}

fn embed_backward<F: Real>(
    grads: &mut Gradients<F>,
    id: usize,
    tokens: &[u32],
    dx: ArrayView2<F>,
    d: usize,
) {
    let scale = F::of((d as f64).sqrt());
    let mut de = grads.mat_mut(id);
    for (&tok, row) in tokens.iter().zip(dx.rows()) {
        de.row_mut(tok as usize).scaled_add(scale, &row);
    }
}
