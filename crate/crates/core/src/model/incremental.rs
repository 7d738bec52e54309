//! Token-at-a-time decoding with cached keys and values, used by search.

use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;

use super::forward::{encode, feed_forward, norm, output_logprobs, Segments};
use super::ops::linear;
use super::params::{AttnIds, Params};
use super::ModelError;
use crate::eval::StepDecoder;
use crate::Real;

/// Encoder output for one source sentence plus per-layer cross-attention
/// keys and values.
pub struct EncoderMemory<F> {
    pub output: Array2<F>,
    cross_k: Vec<Array2<F>>,
    cross_v: Vec<Array2<F>>,
}

impl<F: Real> EncoderMemory<F> {
    pub fn new(params: &Params<F>, src: &[u32]) -> Result<Self, ModelError> {
        let cfg = &params.config;
        if src.len() > cfg.max_len {
            return Err(ModelError::TooLong {
                len: src.len(),
                max_len: cfg.max_len,
            });
        }
        if let Some(&id) = src.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        let seg = Segments::new(&[src.len()]);
        let output = encode::<F, ChaCha8Rng>(params, src, &seg, None, None);
        let (cross_k, cross_v) = params
            .layout
            .decoder
            .iter()
            .map(|l| {
                let a = &l.cross_attn;
                (
                    linear(output.view(), params.mat(a.wk), params.vec(a.bk)),
                    linear(output.view(), params.mat(a.wv), params.vec(a.bv)),
                )
            })
            .unzip();
        Ok(EncoderMemory {
            output,
            cross_k,
            cross_v,
        })
    }
}

/// Self-attention cache of one hypothesis.
#[derive(Debug, Clone)]
pub struct DecoderState<F> {
    pub position: usize,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
}

/// Attends one query row over `n` cached rows (row-major, width `d`).
fn attend_row<F: Real>(
    q: &[F],
    keys: &[F],
    values: &[F],
    n: usize,
    d: usize,
    heads: usize,
    out: &mut [F],
) {
    let dh = d / heads;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut scores = vec![F::zero(); n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut max = F::neg_infinity();
        for (j, s) in scores.iter_mut().enumerate() {
            let k = &keys[j * d + cols.start..j * d + cols.end];
            *s = q[cols.clone()]
                .iter()
                .zip(k)
                .map(|(&a, &b)| a * b)
                .sum::<F>()
                * scale;
            max = max.max(*s);
        }
        let mut total = F::zero();
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        let o = &mut out[cols.clone()];
        o.iter_mut().for_each(|v| *v = F::zero());
        for (j, &s) in scores.iter().enumerate() {
            let w = s / total;
            let v = &values[j * d + cols.start..j * d + cols.end];
            for (ov, &vv) in o.iter_mut().zip(v) {
                *ov += w * vv;
            }
        }
    }
}

fn cross_attend<F: Real>(
    params: &Params<F>,
    ids: &AttnIds,
    x: ArrayView2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
) -> Array2<F> {
    let d = params.config.d_model;
    let q = linear(x, params.mat(ids.wq), params.vec(ids.bq));
    let n = k.nrows();
    let (ks, vs) = (
        k.as_slice().expect("contiguous"),
        v.as_slice().expect("contiguous"),
    );
    let mut ctx = Array2::zeros(q.raw_dim());
    for (qr, mut cr) in q.rows().into_iter().zip(ctx.rows_mut()) {
        attend_row(
            qr.as_slice().expect("contiguous"),
            ks,
            vs,
            n,
            d,
            params.config.n_heads,
            cr.as_slice_mut().expect("contiguous"),
        );
    }
    linear(ctx.view(), params.mat(ids.wo), params.vec(ids.bo))
}

/// A model bound to one encoded source sentence, ready for step-wise search.
pub struct TransformerDecoder<'a, F> {
    params: &'a Params<F>,
    memory: EncoderMemory<F>,
    /// Ids that are never generated (padding, begin marker).
    banned: Vec<u32>,
    bos: u32,
    eos: u32,
}

impl<'a, F: Real> TransformerDecoder<'a, F> {
    pub fn new(
        params: &'a Params<F>,
        src: &[u32],
        specials: crate::bpe::Specials,
    ) -> Result<Self, ModelError> {
        Ok(TransformerDecoder {
            params,
            memory: EncoderMemory::new(params, src)?,
            banned: vec![specials.pad, specials.bos],
            bos: specials.bos,
            eos: specials.eos,
        })
    }

    pub fn with_banned(mut self, banned: Vec<u32>) -> Self {
        self.banned = banned;
        self
    }

    /// Unmasked next-token log-probabilities after feeding `tokens`.
    pub fn step_logprobs(
        &self,
        states: &mut [DecoderState<F>],
        tokens: &[u32],
    ) -> Result<Array2<F>, ModelError> {
        let p = self.params;
        let cfg = &p.config;
        let d = cfg.d_model;
        let h = states.len();
        let scale = F::of((d as f64).sqrt());
        let emb = p.mat(p.layout.embed);
        let mut x = Array2::zeros((h, d));
        for (i, (st, &tok)) in states.iter().zip(tokens).enumerate() {
            if st.position >= cfg.max_len {
                return Err(ModelError::TooLong {
                    len: st.position + 1,
                    max_len: cfg.max_len,
                });
            }
            let pos = p.positions.row(st.position);
            for ((o, &e), &pv) in x.row_mut(i).iter_mut().zip(emb.row(tok as usize)).zip(pos) {
                *o = e * scale + pv;
            }
        }
        for (l, layer) in p.layout.decoder.iter().enumerate() {
            let a = &layer.self_attn;
            let q = linear(x.view(), p.mat(a.wq), p.vec(a.bq));
            let k = linear(x.view(), p.mat(a.wk), p.vec(a.bk));
            let v = linear(x.view(), p.mat(a.wv), p.vec(a.bv));
            let mut ctx = Array2::zeros((h, d));
            for (i, st) in states.iter_mut().enumerate() {
                st.keys[l].extend(k.row(i).iter());
                st.values[l].extend(v.row(i).iter());
                let n = st.keys[l].len() / d;
                attend_row(
                    q.row(i).as_slice().expect("contiguous"),
                    &st.keys[l],
                    &st.values[l],
                    n,
                    d,
                    cfg.n_heads,
                    ctx.row_mut(i).as_slice_mut().expect("contiguous"),
                );
            }
            let mut s = linear(ctx.view(), p.mat(a.wo), p.vec(a.bo));
            s += &x;
            let (h1, _) = norm(p, &layer.ln1, s.view());
            let mut c = cross_attend(
                p,
                &layer.cross_attn,
                h1.view(),
                &self.memory.cross_k[l],
                &self.memory.cross_v[l],
            );
            c += &h1;
            let (h2, _) = norm(p, &layer.ln2, c.view());
            let (mut f, _) = feed_forward::<F, ChaCha8Rng>(p, &layer.ffn, h2.view(), None);
            f += &h2;
            x = norm(p, &layer.ln3, f.view()).0;
        }
        for st in states.iter_mut() {
            st.position += 1;
        }
        Ok(output_logprobs(p, x.view()))
    }
}

impl<F: Real> StepDecoder for TransformerDecoder<'_, F> {
    type State = DecoderState<F>;

    fn bos(&self) -> u32 {
        self.bos
    }

    fn eos(&self) -> u32 {
        self.eos
    }

    fn initial_state(&self) -> DecoderState<F> {
        let n = self.params.config.n_layers;
        DecoderState {
            position: 0,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
        }
    }

    fn step(&self, states: &mut [DecoderState<F>], tokens: &[u32]) -> Vec<Vec<f64>> {
        let lp = self
            .step_logprobs(states, tokens)
            .expect("search never exceeds the model's max_len");
        lp.rows()
            .into_iter()
            .map(|row| {
                let mut out: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                for &b in &self.banned {
                    out[b as usize] = f64::NEG_INFINITY;
                }
                out
            })
            .collect()
    }
}

/// Incremental decoding must agree with the batched forward pass.
#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::Specials;
    use crate::corpus::{Batch, Example};
    use crate::model::{forward, ModelConfig, Mode};
    use ndarray::s;
    use rand::SeedableRng;

    #[test]
    fn incremental_matches_full_forward() {
        let cfg = ModelConfig {
            d_model: 12,
            d_ff: 20,
            n_layers: 2,
            n_heads: 3,
            dropout: 0.1,
            vocab_size: 17,
            max_len: 16,
        };
        let params = Params::<f64>::init(&cfg, 3).unwrap();
        let ex = Example {
            src: vec![5, 9, 11, 2],
            tgt: vec![7, 8, 13, 6, 2],
        };
        let batch = Batch::from_examples(0, &[(0, &ex)], Specials::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = forward(&params, &batch, Mode::Eval, &mut rng).unwrap();

        let dec = TransformerDecoder::new(&params, &ex.src, Specials::default()).unwrap();
        let mut states = vec![dec.initial_state()];
        for t in 0..ex.tgt.len() {
            let tok = batch.tgt_in[[0, t]];
            let lp = dec.step_logprobs(&mut states, &[tok]).unwrap();
            let expected = full.logprobs.slice(s![0, t, ..]);
            for (a, b) in lp.row(0).iter().zip(expected) {
                assert!((a - b).abs() < 1e-10, "t={t}: {a} vs {b}");
            }
        }
    }
}
