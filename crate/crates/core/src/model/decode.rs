//! Token-by-token decoding with cached keys and values.

use ndarray::{s, Array1, Array2, Axis};

use super::layers::{ff_forward, layer_norm_forward, linear_forward, positional_row};
use super::network::encode;
use super::params::{Attention, ModelParams};
use super::{ModelError, Real};

struct LayerState<R> {
    self_k: Array2<R>,
    self_v: Array2<R>,
    cross_k: Array2<R>,
    cross_v: Array2<R>,
}

/// Decoder that consumes one token per call and returns the logits for the
/// next position. Equivalent to the full forward pass without dropout.
pub struct IncrementalDecoder<'a, R> {
    params: &'a ModelParams<R>,
    enc_mask: Vec<bool>,
    layers: Vec<LayerState<R>>,
    pos: usize,
}

fn attend<R: Real>(q: &Array2<R>, k: &Array2<R>, v: &Array2<R>, mask: Option<&[bool]>, heads: usize) -> Array2<R> {
    let d = q.ncols();
    let dh = d / heads;
    let scale = R::one() / R::of(dh as f64).sqrt();
    let mut out = Array2::zeros((1, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let scores: Array1<R> = k.slice(cols).dot(&q.slice(cols).row(0)) * scale;
        let allowed = |j: usize| mask.is_none_or(|m| m[j]);
        let mut max = R::neg_infinity();
        for (j, &sc) in scores.iter().enumerate() {
            if allowed(j) && sc > max {
                max = sc;
            }
        }
        if max == R::neg_infinity() {
            continue;
        }
        let mut probs = Array1::zeros(scores.len());
        let mut sum = R::zero();
        for (j, &sc) in scores.iter().enumerate() {
            if allowed(j) {
                probs[j] = (sc - max).exp();
                sum += probs[j];
            }
        }
        probs.mapv_inplace(|p| p / sum);
        out.slice_mut(cols).row_mut(0).assign(&probs.dot(&v.slice(cols)));
    }
    out
}

impl<'a, R: Real> IncrementalDecoder<'a, R> {
    pub fn new(params: &'a ModelParams<R>, enc_ids: &[u32]) -> Result<Self, ModelError> {
        let enc_mask = vec![true; enc_ids.len()];
        let enc = encode(params, enc_ids, &enc_mask)?;
        let d = params.config.model_dim;
        let layers = params
            .decoder
            .iter()
            .map(|l| LayerState {
                self_k: Array2::zeros((0, d)),
                self_v: Array2::zeros((0, d)),
                cross_k: linear_forward(&l.cross_attn.k, &enc),
                cross_v: linear_forward(&l.cross_attn.v, &enc),
            })
            .collect();
        Ok(Self {
            params,
            enc_mask,
            layers,
            pos: 0,
        })
    }

    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }

    pub fn capacity(&self) -> usize {
        self.params.config.max_decoder_len
    }

    pub fn step(&mut self, token: u32) -> Result<Array1<R>, ModelError> {
        let p = self.params;
        let cfg = &p.config;
        if self.pos >= cfg.max_decoder_len {
            return Err(ModelError::Length {
                what: "decoder input",
                len: self.pos + 1,
                max: cfg.max_decoder_len,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::TokenId(token));
        }
        let d = cfg.model_dim;
        let heads = cfg.num_heads;
        let mut x = positional_row::<R>(self.pos, d);
        x.scaled_add(R::of((d as f64).sqrt()), &p.embedding.row(token as usize));
        let mut x = x.insert_axis(Axis(0));

        for (l, st) in p.decoder.iter().zip(&mut self.layers) {
            let self_attn = |h: &Array2<R>, st: &mut LayerState<R>, a: &Attention<R>| {
                let q = linear_forward(&a.q, h);
                st.self_k.push_row(linear_forward(&a.k, h).row(0)).expect("width matches");
                st.self_v.push_row(linear_forward(&a.v, h).row(0)).expect("width matches");
                linear_forward(&a.o, &attend(&q, &st.self_k, &st.self_v, None, heads))
            };
            let cross_attn = |h: &Array2<R>, st: &LayerState<R>, a: &Attention<R>, mask: &[bool]| {
                let q = linear_forward(&a.q, h);
                linear_forward(&a.o, &attend(&q, &st.cross_k, &st.cross_v, Some(mask), heads))
            };
            if cfg.pre_norm {
                let h = layer_norm_forward(&l.ln_self, &x).0;
                x = x + self_attn(&h, st, &l.self_attn);
                let h = layer_norm_forward(&l.ln_cross, &x).0;
                x = x + cross_attn(&h, st, &l.cross_attn, &self.enc_mask);
                let h = layer_norm_forward(&l.ln_ff, &x).0;
                x = x + ff_forward(&l.ff, &h).0;
            } else {
                let a = self_attn(&x, st, &l.self_attn);
                x = layer_norm_forward(&l.ln_self, &(x + a)).0;
                let a = cross_attn(&x, st, &l.cross_attn, &self.enc_mask);
                x = layer_norm_forward(&l.ln_cross, &(x + a)).0;
                let f = ff_forward(&l.ff, &x).0;
                x = layer_norm_forward(&l.ln_ff, &(x + f)).0;
            }
        }
        if cfg.pre_norm {
            x = layer_norm_forward(&p.decoder_norm, &x).0;
        }
        self.pos += 1;
        Ok(linear_forward(&p.output, &x).row(0).to_owned())
    }
}
