//! Full encoder-decoder forward pass, its backward pass and the loss.

use ndarray::{Array1, Array2, Axis};

use super::layers::{
    attention_backward, attention_forward, dropout, dropout_backward, ff_backward, ff_forward, layer_norm_backward,
    layer_norm_forward, linear_backward, linear_forward, positional, AttnCache, FfCache, NormCache,
};
use super::params::{DecoderLayer, EncoderLayer, ModelParams};
use super::{ModelError, Real};

type Mask<R> = Option<Array2<R>>;

#[derive(Debug, Clone)]
struct EncLayerCache<R> {
    ln_attn: NormCache<R>,
    attn: AttnCache<R>,
    drop_attn: Mask<R>,
    ln_ff: NormCache<R>,
    ff: FfCache<R>,
    drop_ff: Mask<R>,
}

#[derive(Debug, Clone)]
struct DecLayerCache<R> {
    ln_self: NormCache<R>,
    self_attn: AttnCache<R>,
    drop_self: Mask<R>,
    ln_cross: NormCache<R>,
    cross_attn: AttnCache<R>,
    drop_cross: Mask<R>,
    ln_ff: NormCache<R>,
    ff: FfCache<R>,
    drop_ff: Mask<R>,
}

/// Everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardCache<R> {
    enc_ids: Vec<u32>,
    dec_ids: Vec<u32>,
    drop_enc_embed: Mask<R>,
    drop_dec_embed: Mask<R>,
    enc_layers: Vec<EncLayerCache<R>>,
    dec_layers: Vec<DecLayerCache<R>>,
    enc_norm: Option<NormCache<R>>,
    dec_norm: Option<NormCache<R>>,
    enc_out: Array2<R>,
    dec_hidden: Array2<R>,
}

struct Dropper<'a> {
    rate: f64,
    rng: Option<&'a mut dyn rand::RngCore>,
}

impl Dropper<'_> {
    fn apply<R: Real>(&mut self, x: Array2<R>) -> (Array2<R>, Mask<R>) {
        dropout(x, self.rate, self.rng.as_mut().map(|r| &mut **r as &mut dyn rand::RngCore))
    }
}

fn check_ids<R: Real>(p: &ModelParams<R>, ids: &[u32], mask: &[bool], what: &'static str, max: usize) -> Result<(), ModelError> {
    if ids.is_empty() || ids.len() > max {
        return Err(ModelError::Length {
            what,
            len: ids.len(),
            max,
        });
    }
    if mask.len() != ids.len() {
        return Err(ModelError::Shape {
            what: "pad mask length",
            a: mask.len(),
            b: ids.len(),
        });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= p.config.vocab_size) {
        return Err(ModelError::TokenId(bad));
    }
    Ok(())
}

pub(crate) fn embed<R: Real>(p: &ModelParams<R>, ids: &[u32]) -> Array2<R> {
    let d = p.config.model_dim;
    let scale = R::of((d as f64).sqrt());
    let mut x = positional::<R>(ids.len(), d);
    for (mut row, &id) in x.rows_mut().into_iter().zip(ids) {
        row.scaled_add(scale, &p.embedding.row(id as usize));
    }
    x
}

fn encoder_layer<R: Real>(
    l: &EncoderLayer<R>,
    x: Array2<R>,
    mask: &[bool],
    heads: usize,
    pre_norm: bool,
    drop: &mut Dropper<'_>,
) -> (Array2<R>, EncLayerCache<R>) {
    if pre_norm {
        let (h, ln_attn) = layer_norm_forward(&l.ln_attn, &x);
        let (a, attn) = attention_forward(&l.attn, &h, &h, mask, false, heads);
        let (a, drop_attn) = drop.apply(a);
        let x = x + a;
        let (h, ln_ff) = layer_norm_forward(&l.ln_ff, &x);
        let (f, ff) = ff_forward(&l.ff, &h);
        let (f, drop_ff) = drop.apply(f);
        (
            x + f,
            EncLayerCache {
                ln_attn,
                attn,
                drop_attn,
                ln_ff,
                ff,
                drop_ff,
            },
        )
    } else {
        let (a, attn) = attention_forward(&l.attn, &x, &x, mask, false, heads);
        let (a, drop_attn) = drop.apply(a);
        let (x, ln_attn) = layer_norm_forward(&l.ln_attn, &(x + a));
        let (f, ff) = ff_forward(&l.ff, &x);
        let (f, drop_ff) = drop.apply(f);
        let (x, ln_ff) = layer_norm_forward(&l.ln_ff, &(x + f));
        (
            x,
            EncLayerCache {
                ln_attn,
                attn,
                drop_attn,
                ln_ff,
                ff,
                drop_ff,
            },
        )
    }
}

fn encoder_layer_backward<R: Real>(
    l: &EncoderLayer<R>,
    c: &EncLayerCache<R>,
    dy: Array2<R>,
    pre_norm: bool,
    g: &mut EncoderLayer<R>,
) -> Array2<R> {
    if pre_norm {
        let df = dropout_backward(&dy, &c.drop_ff);
        let dh = ff_backward(&l.ff, &c.ff, &df, &mut g.ff);
        let dx = dy + layer_norm_backward(&l.ln_ff, &c.ln_ff, &dh, &mut g.ln_ff);
        let da = dropout_backward(&dx, &c.drop_attn);
        let (dq, dkv) = attention_backward(&l.attn, &c.attn, &da, &mut g.attn);
        let dh = dq + dkv;
        dx + layer_norm_backward(&l.ln_attn, &c.ln_attn, &dh, &mut g.ln_attn)
    } else {
        let dz = layer_norm_backward(&l.ln_ff, &c.ln_ff, &dy, &mut g.ln_ff);
        let df = dropout_backward(&dz, &c.drop_ff);
        let dx = &dz + &ff_backward(&l.ff, &c.ff, &df, &mut g.ff);
        let dz = layer_norm_backward(&l.ln_attn, &c.ln_attn, &dx, &mut g.ln_attn);
        let da = dropout_backward(&dz, &c.drop_attn);
        let (dq, dkv) = attention_backward(&l.attn, &c.attn, &da, &mut g.attn);
        dz + dq + dkv
    }
}

#[allow(clippy::too_many_arguments)]
fn decoder_layer<R: Real>(
    l: &DecoderLayer<R>,
    x: Array2<R>,
    enc: &Array2<R>,
    enc_mask: &[bool],
    dec_mask: &[bool],
    heads: usize,
    pre_norm: bool,
    drop: &mut Dropper<'_>,
) -> (Array2<R>, DecLayerCache<R>) {
    if pre_norm {
        let (h, ln_self) = layer_norm_forward(&l.ln_self, &x);
        let (a, self_attn) = attention_forward(&l.self_attn, &h, &h, dec_mask, true, heads);
        let (a, drop_self) = drop.apply(a);
        let x = x + a;
        let (h, ln_cross) = layer_norm_forward(&l.ln_cross, &x);
        let (a, cross_attn) = attention_forward(&l.cross_attn, &h, enc, enc_mask, false, heads);
        let (a, drop_cross) = drop.apply(a);
        let x = x + a;
        let (h, ln_ff) = layer_norm_forward(&l.ln_ff, &x);
        let (f, ff) = ff_forward(&l.ff, &h);
        let (f, drop_ff) = drop.apply(f);
        (
            x + f,
            DecLayerCache {
                ln_self,
                self_attn,
                drop_self,
                ln_cross,
                cross_attn,
                drop_cross,
                ln_ff,
                ff,
                drop_ff,
            },
        )
    } else {
        let (a, self_attn) = attention_forward(&l.self_attn, &x, &x, dec_mask, true, heads);
        let (a, drop_self) = drop.apply(a);
        let (x, ln_self) = layer_norm_forward(&l.ln_self, &(x + a));
        let (a, cross_attn) = attention_forward(&l.cross_attn, &x, enc, enc_mask, false, heads);
        let (a, drop_cross) = drop.apply(a);
        let (x, ln_cross) = layer_norm_forward(&l.ln_cross, &(x + a));
        let (f, ff) = ff_forward(&l.ff, &x);
        let (f, drop_ff) = drop.apply(f);
        let (x, ln_ff) = layer_norm_forward(&l.ln_ff, &(x + f));
        (
            x,
            DecLayerCache {
                ln_self,
                self_attn,
                drop_self,
                ln_cross,
                cross_attn,
                drop_cross,
                ln_ff,
                ff,
                drop_ff,
            },
        )
    }
}

/// Returns `(d x, d enc)`.
fn decoder_layer_backward<R: Real>(
    l: &DecoderLayer<R>,
    c: &DecLayerCache<R>,
    dy: Array2<R>,
    pre_norm: bool,
    g: &mut DecoderLayer<R>,
) -> (Array2<R>, Array2<R>) {
    if pre_norm {
        let df = dropout_backward(&dy, &c.drop_ff);
        let dh = ff_backward(&l.ff, &c.ff, &df, &mut g.ff);
        let dx = dy + layer_norm_backward(&l.ln_ff, &c.ln_ff, &dh, &mut g.ln_ff);
        let da = dropout_backward(&dx, &c.drop_cross);
        let (dq, denc) = attention_backward(&l.cross_attn, &c.cross_attn, &da, &mut g.cross_attn);
        let dx = dx + layer_norm_backward(&l.ln_cross, &c.ln_cross, &dq, &mut g.ln_cross);
        let da = dropout_backward(&dx, &c.drop_self);
        let (dq, dkv) = attention_backward(&l.self_attn, &c.self_attn, &da, &mut g.self_attn);
        let dh = dq + dkv;
        (dx + layer_norm_backward(&l.ln_self, &c.ln_self, &dh, &mut g.ln_self), denc)
    } else {
        let dz = layer_norm_backward(&l.ln_ff, &c.ln_ff, &dy, &mut g.ln_ff);
        let df = dropout_backward(&dz, &c.drop_ff);
        let dx = &dz + &ff_backward(&l.ff, &c.ff, &df, &mut g.ff);
        let dz = layer_norm_backward(&l.ln_cross, &c.ln_cross, &dx, &mut g.ln_cross);
        let da = dropout_backward(&dz, &c.drop_cross);
        let (dq, denc) = attention_backward(&l.cross_attn, &c.cross_attn, &da, &mut g.cross_attn);
        let dx = dz + dq;
        let dz = layer_norm_backward(&l.ln_self, &c.ln_self, &dx, &mut g.ln_self);
        let da = dropout_backward(&dz, &c.drop_self);
        let (dq, dkv) = attention_backward(&l.self_attn, &c.self_attn, &da, &mut g.self_attn);
        (dz + dq + dkv, denc)
    }
}

/// Encoder stack output for one sequence (no dropout).
pub fn encode<R: Real>(p: &ModelParams<R>, enc_ids: &[u32], enc_mask: &[bool]) -> Result<Array2<R>, ModelError> {
    check_ids(p, enc_ids, enc_mask, "encoder input", p.config.max_encoder_len)?;
    let mut drop = Dropper { rate: 0.0, rng: None };
    let cfg = &p.config;
    let mut x = embed(p, enc_ids);
    for l in &p.encoder {
        x = encoder_layer(l, x, enc_mask, cfg.num_heads, cfg.pre_norm, &mut drop).0;
    }
    if cfg.pre_norm {
        x = layer_norm_forward(&p.encoder_norm, &x).0;
    }
    Ok(x)
}

/// Logits for every decoder position. `dropout_rng` enables dropout at the
/// configured rate; `None` gives the deterministic evaluation pass.
pub fn forward_with_cache<R: Real>(
    p: &ModelParams<R>,
    enc_ids: &[u32],
    dec_ids: &[u32],
    enc_mask: &[bool],
    dec_mask: &[bool],
    dropout_rng: Option<&mut dyn rand::RngCore>,
) -> Result<(Array2<R>, ForwardCache<R>), ModelError> {
    let cfg = &p.config;
    check_ids(p, enc_ids, enc_mask, "encoder input", cfg.max_encoder_len)?;
    check_ids(p, dec_ids, dec_mask, "decoder input", cfg.max_decoder_len)?;
    let mut drop = Dropper {
        rate: cfg.dropout_rate,
        rng: dropout_rng,
    };

    let (mut x, drop_enc_embed) = drop.apply(embed(p, enc_ids));
    let mut enc_layers = Vec::with_capacity(p.encoder.len());
    for l in &p.encoder {
        let (y, c) = encoder_layer(l, x, enc_mask, cfg.num_heads, cfg.pre_norm, &mut drop);
        x = y;
        enc_layers.push(c);
    }
    let (enc_out, enc_norm) = if cfg.pre_norm {
        let (y, c) = layer_norm_forward(&p.encoder_norm, &x);
        (y, Some(c))
    } else {
        (x, None)
    };

    let (mut x, drop_dec_embed) = drop.apply(embed(p, dec_ids));
    let mut dec_layers = Vec::with_capacity(p.decoder.len());
    for l in &p.decoder {
        let (y, c) = decoder_layer(l, x, &enc_out, enc_mask, dec_mask, cfg.num_heads, cfg.pre_norm, &mut drop);
        x = y;
        dec_layers.push(c);
    }
    let (dec_hidden, dec_norm) = if cfg.pre_norm {
        let (y, c) = layer_norm_forward(&p.decoder_norm, &x);
        (y, Some(c))
    } else {
        (x, None)
    };
    let logits = linear_forward(&p.output, &dec_hidden);
    Ok((
        logits,
        ForwardCache {
            enc_ids: enc_ids.to_vec(),
            dec_ids: dec_ids.to_vec(),
            drop_enc_embed,
            drop_dec_embed,
            enc_layers,
            dec_layers,
            enc_norm,
            dec_norm,
            enc_out,
            dec_hidden,
        },
    ))
}

pub fn forward<R: Real>(
    p: &ModelParams<R>,
    enc_ids: &[u32],
    dec_ids: &[u32],
    enc_mask: &[bool],
    dec_mask: &[bool],
) -> Result<Array2<R>, ModelError> {
    forward_with_cache(p, enc_ids, dec_ids, enc_mask, dec_mask, None).map(|(l, _)| l)
}

/// Accumulate `d loss / d params` into `g` given `d loss / d logits`.
pub fn backward<R: Real>(p: &ModelParams<R>, c: &ForwardCache<R>, dlogits: &Array2<R>, g: &mut ModelParams<R>) {
    let pre_norm = p.config.pre_norm;
    let scale = R::of((p.config.model_dim as f64).sqrt());

    let mut dx = linear_backward(&p.output, &c.dec_hidden, dlogits, &mut g.output);
    if let Some(nc) = &c.dec_norm {
        dx = layer_norm_backward(&p.decoder_norm, nc, &dx, &mut g.decoder_norm);
    }
    let mut denc = Array2::zeros(c.enc_out.raw_dim());
    for i in (0..p.decoder.len()).rev() {
        let (d, de) = decoder_layer_backward(&p.decoder[i], &c.dec_layers[i], dx, pre_norm, &mut g.decoder[i]);
        dx = d;
        denc += &de;
    }
    let dx = dropout_backward(&dx, &c.drop_dec_embed);
    for (row, &id) in dx.rows().into_iter().zip(&c.dec_ids) {
        g.embedding.row_mut(id as usize).scaled_add(scale, &row);
    }

    let mut dx = denc;
    if let Some(nc) = &c.enc_norm {
        dx = layer_norm_backward(&p.encoder_norm, nc, &dx, &mut g.encoder_norm);
    }
    for i in (0..p.encoder.len()).rev() {
        dx = encoder_layer_backward(&p.encoder[i], &c.enc_layers[i], dx, pre_norm, &mut g.encoder[i]);
    }
    let dx = dropout_backward(&dx, &c.drop_enc_embed);
    for (row, &id) in dx.rows().into_iter().zip(&c.enc_ids) {
        g.embedding.row_mut(id as usize).scaled_add(scale, &row);
    }
}

/// Mean cross-entropy over positions where `mask` is true, and its gradient
/// with respect to the logits. With no such position the loss is 0.
pub fn cross_entropy<R: Real>(logits: &Array2<R>, targets: &[u32], mask: &[bool]) -> (R, Array2<R>) {
    let mut grad = Array2::zeros(logits.raw_dim());
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        log::warn!("cross-entropy over an all-pad target; defining the loss as 0");
        return (R::zero(), grad);
    }
    let inv = R::one() / R::of(count as f64);
    let mut total = R::zero();
    for (i, row) in logits.rows().into_iter().enumerate() {
        if !mask[i] {
            continue;
        }
        let lsm = log_softmax(&row.to_owned());
        let t = targets[i] as usize;
        total -= lsm[t];
        let mut g = grad.row_mut(i);
        g.assign(&lsm.mapv(|v| v.exp()));
        g[t] -= R::one();
        g.mapv_inplace(|v| v * inv);
    }
    (total * inv, grad)
}

pub fn softmax<R: Real>(mut x: Array1<R>) -> Array1<R> {
    let max = x.fold(R::neg_infinity(), |a, &b| a.max(b));
    x.mapv_inplace(|v| (v - max).exp());
    let sum = x.sum();
    x / sum
}

/// Log-softmax, numerically stable; used for the loss value itself.
pub fn log_softmax<R: Real>(x: &Array1<R>) -> Array1<R> {
    let max = x.fold(R::neg_infinity(), |a, &b| a.max(b));
    let lse = x.mapv(|v| (v - max).exp()).sum().ln() + max;
    x.mapv(|v| v - lse)
}

/// Argmax predictions compared with targets on unmasked positions.
pub fn count_correct<R: Real>(logits: &Array2<R>, targets: &[u32], mask: &[bool]) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        if !mask[i] {
            continue;
        }
        total += 1;
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == targets[i] as usize {
            correct += 1;
        }
    }
    (correct, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(pre_norm: bool) -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            num_heads: 2,
            model_dim: 8,
            feedforward_dim: 16,
            dropout_rate: 0.0,
            pre_norm,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Array2::<f64>::zeros((5, 360));
        let (loss, _) = cross_entropy(&logits, &[1, 2, 3, 4, 5], &[true; 5]);
        assert!((loss - 360f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_near_zero_loss() {
        let mut logits = Array2::<f64>::zeros((2, 360));
        logits[[0, 7]] = 100.0;
        logits[[1, 9]] = 100.0;
        let (loss, _) = cross_entropy(&logits, &[7, 9], &[true, true]);
        assert!(loss < 1e-30);
        let (zero, g) = cross_entropy(&logits, &[7, 9], &[false, false]);
        assert_eq!(zero, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn post_norm_forward_runs() {
        for pre in [true, false] {
            let p = ModelParams::<f64>::init(&tiny(pre), 0);
            let l = forward(&p, &[1, 2, 3], &[357, 4], &[true; 3], &[true; 2]).unwrap();
            assert_eq!(l.dim(), (2, 360));
            assert!(l.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn bad_inputs_are_errors() {
        let p = ModelParams::<f64>::init(&tiny(true), 0);
        assert!(forward(&p, &[], &[1], &[], &[true]).is_err());
        assert!(forward(&p, &[1], &[400], &[true], &[true]).is_err());
        assert!(forward(&p, &[1, 2], &[1], &[true], &[true]).is_err());
    }
}
