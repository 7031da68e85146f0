use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, Real};

/// `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<R> {
    pub w: Array2<R>,
    pub b: Array1<R>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<R> {
    pub gain: Array1<R>,
    pub bias: Array1<R>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<R> {
    pub q: Linear<R>,
    pub k: Linear<R>,
    pub v: Linear<R>,
    pub o: Linear<R>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<R> {
    pub up: Linear<R>,
    pub down: Linear<R>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<R> {
    pub ln_attn: LayerNormParams<R>,
    pub attn: Attention<R>,
    pub ln_ff: LayerNormParams<R>,
    pub ff: FeedForward<R>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<R> {
    pub ln_self: LayerNormParams<R>,
    pub self_attn: Attention<R>,
    pub ln_cross: LayerNormParams<R>,
    pub cross_attn: Attention<R>,
    pub ln_ff: LayerNormParams<R>,
    pub ff: FeedForward<R>,
}

/// All trainable weights. The same shape doubles as the gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<R> {
    pub config: ModelConfig,
    /// Shared by encoder and decoder, `vocab x model_dim`.
    pub embedding: Array2<R>,
    pub encoder: Vec<EncoderLayer<R>>,
    pub decoder: Vec<DecoderLayer<R>>,
    /// Applied to each stack's output in pre-norm mode only.
    pub encoder_norm: LayerNormParams<R>,
    pub decoder_norm: LayerNormParams<R>,
    pub output: Linear<R>,
}

struct Init<'a, Rn> {
    rng: &'a mut Rn,
}

impl<Rn: Rng> Init<'_, Rn> {
    fn normal<R: Real>(&mut self, rows: usize, cols: usize, std: f64) -> Array2<R> {
        let dist = Normal::new(0.0, std).expect("valid std");
        Array2::from_shape_simple_fn((rows, cols), || R::of(dist.sample(self.rng)))
    }

    fn linear<R: Real>(&mut self, fan_in: usize, fan_out: usize) -> Linear<R> {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        Linear {
            w: self.normal(fan_in, fan_out, std),
            b: Array1::zeros(fan_out),
        }
    }

    fn attention<R: Real>(&mut self, d: usize) -> Attention<R> {
        Attention {
            q: self.linear(d, d),
            k: self.linear(d, d),
            v: self.linear(d, d),
            o: self.linear(d, d),
        }
    }

    fn ff<R: Real>(&mut self, d: usize, f: usize) -> FeedForward<R> {
        FeedForward {
            up: self.linear(d, f),
            down: self.linear(f, d),
        }
    }
}

fn norm<R: Real>(d: usize) -> LayerNormParams<R> {
    LayerNormParams {
        gain: Array1::ones(d),
        bias: Array1::zeros(d),
    }
}

impl<R: Real> ModelParams<R> {
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng };
        let (d, f, v) = (config.model_dim, config.feedforward_dim, config.vocab_size);
        let embedding = init.normal(v, d, (d as f64).powf(-0.5));
        let encoder = (0..config.num_layers)
            .map(|_| EncoderLayer {
                ln_attn: norm(d),
                attn: init.attention(d),
                ln_ff: norm(d),
                ff: init.ff(d, f),
            })
            .collect();
        let decoder = (0..config.num_layers)
            .map(|_| DecoderLayer {
                ln_self: norm(d),
                self_attn: init.attention(d),
                ln_cross: norm(d),
                cross_attn: init.attention(d),
                ln_ff: norm(d),
                ff: init.ff(d, f),
            })
            .collect();
        // Small output weights keep initial logits near uniform.
        let output = Linear {
            w: init.normal(d, v, 0.02),
            b: Array1::zeros(v),
        };
        Self {
            config: config.clone(),
            embedding,
            encoder,
            decoder,
            encoder_norm: norm(d),
            decoder_norm: norm(d),
            output,
        }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let mut p = Self::init(config, 0);
        p.fill(R::zero());
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    pub fn fill(&mut self, value: R) {
        for t in self.tensors_mut() {
            t.fill(value);
        }
    }

    /// Every parameter tensor as a flat slice, in a fixed canonical order.
    pub fn tensors(&self) -> Vec<&[R]> {
        let mut out: Vec<&[R]> = vec![self.embedding.as_slice().expect("standard layout")];
        fn lin<'a, R>(out: &mut Vec<&'a [R]>, l: &'a Linear<R>) {
            out.push(l.w.as_slice().expect("standard layout"));
            out.push(l.b.as_slice().expect("standard layout"));
        }
        fn ln<'a, R>(out: &mut Vec<&'a [R]>, n: &'a LayerNormParams<R>) {
            out.push(n.gain.as_slice().expect("standard layout"));
            out.push(n.bias.as_slice().expect("standard layout"));
        }
        fn attn<'a, R>(out: &mut Vec<&'a [R]>, a: &'a Attention<R>) {
            for l in [&a.q, &a.k, &a.v, &a.o] {
                lin(out, l);
            }
        }
        for layer in &self.encoder {
            ln(&mut out, &layer.ln_attn);
            attn(&mut out, &layer.attn);
            ln(&mut out, &layer.ln_ff);
            lin(&mut out, &layer.ff.up);
            lin(&mut out, &layer.ff.down);
        }
        for layer in &self.decoder {
            ln(&mut out, &layer.ln_self);
            attn(&mut out, &layer.self_attn);
            ln(&mut out, &layer.ln_cross);
            attn(&mut out, &layer.cross_attn);
            ln(&mut out, &layer.ln_ff);
            lin(&mut out, &layer.ff.up);
            lin(&mut out, &layer.ff.down);
        }
        ln(&mut out, &self.encoder_norm);
        ln(&mut out, &self.decoder_norm);
        lin(&mut out, &self.output);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [R]> {
        let mut out: Vec<&mut [R]> = vec![self.embedding.as_slice_mut().expect("standard layout")];
        fn lin<'a, R>(out: &mut Vec<&'a mut [R]>, l: &'a mut Linear<R>) {
            out.push(l.w.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("standard layout"));
        }
        fn ln<'a, R>(out: &mut Vec<&'a mut [R]>, n: &'a mut LayerNormParams<R>) {
            out.push(n.gain.as_slice_mut().expect("standard layout"));
            out.push(n.bias.as_slice_mut().expect("standard layout"));
        }
        fn attn<'a, R>(out: &mut Vec<&'a mut [R]>, a: &'a mut Attention<R>) {
            lin(out, &mut a.q);
            lin(out, &mut a.k);
            lin(out, &mut a.v);
            lin(out, &mut a.o);
        }
        for layer in &mut self.encoder {
            ln(&mut out, &mut layer.ln_attn);
            attn(&mut out, &mut layer.attn);
            ln(&mut out, &mut layer.ln_ff);
            lin(&mut out, &mut layer.ff.up);
            lin(&mut out, &mut layer.ff.down);
        }
        for layer in &mut self.decoder {
            ln(&mut out, &mut layer.ln_self);
            attn(&mut out, &mut layer.self_attn);
            ln(&mut out, &mut layer.ln_cross);
            attn(&mut out, &mut layer.cross_attn);
            ln(&mut out, &mut layer.ln_ff);
            lin(&mut out, &mut layer.ff.up);
            lin(&mut out, &mut layer.ff.down);
        }
        ln(&mut out, &mut self.encoder_norm);
        ln(&mut out, &mut self.decoder_norm);
        lin(&mut out, &mut self.output);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Convert to another precision.
    pub fn cast<S: Real>(&self) -> ModelParams<S> {
        let mut out = ModelParams::<S>::zeros(&self.config);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = S::of(s.as_f64());
            }
        }
        out
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams<R>, scale: R) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}
