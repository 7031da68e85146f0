//! Forward and backward passes of the building blocks. Each `*_backward`
//! adds parameter gradients into `g` and returns the input gradient.

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};
use rand::Rng;

use super::params::{Attention, FeedForward, LayerNormParams, Linear};
use super::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn linear_forward<R: Real>(p: &Linear<R>, x: &Array2<R>) -> Array2<R> {
    x.dot(&p.w) + &p.b
}

pub fn linear_backward<R: Real>(p: &Linear<R>, x: &Array2<R>, dy: &Array2<R>, g: &mut Linear<R>) -> Array2<R> {
    g.w += &x.t().dot(dy);
    g.b += &dy.sum_axis(Axis(0));
    dy.dot(&p.w.t())
}

#[derive(Debug, Clone)]
pub struct NormCache<R> {
    xhat: Array2<R>,
    inv_std: Array1<R>,
}

pub fn layer_norm_row<R: Real>(p: &LayerNormParams<R>, x: ArrayView1<R>) -> Array1<R> {
    let n = R::of(x.len() as f64);
    let mean = x.sum() / n;
    let var = x.mapv(|v| (v - mean) * (v - mean)).sum() / n;
    let inv = R::one() / (var + R::of(LAYER_NORM_EPS)).sqrt();
    let mut y = x.mapv(|v| (v - mean) * inv);
    y *= &p.gain;
    y += &p.bias;
    y
}

pub fn layer_norm_forward<R: Real>(p: &LayerNormParams<R>, x: &Array2<R>) -> (Array2<R>, NormCache<R>) {
    let d = R::of(x.ncols() as f64);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.mapv(|v| v * v).sum() / d;
        *inv = R::one() / (var + R::of(LAYER_NORM_EPS)).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * &p.gain + &p.bias;
    (y, NormCache { xhat, inv_std })
}

pub fn layer_norm_backward<R: Real>(
    p: &LayerNormParams<R>,
    cache: &NormCache<R>,
    dy: &Array2<R>,
    g: &mut LayerNormParams<R>,
) -> Array2<R> {
    g.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    g.bias += &dy.sum_axis(Axis(0));
    let d = R::of(dy.ncols() as f64);
    let dxhat = dy * &p.gain;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / d;
        let mean_dh_xh = (&dh * &xh).sum() / d;
        let inv = cache.inv_std[i];
        Zip::from(dx.row_mut(i))
            .and(dh)
            .and(xh)
            .for_each(|o, &a, &b| *o = inv * (a - mean_dh - b * mean_dh_xh));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<R: Real>(x: R) -> R {
    let half = R::of(0.5);
    let u = R::of(GELU_C) * (x + R::of(GELU_A) * x * x * x);
    half * x * (R::one() + u.tanh())
}

pub fn gelu_grad<R: Real>(x: R) -> R {
    let half = R::of(0.5);
    let u = R::of(GELU_C) * (x + R::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = R::of(GELU_C) * (R::one() + R::of(3.0 * GELU_A) * x * x);
    half * (R::one() + t) + half * x * (R::one() - t * t) * du
}

#[derive(Debug, Clone)]
pub struct FfCache<R> {
    x: Array2<R>,
    pre: Array2<R>,
    hidden: Array2<R>,
}

pub fn ff_forward<R: Real>(p: &FeedForward<R>, x: &Array2<R>) -> (Array2<R>, FfCache<R>) {
    let pre = linear_forward(&p.up, x);
    let hidden = pre.mapv(gelu);
    let y = linear_forward(&p.down, &hidden);
    (
        y,
        FfCache {
            x: x.clone(),
            pre,
            hidden,
        },
    )
}

pub fn ff_backward<R: Real>(p: &FeedForward<R>, c: &FfCache<R>, dy: &Array2<R>, g: &mut FeedForward<R>) -> Array2<R> {
    let dh = linear_backward(&p.down, &c.hidden, dy, &mut g.down);
    let dpre = dh * &c.pre.mapv(gelu_grad);
    linear_backward(&p.up, &c.x, &dpre, &mut g.up)
}

#[derive(Debug, Clone)]
pub struct AttnCache<R> {
    xq: Array2<R>,
    xkv: Array2<R>,
    q: Array2<R>,
    k: Array2<R>,
    v: Array2<R>,
    probs: Vec<Array2<R>>,
    concat: Array2<R>,
}

/// Softmax over the allowed entries of each row; disallowed entries get
/// probability exactly 0.
fn masked_softmax<R: Real>(scores: &mut Array2<R>, allowed: impl Fn(usize, usize) -> bool) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let mut max = R::neg_infinity();
        for (j, &s) in row.iter().enumerate() {
            if allowed(i, j) && s > max {
                max = s;
            }
        }
        if max == R::neg_infinity() {
            row.fill(R::zero());
            continue;
        }
        let mut sum = R::zero();
        for (j, s) in row.iter_mut().enumerate() {
            *s = if allowed(i, j) { (*s - max).exp() } else { R::zero() };
            sum += *s;
        }
        row.mapv_inplace(|s| s / sum);
    }
}

/// Multi-head attention of queries from `xq` over keys/values from `xkv`.
/// Keys with `key_mask[j] == false` are excluded; `causal` also excludes
/// keys after the query position.
pub fn attention_forward<R: Real>(
    p: &Attention<R>,
    xq: &Array2<R>,
    xkv: &Array2<R>,
    key_mask: &[bool],
    causal: bool,
    heads: usize,
) -> (Array2<R>, AttnCache<R>) {
    let q = linear_forward(&p.q, xq);
    let k = linear_forward(&p.k, xkv);
    let v = linear_forward(&p.v, xkv);
    let d = q.ncols();
    let dh = d / heads;
    let scale = R::one() / R::of(dh as f64).sqrt();
    let mut concat = Array2::zeros((xq.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        masked_softmax(&mut scores, |i, j| key_mask[j] && (!causal || j <= i));
        concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let y = linear_forward(&p.o, &concat);
    (
        y,
        AttnCache {
            xq: xq.clone(),
            xkv: xkv.clone(),
            q,
            k,
            v,
            probs,
            concat,
        },
    )
}

/// Returns `(d xq, d xkv)`.
pub fn attention_backward<R: Real>(
    p: &Attention<R>,
    c: &AttnCache<R>,
    dy: &Array2<R>,
    g: &mut Attention<R>,
) -> (Array2<R>, Array2<R>) {
    let heads = c.probs.len();
    let d = c.q.ncols();
    let dh = d / heads;
    let scale = R::one() / R::of(dh as f64).sqrt();
    let dconcat = linear_backward(&p.o, &c.concat, dy, &mut g.o);
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for (h, probs) in c.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let da = dconcat.slice(cols);
        dv.slice_mut(cols).assign(&probs.t().dot(&da));
        let dp = da.dot(&c.v.slice(cols).t());
        // Softmax backward: dS = P * (dP - rowsum(dP * P)).
        let row_dot = (&dp * probs).sum_axis(Axis(1));
        let mut ds = dp;
        Zip::from(ds.rows_mut())
            .and(probs.rows())
            .and(&row_dot)
            .for_each(|mut r, pr, &rd| {
                Zip::from(&mut r).and(pr).for_each(|x, &pv| *x = pv * (*x - rd) * scale);
            });
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    let dxq = linear_backward(&p.q, &c.xq, &dq, &mut g.q);
    let mut dxkv = linear_backward(&p.k, &c.xkv, &dk, &mut g.k);
    dxkv += &linear_backward(&p.v, &c.xkv, &dv, &mut g.v);
    (dxq, dxkv)
}

/// Inverted dropout; returns the scaling mask when anything was dropped.
pub fn dropout<R: Real>(x: Array2<R>, rate: f64, rng: Option<&mut dyn rand::RngCore>) -> (Array2<R>, Option<Array2<R>>) {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = R::of(1.0 / (1.0 - rate));
            let mask = Array2::from_shape_simple_fn(x.raw_dim(), || {
                if rng.random::<f64>() < rate {
                    R::zero()
                } else {
                    keep
                }
            });
            (x * &mask, Some(mask))
        }
        _ => (x, None),
    }
}

pub fn dropout_backward<R: Real>(dy: &Array2<R>, mask: &Option<Array2<R>>) -> Array2<R> {
    match mask {
        Some(m) => dy * m,
        None => dy.clone(),
    }
}

/// Sinusoidal position code of one position.
pub fn positional_row<R: Real>(pos: usize, d: usize) -> Array1<R> {
    Array1::from_shape_fn(d, |i| {
        let freq = 10000f64.powf(-((i - i % 2) as f64) / d as f64);
        let a = pos as f64 * freq;
        R::of(if i % 2 == 0 { a.sin() } else { a.cos() })
    })
}

pub fn positional<R: Real>(len: usize, d: usize) -> Array2<R> {
    let mut out = Array2::zeros((len, d));
    for (pos, mut row) in out.rows_mut().into_iter().enumerate() {
        row.assign(&positional_row::<R>(pos, d));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8, "{x}");
        }
    }

    #[test]
    fn masked_softmax_excludes_exactly() {
        let mut s = Array2::from_shape_vec((2, 3), vec![1.0f64, 50.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
        masked_softmax(&mut s, |_, j| j != 1);
        assert_eq!(s[[0, 1]], 0.0);
        assert!((s.row(0).sum() - 1.0).abs() < 1e-12);
        assert!((s[[1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_row_matches_matrix() {
        let p = LayerNormParams {
            gain: Array1::from(vec![1.0f64, 2.0, 0.5]),
            bias: Array1::from(vec![0.1, 0.0, -0.1]),
        };
        let x = Array2::from_shape_vec((1, 3), vec![1.0, 4.0, -2.0]).unwrap();
        let (y, _) = layer_norm_forward(&p, &x);
        let r = layer_norm_row(&p, x.row(0));
        for i in 0..3 {
            assert!((y[[0, i]] - r[i]).abs() < 1e-12);
        }
    }
}
