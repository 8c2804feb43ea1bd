//! Straight-line reference implementations used as test oracles. They work
//! on plain `Vec<f64>` buffers and share no code with the graph engine.
#![allow(dead_code)]

pub mod grad_cases;

use qcatn::model::blocks::{ChannelAttention, Conv, Linear, Mmaf, QEmbed, SmaEncoder, NORM_EPS};
use qcatn::nn::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// `max |a − b| / max |b|`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max).max(1e-12);
    diff / scale
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `y = W x + b` with `W` stored row-major `out × in`.
pub fn dense(store: &ParamStore<f64>, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(l.w);
    let (out, inp) = (w.shape[0], w.shape[1]);
    assert_eq!(x.len(), inp);
    (0..out)
        .map(|o| {
            let mut acc = l.b.map_or(0.0, |b| store.get(b).data[o]);
            for i in 0..inp {
                acc += w.data[o * inp + i] * x[i];
            }
            acc
        })
        .collect()
}

/// Single-image zero-padded convolution, `c×h×w → c_out×oh×ow`.
pub fn conv(store: &ParamStore<f64>, cv: &Conv, x: &[f64], c: usize, h: usize, w: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let wt = store.get(cv.w);
    let (co, ci, k) = (wt.shape[0], wt.shape[1], wt.shape[2]);
    assert_eq!(ci, c);
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = cv.b.map_or(0.0, |b| store.get(b).data[o]);
                for i in 0..ci {
                    for a in 0..k {
                        for b in 0..k {
                            let iy = (y * stride + a) as isize - pad as isize;
                            let ix = (xx * stride + b) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += wt.data[((o * ci + i) * k + a) * k + b] * x[(i * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// Per-channel `(x − μ) / sqrt(var + ε)`.
pub fn instance_norm(x: &[f64], c: usize) -> Vec<f64> {
    let hw = x.len() / c;
    let mut out = Vec::with_capacity(x.len());
    for ch in 0..c {
        let p = &x[ch * hw..(ch + 1) * hw];
        let m = p.iter().sum::<f64>() / hw as f64;
        let v = p.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / hw as f64;
        out.extend(p.iter().map(|a| (a - m) / (v + NORM_EPS).sqrt()));
    }
    out
}

pub fn channel_means(x: &[f64], c: usize) -> Vec<f64> {
    let hw = x.len() / c;
    (0..c).map(|ch| x[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect()
}

pub fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|a| a.max(0.0)).collect()
}

/// Attention weights `σ(FC₂(ReLU(FC₁(GAP(F)))))`.
pub fn attention_weights(store: &ParamStore<f64>, a: &ChannelAttention, f: &[f64], c: usize) -> Vec<f64> {
    let pooled = channel_means(f, c);
    let h = relu(dense(store, &a.fc1, &pooled));
    dense(store, &a.fc2, &h).into_iter().map(sigmoid).collect()
}

/// Backbone features `F` and encoder output `F + F ⊗ w` for one image.
pub fn sma_encode(store: &ParamStore<f64>, e: &SmaEncoder, x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let (mut f, mut fh, mut fw) = conv(store, &e.stem, x, 1, h, w, 1);
    let mut c = store.get(e.stem.w).shape[0];
    f = relu(instance_norm(&f, c));
    for d in &e.downs {
        let (y, oh, ow) = conv(store, d, &f, c, fh, fw, 2);
        c = store.get(d.w).shape[0];
        f = relu(instance_norm(&y, c));
        fh = oh;
        fw = ow;
    }
    let wts = attention_weights(store, &e.attention, &f, c);
    let hw = fh * fw;
    let out = f.iter().enumerate().map(|(i, v)| v + v * wts[i / hw]).collect();
    (f, out, c)
}

/// Fused map `z`, attention `A` (`C×3`, row-major) for one sample.
pub fn mmaf(store: &ParamStore<f64>, m: &Mmaf, z: [&[f64]; 3], c: usize) -> (Vec<f64>, Vec<f64>) {
    let hw = z[0].len() / c;
    let mut pooled = Vec::new();
    for zi in z {
        pooled.extend(channel_means(zi, c));
    }
    let hidden = relu(dense(store, &m.omega1, &pooled));
    let logits = dense(store, &m.omega2, &hidden);
    let mut a = vec![0.0; 3 * c];
    for ch in 0..c {
        let row = &logits[3 * ch..3 * ch + 3];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        for n in 0..3 {
            a[3 * ch + n] = e[n] / s;
        }
    }
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        for p in 0..hw {
            let i = ch * hw + p;
            let s: f64 = (0..3).map(|n| z[n][i] * a[3 * ch + n]).sum();
            out[i] = (0..3).map(|n| z[n][i] + s).sum::<f64>() / 3.0;
        }
    }
    (out, a)
}

pub fn q_embed(store: &ParamStore<f64>, q: &QEmbed, feat: &[f64; 4]) -> Vec<f64> {
    let h = relu(dense(store, &q.l1, feat));
    dense(store, &q.l2, &h)
}

/// `base^n` in double-double arithmetic, rounded once at the end.
pub fn exact_pow(base: f64, n: u64) -> f64 {
    fn mul((ah, al): (f64, f64), (bh, bl): (f64, f64)) -> (f64, f64) {
        let p = ah * bh;
        let e = ah.mul_add(bh, -p) + (ah * bl + al * bh);
        let hi = p + e;
        (hi, e - (hi - p))
    }
    let mut acc = (1.0, 0.0);
    let mut sq = (base, 0.0);
    let mut k = n;
    while k > 0 {
        if k & 1 == 1 {
            acc = mul(acc, sq);
        }
        sq = mul(sq, sq);
        k >>= 1;
    }
    acc.0 + acc.1
}
