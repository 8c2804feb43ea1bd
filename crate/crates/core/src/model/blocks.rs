//! Building blocks shared by the generator and the discriminator.
//!
//! Each block only stores parameter handles; values live in a
//! [`ParamStore`] and are bound to a [`Graph`](crate::nn::Graph) per pass.

use rand_chacha::ChaCha8Rng;

use crate::nn::{concat_cols, Bound, Float, ParamId, ParamStore, Var};

/// Epsilon inside the instance-norm square root.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub k: usize,
}

impl Conv {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        let w = store.add_uniform(format!("{name}.w"), &[c_out, c_in, k, k], fan_in, rng);
        let b = bias.then(|| store.add_uniform(format!("{name}.b"), &[c_out], fan_in, rng));
        Conv { w, b, k }
    }

    /// Zero-padded convolution keeping `H/stride × W/stride`.
    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>, stride: usize) -> Var<'g, T> {
        let b = self.b.map(|b| p.get(b));
        x.conv2d(&p.get(self.w), b.as_ref(), stride, self.k / 2)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[fan_out, fan_in], fan_in, rng);
        let b = bias.then(|| store.add_uniform(format!("{name}.b"), &[fan_out], fan_in, rng));
        Linear { w, b }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let b = self.b.map(|b| p.get(b));
        x.linear(&p.get(self.w), b.as_ref())
    }
}

/// Squeeze-and-excitation weights `w = σ(FC₂(ReLU(FC₁(GAP(F)))))` applied as
/// `F + F ⊗ w`.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelAttention {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = (channels / reduction).max(1);
        ChannelAttention {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, true, rng),
        }
    }

    /// Per-channel weights in `(0, 1)`, shape `N×C`.
    pub fn weights<'g, T: Float>(&self, p: &Bound<'g, T>, f: Var<'g, T>) -> Var<'g, T> {
        let h = self.fc1.forward(p, f.global_avg_pool()).relu();
        self.fc2.forward(p, h).sigmoid()
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, f: Var<'g, T>) -> Var<'g, T> {
        let w = self.weights(p, f);
        f.add(&f.channel_scale(&w))
    }
}

/// Per-modality encoder: a 7×7 stem, strided downsampling convolutions with
/// instance norm and ReLU, then channel attention on the bottleneck features.
#[derive(Debug, Clone)]
pub struct SmaEncoder {
    pub stem: Conv,
    pub downs: Vec<Conv>,
    pub attention: ChannelAttention,
}

impl SmaEncoder {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        base: usize,
        n_downsample: usize,
        reduction: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let stem = Conv::new(store, &format!("{name}.stem"), 1, base, 7, false, rng);
        let downs = (0..n_downsample)
            .map(|i| {
                let c = base << i;
                Conv::new(store, &format!("{name}.down{i}"), c, 2 * c, 3, false, rng)
            })
            .collect();
        let attention = ChannelAttention::new(store, &format!("{name}.attn"), base << n_downsample, reduction, rng);
        SmaEncoder { stem, downs, attention }
    }

    /// Features before channel attention.
    pub fn backbone<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut f = self.stem.forward(p, x, 1).instance_norm(NORM_EPS).relu();
        for d in &self.downs {
            f = d.forward(p, f, 2).instance_norm(NORM_EPS).relu();
        }
        f
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let f = self.backbone(p, x);
        self.attention.forward(p, f)
    }
}

/// Multi-modal attention fusion over three equally shaped feature maps.
#[derive(Debug, Clone)]
pub struct Mmaf {
    pub omega1: Linear,
    pub omega2: Linear,
}

/// Outputs of [`Mmaf::forward`].
pub struct Fused<'g, T> {
    /// Mean of the three attended modality features.
    pub z: Var<'g, T>,
    /// Row-stochastic attention, `N×C×3`; column `n` weights modality `n`.
    pub attention: Var<'g, T>,
    /// `z_n + s` for each modality.
    pub attended: [Var<'g, T>; 3],
}

impl Mmaf {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Mmaf {
            omega1: Linear::new(store, &format!("{name}.omega1"), 3 * channels, channels, true, rng),
            omega2: Linear::new(store, &format!("{name}.omega2"), channels, 3 * channels, true, rng),
        }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, z: [Var<'g, T>; 3]) -> Fused<'g, T> {
        let (n, c, _, _) = z[0].value().dims4();
        let pooled: Vec<_> = z.iter().map(|zi| zi.global_avg_pool()).collect();
        let h = self.omega1.forward(p, concat_cols(&pooled)).relu();
        let logits = self.omega2.forward(p, h).reshape(&[n, c, 3]);
        let attention = logits.softmax_last();
        let mut s = z[0].channel_scale(&attention.select_last(0));
        for (k, zk) in z.iter().enumerate().skip(1) {
            s = s.add(&zk.channel_scale(&attention.select_last(k)));
        }
        let attended = z.map(|zi| zi.add(&s));
        Fused { z: combine_attended(&attended), attention, attended }
    }
}

/// Collapses the three attended maps into the bottleneck input (their mean).
pub fn combine_attended<'g, T: Float>(attended: &[Var<'g, T>; 3]) -> Var<'g, T> {
    attended[0].add(&attended[1]).add(&attended[2]).scale(1.0 / 3.0)
}

/// `(g_x, g_y, g_z, b_norm) → 64 → dim` with ReLU between.
#[derive(Debug, Clone)]
pub struct QEmbed {
    pub l1: Linear,
    pub l2: Linear,
}

pub const Q_HIDDEN: usize = 64;

impl QEmbed {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        QEmbed {
            l1: Linear::new(store, &format!("{name}.l1"), 4, Q_HIDDEN, true, rng),
            l2: Linear::new(store, &format!("{name}.l2"), Q_HIDDEN, dim, true, rng),
        }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, q: Var<'g, T>) -> Var<'g, T> {
        let h = self.l1.forward(p, q).relu();
        self.l2.forward(p, h)
    }
}

/// Instance normalization whose additive per-channel bias is an affine
/// function of the q-embedding.
#[derive(Debug, Clone)]
pub struct Cbin {
    pub head: Linear,
}

impl Cbin {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, q_dim: usize, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Cbin {
            head: Linear::new(store, &format!("{name}.bias"), q_dim, channels, true, rng),
        }
    }

    /// Per-channel biases `b_r(q̂)`, shape `N×C`.
    pub fn bias<'g, T: Float>(&self, p: &Bound<'g, T>, q_hat: Var<'g, T>) -> Var<'g, T> {
        self.head.forward(p, q_hat)
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, z: Var<'g, T>, q_hat: Var<'g, T>) -> Var<'g, T> {
        z.instance_norm(NORM_EPS).channel_bias(&self.bias(p, q_hat))
    }
}

/// `x + CBIN(conv(ReLU(CBIN(conv(x)))))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv,
    pub norm1: Cbin,
    pub conv2: Conv,
    pub norm2: Cbin,
}

impl ResBlock {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, q_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            conv1: Conv::new(store, &format!("{name}.conv1"), channels, channels, 3, false, rng),
            norm1: Cbin::new(store, &format!("{name}.norm1"), q_dim, channels, rng),
            conv2: Conv::new(store, &format!("{name}.conv2"), channels, channels, 3, false, rng),
            norm2: Cbin::new(store, &format!("{name}.norm2"), q_dim, channels, rng),
        }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>, q_hat: Var<'g, T>) -> Var<'g, T> {
        let h = self.norm1.forward(p, self.conv1.forward(p, x, 1), q_hat).relu();
        let h = self.norm2.forward(p, self.conv2.forward(p, h, 1), q_hat);
        x.add(&h)
    }
}

/// Upsampling path: each stage is nearest 2× upsampling, 3×3 convolution,
/// instance norm, ReLU and channel attention; a 7×7 convolution and sigmoid
/// produce the single output channel.
#[derive(Debug, Clone)]
pub struct SmaDecoder {
    pub ups: Vec<(Conv, ChannelAttention)>,
    pub head: Conv,
}

impl SmaDecoder {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        base: usize,
        n_upsample: usize,
        reduction: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let ups = (0..n_upsample)
            .map(|i| {
                let c = base << (n_upsample - i);
                let conv = Conv::new(store, &format!("{name}.up{i}"), c, c / 2, 3, false, rng);
                let attn = ChannelAttention::new(store, &format!("{name}.up{i}.attn"), c / 2, reduction, rng);
                (conv, attn)
            })
            .collect();
        let head = Conv::new(store, &format!("{name}.head"), base, 1, 7, true, rng);
        SmaDecoder { ups, head }
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, z: Var<'g, T>) -> Var<'g, T> {
        let mut f = z;
        for (conv, attn) in &self.ups {
            f = conv.forward(p, f.upsample2x(), 1).instance_norm(NORM_EPS).relu();
            f = attn.forward(p, f);
        }
        self.head.forward(p, f, 1).sigmoid()
    }
}

/// Projection head producing one logit per sample:
/// `(V q̂)·γ + ξ(γ)` with `ξ` affine.
#[derive(Debug, Clone)]
pub struct GlobalProjection {
    pub v: Linear,
    pub xi: Linear,
}

impl GlobalProjection {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, q_dim: usize, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        GlobalProjection {
            v: Linear::new(store, &format!("{name}.v"), q_dim, channels, false, rng),
            xi: Linear::new(store, &format!("{name}.xi"), channels, 1, true, rng),
        }
    }

    /// `gamma` is `N×C`; returns `N`.
    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, gamma: Var<'g, T>, q_hat: Var<'g, T>) -> Var<'g, T> {
        let n = gamma.shape()[0];
        let proj = self.v.forward(p, q_hat).mul(&gamma).sum_per_sample();
        proj.add(&self.xi.forward(p, gamma).reshape(&[n]))
    }
}

/// Per-pixel projection head: `Σ_c (V q̂)_c γ_c(h, w) + ξ(γ(h, w))` with `ξ` a
/// 1×1 convolution.
#[derive(Debug, Clone)]
pub struct PixelProjection {
    pub v: Linear,
    pub xi: Conv,
}

impl PixelProjection {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, q_dim: usize, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        PixelProjection {
            v: Linear::new(store, &format!("{name}.v"), q_dim, channels, false, rng),
            xi: Conv::new(store, &format!("{name}.xi"), channels, 1, 1, true, rng),
        }
    }

    /// `gamma` is `N×C×H×W`; returns `N×1×H×W`.
    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, gamma: Var<'g, T>, q_hat: Var<'g, T>) -> Var<'g, T> {
        let proj = gamma.channel_scale(&self.v.forward(p, q_hat)).sum_channels();
        proj.add(&self.xi.forward(p, gamma, 1))
    }
}
