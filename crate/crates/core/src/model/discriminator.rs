use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{Conv, GlobalProjection, PixelProjection, QEmbed};
use super::{check_batch, q_features};
use crate::error::{Error, Result};
use crate::nn::{Bound, Float, Graph, ParamStore, Tensor, Var};
use crate::qspace::QSpacePoint;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub in_size: (usize, usize),
    pub base_channels: usize,
    /// Number of stride-2 encoder convolutions (and matching decoder stages).
    pub n_layers: usize,
    pub q_embed_dim: usize,
    pub seed: u64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            in_size: (64, 64),
            base_channels: 32,
            n_layers: 3,
            q_embed_dim: 64,
            seed: 1,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.in_size;
        for (name, v) in [
            ("in_size height", h),
            ("in_size width", w),
            ("base_channels", self.base_channels),
            ("n_layers", self.n_layers),
            ("q_embed_dim", self.q_embed_dim),
        ] {
            if v == 0 {
                return Err(Error::domain(format!("discriminator {name} must be positive")));
            }
        }
        if self.n_layers > 8 {
            return Err(Error::domain("discriminator n_layers must be at most 8"));
        }
        let f = 1 << self.n_layers;
        if h % f != 0 || w % f != 0 {
            return Err(Error::domain(format!(
                "input size {h}x{w} is not divisible by 2^{} = {f}",
                self.n_layers
            )));
        }
        Ok(())
    }

    fn channels(&self, layer: usize) -> usize {
        self.base_channels << layer
    }
}

#[derive(Debug, Clone)]
struct Layout {
    downs: Vec<Conv>,
    ups: Vec<Conv>,
    q_embed: QEmbed,
    global: GlobalProjection,
    pixel: PixelProjection,
}

/// Raw logits of both discriminator branches.
pub struct DiscOutput<'g, T> {
    /// `N`, one score per sample.
    pub global: Var<'g, T>,
    /// `N×1×H×W`.
    pub pixel: Var<'g, T>,
}

/// Intermediate features exposed for checking the projection heads.
pub struct DiscFeatures<'g, T> {
    pub gamma_global: Var<'g, T>,
    pub gamma_pixel: Var<'g, T>,
    pub q_hat: Var<'g, T>,
}

#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Float> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let l = config.n_layers;
        let downs = (0..l)
            .map(|i| {
                let c_in = if i == 0 { 1 } else { config.channels(i - 1) };
                Conv::new(&mut store, &format!("disc.down{i}"), c_in, config.channels(i), 3, true, &mut rng)
            })
            .collect();
        let ups = (0..l)
            .rev()
            .map(|i| {
                let c_out = config.channels(i.saturating_sub(1));
                Conv::new(&mut store, &format!("disc.up{i}"), config.channels(i), c_out, 3, true, &mut rng)
            })
            .collect();
        let q_embed = QEmbed::new(&mut store, "disc.q_embed", config.q_embed_dim, &mut rng);
        let global = GlobalProjection::new(&mut store, "disc.global", config.q_embed_dim, config.channels(l - 1), &mut rng);
        let pixel = PixelProjection::new(&mut store, "disc.pixel", config.q_embed_dim, config.base_channels, &mut rng);
        Ok(Discriminator {
            config,
            params: store,
            layout: Layout {
                downs,
                ups,
                q_embed,
                global,
                pixel,
            },
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Float>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn global_head(&self) -> &GlobalProjection {
        &self.layout.global
    }

    pub fn pixel_head(&self) -> &PixelProjection {
        &self.layout.pixel
    }

    /// Encoder/decoder features and the q-embedding, before the projection heads.
    pub fn features<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>, q: Var<'g, T>) -> DiscFeatures<'g, T> {
        let l = &self.layout;
        let mut skips = Vec::with_capacity(l.downs.len());
        let mut f = x;
        for conv in &l.downs {
            f = conv.forward(p, f, 2).leaky_relu(LEAKY_SLOPE);
            skips.push(f);
        }
        let gamma_global = f.global_avg_pool();
        let n = l.ups.len();
        for (j, conv) in l.ups.iter().enumerate() {
            f = conv.forward(p, f.upsample2x(), 1).leaky_relu(LEAKY_SLOPE);
            // stage j restores the resolution of encoder output n - 2 - j
            if j + 1 < n {
                f = f.add(&skips[n - 2 - j]);
            }
        }
        DiscFeatures {
            gamma_global,
            gamma_pixel: f,
            q_hat: l.q_embed.forward(p, q),
        }
    }

    pub fn forward_graph<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>, q: Var<'g, T>) -> DiscOutput<'g, T> {
        let f = self.features(p, x, q);
        DiscOutput {
            global: self.layout.global.forward(p, f.gamma_global, f.q_hat),
            pixel: self.layout.pixel.forward(p, f.gamma_pixel, f.q_hat),
        }
    }

    /// Global scores (`N`) and pixel maps (`N×1×H×W`) for a batch of slices.
    pub fn forward(&self, x: &Tensor<T>, q: &[QSpacePoint]) -> Result<(Tensor<T>, Tensor<T>)> {
        check_batch(x, 1, self.config.in_size, q.len())?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let xv = g.constant(x.clone());
        let qv = g.constant(q_features(q)?);
        let out = self.forward_graph(&p, xv, qv);
        let (gl, px) = (out.global.value(), out.pixel.value());
        Ok((Tensor::clone(&gl), Tensor::clone(&px)))
    }
}
