use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{Mmaf, QEmbed, ResBlock, SmaDecoder, SmaEncoder};
use super::{check_batch, q_features, split_modalities};
use crate::error::{Error, Result};
use crate::nn::{Bound, Float, Graph, ParamStore, Tensor, Var};
use crate::qspace::QSpacePoint;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// `(H, W)` of input and output slices.
    pub in_size: (usize, usize),
    pub base_channels: usize,
    pub n_downsample: usize,
    pub n_res_blocks: usize,
    pub q_embed_dim: usize,
    pub attention_reduction: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            in_size: (64, 64),
            base_channels: 32,
            n_downsample: 2,
            n_res_blocks: 4,
            q_embed_dim: 64,
            attention_reduction: 8,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.in_size;
        for (name, v) in [
            ("in_size height", h),
            ("in_size width", w),
            ("base_channels", self.base_channels),
            ("n_downsample", self.n_downsample),
            ("n_res_blocks", self.n_res_blocks),
            ("q_embed_dim", self.q_embed_dim),
            ("attention_reduction", self.attention_reduction),
        ] {
            if v == 0 {
                return Err(Error::domain(format!("generator {name} must be positive")));
            }
        }
        if self.n_downsample > 8 {
            return Err(Error::domain("generator n_downsample must be at most 8"));
        }
        let f = 1 << self.n_downsample;
        if h % f != 0 || w % f != 0 {
            return Err(Error::domain(format!(
                "input size {h}x{w} is not divisible by 2^{} = {f}",
                self.n_downsample
            )));
        }
        if self.base_channels < self.attention_reduction {
            return Err(Error::domain(format!(
                "base_channels {} smaller than attention_reduction {}",
                self.base_channels, self.attention_reduction
            )));
        }
        Ok(())
    }

    /// Channel count of the bottleneck features.
    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.n_downsample
    }
}

#[derive(Debug, Clone)]
struct Layout {
    encoders: [SmaEncoder; 3],
    mmaf: Mmaf,
    q_embed: QEmbed,
    res_blocks: Vec<ResBlock>,
    decoder: SmaDecoder,
}

impl Layout {
    fn build<T: Float>(cfg: &GeneratorConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let (base, nd, r) = (cfg.base_channels, cfg.n_downsample, cfg.attention_reduction);
        let encoders = ["b0", "t1", "t2"].map(|m| SmaEncoder::new(store, &format!("gen.enc.{m}"), base, nd, r, rng));
        let c = cfg.bottleneck_channels();
        let mmaf = Mmaf::new(store, "gen.mmaf", c, rng);
        let q_embed = QEmbed::new(store, "gen.q_embed", cfg.q_embed_dim, rng);
        let res_blocks = (0..cfg.n_res_blocks)
            .map(|i| ResBlock::new(store, &format!("gen.res{i}"), c, cfg.q_embed_dim, rng))
            .collect();
        let decoder = SmaDecoder::new(store, "gen.dec", base, nd, r, rng);
        Layout {
            encoders,
            mmaf,
            q_embed,
            res_blocks,
            decoder,
        }
    }
}

/// Generator parameters together with the architecture that interprets them.
#[derive(Debug, Clone)]
pub struct Generator<T> {
    config: GeneratorConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Float> Generator<T> {
    /// Freshly initialized generator (seeded from `config.seed`).
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let layout = Layout::build(&config, &mut params, &mut rng);
        Ok(Generator { config, params, layout })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Float>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn encoders(&self) -> &[SmaEncoder; 3] {
        &self.layout.encoders
    }

    pub fn mmaf(&self) -> &Mmaf {
        &self.layout.mmaf
    }

    pub fn q_embed(&self) -> &QEmbed {
        &self.layout.q_embed
    }

    pub fn res_blocks(&self) -> &[ResBlock] {
        &self.layout.res_blocks
    }

    pub fn decoder(&self) -> &SmaDecoder {
        &self.layout.decoder
    }

    /// Graph-level forward pass. `x` holds the b0, t1 and t2 slices
    /// (`N×1×H×W` each) and `q` the `N×4` q-space features.
    pub fn forward_graph<'g>(&self, p: &Bound<'g, T>, x: [Var<'g, T>; 3], q: Var<'g, T>) -> Var<'g, T> {
        let l = &self.layout;
        let z = [0, 1, 2].map(|i| l.encoders[i].forward(p, x[i]));
        let mut h = l.mmaf.forward(p, z).z;
        let q_hat = l.q_embed.forward(p, q);
        for block in &l.res_blocks {
            h = block.forward(p, h, q_hat);
        }
        l.decoder.forward(p, h)
    }

    /// Synthesizes one slice per sample. `structurals` is `N×3×H×W`.
    pub fn forward(&self, structurals: &Tensor<T>, q: &[QSpacePoint]) -> Result<Tensor<T>> {
        check_batch(structurals, 3, self.config.in_size, q.len())?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let x = split_modalities(structurals).map(|t| g.constant(t));
        let qv = g.constant(q_features(q)?);
        let out = self.forward_graph(&p, x, qv);
        let value = out.value();
        Ok(Tensor::clone(&value))
    }

    /// q-embedding of each point, `N×q_embed_dim`.
    pub fn embed(&self, q: &[QSpacePoint]) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let qv = g.constant(q_features(q)?);
        let out = self.layout.q_embed.forward(&p, qv);
        let value = out.value();
        Ok(Tensor::clone(&value))
    }
}
