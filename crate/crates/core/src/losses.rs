//! Training objectives and the loss-curve CSV.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::blocks::Conv;
use crate::model::DiscOutput;
use crate::nn::{Float, Graph, ParamStore, Tensor, Var};

/// Added under the square root when normalizing feature vectors.
pub const FEATURE_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_ac: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rec: 100.0,
            lambda_ac: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_rec", self.lambda_rec), ("lambda_ac", self.lambda_ac)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::domain(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// How the pixel-branch logits enter the adversarial loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelReduction {
    /// Average the logit map per sample, then apply the log-loss.
    #[default]
    MeanLogits,
    /// Apply the log-loss per pixel, then average.
    MeanLosses,
}

/// Fails with the first non-finite logit, reporting its batch index.
pub fn check_logits<T: Float>(out: &DiscOutput<'_, T>, term: &str) -> Result<()> {
    let global = out.global.value();
    let pixel = out.pixel.value();
    let n = global.numel();
    let per = pixel.numel() / n.max(1);
    for b in 0..n {
        if !global.data[b].is_finite() || !pixel.data[b * per..(b + 1) * per].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                term: term.to_string(),
                step: None,
                batch_index: Some(b),
            });
        }
    }
    Ok(())
}

/// `−log σ(x)` for real logits when `real`, `−log(1 − σ(x))` otherwise.
fn log_loss<'g, T: Float>(logits: Var<'g, T>, real: bool) -> Var<'g, T> {
    if real {
        logits.scale(-1.0).softplus()
    } else {
        logits.softplus()
    }
}

fn branch_loss<'g, T: Float>(out: &DiscOutput<'g, T>, real: bool, mode: PixelReduction) -> Var<'g, T> {
    let global = log_loss(out.global, real).mean_all();
    let pixel = match mode {
        PixelReduction::MeanLogits => log_loss(out.pixel.mean_per_sample(), real).mean_all(),
        PixelReduction::MeanLosses => log_loss(out.pixel, real).mean_all(),
    };
    global.add(&pixel)
}

/// Discriminator loss summed over the global and pixel branches.
pub fn adv_loss_d<'g, T: Float>(real: &DiscOutput<'g, T>, fake: &DiscOutput<'g, T>, mode: PixelReduction) -> Var<'g, T> {
    branch_loss(real, true, mode).add(&branch_loss(fake, false, mode))
}

/// Non-saturating generator loss summed over both branches.
pub fn adv_loss_g<'g, T: Float>(fake: &DiscOutput<'g, T>, mode: PixelReduction) -> Var<'g, T> {
    branch_loss(fake, true, mode)
}

fn check_same_shape<T: Float>(a: &Var<'_, T>, b: &Var<'_, T>, what: &str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::domain(format!("{what}: shapes {sa:?} and {sb:?} differ")));
    }
    Ok(())
}

/// Mean absolute error. At b = 0 the caller passes the input b0 slice as target.
pub fn rec_loss<'g, T: Float>(x: Var<'g, T>, target: Var<'g, T>) -> Result<Var<'g, T>> {
    check_same_shape(&x, &target, "rec_loss")?;
    Ok(x.sub(&target).abs().mean_all())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub channels: Vec<usize>,
    pub stride: usize,
    /// Side of the square neighbourhood each query point is compared with.
    pub patch: usize,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            channels: vec![16, 32, 64],
            stride: 2,
            patch: 8,
            seed: 7,
        }
    }
}

/// Frozen convolutional feature network used by the self-similarity loss.
///
/// The convolutions carry no bias and pad by edge replication, so features
/// scale linearly with positive input scaling and the similarity maps are
/// invariant to it.
#[derive(Debug, Clone)]
pub struct FeatureExtractor<T> {
    config: ExtractorConfig,
    params: ParamStore<T>,
    convs: Vec<Conv>,
}

impl<T: Float> FeatureExtractor<T> {
    pub fn new(config: ExtractorConfig) -> Result<Self> {
        if config.channels.is_empty() || config.channels.contains(&0) || config.stride == 0 || config.patch == 0 {
            return Err(Error::domain("extractor needs non-empty positive channels, stride and patch"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut c_in = 1;
        let convs = config
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(&mut params, &format!("extractor.conv{i}"), c_in, c, 3, false, &mut rng);
                c_in = c;
                conv
            })
            .collect();
        Ok(FeatureExtractor { config, params, convs })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    /// Spatial size of the feature map for an `h×w` input.
    pub fn feature_size(&self, h: usize, w: usize) -> (usize, usize) {
        let s = self.config.stride;
        self.convs.iter().fold((h, w), |(h, w), _| ((h - 1) / s + 1, (w - 1) / s + 1))
    }

    pub fn features<'g>(&self, x: Var<'g, T>) -> Var<'g, T> {
        let g = x.graph();
        let p = self.params.bind(g, false);
        let mut f = x;
        for conv in &self.convs {
            f = f.pad_replicate(1).conv2d(&p.get(conv.w), None, self.config.stride, 0).relu();
        }
        f
    }
}

/// Similarity vectors `N × (H'·W') × patch²` of L2-normalized features.
pub fn self_similarity_map<'g, T: Float>(x: Var<'g, T>, extractor: &FeatureExtractor<T>) -> Result<Var<'g, T>> {
    let shape = x.shape();
    let [_, 1, h, w] = shape[..] else {
        return Err(Error::domain(format!("expected N×1×H×W slices, got {shape:?}")));
    };
    let (fh, fw) = extractor.feature_size(h, w);
    let p = extractor.config.patch;
    if fh < p || fw < p {
        return Err(Error::domain(format!(
            "{h}x{w} image gives a {fh}x{fw} feature map, smaller than the {p}x{p} patch"
        )));
    }
    Ok(extractor
        .features(x)
        .normalize_channels(FEATURE_NORM_EPS)
        .local_similarity(p))
}

/// Mean absolute difference between the two similarity maps.
pub fn ac_loss<'g, T: Float>(x: Var<'g, T>, x_ref: Var<'g, T>, extractor: &FeatureExtractor<T>) -> Result<Var<'g, T>> {
    check_same_shape(&x, &x_ref, "ac_loss")?;
    let a = self_similarity_map(x, extractor)?;
    let b = self_similarity_map(x_ref, extractor)?;
    Ok(a.sub(&b).abs().mean_all())
}

/// Scalar loss components of one generator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub adv: f64,
    pub rec: f64,
    pub ac: f64,
}

/// `adv + λ_rec·rec + λ_ac·ac`; fails naming the first non-finite term.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64> {
    for (term, v) in [("loss_adv_g", parts.adv), ("loss_rec", parts.rec), ("loss_ac", parts.ac)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: term.to_string(),
                step: None,
                batch_index: None,
            });
        }
    }
    Ok(parts.adv + weights.lambda_rec * parts.rec + weights.lambda_ac * parts.ac)
}

/// Graph form of [`total_loss`].
pub fn total_loss_graph<'g, T: Float>(adv: Var<'g, T>, rec: Var<'g, T>, ac: Var<'g, T>, weights: &LossWeights) -> Var<'g, T> {
    adv.add(&rec.scale(weights.lambda_rec)).add(&ac.scale(weights.lambda_ac))
}

/// Convenience: similarity map of a plain `N×1×H×W` tensor.
pub fn similarity_of<T: Float>(x: &Tensor<T>, extractor: &FeatureExtractor<T>) -> Result<Tensor<T>> {
    let g = Graph::new();
    let s = self_similarity_map(g.constant(x.clone()), extractor)?;
    let v = s.value();
    Ok(Tensor::clone(&v))
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_adv_g: f64,
    pub loss_adv_d: f64,
    pub loss_rec: f64,
    pub loss_ac: f64,
    pub lr_g: f64,
    pub lr_d: f64,
}

pub const CSV_HEADER: &str = "step,loss_total,loss_adv_g,loss_adv_d,loss_rec,loss_ac,lr_g,lr_d";

/// `%.6g`-style formatting.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let exp = v.abs().log10().floor() as i32;
    // rounding can carry into the next decade
    let rounded: f64 = format!("{v:.5e}").parse().expect("valid float");
    let exp = if rounded.abs() >= 10f64.powi(exp + 1) { exp + 1 } else { exp };
    if !(-4..6).contains(&exp) {
        let s = format!("{v:.5e}");
        let (mant, e) = s.split_once('e').expect("exponent form");
        let mant = trim_zeros(mant);
        let e: i32 = e.parse().expect("exponent");
        return format!("{mant}e{}{:02}", if e < 0 { '-' } else { '+' }, e.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

impl LossRecord {
    pub fn csv_row(&self) -> String {
        let mut s = self.step.to_string();
        for v in [
            self.loss_total,
            self.loss_adv_g,
            self.loss_adv_d,
            self.loss_rec,
            self.loss_ac,
            self.lr_g,
            self.lr_d,
        ] {
            let _ = write!(s, ",{}", format_sig6(v));
        }
        s
    }

    /// Parses a row written by [`csv_row`](Self::csv_row).
    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Parse(format!("loss row needs 8 fields, got {}", fields.len())));
        }
        let step = fields[0]
            .parse()
            .map_err(|_| Error::Parse(format!("bad step {:?}", fields[0])))?;
        let mut v = [0.0; 7];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| Error::Parse(format!("bad value {f:?}")))?;
        }
        Ok(LossRecord {
            step,
            loss_total: v[0],
            loss_adv_g: v[1],
            loss_adv_d: v[2],
            loss_rec: v[3],
            loss_ac: v[4],
            lr_g: v[5],
            lr_d: v[6],
        })
    }
}

/// Appends rows to a loss CSV, writing the header when the file is new.
pub fn append_loss_rows(path: &Path, rows: &[LossRecord]) -> Result<()> {
    let exists = path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if !exists {
        text.push_str(CSV_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let text = crate::io::read_text(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::Parse(format!("{} lacks the loss CSV header", path.display()))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(LossRecord::parse_csv_row).collect()
}
