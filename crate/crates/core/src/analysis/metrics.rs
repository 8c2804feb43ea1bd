//! Image-quality metrics: RMSE, PSNR and a 3-scale MS-SSIM.

use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// PSNR reported for (numerically) identical inputs.
pub const PSNR_CAP: f64 = 100.0;
const RMSE_EPS: f64 = 1e-10;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// First three of the standard five-scale MS-SSIM exponents; renormalized at use.
const MS_SSIM_WEIGHTS: [f64; 3] = [0.0448, 0.2856, 0.3001];
/// Smallest edge length accepted by [`ms_ssim`].
pub const MS_SSIM_MIN_SIZE: usize = 32;

fn check_same(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Root-mean-square difference, optionally restricted to a mask.
pub fn rmse(a: ArrayView2<f64>, b: ArrayView2<f64>, mask: Option<ArrayView2<bool>>) -> Result<f64> {
    check_same(&a, &b)?;
    if let Some(m) = &mask {
        if m.dim() != a.dim() {
            return Err(Error::shape(format!("mask {:?} vs image {:?}", m.dim(), a.dim())));
        }
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for ((ix, x), y) in a.indexed_iter().zip(b.iter()) {
        if mask.as_ref().is_some_and(|m| !m[ix]) {
            continue;
        }
        let d = x - y;
        acc += d * d;
        count += 1;
    }
    if count == 0 {
        return Err(Error::domain("empty mask"));
    }
    Ok((acc / count as f64).sqrt())
}

/// PSNR in dB for a given RMSE, capped at [`PSNR_CAP`].
pub fn psnr_from_rmse(rmse: f64, data_range: f64) -> f64 {
    if rmse < RMSE_EPS {
        PSNR_CAP
    } else {
        (20.0 * (data_range / rmse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    data_range: f64,
    mask: Option<ArrayView2<bool>>,
) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::domain("data range must be positive"));
    }
    Ok(psnr_from_rmse(rmse(a, b, mask)?, data_range))
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable "valid" Gaussian filtering.
fn filter_valid(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            tmp[(i, j)] = (0..n).map(|t| k[t] * x[(i, j + t)]).sum();
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            out[(i, j)] = (0..n).map(|t| k[t] * tmp[(i + t, j)]).sum();
        }
    }
    out
}

/// Mean luminance term and mean contrast-structure term at one scale.
fn ssim_terms(a: &Array2<f64>, b: &Array2<f64>, data_range: f64) -> (f64, f64) {
    let (h, w) = a.dim();
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_kernel(size, SSIM_SIGMA);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let aa = filter_valid(&(a * a), &k);
    let bb = filter_valid(&(b * b), &k);
    let ab = filter_valid(&(a * b), &k);
    let mut lum = 0.0;
    let mut cs = 0.0;
    let n = mu_a.len() as f64;
    for ((((&ma, &mb), &saa), &sbb), &sab) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(aa.iter())
        .zip(bb.iter())
        .zip(ab.iter())
    {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        let c = (2.0 * cov + c2) / (va + vb + c2);
        lum += l * c;
        cs += c;
    }
    // lum carries l·cs per pixel so the final scale yields full SSIM.
    (lum / n, cs / n)
}

fn downsample(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    Array2::from_shape_fn((oh, ow), |(i, j)| {
        let v = x.slice(s![2 * i..2 * i + 2, 2 * j..2 * j + 2]);
        v.sum() / 4.0
    })
}

/// Multi-scale SSIM over three scales with renormalized standard exponents.
///
/// Per-scale terms are clamped at zero so the product stays in `[0, 1]`.
/// At the coarsest scales the Gaussian window shrinks to the largest odd size
/// that fits.
pub fn ms_ssim(a: ArrayView2<f64>, b: ArrayView2<f64>, data_range: f64) -> Result<f64> {
    check_same(&a, &b)?;
    let (h, w) = a.dim();
    if h.min(w) < MS_SSIM_MIN_SIZE {
        return Err(Error::domain(format!(
            "image {h}x{w} too small for 3-scale MS-SSIM (min {MS_SSIM_MIN_SIZE})"
        )));
    }
    let total: f64 = MS_SSIM_WEIGHTS.iter().sum();
    let mut x = a.to_owned();
    let mut y = b.to_owned();
    let mut out = 1.0;
    for (s, wgt) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&x, &y, data_range);
        let term = if s + 1 == MS_SSIM_WEIGHTS.len() { ssim } else { cs };
        out *= term.max(0.0).powf(wgt / total);
        if s + 1 < MS_SSIM_WEIGHTS.len() {
            x = downsample(&x);
            y = downsample(&y);
        }
    }
    Ok(out.clamp(0.0, 1.0))
}

/// Scores for one pair of maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapMetrics {
    pub rmse: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
}

/// Aggregate scores (means over maps) plus the per-map breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub per_map: BTreeMap<String, MapMetrics>,
}

/// RMSE and PSNR within `mask`, MS-SSIM over the full frame.
pub fn map_metrics(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    data_range: f64,
    mask: Option<ArrayView2<bool>>,
) -> Result<MapMetrics> {
    let r = rmse(a, b, mask)?;
    Ok(MapMetrics {
        rmse: r,
        psnr: psnr_from_rmse(r, data_range),
        ms_ssim: ms_ssim(a, b, data_range)?,
    })
}

impl MetricReport {
    pub fn from_maps(per_map: BTreeMap<String, MapMetrics>) -> Result<Self> {
        if per_map.is_empty() {
            return Err(Error::domain("metric report needs at least one map"));
        }
        let n = per_map.len() as f64;
        let mean = |f: fn(&MapMetrics) -> f64| per_map.values().map(f).sum::<f64>() / n;
        Ok(MetricReport {
            rmse: mean(|m| m.rmse),
            psnr: mean(|m| m.psnr),
            ms_ssim: mean(|m| m.ms_ssim),
            per_map,
        })
    }
}
