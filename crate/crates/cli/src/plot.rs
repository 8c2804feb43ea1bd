//! 8-bit grayscale renderings with a JSON sidecar recording each panel's
//! linear window.

use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub name: String,
    /// Left edge of the panel in the PNG.
    pub x_offset: usize,
    /// Value drawn as 0.
    pub min: f64,
    /// Value drawn as 255.
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub source: String,
    pub map: String,
    pub width: usize,
    pub height: usize,
    pub panels: Vec<Panel>,
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

/// Finite min and max, `(0, 0)` when there are no finite values.
pub fn window(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.into_iter().filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        (0.0, 0.0)
    } else {
        (lo, hi)
    }
}

/// `round(255 (v - min) / (max - min))`, clamped; a flat window renders 0.
pub fn quantize(v: f64, min: f64, max: f64) -> u8 {
    if !(max > min) || !v.is_finite() {
        return 0;
    }
    (255.0 * (v - min) / (max - min)).round().clamp(0.0, 255.0) as u8
}

/// Lays out panels left to right, each with its own window.
pub fn render(panels: &[(String, ArrayView2<f64>, (f64, f64))]) -> (GrayImage, Vec<Panel>) {
    let (h, w) = panels[0].1.dim();
    let mut img = GrayImage::new((w * panels.len()) as u32, h as u32);
    let mut meta = Vec::with_capacity(panels.len());
    for (k, (name, map, (lo, hi))) in panels.iter().enumerate() {
        for ((i, j), &v) in map.indexed_iter() {
            img.put_pixel((k * w + j) as u32, i as u32, image::Luma([quantize(v, *lo, *hi)]));
        }
        meta.push(Panel {
            name: name.clone(),
            x_offset: k * w,
            min: *lo,
            max: *hi,
        });
    }
    (img, meta)
}

/// A single map, or map | reference | absolute error when a reference is
/// given. Map and reference share one window; the error panel spans
/// `[0, max error]`.
pub fn plot_map(map: &Array2<f64>, reference: Option<&Array2<f64>>) -> CliResult<(GrayImage, Vec<Panel>)> {
    match reference {
        None => Ok(render(&[("map".into(), map.view(), window(map.iter().copied()))])),
        Some(r) => {
            if r.dim() != map.dim() {
                return Err(CliError::format(format!(
                    "map is {:?} but reference is {:?}",
                    map.dim(),
                    r.dim()
                )));
            }
            let err = (map - r).mapv(f64::abs);
            let shared = window(map.iter().chain(r.iter()).copied());
            let (_, err_max) = window(err.iter().copied());
            Ok(render(&[
                ("map".into(), map.view(), shared),
                ("reference".into(), r.view(), shared),
                ("abs_error".into(), err.view(), (0.0, err_max)),
            ]))
        }
    }
}

pub fn save_png(path: &Path, img: &GrayImage, sidecar: &Sidecar) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| CliError::io(path, e))?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(sidecar).map_err(|e| CliError::format(e.to_string()))?;
    std::fs::write(&side, text).map_err(|e| CliError::io(&side, e))
}
