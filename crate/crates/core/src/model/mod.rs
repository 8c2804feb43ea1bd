//! The conditional generator and the dual-branch projection discriminator.

pub mod blocks;
mod checkpoint;
mod discriminator;
mod generator;

pub use checkpoint::{load_models, read_manifest, save_models, ArchManifest, Models, ARCH_FILE, FORMAT_VERSION, WEIGHTS_FILE};
pub use discriminator::{DiscFeatures, DiscOutput, Discriminator, DiscriminatorConfig, LEAKY_SLOPE};
pub use generator::{Generator, GeneratorConfig};

use crate::error::{Error, Result};
use crate::nn::{Float, Tensor};
use crate::qspace::QSpacePoint;

/// `N×4` conditioning features; every point must be normalized.
pub fn q_features<T: Float>(q: &[QSpacePoint]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(4 * q.len());
    for (i, p) in q.iter().enumerate() {
        p.validate()
            .map_err(|e| Error::domain(format!("q-space point {i} is not normalized: {e}")))?;
        data.extend(p.features().iter().map(|&v| T::of(v)));
    }
    Ok(Tensor::new(&[q.len(), 4], data))
}

/// Splits `N×3×H×W` into three `N×1×H×W` tensors (b0, t1, t2).
pub fn split_modalities<T: Float>(x: &Tensor<T>) -> [Tensor<T>; 3] {
    let (n, c, h, w) = x.dims4();
    assert_eq!(c, 3, "expected three structural channels");
    let hw = h * w;
    [0, 1, 2].map(|m| {
        let mut data = Vec::with_capacity(n * hw);
        for b in 0..n {
            data.extend_from_slice(&x.data[(b * 3 + m) * hw..(b * 3 + m + 1) * hw]);
        }
        Tensor::new(&[n, 1, h, w], data)
    })
}

pub(crate) fn check_batch<T: Float>(x: &Tensor<T>, channels: usize, size: (usize, usize), n_q: usize) -> Result<()> {
    match x.shape[..] {
        [n, c, h, w] if c == channels && (h, w) == size && n == n_q && n > 0 => Ok(()),
        _ => Err(Error::shape(format!(
            "expected input of shape [{n_q}, {channels}, {}, {}], got {:?}",
            size.0, size.1, x.shape
        ))),
    }
}
