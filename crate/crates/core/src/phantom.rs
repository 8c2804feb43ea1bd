//! Analytic diffusion-tensor phantom.
//!
//! A 2D slice with an isotropic body, a free-water pocket, two straight fiber
//! bundles with orthogonal principal directions and their crossing. Signals
//! follow the monoexponential tensor model, so every DWI is known in closed
//! form and DTI fitting is an exact inverse.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::fa_md;
use crate::error::{Error, Result};
use crate::qspace::{QSpacePoint, SamplingScheme};

/// Smallest phantom edge length.
pub const MIN_SIZE: usize = 32;
/// Physiological eigenvalue range of stored tensors, mm²/s.
pub const EIGEN_RANGE: (f64, f64) = (1e-4, 3e-3);
/// Upper clip of noisy normalized signals.
pub const SIGNAL_CLIP: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Tissue {
    Background = 0,
    Isotropic = 1,
    BundleA = 2,
    BundleB = 3,
    Crossing = 4,
}

impl Tissue {
    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Tissue::Background,
            1 => Tissue::Isotropic,
            2 => Tissue::BundleA,
            3 => Tissue::BundleB,
            4 => Tissue::Crossing,
            _ => return Err(Error::Format(format!("unknown tissue label {v}"))),
        })
    }
}

/// Ground-truth tissue parameters for one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorPhantom {
    pub s0: Array2<f64>,
    pub tensors: Array2<Matrix3<f64>>,
    pub labels: Array2<Tissue>,
    /// In-plane principal direction of bundle A; bundle B is orthogonal to it.
    pub bundle_a_axis: [f64; 3],
    pub bundle_b_axis: [f64; 3],
}

impl TensorPhantom {
    pub fn shape(&self) -> (usize, usize) {
        self.s0.dim()
    }

    pub fn mask(&self) -> Array2<bool> {
        self.labels.mapv(|l| l != Tissue::Background)
    }

    pub fn s0_max(&self) -> f64 {
        self.s0.iter().copied().fold(0.0, f64::max)
    }

    /// Analytic FA and MD maps; zero on background.
    pub fn fa_md_maps(&self) -> (Array2<f64>, Array2<f64>) {
        let (h, w) = self.shape();
        let mut fa = Array2::zeros((h, w));
        let mut md = Array2::zeros((h, w));
        for ((i, j), t) in self.tensors.indexed_iter() {
            if self.labels[(i, j)] != Tissue::Background {
                let (f, m) = fa_md(t);
                fa[(i, j)] = f;
                md[(i, j)] = m;
            }
        }
        (fa, md)
    }
}

/// Rejects tensors that are not symmetric positive definite.
pub fn check_spd(d: &Matrix3<f64>) -> Result<()> {
    let asym = (d - d.transpose()).abs().max();
    if asym > 1e-12 || !d.iter().all(|v| v.is_finite()) {
        return Err(Error::domain("diffusion tensor is not symmetric"));
    }
    let eig = d.symmetric_eigenvalues();
    if eig.iter().any(|&e| e <= 0.0) {
        return Err(Error::domain(format!(
            "diffusion tensor is not positive definite (eigenvalues {:?})",
            eig.as_slice()
        )));
    }
    Ok(())
}

#[inline]
fn attenuation(d: &Matrix3<f64>, q: &QSpacePoint) -> f64 {
    if q.b == 0.0 {
        return 1.0;
    }
    let g = Vector3::from(q.g);
    (-q.b * g.dot(&(d * g))).exp()
}

/// Monoexponential tensor signal `s0 * exp(-b gᵀDg)`.
pub fn diffusion_signal(d: &Matrix3<f64>, s0: f64, q: &QSpacePoint) -> Result<f64> {
    check_spd(d)?;
    if !(s0 > 0.0) {
        return Err(Error::domain(format!("s0 {s0} must be positive")));
    }
    Ok(s0 * attenuation(d, q))
}

fn stick_tensor(axis: &Vector3<f64>, l_par: f64, l_perp: f64) -> Matrix3<f64> {
    Matrix3::identity() * l_perp + axis * axis.transpose() * (l_par - l_perp)
}

/// Builds the phantom. The seed sets the in-plane bundle orientation, small
/// offsets of the structures and a smooth baseline-signal modulation.
pub fn build_phantom(size: usize, seed: u64) -> Result<TensorPhantom> {
    if size < MIN_SIZE {
        return Err(Error::domain(format!("phantom size {size} < {MIN_SIZE}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle: f64 = rng.random_range(0.0..PI / 6.0);
    let shift_a: f64 = rng.random_range(-0.05..0.05);
    let shift_b: f64 = rng.random_range(-0.05..0.05);
    let phase: f64 = rng.random_range(0.0..2.0 * PI);

    let axis_a = Vector3::new(angle.cos(), angle.sin(), 0.0);
    let axis_b = Vector3::new(-angle.sin(), angle.cos(), 0.0);

    let d_a = stick_tensor(&axis_a, 1.7e-3, 3.0e-4);
    let d_b = stick_tensor(&axis_b, 1.3e-3, 4.5e-4);
    let d_x = (d_a + d_b) * 0.5;
    let d_gm = Matrix3::identity() * 8.0e-4;
    let d_csf = Matrix3::identity() * 2.5e-3;

    let n = size as f64;
    let mut s0 = Array2::zeros((size, size));
    let mut tensors = Array2::from_elem((size, size), Matrix3::zeros());
    let mut labels = Array2::from_elem((size, size), Tissue::Background);
    let half_width = 0.07;

    for i in 0..size {
        for j in 0..size {
            // (x, y) in [-0.5, 0.5]; rows run along y.
            let x = (j as f64 + 0.5) / n - 0.5;
            let y = (i as f64 + 0.5) / n - 0.5;
            let r2 = (x / 0.44).powi(2) + (y / 0.40).powi(2);
            if r2 > 1.0 {
                continue;
            }
            let p = Vector3::new(x, y, 0.0);
            // Signed distance from each bundle's center line.
            let dist_a = p.dot(&axis_b) - (0.12 + shift_a);
            let dist_b = p.dot(&axis_a) - (-0.10 + shift_b);
            let in_a = dist_a.abs() < half_width;
            let in_b = dist_b.abs() < half_width;
            let csf = ((x - 0.22).powi(2) + (y + 0.2).powi(2)).sqrt() < 0.09;
            let texture = 1.0 + 0.04 * (2.0 * PI * x + phase).sin() * (2.0 * PI * y).cos();

            let (label, d, base) = match (in_a, in_b) {
                (true, true) => (Tissue::Crossing, d_x, 0.62),
                (true, false) => (Tissue::BundleA, d_a, 0.55),
                (false, true) => (Tissue::BundleB, d_b, 0.66),
                (false, false) if csf => (Tissue::Isotropic, d_csf, 1.0),
                (false, false) => (Tissue::Isotropic, d_gm, 0.8),
            };
            labels[(i, j)] = label;
            tensors[(i, j)] = d;
            s0[(i, j)] = base * texture;
        }
    }
    // Background voxels keep an isotropic placeholder tensor so the SPD
    // invariant holds everywhere; their signal is zero through s0.
    for ((i, j), t) in tensors.indexed_iter_mut() {
        if labels[(i, j)] == Tissue::Background {
            *t = d_gm;
        }
    }

    Ok(TensorPhantom {
        s0,
        tensors,
        labels,
        bundle_a_axis: axis_a.into(),
        bundle_b_axis: axis_b.into(),
    })
}

/// Structural channels `(b0, t1, t2)` in `[0, 1]`.
///
/// `b0 = s0 / max(s0)`, `t1 = clamp(1 - MD / 3e-3)`, `t2 = clamp(0.3 + 0.7 FA)`,
/// all zero outside the tissue mask.
pub fn render_structural(phantom: &TensorPhantom) -> Array3<f64> {
    let (h, w) = phantom.shape();
    let s0_max = phantom.s0_max();
    let mut out = Array3::zeros((3, h, w));
    for i in 0..h {
        for j in 0..w {
            if phantom.labels[(i, j)] == Tissue::Background {
                continue;
            }
            let (fa, md) = fa_md(&phantom.tensors[(i, j)]);
            out[(0, i, j)] = (phantom.s0[(i, j)] / s0_max).clamp(0.0, 1.0);
            out[(1, i, j)] = (1.0 - md / 3e-3).clamp(0.0, 1.0);
            out[(2, i, j)] = (0.3 + 0.7 * fa).clamp(0.0, 1.0);
        }
    }
    out
}

/// Phantom-derived (or synthesized) DWIs plus the structural inputs.
#[derive(Debug, Clone)]
pub struct PhantomDataset {
    /// Ground truth; absent for synthesized containers.
    pub phantom: Option<TensorPhantom>,
    pub scheme: SamplingScheme,
    /// `N × H × W` signals divided by the phantom's maximum baseline signal.
    pub dwis: Array3<f64>,
    /// `3 × H × W` channels `(b0, t1, t2)`.
    pub structurals: Array3<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

pub const CHANNEL_NAMES: [&str; 3] = ["b0", "t1", "t2"];

impl PhantomDataset {
    pub fn shape(&self) -> (usize, usize) {
        let (_, h, w) = self.structurals.dim();
        (h, w)
    }

    /// Tissue mask: the phantom labels when known, otherwise `b0 > 0`.
    pub fn mask(&self) -> Array2<bool> {
        match &self.phantom {
            Some(p) => p.mask(),
            None => self
                .structurals
                .index_axis(ndarray::Axis(0), 0)
                .mapv(|v| v > 0.0),
        }
    }

    /// Restriction to a subset of scheme points, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<PhantomDataset> {
        let scheme = self.scheme.select(indices)?;
        let dwis = self.dwis.select(ndarray::Axis(0), indices);
        Ok(PhantomDataset {
            phantom: self.phantom.clone(),
            scheme,
            dwis,
            structurals: self.structurals.clone(),
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        })
    }

    /// SHA-256 over the little-endian 32-bit payloads as written to disk.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.dwis.iter().chain(self.structurals.iter()) {
            hasher.update((*v as f32).to_le_bytes());
        }
        for p in &self.scheme.points {
            for v in [p.g[0], p.g[1], p.g[2], p.b] {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Renders every scheme point.
///
/// Each slice is `S(q) / max(s0)`, so the b = 0 slices coincide with the b0
/// structural channel and per-voxel ratios between shells are exact. Rician
/// noise of scale `noise_sigma` (in normalized units) is added to
/// diffusion-weighted slices before clipping to `[0, SIGNAL_CLIP]`.
pub fn make_dataset(
    phantom: &TensorPhantom,
    scheme: &SamplingScheme,
    noise_sigma: f64,
    seed: u64,
) -> Result<PhantomDataset> {
    if !scheme.has_b0() {
        return Err(Error::domain("scheme must contain a b = 0 point"));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::domain(format!("noise sigma {noise_sigma} must be >= 0")));
    }
    for p in &scheme.points {
        p.validate()?;
    }
    let (h, w) = phantom.shape();
    let structurals = render_structural(phantom);
    let s0_max = phantom.s0_max();
    let mut dwis = Array3::zeros((scheme.len(), h, w));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    for (k, q) in scheme.points.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                if phantom.labels[(i, j)] == Tissue::Background {
                    continue;
                }
                if q.is_b0() {
                    dwis[(k, i, j)] = structurals[(0, i, j)];
                    continue;
                }
                let s = phantom.s0[(i, j)] * attenuation(&phantom.tensors[(i, j)], q) / s0_max;
                let v = if noise_sigma > 0.0 {
                    let re = s + noise_sigma * normal.sample(&mut rng);
                    let im = noise_sigma * normal.sample(&mut rng);
                    (re * re + im * im).sqrt().min(SIGNAL_CLIP)
                } else {
                    s
                };
                dwis[(k, i, j)] = v;
            }
        }
    }
    Ok(PhantomDataset {
        phantom: Some(phantom.clone()),
        scheme: scheme.clone(),
        dwis,
        structurals,
        noise_sigma,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qspace::{multi_shell_scheme, normalize_scheme};

    fn q(g: [f64; 3], b: f64) -> QSpacePoint {
        QSpacePoint { g, b, b_norm: 1.0 }
    }

    #[test]
    fn signal_examples() {
        let d = Matrix3::identity() * 1e-3;
        assert_eq!(diffusion_signal(&d, 0.7, &QSpacePoint { g: [0.0; 3], b: 0.0, b_norm: 0.0 }).unwrap(), 0.7);

        let g = [0.48, 0.6, 0.64];
        let s = diffusion_signal(&d, 2.0, &q(g, 1000.0)).unwrap();
        // 2 * e^-1
        assert!((s - 0.7357588823428847).abs() < 1e-15);

        let d = Matrix3::from_diagonal(&Vector3::new(1.7e-3, 2e-4, 2e-4));
        let s = diffusion_signal(&d, 1.0, &q([1.0, 0.0, 0.0], 1000.0)).unwrap();
        // e^-1.7
        assert!((s - 0.18268352405273466).abs() < 1e-15);
    }

    #[test]
    fn signal_rejects_non_spd() {
        let d = Matrix3::from_diagonal(&Vector3::new(1e-3, -1e-4, 1e-3));
        assert!(diffusion_signal(&d, 1.0, &q([1.0, 0.0, 0.0], 1000.0)).is_err());
        let mut d = Matrix3::identity() * 1e-3;
        d[(0, 1)] = 1e-4;
        assert!(diffusion_signal(&d, 1.0, &q([1.0, 0.0, 0.0], 1000.0)).is_err());
    }

    #[test]
    fn phantom_is_deterministic_and_valid() {
        let a = build_phantom(64, 7).unwrap();
        let b = build_phantom(64, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, build_phantom(64, 8).unwrap());
        assert!(build_phantom(16, 7).is_err());

        let mut seen = std::collections::HashSet::new();
        for ((i, j), t) in a.tensors.indexed_iter() {
            seen.insert(a.labels[(i, j)] as u8);
            check_spd(t).unwrap();
            let eig = t.symmetric_eigenvalues();
            for e in eig.iter() {
                assert!(*e >= EIGEN_RANGE.0 && *e <= EIGEN_RANGE.1);
            }
            if a.labels[(i, j)] == Tissue::Background {
                assert_eq!(a.s0[(i, j)], 0.0);
            }
        }
        assert_eq!(seen.len(), 5);
        // Background ring.
        assert_eq!(a.labels[(0, 0)], Tissue::Background);
        assert_eq!(a.labels[(63, 32)], Tissue::Background);
    }

    #[test]
    fn isotropic_fa_and_bundle_axes() {
        let p = build_phantom(64, 7).unwrap();
        for ((i, j), t) in p.tensors.indexed_iter() {
            match p.labels[(i, j)] {
                Tissue::Isotropic => assert!(fa_md(t).0.abs() < 1e-12),
                Tissue::BundleA | Tissue::BundleB => {
                    let axis = if p.labels[(i, j)] == Tissue::BundleA {
                        Vector3::from(p.bundle_a_axis)
                    } else {
                        Vector3::from(p.bundle_b_axis)
                    };
                    let eig = t.symmetric_eigen();
                    let k = eig.eigenvalues.imax();
                    let v = eig.eigenvectors.column(k);
                    assert!(v.dot(&axis).abs() >= 0.999);
                }
                _ => {}
            }
        }
        let a = Vector3::from(p.bundle_a_axis);
        let b = Vector3::from(p.bundle_b_axis);
        assert!(a.dot(&b).abs() < 1e-15);
    }

    #[test]
    fn structural_channels() {
        let p = build_phantom(64, 3).unwrap();
        let s = render_structural(&p);
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        for ((i, j), l) in p.labels.indexed_iter() {
            if *l == Tissue::Background {
                assert!((0..3).all(|c| s[(c, i, j)] == 0.0));
            }
        }
        // Same s0, different tensors: b0 identical, t1/t2 differ.
        let mut p2 = p.clone();
        let (i, j) = p
            .labels
            .indexed_iter()
            .find(|(_, l)| **l == Tissue::BundleA)
            .map(|(ix, _)| ix)
            .unwrap();
        let (k, l) = p
            .labels
            .indexed_iter()
            .find(|(_, l)| **l == Tissue::Isotropic)
            .map(|(ix, _)| ix)
            .unwrap();
        p2.s0[(k, l)] = p2.s0[(i, j)];
        let s2 = render_structural(&p2);
        assert_eq!(s2[(0, i, j)], s2[(0, k, l)]);
        assert_ne!(s2[(1, i, j)], s2[(1, k, l)]);
        assert_ne!(s2[(2, i, j)], s2[(2, k, l)]);
    }

    #[test]
    fn dataset_noiseless_properties() {
        let p = build_phantom(48, 1).unwrap();
        let scheme = multi_shell_scheme(&[1000.0, 2000.0], 12).unwrap();
        let ds = make_dataset(&p, &scheme, 0.0, 0).unwrap();
        assert_eq!(ds.dwis.dim().0, 25);
        // b0 slice equals the b0 channel exactly.
        for i in 0..48 {
            for j in 0..48 {
                assert_eq!(ds.dwis[(0, i, j)], ds.structurals[(0, i, j)]);
            }
        }
        // Shell ratio oracle: S(2000)/S(1000) = exp(-1000 gᵀDg).
        for d in 0..12 {
            let q1 = &scheme.points[1 + d];
            let g = Vector3::from(q1.g);
            for ((i, j), t) in p.tensors.indexed_iter() {
                if p.labels[(i, j)] == Tissue::Background {
                    continue;
                }
                let s1 = ds.dwis[(1 + d, i, j)];
                let s2 = ds.dwis[(13 + d, i, j)];
                let expected = (-1000.0 * g.dot(&(t * g))).exp();
                assert!((s2 / s1 - expected).abs() < 1e-12);
                assert!(s2 <= s1 && s1 <= ds.dwis[(0, i, j)]);
                assert!((0.0..=1.0).contains(&s1));
            }
        }
    }

    #[test]
    fn dataset_requires_b0_and_is_reproducible() {
        let p = build_phantom(32, 1).unwrap();
        let no_b0 = normalize_scheme(&[([1.0, 0.0, 0.0], 1000.0)]).unwrap();
        assert!(make_dataset(&p, &no_b0, 0.0, 0).is_err());

        let scheme = multi_shell_scheme(&[1000.0], 6).unwrap();
        let a = make_dataset(&p, &scheme, 0.02, 11).unwrap();
        let b = make_dataset(&p, &scheme, 0.02, 11).unwrap();
        let c = make_dataset(&p, &scheme, 0.02, 12).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert!(a.dwis.iter().all(|v| (0.0..=SIGNAL_CLIP).contains(v)));
    }
}
