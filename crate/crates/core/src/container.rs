//! On-disk containers for datasets and scalar maps.
//!
//! A dataset directory holds `meta.json`, the flat little-endian payloads
//! `dwis.bin` (`N × H × W`) and `structurals.bin` (`3 × H × W`) as 32-bit
//! reals in row-major (slice, row, column) order, and the FSL tables `bvals`
//! and `bvecs`. When the ground-truth phantom is known it is stored alongside
//! in 64-bit form (`s0.bin`, `tensors.bin` with the nine row-major entries
//! per voxel, and `labels.bin` as one byte per voxel).
//!
//! A map directory holds `meta.json` and `maps.bin` (`K × H × W`, 32-bit).

use std::path::Path;

use nalgebra::Matrix3;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{f32_from_le, f32_le_bytes, f64_from_le, f64_le_bytes, read_bytes, read_json, read_text, write_bytes, write_json};
use crate::phantom::{PhantomDataset, Tissue, TensorPhantom, CHANNEL_NAMES};
use crate::qspace::{load_fsl_tables, save_fsl_tables};

pub const DATASET_FORMAT: &str = "qcatn-dataset/1";
pub const MAPS_FORMAT: &str = "qcatn-maps/1";
pub const META_FILE: &str = "meta.json";
pub const DWIS_FILE: &str = "dwis.bin";
pub const STRUCTURALS_FILE: &str = "structurals.bin";
pub const BVALS_FILE: &str = "bvals";
pub const BVECS_FILE: &str = "bvecs";
pub const MAPS_FILE: &str = "maps.bin";
const S0_FILE: &str = "s0.bin";
const TENSORS_FILE: &str = "tensors.bin";
const LABELS_FILE: &str = "labels.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomMeta {
    pub bundle_a_axis: [f64; 3],
    pub bundle_b_axis: [f64; 3],
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format: String,
    /// `[H, W]`.
    pub shape: [usize; 2],
    pub n_volumes: usize,
    pub channel_names: Vec<String>,
    pub bvals: String,
    pub bvecs: String,
    /// Reference maximum b-value used for `b_norm`.
    pub b_max: f64,
    pub seed: u64,
    pub noise_sigma: f64,
    pub dtype: String,
    pub byte_order: String,
    pub digest: String,
    pub phantom: Option<PhantomMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapsMeta {
    pub format: String,
    pub shape: [usize; 2],
    pub names: Vec<String>,
    pub dtype: String,
    pub byte_order: String,
}

/// Named `H × W` scalar maps.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSet {
    pub names: Vec<String>,
    pub maps: Vec<Array2<f64>>,
}

impl MapSet {
    pub fn new(entries: Vec<(String, Array2<f64>)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::domain("map set is empty"));
        }
        let dim = entries[0].1.dim();
        if entries.iter().any(|(_, m)| m.dim() != dim) {
            return Err(Error::shape("maps in one set must share a shape"));
        }
        let (names, maps) = entries.into_iter().unzip();
        Ok(MapSet { names, maps })
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &self.maps[i])
    }

    pub fn shape(&self) -> (usize, usize) {
        self.maps[0].dim()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_payload(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = read_bytes(path)?;
    if bytes.len() != expected {
        return Err(Error::Integrity(format!(
            "{}: expected {expected} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes)
}

fn check_format(found: &str, expected: &str, path: &Path) -> Result<()> {
    if found != expected {
        return Err(Error::Format(format!(
            "{}: unsupported format {found:?}, expected {expected:?}",
            path.display()
        )));
    }
    Ok(())
}

/// Writes a dataset container. Returns the recorded digest.
pub fn save_dataset(dir: &Path, ds: &PhantomDataset) -> Result<String> {
    let (h, w) = ds.shape();
    if ds.dwis.dim() != (ds.scheme.len(), h, w) {
        return Err(Error::shape(format!(
            "dwis {:?} do not match {} scheme points of {h}x{w}",
            ds.dwis.dim(),
            ds.scheme.len()
        )));
    }
    create_dir(dir)?;
    let (bvals, bvecs) = save_fsl_tables(&ds.scheme);
    write_bytes(&dir.join(BVALS_FILE), bvals.as_bytes())?;
    write_bytes(&dir.join(BVECS_FILE), bvecs.as_bytes())?;
    write_bytes(&dir.join(DWIS_FILE), &f32_le_bytes(ds.dwis.iter().copied()))?;
    write_bytes(&dir.join(STRUCTURALS_FILE), &f32_le_bytes(ds.structurals.iter().copied()))?;

    let phantom = match &ds.phantom {
        Some(p) => {
            write_bytes(&dir.join(S0_FILE), &f64_le_bytes(p.s0.iter().copied()))?;
            let entries = p.tensors.iter().flat_map(|d| d.transpose().as_slice().to_vec());
            write_bytes(&dir.join(TENSORS_FILE), &f64_le_bytes(entries))?;
            let labels: Vec<u8> = p.labels.iter().map(|&l| l as u8).collect();
            write_bytes(&dir.join(LABELS_FILE), &labels)?;
            Some(PhantomMeta {
                bundle_a_axis: p.bundle_a_axis,
                bundle_b_axis: p.bundle_b_axis,
                files: vec![S0_FILE.into(), TENSORS_FILE.into(), LABELS_FILE.into()],
            })
        }
        None => None,
    };

    let digest = ds.digest();
    let meta = DatasetMeta {
        format: DATASET_FORMAT.into(),
        shape: [h, w],
        n_volumes: ds.scheme.len(),
        channel_names: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        bvals: BVALS_FILE.into(),
        bvecs: BVECS_FILE.into(),
        b_max: ds.scheme.b_max,
        seed: ds.seed,
        noise_sigma: ds.noise_sigma,
        dtype: "float32".into(),
        byte_order: "little-endian".into(),
        digest: digest.clone(),
        phantom,
    };
    write_json(&dir.join(META_FILE), &meta)?;
    Ok(digest)
}

pub fn read_dataset_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join(META_FILE);
    let meta: DatasetMeta = read_json(&path)?;
    check_format(&meta.format, DATASET_FORMAT, &path)?;
    if meta.dtype != "float32" || meta.byte_order != "little-endian" {
        return Err(Error::Format(format!(
            "{}: unsupported payload {} / {}",
            path.display(),
            meta.dtype,
            meta.byte_order
        )));
    }
    Ok(meta)
}

/// Reads a dataset container and verifies its digest.
pub fn load_dataset(dir: &Path) -> Result<PhantomDataset> {
    let meta = read_dataset_meta(dir)?;
    let [h, w] = meta.shape;
    let scheme = load_fsl_tables(&read_text(&dir.join(&meta.bvals))?, &read_text(&dir.join(&meta.bvecs))?)?
        .with_reference_b_max(meta.b_max)?;
    if scheme.len() != meta.n_volumes {
        return Err(Error::Integrity(format!(
            "gradient tables list {} points but meta records {}",
            scheme.len(),
            meta.n_volumes
        )));
    }
    let n = meta.n_volumes;
    let dwis = f32_from_le(&read_payload(&dir.join(DWIS_FILE), n * h * w * 4)?);
    let structurals = f32_from_le(&read_payload(&dir.join(STRUCTURALS_FILE), 3 * h * w * 4)?);

    let phantom = match &meta.phantom {
        Some(pm) => Some(load_phantom(dir, h, w, pm)?),
        None => None,
    };
    let ds = PhantomDataset {
        phantom,
        scheme,
        dwis: Array3::from_shape_vec((n, h, w), dwis).expect("length checked"),
        structurals: Array3::from_shape_vec((3, h, w), structurals).expect("length checked"),
        noise_sigma: meta.noise_sigma,
        seed: meta.seed,
    };
    let digest = ds.digest();
    if digest != meta.digest {
        return Err(Error::Integrity(format!(
            "{}: digest {digest} does not match recorded {}",
            dir.display(),
            meta.digest
        )));
    }
    Ok(ds)
}

fn load_phantom(dir: &Path, h: usize, w: usize, meta: &PhantomMeta) -> Result<TensorPhantom> {
    let hw = h * w;
    let s0 = f64_from_le(&read_payload(&dir.join(S0_FILE), hw * 8)?);
    let t = f64_from_le(&read_payload(&dir.join(TENSORS_FILE), hw * 9 * 8)?);
    let labels = read_payload(&dir.join(LABELS_FILE), hw)?
        .into_iter()
        .map(Tissue::from_u8)
        .collect::<Result<Vec<_>>>()?;
    let tensors: Vec<Matrix3<f64>> = t
        .chunks_exact(9)
        .map(Matrix3::from_row_slice)
        .collect();
    Ok(TensorPhantom {
        s0: Array2::from_shape_vec((h, w), s0).expect("length checked"),
        tensors: Array2::from_shape_vec((h, w), tensors).expect("length checked"),
        labels: Array2::from_shape_vec((h, w), labels).expect("length checked"),
        bundle_a_axis: meta.bundle_a_axis,
        bundle_b_axis: meta.bundle_b_axis,
    })
}

pub fn save_maps(dir: &Path, maps: &MapSet) -> Result<()> {
    let (h, w) = maps.shape();
    create_dir(dir)?;
    write_bytes(
        &dir.join(MAPS_FILE),
        &f32_le_bytes(maps.maps.iter().flat_map(|m| m.iter().copied())),
    )?;
    let meta = MapsMeta {
        format: MAPS_FORMAT.into(),
        shape: [h, w],
        names: maps.names.clone(),
        dtype: "float32".into(),
        byte_order: "little-endian".into(),
    };
    write_json(&dir.join(META_FILE), &meta)
}

pub fn load_maps(dir: &Path) -> Result<MapSet> {
    let path = dir.join(META_FILE);
    let meta: MapsMeta = read_json(&path)?;
    check_format(&meta.format, MAPS_FORMAT, &path)?;
    let [h, w] = meta.shape;
    let k = meta.names.len();
    let values = f32_from_le(&read_payload(&dir.join(MAPS_FILE), k * h * w * 4)?);
    let maps = values
        .chunks_exact(h * w)
        .map(|c| Array2::from_shape_vec((h, w), c.to_vec()).expect("chunk size"))
        .collect();
    Ok(MapSet { names: meta.names, maps })
}

/// Tells a dataset directory from a map directory by its `format` field.
pub fn container_format(dir: &Path) -> Result<String> {
    #[derive(Deserialize)]
    struct Probe {
        format: String,
    }
    let probe: Probe = read_json(&dir.join(META_FILE))?;
    Ok(probe.format)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{build_phantom, make_dataset};
    use crate::qspace::multi_shell_scheme;

    #[test]
    fn dataset_round_trip_is_exact_on_stored_precision() {
        let dir = tempfile::tempdir().unwrap();
        let p = build_phantom(32, 3).unwrap();
        let scheme = multi_shell_scheme(&[1000.0, 2000.0], 6).unwrap();
        let ds = make_dataset(&p, &scheme, 0.02, 4).unwrap();
        let digest = save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.digest(), digest);
        assert_eq!(back.scheme, ds.scheme);
        let bp = back.phantom.as_ref().unwrap();
        assert_eq!(bp.s0, p.s0);
        assert_eq!(bp.labels, p.labels);
        assert_eq!((bp.bundle_a_axis, bp.bundle_b_axis), (p.bundle_a_axis, p.bundle_b_axis));
        for (a, b) in bp.tensors.iter().zip(p.tensors.iter()) {
            assert_eq!(a, b);
        }
        for (a, b) in back.dwis.iter().zip(ds.dwis.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        // saving the loaded copy reproduces every payload byte
        let dir2 = tempfile::tempdir().unwrap();
        save_dataset(dir2.path(), &back).unwrap();
        for f in [DWIS_FILE, STRUCTURALS_FILE, BVALS_FILE, BVECS_FILE, S0_FILE, TENSORS_FILE, LABELS_FILE] {
            assert_eq!(
                std::fs::read(dir.path().join(f)).unwrap(),
                std::fs::read(dir2.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn corrupted_payloads_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = build_phantom(32, 3).unwrap();
        let scheme = multi_shell_scheme(&[1000.0], 6).unwrap();
        let ds = make_dataset(&p, &scheme, 0.0, 4).unwrap();
        save_dataset(dir.path(), &ds).unwrap();

        let path = dir.path().join(DWIS_FILE);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[100] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Integrity(_))));
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn unknown_format_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let maps = MapSet::new(vec![("fa".into(), Array2::zeros((4, 4)))]).unwrap();
        save_maps(dir.path(), &maps).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
        assert_eq!(container_format(dir.path()).unwrap(), MAPS_FORMAT);
    }

    #[test]
    fn map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let fa = Array2::from_shape_fn((5, 7), |(i, j)| (i * 7 + j) as f64 / 35.0);
        let md = fa.mapv(|v| v * 1e-3);
        let maps = MapSet::new(vec![("fa".into(), fa.clone()), ("md".into(), md)]).unwrap();
        save_maps(dir.path(), &maps).unwrap();
        let back = load_maps(dir.path()).unwrap();
        assert_eq!(back.names, vec!["fa", "md"]);
        assert_eq!(back.get("fa").unwrap(), &fa.mapv(|v| v as f32 as f64));
        assert!(MapSet::new(vec![("a".into(), Array2::zeros((2, 2))), ("b".into(), Array2::zeros((3, 2)))]).is_err());
    }
}
