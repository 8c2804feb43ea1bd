//! Model checkpoint directory: `weights.bin` holds every generator parameter
//! followed by every discriminator parameter as little-endian `f32`, in
//! registration order; `arch.json` records the configurations, the parameter
//! manifest and a SHA-256 digest of the weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use crate::error::{Error, Result};
use crate::io::{read_bytes, read_json, sha256_hex, write_bytes, write_json};
use crate::nn::ParamSpec;

pub const FORMAT_VERSION: &str = "qcatn-checkpoint/1";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const ARCH_FILE: &str = "arch.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchManifest {
    pub format_version: String,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    /// b-value that maps to `b_norm = 1` for this model's conditioning.
    pub b_max: f64,
    pub generator_params: Vec<ParamSpec>,
    pub discriminator_params: Vec<ParamSpec>,
    pub weights_bytes: u64,
    pub weights_sha256: String,
}

/// A trained generator/discriminator pair and its conditioning scale.
#[derive(Debug, Clone)]
pub struct Models {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub b_max: f64,
}

pub fn save_models(dir: &Path, models: &Models) -> Result<ArchManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut weights = Vec::new();
    models.generator.params().write_f32_le(&mut weights);
    models.discriminator.params().write_f32_le(&mut weights);
    let manifest = ArchManifest {
        format_version: FORMAT_VERSION.to_string(),
        generator: models.generator.config().clone(),
        discriminator: models.discriminator.config().clone(),
        b_max: models.b_max,
        generator_params: models.generator.params().specs().to_vec(),
        discriminator_params: models.discriminator.params().specs().to_vec(),
        weights_bytes: weights.len() as u64,
        weights_sha256: sha256_hex(&weights),
    };
    write_bytes(&dir.join(WEIGHTS_FILE), &weights)?;
    write_json(&dir.join(ARCH_FILE), &manifest)?;
    Ok(manifest)
}

/// Reads only the manifest, refusing unknown format versions.
pub fn read_manifest(dir: &Path) -> Result<ArchManifest> {
    let value: serde_json::Value = read_json(&dir.join(ARCH_FILE))?;
    let version = value.get("format_version").and_then(|v| v.as_str()).unwrap_or("<missing>");
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {version:?} is not supported (expected {FORMAT_VERSION:?})"
        )));
    }
    serde_json::from_value(value).map_err(|e| Error::Format(format!("invalid {ARCH_FILE}: {e}")))
}

pub fn load_models(dir: &Path) -> Result<Models> {
    let manifest = read_manifest(dir)?;
    let mut generator = Generator::<f32>::new(manifest.generator.clone())?;
    let mut discriminator = Discriminator::<f32>::new(manifest.discriminator.clone())?;
    generator.params().check_manifest(&manifest.generator_params)?;
    discriminator.params().check_manifest(&manifest.discriminator_params)?;
    let weights = read_bytes(&dir.join(WEIGHTS_FILE))?;
    let expected = 4 * (generator.params().numel() + discriminator.params().numel());
    if weights.len() as u64 != manifest.weights_bytes || weights.len() != expected {
        return Err(Error::Integrity(format!(
            "{WEIGHTS_FILE} holds {} bytes, expected {expected}",
            weights.len()
        )));
    }
    if sha256_hex(&weights) != manifest.weights_sha256 {
        return Err(Error::Integrity(format!("{WEIGHTS_FILE} does not match its recorded digest")));
    }
    let used = generator.params_mut().read_f32_le(&weights)?;
    discriminator.params_mut().read_f32_le(&weights[used..])?;
    if !(manifest.b_max.is_finite() && manifest.b_max > 0.0) {
        return Err(Error::Format(format!("invalid b_max {} in {ARCH_FILE}", manifest.b_max)));
    }
    Ok(Models {
        generator,
        discriminator,
        b_max: manifest.b_max,
    })
}
