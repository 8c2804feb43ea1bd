//! TOML configuration files. Sections mirror the library configuration types;
//! network sections are merged over the library defaults so a file only needs
//! the keys it changes.

use std::path::{Path, PathBuf};

use qcatn::model::{DiscriminatorConfig, GeneratorConfig};
use qcatn::qspace::{load_fsl_tables, multi_shell_scheme, SamplingScheme};
use qcatn::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, Context};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub size: usize,
    pub seed: u64,
    pub noise_sigma: f64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            size: 64,
            seed: 7,
            noise_sigma: 0.0,
        }
    }
}

/// Either generated shells or FSL gradient tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shells: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dirs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bvals: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bvecs: Option<PathBuf>,
}

impl Default for SchemeSection {
    fn default() -> Self {
        SchemeSection {
            shells: Some(vec![0.0, 1000.0, 2000.0]),
            dirs: Some(30),
            bvals: None,
            bvecs: None,
        }
    }
}

impl SchemeSection {
    pub fn resolve(&self) -> CliResult<SamplingScheme> {
        match (&self.shells, self.dirs, &self.bvals, &self.bvecs) {
            (Some(shells), Some(dirs), None, None) => Ok(multi_shell_scheme(shells, dirs)?),
            (None, None, Some(bvals), Some(bvecs)) => {
                let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| CliError::io(p, e));
                Ok(load_fsl_tables(&read(bvals)?, &read(bvecs)?)?)
            }
            _ => Err(CliError::validation(
                "a scheme needs either shells and dirs, or bvals and bvecs",
            )),
        }
    }

    fn rebase(&mut self, base: &Path) {
        for p in [&mut self.bvals, &mut self.bvecs].into_iter().flatten() {
            *p = rebase(base, p);
        }
    }
}

/// Synthesis scheme; when no scheme keys are given the training scheme is
/// reused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shells: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dirs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bvals: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bvecs: Option<PathBuf>,
    pub chunk: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            shells: None,
            dirs: None,
            bvals: None,
            bvecs: None,
            chunk: 16,
        }
    }
}

impl SynthSection {
    pub fn scheme(&self) -> Option<SchemeSection> {
        if self.shells.is_none() && self.dirs.is_none() && self.bvals.is_none() && self.bvecs.is_none() {
            return None;
        }
        Some(SchemeSection {
            shells: self.shells.clone(),
            dirs: self.dirs,
            bvals: self.bvals.clone(),
            bvecs: self.bvecs.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    /// Shell fitted together with the b = 0 points (default: lowest non-zero).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shell: Option<f64>,
    /// Replace synthesized b = 0 slices by the measured b0 channel.
    pub b0_from_structurals: bool,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            shell: None,
            b0_from_structurals: true,
        }
    }
}

/// Optional sections accepted by `train --config`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    #[serde(default)]
    pub train: Option<toml::Table>,
    #[serde(default)]
    pub generator: Option<toml::Table>,
    #[serde(default)]
    pub discriminator: Option<toml::Table>,
}

/// Everything `run` needs for phantom → train → synth → fit-dti → metrics.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out: PathBuf,
    #[serde(default)]
    pub phantom: PhantomSection,
    #[serde(default)]
    pub scheme: SchemeSection,
    #[serde(default)]
    pub train: Option<toml::Table>,
    #[serde(default)]
    pub generator: Option<toml::Table>,
    #[serde(default)]
    pub discriminator: Option<toml::Table>,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub fit: FitSection,
}

/// Fully resolved training setup, echoed into output directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTraining {
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedExperiment {
    pub out: PathBuf,
    pub phantom: PhantomSection,
    pub scheme: SchemeSection,
    pub synth: SynthSection,
    pub fit: FitSection,
    #[serde(flatten)]
    pub training: ResolvedTraining,
}

/// Command-line values that take precedence over file values.
#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub epochs: Option<u64>,
    pub batch_size: Option<usize>,
    pub lr_g: Option<f64>,
    pub lr_d: Option<f64>,
    pub seed: Option<u64>,
    pub base_channels: Option<usize>,
}

fn rebase(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

pub fn to_toml<T: Serialize>(value: &T) -> CliResult<String> {
    toml::to_string_pretty(value).map_err(|e| CliError::validation(format!("cannot render config: {e}")))
}

fn merge(into: &mut toml::Table, from: &toml::Table) {
    for (k, v) in from {
        match (into.get_mut(k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            _ => {
                into.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Deep-merges `section` over the serialized `base`, so unknown keys are
/// rejected by the target type.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, section: Option<&toml::Table>, name: &str) -> CliResult<T> {
    let mut table = toml::Table::try_from(base).map_err(|e| CliError::validation(format!("[{name}]: {e}")))?;
    if let Some(s) = section {
        merge(&mut table, s);
    }
    table
        .try_into()
        .map_err(|e| CliError::validation(format!("[{name}]: {e}")))
}

impl ResolvedTraining {
    /// Defaults, then file sections, then overrides; everything validated.
    pub fn build(
        train: Option<&toml::Table>,
        generator: Option<&toml::Table>,
        discriminator: Option<&toml::Table>,
        overrides: &TrainOverrides,
        in_size: (usize, usize),
    ) -> CliResult<Self> {
        let mut t: TrainConfig = overlay(&TrainConfig::default(), train, "train")?;
        let mut g: GeneratorConfig = overlay(
            &GeneratorConfig {
                in_size,
                ..GeneratorConfig::default()
            },
            generator,
            "generator",
        )?;
        let mut d: DiscriminatorConfig = overlay(
            &DiscriminatorConfig {
                in_size,
                ..DiscriminatorConfig::default()
            },
            discriminator,
            "discriminator",
        )?;
        let o = overrides;
        if let Some(v) = o.epochs {
            t.epochs = v;
        }
        if let Some(v) = o.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = o.lr_g {
            t.lr_g = v;
        }
        if let Some(v) = o.lr_d {
            t.lr_d = v;
        }
        if let Some(v) = o.seed {
            t.seed = v;
        }
        if let Some(v) = o.base_channels {
            g.base_channels = v;
            d.base_channels = v;
        }
        t.validate().context("[train]")?;
        g.validate().context("[generator]")?;
        d.validate().context("[discriminator]")?;
        if g.in_size != in_size || d.in_size != in_size {
            return Err(CliError::format(format!(
                "networks expect {:?} / {:?} but the data is {in_size:?}",
                g.in_size, d.in_size
            )));
        }
        Ok(ResolvedTraining {
            train: t,
            generator: g,
            discriminator: d,
        })
    }
}

impl ExperimentConfig {
    /// Reads the file and makes relative paths relative to its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let mut cfg: ExperimentConfig = read_toml(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.out = rebase(base, &cfg.out);
        cfg.scheme.rebase(base);
        for p in [&mut cfg.synth.bvals, &mut cfg.synth.bvecs].into_iter().flatten() {
            *p = rebase(base, p);
        }
        let s = &cfg.synth;
        for p in [&cfg.scheme.bvals, &cfg.scheme.bvecs, &s.bvals, &s.bvecs].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::io(p, "referenced file does not exist"));
            }
        }
        Ok(cfg)
    }
}
