use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use qcatn::analysis::{fit_dti, map_metrics, MetricReport};
use qcatn::container::{
    container_format, load_dataset, load_maps, save_dataset, save_maps, MapSet, DATASET_FORMAT, MAPS_FORMAT,
};
use qcatn::losses::append_loss_rows;
use qcatn::model::load_models;
use qcatn::phantom::{build_phantom, make_dataset, PhantomDataset, CHANNEL_NAMES};
use qcatn::qspace::SamplingScheme;
use qcatn::training::{synthesize, Trainer, STATE_FILE};

use crate::config::{
    read_toml, to_toml, ExperimentConfig, FitSection, PhantomSection, ResolvedExperiment, ResolvedTraining,
    SchemeSection, TrainFile, TrainOverrides,
};
use crate::error::{CliError, CliResult, Context};
use crate::plot::{plot_map, save_png, Sidecar};

pub const CONFIG_ECHO: &str = "config.toml";
pub const LOSS_CSV: &str = "loss.csv";
pub const LATEST_DIR: &str = "latest";
pub const FINAL_DIR: &str = "final";
const MASK_MAP: &str = "mask";

fn require_dir(dir: &Path) -> CliResult<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::io(dir, "directory does not exist"))
    }
}

fn open_dataset(dir: &Path) -> CliResult<PhantomDataset> {
    require_dir(dir)?;
    load_dataset(dir).context(dir.display())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn phantom_dataset(section: &PhantomSection, scheme: &SamplingScheme) -> CliResult<PhantomDataset> {
    let p = build_phantom(section.size, section.seed)?;
    Ok(make_dataset(&p, scheme, section.noise_sigma, section.seed)?)
}

/// Writes a phantom dataset container and returns its digest.
pub fn cmd_phantom(section: &PhantomSection, scheme: &SchemeSection, out: &Path) -> CliResult<String> {
    let ds = phantom_dataset(section, &scheme.resolve()?)?;
    let digest = save_dataset(out, &ds)?;
    println!("{} volumes {}x{} digest {digest}", ds.scheme.len(), section.size, section.size);
    Ok(digest)
}

pub fn resolve_training(
    config: Option<&Path>,
    overrides: &TrainOverrides,
    in_size: (usize, usize),
) -> CliResult<ResolvedTraining> {
    let file: TrainFile = match config {
        Some(p) => read_toml(p)?,
        None => TrainFile::default(),
    };
    ResolvedTraining::build(
        file.train.as_ref(),
        file.generator.as_ref(),
        file.discriminator.as_ref(),
        overrides,
        in_size,
    )
}

/// Trains into `out`: a checkpoint in `out/latest` after every epoch, the
/// final one in `out/final`, and the per-step losses in `out/loss.csv`.
/// With `resume`, training continues from `out/latest` when present.
pub fn train_into(ds: &PhantomDataset, resolved: &ResolvedTraining, out: &Path, resume: bool) -> CliResult<Trainer> {
    let latest = out.join(LATEST_DIR);
    let resumed = resume && latest.join(STATE_FILE).is_file();
    let mut trainer = if resumed {
        let mut t = Trainer::load_checkpoint(&latest).context(latest.display())?;
        t.config.epochs = resolved.train.epochs;
        t
    } else {
        Trainer::new(
            resolved.train.clone(),
            resolved.generator.clone(),
            resolved.discriminator.clone(),
            ds,
        )?
    };
    let echo = ResolvedTraining {
        train: trainer.config.clone(),
        generator: trainer.generator.config().clone(),
        discriminator: trainer.discriminator.config().clone(),
    };
    write_text(&out.join(CONFIG_ECHO), &to_toml(&echo)?)?;
    let csv = out.join(LOSS_CSV);
    if !resumed && csv.exists() {
        std::fs::remove_file(&csv).map_err(|e| CliError::io(&csv, e))?;
    }
    let total = trainer.config.epochs;
    trainer
        .train(ds, |t, rows| {
            append_loss_rows(&csv, rows)?;
            t.save_checkpoint(&latest)?;
            let n = rows.len() as f64;
            let mean = |f: fn(&qcatn::losses::LossRecord) -> f64| rows.iter().map(f).sum::<f64>() / n;
            eprintln!(
                "epoch {}/{total} step {} rec {:.5} ac {:.5} adv_g {:.4} adv_d {:.4}",
                t.epoch(),
                t.step(),
                mean(|r| r.loss_rec),
                mean(|r| r.loss_ac),
                mean(|r| r.loss_adv_g),
                mean(|r| r.loss_adv_d),
            );
            Ok(())
        })
        .context("training")?;
    trainer.save_checkpoint(&out.join(FINAL_DIR))?;
    Ok(trainer)
}

pub fn cmd_train(
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    overrides: &TrainOverrides,
    resume: bool,
) -> CliResult<()> {
    let ds = open_dataset(data)?;
    let resolved = resolve_training(config, overrides, ds.shape())?;
    let t = train_into(&ds, &resolved, out, resume)?;
    println!("trained {} steps; checkpoint {}", t.step(), out.join(FINAL_DIR).display());
    Ok(())
}

/// Synthesizes one slice per scheme point. The scheme is normalized against
/// the checkpoint's b_max.
pub fn synthesize_dataset(
    checkpoint: &Path,
    structurals: &PhantomDataset,
    scheme: &SamplingScheme,
    chunk: usize,
) -> CliResult<PhantomDataset> {
    require_dir(checkpoint)?;
    let models = load_models(checkpoint).context(checkpoint.display())?;
    let scheme = scheme.with_reference_b_max(models.b_max).map_err(|e| {
        CliError::format(format!("scheme is incompatible with the checkpoint: {e}"))
    })?;
    let in_size = models.generator.config().in_size;
    if in_size != structurals.shape() {
        return Err(CliError::format(format!(
            "checkpoint expects {:?} slices, structurals are {:?}",
            in_size,
            structurals.shape()
        )));
    }
    if chunk == 0 {
        return Err(CliError::validation("chunk must be positive"));
    }
    let dwis = synthesize(&models.generator, &structurals.structurals, &scheme.points, chunk)?;
    Ok(PhantomDataset {
        phantom: None,
        scheme,
        dwis,
        structurals: structurals.structurals.clone(),
        noise_sigma: 0.0,
        seed: 0,
    })
}

pub fn cmd_synth(checkpoint: &Path, structurals: &Path, scheme: &SchemeSection, chunk: usize, out: &Path) -> CliResult<()> {
    let scheme = scheme.resolve()?;
    let ds = open_dataset(structurals)?;
    let syn = synthesize_dataset(checkpoint, &ds, &scheme, chunk)?;
    let digest = save_dataset(out, &syn)?;
    println!("{} volumes synthesized digest {digest}", syn.scheme.len());
    Ok(())
}

/// FA, MD, fit residual and the fitted mask (as 0/1) from the b = 0 points
/// plus one shell, by default the lowest non-zero one.
pub fn fit_maps(ds: &PhantomDataset, fit: &FitSection) -> CliResult<MapSet> {
    let shell = match fit.shell {
        Some(b) => b,
        None => ds
            .scheme
            .shells()
            .into_iter()
            .find(|&b| b > 0.0)
            .ok_or_else(|| CliError::format("dataset has no diffusion-weighted points"))?,
    };
    let idx = ds.scheme.shell_with_b0(shell);
    if !idx.iter().any(|&i| ds.scheme.points[i].b > 0.0) {
        return Err(CliError::format(format!("no points on shell b = {shell}")));
    }
    let mut ds = ds.select(&idx)?;
    if fit.b0_from_structurals {
        let b0 = ds.structurals.index_axis(Axis(0), 0).to_owned();
        for (k, p) in ds.scheme.points.iter().enumerate() {
            if p.is_b0() {
                ds.dwis.index_axis_mut(Axis(0), k).assign(&b0);
            }
        }
    }
    let f = fit_dti(&ds.dwis, &ds.scheme, &ds.mask())?;
    Ok(MapSet::new(vec![
        ("fa".into(), f.fa),
        ("md".into(), f.md),
        ("residual".into(), f.residual),
        (MASK_MAP.into(), f.mask.mapv(|m| if m { 1.0 } else { 0.0 })),
    ])?)
}

/// Analytic FA/MD of a phantom dataset.
pub fn truth_maps(ds: &PhantomDataset) -> CliResult<MapSet> {
    let p = ds
        .phantom
        .as_ref()
        .ok_or_else(|| CliError::format("dataset carries no ground-truth phantom"))?;
    let (fa, md) = p.fa_md_maps();
    Ok(MapSet::new(vec![
        ("fa".into(), fa),
        ("md".into(), md),
        (MASK_MAP.into(), p.mask().mapv(|m| if m { 1.0 } else { 0.0 })),
    ])?)
}

pub fn cmd_fit_dti(data: &Path, fit: &FitSection, out: &Path) -> CliResult<()> {
    let ds = open_dataset(data)?;
    let maps = fit_maps(&ds, fit)?;
    save_maps(out, &maps)?;
    println!("wrote {} to {}", maps.names.join(", "), out.display());
    Ok(())
}

enum Container {
    Dataset(Box<PhantomDataset>),
    Maps(MapSet),
}

fn open_container(dir: &Path) -> CliResult<Container> {
    require_dir(dir)?;
    match container_format(dir).context(dir.display())?.as_str() {
        DATASET_FORMAT => Ok(Container::Dataset(Box::new(open_dataset(dir)?))),
        MAPS_FORMAT => Ok(Container::Maps(load_maps(dir).context(dir.display())?)),
        other => Err(CliError::format(format!("{}: unknown container format {other:?}", dir.display()))),
    }
}

fn same_scheme(a: &SamplingScheme, b: &SamplingScheme) -> bool {
    a.len() == b.len()
        && a.points.iter().zip(&b.points).all(|(p, q)| {
            (p.b - q.b).abs() <= 1e-6 * p.b.abs().max(1.0) && (0..3).all(|k| (p.g[k] - q.g[k]).abs() <= 1e-6)
        })
}

fn dataset_slice(ds: &PhantomDataset, name: &str) -> Option<Array2<f64>> {
    if let Some(c) = CHANNEL_NAMES.iter().position(|&n| n == name) {
        return Some(ds.structurals.index_axis(Axis(0), c).to_owned());
    }
    let k: usize = name.strip_prefix("dwi_")?.parse().ok()?;
    (k < ds.scheme.len()).then(|| ds.dwis.index_axis(Axis(0), k).to_owned())
}

/// Scores `a` against the reference `b`.
///
/// Datasets are compared slice by slice (`dwi_<k>`) on their normalized
/// intensity scale (data range 1) inside the reference tissue mask; the
/// schemes must agree. Map containers are compared on every map the two share
/// (or on `names`), with the data range of each reference map and the
/// reference `mask` map when present.
pub fn compare(a: &Path, b: &Path, names: Option<&[String]>) -> CliResult<MetricReport> {
    let mut per = BTreeMap::new();
    match (open_container(a)?, open_container(b)?) {
        (Container::Dataset(x), Container::Dataset(y)) => {
            if x.shape() != y.shape() || !same_scheme(&x.scheme, &y.scheme) {
                return Err(CliError::format("datasets differ in shape or q-space scheme"));
            }
            let mask = y.mask();
            let wanted: Vec<String> = match names {
                Some(n) => n.to_vec(),
                None => (0..x.scheme.len()).map(|k| format!("dwi_{k}")).collect(),
            };
            for name in wanted {
                let (Some(u), Some(v)) = (dataset_slice(&x, &name), dataset_slice(&y, &name)) else {
                    return Err(CliError::format(format!("no slice named {name:?}")));
                };
                per.insert(name, map_metrics(u.view(), v.view(), 1.0, Some(mask.view()))?);
            }
        }
        (Container::Maps(x), Container::Maps(y)) => {
            if x.shape() != y.shape() {
                return Err(CliError::format(format!("maps are {:?} and {:?}", x.shape(), y.shape())));
            }
            let mask = y.get(MASK_MAP).map(|m| m.mapv(|v| v > 0.5));
            let wanted: Vec<String> = match names {
                Some(n) => n.to_vec(),
                None => x
                    .names
                    .iter()
                    .filter(|n| n.as_str() != MASK_MAP && y.get(n).is_some())
                    .cloned()
                    .collect(),
            };
            for name in wanted {
                let (Some(u), Some(v)) = (x.get(&name), y.get(&name)) else {
                    return Err(CliError::format(format!("map {name:?} missing from one container")));
                };
                let (lo, hi) = crate::plot::window(v.iter().copied());
                let range = if hi > lo { hi - lo } else { 1.0 };
                per.insert(name, map_metrics(u.view(), v.view(), range, mask.as_ref().map(|m| m.view()))?);
            }
        }
        _ => return Err(CliError::format("cannot compare a dataset with a map container")),
    }
    if per.is_empty() {
        return Err(CliError::format("the containers share no maps"));
    }
    Ok(MetricReport::from_maps(per)?)
}

pub fn cmd_metrics(a: &Path, b: &Path, names: Option<&[String]>, out: Option<&Path>) -> CliResult<()> {
    let report = compare(a, b, names)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::format(e.to_string()))?;
    match out {
        Some(p) => {
            write_text(p, &text)?;
            println!("rmse {:.6} psnr {:.3} ms_ssim {:.5}", report.rmse, report.psnr, report.ms_ssim);
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn named_map(dir: &Path, name: &str) -> CliResult<Array2<f64>> {
    let found = match open_container(dir)? {
        Container::Dataset(ds) => dataset_slice(&ds, name),
        Container::Maps(m) => m.get(name).cloned(),
    };
    found.ok_or_else(|| CliError::format(format!("{}: no map named {name:?}", dir.display())))
}

pub fn cmd_plot(input: &Path, map: &str, reference: Option<&Path>, out: &Path) -> CliResult<()> {
    let m = named_map(input, map)?;
    let r = reference.map(|d| named_map(d, map)).transpose()?;
    let (img, panels) = plot_map(&m, r.as_ref())?;
    let sidecar = Sidecar {
        source: input.display().to_string(),
        map: map.to_string(),
        width: img.width() as usize,
        height: img.height() as usize,
        panels,
    };
    save_png(out, &img, &sidecar)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Output layout of `run`.
pub struct RunLayout {
    pub data: PathBuf,
    pub train: PathBuf,
    pub synth: PathBuf,
    pub truth: PathBuf,
    pub fit: PathBuf,
    pub metrics: PathBuf,
    pub plots: PathBuf,
}

impl RunLayout {
    pub fn new(out: &Path) -> Self {
        RunLayout {
            data: out.join("data"),
            train: out.join("train"),
            synth: out.join("synth"),
            truth: out.join("truth"),
            fit: out.join("fit"),
            metrics: out.join("metrics.json"),
            plots: out.join("plots"),
        }
    }
}

/// phantom → train → synth → fit-dti → metrics → plots, validated up front.
pub fn cmd_run(config: &Path, overrides: &TrainOverrides, resume: bool) -> CliResult<()> {
    let cfg = ExperimentConfig::load(config)?;
    let scheme = cfg.scheme.resolve()?;
    let synth_section = cfg.synth.scheme();
    let synth_scheme = match &synth_section {
        Some(s) => s.resolve()?,
        None => scheme.clone(),
    };
    if cfg.synth.chunk == 0 {
        return Err(CliError::validation("[synth] chunk must be positive"));
    }
    if let Some(b) = cfg.fit.shell {
        if !synth_scheme.points.iter().any(|p| p.b == b) {
            return Err(CliError::validation(format!("[fit] shell {b} is not in the synthesis scheme")));
        }
    }
    let ds = phantom_dataset(&cfg.phantom, &scheme)?;
    if synth_scheme.points.iter().any(|p| p.b > scheme.b_max) {
        return Err(CliError::validation(format!(
            "synthesis b-values must not exceed the training maximum {}",
            scheme.b_max
        )));
    }
    let training = ResolvedTraining::build(
        cfg.train.as_ref(),
        cfg.generator.as_ref(),
        cfg.discriminator.as_ref(),
        overrides,
        ds.shape(),
    )?;
    let resolved = ResolvedExperiment {
        out: cfg.out.clone(),
        phantom: cfg.phantom.clone(),
        scheme: cfg.scheme.clone(),
        synth: cfg.synth.clone(),
        fit: cfg.fit.clone(),
        training,
    };

    let l = RunLayout::new(&cfg.out);
    write_text(&cfg.out.join(CONFIG_ECHO), &to_toml(&resolved)?)?;
    let digest = save_dataset(&l.data, &ds)?;
    eprintln!("dataset: {} volumes, digest {digest}", ds.scheme.len());

    train_into(&ds, &resolved.training, &l.train, resume)?;
    let syn = synthesize_dataset(&l.train.join(FINAL_DIR), &ds, &synth_scheme, cfg.synth.chunk)?;
    save_dataset(&l.synth, &syn)?;
    eprintln!("synthesized {} volumes", syn.scheme.len());

    save_maps(&l.truth, &truth_maps(&ds)?)?;
    save_maps(&l.fit, &fit_maps(&syn, &cfg.fit)?)?;
    cmd_metrics(&l.fit, &l.truth, None, Some(&l.metrics))?;
    for name in ["fa", "md"] {
        cmd_plot(&l.fit, name, Some(&l.truth), &l.plots.join(format!("{name}.png")))?;
    }
    Ok(())
}
