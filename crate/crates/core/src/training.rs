//! Alternating adversarial training, batch assembly, learning-rate schedule
//! and resumable checkpoints.

use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_bytes, read_json, sha256_hex, write_bytes, write_json};
use crate::losses::{
    ac_loss, adv_loss_d, adv_loss_g, check_logits, rec_loss, total_loss, total_loss_graph, ExtractorConfig,
    FeatureExtractor, LossParts, LossRecord, LossWeights, PixelReduction,
};
use crate::model::{
    load_models, q_features, save_models, split_modalities, Discriminator, DiscriminatorConfig, Generator,
    GeneratorConfig, Models,
};
use crate::nn::{collect_grads, Adam, AdamConfig, Graph, Tensor};
use crate::phantom::PhantomDataset;
use crate::qspace::QSpacePoint;

pub const OPTIM_FILE: &str = "optim.bin";
pub const STATE_FILE: &str = "train_state.json";
pub const STATE_VERSION: &str = "qcatn-train-state/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_decay: f64,
    /// The discriminator is updated on steps where `step % d_every == 0`.
    pub d_every: u64,
    pub weights: LossWeights,
    pub pixel_reduction: PixelReduction,
    pub extractor: ExtractorConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 50,
            lr_g: 1e-4,
            lr_d: 5e-5,
            lr_decay: 0.95,
            d_every: 2,
            weights: LossWeights::default(),
            pixel_reduction: PixelReduction::default(),
            extractor: ExtractorConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::domain("batch_size must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::domain("epochs must be positive"));
        }
        if self.d_every == 0 {
            return Err(Error::domain("d_every must be at least 1"));
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::domain(format!("{name} = {v} must be positive and finite")));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::domain(format!("lr_decay = {} must lie in (0, 1]", self.lr_decay)));
        }
        self.weights.validate()
    }
}

/// `initial · decay^epoch`.
pub fn lr_at_epoch(initial: f64, epoch: u64, decay: f64) -> f64 {
    initial * decay.powf(epoch as f64)
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// `3 × H × W` structural channels (b0, t1, t2).
    pub structurals: Array3<f64>,
    pub q: QSpacePoint,
    /// The DWI slice at `q`; the b0 channel itself when `q.b == 0`.
    pub target: Array2<f64>,
    /// Index of `q` in the dataset scheme.
    pub point_index: usize,
}

/// Draws `n` scheme points uniformly with replacement.
pub fn sample_batch(dataset: &PhantomDataset, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TrainSample>> {
    if n == 0 {
        return Err(Error::domain("batch size must be positive"));
    }
    if dataset.scheme.is_empty() {
        return Err(Error::domain("dataset has no q-space points"));
    }
    Ok((0..n)
        .map(|_| {
            let k = rng.random_range(0..dataset.scheme.len());
            let q = dataset.scheme.points[k];
            let target = if q.is_b0() {
                dataset.structurals.index_axis(Axis(0), 0).to_owned()
            } else {
                dataset.dwis.index_axis(Axis(0), k).to_owned()
            };
            TrainSample {
                structurals: dataset.structurals.clone(),
                q,
                target,
                point_index: k,
            }
        })
        .collect())
}

/// Batch tensors: structurals `N×3×H×W`, targets `N×1×H×W`, and the points.
pub fn batch_tensors(batch: &[TrainSample]) -> Result<(Tensor<f32>, Tensor<f32>, Vec<QSpacePoint>)> {
    let first = batch.first().ok_or_else(|| Error::domain("empty batch"))?;
    let (_, h, w) = first.structurals.dim();
    let mut xs = Vec::with_capacity(batch.len() * 3 * h * w);
    let mut ts = Vec::with_capacity(batch.len() * h * w);
    for s in batch {
        if s.structurals.dim() != (3, h, w) || s.target.dim() != (h, w) {
            return Err(Error::shape("batch samples differ in shape"));
        }
        xs.extend(s.structurals.iter().map(|&v| v as f32));
        ts.extend(s.target.iter().map(|&v| v as f32));
    }
    let n = batch.len();
    Ok((
        Tensor::new(&[n, 3, h, w], xs),
        Tensor::new(&[n, 1, h, w], ts),
        batch.iter().map(|s| s.q).collect(),
    ))
}

/// Mutable training state: both networks, their optimizers, the sampling
/// stream and the step counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub opt_g: Adam,
    pub opt_d: Adam,
    extractor: FeatureExtractor<f32>,
    rng: ChaCha8Rng,
    /// Completed steps.
    step: u64,
    steps_per_epoch: u64,
    b_max: f64,
    last_adv_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainState {
    format_version: String,
    step: u64,
    epoch: u64,
    steps_per_epoch: u64,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    adam_t_g: u64,
    adam_t_d: u64,
    last_adv_d: f64,
    optim_bytes_g: u64,
    optim_sha256: String,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        gen_config: GeneratorConfig,
        disc_config: DiscriminatorConfig,
        dataset: &PhantomDataset,
    ) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(gen_config)?;
        let discriminator = Discriminator::new(disc_config)?;
        let shape = dataset.shape();
        if generator.config().in_size != shape || discriminator.config().in_size != shape {
            return Err(Error::shape(format!(
                "dataset slices are {}x{}, networks expect {:?} / {:?}",
                shape.0,
                shape.1,
                generator.config().in_size,
                discriminator.config().in_size
            )));
        }
        if dataset.scheme.is_empty() {
            return Err(Error::domain("dataset has no q-space points"));
        }
        let opt_g = Adam::new(generator.params(), AdamConfig::default());
        let opt_d = Adam::new(discriminator.params(), AdamConfig::default());
        let extractor = FeatureExtractor::new(config.extractor.clone())?;
        let steps_per_epoch = dataset.scheme.len().div_ceil(config.batch_size) as u64;
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            generator,
            discriminator,
            opt_g,
            opt_d,
            extractor,
            step: 0,
            steps_per_epoch,
            b_max: dataset.scheme.b_max,
            last_adv_d: 0.0,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.config.epochs * self.steps_per_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn b_max(&self) -> f64 {
        self.b_max
    }

    pub fn extractor(&self) -> &FeatureExtractor<f32> {
        &self.extractor
    }

    pub fn models(&self) -> Models {
        Models {
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            b_max: self.b_max,
        }
    }

    /// One generator update, preceded by a discriminator update when
    /// `step_index % d_every == 0`.
    pub fn train_step(&mut self, batch: &[TrainSample], step_index: u64, lr_g: f64, lr_d: f64) -> Result<LossRecord> {
        let (x, target, q) = batch_tensors(batch)?;
        let with_step = |e: Error| match e {
            Error::NonFinite { term, batch_index, .. } => Error::NonFinite {
                term,
                step: Some(step_index),
                batch_index,
            },
            other => other,
        };
        let mode = self.config.pixel_reduction;

        let g = Graph::new();
        let gp = self.generator.params().bind(&g, true);
        let qv = g.constant(q_features::<f32>(&q)?);
        let xs = split_modalities(&x).map(|t| g.constant(t));
        let fake = self.generator.forward_graph(&gp, xs, qv);
        if !fake.value().is_finite() {
            return Err(with_step(Error::NonFinite {
                term: "generator output".into(),
                step: None,
                batch_index: first_bad_sample(&fake.value()),
            }));
        }

        if step_index % self.config.d_every == 0 {
            let gd = Graph::new();
            let dp = self.discriminator.params().bind(&gd, true);
            let qd = gd.constant(q_features::<f32>(&q)?);
            let real_out = self.discriminator.forward_graph(&dp, gd.constant(target.clone()), qd);
            let fake_out = self.discriminator.forward_graph(&dp, gd.constant(Tensor::clone(&fake.value())), qd);
            check_logits(&real_out, "discriminator logits (real)").map_err(with_step)?;
            check_logits(&fake_out, "discriminator logits (fake)").map_err(with_step)?;
            let loss_d = adv_loss_d(&real_out, &fake_out, mode);
            let value = loss_d.value().data[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    term: "loss_adv_d".into(),
                    step: Some(step_index),
                    batch_index: None,
                });
            }
            let mut grads = gd.backward(&loss_d);
            let grads = collect_grads(&mut grads, &dp);
            self.opt_d.step(self.discriminator.params_mut(), &grads, lr_d);
            self.last_adv_d = value;
        }

        let dp = self.discriminator.params().bind(&g, false);
        let fake_out = self.discriminator.forward_graph(&dp, fake, qv);
        check_logits(&fake_out, "discriminator logits (generator pass)").map_err(with_step)?;
        let target_v = g.constant(target);
        let adv = adv_loss_g(&fake_out, mode);
        let rec = rec_loss(fake, target_v)?;
        let ac = ac_loss(fake, target_v, &self.extractor)?;
        let parts = LossParts {
            adv: adv.value().data[0] as f64,
            rec: rec.value().data[0] as f64,
            ac: ac.value().data[0] as f64,
        };
        let total_value = total_loss(&parts, &self.config.weights).map_err(with_step)?;
        let total = total_loss_graph(adv, rec, ac, &self.config.weights);
        let mut grads = g.backward(&total);
        let grads = collect_grads(&mut grads, &gp);
        self.opt_g.step(self.generator.params_mut(), &grads, lr_g);

        Ok(LossRecord {
            step: step_index,
            loss_total: total_value,
            loss_adv_g: parts.adv,
            loss_adv_d: self.last_adv_d,
            loss_rec: parts.rec,
            loss_ac: parts.ac,
            lr_g,
            lr_d,
        })
    }

    /// Learning rates for the step about to run.
    pub fn current_lrs(&self) -> (f64, f64) {
        let e = self.epoch();
        (
            lr_at_epoch(self.config.lr_g, e, self.config.lr_decay),
            lr_at_epoch(self.config.lr_d, e, self.config.lr_decay),
        )
    }

    /// Samples a batch and runs the next step.
    pub fn advance(&mut self, dataset: &PhantomDataset) -> Result<LossRecord> {
        let (lr_g, lr_d) = self.current_lrs();
        let batch = sample_batch(dataset, self.config.batch_size, &mut self.rng)?;
        let record = self.train_step(&batch, self.step + 1, lr_g, lr_d)?;
        self.step += 1;
        Ok(record)
    }

    /// Runs until `config.epochs` are complete, calling `on_epoch` with the
    /// records of each finished epoch.
    pub fn train<F>(&mut self, dataset: &PhantomDataset, mut on_epoch: F) -> Result<Vec<LossRecord>>
    where
        F: FnMut(&Trainer, &[LossRecord]) -> Result<()>,
    {
        let expected = dataset.scheme.len().div_ceil(self.config.batch_size) as u64;
        if expected != self.steps_per_epoch || dataset.scheme.b_max != self.b_max {
            return Err(Error::domain("dataset does not match the one this trainer was created for"));
        }
        let mut all = Vec::new();
        let mut epoch_rows = Vec::new();
        while !self.is_finished() {
            let r = self.advance(dataset)?;
            epoch_rows.push(r);
            if self.step % self.steps_per_epoch == 0 {
                on_epoch(self, &epoch_rows)?;
                all.append(&mut epoch_rows);
            }
        }
        all.append(&mut epoch_rows);
        Ok(all)
    }

    /// Writes the model checkpoint plus optimizer and sampler state.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        save_models(dir, &self.models())?;
        let mut optim = self.opt_g.to_bytes();
        let optim_bytes_g = optim.len() as u64;
        optim.extend(self.opt_d.to_bytes());
        let state = TrainState {
            format_version: STATE_VERSION.to_string(),
            step: self.step,
            epoch: self.epoch(),
            steps_per_epoch: self.steps_per_epoch,
            rng_seed: hex::encode(self.rng.get_seed()),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            adam_t_g: self.opt_g.t,
            adam_t_d: self.opt_d.t,
            last_adv_d: self.last_adv_d,
            optim_bytes_g,
            optim_sha256: sha256_hex(&optim),
            config: self.config.clone(),
        };
        write_bytes(&dir.join(OPTIM_FILE), &optim)?;
        write_json(&dir.join(STATE_FILE), &state)
    }

    /// Restores a trainer saved by [`save_checkpoint`](Self::save_checkpoint).
    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let models = load_models(dir)?;
        let value: serde_json::Value = read_json(&dir.join(STATE_FILE))?;
        let version = value.get("format_version").and_then(|v| v.as_str()).unwrap_or("<missing>");
        if version != STATE_VERSION {
            return Err(Error::Format(format!(
                "training state version {version:?} is not supported (expected {STATE_VERSION:?})"
            )));
        }
        let state: TrainState =
            serde_json::from_value(value).map_err(|e| Error::Format(format!("invalid {STATE_FILE}: {e}")))?;
        state.config.validate()?;
        let optim = read_bytes(&dir.join(OPTIM_FILE))?;
        if sha256_hex(&optim) != state.optim_sha256 || (state.optim_bytes_g as usize) > optim.len() {
            return Err(Error::Integrity(format!("{OPTIM_FILE} does not match its recorded digest")));
        }
        let split = state.optim_bytes_g as usize;
        let mut opt_g = Adam::new(models.generator.params(), AdamConfig::default());
        let mut opt_d = Adam::new(models.discriminator.params(), AdamConfig::default());
        opt_g.load_bytes(&optim[..split])?;
        opt_d.load_bytes(&optim[split..])?;
        opt_g.t = state.adam_t_g;
        opt_d.t = state.adam_t_d;
        let seed: [u8; 32] = hex::decode(&state.rng_seed)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| Error::Format("invalid sampler seed".into()))?;
        let word_pos: u128 = state
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Format("invalid sampler position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(state.rng_stream);
        rng.set_word_pos(word_pos);
        if state.steps_per_epoch == 0 {
            return Err(Error::Format("steps_per_epoch must be positive".into()));
        }
        let extractor = FeatureExtractor::new(state.config.extractor.clone())?;
        Ok(Trainer {
            config: state.config,
            generator: models.generator,
            discriminator: models.discriminator,
            opt_g,
            opt_d,
            extractor,
            rng,
            step: state.step,
            steps_per_epoch: state.steps_per_epoch,
            b_max: models.b_max,
            last_adv_d: state.last_adv_d,
        })
    }
}

fn first_bad_sample(t: &Tensor<f32>) -> Option<usize> {
    let n = t.shape[0];
    let per = t.numel() / n.max(1);
    (0..n).find(|&b| !t.data[b * per..(b + 1) * per].iter().all(|v| v.is_finite()))
}

/// Synthesizes one slice per point of `scheme` from `structurals` (`3×H×W`),
/// in chunks of `chunk` points.
pub fn synthesize(
    generator: &Generator<f32>,
    structurals: &Array3<f64>,
    points: &[QSpacePoint],
    chunk: usize,
) -> Result<Array3<f64>> {
    let (c, h, w) = structurals.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 structural channels, got {c}")));
    }
    if generator.config().in_size != (h, w) {
        return Err(Error::shape(format!(
            "structurals are {h}x{w}, generator expects {:?}",
            generator.config().in_size
        )));
    }
    let mut out = Array3::zeros((points.len(), h, w));
    let single: Vec<f32> = structurals.iter().map(|&v| v as f32).collect();
    for (ci, qs) in points.chunks(chunk.max(1)).enumerate() {
        let mut data = Vec::with_capacity(qs.len() * single.len());
        for _ in qs {
            data.extend_from_slice(&single);
        }
        let y = generator.forward(&Tensor::new(&[qs.len(), 3, h, w], data), qs)?;
        for (k, plane) in y.data.chunks(h * w).enumerate() {
            let idx = ci * chunk.max(1) + k;
            for (o, &v) in out.index_axis_mut(Axis(0), idx).iter_mut().zip(plane) {
                *o = v as f64;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_at_epoch(1e-4, 0, 0.95), 1e-4);
        assert!((lr_at_epoch(1e-4, 1, 0.95) - 9.5e-5).abs() < 1e-20);
        let mut expected = 5e-5;
        for _ in 0..10 {
            expected *= 0.95;
        }
        assert!((lr_at_epoch(5e-5, 10, 0.95) - expected).abs() <= 1e-18);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { d_every: 0, ..Default::default() },
            TrainConfig { lr_g: 0.0, ..Default::default() },
            TrainConfig { lr_decay: 1.5, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
