//! DDPM training on cached, standardized, de-quantized latents.

use super::schedule::{forward_noise, NoiseSchedule, ScheduleParams};
use super::unet::{Unet, UnetConfig};
use crate::error::{Error, Result};
use crate::nn::{Adam, ParamSet, Scalar, Tensor, TensorArchive};
use crate::seeding::rng_for;
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DdpmTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience in epochs.
    pub patience: usize,
    pub seed: u64,
    /// Fixed (t, noise) draws per validation latent, so the validation loss
    /// is comparable across epochs.
    pub val_draws: usize,
}

impl Default for DdpmTrainConfig {
    fn default() -> Self {
        DdpmTrainConfig {
            lr: 3e-4,
            batch_size: 16,
            max_epochs: 150,
            patience: 15,
            seed: 0,
            val_draws: 4,
        }
    }
}

/// Global standardization of the latent field, fit on the training set and
/// recorded in the checkpoint.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LatentStats {
    pub mean: f64,
    pub std: f64,
}

impl LatentStats {
    pub fn fit<T: Scalar>(latents: &[Tensor<T>]) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for l in latents {
            for v in l.iter() {
                let x = v.as_f64();
                sum += x;
                sumsq += x * x;
                n += 1;
            }
        }
        if n < 2 {
            return Err(Error::InvalidInput("not enough latent values for statistics".into()));
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let std = var.sqrt().max(1e-8);
        Ok(LatentStats { mean, std })
    }

    pub fn standardize<T: Scalar>(&self, latent: &Tensor<T>) -> Tensor<T> {
        let m = T::from_f64(self.mean);
        let inv = T::from_f64(1.0 / self.std);
        latent.mapv(|v| (v - m) * inv)
    }

    pub fn destandardize<T: Scalar>(&self, latent: &Tensor<T>) -> Tensor<T> {
        let m = T::from_f64(self.mean);
        let s = T::from_f64(self.std);
        latent.mapv(|v| v * s + m)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DdpmEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DdpmCheckpointMeta {
    pub kind: String,
    pub seed: u64,
    pub epoch: usize,
    pub adam_step: u64,
    pub best_val: f64,
    pub patience_used: usize,
    pub finished: bool,
    pub config: UnetConfig,
    pub schedule: ScheduleParams,
    pub latent_stats: LatentStats,
    pub train: DdpmTrainConfig,
    /// Hash of the first-stage checkpoint the latents came from.
    pub vqvae_hash: String,
    pub log: Vec<DdpmEpochLog>,
}

fn save_checkpoint(
    path: &Path,
    model: &Unet<f32>,
    best: &[(String, ArrayD<f32>)],
    adam: &Adam<f32>,
    meta: &DdpmCheckpointMeta,
) -> Result<()> {
    let mut archive = TensorArchive::new();
    for p in model.params() {
        archive.push_array(&p.name, &p.value);
    }
    for (name, value) in best {
        archive.push_array(format!("best.{name}"), value);
    }
    for (name, value) in adam.export_state(&model.params()) {
        archive.push_array(name, &value);
    }
    archive.footer = toml::to_string_pretty(meta)
        .map_err(|e| Error::Config(format!("meta serialization failed: {e}")))?;
    archive.save(path)
}

pub fn load_ddpm(
    path: impl AsRef<Path>,
    use_best: bool,
) -> Result<(Unet<f32>, NoiseSchedule, DdpmCheckpointMeta)> {
    let archive = TensorArchive::load(path.as_ref())?;
    let meta: DdpmCheckpointMeta = toml::from_str(&archive.footer)
        .map_err(|e| Error::Config(format!("bad checkpoint footer: {e}")))?;
    if meta.kind != "ddpm" {
        return Err(Error::ArtifactMismatch(format!(
            "checkpoint kind '{}' is not a ddpm",
            meta.kind
        )));
    }
    let mut model = Unet::<f32>::new(meta.config.clone(), meta.seed)?;
    for p in model.params_mut() {
        let name = if use_best && archive.get(&format!("best.{}", p.name)).is_some() {
            format!("best.{}", p.name)
        } else {
            p.name.clone()
        };
        p.value = archive.get_array(&name)?;
    }
    let schedule = NoiseSchedule::scaled_linear(meta.schedule)?;
    Ok((model, schedule, meta))
}

struct SampleGrads {
    loss: f64,
    grads: Vec<ArrayD<f32>>,
}

fn loss_and_grads(
    model: &mut Unet<f32>,
    z0: &Tensor<f32>,
    t: usize,
    eps: &Tensor<f32>,
    schedule: &NoiseSchedule,
    with_grad: bool,
) -> Result<SampleGrads> {
    if with_grad {
        model.zero_grads();
    }
    let z_t = forward_noise(z0, t, eps, schedule)?;
    let pred = model.forward(&z_t, t)?;
    let n = pred.len() as f64;
    let mut loss = 0.0f64;
    let mut dpred = ArrayD::<f32>::zeros(pred.raw_dim());
    {
        let ps = pred.as_slice().unwrap();
        let es = eps.as_slice().unwrap();
        let ds = dpred.as_slice_mut().unwrap();
        for i in 0..ps.len() {
            let diff = (ps[i] - es[i]) as f64;
            loss += diff * diff;
            ds[i] = (2.0 * diff / n) as f32;
        }
        loss /= n;
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite diffusion loss {loss}")));
    }
    let grads = if with_grad {
        let _ = model.backward(&dpred);
        model.params().iter().map(|p| p.grad.clone()).collect()
    } else {
        Vec::new()
    };
    Ok(SampleGrads { loss, grads })
}

/// Validation L_simple over fixed seeded (t, eps) draws.
pub fn validation_loss(
    model: &Unet<f32>,
    latents: &[Tensor<f32>],
    schedule: &NoiseSchedule,
    seed: u64,
    draws: usize,
) -> Result<f64> {
    let jobs: Vec<(usize, usize)> =
        (0..latents.len()).flat_map(|i| (0..draws).map(move |d| (i, d))).collect();
    let losses: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(i, d)| {
            let mut rng = rng_for(seed, &format!("ddpm/val/{i}/{d}"));
            let t = rng.random_range(1..=schedule.t_max());
            let eps = latents[i].mapv(|_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal) as f32
            });
            let mut m = model.clone();
            Ok(loss_and_grads(&mut m, &latents[i], t, &eps, schedule, false)?.loss)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / jobs.len() as f64)
}

pub struct DdpmTrainOutcome {
    pub meta: DdpmCheckpointMeta,
    pub checkpoint: std::path::PathBuf,
}

/// Train (or resume) the denoiser on standardized latents. The checkpoint is
/// rewritten every epoch with current parameters, best-validation parameters,
/// and optimizer state.
#[allow(clippy::too_many_arguments)]
pub fn train_ddpm(
    train_latents: &[Tensor<f32>],
    val_latents: &[Tensor<f32>],
    config: UnetConfig,
    schedule_params: ScheduleParams,
    train_config: DdpmTrainConfig,
    latent_stats: LatentStats,
    vqvae_hash: String,
    checkpoint_path: impl AsRef<Path>,
) -> Result<DdpmTrainOutcome> {
    config.validate()?;
    if train_latents.is_empty() || val_latents.is_empty() {
        return Err(Error::InvalidInput("train and validation latents must be non-empty".into()));
    }
    let checkpoint_path = checkpoint_path.as_ref();
    let schedule = NoiseSchedule::scaled_linear(schedule_params)?;
    let seed = train_config.seed;

    let mut model;
    let mut adam = Adam::<f32>::new(train_config.lr);
    let mut meta;
    let mut best_params: Vec<(String, ArrayD<f32>)>;

    if checkpoint_path.exists() {
        let (loaded, _, loaded_meta) = load_ddpm(checkpoint_path, false)?;
        if loaded_meta.config != config
            || loaded_meta.train != train_config
            || loaded_meta.schedule != schedule_params
        {
            return Err(Error::ArtifactMismatch(
                "existing checkpoint was trained with a different configuration".into(),
            ));
        }
        model = loaded;
        let archive = TensorArchive::load(checkpoint_path)?;
        adam.import_state(&model.params(), loaded_meta.adam_step, |name| {
            archive.get_array(name)
        })?;
        best_params = model
            .params()
            .iter()
            .map(|p| Ok((p.name.clone(), archive.get_array(&format!("best.{}", p.name))?)))
            .collect::<Result<_>>()?;
        meta = loaded_meta;
        if meta.finished {
            return Ok(DdpmTrainOutcome { meta, checkpoint: checkpoint_path.to_path_buf() });
        }
    } else {
        model = Unet::<f32>::new(config.clone(), seed)?;
        best_params =
            model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        meta = DdpmCheckpointMeta {
            kind: "ddpm".into(),
            seed,
            epoch: 0,
            adam_step: 0,
            best_val: f64::INFINITY,
            patience_used: 0,
            finished: false,
            config: config.clone(),
            schedule: schedule_params,
            latent_stats,
            train: train_config.clone(),
            vqvae_hash,
            log: Vec::new(),
        };
    }

    let batch = train_config.batch_size.max(1);
    while meta.epoch < train_config.max_epochs {
        let epoch = meta.epoch;
        let mut rng = rng_for(seed, &format!("ddpm/epoch/{epoch}"));
        let mut order: Vec<usize> = (0..train_latents.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(batch) {
            // Draw (t, eps) per sample sequentially so parallel execution
            // cannot reorder the random stream.
            let jobs: Vec<(usize, usize, Tensor<f32>)> = chunk
                .iter()
                .map(|&i| {
                    let t = rng.random_range(1..=schedule.t_max());
                    let eps = train_latents[i].mapv(|_| {
                        rng.sample::<f64, _>(rand_distr::StandardNormal) as f32
                    });
                    (i, t, eps)
                })
                .collect();
            let results: Vec<Result<SampleGrads>> = jobs
                .par_iter()
                .map(|(i, t, eps)| {
                    let mut worker = model.clone();
                    loss_and_grads(&mut worker, &train_latents[*i], *t, eps, &schedule, true)
                })
                .collect();
            let mut summed: Option<Vec<ArrayD<f32>>> = None;
            let scale = 1.0 / chunk.len() as f32;
            for r in results {
                let r = r?;
                epoch_loss += r.loss;
                match &mut summed {
                    None => summed = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            *a += g;
                        }
                    }
                }
            }
            let summed = summed.unwrap();
            let mut params = model.params_mut();
            for (p, g) in params.iter_mut().zip(summed) {
                p.grad = g.mapv(|v| v * scale);
            }
            adam.step(&mut params)?;
        }
        epoch_loss /= train_latents.len() as f64;

        let val_loss =
            validation_loss(&model, val_latents, &schedule, seed, train_config.val_draws)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "validation loss diverged at epoch {epoch}; last good checkpoint kept at {}",
                checkpoint_path.display()
            )));
        }
        meta.log.push(DdpmEpochLog { epoch, train_loss: epoch_loss, val_loss });
        if val_loss < meta.best_val {
            meta.best_val = val_loss;
            meta.patience_used = 0;
            best_params =
                model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        } else {
            meta.patience_used += 1;
        }
        meta.epoch = epoch + 1;
        meta.adam_step = adam.step_count();
        let stop = meta.patience_used >= train_config.patience;
        if stop || meta.epoch == train_config.max_epochs {
            meta.finished = true;
        }
        save_checkpoint(checkpoint_path, &model, &best_params, &adam, &meta)?;
        if meta.finished {
            break;
        }
    }
    Ok(DdpmTrainOutcome { meta, checkpoint: checkpoint_path.to_path_buf() })
}
