//! OOD scoring: multi-t reconstruction, similarity metrics, validation-set
//! z-normalization, aggregated scores, and per-voxel anomaly maps.

use crate::diffusion::{
    forward_noise, plms_reconstruct, LatentStats, NoiseSchedule, SamplerConfig, Unet,
};
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Label};
use crate::nn::TensorArchive;
use crate::seeding::rng_for;
use crate::ssim::perceptual_proxy;
use crate::volume::{load_volume, save_volume, Volume};
use crate::vqvae::{quantize, tensor_to_volume, volume_to_tensor, VqVae};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoringConfig {
    /// Number of reconstruction t values, spread evenly over `[0, T)`.
    pub num_recon_t: usize,
    /// t values whose reconstructions feed the anomaly map.
    pub anomaly_t: Vec<usize>,
    pub sampler: SamplerConfig,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            num_recon_t: 50,
            anomaly_t: vec![100, 200, 300, 400],
            sampler: SamplerConfig::default(),
        }
    }
}

impl ScoringConfig {
    /// Reconstruction t values: evenly spaced integers over `[0, T)`,
    /// strictly increasing.
    pub fn t_values(&self, schedule: &NoiseSchedule) -> Vec<usize> {
        let t_max = schedule.t_max();
        let mut ts: Vec<usize> =
            (0..self.num_recon_t).map(|i| i * t_max / self.num_recon_t).collect();
        ts.dedup();
        ts
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.num_recon_t == 0 || self.num_recon_t > schedule.t_max() {
            return Err(Error::Config(format!(
                "reconstruction count must be in [1, {}], got {}",
                schedule.t_max(),
                self.num_recon_t
            )));
        }
        self.sampler.validate(schedule)?;
        let ts = self.t_values(schedule);
        let grid = self.sampler.grid(schedule);
        for &t in &self.anomaly_t {
            if !ts.contains(&t) {
                return Err(Error::Config(format!(
                    "anomaly t={t} is not among the reconstruction t values"
                )));
            }
            if !grid.contains(&t) {
                return Err(Error::Config(format!(
                    "anomaly t={t} does not lie on the inference grid"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Similarity metrics
// ---------------------------------------------------------------------------

/// Mean squared voxel difference.
pub fn mse(a: &Volume, b: &Volume) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let n = a.len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// Per-voxel absolute error map.
pub fn mae_map(a: &Volume, b: &Volume) -> Result<Volume> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect();
    Volume::new(a.dims(), data)
}

// ---------------------------------------------------------------------------
// Reconstruction
// ---------------------------------------------------------------------------

/// The trained two-stage model plus everything scoring needs.
pub struct ScoringModel {
    pub vq: VqVae<f32>,
    pub unet: Unet<f32>,
    pub schedule: NoiseSchedule,
    pub latent_stats: LatentStats,
}

/// Reconstruct `v` from every configured noise level. Noise is seeded per
/// `(input id, t)`, so scores are reproducible and independent of execution
/// order. Entry `t = 0` is the plain autoencoder round trip.
pub fn reconstruct_multi_t(
    model: &ScoringModel,
    v: &Volume,
    input_id: &str,
    config: &ScoringConfig,
    seed: u64,
) -> Result<Vec<(usize, Volume)>> {
    config.validate(&model.schedule)?;
    let x = volume_to_tensor::<f32>(v);
    let z = {
        let mut vq = model.vq.clone();
        vq.encode(&x)?
    };
    let q = quantize(&z, &model.vq.codebook.value)?;
    let z0 = model.latent_stats.standardize(&q.dequantized);
    let ts = config.t_values(&model.schedule);
    let outputs: Vec<Result<(usize, Volume)>> = ts
        .par_iter()
        .map(|&t| {
            let z0_hat = if t == 0 {
                z0.clone()
            } else {
                let mut rng = rng_for(seed, &format!("score/{input_id}/{t}"));
                let eps = ArrayD::<f32>::from_shape_simple_fn(IxDyn(z0.shape()), || {
                    rng.sample::<f64, _>(rand_distr::StandardNormal) as f32
                });
                let z_t = forward_noise(&z0, t, &eps, &model.schedule)?;
                let mut unet = model.unet.clone();
                plms_reconstruct(&mut unet, &z_t, t, &model.schedule, &config.sampler)?.z0_hat
            };
            let mut vq = model.vq.clone();
            let decoded = vq.decode(&model.latent_stats.destandardize(&z0_hat))?;
            Ok((t, tensor_to_volume(&decoded)?))
        })
        .collect();
    outputs.into_iter().collect()
}

/// Per-input similarity vector: per-t MSE then per-t perceptual distance,
/// ordered (metric, t).
pub type MetricVector = Vec<f64>;

pub struct VolumeScore {
    pub metrics: MetricVector,
    /// Mean of the MAE maps at the anomaly t values.
    pub mean_mae_map: Volume,
}

/// Reconstruct and measure one volume: 2N metrics plus the averaged MAE map.
pub fn score_volume(
    model: &ScoringModel,
    v: &Volume,
    input_id: &str,
    config: &ScoringConfig,
    seed: u64,
) -> Result<VolumeScore> {
    let recons = reconstruct_multi_t(model, v, input_id, config, seed)?;
    let mut mses = Vec::with_capacity(recons.len());
    let mut percs = Vec::with_capacity(recons.len());
    let mut map_acc = Volume::zeros(v.dims());
    let mut n_maps = 0usize;
    let metric_jobs: Vec<Result<(f64, f64)>> = recons
        .par_iter()
        .map(|(_, r)| Ok((mse(v, r)?, perceptual_proxy(v, r)?)))
        .collect();
    for ((t, r), m) in recons.iter().zip(metric_jobs) {
        let (m_val, p_val) = m?;
        mses.push(m_val);
        percs.push(p_val);
        if config.anomaly_t.contains(t) {
            let map = mae_map(v, r)?;
            for (acc, v) in map_acc.data_mut().iter_mut().zip(map.data()) {
                *acc += v;
            }
            n_maps += 1;
        }
    }
    if n_maps != config.anomaly_t.len() {
        return Err(Error::Config(format!(
            "only {n_maps} of {} anomaly t values were reconstructed",
            config.anomaly_t.len()
        )));
    }
    for v in map_acc.data_mut() {
        *v /= n_maps as f32;
    }
    let mut metrics = mses;
    metrics.extend(percs);
    Ok(VolumeScore { metrics, mean_mae_map: map_acc })
}

// ---------------------------------------------------------------------------
// Validation statistics and z-scoring
// ---------------------------------------------------------------------------

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ValidationStats {
    pub metric_mean: Vec<f64>,
    pub metric_std: Vec<f64>,
    pub map_mean: Volume,
    pub map_std: Volume,
    pub n_val: usize,
    pub vqvae_hash: String,
    pub ddpm_hash: String,
}

impl ValidationStats {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut archive = TensorArchive::new();
        archive.push("metric_mean", vec![self.metric_mean.len()], to_f32(&self.metric_mean));
        archive.push("metric_std", vec![self.metric_std.len()], to_f32(&self.metric_std));
        let (h, w, d) = self.map_mean.dims();
        archive.push("map_mean", vec![h, w, d], self.map_mean.data().to_vec());
        archive.push("map_std", vec![h, w, d], self.map_std.data().to_vec());
        archive.footer = format!(
            "kind = \"validation_stats\"\nn_val = {}\nvqvae_hash = \"{}\"\nddpm_hash = \"{}\"\n",
            self.n_val, self.vqvae_hash, self.ddpm_hash
        );
        archive.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let archive = TensorArchive::load(path)?;
        let footer: toml::Value = toml::from_str(&archive.footer)
            .map_err(|e| Error::Config(format!("bad stats footer: {e}")))?;
        let str_field = |k: &str| -> Result<String> {
            footer
                .get(k)
                .and_then(|v| v.as_str())
                .map(str::to_string)
                .ok_or_else(|| Error::Config(format!("stats footer missing '{k}'")))
        };
        let n_val = footer
            .get("n_val")
            .and_then(|v| v.as_integer())
            .ok_or_else(|| Error::Config("stats footer missing 'n_val'".into()))?
            as usize;
        let (mm_shape, mm) = archive
            .get("map_mean")
            .ok_or_else(|| Error::ArtifactMismatch("stats missing map_mean".into()))?;
        let (_, ms) = archive
            .get("map_std")
            .ok_or_else(|| Error::ArtifactMismatch("stats missing map_std".into()))?;
        let dims = (mm_shape[0], mm_shape[1], mm_shape[2]);
        let metric_mean = archive
            .get("metric_mean")
            .ok_or_else(|| Error::ArtifactMismatch("stats missing metric_mean".into()))?
            .1
            .iter()
            .map(|&v| v as f64)
            .collect();
        let metric_std = archive
            .get("metric_std")
            .ok_or_else(|| Error::ArtifactMismatch("stats missing metric_std".into()))?
            .1
            .iter()
            .map(|&v| v as f64)
            .collect();
        Ok(ValidationStats {
            metric_mean,
            metric_std,
            map_mean: Volume::new(dims, mm.to_vec())?,
            map_std: Volume::new(dims, ms.to_vec())?,
            n_val,
            vqvae_hash: str_field("vqvae_hash")?,
            ddpm_hash: str_field("ddpm_hash")?,
        })
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Fit per-metric and per-voxel moments on the validation set.
pub fn fit_validation_stats(
    model: &ScoringModel,
    val_manifest: &DatasetManifest,
    config: &ScoringConfig,
    seed: u64,
    vqvae_hash: String,
    ddpm_hash: String,
) -> Result<ValidationStats> {
    if val_manifest.len() < 2 {
        return Err(Error::InvalidInput(
            "validation statistics need at least 2 volumes".into(),
        ));
    }
    let scores: Vec<Result<VolumeScore>> = val_manifest
        .entries
        .par_iter()
        .map(|e| {
            let v = load_volume(val_manifest.resolve(e))?;
            score_volume(model, &v, &e.id(), config, seed)
        })
        .collect();
    let mut collected = Vec::with_capacity(scores.len());
    for s in scores {
        collected.push(s?);
    }
    stats_from_scores(&collected, vqvae_hash, ddpm_hash)
}

/// Columnwise mean/std of the metric vectors and voxelwise mean/std of the
/// averaged MAE maps (sample std, floored).
pub fn stats_from_scores(
    scores: &[VolumeScore],
    vqvae_hash: String,
    ddpm_hash: String,
) -> Result<ValidationStats> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::InvalidInput("need at least 2 score vectors".into()));
    }
    let width = scores[0].metrics.len();
    let dims = scores[0].mean_mae_map.dims();
    let mut metric_mean = vec![0.0f64; width];
    for s in scores {
        if s.metrics.len() != width || s.mean_mae_map.dims() != dims {
            return Err(Error::ShapeMismatch("inconsistent score shapes".into()));
        }
        for (m, v) in metric_mean.iter_mut().zip(&s.metrics) {
            *m += v;
        }
    }
    for m in &mut metric_mean {
        *m /= n as f64;
    }
    let mut metric_std = vec![0.0f64; width];
    for s in scores {
        for ((sd, v), m) in metric_std.iter_mut().zip(&s.metrics).zip(&metric_mean) {
            *sd += (v - m) * (v - m);
        }
    }
    for sd in &mut metric_std {
        *sd = (*sd / (n - 1) as f64).sqrt().max(STD_FLOOR);
    }

    let voxels = scores[0].mean_mae_map.len();
    let mut map_mean = vec![0.0f64; voxels];
    for s in scores {
        for (m, v) in map_mean.iter_mut().zip(s.mean_mae_map.data()) {
            *m += *v as f64;
        }
    }
    for m in &mut map_mean {
        *m /= n as f64;
    }
    let mut map_std = vec![0.0f64; voxels];
    for s in scores {
        for ((sd, v), m) in map_std.iter_mut().zip(s.mean_mae_map.data()).zip(&map_mean) {
            let d = *v as f64 - m;
            *sd += d * d;
        }
    }
    for sd in &mut map_std {
        *sd = (*sd / (n - 1) as f64).sqrt().max(STD_FLOOR);
    }
    Ok(ValidationStats {
        metric_mean,
        metric_std,
        map_mean: Volume::new(dims, map_mean.iter().map(|&v| v as f32).collect())?,
        map_std: Volume::new(dims, map_std.iter().map(|&v| v as f32).collect())?,
        n_val: n,
        vqvae_hash,
        ddpm_hash,
    })
}

/// Aggregated OOD score: mean of the z-scored metric entries. Both metrics
/// are distances, so higher means more out-of-distribution.
pub fn ood_score(metrics: &[f64], stats: &ValidationStats) -> Result<f64> {
    if metrics.len() != stats.metric_mean.len() {
        return Err(Error::ShapeMismatch(format!(
            "metric vector length {} vs stats {}",
            metrics.len(),
            stats.metric_mean.len()
        )));
    }
    let mut total = 0.0;
    for ((v, m), s) in metrics.iter().zip(&stats.metric_mean).zip(&stats.metric_std) {
        total += (v - m) / s;
    }
    Ok(total / metrics.len() as f64)
}

/// Voxelwise z-scored anomaly map from an averaged MAE map.
pub fn anomaly_map_from_mean_mae(mean_mae: &Volume, stats: &ValidationStats) -> Result<Volume> {
    if mean_mae.dims() != stats.map_mean.dims() {
        return Err(Error::ShapeMismatch(format!(
            "map dims {:?} vs stats {:?}",
            mean_mae.dims(),
            stats.map_mean.dims()
        )));
    }
    let data = mean_mae
        .data()
        .iter()
        .zip(stats.map_mean.data())
        .zip(stats.map_std.data())
        .map(|((v, m), s)| (v - m) / s)
        .collect();
    Volume::new(mean_mae.dims(), data)
}

/// Spatial anomaly map from explicit reconstructions at the anomaly t values.
pub fn anomaly_map(
    input: &Volume,
    recons: &[(usize, Volume)],
    config: &ScoringConfig,
    stats: &ValidationStats,
) -> Result<Volume> {
    let mut acc = Volume::zeros(input.dims());
    for &t in &config.anomaly_t {
        let r = recons
            .iter()
            .find(|(rt, _)| *rt == t)
            .ok_or_else(|| Error::InvalidInput(format!("missing reconstruction at t={t}")))?;
        let map = mae_map(input, &r.1)?;
        for (a, v) in acc.data_mut().iter_mut().zip(map.data()) {
            *a += v;
        }
    }
    let n = config.anomaly_t.len() as f32;
    for a in acc.data_mut() {
        *a /= n;
    }
    anomaly_map_from_mean_mae(&acc, stats)
}

// ---------------------------------------------------------------------------
// Batch scoring and reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct OodScoreReport {
    pub id: String,
    pub label: Label,
    pub metrics: MetricVector,
    pub score: f64,
    pub map_path: Option<PathBuf>,
    /// Per-entry failure; failed entries are flagged, not dropped.
    pub error: Option<String>,
}

/// Score every entry of a manifest. When `map_dir` is given, anomaly maps are
/// written there as volumes and referenced from the reports.
pub fn score_dataset(
    model: &ScoringModel,
    stats: &ValidationStats,
    manifest: &DatasetManifest,
    config: &ScoringConfig,
    seed: u64,
    map_dir: Option<&Path>,
) -> Result<Vec<OodScoreReport>> {
    if let Some(dir) = map_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let reports: Vec<OodScoreReport> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let id = e.id();
            let result = (|| -> Result<(MetricVector, f64, Option<PathBuf>)> {
                let v = load_volume(manifest.resolve(e))?;
                let vs = score_volume(model, &v, &id, config, seed)?;
                let score = ood_score(&vs.metrics, stats)?;
                let map_path = match map_dir {
                    Some(dir) => {
                        let map = anomaly_map_from_mean_mae(&vs.mean_mae_map, stats)?;
                        let name = id.replace(['/', '\\'], "_");
                        let path = dir.join(format!("{name}.map.vol"));
                        save_volume(&map, &path)?;
                        Some(path)
                    }
                    None => None,
                };
                Ok((vs.metrics, score, map_path))
            })();
            match result {
                Ok((metrics, score, map_path)) => OodScoreReport {
                    id,
                    label: e.label.clone(),
                    metrics,
                    score,
                    map_path,
                    error: None,
                },
                Err(err) => OodScoreReport {
                    id,
                    label: e.label.clone(),
                    metrics: Vec::new(),
                    score: f64::NAN,
                    map_path: None,
                    error: Some(err.to_string()),
                },
            }
        })
        .collect();
    Ok(reports)
}

/// Persist reports as one structured-text record per input.
pub fn save_reports(
    reports: &[OodScoreReport],
    vqvae_hash: &str,
    ddpm_hash: &str,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    text.push_str("report_version = 1\n");
    text.push_str(&format!("vqvae_hash = {vqvae_hash}\n"));
    text.push_str(&format!("ddpm_hash = {ddpm_hash}\n"));
    text.push_str(&format!("records = {}\n\n", reports.len()));
    for r in reports {
        let metrics = r
            .metrics
            .iter()
            .map(|m| format!("{m:.17e}"))
            .collect::<Vec<_>>()
            .join(",");
        let map = r
            .map_path
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "-".to_string());
        let status = r.error.clone().unwrap_or_else(|| "ok".to_string());
        text.push_str(&format!(
            "{}\t{}\t{:.17e}\t{}\t{}\t{}\n",
            r.id, r.label, r.score, metrics, map, status
        ));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub struct ReportFile {
    pub vqvae_hash: String,
    pub ddpm_hash: String,
    pub reports: Vec<OodScoreReport>,
}

pub fn load_reports(path: impl AsRef<Path>) -> Result<ReportFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut vqvae_hash = String::new();
    let mut ddpm_hash = String::new();
    let mut declared = None;
    let mut reports = Vec::new();
    let mut in_records = false;
    for line in text.lines() {
        if line.trim().is_empty() {
            in_records = true;
            continue;
        }
        if !in_records {
            if let Some((k, v)) = line.split_once('=') {
                match k.trim() {
                    "report_version" => {
                        if v.trim() != "1" {
                            return Err(Error::UnsupportedVersion(v.trim().parse().unwrap_or(0)));
                        }
                    }
                    "vqvae_hash" => vqvae_hash = v.trim().to_string(),
                    "ddpm_hash" => ddpm_hash = v.trim().to_string(),
                    "records" => {
                        declared = Some(v.trim().parse::<usize>().map_err(|_| {
                            Error::InvalidInput(format!("bad record count '{}'", v.trim()))
                        })?)
                    }
                    other => {
                        return Err(Error::InvalidInput(format!("unknown report key '{other}'")))
                    }
                }
            } else {
                return Err(Error::InvalidInput(format!("bad report header line '{line}'")));
            }
        } else {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 6 {
                return Err(Error::InvalidInput(format!("bad report record '{line}'")));
            }
            let metrics: Vec<f64> = if parts[3].is_empty() {
                Vec::new()
            } else {
                parts[3]
                    .split(',')
                    .map(|m| {
                        m.parse::<f64>().map_err(|_| {
                            Error::InvalidInput(format!("bad metric value '{m}'"))
                        })
                    })
                    .collect::<Result<_>>()?
            };
            reports.push(OodScoreReport {
                id: parts[0].to_string(),
                label: parts[1].parse()?,
                score: parts[2]
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad score '{}'", parts[2])))?,
                metrics,
                map_path: if parts[4] == "-" { None } else { Some(PathBuf::from(parts[4])) },
                error: if parts[5] == "ok" { None } else { Some(parts[5].to_string()) },
            });
        }
    }
    if let Some(n) = declared {
        if n != reports.len() {
            return Err(Error::Truncated { expected: n, got: reports.len() });
        }
    }
    Ok(ReportFile { vqvae_hash, ddpm_hash, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Volume;

    fn stats_with(metric_mean: Vec<f64>, metric_std: Vec<f64>) -> ValidationStats {
        ValidationStats {
            metric_mean,
            metric_std,
            map_mean: Volume::zeros((2, 2, 2)),
            map_std: Volume::new((2, 2, 2), vec![1.0; 8]).unwrap(),
            n_val: 2,
            vqvae_hash: "a".into(),
            ddpm_hash: "b".into(),
        }
    }

    #[test]
    fn mse_basics() {
        let a = Volume::zeros((2, 2, 2));
        let b = Volume::new((2, 2, 2), vec![1.0; 8]).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
        // Direct-summation oracle on an arbitrary pair.
        let c = Volume::new((2, 2, 2), vec![0.1, 0.5, -0.3, 0.0, 1.0, 0.25, 0.75, 2.0]).unwrap();
        let oracle = c
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / 8.0;
        assert!((mse(&c, &b).unwrap() - oracle).abs() < 1e-12);
        let d = Volume::zeros((2, 2, 4));
        assert!(mse(&a, &d).is_err());
    }

    #[test]
    fn mae_map_basics() {
        let a = Volume::new((1, 2, 2), vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let same = mae_map(&a, &a).unwrap();
        assert!(same.data().iter().all(|&v| v == 0.0));
        let shifted = Volume::new((1, 2, 2), vec![0.5, 0.7, 0.9, 1.1]).unwrap();
        let map = mae_map(&a, &shifted).unwrap();
        for v in map.data() {
            assert!((v - 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn ood_score_is_mean_z() {
        let stats = stats_with(vec![1.0, 2.0, 3.0, 4.0], vec![0.5, 1.0, 2.0, 4.0]);
        // Vector equal to the means scores zero.
        assert_eq!(ood_score(&[1.0, 2.0, 3.0, 4.0], &stats).unwrap(), 0.0);
        // One std above the mean everywhere scores one.
        let plus: Vec<f64> = vec![1.5, 3.0, 5.0, 8.0];
        assert!((ood_score(&plus, &stats).unwrap() - 1.0).abs() < 1e-12);
        // Arbitrary vector matches direct arithmetic.
        let v = vec![0.3, 2.5, 2.0, 10.0];
        let oracle = ((0.3 - 1.0) / 0.5 + 0.5 / 1.0 + (2.0 - 3.0) / 2.0 + 6.0 / 4.0) / 4.0;
        assert!((ood_score(&v, &stats).unwrap() - oracle).abs() < 1e-12);
        assert!(ood_score(&[1.0], &stats).is_err());
    }

    #[test]
    fn zscoring_validation_vectors_with_their_own_stats_normalizes() {
        let scores: Vec<VolumeScore> = [
            vec![1.0, 5.0],
            vec![2.0, 6.0],
            vec![3.0, 10.0],
            vec![4.0, 3.0],
        ]
        .into_iter()
        .map(|metrics| VolumeScore { metrics, mean_mae_map: Volume::zeros((2, 2, 2)) })
        .collect();
        let stats = stats_from_scores(&scores, "x".into(), "y".into()).unwrap();
        let n = scores.len();
        for col in 0..2 {
            let zs: Vec<f64> = scores
                .iter()
                .map(|s| (s.metrics[col] - stats.metric_mean[col]) / stats.metric_std[col])
                .collect();
            let mean = zs.iter().sum::<f64>() / n as f64;
            let var = zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / (n - 1) as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_column_gets_std_floor() {
        let scores: Vec<VolumeScore> = (0..3)
            .map(|i| VolumeScore {
                metrics: vec![0.5, i as f64],
                mean_mae_map: Volume::zeros((1, 1, 2)),
            })
            .collect();
        let stats = stats_from_scores(&scores, "x".into(), "y".into()).unwrap();
        assert_eq!(stats.metric_std[0], STD_FLOOR);
        assert!(stats.metric_std[1] > 0.5);
        // Maps were all zero: voxel std floored too.
        assert!(stats.map_std.data().iter().all(|&v| v == STD_FLOOR as f32));
    }

    #[test]
    fn translation_invariance_of_zscores() {
        // Adding a constant to one metric column of both the scored vector
        // and the validation set leaves all z-scores unchanged.
        let base: Vec<Vec<f64>> = vec![vec![1.0, 5.0], vec![2.0, 7.0], vec![3.0, 6.0]];
        let mk = |shift: f64| -> ValidationStats {
            let scores: Vec<VolumeScore> = base
                .iter()
                .map(|m| VolumeScore {
                    metrics: vec![m[0] + shift, m[1]],
                    mean_mae_map: Volume::zeros((1, 1, 2)),
                })
                .collect();
            stats_from_scores(&scores, "x".into(), "y".into()).unwrap()
        };
        let s0 = mk(0.0);
        let s9 = mk(9.0);
        let v = [2.5, 5.5];
        let z0 = ood_score(&v, &s0).unwrap();
        let z9 = ood_score(&[v[0] + 9.0, v[1]], &s9).unwrap();
        assert!((z0 - z9).abs() < 1e-9);
    }

    #[test]
    fn ood_score_invariant_under_column_reordering() {
        let stats = stats_with(vec![1.0, 2.0, 3.0], vec![0.5, 1.5, 2.5]);
        let perm_stats = stats_with(vec![3.0, 1.0, 2.0], vec![2.5, 0.5, 1.5]);
        let v = [0.9, 2.3, 4.0];
        let permuted = [4.0, 0.9, 2.3];
        let a = ood_score(&v, &stats).unwrap();
        let b = ood_score(&permuted, &perm_stats).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn self_reconstruction_map_is_negative_mean_over_std() {
        let stats = ValidationStats {
            metric_mean: vec![0.0],
            metric_std: vec![1.0],
            map_mean: Volume::new((1, 1, 2), vec![0.2, 0.4]).unwrap(),
            map_std: Volume::new((1, 1, 2), vec![0.1, 0.2]).unwrap(),
            n_val: 2,
            vqvae_hash: "a".into(),
            ddpm_hash: "b".into(),
        };
        // A volume compared against itself has a zero MAE map, so the
        // anomaly map is exactly -mean/std.
        let zero_map = Volume::zeros((1, 1, 2));
        let map = anomaly_map_from_mean_mae(&zero_map, &stats).unwrap();
        assert!((map.data()[0] + 2.0).abs() < 1e-6);
        assert!((map.data()[1] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn stats_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.nta");
        let stats = ValidationStats {
            metric_mean: vec![1.0, 2.0],
            metric_std: vec![0.5, 0.25],
            map_mean: Volume::new((2, 2, 2), (0..8).map(|i| i as f32 * 0.1).collect()).unwrap(),
            map_std: Volume::new((2, 2, 2), vec![0.3; 8]).unwrap(),
            n_val: 7,
            vqvae_hash: "deadbeef".into(),
            ddpm_hash: "cafe".into(),
        };
        stats.save(&path).unwrap();
        let back = ValidationStats::load(&path).unwrap();
        assert_eq!(back.n_val, 7);
        assert_eq!(back.vqvae_hash, "deadbeef");
        assert_eq!(back.map_mean, stats.map_mean);
        assert_eq!(back.map_std, stats.map_std);
        for (a, b) in back.metric_mean.iter().zip(&stats.metric_mean) {
            assert!((a - b).abs() < 1e-6);
        }
        // Byte-identical on re-save.
        let b1 = std::fs::read(&path).unwrap();
        back.save(&path).unwrap();
        assert_eq!(b1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn reports_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.report");
        let reports = vec![
            OodScoreReport {
                id: "volumes/a.vol".into(),
                label: Label::Id,
                metrics: vec![0.1, 0.2],
                score: -0.35,
                map_path: None,
                error: None,
            },
            OodScoreReport {
                id: "volumes/b.vol".into(),
                label: Label::Ood("gaussian_noise:0.1".into()),
                metrics: vec![1.5, 2.5],
                score: 4.25,
                map_path: Some(PathBuf::from("maps/b.map.vol")),
                error: None,
            },
        ];
        save_reports(&reports, "hash1", "hash2", &path).unwrap();
        let back = load_reports(&path).unwrap();
        assert_eq!(back.vqvae_hash, "hash1");
        assert_eq!(back.reports.len(), 2);
        assert_eq!(back.reports[0].metrics, reports[0].metrics);
        assert_eq!(back.reports[1], reports[1]);
    }

    #[test]
    fn scoring_config_validates_anomaly_grid_alignment() {
        let schedule =
            NoiseSchedule::scaled_linear(crate::diffusion::ScheduleParams::default()).unwrap();
        let config = ScoringConfig::default();
        config.validate(&schedule).unwrap();
        assert_eq!(config.t_values(&schedule).len(), 50);
        assert_eq!(config.t_values(&schedule)[1], 20);
        let bad = ScoringConfig { anomaly_t: vec![105], ..ScoringConfig::default() };
        assert!(bad.validate(&schedule).is_err());
    }
}
