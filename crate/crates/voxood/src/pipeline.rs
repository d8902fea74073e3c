//! Pipeline stages: data synthesis, corruption, training, statistics
//! fitting, scoring, anomaly maps, and evaluation, plus run-manifest
//! bookkeeping. Each stage is separately re-runnable; a `pipeline` driver
//! chains them.

use crate::config::RunConfig;
use crate::corrupt::{corrupt_dataset, standard_suite};
use crate::diffusion::{load_ddpm, train_ddpm, DdpmTrainOutcome, LatentStats};
use crate::error::{Error, Result};
use crate::manifest::{make_dataset, make_family_testset, DatasetManifest};
use crate::scoring::{
    fit_validation_stats, load_reports, save_reports, score_dataset, OodScoreReport,
    ScoringModel, ValidationStats,
};
use crate::seeding::hash_file;
use crate::stats::{results_table, ClassScores, ResultsTable};
use crate::synth::{FamilyParams, SyntheticFamily};
use crate::volume::load_volume;
use crate::vqvae::{load_vqvae, quantize, train_vqvae, volume_to_tensor, VqTrainOutcome};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Canonical artifact layout under the output root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn id_data(&self) -> PathBuf {
        self.root.join("data/id")
    }
    pub fn far_data(&self) -> PathBuf {
        self.root.join("data/far")
    }
    pub fn near_data(&self) -> PathBuf {
        self.root.join("data/near")
    }
    pub fn id_manifest(&self, split: &str) -> PathBuf {
        self.id_data().join(format!("{split}.manifest"))
    }
    pub fn far_manifest(&self, family: &str) -> PathBuf {
        self.far_data().join(format!("far_{family}.manifest"))
    }
    pub fn near_manifest(&self) -> PathBuf {
        self.near_data().join("near_ood.manifest")
    }
    pub fn vqvae_checkpoint(&self) -> PathBuf {
        self.root.join("models/vqvae.nta")
    }
    pub fn ddpm_checkpoint(&self) -> PathBuf {
        self.root.join("models/ddpm.nta")
    }
    pub fn latent_cache(&self) -> PathBuf {
        self.root.join("models/latents")
    }
    pub fn stats_file(&self) -> PathBuf {
        self.root.join("stats/validation.nta")
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join(format!("reports/{name}.report"))
    }
    pub fn maps_dir(&self) -> PathBuf {
        self.root.join("maps")
    }
    pub fn table_text(&self) -> PathBuf {
        self.root.join("eval/table.txt")
    }
    pub fn table_records(&self) -> PathBuf {
        self.root.join("eval/table.records")
    }
    pub fn run_manifest(&self, command: &str) -> PathBuf {
        self.root.join(format!("runmeta/{command}.run"))
    }
}

/// Provenance record written after each successful command. Wall time is
/// informational and excluded from determinism guarantees.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<String>,
    pub wall_seconds: f64,
    pub tool_version: String,
}

fn write_run_manifest(
    layout: &Layout,
    command: &str,
    config: &RunConfig,
    inputs: Vec<(String, String)>,
    outputs: Vec<String>,
    started: Instant,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        config_hash: config.config_hash(),
        inputs,
        outputs,
        wall_seconds: started.elapsed().as_secs_f64(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let path = layout.run_manifest(command);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("run manifest serialization: {e}")))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn hash_of(path: &Path) -> Result<(String, String)> {
    let h = hash_file(path).map_err(|e| Error::io(path, e))?;
    Ok((path.display().to_string(), h))
}

pub struct SynthOutputs {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
    pub far: Vec<(SyntheticFamily, DatasetManifest)>,
}

/// Generate the in-distribution splits and one far-OOD test set per family.
pub fn cmd_synth_data(config: &RunConfig) -> Result<SynthOutputs> {
    let started = Instant::now();
    let layout = Layout::new(&config.out_root);
    let dims = (config.data.dims[0], config.data.dims[1], config.data.dims[2]);
    let params = FamilyParams::default();
    let id_family: SyntheticFamily = config.data.id_family.parse()?;
    let splits = make_dataset(
        id_family,
        config.data.id_count,
        config.seed,
        config.data.split,
        dims,
        &params,
        layout.id_data(),
    )?;
    let mut far = Vec::new();
    let mut outputs = vec![
        layout.id_manifest("train").display().to_string(),
        layout.id_manifest("val").display().to_string(),
        layout.id_manifest("test").display().to_string(),
    ];
    for name in &config.data.far_families {
        let family: SyntheticFamily = name.parse()?;
        let m = make_family_testset(
            family,
            config.data.far_count,
            config.seed,
            dims,
            &params,
            layout.far_data(),
        )?;
        outputs.push(layout.far_manifest(family.id()).display().to_string());
        far.push((family, m));
    }
    write_run_manifest(&layout, "synth-data", config, Vec::new(), outputs, started)?;
    Ok(SynthOutputs { train: splits.train, val: splits.val, test: splits.test, far })
}

/// Apply the corruption suite to the ID test split.
pub fn cmd_corrupt(config: &RunConfig, skip: &[String]) -> Result<DatasetManifest> {
    let started = Instant::now();
    let layout = Layout::new(&config.out_root);
    let test_path = layout.id_manifest("test");
    if !test_path.exists() {
        return Err(Error::ArtifactMismatch(
            "ID test manifest missing; run synth-data first".into(),
        ));
    }
    let test = DatasetManifest::load(&test_path)?;
    let specs: Vec<_> = standard_suite()
        .into_iter()
        .filter(|s| !skip.contains(&s.kind.class()))
        .collect();
    let near = corrupt_dataset(&test, &specs, layout.near_data())?;
    write_run_manifest(
        &layout,
        "corrupt",
        config,
        vec![hash_of(&test_path)?],
        vec![layout.near_manifest().display().to_string()],
        started,
    )?;
    Ok(near)
}

/// Train the first-stage model on the ID train/val splits.
pub fn cmd_train_vqvae(config: &RunConfig) -> Result<VqTrainOutcome> {
    let started = Instant::now();
    let layout = Layout::new(&config.out_root);
    let train_path = layout.id_manifest("train");
    let val_path = layout.id_manifest("val");
    if !train_path.exists() || !val_path.exists() {
        return Err(Error::ArtifactMismatch(
            "training manifests missing; run synth-data first".into(),
        ));
    }
    let train = DatasetManifest::load(&train_path)?;
    let val = DatasetManifest::load(&val_path)?;
    let mut tc = config.vqvae_train.clone();
    tc.seed = config.seed;
    let outcome =
        train_vqvae(&train, &val, config.vqvae.clone(), tc, layout.vqvae_checkpoint())?;
    write_run_manifest(
        &layout,
        "train-vqvae",
        config,
        vec![hash_of(&train_path)?, hash_of(&val_path)?],
        vec![layout.vqvae_checkpoint().display().to_string()],
        started,
    )?;
    Ok(outcome)
}

/// Encode a manifest's volumes to standardized-ready latents (de-quantized).
fn encode_latents(
    vq: &crate::vqvae::VqVae<f32>,
    manifest: &DatasetManifest,
) -> Result<Vec<crate::nn::Tensor<f32>>> {
    let out: Vec<Result<crate::nn::Tensor<f32>>> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let v = load_volume(manifest.resolve(e))?;
            let mut worker = vq.clone();
            let z = worker.encode(&volume_to_tensor(&v))?;
            Ok(quantize(&z, &worker.codebook.value)?.dequantized)
        })
        .collect();
    out.into_iter().collect()
}

/// Latent cache on disk: each latent `[n, h, w, d]` is stored in the volume
/// container flattened to `(n*h, w, d)`; the channel count (the 4th dim) is
/// recorded in the cache manifest and in the diffusion checkpoint footer.
fn latent_cache_store(
    dir: &Path,
    name: &str,
    latents: &[crate::nn::Tensor<f32>],
    embed_dim: usize,
    vq_hash: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, z) in latents.iter().enumerate() {
        let s = z.shape();
        let vol = crate::volume::Volume::new(
            (s[0] * s[1], s[2], s[3]),
            z.iter().copied().collect(),
        )?;
        crate::volume::save_volume(&vol, dir.join(format!("{name}_{i:04}.lat")))?;
    }
    let meta = format!(
        "vqvae_hash = \"{vq_hash}\"\nembed_dim = {embed_dim}\ncount_{name} = {}\n",
        latents.len()
    );
    let meta_path = dir.join(format!("{name}.cache.toml"));
    std::fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}

fn latent_cache_load(
    dir: &Path,
    name: &str,
    count: usize,
    embed_dim: usize,
    vq_hash: &str,
) -> Result<Option<Vec<crate::nn::Tensor<f32>>>> {
    let meta_path = dir.join(format!("{name}.cache.toml"));
    if !meta_path.exists() {
        return Ok(None);
    }
    let meta = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    if !meta.contains(&format!("vqvae_hash = \"{vq_hash}\"")) {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let path = dir.join(format!("{name}_{i:04}.lat"));
        if !path.exists() {
            return Ok(None);
        }
        let vol = load_volume(&path)?;
        let (nh, w, d) = vol.dims();
        let h = nh / embed_dim;
        let t = ndarray::ArrayD::from_shape_vec(
            ndarray::IxDyn(&[embed_dim, h, w, d]),
            vol.data().to_vec(),
        )
        .map_err(|e| Error::ShapeMismatch(format!("latent cache {name}_{i:04}: {e}")))?;
        out.push(t);
    }
    Ok(Some(out))
}

/// Train the denoiser on latents from the trained first stage.
pub fn cmd_train_ddpm(config: &RunConfig) -> Result<DdpmTrainOutcome> {
    let started = Instant::now();
    let layout = Layout::new(&config.out_root);
    let vq_path = layout.vqvae_checkpoint();
    if !vq_path.exists() {
        return Err(Error::ArtifactMismatch(
            "first-stage checkpoint missing; run train-vqvae before train-ddpm".into(),
        ));
    }
    let vq_hash = hash_file(&vq_path).map_err(|e| Error::io(&vq_path, e))?;
    let (vq, _) = load_vqvae(&vq_path, true)?;
    let train = DatasetManifest::load(layout.id_manifest("train"))?;
    let val = DatasetManifest::load(layout.id_manifest("val"))?;

    let cache_dir = layout.latent_cache();
    let embed = config.vqvae.embed_dim;
    let train_latents = match latent_cache_load(&cache_dir, "train", train.len(), embed, &vq_hash)?
    {
        Some(cached) => cached,
        None => {
            let latents = encode_latents(&vq, &train)?;
            latent_cache_store(&cache_dir, "train", &latents, embed, &vq_hash)?;
            latents
        }
    };
    let val_latents = match latent_cache_load(&cache_dir, "val", val.len(), embed, &vq_hash)? {
        Some(cached) => cached,
        None => {
            let latents = encode_latents(&vq, &val)?;
            latent_cache_store(&cache_dir, "val", &latents, embed, &vq_hash)?;
            latents
        }
    };

    let stats = LatentStats::fit(&train_latents)?;
    let std_train: Vec<_> = train_latents.iter().map(|z| stats.standardize(z)).collect();
    let std_val: Vec<_> = val_latents.iter().map(|z| stats.standardize(z)).collect();

    let mut tc = config.ddpm_train.clone();
    tc.seed = config.seed;
    let outcome = train_ddpm(
        &std_train,
        &std_val,
        config.unet.clone(),
        config.schedule,
        tc,
        stats,
        vq_hash.clone(),
        layout.ddpm_checkpoint(),
    )?;
    write_run_manifest(
        &layout,
        "train-ddpm",
        config,
        vec![(vq_path.display().to_string(), vq_hash)],
        vec![layout.ddpm_checkpoint().display().to_string()],
        started,
    )?;
    Ok(outcome)
}

/// Load both trained models, verifying the diffusion stage was built on the
/// supplied first stage.
pub fn load_scoring_model(layout: &Layout) -> Result<(ScoringModel, String, String)> {
    let vq_path = layout.vqvae_checkpoint();
    let ddpm_path = layout.ddpm_checkpoint();
    for p in [&vq_path, &ddpm_path] {
        if !p.exists() {
            return Err(Error::ArtifactMismatch(format!(
                "missing checkpoint {}; train both stages first",
                p.display()
            )));
        }
    }
    let vq_hash = hash_file(&vq_path).map_err(|e| Error::io(&vq_path, e))?;
    let ddpm_hash = hash_file(&ddpm_path).map_err(|e| Error::io(&ddpm_path, e))?;
    let (vq, _) = load_vqvae(&vq_path, true)?;
    let (unet, schedule, meta) = load_ddpm(&ddpm_path, true)?;
    if meta.vqvae_hash != vq_hash {
        return Err(Error::ArtifactMismatch(format!(
            "diffusion checkpoint was trained on first stage {} but {} is {}",
            meta.vqvae_hash,
            vq_path.display(),
            vq_hash
        )));
    }
    Ok((
        ScoringModel { vq, unet, schedule, latent_stats: meta.latent_stats },
        vq_hash,
        ddpm_hash,
    ))
}

/// Fit validation statistics for z-scoring.
pub fn cmd_fit_stats(config: &RunConfig) -> Result<ValidationStats> {
    let started = Instant::now();
    let layout = Layout::new(&config.out_root);
    let (model, vq_hash, ddpm_hash) = load_scoring_model(&layout)?;
    let val = DatasetManifest::load(layout.id_manifest("val"))?;
    let stats =
        fit_validation_stats(&model, &val, &config.scoring, config.seed, vq_hash, ddpm_hash)?;
    stats.save(layout.stats_file())?;
    write_run_manifest(
        &layout,
        "fit-stats",
        config,
        vec![hash_of(&layout.vqvae_checkpoint())?, hash_of(&layout.ddpm_checkpoint())?],
        vec![layout.stats_file().display().to_string()],
        started,
    )?;
    Ok(stats)
}

/// Score one manifest, writing `reports/<name>.report` (and anomaly maps when
/// requested). Refuses to run when the stats file's model hashes do not match
/// the checkpoints on disk.
pub fn cmd_score(
    config: &RunConfig,
    manifest_path: &Path,
    report_name: &str,
    with_maps: bool,
) -> Result<Vec<OodScoreReport>> {
    let started = Instant::now();
    let layout = Layout::new(&config.out_root);
    let (model, vq_hash, ddpm_hash) = load_scoring_model(&layout)?;
    let stats = ValidationStats::load(layout.stats_file())?;
    if stats.vqvae_hash != vq_hash || stats.ddpm_hash != ddpm_hash {
        return Err(Error::ArtifactMismatch(
            "validation statistics were fitted with different checkpoints; re-run fit-stats"
                .into(),
        ));
    }
    let manifest = DatasetManifest::load(manifest_path)?;
    let maps_dir = with_maps.then(|| layout.maps_dir());
    let reports = score_dataset(
        &model,
        &stats,
        &manifest,
        &config.scoring,
        config.seed,
        maps_dir.as_deref(),
    )?;
    let report_path = layout.report(report_name);
    save_reports(&reports, &vq_hash, &ddpm_hash, &report_path)?;
    write_run_manifest(
        &layout,
        &format!("score-{report_name}"),
        config,
        vec![
            hash_of(manifest_path)?,
            hash_of(&layout.stats_file())?,
            hash_of(&layout.vqvae_checkpoint())?,
            hash_of(&layout.ddpm_checkpoint())?,
        ],
        vec![report_path.display().to_string()],
        started,
    )?;
    Ok(reports)
}

/// Write anomaly maps for every entry of a manifest.
pub fn cmd_anomaly_map(config: &RunConfig, manifest_path: &Path) -> Result<Vec<PathBuf>> {
    let started = Instant::now();
    let layout = Layout::new(&config.out_root);
    let (model, vq_hash, ddpm_hash) = load_scoring_model(&layout)?;
    let stats = ValidationStats::load(layout.stats_file())?;
    if stats.vqvae_hash != vq_hash || stats.ddpm_hash != ddpm_hash {
        return Err(Error::ArtifactMismatch(
            "validation statistics were fitted with different checkpoints; re-run fit-stats"
                .into(),
        ));
    }
    let manifest = DatasetManifest::load(manifest_path)?;
    let reports = score_dataset(
        &model,
        &stats,
        &manifest,
        &config.scoring,
        config.seed,
        Some(&layout.maps_dir()),
    )?;
    let mut paths = Vec::new();
    for r in &reports {
        if let Some(err) = &r.error {
            return Err(Error::Numeric(format!("map generation failed for {}: {err}", r.id)));
        }
        paths.push(r.map_path.clone().expect("map path recorded"));
    }
    write_run_manifest(
        &layout,
        "anomaly-map",
        config,
        vec![hash_of(manifest_path)?],
        paths.iter().map(|p| p.display().to_string()).collect(),
        started,
    )?;
    Ok(paths)
}

/// Group report records into ID scores and per-class OOD scores.
pub fn split_report_scores(reports: &[OodScoreReport]) -> Result<(Vec<f64>, ClassScores)> {
    let mut id_scores = Vec::new();
    let mut by_class = ClassScores::new();
    for r in reports {
        if let Some(err) = &r.error {
            return Err(Error::Numeric(format!("report entry {} failed: {err}", r.id)));
        }
        match r.label.ood_class() {
            None => id_scores.push(r.score),
            Some(class) => by_class.entry(class.to_string()).or_default().push(r.score),
        }
    }
    Ok((id_scores, by_class))
}

/// Build the evaluation table from report files. The first element of
/// `models` is rendered first; with exactly two models a paired DeLong test
/// annotates each row.
pub fn cmd_evaluate(
    config: &RunConfig,
    models: &[(String, Vec<PathBuf>)],
) -> Result<ResultsTable> {
    let started = Instant::now();
    let layout = Layout::new(&config.out_root);
    let mut per_model = Vec::new();
    let mut inputs = Vec::new();
    for (name, report_paths) in models {
        let mut all = Vec::new();
        for path in report_paths {
            inputs.push(hash_of(path)?);
            all.extend(load_reports(path)?.reports);
        }
        let (id_scores, by_class) = split_report_scores(&all)?;
        if id_scores.is_empty() {
            return Err(Error::InvalidInput(format!(
                "model '{name}' has no ID test records; include the ID report"
            )));
        }
        per_model.push((name.clone(), id_scores, by_class));
    }
    let table = results_table(&per_model)?;
    let text_path = layout.table_text();
    if let Some(parent) = text_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(&text_path, table.render_text()).map_err(|e| Error::io(&text_path, e))?;
    std::fs::write(layout.table_records(), table.render_records())
        .map_err(|e| Error::io(layout.table_records(), e))?;
    write_run_manifest(
        &layout,
        "evaluate",
        config,
        inputs,
        vec![
            layout.table_text().display().to_string(),
            layout.table_records().display().to_string(),
        ],
        started,
    )?;
    Ok(table)
}

pub struct PipelineOutcome {
    pub table: ResultsTable,
    pub vq: VqTrainOutcome,
    pub ddpm: DdpmTrainOutcome,
}

/// Run every stage in order: synth-data, corrupt, train-vqvae, train-ddpm,
/// fit-stats, score (ID test, near-OOD with maps, each far family), evaluate.
pub fn cmd_pipeline(config: &RunConfig) -> Result<PipelineOutcome> {
    let layout = Layout::new(&config.out_root);
    let synth = cmd_synth_data(config)?;
    cmd_corrupt(config, &[])?;
    let vq = cmd_train_vqvae(config)?;
    let ddpm = cmd_train_ddpm(config)?;
    cmd_fit_stats(config)?;
    cmd_score(config, &layout.id_manifest("test"), "id_test", false)?;
    cmd_score(config, &layout.near_manifest(), "near", true)?;
    let mut report_paths = vec![layout.report("id_test"), layout.report("near")];
    for (family, _) in &synth.far {
        let name = format!("far_{}", family.id());
        cmd_score(config, &layout.far_manifest(family.id()), &name, false)?;
        report_paths.push(layout.report(&name));
    }
    let table = cmd_evaluate(config, &[("ldm".to_string(), report_paths)])?;
    Ok(PipelineOutcome { table, vq, ddpm })
}
