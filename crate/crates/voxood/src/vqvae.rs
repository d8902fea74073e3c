//! First-stage compression model: convolutional encoder, vector-quantization
//! codebook, decoder, and the training loop.
//!
//! The latent of a `[1, H, W, D]` volume is `[n, H/2^l, W/2^l, D/2^l]`;
//! quantization replaces each position's embedding vector with its nearest
//! codebook entry. Training minimizes `||x - x_hat||^2 + vq + beta * commit`
//! with a straight-through estimator through the quantizer.

use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;
use crate::nn::{
    Adam, Conv3d, GroupNorm, Param, ParamSet, ResBlock3d, Scalar, Sigmoid, Silu, Tensor,
    TensorArchive, Upsample2x,
};
use crate::seeding::rng_for;
use crate::volume::{load_volume, Volume};
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VqConfig {
    /// Number of 2x downsampling levels (spatial compression 2^(3*levels)).
    pub levels: usize,
    /// Channel width per level, outermost first; `len() == levels`.
    pub channels: Vec<usize>,
    /// Latent embedding dimension n.
    pub embed_dim: usize,
    /// Codebook size K.
    pub codebook_size: usize,
    /// Commitment loss weight beta.
    pub commitment_beta: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            levels: 2,
            channels: vec![16, 32],
            embed_dim: 8,
            codebook_size: 64,
            commitment_beta: 0.25,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 4 {
            return Err(Error::Config(format!("levels must be in 1..=4, got {}", self.levels)));
        }
        if self.channels.len() != self.levels {
            return Err(Error::Config(format!(
                "channels lists {} entries for {} levels",
                self.channels.len(),
                self.levels
            )));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook size must be >= 2".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed dim must be >= 1".into()));
        }
        Ok(())
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.levels
    }

    pub fn check_dims(&self, dims: (usize, usize, usize)) -> Result<()> {
        let f = self.downsample_factor();
        for d in [dims.0, dims.1, dims.2] {
            if d % f != 0 {
                return Err(Error::InvalidInput(format!(
                    "dims {dims:?} not divisible by 2^levels = {f}"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Quantization
// ---------------------------------------------------------------------------

/// Codebook-index field of a latent: one index in `[0, K)` per spatial
/// position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedLatent {
    pub dims: (usize, usize, usize),
    pub indices: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct QuantizeOutput<T> {
    pub quantized: QuantizedLatent,
    /// Codebook vectors arranged as the latent: `[n, h, w, d]`.
    pub dequantized: Tensor<T>,
    /// Mean squared distance `||sg(z) - e||^2 / numel` (codebook pull).
    pub vq_loss: f64,
    /// Mean squared distance `||z - sg(e)||^2 / numel` (encoder commitment).
    pub commit_loss: f64,
}

/// Nearest-codebook lookup per latent position, with both loss terms.
/// Distances are computed exactly, so a position equal to a codebook vector
/// quantizes to distance zero; ties break to the lowest index.
pub fn quantize<T: Scalar>(z: &Tensor<T>, codebook: &ArrayD<T>) -> Result<QuantizeOutput<T>> {
    let zs = z.shape();
    if zs.len() != 4 {
        return Err(Error::ShapeMismatch(format!("latent must be [n,h,w,d], got {zs:?}")));
    }
    let (n, h, w, d) = (zs[0], zs[1], zs[2], zs[3]);
    let k = codebook.shape()[0];
    if codebook.shape() != [k, n] {
        return Err(Error::ShapeMismatch(format!(
            "codebook shape {:?} does not match embed dim {n}",
            codebook.shape()
        )));
    }
    let positions = h * w * d;
    let zf = z.as_slice().expect("latent contiguous");
    let cb = codebook.as_slice().expect("codebook contiguous");

    let mut indices = Vec::with_capacity(positions);
    let mut dequant = ArrayD::<T>::zeros(z.raw_dim());
    let df = dequant.as_slice_mut().unwrap();
    let mut total_dist = 0.0f64;
    for pos in 0..positions {
        let mut best_k = 0usize;
        let mut best_d = f64::INFINITY;
        for ki in 0..k {
            let mut dist = 0.0f64;
            for c in 0..n {
                let diff = zf[c * positions + pos].as_f64() - cb[ki * n + c].as_f64();
                dist += diff * diff;
            }
            if dist < best_d {
                best_d = dist;
                best_k = ki;
            }
        }
        indices.push(best_k as u32);
        total_dist += best_d;
        for c in 0..n {
            df[c * positions + pos] = cb[best_k * n + c];
        }
    }
    let mean_dist = total_dist / (positions * n) as f64;
    Ok(QuantizeOutput {
        quantized: QuantizedLatent { dims: (h, w, d), indices },
        dequantized: dequant,
        vq_loss: mean_dist,
        commit_loss: mean_dist,
    })
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct DecoderStage<T> {
    up: Upsample2x,
    conv: Conv3d<T>,
    res: ResBlock3d<T>,
    in_shape: Vec<usize>,
}

/// Encoder, codebook, and decoder. One instance serves one forward/backward
/// at a time (layers cache activations); clone per worker for parallelism.
#[derive(Debug, Clone)]
pub struct VqVae<T: Scalar> {
    pub cfg: VqConfig,
    enc_convs: Vec<Conv3d<T>>,
    enc_res: Vec<ResBlock3d<T>>,
    to_latent: Conv3d<T>,
    pub codebook: Param<T>,
    from_latent: Conv3d<T>,
    dec_deep_res: ResBlock3d<T>,
    dec_stages: Vec<DecoderStage<T>>,
    final_up: Upsample2x,
    final_up_in_shape: Vec<usize>,
    final_norm: GroupNorm<T>,
    final_act: Silu<T>,
    final_conv: Conv3d<T>,
    final_sig: Sigmoid<T>,
}

impl<T: Scalar> VqVae<T> {
    pub fn new(cfg: VqConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, "vqvae/init");
        let l = cfg.levels;
        let mut enc_convs = Vec::with_capacity(l);
        let mut enc_res = Vec::with_capacity(l);
        let mut prev = 1;
        for (i, &ch) in cfg.channels.iter().enumerate() {
            enc_convs.push(Conv3d::new(&format!("enc.down{i}"), prev, ch, 3, 2, 1, false, &mut rng)?);
            enc_res.push(ResBlock3d::new(&format!("enc.res{i}"), ch, ch, None, &mut rng)?);
            prev = ch;
        }
        let to_latent = Conv3d::new("enc.to_latent", prev, cfg.embed_dim, 3, 1, 1, false, &mut rng)?;

        let cb_std = 0.5;
        let codebook_init = ArrayD::from_shape_simple_fn(
            IxDyn(&[cfg.codebook_size, cfg.embed_dim]),
            || {
                let v: f64 = rng.sample(rand_distr::StandardNormal);
                T::from_f64(v * cb_std)
            },
        );
        let codebook = Param::new("codebook", codebook_init);

        let deep = *cfg.channels.last().unwrap();
        let from_latent = Conv3d::new("dec.from_latent", cfg.embed_dim, deep, 3, 1, 1, false, &mut rng)?;
        let dec_deep_res = ResBlock3d::new("dec.res_deep", deep, deep, None, &mut rng)?;
        let mut dec_stages = Vec::with_capacity(l - 1);
        for i in (1..l).rev() {
            let c_in = cfg.channels[i];
            let c_out = cfg.channels[i - 1];
            dec_stages.push(DecoderStage {
                up: Upsample2x,
                conv: Conv3d::new(&format!("dec.up{i}"), c_in, c_out, 3, 1, 1, false, &mut rng)?,
                res: ResBlock3d::new(&format!("dec.res{i}"), c_out, c_out, None, &mut rng)?,
                in_shape: Vec::new(),
            });
        }
        let c0 = cfg.channels[0];
        let final_norm = GroupNorm::new("dec.final_norm", c0, crate::nn::default_groups(c0))?;
        let final_conv = Conv3d::new("dec.final_conv", c0, 1, 3, 1, 1, false, &mut rng)?;
        Ok(VqVae {
            cfg,
            enc_convs,
            enc_res,
            to_latent,
            codebook,
            from_latent,
            dec_deep_res,
            dec_stages,
            final_up: Upsample2x,
            final_up_in_shape: Vec::new(),
            final_norm,
            final_act: Silu::new(),
            final_conv,
            final_sig: Sigmoid::new(),
        })
    }

    /// Continuous latent of a `[1, H, W, D]` input: `[n, H/2^l, ...]`.
    pub fn encode(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 || s[0] != 1 {
            return Err(Error::ShapeMismatch(format!("encoder expects [1,H,W,D], got {s:?}")));
        }
        self.cfg.check_dims((s[1], s[2], s[3]))?;
        let mut h = x.clone();
        for i in 0..self.cfg.levels {
            h = self.enc_convs[i].forward(&h)?;
            h = self.enc_res[i].forward(&h, None)?;
        }
        self.to_latent.forward(&h)
    }

    pub fn encode_backward(&mut self, dz: &Tensor<T>) -> Tensor<T> {
        let mut d = self.to_latent.backward(dz);
        for i in (0..self.cfg.levels).rev() {
            let (dres, _) = self.enc_res[i].backward(&d);
            d = self.enc_convs[i].backward(&dres);
        }
        d
    }

    /// Decode a (de-quantized) latent back to a `[1, H, W, D]` volume in
    /// `[0, 1]` (sigmoid output).
    pub fn decode(&mut self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let s = z.shape();
        if s.len() != 4 || s[0] != self.cfg.embed_dim {
            return Err(Error::ShapeMismatch(format!(
                "decoder expects [{}, h, w, d], got {s:?}",
                self.cfg.embed_dim
            )));
        }
        let mut h = self.from_latent.forward(z)?;
        h = self.dec_deep_res.forward(&h, None)?;
        for si in 0..self.dec_stages.len() {
            self.dec_stages[si].in_shape = h.shape().to_vec();
            let up = self.dec_stages[si].up.forward(&h)?;
            h = self.dec_stages[si].conv.forward(&up)?;
            h = self.dec_stages[si].res.forward(&h, None)?;
        }
        self.final_up_in_shape = h.shape().to_vec();
        let up = self.final_up.forward(&h)?;
        let n = self.final_norm.forward(&up)?;
        let a = self.final_act.forward(&n);
        let c = self.final_conv.forward(&a)?;
        Ok(self.final_sig.forward(&c))
    }

    pub fn decode_backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let d = self.final_sig.backward(dy);
        let d = self.final_conv.backward(&d);
        let d = self.final_act.backward(&d);
        let d = self.final_norm.backward(&d);
        let mut d = self.final_up.backward(&d, &self.final_up_in_shape);
        for si in (0..self.dec_stages.len()).rev() {
            let (dres, _) = self.dec_stages[si].res.backward(&d);
            let dconv = self.dec_stages[si].conv.backward(&dres);
            let shape = self.dec_stages[si].in_shape.clone();
            d = self.dec_stages[si].up.backward(&dconv, &shape);
        }
        let (dres, _) = self.dec_deep_res.backward(&d);
        self.from_latent.backward(&dres)
    }

    /// encode + quantize + decode, returning the reconstruction and losses.
    pub fn reconstruct(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, QuantizeOutput<T>)> {
        let z = self.encode(x)?;
        let q = quantize(&z, &self.codebook.value)?;
        let xh = self.decode(&q.dequantized)?;
        Ok((xh, q))
    }
}

/// Convert a volume into a `[1, H, W, D]` tensor.
pub fn volume_to_tensor<T: Scalar>(v: &Volume) -> Tensor<T> {
    let (h, w, d) = v.dims();
    let data: Vec<T> = v.data().iter().map(|&x| T::from_f32(x)).collect();
    ArrayD::from_shape_vec(IxDyn(&[1, h, w, d]), data).expect("volume layout")
}

/// Convert a `[1, H, W, D]` tensor back into a volume.
pub fn tensor_to_volume<T: Scalar>(t: &Tensor<T>) -> Result<Volume> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::ShapeMismatch(format!("expected [1,H,W,D], got {s:?}")));
    }
    let data: Vec<f32> = t.iter().map(|v| v.as_f32()).collect();
    Volume::new((s[1], s[2], s[3]), data)
}

impl<T: Scalar> ParamSet<T> for VqVae<T> {
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        for c in &mut self.enc_convs {
            c.collect_params(out);
        }
        for r in &mut self.enc_res {
            r.collect_params(out);
        }
        self.to_latent.collect_params(out);
        out.push(&mut self.codebook);
        self.from_latent.collect_params(out);
        self.dec_deep_res.collect_params(out);
        for s in &mut self.dec_stages {
            s.conv.collect_params(out);
            s.res.collect_params(out);
        }
        self.final_norm.collect_params(out);
        self.final_conv.collect_params(out);
    }
    fn collect_params_ref<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        for c in &self.enc_convs {
            c.collect_params_ref(out);
        }
        for r in &self.enc_res {
            r.collect_params_ref(out);
        }
        self.to_latent.collect_params_ref(out);
        out.push(&self.codebook);
        self.from_latent.collect_params_ref(out);
        self.dec_deep_res.collect_params_ref(out);
        for s in &self.dec_stages {
            s.conv.collect_params_ref(out);
            s.res.collect_params_ref(out);
        }
        self.final_norm.collect_params_ref(out);
        self.final_conv.collect_params_ref(out);
    }
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_recon_mse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VqCheckpointMeta {
    pub kind: String,
    pub seed: u64,
    /// Next epoch index to run when resuming.
    pub epoch: usize,
    pub adam_step: u64,
    pub best_val: f64,
    pub patience_used: usize,
    pub finished: bool,
    pub codebook_used_last_epoch: usize,
    pub config: VqConfig,
    pub train: VqTrainConfig,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VqTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience in epochs.
    pub patience: usize,
    pub seed: u64,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        VqTrainConfig { lr: 3e-4, batch_size: 8, max_epochs: 40, patience: 15, seed: 0 }
    }
}

fn save_checkpoint(
    path: &Path,
    model: &VqVae<f32>,
    best: &[(String, ArrayD<f32>)],
    adam: &Adam<f32>,
    meta: &VqCheckpointMeta,
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

/// Load a trained model: by default the best-validation parameters.
pub fn load_vqvae(path: impl AsRef<Path>, use_best: bool) -> Result<(VqVae<f32>, VqCheckpointMeta)> {
    let archive = TensorArchive::load(path.as_ref())?;
    let meta: VqCheckpointMeta = toml::from_str(&archive.footer)
        .map_err(|e| Error::Config(format!("bad checkpoint footer: {e}")))?;
    if meta.kind != "vqvae" {
        return Err(Error::ArtifactMismatch(format!(
            "checkpoint kind '{}' is not a vqvae",
            meta.kind
        )));
    }
    let mut model = VqVae::<f32>::new(meta.config.clone(), meta.seed)?;
    for p in model.params_mut() {
        let name = if use_best && archive.get(&format!("best.{}", p.name)).is_some() {
            format!("best.{}", p.name)
        } else {
            p.name.clone()
        };
        p.value = archive.get_array(&name)?;
    }
    Ok((model, meta))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct SampleGrads {
    loss: f64,
    grads: Vec<ArrayD<f32>>,
    usage: Vec<u64>,
}

fn train_step_sample(model: &mut VqVae<f32>, x: &Tensor<f32>) -> Result<SampleGrads> {
    model.zero_grads();
    let beta = model.cfg.commitment_beta;
    let z = model.encode(x)?;
    let q = quantize(&z, &model.codebook.value)?;
    let xh = model.decode(&q.dequantized)?;

    let n_x = xh.len() as f64;
    let mut recon = 0.0f64;
    let mut dxh = ArrayD::<f32>::zeros(xh.raw_dim());
    {
        let xs = x.as_slice().unwrap();
        let xhs = xh.as_slice().unwrap();
        let ds = dxh.as_slice_mut().unwrap();
        for i in 0..xs.len() {
            let diff = (xhs[i] - xs[i]) as f64;
            recon += diff * diff;
            ds[i] = (2.0 * diff / n_x) as f32;
        }
        recon /= n_x;
    }

    let de = model.decode_backward(&dxh);
    // Straight-through: decoder gradient passes to the encoder unchanged,
    // plus the commitment pull toward the codebook.
    let n_z = z.len() as f64;
    let mut dz = de;
    {
        let zs = z.as_slice().unwrap();
        let es = q.dequantized.as_slice().unwrap();
        let dzs = dz.as_slice_mut().unwrap();
        for i in 0..zs.len() {
            dzs[i] += (2.0 * beta * (zs[i] - es[i]) as f64 / n_z) as f32;
        }
    }
    model.encode_backward(&dz);

    // Codebook pulls toward assigned encoder outputs (vq loss gradient).
    let embed = model.cfg.embed_dim;
    let positions = q.quantized.indices.len();
    let mut usage = vec![0u64; model.cfg.codebook_size];
    {
        let zs = z.as_slice().unwrap();
        let cbg = model.codebook.grad.as_slice_mut().unwrap();
        let cbv = model.codebook.value.as_slice().unwrap();
        for (pos, &ki) in q.quantized.indices.iter().enumerate() {
            let ki = ki as usize;
            usage[ki] += 1;
            for c in 0..embed {
                let e = cbv[ki * embed + c] as f64;
                let zv = zs[c * positions + pos] as f64;
                cbg[ki * embed + c] += (2.0 * (e - zv) / n_z) as f32;
            }
        }
    }

    let loss = recon + q.vq_loss + beta * q.commit_loss;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {loss}")));
    }
    let grads = model.params().iter().map(|p| p.grad.clone()).collect();
    Ok(SampleGrads { loss, grads, usage })
}

fn val_recon_mse(model: &VqVae<f32>, vols: &[Tensor<f32>]) -> Result<f64> {
    let mses: Vec<Result<f64>> = vols
        .par_iter()
        .map(|x| {
            let mut m = model.clone();
            let (xh, _) = m.reconstruct(x)?;
            let n = x.len() as f64;
            let mse = x
                .iter()
                .zip(xh.iter())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / n;
            Ok(mse)
        })
        .collect();
    let mut total = 0.0;
    for m in mses {
        total += m?;
    }
    Ok(total / vols.len() as f64)
}

pub struct VqTrainOutcome {
    pub meta: VqCheckpointMeta,
    pub checkpoint: std::path::PathBuf,
}

/// Train (or resume training) the first-stage model. The checkpoint at
/// `checkpoint_path` is rewritten at every epoch end and contains the current
/// parameters, the best-validation parameters, and the optimizer state, so
/// training can resume bit-identically in deterministic mode.
pub fn train_vqvae(
    train_manifest: &DatasetManifest,
    val_manifest: &DatasetManifest,
    config: VqConfig,
    train_config: VqTrainConfig,
    checkpoint_path: impl AsRef<Path>,
) -> Result<VqTrainOutcome> {
    config.validate()?;
    if train_manifest.is_empty() || val_manifest.is_empty() {
        return Err(Error::InvalidInput("train and validation manifests must be non-empty".into()));
    }
    let checkpoint_path = checkpoint_path.as_ref();
    let load_all = |m: &DatasetManifest| -> Result<Vec<Tensor<f32>>> {
        m.entries.iter().map(|e| Ok(volume_to_tensor(&load_volume(m.resolve(e))?))).collect()
    };
    let train_vols = load_all(train_manifest)?;
    let val_vols = load_all(val_manifest)?;

    let seed = train_config.seed;
    let mut model;
    let mut adam = Adam::<f32>::new(train_config.lr);
    let mut meta;
    let mut best_params: Vec<(String, ArrayD<f32>)>;

    if checkpoint_path.exists() {
        let (loaded, loaded_meta) = load_vqvae(checkpoint_path, false)?;
        if loaded_meta.config != config || loaded_meta.train != train_config {
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
            return Ok(VqTrainOutcome { meta, checkpoint: checkpoint_path.to_path_buf() });
        }
    } else {
        model = VqVae::<f32>::new(config.clone(), seed)?;
        init_codebook_from_data(&mut model, &train_vols)?;
        best_params =
            model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        meta = VqCheckpointMeta {
            kind: "vqvae".into(),
            seed,
            epoch: 0,
            adam_step: 0,
            best_val: f64::INFINITY,
            patience_used: 0,
            finished: false,
            codebook_used_last_epoch: 0,
            config: config.clone(),
            train: train_config.clone(),
            log: Vec::new(),
        };
    }

    let batch = train_config.batch_size.max(1);
    while meta.epoch < train_config.max_epochs {
        let epoch = meta.epoch;
        let mut order: Vec<usize> = (0..train_vols.len()).collect();
        let mut rng = rng_for(seed, &format!("vqvae/epoch/{epoch}"));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        let mut usage = vec![0u64; model.cfg.codebook_size];
        for chunk in order.chunks(batch) {
            let results: Vec<Result<SampleGrads>> = chunk
                .par_iter()
                .map(|&i| {
                    let mut worker = model.clone();
                    train_step_sample(&mut worker, &train_vols[i])
                })
                .collect();
            let mut summed: Option<Vec<ArrayD<f32>>> = None;
            let scale = 1.0 / chunk.len() as f32;
            for r in results {
                let r = r?;
                epoch_loss += r.loss;
                for (u, du) in usage.iter_mut().zip(&r.usage) {
                    *u += du;
                }
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
        epoch_loss /= train_vols.len() as f64;

        let val_mse = val_recon_mse(&model, &val_vols)?;
        if !val_mse.is_finite() {
            return Err(Error::Numeric(format!(
                "validation loss diverged at epoch {epoch}; last good checkpoint kept at {}",
                checkpoint_path.display()
            )));
        }
        meta.log.push(EpochLog { epoch, train_loss: epoch_loss, val_recon_mse: val_mse });
        if val_mse < meta.best_val {
            meta.best_val = val_mse;
            meta.patience_used = 0;
            best_params =
                model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        } else {
            meta.patience_used += 1;
        }
        meta.codebook_used_last_epoch = usage.iter().filter(|&&u| u > 0).count();

        reseed_dead_codes(&mut model, &usage, &train_vols, seed, epoch)?;

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
    Ok(VqTrainOutcome { meta, checkpoint: checkpoint_path.to_path_buf() })
}

/// Seed the codebook from actual encoder outputs so training starts with a
/// live codebook.
fn init_codebook_from_data(model: &mut VqVae<f32>, train_vols: &[Tensor<f32>]) -> Result<()> {
    let mut pool: Vec<Vec<f32>> = Vec::new();
    let embed = model.cfg.embed_dim;
    for x in train_vols.iter().take(4) {
        let z = model.encode(x)?;
        let s = z.shape().to_vec();
        let positions = s[1] * s[2] * s[3];
        let zs = z.as_slice().unwrap();
        for pos in 0..positions {
            let mut v = Vec::with_capacity(embed);
            for c in 0..embed {
                v.push(zs[c * positions + pos]);
            }
            pool.push(v);
        }
    }
    let mut rng = rng_for(model.cfg.codebook_size as u64, "vqvae/codebook-init");
    let k = model.cfg.codebook_size;
    let cb = model.codebook.value.as_slice_mut().unwrap();
    for ki in 0..k {
        let pick = rng.random_range(0..pool.len());
        for c in 0..embed {
            let jitter: f64 = rng.sample(rand_distr::StandardNormal);
            cb[ki * embed + c] = pool[pick][c] + (jitter * 0.01) as f32;
        }
    }
    Ok(())
}

/// Re-seed entries unused over the epoch to random encoder outputs.
fn reseed_dead_codes(
    model: &mut VqVae<f32>,
    usage: &[u64],
    train_vols: &[Tensor<f32>],
    seed: u64,
    epoch: usize,
) -> Result<()> {
    let dead: Vec<usize> = usage
        .iter()
        .enumerate()
        .filter_map(|(k, &u)| if u == 0 { Some(k) } else { None })
        .collect();
    if dead.is_empty() {
        return Ok(());
    }
    let mut rng = rng_for(seed, &format!("vqvae/reseed/{epoch}"));
    let vol_idx = rng.random_range(0..train_vols.len());
    let z = {
        let mut worker = model.clone();
        worker.encode(&train_vols[vol_idx])?
    };
    let s = z.shape().to_vec();
    let positions = s[1] * s[2] * s[3];
    let zs = z.as_slice().unwrap();
    let embed = model.cfg.embed_dim;
    let cb = model.codebook.value.as_slice_mut().unwrap();
    for k in dead {
        let pos = rng.random_range(0..positions);
        for c in 0..embed {
            let jitter: f64 = rng.sample(rand_distr::StandardNormal);
            cb[k * embed + c] = zs[c * positions + pos] + (jitter * 0.01) as f32;
        }
    }
    Ok(())
}



#[cfg(test)]
mod bench_l3 {
    use super::*;

    #[test]
    #[ignore]
    fn timing_probe_l3() {
        let cfg = VqConfig {
            levels: 3,
            channels: vec![8, 16, 32],
            embed_dim: 8,
            codebook_size: 64,
            commitment_beta: 0.25,
        };
        let mut model = VqVae::<f32>::new(cfg, 1).unwrap();
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 32, 32, 32]), |ix| {
            ((ix[1] * 7 + ix[2] * 3 + ix[3]) % 11) as f32 / 11.0
        });
        let n = 10;
        let t0 = std::time::Instant::now();
        for _ in 0..n {
            let _ = train_step_sample(&mut model, &x).unwrap();
        }
        println!("l3 vqvae fwd+bwd per sample: {:?}", t0.elapsed() / n);
        let t0 = std::time::Instant::now();
        for _ in 0..n {
            let _ = model.reconstruct(&x).unwrap();
        }
        println!("l3 vqvae fwd only: {:?}", t0.elapsed() / n);
        let t0 = std::time::Instant::now();
        for _ in 0..n {
            let _ = model.decode(&ArrayD::zeros(IxDyn(&[8, 4, 4, 4]))).unwrap();
        }
        println!("l3 vqvae decode only: {:?}", t0.elapsed() / n);
    }
}
