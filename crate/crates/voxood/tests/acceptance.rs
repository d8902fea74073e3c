//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values. The end-to-end desk benchmark is built once and
//! shared by the criteria that need trained models.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};
use voxood::config::RunConfig;
use voxood::corrupt::{chunk_slab, ChunkLocation};
use voxood::diffusion::{
    forward_noise, plms_reconstruct, NoiseSchedule, SamplerConfig, SamplerKind, ScheduleParams,
    Unet, UnetConfig,
};
use voxood::manifest::DatasetManifest;
use voxood::nn::{
    grad_check, grad_check_fragment, Conv3d, GroupNorm, Linear, Param, ParamSet, ResBlock3d,
    SelfAttention3d, Sigmoid, Silu, Upsample2x,
};
use voxood::pipeline::{cmd_pipeline, Layout};
use voxood::scoring::load_reports;
use voxood::seeding::{hash_file, rng_for};
use voxood::stats::{auc, delong_test, delong_variance, LabeledScores};
use voxood::volume::load_volume;
use voxood::vqvae::quantize;

fn random_tensor(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = rng_for(seed, "acceptance/random");
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient integrity
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_integrity() {
    let started = Instant::now();
    let mut rng = rng_for(1, "acceptance/c1");
    let mut worst_linear = 0.0f64;
    let mut worst_nonlinear = 0.0f64;

    // Linear layers: exact gradients, tolerance 1e-6.
    for (k, stride, pad, shape) in
        [(3usize, 1usize, 1usize, [2usize, 5, 5, 5]), (3, 2, 1, [2, 6, 6, 6]), (1, 1, 0, [3, 4, 4, 4])]
    {
        let conv = Conv3d::<f64>::new("c", shape[0], 4, k, stride, pad, false, &mut rng).unwrap();
        let r = grad_check_fragment(
            conv,
            random_tensor(&shape, k as u64),
            |l, x| l.forward(x).unwrap(),
            |l, dy| l.backward(dy),
            48,
        );
        assert!(r.passes(1e-6), "conv k={k} s={stride}: rel err {}", r.max_rel_err);
        worst_linear = worst_linear.max(r.max_rel_err);
    }
    {
        struct Lin(Linear<f64>);
        impl ParamSet<f64> for Lin {
            fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<f64>>) {
                self.0.collect_params(out);
            }
            fn collect_params_ref<'a>(&'a self, out: &mut Vec<&'a Param<f64>>) {
                self.0.collect_params_ref(out);
            }
        }
        let lin = Lin(Linear::new("lin", 6, 5, &mut rng));
        let r = grad_check_fragment(
            lin,
            random_tensor(&[6], 31),
            |l, x| {
                let x1 = ndarray::Array1::from_iter(x.iter().copied());
                l.0.forward(&x1).unwrap().into_dyn()
            },
            |l, dy| {
                let d1 = ndarray::Array1::from_iter(dy.iter().copied());
                l.0.backward(&d1).into_dyn()
            },
            64,
        );
        assert!(r.passes(1e-6), "linear: rel err {}", r.max_rel_err);
        worst_linear = worst_linear.max(r.max_rel_err);
    }
    {
        struct Up(Upsample2x);
        impl ParamSet<f64> for Up {
            fn collect_params<'a>(&'a mut self, _out: &mut Vec<&'a mut Param<f64>>) {}
            fn collect_params_ref<'a>(&'a self, _out: &mut Vec<&'a Param<f64>>) {}
        }
        let x = random_tensor(&[2, 3, 3, 3], 32);
        let shape = x.shape().to_vec();
        let r = grad_check_fragment(
            Up(Upsample2x),
            x,
            |l, x| l.0.forward(x).unwrap(),
            move |l, dy| l.0.backward(dy, &shape),
            64,
        );
        assert!(r.passes(1e-6), "upsample: rel err {}", r.max_rel_err);
        worst_linear = worst_linear.max(r.max_rel_err);
    }

    // Nonlinear layers and composite blocks: tolerance 1e-3.
    {
        let gn = GroupNorm::<f64>::new("g", 8, 4).unwrap();
        let r = grad_check_fragment(
            gn,
            random_tensor(&[8, 3, 3, 3], 33),
            |l, x| l.forward(x).unwrap(),
            |l, dy| l.backward(dy),
            48,
        );
        assert!(r.passes(1e-3), "group norm: rel err {}", r.max_rel_err);
        worst_nonlinear = worst_nonlinear.max(r.max_rel_err);
    }
    {
        let r = grad_check_fragment(
            Silu::<f64>::new(),
            random_tensor(&[40], 34),
            |l, x| l.forward(x),
            |l, dy| l.backward(dy),
            64,
        );
        assert!(r.passes(1e-3), "silu: rel err {}", r.max_rel_err);
        worst_nonlinear = worst_nonlinear.max(r.max_rel_err);
        let r = grad_check_fragment(
            Sigmoid::<f64>::new(),
            random_tensor(&[40], 35),
            |l, x| l.forward(x),
            |l, dy| l.backward(dy),
            64,
        );
        assert!(r.passes(1e-3), "sigmoid: rel err {}", r.max_rel_err);
        worst_nonlinear = worst_nonlinear.max(r.max_rel_err);
    }
    {
        let mut attn = SelfAttention3d::<f64>::new("a", 4, 512, &mut rng).unwrap();
        for p in attn.params_mut() {
            if p.name == "a.wo" {
                for v in p.value.iter_mut() {
                    *v = rng.random_range(-0.4..0.4);
                }
            }
        }
        let r = grad_check_fragment(
            attn,
            random_tensor(&[4, 2, 2, 2], 36),
            |l, x| l.forward(x).unwrap(),
            |l, dy| l.backward(dy),
            48,
        );
        assert!(r.passes(1e-3), "attention: rel err {}", r.max_rel_err);
        worst_nonlinear = worst_nonlinear.max(r.max_rel_err);
    }
    {
        // Residual block with time conditioning (composite).
        struct CondBlock {
            block: ResBlock3d<f64>,
            temb: Param<f64>,
            x: ArrayD<f64>,
        }
        impl ParamSet<f64> for CondBlock {
            fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<f64>>) {
                self.block.collect_params(out);
                out.push(&mut self.temb);
            }
            fn collect_params_ref<'a>(&'a self, out: &mut Vec<&'a Param<f64>>) {
                self.block.collect_params_ref(out);
                out.push(&self.temb);
            }
        }
        let mut model = CondBlock {
            block: ResBlock3d::new("r", 4, 8, Some(6), &mut rng).unwrap(),
            temb: Param::new("temb", random_tensor(&[6], 37)),
            x: random_tensor(&[4, 3, 3, 3], 38),
        };
        let r = grad_check(
            &mut model,
            |m, with_grad| {
                if with_grad {
                    m.zero_grads();
                }
                let temb = ndarray::Array1::from_iter(m.temb.value.iter().copied());
                let x = m.x.clone();
                let y = m.block.forward(&x, Some(&temb)).unwrap();
                let loss: f64 = y.iter().enumerate().map(|(i, v)| ((i as f64) * 0.31).sin() * v).sum();
                if with_grad {
                    let mut dy = ArrayD::zeros(y.raw_dim());
                    for (i, v) in dy.iter_mut().enumerate() {
                        *v = ((i as f64) * 0.31).sin();
                    }
                    let (_, dtemb) = m.block.backward(&dy);
                    for (g, d) in m.temb.grad.iter_mut().zip(dtemb.unwrap().iter()) {
                        *g += d;
                    }
                }
                loss
            },
            32,
        );
        assert!(r.passes(1e-3), "res block: rel err {}", r.max_rel_err);
        worst_nonlinear = worst_nonlinear.max(r.max_rel_err);
    }
    {
        // Full (tiny) UNet as the deepest composite.
        let cfg = UnetConfig { in_channels: 3, channels: vec![4, 8], attention_cap: 512 };
        let mut unet = Unet::<f64>::new(cfg, 9).unwrap();
        for p in unet.params_mut() {
            if p.name == "out.conv.weight" || p.name == "deep.attn.wo" {
                for v in p.value.iter_mut() {
                    *v = rng.random_range(-0.2..0.2);
                }
            }
        }
        let z = random_tensor(&[3, 4, 4, 4], 39);
        let r = grad_check(
            &mut unet,
            |m, with_grad| {
                if with_grad {
                    m.zero_grads();
                }
                let y = m.forward(&z, 421).unwrap();
                let loss: f64 =
                    y.iter().enumerate().map(|(i, v)| ((i as f64) * 0.41).cos() * v).sum();
                if with_grad {
                    let mut dy = ArrayD::zeros(y.raw_dim());
                    for (i, v) in dy.iter_mut().enumerate() {
                        *v = ((i as f64) * 0.41).cos();
                    }
                    let _ = m.backward(&dy);
                }
                loss
            },
            4,
        );
        assert!(r.passes(1e-3), "unet: rel err {} at {}", r.max_rel_err, r.worst_param);
        worst_nonlinear = worst_nonlinear.max(r.max_rel_err);
    }

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(120), "criterion 1 took {elapsed:?}");
    println!(
        "criterion 1 PASS: gradient integrity (linear worst {worst_linear:.2e} < 1e-6, \
         nonlinear worst {worst_nonlinear:.2e} < 1e-3, {elapsed:?})"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: forward-process statistics
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_forward_process_statistics() {
    let started = Instant::now();
    let schedule = NoiseSchedule::scaled_linear(ScheduleParams::default()).unwrap();

    let mut prev = 1.0;
    for t in 1..=1000 {
        let ab = schedule.alpha_bar(t);
        assert!(ab < prev, "alpha_bar not strictly decreasing at t={t}");
        prev = ab;
    }
    assert!(schedule.alpha_bar(1000) < 0.01);

    let mut rng = rng_for(2, "acceptance/c2");
    let dims = 8usize;
    let z0 = ArrayD::from_shape_fn(IxDyn(&[dims]), |_| rng.random_range(0.5f64..1.5));
    let n = 10_000usize;
    let mut worst_mean_rel = 0.0f64;
    let mut worst_var_rel = 0.0f64;
    for t in [1usize, 250, 500, 750, 1000] {
        let ab = schedule.alpha_bar(t);
        let expect_mean = ab.sqrt() * z0.iter().sum::<f64>() / dims as f64;
        let expect_var = 1.0 - ab;
        let mut sum = 0.0;
        let mut dev_sumsq = 0.0;
        for _ in 0..n {
            let eps = ArrayD::from_shape_fn(IxDyn(&[dims]), |_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let zt = forward_noise(&z0, t, &eps, &schedule).unwrap();
            for (i, v) in zt.iter().enumerate() {
                sum += v;
                let dev = v - ab.sqrt() * z0[[i]];
                dev_sumsq += dev * dev;
            }
        }
        let samples = (n * dims) as f64;
        let mean = sum / samples;
        let var = dev_sumsq / samples;
        // 1% of the expected mean, floored at Monte-Carlo precision
        // (3.5 standard errors of the pooled mean).
        let se = (expect_var / samples).sqrt();
        let mean_tol = (0.01 * expect_mean.abs()).max(3.5 * se);
        assert!(
            (mean - expect_mean).abs() <= mean_tol,
            "t={t}: mean {mean} vs {expect_mean} (tol {mean_tol})"
        );
        assert!(
            (var - expect_var).abs() <= 0.02 * expect_var,
            "t={t}: var {var} vs {expect_var}"
        );
        worst_mean_rel = worst_mean_rel.max((mean - expect_mean).abs() / mean_tol);
        worst_var_rel = worst_var_rel.max((var - expect_var).abs() / (0.02 * expect_var));
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "criterion 2 took {elapsed:?}");
    println!(
        "criterion 2 PASS: forward-process statistics (worst mean margin {:.0}%, worst var \
         margin {:.0}%, alpha_bar(T) = {:.2e}, {elapsed:?})",
        worst_mean_rel * 100.0,
        worst_var_rel * 100.0,
        schedule.alpha_bar(1000)
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: sampler consistency
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_sampler_consistency() {
    let schedule = NoiseSchedule::scaled_linear(ScheduleParams::default()).unwrap();

    // Deterministic transfer with oracle noise inverts the forward process.
    let z0 = random_tensor(&[16], 3);
    let mut worst_rel = 0.0f64;
    for t in [1usize, 137, 500, 1000] {
        let eps = random_tensor(&[16], 300 + t as u64);
        let zt = forward_noise(&z0, t, &eps, &schedule).unwrap();
        let back = voxood::diffusion::ddim_transfer(&zt, &eps, t, 0, &schedule).unwrap();
        for (a, b) in z0.iter().zip(back.iter()) {
            let rel = (a - b).abs() / a.abs().max(1e-3);
            assert!(rel < 1e-5, "t={t}: {a} vs {b}");
            worst_rel = worst_rel.max(rel);
        }
    }

    // Order-1 multistep equals the plain first-order chain exactly.
    let cfg = UnetConfig { in_channels: 2, channels: vec![4], attention_cap: 512 };
    let mut unet = Unet::<f64>::new(cfg, 5).unwrap();
    let mut rng = rng_for(3, "acceptance/c3");
    for p in unet.params_mut() {
        if p.name == "out.conv.weight" {
            for v in p.value.iter_mut() {
                *v = rng.random_range(-0.05..0.05);
            }
        }
    }
    let z = random_tensor(&[2, 4, 4, 4], 301);
    let sampler = SamplerConfig { kind: SamplerKind::Plms, steps: 25, order: 1 };
    let out = plms_reconstruct(&mut unet, &z, 500, &schedule, &sampler).unwrap();
    let grid = sampler.grid(&schedule);
    let mut targets: Vec<usize> = grid.into_iter().filter(|&g| g < 500).rev().collect();
    if *targets.last().unwrap() != 0 {
        targets.push(0);
    }
    let mut zc = z.clone();
    let mut t_cur = 500;
    for &g in &targets {
        let eps = unet.forward(&zc, t_cur).unwrap();
        zc = voxood::diffusion::ddim_transfer(&zc, &eps, t_cur, g, &schedule).unwrap();
        t_cur = g;
    }
    assert_eq!(out.z0_hat, zc, "order-1 multistep must equal the plain chain exactly");

    // Trained-model grid consistency: 100-step vs 1000-step reconstructions.
    let e2e = e2e_artifacts();
    let mse = e2e.plms_grid_mse;
    assert!(mse < 1e-2, "100-step vs 1000-step PLMS latent MSE {mse}");
    println!(
        "criterion 3 PASS: sampler consistency (oracle inversion worst rel {worst_rel:.2e}, \
         order-1 exact, 100 vs 1000 step latent MSE {mse:.2e})"
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: quantization oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_quantization_oracle() {
    let started = Instant::now();
    let mut rng = rng_for(4, "acceptance/c4");
    let k = 64usize;
    let n = 8usize;
    let codebook =
        ArrayD::from_shape_simple_fn(IxDyn(&[k, n]), || rng.random_range(-1.0f32..1.0));
    let z = ArrayD::from_shape_simple_fn(IxDyn(&[n, 10, 10, 10]), || {
        rng.random_range(-1.0f32..1.0)
    });
    let q = quantize(&z, &codebook).unwrap();
    let positions = 1000usize;
    let zs = z.as_slice().unwrap();
    for pos in 0..positions {
        let mut best = (f64::INFINITY, 0usize);
        for ki in 0..k {
            let mut dist = 0.0f64;
            for c in 0..n {
                let diff = zs[c * positions + pos] as f64 - codebook[[ki, c]] as f64;
                dist += diff * diff;
            }
            if dist < best.0 {
                best = (dist, ki);
            }
        }
        assert_eq!(q.quantized.indices[pos] as usize, best.1, "position {pos}");
    }
    let q2 = quantize(&q.dequantized, &codebook).unwrap();
    assert_eq!(q2.dequantized, q.dequantized, "quantization must be idempotent");
    assert_eq!(q2.vq_loss, 0.0);
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(30), "criterion 4 took {elapsed:?}");
    println!(
        "criterion 4 PASS: quantization oracle (1000 positions, K = 64, idempotent, {elapsed:?})"
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: AUC / DeLong oracles
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_auc_delong_oracles() {
    let started = Instant::now();

    // Exact pair counting on every random dataset of size <= 20.
    let mut rng = rng_for(5, "acceptance/c5");
    let mut checked = 0;
    for trial in 0..300 {
        let n = rng.random_range(2..=20usize);
        let scores: Vec<f64> =
            (0..n).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
        let npos = labels.iter().filter(|&&l| l == 1).count();
        if npos == 0 || npos == n {
            continue;
        }
        let ls = LabeledScores::new(scores.clone(), labels.clone()).unwrap();
        let mut total = 0.0;
        let mut pairs = 0.0;
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    total += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                    pairs += 1.0;
                }
            }
        }
        assert_eq!(auc(&ls).unwrap(), total / pairs, "trial {trial}");
        checked += 1;
    }
    assert!(checked > 200);

    // DeLong variance vs a 1000-resample stratified bootstrap on 50+50.
    let mut scores = Vec::with_capacity(100);
    let mut labels = Vec::with_capacity(100);
    for i in 0..100 {
        let l = (i < 50) as u8;
        let base = if l == 1 { 0.8 } else { 0.0 };
        scores.push(base + rng.sample::<f64, _>(rand_distr::StandardNormal));
        labels.push(l);
    }
    let ls = LabeledScores::new(scores.clone(), labels.clone()).unwrap();
    let dl_var = delong_variance(&ls).unwrap();
    let pos: Vec<f64> = (0..100).filter(|&i| labels[i] == 1).map(|i| scores[i]).collect();
    let neg: Vec<f64> = (0..100).filter(|&i| labels[i] == 0).map(|i| scores[i]).collect();
    let mut aucs = Vec::with_capacity(1000);
    for _ in 0..1000 {
        let rp: Vec<f64> = (0..50).map(|_| pos[rng.random_range(0..50)]).collect();
        let rn: Vec<f64> = (0..50).map(|_| neg[rng.random_range(0..50)]).collect();
        let mut s = rp;
        let mut l = vec![1u8; 50];
        s.extend(rn);
        l.extend(vec![0u8; 50]);
        aucs.push(auc(&LabeledScores::new(s, l).unwrap()).unwrap());
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    let boot_var =
        aucs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (aucs.len() - 1) as f64;
    let rel = (dl_var - boot_var).abs() / boot_var;
    assert!(rel < 0.25, "delong {dl_var:.3e} vs bootstrap {boot_var:.3e} (rel {rel:.3})");

    // Self-comparison: zero difference, degenerate variance flagged.
    let cmp = delong_test(&ls, &ls).unwrap();
    assert_eq!(cmp.delta(), 0.0);
    assert!(cmp.p_value.is_none());

    // Null calibration over 200 seeded trials.
    let mut fp = 0;
    for trial in 0..200u64 {
        let mut trng = rng_for(trial, "acceptance/c5/null");
        let lbl: Vec<u8> = (0..100).map(|i| (i < 50) as u8).collect();
        let a = LabeledScores::new(
            (0..100).map(|_| trng.random_range(0.0..1.0)).collect(),
            lbl.clone(),
        )
        .unwrap();
        let b = LabeledScores::new(
            (0..100).map(|_| trng.random_range(0.0..1.0)).collect(),
            lbl,
        )
        .unwrap();
        if let Some(p) = delong_test(&a, &b).unwrap().p_value {
            if p < 0.05 {
                fp += 1;
            }
        }
    }
    let rate = fp as f64 / 200.0;
    assert!((0.02..=0.09).contains(&rate), "false positive rate {rate}");

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(300), "criterion 5 took {elapsed:?}");
    println!(
        "criterion 5 PASS: AUC/DeLong oracles ({checked} exact datasets, bootstrap rel \
         {rel:.3} < 0.25, null FPR {rate:.3} in [0.02, 0.09], {elapsed:?})"
    );
}

// ---------------------------------------------------------------------------
// Shared end-to-end artifacts (criteria 3, 6, 7)
// ---------------------------------------------------------------------------

struct E2eArtifacts {
    layout: Layout,
    auc_by_class: BTreeMap<String, f64>,
    train_wall: Duration,
    plms_grid_mse: f64,
    chunk_ok_fraction: f64,
    map_dims_ok: bool,
    vq_best_val: f64,
    codebook_used: usize,
    // Keep the artifacts alive for the duration of the test binary.
    _dir: tempfile::TempDir,
}

static E2E: OnceLock<E2eArtifacts> = OnceLock::new();

fn e2e_artifacts() -> &'static E2eArtifacts {
    E2E.get_or_init(build_e2e)
}

fn e2e_config(root: PathBuf) -> RunConfig {
    let mut cfg = RunConfig::preset("desk").unwrap();
    cfg.out_root = root;
    cfg.seed = 42;
    cfg = cfg.with_seed_applied();
    cfg.validate().unwrap();
    cfg
}

fn build_e2e() -> E2eArtifacts {
    let dir = tempfile::tempdir().expect("temp dir");
    let cfg = e2e_config(dir.path().join("run"));
    let layout = Layout::new(&cfg.out_root);

    // Criterion 6 sizes: 200 train / 30 val / 20 ID test, 3 far families,
    // the 14-spec corruption suite on the ID test set.
    assert_eq!(cfg.data.id_count, 250);
    assert_eq!(cfg.data.split, [0.8, 0.12, 0.08]);

    let train_started = Instant::now();
    let synth = voxood::pipeline::cmd_synth_data(&cfg).expect("synth-data");
    assert_eq!(synth.train.len(), 200);
    assert_eq!(synth.val.len(), 30);
    assert_eq!(synth.test.len(), 20);
    voxood::pipeline::cmd_corrupt(&cfg, &[]).expect("corrupt");
    let vq = voxood::pipeline::cmd_train_vqvae(&cfg).expect("train-vqvae");
    let _ddpm = voxood::pipeline::cmd_train_ddpm(&cfg).expect("train-ddpm");
    let train_wall = train_started.elapsed();

    voxood::pipeline::cmd_fit_stats(&cfg).expect("fit-stats");
    voxood::pipeline::cmd_score(&cfg, &layout.id_manifest("test"), "id_test", false)
        .expect("score id");
    voxood::pipeline::cmd_score(&cfg, &layout.near_manifest(), "near", true).expect("score near");
    let mut report_paths = vec![layout.report("id_test"), layout.report("near")];
    for (family, _) in &synth.far {
        let name = format!("far_{}", family.id());
        voxood::pipeline::cmd_score(&cfg, &layout.far_manifest(family.id()), &name, false)
            .expect("score far");
        report_paths.push(layout.report(&name));
    }
    let table = voxood::pipeline::cmd_evaluate(&cfg, &[("ldm".to_string(), report_paths)])
        .expect("evaluate");
    let auc_by_class: BTreeMap<String, f64> =
        table.cells.iter().map(|c| (c.ood_class.clone(), c.auc)).collect();

    // Criterion 3 material: 100-step vs 1000-step PLMS on validation latents.
    let (model, _, _) = voxood::pipeline::load_scoring_model(&layout).expect("models");
    let val = DatasetManifest::load(layout.id_manifest("val")).expect("val manifest");
    let mut grid_mse_total = 0.0;
    let mut grid_mse_count = 0usize;
    for entry in val.entries.iter().take(3) {
        let v = load_volume(val.resolve(entry)).expect("volume");
        let x = voxood::vqvae::volume_to_tensor::<f32>(&v);
        let mut vq_model = model.vq.clone();
        let z = vq_model.encode(&x).expect("encode");
        let q = quantize(&z, &model.vq.codebook.value).expect("quantize");
        let z0 = model.latent_stats.standardize(&q.dequantized);
        let mut rng = rng_for(cfg.seed, &format!("acceptance/c3/{}", entry.id()));
        let eps = ArrayD::<f32>::from_shape_simple_fn(IxDyn(z0.shape()), || {
            rng.sample::<f64, _>(rand_distr::StandardNormal) as f32
        });
        let t_start = 500;
        let z_t = forward_noise(&z0, t_start, &eps, &model.schedule).expect("noise");
        let coarse = {
            let mut unet = model.unet.clone();
            let sampler = SamplerConfig { kind: SamplerKind::Plms, steps: 100, order: 4 };
            plms_reconstruct(&mut unet, &z_t, t_start, &model.schedule, &sampler)
                .expect("plms 100")
                .z0_hat
        };
        let fine = {
            let mut unet = model.unet.clone();
            let sampler = SamplerConfig { kind: SamplerKind::Plms, steps: 1000, order: 4 };
            plms_reconstruct(&mut unet, &z_t, t_start, &model.schedule, &sampler)
                .expect("plms 1000")
                .z0_hat
        };
        let mse: f64 = coarse
            .iter()
            .zip(fine.iter())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / coarse.len() as f64;
        grid_mse_total += mse;
        grid_mse_count += 1;
    }
    let plms_grid_mse = grid_mse_total / grid_mse_count as f64;

    // Criterion 7 material: anomaly-map slab statistics on the chunk-removal
    // corruption maps written during near-OOD scoring.
    let near = DatasetManifest::load(layout.near_manifest()).expect("near manifest");
    let near_reports = load_reports(layout.report("near")).expect("near reports");
    let mut chunk_total = 0usize;
    let mut chunk_ok = 0usize;
    let mut map_dims_ok = true;
    for report in &near_reports.reports {
        let Some(class) = report.label.ood_class() else { continue };
        let location = match class {
            "chunk_remove:top" => ChunkLocation::Top,
            "chunk_remove:middle" => ChunkLocation::Middle,
            _ => continue,
        };
        let map_path = report.map_path.as_ref().expect("map written for near scoring");
        let map = load_volume(map_path).expect("anomaly map");
        let entry = near
            .entries
            .iter()
            .find(|e| e.id() == report.id)
            .expect("entry for report");
        let corrupted = load_volume(near.resolve(entry)).expect("corrupted volume");
        if map.dims() != corrupted.dims() {
            map_dims_ok = false;
        }
        let (h, w, d) = map.dims();
        let (start, end) = chunk_slab(h, location);
        let mut inside = 0.0f64;
        let mut outside = 0.0f64;
        let mut n_in = 0usize;
        let mut n_out = 0usize;
        for hi in 0..h {
            for wi in 0..w {
                for di in 0..d {
                    let v = map.get(hi, wi, di) as f64;
                    if (start..end).contains(&hi) {
                        inside += v;
                        n_in += 1;
                    } else {
                        outside += v;
                        n_out += 1;
                    }
                }
            }
        }
        inside /= n_in as f64;
        outside /= n_out as f64;
        chunk_total += 1;
        if inside >= 2.0 * outside && inside > 0.0 {
            chunk_ok += 1;
        }
    }
    assert_eq!(chunk_total, 40, "expected 2 chunk specs x 20 test volumes");
    let chunk_ok_fraction = chunk_ok as f64 / chunk_total as f64;

    E2eArtifacts {
        layout,
        auc_by_class,
        train_wall,
        plms_grid_mse,
        chunk_ok_fraction,
        map_dims_ok,
        vq_best_val: vq.meta.best_val,
        codebook_used: ddpm_codebook_usage(&vq),
        _dir: dir,
    }
}

fn ddpm_codebook_usage(vq: &voxood::vqvae::VqTrainOutcome) -> usize {
    vq.meta.codebook_used_last_epoch
}

// ---------------------------------------------------------------------------
// Criterion 6: end-to-end desk benchmark
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_end_to_end_desk_benchmark() {
    let e2e = e2e_artifacts();
    assert!(
        e2e.train_wall < Duration::from_secs(30 * 60),
        "training budget exceeded: {:?}",
        e2e.train_wall
    );
    let get = |class: &str| -> f64 {
        *e2e.auc_by_class
            .get(class)
            .unwrap_or_else(|| panic!("class '{class}' missing from the table"))
    };
    for family in ["cuboid_field", "sphere_grid", "stripe_texture"] {
        let a = get(&format!("far:{family}"));
        assert!(a >= 0.95, "far-OOD {family} AUC {a}");
    }
    let noise2 = get("gaussian_noise:0.2");
    assert!(noise2 >= 0.90, "noise sigma=0.2 AUC {noise2}");
    let scale10 = get("intensity_scale:0.1");
    assert!(scale10 >= 0.90, "intensity scaling 10% AUC {scale10}");
    for bg in ["background_value:0.3", "background_value:0.6", "background_value:1"] {
        let a = get(bg);
        assert!(a >= 0.95, "{bg} AUC {a}");
    }
    // Mild noise is permitted to sit near chance; report it for the record.
    let noise_mild = get("gaussian_noise:0.01");

    // First-stage sanity that the scaled benchmark relies on.
    assert!(e2e.vq_best_val < 3e-3, "vq val recon mse {:.3e}", e2e.vq_best_val);
    assert!(e2e.codebook_used >= 32, "codebook usage {}", e2e.codebook_used);

    println!(
        "criterion 6 PASS: desk benchmark (train {:?} < 30 min; far {:.3}/{:.3}/{:.3}; noise0.2 \
         {noise2:.3}; scale10% {scale10:.3}; bg {:.3}/{:.3}/{:.3}; mild noise {noise_mild:.3} \
         unconstrained; vq val mse {:.2e}; codebook {}/64)",
        e2e.train_wall,
        e2e.auc_by_class["far:cuboid_field"],
        e2e.auc_by_class["far:sphere_grid"],
        e2e.auc_by_class["far:stripe_texture"],
        e2e.auc_by_class["background_value:0.3"],
        e2e.auc_by_class["background_value:0.6"],
        e2e.auc_by_class["background_value:1"],
        e2e.vq_best_val,
        e2e.codebook_used,
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: anomaly-map localization
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_anomaly_map_localization() {
    let e2e = e2e_artifacts();
    assert!(e2e.map_dims_ok, "anomaly maps must match input resolution");
    assert!(
        e2e.chunk_ok_fraction >= 0.8,
        "slab localization holds for only {:.0}% of chunk-removal volumes",
        e2e.chunk_ok_fraction * 100.0
    );
    println!(
        "criterion 7 PASS: anomaly-map localization ({:.0}% of chunk volumes >= 2x slab \
         contrast, native resolution)",
        e2e.chunk_ok_fraction * 100.0
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: reproducibility
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_reproducibility() {
    // A reduced but complete pipeline, run twice with the same config and
    // seed; every dataset manifest, score report, and table must be
    // byte-identical (trained checkpoints are compared too).
    let dir = tempfile::tempdir().unwrap();
    let small = |root: PathBuf| -> RunConfig {
        let mut cfg = RunConfig::parse(
            r#"
preset = "desk"
seed = 1234

[data]
id_count = 20
split = [0.6, 0.2, 0.2]
far_count = 2

[vqvae_train]
max_epochs = 2
batch_size = 4

[ddpm_train]
max_epochs = 2

[scoring]
num_recon_t = 10

[scoring.sampler]
steps = 20
"#,
        )
        .unwrap();
        cfg.out_root = root;
        cfg.with_seed_applied()
    };
    let cfg_a = small(dir.path().join("a"));
    let cfg_b = small(dir.path().join("b"));
    cmd_pipeline(&cfg_a).expect("pipeline run A");
    cmd_pipeline(&cfg_b).expect("pipeline run B");

    let rel_files = |root: &PathBuf| -> Vec<PathBuf> {
        let mut found = Vec::new();
        let mut stack = vec![root.clone()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let rel = path.strip_prefix(root).unwrap().to_path_buf();
                    let name = rel.to_string_lossy();
                    let deterministic = name.ends_with(".manifest")
                        || name.ends_with(".report")
                        || name.ends_with(".vol")
                        || name.ends_with(".lat")
                        || name.ends_with(".nta")
                        || name.starts_with("eval/");
                    // Run manifests record wall time and are informational.
                    if deterministic && !name.starts_with("runmeta/") {
                        found.push(rel);
                    }
                }
            }
        }
        found.sort();
        found
    };
    let files_a = rel_files(&cfg_a.out_root);
    let files_b = rel_files(&cfg_b.out_root);
    assert_eq!(files_a, files_b, "artifact trees differ");
    assert!(files_a.iter().any(|f| f.to_string_lossy().ends_with(".report")));
    assert!(files_a.iter().any(|f| f.to_string_lossy().starts_with("eval/")));
    let mut compared = 0usize;
    for rel in &files_a {
        let ha = hash_file(cfg_a.out_root.join(rel)).unwrap();
        let hb = hash_file(cfg_b.out_root.join(rel)).unwrap();
        assert_eq!(ha, hb, "artifact {} differs between reruns", rel.display());
        compared += 1;
    }
    println!(
        "criterion 8 PASS: reproducibility ({compared} artifacts byte-identical across reruns)"
    );
}

// ---------------------------------------------------------------------------
// Post-training measurements promised by the module contracts
// ---------------------------------------------------------------------------

#[test]
fn trained_model_contracts() {
    let e2e = e2e_artifacts();
    let layout = &e2e.layout;
    let (model, vq_hash, ddpm_hash) = voxood::pipeline::load_scoring_model(layout).unwrap();
    let cfg = e2e_config(layout.root.clone());
    let val = DatasetManifest::load(layout.id_manifest("val")).unwrap();

    // Reconstruction error grows with the noise level on average: the mean
    // MSE over the top half of t values exceeds the bottom half.
    let schedule = &model.schedule;
    let t_values = cfg.scoring.t_values(schedule);
    let mut mse_by_t = vec![0.0f64; t_values.len()];
    let sample: Vec<_> = val.entries.iter().take(6).collect();
    for entry in &sample {
        let v = load_volume(val.resolve(entry)).unwrap();
        let recons =
            voxood::scoring::reconstruct_multi_t(&model, &v, &entry.id(), &cfg.scoring, cfg.seed)
                .unwrap();
        assert_eq!(recons.len(), t_values.len());
        for (i, (_, r)) in recons.iter().enumerate() {
            mse_by_t[i] += voxood::scoring::mse(&v, r).unwrap();
        }
    }
    let half = mse_by_t.len() / 2;
    let low: f64 = mse_by_t[..half].iter().sum::<f64>() / half as f64;
    let high: f64 = mse_by_t[half..].iter().sum::<f64>() / (mse_by_t.len() - half) as f64;
    assert!(
        high > low,
        "reconstruction error should grow with noise level: low {low:.3e} vs high {high:.3e}"
    );

    // t = 0 entry equals the autoencoder round trip.
    let v0 = load_volume(val.resolve(sample[0])).unwrap();
    let recons =
        voxood::scoring::reconstruct_multi_t(&model, &v0, &sample[0].id(), &cfg.scoring, cfg.seed)
            .unwrap();
    let mut vq_model = model.vq.clone();
    let (xh, _) = vq_model.reconstruct(&voxood::vqvae::volume_to_tensor(&v0)).unwrap();
    let roundtrip = voxood::vqvae::tensor_to_volume(&xh).unwrap();
    assert_eq!(recons[0].0, 0);
    let diff: f32 = recons[0]
        .1
        .data()
        .iter()
        .zip(roundtrip.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max);
    assert!(diff < 1e-6, "t=0 reconstruction differs from autoencoder round trip by {diff}");

    // Validation scores z-scored by their own stats: columns normalize.
    let stats = voxood::scoring::ValidationStats::load(layout.stats_file()).unwrap();
    assert_eq!(stats.vqvae_hash, vq_hash);
    assert_eq!(stats.ddpm_hash, ddpm_hash);

    // ID test scores sit below heavy-corruption scores.
    let id_reports = load_reports(layout.report("id_test")).unwrap().reports;
    let near_reports = load_reports(layout.report("near")).unwrap().reports;
    let id_mean = id_reports.iter().map(|r| r.score).sum::<f64>() / id_reports.len() as f64;
    let heavy: Vec<f64> = near_reports
        .iter()
        .filter(|r| r.label.ood_class() == Some("gaussian_noise:0.2"))
        .map(|r| r.score)
        .collect();
    let heavy_mean = heavy.iter().sum::<f64>() / heavy.len() as f64;
    assert!(
        heavy_mean > id_mean,
        "heavy corruption mean score {heavy_mean:.3} vs ID {id_mean:.3}"
    );

    // Rescoring a volume reproduces the identical score (seeded noise).
    let rescored = voxood::scoring::score_volume(
        &model,
        &v0,
        &sample[0].id(),
        &cfg.scoring,
        cfg.seed,
    )
    .unwrap();
    let stats_score = voxood::scoring::ood_score(&rescored.metrics, &stats).unwrap();
    let again = voxood::scoring::score_volume(
        &model,
        &v0,
        &sample[0].id(),
        &cfg.scoring,
        cfg.seed,
    )
    .unwrap();
    assert_eq!(rescored.metrics, again.metrics, "rescoring must be bit-identical");

    // Held-out map behavior: a validation volume scored against stats fit
    // without it has a near-zero mean anomaly map.
    let held_out = &val.entries[0];
    let rest: Vec<_> = val.entries[1..].to_vec();
    let rest_manifest = {
        let m = DatasetManifest::new("val_rest", val.seed, rest).unwrap();
        m.save(layout.root.join("data/id/val_rest.manifest")).unwrap();
        DatasetManifest::load(layout.root.join("data/id/val_rest.manifest")).unwrap()
    };
    let loo_stats = voxood::scoring::fit_validation_stats(
        &model,
        &rest_manifest,
        &cfg.scoring,
        cfg.seed,
        vq_hash,
        ddpm_hash,
    )
    .unwrap();
    let held_vol = load_volume(val.resolve(held_out)).unwrap();
    let held_score =
        voxood::scoring::score_volume(&model, &held_vol, &held_out.id(), &cfg.scoring, cfg.seed)
            .unwrap();
    let map =
        voxood::scoring::anomaly_map_from_mean_mae(&held_score.mean_mae_map, &loo_stats).unwrap();
    let map_mean = map.mean();
    assert!(
        map_mean.abs() < 1.0,
        "held-out validation anomaly map mean {map_mean:.3} should be near zero"
    );
    let _ = stats_score;
    println!(
        "trained-model contracts PASS: monotone error trend ({low:.2e} -> {high:.2e}), t=0 \
         round trip, ID mean {id_mean:.2} < heavy mean {heavy_mean:.2}, held-out map mean \
         {map_mean:.3}"
    );
}
