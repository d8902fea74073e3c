//! Time-conditioned UNet predicting the forward-process noise.

use crate::error::{Error, Result};
use crate::nn::{
    default_groups, time_embedding, Conv3d, GroupNorm, Linear, Param, ParamSet, ResBlock3d,
    Scalar, SelfAttention3d, Silu, Tensor, Upsample2x, ATTENTION_POSITION_CAP,
};
use crate::seeding::rng_for;
use ndarray::{concatenate, Array1, Axis};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UnetConfig {
    /// Input/output channel count (the latent embedding dimension).
    pub in_channels: usize,
    /// Channel width per level; attention sits in the deepest level only.
    pub channels: Vec<usize>,
    /// Cap on flattened positions for the attention layer.
    pub attention_cap: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig { in_channels: 8, channels: vec![32, 64], attention_cap: ATTENTION_POSITION_CAP }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("unet needs at least one level".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("unet input channels must be positive".into()));
        }
        Ok(())
    }

    fn emb_dim(&self) -> usize {
        4 * self.channels[0]
    }
}

/// Epsilon-prediction UNet: down path of residual blocks with strided-conv
/// downsampling, attention at the deepest level, skip-concatenated up path,
/// zero-initialized output projection.
#[derive(Debug, Clone)]
pub struct Unet<T: Scalar> {
    pub cfg: UnetConfig,
    t_lin1: Linear<T>,
    t_act: Silu<T>,
    t_lin2: Linear<T>,
    in_conv: Conv3d<T>,
    down_res: Vec<ResBlock3d<T>>,
    down_conv: Vec<Conv3d<T>>,
    attn: SelfAttention3d<T>,
    up_conv: Vec<Conv3d<T>>,
    up_sample: Upsample2x,
    up_res: Vec<ResBlock3d<T>>,
    out_norm: GroupNorm<T>,
    out_act: Silu<T>,
    out_conv: Conv3d<T>,
    // forward caches
    skip_shapes: Vec<Vec<usize>>,
    up_in_shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Unet<T> {
    pub fn new(cfg: UnetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, "unet/init");
        let levels = cfg.channels.len();
        let emb = cfg.emb_dim();
        let c0 = cfg.channels[0];
        let t_lin1 = Linear::new("temb.lin1", c0, emb, &mut rng);
        let t_lin2 = Linear::new("temb.lin2", emb, emb, &mut rng);
        let in_conv = Conv3d::new("in_conv", cfg.in_channels, c0, 3, 1, 1, false, &mut rng)?;
        let mut down_res = Vec::with_capacity(levels);
        let mut down_conv = Vec::with_capacity(levels.saturating_sub(1));
        for (i, &ch) in cfg.channels.iter().enumerate() {
            down_res.push(ResBlock3d::new(&format!("down{i}.res"), ch, ch, Some(emb), &mut rng)?);
            if i + 1 < levels {
                down_conv.push(Conv3d::new(
                    &format!("down{i}.conv"),
                    ch,
                    cfg.channels[i + 1],
                    3,
                    2,
                    1,
                    false,
                    &mut rng,
                )?);
            }
        }
        let deepest = *cfg.channels.last().unwrap();
        let attn = SelfAttention3d::new("deep.attn", deepest, cfg.attention_cap, &mut rng)?;
        let mut up_conv = Vec::new();
        let mut up_res = Vec::new();
        for i in (0..levels.saturating_sub(1)).rev() {
            up_conv.push(Conv3d::new(
                &format!("up{i}.conv"),
                cfg.channels[i + 1],
                cfg.channels[i],
                3,
                1,
                1,
                false,
                &mut rng,
            )?);
            up_res.push(ResBlock3d::new(
                &format!("up{i}.res"),
                2 * cfg.channels[i],
                cfg.channels[i],
                Some(emb),
                &mut rng,
            )?);
        }
        let out_norm = GroupNorm::new("out.norm", c0, default_groups(c0))?;
        let out_conv = Conv3d::new("out.conv", c0, cfg.in_channels, 3, 1, 1, true, &mut rng)?;
        Ok(Unet {
            cfg,
            t_lin1,
            t_act: Silu::new(),
            t_lin2,
            in_conv,
            down_res,
            down_conv,
            attn,
            up_conv,
            up_sample: Upsample2x,
            up_res,
            out_norm,
            out_act: Silu::new(),
            out_conv,
            skip_shapes: Vec::new(),
            up_in_shapes: Vec::new(),
        })
    }

    /// Predict the noise component of `z_t` at timestep `t`.
    pub fn forward(&mut self, z: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let s = z.shape();
        if s.len() != 4 || s[0] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "unet expects [{}, h, w, d], got {s:?}",
                self.cfg.in_channels
            )));
        }
        let emb0 = time_embedding::<T>(t as f64, self.cfg.channels[0]);
        let e = self.t_lin1.forward(&emb0)?;
        let e = self.t_act.forward(&e.into_dyn());
        let e1 = Array1::from_iter(e.iter().copied());
        let temb = self.t_lin2.forward(&e1)?;

        let mut h = self.in_conv.forward(z)?;
        let levels = self.cfg.channels.len();
        let mut skips = Vec::with_capacity(levels.saturating_sub(1));
        self.skip_shapes.clear();
        for i in 0..levels {
            h = self.down_res[i].forward(&h, Some(&temb))?;
            if i + 1 < levels {
                skips.push(h.clone());
                self.skip_shapes.push(h.shape().to_vec());
                h = self.down_conv[i].forward(&h)?;
            }
        }
        h = self.attn.forward(&h)?;
        self.up_in_shapes.clear();
        for j in 0..levels.saturating_sub(1) {
            self.up_in_shapes.push(h.shape().to_vec());
            let up = self.up_sample.forward(&h)?;
            let up = self.up_conv[j].forward(&up)?;
            let skip = skips.pop().expect("skip stack");
            let cat = concatenate(Axis(0), &[up.view(), skip.view()])
                .map_err(|e| Error::ShapeMismatch(format!("skip concat failed: {e}")))?;
            h = self.up_res[j].forward(&cat.into_dyn(), Some(&temb))?;
        }
        let h = self.out_norm.forward(&h)?;
        let h = self.out_act.forward(&h);
        self.out_conv.forward(&h)
    }

    /// Backpropagate from the predicted-noise gradient; parameter gradients
    /// accumulate, the input gradient is returned.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let emb_dim = self.cfg.emb_dim();
        let mut d_temb = Array1::<T>::zeros(emb_dim);
        let d = self.out_conv.backward(dy);
        let d = self.out_act.backward(&d);
        let mut d = self.out_norm.backward(&d);

        let levels = self.cfg.channels.len();
        let n_up = levels.saturating_sub(1);
        // Up stage j targets level i = levels - 2 - j; walk them in reverse
        // of the forward order, recording each skip-connection gradient by
        // its level index.
        let mut d_skips: Vec<Option<Tensor<T>>> = vec![None; n_up];
        for j in (0..n_up).rev() {
            let i = levels - 2 - j;
            let (d_cat, dt) = self.up_res[j].backward(&d);
            if let Some(dt) = dt {
                d_temb += &dt;
            }
            let c_up = self.cfg.channels[i];
            let d_up = d_cat.slice_axis(Axis(0), ndarray::Slice::from(0..c_up)).to_owned();
            let d_skip = d_cat
                .slice_axis(Axis(0), ndarray::Slice::from(c_up..2 * c_up))
                .to_owned();
            d_skips[i] = Some(d_skip.into_dyn());
            let d_upc = self.up_conv[j].backward(&d_up.into_dyn());
            d = self.up_sample.backward(&d_upc, &self.up_in_shapes[j]);
        }

        d = self.attn.backward(&d);
        for i in (0..levels).rev() {
            if i + 1 < levels {
                d = self.down_conv[i].backward(&d);
                d += d_skips[i].as_ref().expect("skip gradient recorded");
            }
            let (dd, dt) = self.down_res[i].backward(&d);
            d = dd;
            if let Some(dt) = dt {
                d_temb += &dt;
            }
        }
        let d = self.in_conv.backward(&d);

        let d_e1 = self.t_lin2.backward(&d_temb);
        let d_e = self.t_act.backward(&d_e1.into_dyn());
        let d_e = Array1::from_iter(d_e.iter().copied());
        let _ = self.t_lin1.backward(&d_e);
        d
    }
}

impl<T: Scalar> ParamSet<T> for Unet<T> {
    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        self.t_lin1.collect_params(out);
        self.t_lin2.collect_params(out);
        self.in_conv.collect_params(out);
        for r in &mut self.down_res {
            r.collect_params(out);
        }
        for c in &mut self.down_conv {
            c.collect_params(out);
        }
        self.attn.collect_params(out);
        for c in &mut self.up_conv {
            c.collect_params(out);
        }
        for r in &mut self.up_res {
            r.collect_params(out);
        }
        self.out_norm.collect_params(out);
        self.out_conv.collect_params(out);
    }
    fn collect_params_ref<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        self.t_lin1.collect_params_ref(out);
        self.t_lin2.collect_params_ref(out);
        self.in_conv.collect_params_ref(out);
        for r in &self.down_res {
            r.collect_params_ref(out);
        }
        for c in &self.down_conv {
            c.collect_params_ref(out);
        }
        self.attn.collect_params_ref(out);
        for c in &self.up_conv {
            c.collect_params_ref(out);
        }
        for r in &self.up_res {
            r.collect_params_ref(out);
        }
        self.out_norm.collect_params_ref(out);
        self.out_conv.collect_params_ref(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn tiny_cfg() -> UnetConfig {
        UnetConfig { in_channels: 3, channels: vec![4, 8], attention_cap: 512 }
    }

    #[test]
    fn forward_preserves_shape_and_zero_init_output() {
        let mut unet = Unet::<f32>::new(tiny_cfg(), 7).unwrap();
        let z = ArrayD::from_elem(IxDyn(&[3, 8, 8, 8]), 0.3f32);
        let y = unet.forward(&z, 100).unwrap();
        assert_eq!(y.shape(), z.shape());
        // Zero-initialized output conv: prediction starts at exactly zero.
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn timestep_changes_prediction_after_training_signal() {
        let mut unet = Unet::<f32>::new(tiny_cfg(), 7).unwrap();
        // Give the output conv weights so the time pathway reaches the output.
        for p in unet.params_mut() {
            if p.name == "out.conv.weight" {
                for (i, v) in p.value.iter_mut().enumerate() {
                    *v = ((i % 13) as f32 - 6.0) * 0.03;
                }
            }
        }
        let z = ArrayD::from_elem(IxDyn(&[3, 8, 8, 8]), 0.3f32);
        let y1 = unet.forward(&z, 10).unwrap();
        let y2 = unet.forward(&z, 900).unwrap();
        let diff: f32 = y1.iter().zip(y2.iter()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-3, "time conditioning has no effect ({diff})");
    }

    #[test]
    fn unet_gradients_match_finite_differences() {
        use crate::nn::grad_check;
        let mut unet = Unet::<f64>::new(tiny_cfg(), 9).unwrap();
        // Randomize the zero-initialized projections so every path carries
        // gradient signal.
        let mut rng = rng_for(11, "unet/gradcheck");
        for p in unet.params_mut() {
            if p.name == "out.conv.weight" || p.name == "deep.attn.wo" {
                for v in p.value.iter_mut() {
                    *v = rng.random_range(-0.2..0.2);
                }
            }
        }
        let z = ArrayD::from_shape_fn(IxDyn(&[3, 4, 4, 4]), |_| rng.random_range(-1.0..1.0));
        let report = grad_check(
            &mut unet,
            |m, with_grad| {
                if with_grad {
                    m.zero_grads();
                }
                let y = m.forward(&z, 350).unwrap();
                let loss: f64 =
                    y.iter().enumerate().map(|(i, v)| ((i as f64) * 0.37).cos() * v).sum();
                if with_grad {
                    let mut dy = ArrayD::zeros(y.raw_dim());
                    for (i, v) in dy.iter_mut().enumerate() {
                        *v = ((i as f64) * 0.37).cos();
                    }
                    let _ = m.backward(&dy);
                }
                loss
            },
            6,
        );
        assert!(
            report.passes(1e-3),
            "unet rel err {} at {} (analytic {}, fd {})",
            report.max_rel_err,
            report.worst_param,
            report.analytic,
            report.numeric
        );
    }
}

#[cfg(test)]
mod bench {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    #[ignore]
    fn unet_timing() {
        for (name, ch, latent) in [
            ("l3 (32,64) @4^3", vec![32usize, 64], vec![8usize, 4, 4, 4]),
            ("l3 (16,32) @4^3", vec![16, 32], vec![8, 4, 4, 4]),
            ("l2 (16,32) @8^3", vec![16, 32], vec![8, 8, 8, 8]),
            ("l2 (32,64) @8^3", vec![32, 64], vec![8, 8, 8, 8]),
        ] {
            let cfg = UnetConfig { in_channels: 8, channels: ch, attention_cap: 512 };
            let mut unet = Unet::<f32>::new(cfg, 1).unwrap();
            let z = ArrayD::from_elem(IxDyn(&latent), 0.2f32);
            let n = 50u32;
            let t0 = std::time::Instant::now();
            for i in 0..n {
                let _ = unet.forward(&z, (i as usize % 999) + 1).unwrap();
            }
            let fwd = t0.elapsed() / n;
            let y = unet.forward(&z, 5).unwrap();
            let t0 = std::time::Instant::now();
            for _ in 0..n {
                let _ = unet.forward(&z, 5).unwrap();
                let _ = unet.backward(&y);
            }
            println!("{name}: fwd {fwd:?}, fwd+bwd {:?}", t0.elapsed() / n);
        }
    }
}
