//! Multi-scale structural-similarity distance on 2D slices.
//!
//! The perceptual term of the scoring pipeline: for each of the three image
//! planes, slices are compared with a Gaussian-windowed SSIM at the native
//! scale and once 2x-downsampled, and `1 - mean(ssim)` is averaged over
//! slices, scales, and planes. Constants follow the standard choice for
//! `[0, 1]`-ranged data: C1 = 0.01^2, C2 = 0.03^2, window sigma 1.5.

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const SSIM_C1: f64 = 0.0001;
pub const SSIM_C2: f64 = 0.0009;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_SCALES: usize = 2;

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut taps = Vec::with_capacity(SSIM_WINDOW);
    let mut sum = 0.0;
    for i in -r..=r {
        let v = (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        taps.push(v);
        sum += v;
    }
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// A borrowed 2D field in row-major order.
struct Slice2<'a> {
    h: usize,
    w: usize,
    data: &'a [f64],
}

/// Separable valid-mode Gaussian filter; output is (h-win+1, w-win+1).
fn gaussian_filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let win = taps.len();
    let oh = h - win + 1;
    let ow = w - win + 1;
    // Horizontal pass.
    let mut tmp = vec![0.0f64; h * ow];
    for r in 0..h {
        for c in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * img[r * w + c + k];
            }
            tmp[r * ow + c] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0f64; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * tmp[(r + k) * ow + c];
            }
            out[r * ow + c] = acc;
        }
    }
    (out, oh, ow)
}

/// Mean SSIM between two equally-sized 2D slices (valid windows only).
fn ssim_2d(a: &Slice2, b: &Slice2, taps: &[f64]) -> Result<f64> {
    let (h, w) = (a.h, a.w);
    if h < taps.len() || w < taps.len() {
        return Err(Error::InvalidInput(format!(
            "slice {h}x{w} smaller than the {len}-tap window",
            len = taps.len()
        )));
    }
    let n = h * w;
    let mut aa = vec![0.0f64; n];
    let mut bb = vec![0.0f64; n];
    let mut ab = vec![0.0f64; n];
    for i in 0..n {
        aa[i] = a.data[i] * a.data[i];
        bb[i] = b.data[i] * b.data[i];
        ab[i] = a.data[i] * b.data[i];
    }
    let (mu_a, oh, ow) = gaussian_filter_valid(a.data, h, w, taps);
    let (mu_b, _, _) = gaussian_filter_valid(b.data, h, w, taps);
    let (m_aa, _, _) = gaussian_filter_valid(&aa, h, w, taps);
    let (m_bb, _, _) = gaussian_filter_valid(&bb, h, w, taps);
    let (m_ab, _, _) = gaussian_filter_valid(&ab, h, w, taps);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let ma = mu_a[i];
        let mb = mu_b[i];
        let va = (m_aa[i] - ma * ma).max(0.0);
        let vb = (m_bb[i] - mb * mb).max(0.0);
        let cov = m_ab[i] - ma * mb;
        let ssim = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        total += ssim;
    }
    Ok(total / (oh * ow) as f64)
}

/// 2x2 mean-pool downsampling (floor semantics).
fn downsample2(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = vec![0.0f64; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let i = 2 * r * w + 2 * c;
            out[r * ow + c] = 0.25 * (img[i] + img[i + 1] + img[i + w] + img[i + w + 1]);
        }
    }
    (out, oh, ow)
}

/// Multi-scale SSIM distance between two 2D slices: mean over scales of
/// `1 - mean_ssim`.
fn msssim_distance_2d(a: Vec<f64>, b: Vec<f64>, h: usize, w: usize, taps: &[f64]) -> Result<f64> {
    let mut dist = 0.0;
    let (mut ca, mut cb, mut ch, mut cw) = (a, b, h, w);
    for scale in 0..SSIM_SCALES {
        let s = ssim_2d(
            &Slice2 { h: ch, w: cw, data: &ca },
            &Slice2 { h: ch, w: cw, data: &cb },
            taps,
        )?;
        dist += 1.0 - s;
        if scale + 1 < SSIM_SCALES {
            let (na, nh, nw) = downsample2(&ca, ch, cw);
            let (nb, _, _) = downsample2(&cb, ch, cw);
            ca = na;
            cb = nb;
            ch = nh;
            cw = nw;
        }
    }
    Ok(dist / SSIM_SCALES as f64)
}

fn extract_slice(v: &Volume, axis: usize, idx: usize, clamp: bool) -> (Vec<f64>, usize, usize) {
    let (h, w, d) = v.dims();
    let get = |a: f32| -> f64 {
        let x = a as f64;
        if clamp {
            x.clamp(0.0, 1.0)
        } else {
            x
        }
    };
    match axis {
        0 => {
            let mut out = Vec::with_capacity(w * d);
            for wi in 0..w {
                for di in 0..d {
                    out.push(get(v.get(idx, wi, di)));
                }
            }
            (out, w, d)
        }
        1 => {
            let mut out = Vec::with_capacity(h * d);
            for hi in 0..h {
                for di in 0..d {
                    out.push(get(v.get(hi, idx, di)));
                }
            }
            (out, h, d)
        }
        _ => {
            let mut out = Vec::with_capacity(h * w);
            for hi in 0..h {
                for wi in 0..w {
                    out.push(get(v.get(hi, wi, idx)));
                }
            }
            (out, h, w)
        }
    }
}

/// Perceptual distance between two volumes: per-plane slicewise multi-scale
/// SSIM distance, averaged over the three planes. Inputs are clamped to
/// `[0, 1]` before comparison.
pub fn perceptual_proxy(a: &Volume, b: &Volume) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "volume dims {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let taps = gaussian_taps();
    let (h, w, d) = a.dims();
    let mut axis_total = 0.0;
    for (axis, extent) in [(0usize, h), (1, w), (2, d)] {
        let mut slice_total = 0.0;
        for idx in 0..extent {
            let (sa, sh, sw) = extract_slice(a, axis, idx, true);
            let (sb, _, _) = extract_slice(b, axis, idx, true);
            slice_total += msssim_distance_2d(sa, sb, sh, sw, &taps)?;
        }
        axis_total += slice_total / extent as f64;
    }
    Ok(axis_total / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrupt::{apply_corruption, CorruptionKind, CorruptionSpec, FlipAxis};
    use crate::synth::{synth_volume, FamilyParams, SyntheticFamily};

    fn head(seed: u64) -> Volume {
        synth_volume(SyntheticFamily::HeadLike, seed, (32, 32, 32), &FamilyParams::default())
            .unwrap()
    }

    #[test]
    fn identical_volumes_have_zero_distance() {
        let v = head(1);
        let d = perceptual_proxy(&v, &v).unwrap();
        assert!(d.abs() < 1e-9, "distance {d}");
    }

    #[test]
    fn inverted_checkerboard_is_far() {
        // Period-4 checkerboard so contrast survives one 2x downsample.
        let (h, w, d) = (32, 32, 32);
        let mut data = Vec::with_capacity(h * w * d);
        for hi in 0..h {
            for wi in 0..w {
                for di in 0..d {
                    let v = ((hi / 4 + wi / 4 + di / 4) % 2) as f32;
                    data.push(v);
                }
            }
        }
        let a = Volume::new((h, w, d), data).unwrap();
        let inv_data: Vec<f32> = a.data().iter().map(|v| 1.0 - v).collect();
        let b = Volume::new((h, w, d), inv_data).unwrap();
        let dist = perceptual_proxy(&a, &b).unwrap();
        assert!(dist > 0.5, "checkerboard inversion distance {dist}");
    }

    #[test]
    fn invariant_to_common_axis_flip() {
        let a = head(2);
        let b = head(3);
        let base = perceptual_proxy(&a, &b).unwrap();
        for axis in [FlipAxis::LR, FlipAxis::AP, FlipAxis::IS] {
            let spec = CorruptionSpec::new(CorruptionKind::Flip { axis }, 0);
            let fa = apply_corruption(&a, &spec).unwrap();
            let fb = apply_corruption(&b, &spec).unwrap();
            let flipped = perceptual_proxy(&fa, &fb).unwrap();
            assert!(
                (base - flipped).abs() < 1e-9,
                "axis {axis:?}: {base} vs {flipped}"
            );
        }
    }

    #[test]
    fn small_slices_are_rejected() {
        let a = Volume::zeros((8, 8, 8));
        assert!(perceptual_proxy(&a, &a).is_err());
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let a = Volume::zeros((16, 16, 16));
        let b = Volume::zeros((16, 16, 32));
        assert!(perceptual_proxy(&a, &b).is_err());
    }
}
