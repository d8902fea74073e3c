//! Deterministic synthetic volume families used as stand-ins for medical data.
//!
//! The in-distribution family is `head_like`: an ellipsoidal bright shell
//! around smooth low-contrast interior blobs over an exactly-zero background,
//! mimicking the skull / tissue / background structure of a CT head. The other
//! families provide far-OOD material.

use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::volume::Volume;
use rand::Rng;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SyntheticFamily {
    HeadLike,
    CuboidField,
    SphereGrid,
    StripeTexture,
}

impl SyntheticFamily {
    pub const ALL: [SyntheticFamily; 4] = [
        SyntheticFamily::HeadLike,
        SyntheticFamily::CuboidField,
        SyntheticFamily::SphereGrid,
        SyntheticFamily::StripeTexture,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            SyntheticFamily::HeadLike => "head_like",
            SyntheticFamily::CuboidField => "cuboid_field",
            SyntheticFamily::SphereGrid => "sphere_grid",
            SyntheticFamily::StripeTexture => "stripe_texture",
        }
    }
}

impl fmt::Display for SyntheticFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for SyntheticFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head_like" => Ok(SyntheticFamily::HeadLike),
            "cuboid_field" => Ok(SyntheticFamily::CuboidField),
            "sphere_grid" => Ok(SyntheticFamily::SphereGrid),
            "stripe_texture" => Ok(SyntheticFamily::StripeTexture),
            other => Err(Error::InvalidInput(format!("unknown synthetic family id '{other}'"))),
        }
    }
}

/// Generator knobs shared across families. Defaults are tuned so that
/// `head_like` keeps > 30% exact-zero background and a hard intensity floor
/// (no values in (0, tissue_floor)), which the corruption semantics rely on.
#[derive(Debug, Clone)]
pub struct FamilyParams {
    /// head_like: ellipsoid semi-axis range as a fraction of the half-extent.
    pub head_axis_frac: (f32, f32),
    /// head_like: inner edge of the bright shell in normalized radius.
    pub head_shell_inner: f32,
    /// head_like: shell intensity range.
    pub head_shell_intensity: (f32, f32),
    /// head_like: interior blob count range (inclusive).
    pub head_blobs: (usize, usize),
    /// head_like: minimum positive intensity inside the shell.
    pub tissue_floor: f32,
    /// cuboid_field: cuboid count range (inclusive).
    pub cuboid_count: (usize, usize),
    /// sphere_grid: lattice pitch in voxels.
    pub sphere_pitch: usize,
    /// stripe_texture: integer frequency range per axis (inclusive).
    pub stripe_freq: (i32, i32),
}

impl Default for FamilyParams {
    fn default() -> Self {
        FamilyParams {
            head_axis_frac: (0.82, 0.94),
            head_shell_inner: 0.93,
            head_shell_intensity: (0.85, 0.95),
            head_blobs: (4, 7),
            tissue_floor: 0.20,
            cuboid_count: (6, 10),
            sphere_pitch: 8,
            stripe_freq: (1, 4),
        }
    }
}

/// Granularity every dim must divide by, so all autoencoder levels divide evenly.
pub const DIM_GRANULARITY: usize = 16;

/// Generate one volume of the given family. Pure function of
/// `(family, seed, dims, params)`.
pub fn synth_volume(
    family: SyntheticFamily,
    seed: u64,
    dims: (usize, usize, usize),
    params: &FamilyParams,
) -> Result<Volume> {
    let (h, w, d) = dims;
    for dim in [h, w, d] {
        if dim == 0 || dim % DIM_GRANULARITY != 0 {
            return Err(Error::InvalidInput(format!(
                "dims must be positive multiples of {DIM_GRANULARITY}, got {dims:?}"
            )));
        }
    }
    let scope = format!("synth/{}/{}/{}x{}x{}", family.id(), seed, h, w, d);
    let mut rng = rng_for(seed, &scope);
    let v = match family {
        SyntheticFamily::HeadLike => head_like(&mut rng, dims, params),
        SyntheticFamily::CuboidField => cuboid_field(&mut rng, dims, params),
        SyntheticFamily::SphereGrid => sphere_grid(&mut rng, dims, params),
        SyntheticFamily::StripeTexture => stripe_texture(&mut rng, dims, params),
    };
    Volume::new(dims, v)
}

fn head_like(rng: &mut impl Rng, dims: (usize, usize, usize), p: &FamilyParams) -> Vec<f32> {
    let (h, w, d) = dims;
    let half = [h as f32 / 2.0, w as f32 / 2.0, d as f32 / 2.0];
    let center: Vec<f32> = half
        .iter()
        .map(|&c| c - 0.5 + rng.random_range(-1.2..1.2))
        .collect();
    let axes: Vec<f32> = half
        .iter()
        .map(|&c| c * rng.random_range(p.head_axis_frac.0..p.head_axis_frac.1))
        .collect();
    let shell_val: f32 = rng.random_range(p.head_shell_intensity.0..p.head_shell_intensity.1);
    let base: f32 = rng.random_range(0.42..0.50);

    let n_blobs = rng.random_range(p.head_blobs.0..=p.head_blobs.1);
    // (center, sigma, amplitude) per blob, centered well inside the shell.
    let blobs: Vec<([f32; 3], f32, f32)> = (0..n_blobs)
        .map(|_| {
            let c = [
                center[0] + rng.random_range(-0.55..0.55) * axes[0],
                center[1] + rng.random_range(-0.55..0.55) * axes[1],
                center[2] + rng.random_range(-0.55..0.55) * axes[2],
            ];
            let sigma = rng.random_range(2.0..4.5);
            let amp = rng.random_range(-0.14..0.14);
            (c, sigma, amp)
        })
        .collect();

    let mut data = vec![0.0f32; h * w * d];
    let mut idx = 0;
    for hi in 0..h {
        for wi in 0..w {
            for di in 0..d {
                let x = [(hi as f32 - center[0]), (wi as f32 - center[1]), (di as f32 - center[2])];
                let rho = ((x[0] / axes[0]).powi(2)
                    + (x[1] / axes[1]).powi(2)
                    + (x[2] / axes[2]).powi(2))
                .sqrt();
                data[idx] = if rho > 1.0 {
                    0.0
                } else if rho >= p.head_shell_inner {
                    shell_val
                } else {
                    let mut t = base;
                    for (c, sigma, amp) in &blobs {
                        let r2 = (hi as f32 - c[0]).powi(2)
                            + (wi as f32 - c[1]).powi(2)
                            + (di as f32 - c[2]).powi(2);
                        t += amp * (-r2 / (2.0 * sigma * sigma)).exp();
                    }
                    t.clamp(p.tissue_floor, 0.68)
                };
                idx += 1;
            }
        }
    }
    data
}

fn cuboid_field(rng: &mut impl Rng, dims: (usize, usize, usize), p: &FamilyParams) -> Vec<f32> {
    let (h, w, d) = dims;
    let bg: f32 = rng.random_range(0.08..0.16);
    let mut data = vec![bg; h * w * d];
    let n = rng.random_range(p.cuboid_count.0..=p.cuboid_count.1);
    for _ in 0..n {
        let extent = |dim: usize, rng: &mut dyn rand::RngCore| -> (usize, usize) {
            let len = (dim / 6).max(2) + (rand::Rng::random_range(rng, 0..dim / 3)).max(1);
            let start = rand::Rng::random_range(rng, 0..dim.saturating_sub(len).max(1));
            (start, (start + len).min(dim))
        };
        let (h0, h1) = extent(h, rng);
        let (w0, w1) = extent(w, rng);
        let (d0, d1) = extent(d, rng);
        let val: f32 = rng.random_range(0.3..0.95);
        for hi in h0..h1 {
            for wi in w0..w1 {
                let row = (hi * w + wi) * d;
                for di in d0..d1 {
                    data[row + di] = val;
                }
            }
        }
    }
    data
}

fn sphere_grid(rng: &mut impl Rng, dims: (usize, usize, usize), p: &FamilyParams) -> Vec<f32> {
    let (h, w, d) = dims;
    let bg: f32 = rng.random_range(0.03..0.08);
    let pitch = p.sphere_pitch.max(4);
    let mut centers = Vec::new();
    let mut ci = pitch / 2;
    while ci < h {
        let mut cj = pitch / 2;
        while cj < w {
            let mut ck = pitch / 2;
            while ck < d {
                let jitter = |rng: &mut dyn rand::RngCore| rand::Rng::random_range(rng, -1.0f32..1.0);
                let r: f32 = rng.random_range(2.2..3.4);
                let val: f32 = rng.random_range(0.7..0.95);
                centers.push((
                    [ci as f32 + jitter(rng), cj as f32 + jitter(rng), ck as f32 + jitter(rng)],
                    r,
                    val,
                ));
                ck += pitch;
            }
            cj += pitch;
        }
        ci += pitch;
    }
    let mut data = vec![bg; h * w * d];
    let mut idx = 0;
    for hi in 0..h {
        for wi in 0..w {
            for di in 0..d {
                for (c, r, val) in &centers {
                    let r2 = (hi as f32 - c[0]).powi(2)
                        + (wi as f32 - c[1]).powi(2)
                        + (di as f32 - c[2]).powi(2);
                    if r2 <= r * r {
                        data[idx] = *val;
                        break;
                    }
                }
                idx += 1;
            }
        }
    }
    data
}

fn stripe_texture(rng: &mut impl Rng, dims: (usize, usize, usize), p: &FamilyParams) -> Vec<f32> {
    let (h, w, d) = dims;
    let freq = [
        rng.random_range(p.stripe_freq.0..=p.stripe_freq.1),
        rng.random_range(p.stripe_freq.0..=p.stripe_freq.1),
        rng.random_range(p.stripe_freq.0..=p.stripe_freq.1),
    ];
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let mut data = vec![0.0f32; h * w * d];
    let mut idx = 0;
    for hi in 0..h {
        for wi in 0..w {
            for di in 0..d {
                let arg = std::f32::consts::TAU
                    * (freq[0] as f32 * hi as f32 / h as f32
                        + freq[1] as f32 * wi as f32 / w as f32
                        + freq[2] as f32 * di as f32 / d as f32)
                    + phase;
                data[idx] = 0.5 + 0.45 * arg.sin();
                idx += 1;
            }
        }
    }
    data
}
