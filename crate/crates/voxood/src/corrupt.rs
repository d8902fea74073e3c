//! Deterministic near-OOD corruption generators.
//!
//! Each corruption imitates an acquisition or preprocessing error on a
//! `[0, 1]`-preprocessed volume. All corruptions preserve dims; Gaussian
//! noise output is deliberately not re-clipped to the valid range.

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Label, ManifestEntry};
use crate::seeding::rng_for;
use crate::volume::{load_volume, save_volume, Volume};
use rand::{Rng, RngCore};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Image-plane axes: axis 0 = L-R, axis 1 = A-P, axis 2 = I-S.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlipAxis {
    LR,
    AP,
    IS,
}

impl FlipAxis {
    pub fn index(&self) -> usize {
        match self {
            FlipAxis::LR => 0,
            FlipAxis::AP => 1,
            FlipAxis::IS => 2,
        }
    }

    fn id(&self) -> &'static str {
        match self {
            FlipAxis::LR => "lr",
            FlipAxis::AP => "ap",
            FlipAxis::IS => "is",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChunkLocation {
    Top,
    Middle,
}

impl ChunkLocation {
    fn id(&self) -> &'static str {
        match self {
            ChunkLocation::Top => "top",
            ChunkLocation::Middle => "middle",
        }
    }
}

/// Fraction of the slowest axis removed by `chunk_remove`.
pub const CHUNK_THICKNESS_FRAC: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub enum CorruptionKind {
    /// Add i.i.d. N(0, sigma^2) noise to every voxel.
    GaussianNoise { sigma: f64 },
    /// Set all exactly-zero voxels to `value`.
    BackgroundValue { value: f32 },
    /// Mirror through one image plane.
    Flip { axis: FlipAxis },
    /// Zero a contiguous 20% slab of slices along the slowest axis.
    ChunkRemove { location: ChunkLocation },
    /// Zero all voxels above an Otsu threshold (masks out the foreground).
    ForegroundMask,
    /// Multiply every voxel by `factor`.
    IntensityScale { factor: f32 },
}

impl CorruptionKind {
    /// Class string used in OOD labels and result tables, e.g.
    /// `gaussian_noise:0.1`.
    pub fn class(&self) -> String {
        match self {
            CorruptionKind::GaussianNoise { sigma } => format!("gaussian_noise:{sigma}"),
            CorruptionKind::BackgroundValue { value } => format!("background_value:{value}"),
            CorruptionKind::Flip { axis } => format!("flip:{}", axis.id()),
            CorruptionKind::ChunkRemove { location } => format!("chunk_remove:{}", location.id()),
            CorruptionKind::ForegroundMask => "foreground_mask".to_string(),
            CorruptionKind::IntensityScale { factor } => format!("intensity_scale:{factor}"),
        }
    }

    fn is_stochastic(&self) -> bool {
        matches!(self, CorruptionKind::GaussianNoise { .. })
    }

    fn validate(&self) -> Result<()> {
        match self {
            CorruptionKind::GaussianNoise { sigma } if !(*sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::InvalidInput(format!("noise sigma must be positive, got {sigma}")))
            }
            CorruptionKind::BackgroundValue { value } if !(0.0..=1.0).contains(value) => {
                Err(Error::InvalidInput(format!("background value must be in [0,1], got {value}")))
            }
            CorruptionKind::IntensityScale { factor }
                if !(*factor > 0.0 && factor.is_finite()) =>
            {
                Err(Error::InvalidInput(format!("scale factor must be positive, got {factor}")))
            }
            _ => Ok(()),
        }
    }
}

/// A replayable corruption: kind plus the seed driving any stochastic draw.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, seed: u64) -> Self {
        CorruptionSpec { kind, seed }
    }

    /// A copy reseeded deterministically for one input, so different volumes
    /// get different noise realizations but reruns are identical.
    pub fn reseeded_for(&self, input_id: &str) -> CorruptionSpec {
        let seed = rng_for(self.seed, &format!("corrupt/{}/{input_id}", self.kind.class()))
            .next_u64();
        CorruptionSpec { kind: self.kind.clone(), seed }
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kind.is_stochastic() {
            write!(f, "{}:{}", self.kind.class(), self.seed)
        } else {
            f.write_str(&self.kind.class())
        }
    }
}

impl FromStr for CorruptionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::InvalidInput(format!("unparseable corruption spec '{s}'"));
        let kind = match parts.first().copied() {
            Some("gaussian_noise") => CorruptionKind::GaussianNoise {
                sigma: parts.get(1).and_then(|p| p.parse().ok()).ok_or_else(bad)?,
            },
            Some("background_value") => CorruptionKind::BackgroundValue {
                value: parts.get(1).and_then(|p| p.parse().ok()).ok_or_else(bad)?,
            },
            Some("flip") => {
                let axis = match parts.get(1).copied() {
                    Some("lr") => FlipAxis::LR,
                    Some("ap") => FlipAxis::AP,
                    Some("is") => FlipAxis::IS,
                    _ => return Err(bad()),
                };
                CorruptionKind::Flip { axis }
            }
            Some("chunk_remove") => {
                let location = match parts.get(1).copied() {
                    Some("top") => ChunkLocation::Top,
                    Some("middle") => ChunkLocation::Middle,
                    _ => return Err(bad()),
                };
                CorruptionKind::ChunkRemove { location }
            }
            Some("foreground_mask") => CorruptionKind::ForegroundMask,
            Some("intensity_scale") => CorruptionKind::IntensityScale {
                factor: parts.get(1).and_then(|p| p.parse().ok()).ok_or_else(bad)?,
            },
            _ => return Err(bad()),
        };
        let seed = if kind.is_stochastic() {
            parts.get(2).and_then(|p| p.parse().ok()).unwrap_or(0)
        } else {
            0
        };
        kind.validate()?;
        Ok(CorruptionSpec { kind, seed })
    }
}

/// Apply one corruption, returning a new volume of identical dims.
pub fn apply_corruption(v: &Volume, spec: &CorruptionSpec) -> Result<Volume> {
    spec.kind.validate()?;
    let (h, w, d) = v.dims();
    let mut out = v.clone();
    match &spec.kind {
        CorruptionKind::GaussianNoise { sigma } => {
            let mut rng = rng_for(spec.seed, &format!("noise/{sigma}"));
            for val in out.data_mut() {
                let n: f64 = rng.sample(rand_distr::StandardNormal);
                *val += (n * sigma) as f32;
            }
        }
        CorruptionKind::BackgroundValue { value } => {
            for val in out.data_mut() {
                if *val == 0.0 {
                    *val = *value;
                }
            }
        }
        CorruptionKind::Flip { axis } => {
            let data = out.data_mut();
            match axis.index() {
                0 => {
                    for hi in 0..h {
                        let mirror = h - 1 - hi;
                        if hi >= mirror {
                            break;
                        }
                        for wi in 0..w {
                            let a = (hi * w + wi) * d;
                            let b = (mirror * w + wi) * d;
                            for di in 0..d {
                                data.swap(a + di, b + di);
                            }
                        }
                    }
                }
                1 => {
                    for hi in 0..h {
                        for wi in 0..w / 2 {
                            let mirror = w - 1 - wi;
                            let a = (hi * w + wi) * d;
                            let b = (hi * w + mirror) * d;
                            for di in 0..d {
                                data.swap(a + di, b + di);
                            }
                        }
                    }
                }
                _ => {
                    for hi in 0..h {
                        for wi in 0..w {
                            let row = (hi * w + wi) * d;
                            data[row..row + d].reverse();
                        }
                    }
                }
            }
        }
        CorruptionKind::ChunkRemove { location } => {
            let thickness = ((h as f64) * CHUNK_THICKNESS_FRAC).round() as usize;
            let thickness = thickness.max(1);
            if thickness >= h {
                return Err(Error::InvalidInput(format!(
                    "chunk thickness {thickness} >= axis extent {h}"
                )));
            }
            let (start, end) = chunk_slab(h, *location);
            for hi in start..end {
                let row = hi * w * d;
                out.data_mut()[row..row + w * d].fill(0.0);
            }
        }
        CorruptionKind::ForegroundMask => {
            let threshold = otsu_threshold(v.data());
            for val in out.data_mut() {
                if *val > threshold {
                    *val = 0.0;
                }
            }
        }
        CorruptionKind::IntensityScale { factor } => {
            for val in out.data_mut() {
                *val *= factor;
            }
        }
    }
    Ok(out)
}

/// Slice range `[start, end)` removed by `chunk_remove` on an axis of
/// `extent` slices.
pub fn chunk_slab(extent: usize, location: ChunkLocation) -> (usize, usize) {
    let thickness = ((extent as f64) * CHUNK_THICKNESS_FRAC).round().max(1.0) as usize;
    match location {
        ChunkLocation::Top => (extent - thickness, extent),
        ChunkLocation::Middle => {
            let start = (extent - thickness) / 2;
            (start, start + thickness)
        }
    }
}

/// Otsu's threshold over a 256-bin histogram of the value range. Returns the
/// upper edge of the best split bin; for constant input returns the maximum,
/// so nothing lies above it.
fn otsu_threshold(data: &[f32]) -> f32 {
    let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return hi;
    }
    const BINS: usize = 256;
    let scale = BINS as f32 / (hi - lo);
    let mut hist = [0u64; BINS];
    for &v in data {
        let b = (((v - lo) * scale) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = data.len() as f64;
    let total_sum: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    let mut best = (0usize, -1.0f64);
    for (i, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (total_sum - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best.1 {
            best = (i, between);
        }
    }
    lo + (best.0 as f32 + 1.0) / scale
}

/// The 14 default corruption specs: 3 noise levels, 3 background values,
/// 3 flips, 2 chunk locations, 1 foreground mask, 2 intensity scalings.
pub fn standard_suite() -> Vec<CorruptionSpec> {
    let mut specs = Vec::with_capacity(14);
    for sigma in [0.01, 0.1, 0.2] {
        specs.push(CorruptionSpec::new(CorruptionKind::GaussianNoise { sigma }, 0));
    }
    for value in [0.3, 0.6, 1.0] {
        specs.push(CorruptionSpec::new(CorruptionKind::BackgroundValue { value }, 0));
    }
    for axis in [FlipAxis::LR, FlipAxis::AP, FlipAxis::IS] {
        specs.push(CorruptionSpec::new(CorruptionKind::Flip { axis }, 0));
    }
    for location in [ChunkLocation::Top, ChunkLocation::Middle] {
        specs.push(CorruptionSpec::new(CorruptionKind::ChunkRemove { location }, 0));
    }
    specs.push(CorruptionSpec::new(CorruptionKind::ForegroundMask, 0));
    for factor in [0.01, 0.1] {
        specs.push(CorruptionSpec::new(CorruptionKind::IntensityScale { factor }, 0));
    }
    specs
}

/// Apply every spec to every manifest entry, writing corrupted volumes under
/// `out_dir/volumes/` and returning the near-OOD manifest.
pub fn corrupt_dataset(
    manifest: &DatasetManifest,
    specs: &[CorruptionSpec],
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let vol_dir = out_dir.join("volumes");
    std::fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let mut entries = Vec::with_capacity(manifest.len() * specs.len());
    for spec in specs {
        let class = spec.kind.class();
        let suffix = class.replace([':', '.'], "_");
        for entry in &manifest.entries {
            let v = load_volume(manifest.resolve(entry))?;
            let per_input = spec.reseeded_for(&entry.id());
            let corrupted = apply_corruption(&v, &per_input)?;
            let stem = entry
                .path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "volume".to_string());
            let rel = PathBuf::from(format!("volumes/{stem}__{suffix}.vol"));
            save_volume(&corrupted, out_dir.join(&rel))?;
            entries.push(ManifestEntry { path: rel, label: Label::Ood(class.clone()) });
        }
    }
    let mut m = DatasetManifest::new("near_ood", manifest.seed, entries)?;
    m.set_root(out_dir);
    m.save(out_dir.join("near_ood.manifest"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_volume, FamilyParams, SyntheticFamily};

    fn head() -> Volume {
        synth_volume(SyntheticFamily::HeadLike, 7, (32, 32, 32), &FamilyParams::default()).unwrap()
    }

    #[test]
    fn suite_has_14_distinct_specs() {
        let suite = standard_suite();
        assert_eq!(suite.len(), 14);
        for i in 0..suite.len() {
            for j in (i + 1)..suite.len() {
                assert_ne!(suite[i], suite[j]);
            }
        }
    }

    #[test]
    fn suite_produces_14_distinct_volumes() {
        let v = head();
        let outputs: Vec<Volume> = standard_suite()
            .iter()
            .map(|s| apply_corruption(&v, s).unwrap())
            .collect();
        for i in 0..outputs.len() {
            assert_eq!(outputs[i].dims(), v.dims());
            for j in (i + 1)..outputs.len() {
                assert_ne!(outputs[i], outputs[j], "specs {i} and {j} gave identical output");
            }
        }
    }

    #[test]
    fn intensity_scale_multiplies_every_voxel() {
        let v = head();
        let spec = CorruptionSpec::new(CorruptionKind::IntensityScale { factor: 0.1 }, 0);
        let out = apply_corruption(&v, &spec).unwrap();
        for (a, b) in v.data().iter().zip(out.data()) {
            assert!((a * 0.1 - b).abs() < 1e-7);
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let v = head();
        for axis in [FlipAxis::LR, FlipAxis::AP, FlipAxis::IS] {
            let spec = CorruptionSpec::new(CorruptionKind::Flip { axis }, 0);
            let once = apply_corruption(&v, &spec).unwrap();
            assert_ne!(once, v);
            let twice = apply_corruption(&once, &spec).unwrap();
            assert_eq!(twice, v, "flip {axis:?} is not an involution");
        }
    }

    #[test]
    fn gaussian_noise_matches_nominal_variance() {
        let zeros = Volume::zeros((32, 32, 32));
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise { sigma: 0.1 }, 99);
        let out = apply_corruption(&zeros, &spec).unwrap();
        let n = out.len() as f64;
        let mean: f64 = out.data().iter().map(|&x| x as f64).sum::<f64>() / n;
        let var: f64 =
            out.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.01).abs() / 0.01 < 0.05, "sample variance {var} not within 5% of 0.01");
    }

    #[test]
    fn noise_is_not_reclipped() {
        let ones = Volume::new((16, 16, 16), vec![1.0; 4096]).unwrap();
        let spec = CorruptionSpec::new(CorruptionKind::GaussianNoise { sigma: 0.2 }, 5);
        let out = apply_corruption(&ones, &spec).unwrap();
        assert!(out.max() > 1.0);
    }

    #[test]
    fn background_value_touches_only_zeros() {
        let v = head();
        let spec = CorruptionSpec::new(CorruptionKind::BackgroundValue { value: 0.6 }, 0);
        let out = apply_corruption(&v, &spec).unwrap();
        for (a, b) in v.data().iter().zip(out.data()) {
            if *a == 0.0 {
                assert_eq!(*b, 0.6);
            } else {
                assert_eq!(*a, *b);
            }
        }
    }

    #[test]
    fn chunk_remove_zeroes_the_stated_slab_and_is_idempotent() {
        let v = head();
        for location in [ChunkLocation::Top, ChunkLocation::Middle] {
            let spec = CorruptionSpec::new(CorruptionKind::ChunkRemove { location }, 0);
            let out = apply_corruption(&v, &spec).unwrap();
            let (h, w, d) = v.dims();
            let (start, end) = chunk_slab(h, location);
            assert_eq!(end - start, 6); // 20% of 32 rounds to 6
            for hi in start..end {
                for wi in 0..w {
                    for di in 0..d {
                        assert_eq!(out.get(hi, wi, di), 0.0);
                    }
                }
            }
            let again = apply_corruption(&out, &spec).unwrap();
            assert_eq!(again, out);
        }
    }

    #[test]
    fn foreground_mask_removes_foreground_and_is_idempotent() {
        let v = head();
        let spec = CorruptionSpec::new(CorruptionKind::ForegroundMask, 0);
        let out = apply_corruption(&v, &spec).unwrap();
        assert!(out.max() < v.max());
        let removed = v
            .data()
            .iter()
            .zip(out.data())
            .filter(|(a, b)| **a != 0.0 && **b == 0.0)
            .count();
        assert!(removed > 0);
        let again = apply_corruption(&out, &spec).unwrap();
        assert_eq!(again, out, "foreground_mask is not idempotent");
    }

    #[test]
    fn spec_strings_round_trip() {
        for spec in standard_suite() {
            let s = spec.to_string();
            let parsed: CorruptionSpec = s.parse().unwrap();
            assert_eq!(parsed, spec, "spec '{s}' did not round trip");
        }
        let with_seed: CorruptionSpec = "gaussian_noise:0.1:42".parse().unwrap();
        assert_eq!(with_seed.seed, 42);
        assert_eq!(with_seed.to_string(), "gaussian_noise:0.1:42");
        assert!("gaussian_noise".parse::<CorruptionSpec>().is_err());
        assert!("melt:1".parse::<CorruptionSpec>().is_err());
    }

    #[test]
    fn corrupt_dataset_is_a_full_product_and_deterministic() {
        use crate::manifest::make_dataset;
        let dir = tempfile::tempdir().unwrap();
        let splits = make_dataset(
            SyntheticFamily::HeadLike,
            5,
            21,
            [0.4, 0.2, 0.4],
            (16, 16, 16),
            &FamilyParams::default(),
            dir.path().join("id"),
        )
        .unwrap();
        let specs = standard_suite();
        let out_a = dir.path().join("near_a");
        let out_b = dir.path().join("near_b");
        let near_a = corrupt_dataset(&splits.test, &specs, &out_a).unwrap();
        let near_b = corrupt_dataset(&splits.test, &specs, &out_b).unwrap();
        assert_eq!(near_a.len(), 2 * 14);
        assert_eq!(near_a.entries, near_b.entries);
        for e in &near_a.entries {
            assert!(e.label.is_ood());
            let a = std::fs::read(out_a.join(&e.path)).unwrap();
            let b = std::fs::read(out_b.join(&e.path)).unwrap();
            assert_eq!(a, b);
        }
        let reloaded = DatasetManifest::load(out_a.join("near_ood.manifest")).unwrap();
        assert_eq!(reloaded.entries, near_a.entries);
    }
}
