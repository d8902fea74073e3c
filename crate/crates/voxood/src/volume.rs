//! Dense 3D scalar volumes: data model, bit-exact file I/O, and intensity
//! preprocessing.
//!
//! Volumes are stored in a small self-describing container: magic `VOL1`,
//! a version byte, three u32 little-endian dims (H, W, D), then H*W*D f32
//! little-endian values in row-major order with D fastest
//! (linear index = (h*W + w)*D + d).

use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const VOLUME_MAGIC: &[u8; 4] = b"VOL1";
pub const VOLUME_VERSION: u8 = 0x01;
/// Magic + version + three u32 dims.
pub const VOLUME_HEADER_BYTES: usize = 4 + 1 + 3 * 4;

/// A dense 3D scalar field with shape metadata.
///
/// Invariants: `data.len() == h*w*d` and every value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: (usize, usize, usize),
    data: Vec<f32>,
}

impl Volume {
    /// Build a volume from raw values; validates length and finiteness.
    pub fn new(dims: (usize, usize, usize), data: Vec<f32>) -> Result<Self> {
        let (h, w, d) = dims;
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::InvalidInput(format!("dims must be positive, got {dims:?}")));
        }
        let n = h
            .checked_mul(w)
            .and_then(|x| x.checked_mul(d))
            .ok_or_else(|| Error::DimOverflow(format!("{dims:?}")))?;
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                n
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("volume contains non-finite value {v}")));
        }
        Ok(Volume { dims, data })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        let (h, w, d) = dims;
        Volume { dims, data: vec![0.0; h * w * d] }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, d: usize) -> usize {
        (h * self.dims.1 + w) * self.dims.2 + d
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, d: usize) -> f32 {
        self.data[self.index(h, w, d)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, d: usize, v: f32) {
        let i = self.index(h, w, d);
        self.data[i] = v;
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    fn check_finite(&self) -> Result<()> {
        if let Some(v) = self.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("volume contains non-finite value {v}")));
        }
        Ok(())
    }
}

/// Load a volume from the `VOL1` container.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != VOLUME_MAGIC {
        return Err(Error::BadMagic { found: magic.to_vec(), expected: VOLUME_MAGIC });
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version).map_err(|e| Error::io(path, e))?;
    if version[0] != VOLUME_VERSION {
        return Err(Error::UnsupportedVersion(version[0]));
    }
    let mut dim_bytes = [0u8; 12];
    r.read_exact(&mut dim_bytes).map_err(|e| Error::io(path, e))?;
    let h = u32::from_le_bytes(dim_bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(dim_bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(dim_bytes[8..12].try_into().unwrap()) as usize;
    let n = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(d))
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::DimOverflow(format!("({h}, {w}, {d})")))?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() != n {
        return Err(Error::Truncated { expected: n, got: payload.len() });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new((h, w, d), data)
}

/// Save a volume to the `VOL1` container, replacing any existing file.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    v.check_finite()?;
    let (h, w, d) = v.dims;
    if h > u32::MAX as usize || w > u32::MAX as usize || d > u32::MAX as usize {
        return Err(Error::DimOverflow(format!("{:?}", v.dims)));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut wtr = BufWriter::new(file);
    wtr.write_all(VOLUME_MAGIC).map_err(|e| Error::io(path, e))?;
    wtr.write_all(&[VOLUME_VERSION]).map_err(|e| Error::io(path, e))?;
    for dim in [h, w, d] {
        wtr.write_all(&(dim as u32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for &val in &v.data {
        bytes.extend_from_slice(&val.to_le_bytes());
    }
    wtr.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Clamp to `[lo, hi]` then rescale affinely onto `[0, 1]`.
///
/// Defaults (`lo = -15`, `hi = 100`) are the CT intensity window.
pub fn preprocess_ct(raw: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::InvalidInput(format!("need lo < hi, got lo={lo}, hi={hi}")));
    }
    let span = hi - lo;
    let data = raw.data.iter().map(|&v| (v.clamp(lo, hi) - lo) / span).collect();
    Volume::new(raw.dims, data)
}

pub const CT_CLAMP_LO: f32 = -15.0;
pub const CT_CLAMP_HI: f32 = 100.0;

/// Affine rescale so the minimum maps to 0 and the maximum to 1.
pub fn rescale_minmax(raw: &Volume) -> Result<Volume> {
    let lo = raw.min();
    let hi = raw.max();
    if lo == hi {
        return Err(Error::Degenerate("constant volume has no intensity range".into()));
    }
    let span = hi - lo;
    let data = raw.data.iter().map(|&v| (v - lo) / span).collect();
    Volume::new(raw.dims, data)
}

/// Center-crop or symmetrically zero-pad to the target dims per axis.
pub fn pad_crop(v: &Volume, target: (usize, usize, usize)) -> Result<Volume> {
    let (th, tw, td) = target;
    if th == 0 || tw == 0 || td == 0 {
        return Err(Error::InvalidInput(format!("target dims must be positive, got {target:?}")));
    }
    let (sh, sw, sd) = v.dims;
    let mut out = Volume::zeros(target);
    // Per axis: offset into source when cropping, into target when padding.
    let (src_h0, dst_h0, nh) = axis_window(sh, th);
    let (src_w0, dst_w0, nw) = axis_window(sw, tw);
    let (src_d0, dst_d0, nd) = axis_window(sd, td);
    for h in 0..nh {
        for w in 0..nw {
            let src = v.index(src_h0 + h, src_w0 + w, src_d0);
            let dst = out.index(dst_h0 + h, dst_w0 + w, dst_d0);
            out.data[dst..dst + nd].copy_from_slice(&v.data[src..src + nd]);
        }
    }
    Ok(out)
}

fn axis_window(src: usize, dst: usize) -> (usize, usize, usize) {
    if src >= dst {
        ((src - dst) / 2, 0, dst)
    } else {
        (0, (dst - src) / 2, src)
    }
}
