//! Named-tensor archive: the checkpoint and stats container.
//!
//! Layout: magic `NTA1`, u32 LE entry count; per entry a u16 LE name length,
//! UTF-8 name, u8 rank, rank u32 LE extents, then the payload as f32 LE.
//! After the entries comes a structured-text footer; the final 8 bytes are
//! the u64 LE byte offset of the footer start.

use super::scalar::Scalar;
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use std::path::Path;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"NTA1";

#[derive(Debug, Clone, Default)]
pub struct TensorArchive {
    entries: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub footer: String,
}

impl TensorArchive {
    pub fn new() -> Self {
        TensorArchive::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push((name.into(), shape, data));
    }

    pub fn push_array<T: Scalar>(&mut self, name: impl Into<String>, arr: &ArrayD<T>) {
        let shape = arr.shape().to_vec();
        let data = arr.iter().map(|v| v.as_f32()).collect();
        self.push(name, shape, data);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn get_array<T: Scalar>(&self, name: &str) -> Result<ArrayD<T>> {
        let (shape, data) = self
            .get(name)
            .ok_or_else(|| Error::ArtifactMismatch(format!("archive has no tensor '{name}'")))?;
        let vals: Vec<T> = data.iter().map(|&v| T::from_f32(v)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), vals)
            .map_err(|e| Error::ShapeMismatch(format!("tensor '{name}': {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(ARCHIVE_MAGIC);
        bytes.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, shape, data) in &self.entries {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::InvalidInput(format!("tensor name too long: {name}")));
            }
            if shape.len() > u8::MAX as usize {
                return Err(Error::InvalidInput(format!("tensor rank too high: {name}")));
            }
            bytes.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            bytes.extend_from_slice(name_bytes);
            bytes.push(shape.len() as u8);
            for &ext in shape {
                if ext > u32::MAX as usize {
                    return Err(Error::DimOverflow(format!("extent {ext} in '{name}'")));
                }
                bytes.extend_from_slice(&(ext as u32).to_le_bytes());
            }
            for &v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let footer_offset = bytes.len() as u64;
        bytes.extend_from_slice(self.footer.as_bytes());
        bytes.extend_from_slice(&footer_offset.to_le_bytes());
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 {
            return Err(Error::Truncated { expected: 16, got: bytes.len() });
        }
        if &bytes[0..4] != ARCHIVE_MAGIC {
            return Err(Error::BadMagic { found: bytes[0..4].to_vec(), expected: ARCHIVE_MAGIC });
        }
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let footer_offset =
            u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()) as usize;
        if footer_offset > bytes.len() - 8 {
            return Err(Error::Truncated { expected: footer_offset, got: bytes.len() - 8 });
        }
        let footer = String::from_utf8(bytes[footer_offset..bytes.len() - 8].to_vec())
            .map_err(|e| Error::InvalidInput(format!("footer is not UTF-8: {e}")))?;

        let mut entries = Vec::with_capacity(count);
        let mut pos = 8usize;
        let need = |pos: usize, n: usize, total: usize| -> Result<()> {
            if pos + n > total {
                Err(Error::Truncated { expected: pos + n, got: total })
            } else {
                Ok(())
            }
        };
        for _ in 0..count {
            need(pos, 2, footer_offset)?;
            let name_len = u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize;
            pos += 2;
            need(pos, name_len, footer_offset)?;
            let name = String::from_utf8(bytes[pos..pos + name_len].to_vec())
                .map_err(|e| Error::InvalidInput(format!("tensor name is not UTF-8: {e}")))?;
            pos += name_len;
            need(pos, 1, footer_offset)?;
            let rank = bytes[pos] as usize;
            pos += 1;
            need(pos, rank * 4, footer_offset)?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize);
                pos += 4;
            }
            let numel: usize = shape.iter().product();
            need(pos, numel * 4, footer_offset)?;
            let data: Vec<f32> = bytes[pos..pos + numel * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += numel * 4;
            entries.push((name, shape, data));
        }
        if pos != footer_offset {
            return Err(Error::Truncated { expected: footer_offset, got: pos });
        }
        Ok(TensorArchive { entries, footer })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.nta");
        let mut a = TensorArchive::new();
        a.push("w", vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 7.25, -0.125]);
        a.push("b", vec![1], vec![42.0]);
        a.footer = "kind = test\nsteps = 3\n".to_string();
        a.save(&path).unwrap();
        let b = TensorArchive::load(&path).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.footer, a.footer);
        let (shape, data) = b.get("w").unwrap();
        assert_eq!(shape, &[2, 3]);
        assert_eq!(data, a.get("w").unwrap().1);
        // Saving again is byte-identical.
        let bytes1 = std::fs::read(&path).unwrap();
        b.save(&path).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn bad_magic_and_truncation_are_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.nta");
        std::fs::write(&path, b"WOOF0000000000000000").unwrap();
        assert!(matches!(TensorArchive::load(&path), Err(Error::BadMagic { .. })));

        let mut a = TensorArchive::new();
        a.push("w", vec![4], vec![1.0; 4]);
        a.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(TensorArchive::load(&path).is_err());
    }
}
