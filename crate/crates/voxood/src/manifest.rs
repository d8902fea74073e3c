//! Dataset manifests: named splits of labeled volume files, persisted as
//! human-readable structured text with the generation seed recorded so a
//! dataset can be regenerated byte-identically.

use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::synth::{synth_volume, FamilyParams, SyntheticFamily};
use crate::volume::save_volume;
use rand::RngCore;
use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Binary label of a manifest entry; OOD labels carry a class string like
/// `gaussian_noise:0.1` or `far:sphere_grid`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Label {
    Id,
    Ood(String),
}

impl Label {
    pub fn is_ood(&self) -> bool {
        matches!(self, Label::Ood(_))
    }

    pub fn ood_class(&self) -> Option<&str> {
        match self {
            Label::Id => None,
            Label::Ood(c) => Some(c),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Id => f.write_str("id"),
            Label::Ood(class) => write!(f, "ood:{class}"),
        }
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "id" {
            Ok(Label::Id)
        } else if let Some(class) = s.strip_prefix("ood:") {
            if class.is_empty() {
                return Err(Error::InvalidInput("empty ood class in label".into()));
            }
            Ok(Label::Ood(class.to_string()))
        } else {
            Err(Error::InvalidInput(format!("unparseable label '{s}'")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory.
    pub path: PathBuf,
    pub label: Label,
}

impl ManifestEntry {
    /// Stable identifier used for per-input seeding and reports.
    pub fn id(&self) -> String {
        self.path.to_string_lossy().into_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    /// Directory entries are relative to; set when loaded or saved.
    root: PathBuf,
}

impl DatasetManifest {
    pub fn new(split: impl Into<String>, seed: u64, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.path.clone()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate path in manifest: {}",
                    e.path.display()
                )));
            }
        }
        Ok(DatasetManifest { split: split.into(), seed, entries, root: PathBuf::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub(crate) fn set_root(&mut self, root: impl Into<PathBuf>) {
        self.root = root.into();
    }

    /// Absolute (root-joined) path of an entry's volume file.
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::new();
        text.push_str("manifest_version = 1\n");
        text.push_str(&format!("split = {}\n", self.split));
        text.push_str(&format!("seed = {}\n", self.seed));
        text.push_str(&format!("entries = {}\n\n", self.entries.len()));
        for e in &self.entries {
            text.push_str(&format!("{}\t{}\n", e.path.display(), e.label));
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        // Write-then-rename so a crash never leaves a half-written manifest.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut split = None;
        let mut seed = None;
        let mut declared = None;
        let mut entries = Vec::new();
        let mut in_entries = false;
        for line in text.lines() {
            if line.trim().is_empty() {
                in_entries = true;
                continue;
            }
            if !in_entries {
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidInput(format!("bad manifest line '{line}'")))?;
                match key.trim() {
                    "manifest_version" => {
                        if value.trim() != "1" {
                            return Err(Error::UnsupportedVersion(
                                value.trim().parse().unwrap_or(0),
                            ));
                        }
                    }
                    "split" => split = Some(value.trim().to_string()),
                    "seed" => {
                        seed = Some(value.trim().parse().map_err(|_| {
                            Error::InvalidInput(format!("bad seed '{}'", value.trim()))
                        })?)
                    }
                    "entries" => {
                        declared = Some(value.trim().parse::<usize>().map_err(|_| {
                            Error::InvalidInput(format!("bad entry count '{}'", value.trim()))
                        })?)
                    }
                    other => {
                        return Err(Error::InvalidInput(format!("unknown manifest key '{other}'")))
                    }
                }
            } else {
                let (p, label) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::InvalidInput(format!("bad entry line '{line}'")))?;
                entries.push(ManifestEntry { path: PathBuf::from(p), label: label.parse()? });
            }
        }
        let split = split.ok_or_else(|| Error::InvalidInput("manifest missing split".into()))?;
        let seed = seed.ok_or_else(|| Error::InvalidInput("manifest missing seed".into()))?;
        if let Some(n) = declared {
            if n != entries.len() {
                return Err(Error::Truncated { expected: n, got: entries.len() });
            }
        }
        let mut m = DatasetManifest::new(split, seed, entries)?;
        m.root = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Ok(m)
    }
}

/// Split `count` items by ratio with the largest-remainder rule, so the split
/// is deterministic and sums exactly to `count`.
pub fn split_counts(count: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::InvalidInput("split ratios must be non-negative".into()));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("split ratios must sum to 1, got {total}")));
    }
    let raw: Vec<f64> = ratios.iter().map(|r| r * count as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|&x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for i in 0..(count - assigned) {
        counts[order[i % 3]] += 1;
    }
    Ok([counts[0], counts[1], counts[2]])
}

/// Output of [`make_dataset`]: the three in-distribution split manifests.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

/// Generate `count` volumes of one family under `out_dir/volumes/`, split them
/// into disjoint train/val/test sets, and persist the three manifests.
pub fn make_dataset(
    family: SyntheticFamily,
    count: usize,
    seed: u64,
    ratios: [f64; 3],
    dims: (usize, usize, usize),
    params: &FamilyParams,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetSplits> {
    if count == 0 {
        return Err(Error::InvalidInput("dataset count must be positive".into()));
    }
    let [n_train, n_val, n_test] = split_counts(count, ratios)?;
    if n_val == 0 {
        return Err(Error::InvalidInput(
            "validation split is empty; z-scoring requires validation data".into(),
        ));
    }
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidInput("train and test splits must be non-empty".into()));
    }
    let out_dir = out_dir.as_ref();
    let paths = generate_family(family, count, seed, dims, params, out_dir, "id")?;
    let mut iter = paths.into_iter();
    let take = |iter: &mut std::vec::IntoIter<PathBuf>, n: usize| -> Vec<ManifestEntry> {
        iter.take(n).map(|path| ManifestEntry { path, label: Label::Id }).collect()
    };
    let mk = |split: &str, entries: Vec<ManifestEntry>| -> Result<DatasetManifest> {
        let mut m = DatasetManifest::new(split, seed, entries)?;
        m.root = out_dir.to_path_buf();
        m.save(out_dir.join(format!("{split}.manifest")))?;
        Ok(m)
    };
    let train = mk("train", take(&mut iter, n_train))?;
    let val = mk("val", take(&mut iter, n_val))?;
    let test = mk("test", take(&mut iter, n_test))?;
    Ok(DatasetSplits { train, val, test })
}

/// Generate a single-split far-OOD test set for one family.
pub fn make_family_testset(
    family: SyntheticFamily,
    count: usize,
    seed: u64,
    dims: (usize, usize, usize),
    params: &FamilyParams,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::InvalidInput("dataset count must be positive".into()));
    }
    let out_dir = out_dir.as_ref();
    let paths = generate_family(family, count, seed, dims, params, out_dir, "far")?;
    let label = Label::Ood(format!("far:{}", family.id()));
    let entries =
        paths.into_iter().map(|path| ManifestEntry { path, label: label.clone() }).collect();
    let mut m = DatasetManifest::new(format!("far_{}", family.id()), seed, entries)?;
    m.root = out_dir.to_path_buf();
    m.save(out_dir.join(format!("far_{}.manifest", family.id())))?;
    Ok(m)
}

fn generate_family(
    family: SyntheticFamily,
    count: usize,
    seed: u64,
    dims: (usize, usize, usize),
    params: &FamilyParams,
    out_dir: &Path,
    role: &str,
) -> Result<Vec<PathBuf>> {
    let vol_dir = out_dir.join("volumes");
    std::fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let mut paths = Vec::with_capacity(count);
    let mut seen = HashSet::new();
    for i in 0..count {
        let vol_seed = rng_for(seed, &format!("dataset/{role}/{}/{i}", family.id())).next_u64();
        let v = synth_volume(family, vol_seed, dims, params)?;
        let rel = PathBuf::from(format!("volumes/{role}_{}_{i:04}.vol", family.id()));
        if !seen.insert(rel.clone()) {
            return Err(Error::InvalidInput(format!("overlapping output path {}", rel.display())));
        }
        save_volume(&v, out_dir.join(&rel))?;
        paths.push(rel);
    }
    Ok(paths)
}
