//! In-distribution glyphs, OOD sources, IDX ingestion and seeded splitting.
//!
//! Every generator is a pure function of its parameters and seed. Sample
//! `i` draws from its own stream (`seed::per_sample(seed, i)`), so a set of
//! `n` samples is a prefix of any larger set built with the same seed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError, DATASET_MAGIC};
use crate::seed;
use crate::tensor::{Tensor, TensorError};

pub const GLYPH_SIZE: usize = 16;
pub const GLYPH_CLASSES: usize = 10;
/// Label carried by samples that have no class (OOD sets).
pub const NO_LABEL: i64 = -1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("sample count must be positive")]
    EmptyCount,
    #[error("unknown OOD kind `{0}` (expected uniform-noise, gaussian-noise or textures)")]
    UnknownOodKind(String),
    #[error("IDX {file}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        file: String,
        found: u32,
        expected: u32,
    },
    #[error("IDX {file}: dimension mismatch: {reason}")]
    DimensionMismatch { file: String, reason: String },
    #[error("IDX count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid split fractions {0:?}: must be positive and sum to 1")]
    InvalidFractions(Vec<f64>),
    #[error("split part {part} would be empty")]
    EmptyPart { part: usize },
    #[error("dataset `{tag}` has unlabeled samples where class labels are required")]
    Unlabeled { tag: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Where a dataset's samples come from, which fixes their anomaly label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    InDistribution,
    Adversarial,
    OutOfDistribution,
}

impl SourceKind {
    /// 0 for normal inputs, 1 for anomalous ones.
    pub fn anomaly_label(self) -> i8 {
        match self {
            SourceKind::InDistribution => 0,
            SourceKind::Adversarial | SourceKind::OutOfDistribution => 1,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            SourceKind::InDistribution => "in-distribution",
            SourceKind::Adversarial => "adversarial",
            SourceKind::OutOfDistribution => "out-of-distribution",
        }
    }
}

impl FromStr for SourceKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "in-distribution" => Ok(Self::InDistribution),
            "adversarial" => Ok(Self::Adversarial),
            "out-of-distribution" => Ok(Self::OutOfDistribution),
            other => Err(other.to_string()),
        }
    }
}

/// Images `[count, channels, H, W]` in `[0, 1]` with per-sample labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<i64>,
    pub source_tag: String,
    pub kind: SourceKind,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample, `[channels, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Labels as class indices; fails on unlabeled samples.
    pub fn class_labels(&self) -> Result<Vec<usize>, DataError> {
        self.labels
            .iter()
            .map(|&l| usize::try_from(l).map_err(|_| DataError::Unlabeled {
                tag: self.source_tag.clone(),
            }))
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        Ok(Self {
            images: self.images.select_outer(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            source_tag: self.source_tag.clone(),
            kind: self.kind,
            seed: self.seed,
        })
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Result<Self, DataError> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(DATASET_MAGIC);
        c.set("source_tag", &self.source_tag);
        c.set("kind", self.kind.as_str());
        c.set("anomaly_label", self.kind.anomaly_label());
        c.set("seed", self.seed);
        c.set("count", self.len());
        c.records.push(("images".into(), self.images.clone()));
        c.records.push((
            "labels".into(),
            Tensor::vector(self.labels.iter().map(|&l| l as f64).collect()),
        ));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, DataError> {
        let images = c.record("images")?.clone();
        let labels_t = c.record("labels")?;
        let count: usize = c.parse("count")?;
        if images.rank() != 4 || images.shape()[0] != count || labels_t.len() != count {
            return Err(ContainerError::Mismatch(format!(
                "images {:?} / {} labels disagree with count {count}",
                images.shape(),
                labels_t.len()
            ))
            .into());
        }
        let kind = c
            .get("kind")?
            .parse()
            .map_err(|k| ContainerError::CorruptHeader(format!("unknown dataset kind {k:?}")))?;
        Ok(Self {
            images,
            labels: labels_t.data().iter().map(|&l| l as i64).collect(),
            source_tag: c.get("source_tag")?.to_string(),
            kind,
            seed: c.parse("seed")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_container(&Container::load(path, DATASET_MAGIC)?)
    }
}

/// Shape membership test for glyph class `class` at offset `(u, v)` from
/// the glyph centre (pixel-centre coordinates, so `u, v` are half-integers).
fn glyph_covers(class: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    let in_box = au <= 5.0 && av <= 5.0;
    let hbar = av <= 1.0 && au <= 5.0;
    let vbar = au <= 1.0 && av <= 5.0;
    let diag = (u - v).abs() <= 1.0 && in_box;
    match class {
        0 => hbar,
        1 => vbar,
        2 => hbar || vbar,
        3 => diag || ((u + v).abs() <= 1.0 && in_box),
        4 => ((u * u + v * v).sqrt() - 4.5).abs() <= 0.9,
        5 => {
            let m = au.max(av);
            (3.5..=5.0).contains(&m)
        }
        6 => au.max(av) <= 3.0,
        7 => diag,
        8 => ((-5.0..=-3.0).contains(&v) && au <= 5.0) || vbar,
        9 => ((-5.0..=-3.0).contains(&u) && av <= 5.0) || ((3.0..=5.0).contains(&v) && au <= 5.0),
        _ => unreachable!("glyph class {class}"),
    }
}

fn add_noise_and_clip(pixels: &mut [f64], rng: &mut impl Rng, sigma: f64) {
    let noise = Normal::new(0.0, sigma).unwrap();
    for p in pixels {
        *p = (*p + noise.sample(rng)).clamp(0.0, 1.0);
    }
}

/// One 16x16 glyph of the given class.
fn draw_glyph(class: usize, sample_seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(sample_seed);
    let dx = rng.gen_range(-2i32..=2) as f64;
    let dy = rng.gen_range(-2i32..=2) as f64;
    let intensity = rng.gen_range(0.7..=1.0);
    let centre = (GLYPH_SIZE as f64 - 1.0) / 2.0;
    let mut px = vec![0.0; GLYPH_SIZE * GLYPH_SIZE];
    for r in 0..GLYPH_SIZE {
        for c in 0..GLYPH_SIZE {
            let u = c as f64 - centre - dx;
            let v = r as f64 - centre - dy;
            if glyph_covers(class, u, v) {
                px[r * GLYPH_SIZE + c] = intensity;
            }
        }
    }
    add_noise_and_clip(&mut px, &mut rng, 0.05);
    px
}

/// Class-balanced procedural glyphs: sample `i` has class `i % 10`.
pub fn gen_glyphs(count: usize, seed: u64) -> Result<Dataset, DataError> {
    if count == 0 {
        return Err(DataError::EmptyCount);
    }
    let mut data = Vec::with_capacity(count * GLYPH_SIZE * GLYPH_SIZE);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % GLYPH_CLASSES;
        data.extend(draw_glyph(class, seed::per_sample(seed, i)));
        labels.push(class as i64);
    }
    Ok(Dataset {
        images: Tensor::new(vec![count, 1, GLYPH_SIZE, GLYPH_SIZE], data)?,
        labels,
        source_tag: "glyphs".into(),
        kind: SourceKind::InDistribution,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodKind {
    UniformNoise,
    GaussianNoise,
    Textures,
}

impl OodKind {
    pub const ALL: [OodKind; 3] = [OodKind::UniformNoise, OodKind::GaussianNoise, OodKind::Textures];

    pub fn as_str(self) -> &'static str {
        match self {
            OodKind::UniformNoise => "uniform-noise",
            OodKind::GaussianNoise => "gaussian-noise",
            OodKind::Textures => "textures",
        }
    }
}

impl fmt::Display for OodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OodKind {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        OodKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| DataError::UnknownOodKind(s.to_string()))
    }
}

fn draw_texture(sample_seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(sample_seed);
    let n = GLYPH_SIZE;
    let mut px = vec![0.0; n * n];
    match rng.gen_range(0..3) {
        0 => {
            // checkerboard
            let period = rng.gen_range(2..=4);
            let (ox, oy) = (rng.gen_range(0..period), rng.gen_range(0..period));
            let (a, b) = (rng.gen_range(0.0..0.5), rng.gen_range(0.5..1.0));
            for r in 0..n {
                for c in 0..n {
                    let parity = ((r + oy) / period + (c + ox) / period) % 2;
                    px[r * n + c] = if parity == 0 { a } else { b };
                }
            }
        }
        1 => {
            // linear ramp
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let (lo, hi) = (rng.gen_range(0.0..0.4), rng.gen_range(0.6..1.0));
            let half = (n as f64 - 1.0) / 2.0;
            let reach = half * std::f64::consts::SQRT_2;
            for r in 0..n {
                for c in 0..n {
                    let t = ((c as f64 - half) * theta.cos() + (r as f64 - half) * theta.sin()) / reach;
                    px[r * n + c] = lo + (hi - lo) * (t + 1.0) / 2.0;
                }
            }
        }
        _ => {
            // sinusoidal stripes
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let freq = rng.gen_range(0.1..0.4);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for r in 0..n {
                for c in 0..n {
                    let t = c as f64 * theta.cos() + r as f64 * theta.sin();
                    px[r * n + c] = 0.5 + 0.5 * (std::f64::consts::TAU * freq * t + phase).sin();
                }
            }
        }
    }
    add_noise_and_clip(&mut px, &mut rng, 0.05);
    px
}

/// Out-of-distribution images shaped like the glyphs, labelled [`NO_LABEL`].
pub fn gen_ood(kind: OodKind, count: usize, seed: u64) -> Result<Dataset, DataError> {
    if count == 0 {
        return Err(DataError::EmptyCount);
    }
    let pixels = GLYPH_SIZE * GLYPH_SIZE;
    let mut data = Vec::with_capacity(count * pixels);
    for i in 0..count {
        let s = seed::per_sample(seed, i);
        match kind {
            OodKind::UniformNoise => {
                let mut rng = seed::rng(s);
                data.extend((0..pixels).map(|_| rng.gen::<f64>()));
            }
            OodKind::GaussianNoise => {
                let mut rng = seed::rng(s);
                let normal: Normal<f64> = Normal::new(0.5, 0.25).unwrap();
                data.extend((0..pixels).map(|_| normal.sample(&mut rng).clamp(0.0, 1.0)));
            }
            OodKind::Textures => data.extend(draw_texture(s)),
        }
    }
    Ok(Dataset {
        images: Tensor::new(vec![count, 1, GLYPH_SIZE, GLYPH_SIZE], data)?,
        labels: vec![NO_LABEL; count],
        source_tag: kind.as_str().into(),
        kind: SourceKind::OutOfDistribution,
        seed,
    })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, file: &str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::DimensionMismatch {
            file: file.to_string(),
            reason: format!("header ends before byte {}", at + 4),
        })
}

/// Parses an IDX image file (`0x00000803`) and label file (`0x00000801`).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img_name = images_path.display().to_string();
    let lbl_name = labels_path.display().to_string();
    let img = read_file(images_path)?;
    let lbl = read_file(labels_path)?;

    let magic = be_u32(&img, 0, &img_name)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            file: img_name,
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let magic = be_u32(&lbl, 0, &lbl_name)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            file: lbl_name,
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = be_u32(&img, 4, &img_name)? as usize;
    let rows = be_u32(&img, 8, &img_name)? as usize;
    let cols = be_u32(&img, 12, &img_name)? as usize;
    let n_labels = be_u32(&lbl, 4, &lbl_name)? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(DataError::DimensionMismatch {
            file: img_name,
            reason: format!("zero dimension in {n}x{rows}x{cols}"),
        });
    }
    let expected = 16 + n * rows * cols;
    if img.len() != expected {
        return Err(DataError::DimensionMismatch {
            file: img_name,
            reason: format!("{n}x{rows}x{cols} needs {expected} bytes, file has {}", img.len()),
        });
    }
    if lbl.len() != 8 + n_labels {
        return Err(DataError::DimensionMismatch {
            file: lbl_name,
            reason: format!("{n_labels} labels need {} bytes, file has {}", 8 + n_labels, lbl.len()),
        });
    }
    if n != n_labels {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let data = img[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, rows, cols], data)?,
        labels: lbl[8..].iter().map(|&b| b as i64).collect(),
        source_tag: "idx".into(),
        kind: SourceKind::InDistribution,
        seed: 0,
    })
}

/// Largest-remainder apportionment of `n` items over `fractions`.
fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| n as f64 * f).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|r| (r + 1e-9).floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - sizes[a] as f64;
        let fb = raw[b] - sizes[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

pub fn validate_fractions(fractions: &[f64]) -> Result<(), DataError> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidFractions(fractions.to_vec()));
    }
    Ok(())
}

/// Stratified seeded partition of `0..strata.len()`.
///
/// A single seeded permutation orders all items; each stratum is cut into
/// contiguous pieces of that order sized by largest-remainder apportionment,
/// and each part keeps the permutation order.
pub fn split_indices(strata: &[i64], fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>, DataError> {
    validate_fractions(fractions)?;
    let mut perm: Vec<usize> = (0..strata.len()).collect();
    perm.shuffle(&mut seed::rng(seed));
    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for &i in &perm {
        groups.entry(strata[i]).or_default().push(i);
    }
    let mut position = vec![0usize; strata.len()];
    for (pos, &i) in perm.iter().enumerate() {
        position[i] = pos;
    }
    let mut parts = vec![Vec::new(); fractions.len()];
    for members in groups.values() {
        let mut start = 0;
        for (part, size) in apportion(members.len(), fractions).into_iter().enumerate() {
            parts[part].extend_from_slice(&members[start..start + size]);
            start += size;
        }
    }
    for (part, p) in parts.iter_mut().enumerate() {
        if p.is_empty() {
            return Err(DataError::EmptyPart { part });
        }
        p.sort_by_key(|&i| position[i]);
    }
    Ok(parts)
}

/// Splits a dataset by `fractions`, stratified on labels.
pub fn split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>, DataError> {
    split_indices(&dataset.labels, fractions, seed)?
        .iter()
        .map(|idx| dataset.subset(idx))
        .collect()
}
