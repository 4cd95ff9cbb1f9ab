//! Datasets, splits and the synthetic attribute-driven image generator.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CategoryAttributeMatrix;
use crate::tensor::Tensor;

const IMAGE_MAGIC: &[u8; 4] = b"GVSE";
const IMAGE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

/// Seen and unseen classes must be disjoint and together cover `0..num_classes`.
pub fn validate_split(split: &SplitSpec, num_classes: usize) -> Result<()> {
    let seen: BTreeSet<usize> = split.seen.iter().copied().collect();
    let unseen: BTreeSet<usize> = split.unseen.iter().copied().collect();
    let overlap: Vec<usize> = seen.intersection(&unseen).copied().collect();
    if !overlap.is_empty() {
        return Err(Error::Split(format!("classes {overlap:?} are both seen and unseen")));
    }
    if seen.len() != split.seen.len() || unseen.len() != split.unseen.len() {
        return Err(Error::Split("duplicate class in split".into()));
    }
    let outside: Vec<usize> = seen.union(&unseen).copied().filter(|&c| c >= num_classes).collect();
    if !outside.is_empty() {
        return Err(Error::Split(format!("classes {outside:?} exceed the {num_classes} known classes")));
    }
    let missing: Vec<usize> = (0..num_classes)
        .filter(|c| !seen.contains(c) && !unseen.contains(c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Split(format!("classes {missing:?} are neither seen nor unseen")));
    }
    if seen.is_empty() || unseen.is_empty() {
        return Err(Error::Split("both seen and unseen sets must be non-empty".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    cam: CategoryAttributeMatrix,
    split: SplitSpec,
}

/// Sample indices by role.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub train: Vec<usize>,
    pub test_seen: Vec<usize>,
    pub test_unseen: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, cam: CategoryAttributeMatrix, split: SplitSpec) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Validation(format!("images must be N x C x H x W, got {:?}", images.shape())));
        }
        let n = images.shape()[0];
        if labels.len() != n {
            return Err(Error::Validation(format!("{} labels for {n} images", labels.len())));
        }
        let k = cam.num_categories();
        if let Some(i) = labels.iter().position(|&l| l >= k) {
            return Err(Error::Validation(format!(
                "record {i}: label {} but only {k} classes",
                labels[i]
            )));
        }
        validate_split(&split, k)?;
        for &c in &split.seen {
            let count = labels.iter().filter(|&&l| l == c).count();
            if count < 2 {
                return Err(Error::Validation(format!("seen class {c} has {count} samples, need at least 2")));
            }
        }
        Ok(Self {
            images,
            labels,
            cam,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> Tensor {
        let [c, h, w] = self.image_shape();
        let len = c * h * w;
        Tensor::from_parts(vec![c, h, w], self.images.data()[i * len..(i + 1) * len].to_vec())
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn attributes(&self) -> &CategoryAttributeMatrix {
        &self.cam
    }

    pub fn split(&self) -> &SplitSpec {
        &self.split
    }

    pub fn num_classes(&self) -> usize {
        self.cam.num_categories()
    }

    /// Holds out the trailing `test_fraction` of every seen class (at least
    /// one sample, never all of them); every unseen sample is test data.
    pub fn partition(&self, test_fraction: f64) -> Result<Partition> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let mut p = Partition {
            train: Vec::new(),
            test_seen: Vec::new(),
            test_unseen: Vec::new(),
        };
        for &c in &self.split.seen {
            let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            let held = if test_fraction == 0.0 {
                0
            } else {
                ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1)
            };
            let cut = idx.len() - held;
            p.train.extend_from_slice(&idx[..cut]);
            p.test_seen.extend_from_slice(&idx[cut..]);
        }
        let unseen: BTreeSet<usize> = self.split.unseen.iter().copied().collect();
        p.test_unseen = (0..self.len()).filter(|i| unseen.contains(&self.labels[*i])).collect();
        p.train.sort_unstable();
        p.test_seen.sort_unstable();
        Ok(p)
    }

    pub fn save(&self, paths: &DatasetPaths) -> Result<()> {
        write_images(&paths.images, &self.images)?;
        write_labels(&paths.labels, &self.labels)?;
        self.cam.save(&paths.attributes)?;
        fs::write(&paths.split, serde_json::to_string_pretty(&self.split)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub attributes: PathBuf,
    pub split: PathBuf,
}

impl DatasetPaths {
    /// Conventional file names inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            images: dir.join("images.bin"),
            labels: dir.join("labels.bin"),
            attributes: dir.join("attributes.csv"),
            split: dir.join("split.json"),
        }
    }
}

pub fn load_dataset(paths: &DatasetPaths) -> Result<Dataset> {
    let images = read_images(&paths.images)?;
    let labels = read_labels(&paths.labels)?;
    let cam = CategoryAttributeMatrix::load(&paths.attributes)?;
    let split: SplitSpec = serde_json::from_str(&fs::read_to_string(&paths.split)?)?;
    Dataset::new(images, labels, cam, split)
}

pub fn write_images(path: &Path, images: &Tensor) -> Result<()> {
    if images.rank() != 4 {
        return Err(Error::Validation(format!("images must be rank 4, got {:?}", images.shape())));
    }
    let mut buf = Vec::with_capacity(24 + 8 * images.len());
    buf.extend_from_slice(IMAGE_MAGIC);
    buf.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
    for &d in images.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Validation(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in images.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

pub fn read_images(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    if bytes.len() < 24 || &bytes[..4] != IMAGE_MAGIC {
        return Err(Error::Validation(format!("{} is not an image tensor file", path.display())));
    }
    let version = le_u32(&bytes[4..8]);
    if version != IMAGE_VERSION {
        return Err(Error::Validation(format!("unsupported image file version {version}")));
    }
    let shape: Vec<usize> = (0..4).map(|i| le_u32(&bytes[8 + 4 * i..12 + 4 * i]) as usize).collect();
    let len: usize = shape.iter().product();
    if bytes.len() != 24 + 8 * len {
        return Err(Error::Validation(format!(
            "image file holds {} payload bytes, header {:?} needs {}",
            bytes.len() - 24,
            shape,
            8 * len
        )));
    }
    let data = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Validation(format!("image tensor: {e}")))
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut buf = Vec::with_capacity(4 * labels.len());
    for &l in labels {
        let l = u32::try_from(l).map_err(|_| Error::Validation(format!("label {l} exceeds u32")))?;
        buf.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Validation(format!(
            "label file length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes.chunks_exact(4).map(|c| le_u32(c) as usize).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternKind {
    /// Classes draw one or two attribute groups plus a few singletons.
    #[default]
    Blocks,
    /// Class `y` owns attribute `y` alone; needs `classes == attributes`.
    OnePerClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub num_unseen: usize,
    pub num_attributes: usize,
    pub image_size: usize,
    pub samples_per_class: usize,
    pub pattern_seed: u64,
    pub noise_sigma: f64,
    pub pattern: PatternKind,
    pub groups: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 12,
            num_unseen: 4,
            num_attributes: 20,
            image_size: 32,
            samples_per_class: 40,
            pattern_seed: 0,
            noise_sigma: 0.1,
            pattern: PatternKind::Blocks,
            groups: 4,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (k, m, s) = (self.num_classes, self.num_attributes, self.image_size);
        if k < 2 || m < 2 || s == 0 || self.samples_per_class < 2 {
            return Err(Error::Config("need 2+ classes, 2+ attributes, 2+ samples per class".into()));
        }
        if self.num_unseen == 0 || self.num_unseen >= k {
            return Err(Error::Config(format!("{} unseen of {k} classes", self.num_unseen)));
        }
        if m > s * s / 4 {
            return Err(Error::Config(format!("{m} attributes do not fit in a {s}x{s} image")));
        }
        if patch_side(m, s) == 0 {
            return Err(Error::Config(format!("{m} attributes leave no room for patches in {s}x{s}")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        match self.pattern {
            PatternKind::OnePerClass if k != m => Err(Error::Config(format!(
                "one-per-class pattern needs equal class and attribute counts, got {k} and {m}"
            ))),
            PatternKind::Blocks if self.groups == 0 || self.groups > m => {
                Err(Error::Config(format!("{} groups for {m} attributes", self.groups)))
            }
            _ => Ok(()),
        }
    }
}

/// Largest patch side `p` such that a grid of `p x p` patches holds `m` cells.
fn patch_side(m: usize, size: usize) -> usize {
    (1..=size).rev().find(|&p| (size / p) * (size / p) >= m).unwrap_or(0)
}

const PALETTE: [[f64; 3]; 5] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
];

/// Texture mask of attribute `j` at patch-local `(r, c)`: solid, horizontal
/// stripes, vertical stripes or checkerboard, cycling with `j / 5`.
fn texture(j: usize, r: usize, c: usize) -> f64 {
    let on = match (j / PALETTE.len()) % 4 {
        0 => true,
        1 => r % 2 == 0,
        2 => c % 2 == 0,
        _ => (r + c) % 2 == 0,
    };
    if on {
        1.0
    } else {
        0.0
    }
}

/// Noise-free rendering of one attribute vector.
pub fn render_clean(values: &[f64], size: usize) -> Tensor {
    let m = values.len();
    let p = patch_side(m, size);
    let per_row = size / p;
    let mut img = vec![0.0; 3 * size * size];
    for (j, &a) in values.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let (r0, c0) = ((j / per_row) * p, (j % per_row) * p);
        let color = PALETTE[j % PALETTE.len()];
        for r in 0..p {
            for c in 0..p {
                let t = texture(j, r, c);
                if t == 0.0 {
                    continue;
                }
                for (ch, &col) in color.iter().enumerate() {
                    img[ch * size * size + (r0 + r) * size + c0 + c] += a * col * t;
                }
            }
        }
    }
    Tensor::from_parts(vec![3, size, size], img)
}

fn sample_blocks(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    let (k, m, g) = (spec.num_classes, spec.num_attributes, spec.groups);
    let group_of = |j: usize| j * g / m;
    let mut rows: Vec<Vec<bool>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut row = vec![false; m];
        let mut groups: Vec<usize> = (0..g).collect();
        groups.shuffle(rng);
        let n_groups = rng.random_range(1..=2.min(g));
        for &gi in &groups[..n_groups] {
            let members: Vec<usize> = (0..m).filter(|&j| group_of(j) == gi).collect();
            for &j in &members {
                row[j] = rng.random_bool(0.8);
            }
            let count = members.iter().filter(|&&j| row[j]).count();
            if count < 2 {
                for &j in members.iter().take(2) {
                    row[j] = true;
                }
            }
        }
        let outside: Vec<usize> = (0..m).filter(|&j| !groups[..n_groups].contains(&group_of(j))).collect();
        for _ in 0..rng.random_range(0..=2) {
            if let Some(&j) = outside.choose(rng) {
                row[j] = true;
            }
        }
        if !rows.contains(&row) {
            rows.push(row);
        }
    }
    rows
}

/// Chooses `u` unseen classes whose attributes all still appear in a seen class.
fn choose_unseen(rows: &[Vec<bool>], u: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let k = rows.len();
    let m = rows[0].len();
    for _ in 0..200 {
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(rng);
        let mut unseen = order[..u].to_vec();
        unseen.sort_unstable();
        let covered = (0..m).all(|j| (0..k).any(|c| !unseen.contains(&c) && rows[c][j]));
        if covered {
            return Some(unseen);
        }
    }
    None
}

/// Attribute matrix and split from `spec.pattern_seed`; images and noise
/// from `rng`.
pub fn generate_synthetic(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    spec.validate()?;
    let (k, m, s) = (spec.num_classes, spec.num_attributes, spec.image_size);
    let mut prng = ChaCha8Rng::seed_from_u64(spec.pattern_seed);

    let (rows, unseen) = match spec.pattern {
        PatternKind::OnePerClass => {
            let rows: Vec<Vec<bool>> = (0..k).map(|y| (0..m).map(|j| j == y).collect()).collect();
            let unseen = ((k - spec.num_unseen)..k).collect();
            (rows, unseen)
        }
        PatternKind::Blocks => {
            let mut found = None;
            for _ in 0..100 {
                let rows = sample_blocks(spec, &mut prng);
                if let Some(u) = choose_unseen(&rows, spec.num_unseen, &mut prng) {
                    found = Some((rows, u));
                    break;
                }
            }
            found.ok_or_else(|| {
                Error::Config("could not place unseen classes so every attribute is seen in training".into())
            })?
        }
    };

    let mut values = vec![0.0; k * m];
    for (y, row) in rows.iter().enumerate() {
        for (j, &b) in row.iter().enumerate() {
            if b {
                values[y * m + j] = if spec.pattern == PatternKind::OnePerClass {
                    1.0
                } else {
                    prng.random_range(0.5..=1.0)
                };
            }
        }
    }
    let cam = CategoryAttributeMatrix::from_values(Tensor::from_parts(vec![k, m], values))?;
    let seen: Vec<usize> = (0..k).filter(|c| !unseen.contains(c)).collect();

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let n = k * spec.samples_per_class;
    let plane = 3 * s * s;
    let mut data = Vec::with_capacity(n * plane);
    let mut labels = Vec::with_capacity(n);
    let clean: Vec<Tensor> = (0..k).map(|y| render_clean(cam.row(y), s)).collect();
    for _ in 0..spec.samples_per_class {
        for (y, img) in clean.iter().enumerate() {
            if spec.noise_sigma == 0.0 {
                data.extend_from_slice(img.data());
            } else {
                data.extend(img.data().iter().map(|&v| v + noise.sample(rng)));
            }
            labels.push(y);
        }
    }
    let images = Tensor::from_parts(vec![n, 3, s, s], data);
    Dataset::new(images, labels, cam, SplitSpec { seen, unseen })
}
