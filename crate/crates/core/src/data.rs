//! IDX ingestion, synthetic fallback data and seeded minibatching.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Batch;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images flattened to rows of `[0, 1]` features plus class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Array2<f64>,
    pub labels: Vec<usize>,
    /// (rows, cols) of one image.
    pub image_dims: (usize, usize),
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Array2<f64>, labels: Vec<usize>, image_dims: (usize, usize)) -> Result<Self> {
        if images.nrows() == 0 {
            return Err(Error::Validation("dataset is empty".into()));
        }
        if labels.len() != images.nrows() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.nrows(),
                labels.len()
            )));
        }
        if image_dims.0 * image_dims.1 != images.ncols() {
            return Err(Error::Shape(format!(
                "image dims {image_dims:?} do not cover {} features",
                images.ncols()
            )));
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("features must lie in [0, 1]".into()));
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
            image_dims,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.images.ncols()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// First `n` rows (all rows if `n >= len`).
    pub fn head(&self, n: usize) -> Self {
        let n = n.clamp(1, self.len());
        Self {
            name: self.name.clone(),
            images: self.images.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            image_dims: self.image_dims,
        }
    }
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(format!("reading {what}"), e))?;
    Ok(u32::from_be_bytes(b))
}

fn open(path: &Path) -> Result<BufReader<std::fs::File>> {
    std::fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))
}

fn expect_magic(path: &Path, found: u32, expected: u32) -> Result<()> {
    if found != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

/// Read an IDX image file (`0x00000803`, n x rows x cols u8) and its label
/// file (`0x00000801`, n u8). Pixels are scaled by 1/255.
pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut img = open(images_path)?;
    let what = images_path.display().to_string();
    expect_magic(images_path, read_u32(&mut img, &what)?, IDX_IMAGES_MAGIC)?;
    let n = read_u32(&mut img, &what)? as usize;
    let rows = read_u32(&mut img, &what)? as usize;
    let cols = read_u32(&mut img, &what)? as usize;

    let mut lab = open(labels_path)?;
    let lwhat = labels_path.display().to_string();
    expect_magic(labels_path, read_u32(&mut lab, &lwhat)?, IDX_LABELS_MAGIC)?;
    let n_labels = read_u32(&mut lab, &lwhat)? as usize;
    if n_labels != n {
        return Err(Error::Consistency(format!(
            "{what} holds {n} images but {lwhat} holds {n_labels} labels"
        )));
    }

    let mut pixels = vec![0u8; n * rows * cols];
    img.read_exact(&mut pixels)
        .map_err(|e| Error::io(format!("reading pixels from {what}"), e))?;
    let mut labels = vec![0u8; n];
    lab.read_exact(&mut labels)
        .map_err(|e| Error::io(format!("reading labels from {lwhat}"), e))?;

    let images = Array2::from_shape_vec((n, rows * cols), pixels.into_iter().map(|p| f64::from(p) / 255.0).collect())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let name = images_path
        .file_name()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, images, labels.into_iter().map(usize::from).collect(), (rows, cols))
}

/// Inverse of [`read_idx`]; features are quantised back to bytes.
pub fn write_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let create = |p: &Path| {
        std::fs::File::create(p)
            .map(BufWriter::new)
            .map_err(|e| Error::io(format!("creating {}", p.display()), e))
    };
    let n = data.len() as u32;
    let (rows, cols) = data.image_dims;

    let mut img = create(images_path)?;
    let mut header = Vec::with_capacity(16);
    for v in [IDX_IMAGES_MAGIC, n, rows as u32, cols as u32] {
        header.extend_from_slice(&v.to_be_bytes());
    }
    let bytes: Vec<u8> = data.images.iter().map(|v| (v * 255.0).round() as u8).collect();
    img.write_all(&header)
        .and_then(|_| img.write_all(&bytes))
        .and_then(|_| img.flush())
        .map_err(|e| Error::io(format!("writing {}", images_path.display()), e))?;

    let mut lab = create(labels_path)?;
    if let Some(&bad) = data.labels.iter().find(|&&y| y > 255) {
        return Err(Error::Validation(format!("label {bad} does not fit in a byte")));
    }
    let labels: Vec<u8> = data.labels.iter().map(|&y| y as u8).collect();
    lab.write_all(&IDX_LABELS_MAGIC.to_be_bytes())
        .and_then(|_| lab.write_all(&n.to_be_bytes()))
        .and_then(|_| lab.write_all(&labels))
        .and_then(|_| lab.flush())
        .map_err(|e| Error::io(format!("writing {}", labels_path.display()), e))
}

/// Seed for the class templates; shared by every synthetic dataset so that
/// separately generated train and test sets describe the same classes.
const TEMPLATE_SEED: u64 = 0x5EED_7E3A;
const SYNTH_DIMS: (usize, usize) = (28, 28);
const SYNTH_CLASSES: usize = 10;
const TEMPLATE_DENSITY: f64 = 0.2;
const TEMPLATE_INTENSITY: f64 = 0.6;
const NOISE_AMPLITUDE: f64 = 0.4;

fn templates() -> Vec<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(TEMPLATE_SEED);
    let d = SYNTH_DIMS.0 * SYNTH_DIMS.1;
    (0..SYNTH_CLASSES)
        .map(|_| (0..d).map(|_| rng.random::<f64>() < TEMPLATE_DENSITY).collect())
        .collect()
}

/// Ten-class 28x28 images: a fixed random template per class plus uniform
/// noise, clamped to `[0, 1]`. Labels cycle through the classes in seeded
/// random order.
pub fn synth_dataset(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Validation("synthetic dataset needs n >= 1".into()));
    }
    let templates = templates();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = SYNTH_DIMS.0 * SYNTH_DIMS.1;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..SYNTH_CLASSES)).collect();
    let mut images = Array2::zeros((n, d));
    for (mut row, &y) in images.axis_iter_mut(Axis(0)).zip(&labels) {
        for (px, &on) in row.iter_mut().zip(&templates[y]) {
            let base = if on { TEMPLATE_INTENSITY } else { 0.0 };
            *px = (base + NOISE_AMPLITUDE * rng.random::<f64>()).clamp(0.0, 1.0);
        }
    }
    Dataset::new(format!("synth-{seed}"), images, labels, SYNTH_DIMS)
}

/// Template-free uniform-noise images; labels are all zero and carry no
/// meaning.
pub fn synth_outliers(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Validation("synthetic dataset needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = SYNTH_DIMS.0 * SYNTH_DIMS.1;
    let images = Array2::from_shape_simple_fn((n, d), || rng.random::<f64>());
    Dataset::new(format!("synth-outliers-{seed}"), images, vec![0; n], SYNTH_DIMS)
}

/// Seeded epoch-wise permutation of dataset indices.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    permutation: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    epoch: u64,
    rng: ChaCha8Rng,
}

impl BatchPlan {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::Config(format!("batch size {batch_size} must lie in 1..={n}")));
        }
        let mut plan = Self {
            permutation: (0..n).collect(),
            batch_size,
            cursor: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        plan.permutation.shuffle(&mut plan.rng);
        Ok(plan)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// Next slice of the permutation. A tail shorter than the batch size is
    /// skipped and a fresh permutation drawn.
    pub fn next_indices(&mut self) -> &[usize] {
        if self.cursor + self.batch_size > self.permutation.len() {
            self.permutation.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let start = self.cursor;
        self.cursor += self.batch_size;
        &self.permutation[start..self.cursor]
    }
}

pub fn next_batch(data: &Dataset, plan: &mut BatchPlan) -> Result<Batch> {
    if plan.permutation.len() != data.len() {
        return Err(Error::LengthMismatch {
            expected: data.len(),
            got: plan.permutation.len(),
        });
    }
    Ok(data.batch(plan.next_indices()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn write_raw(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn reads_hand_built_idx() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IDX_IMAGES_MAGIC, &[2, 28, 28]);
        img.extend((0..1568).map(|i| (i % 256) as u8));
        let mut lab = header(IDX_LABELS_MAGIC, &[2]);
        lab.extend([7, 3]);
        let data = read_idx(&write_raw(dir.path(), "img", &img), &write_raw(dir.path(), "lab", &lab)).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.feature_dim(), 784);
        assert_eq!(data.labels, vec![7, 3]);
        assert_eq!(data.images[[0, 255]], 1.0);
        assert_eq!(data.images[[0, 0]], 0.0);
        assert_eq!(data.images[[1, 0]], f64::from((784 % 256) as u8) / 255.0);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IDX_IMAGES_MAGIC, &[2, 2, 2]);
        img.extend([0u8; 8]);
        let img_ok = write_raw(dir.path(), "img", &img);
        let lab_ok = write_raw(dir.path(), "lab", &[header(IDX_LABELS_MAGIC, &[2]), vec![0, 1]].concat());

        let wrong = write_raw(dir.path(), "wrong", &[header(IDX_LABELS_MAGIC, &[2]), vec![0, 1]].concat());
        assert!(matches!(read_idx(&wrong, &lab_ok), Err(Error::Format { found: 0x801, .. })));

        let lab3 = write_raw(dir.path(), "lab3", &[header(IDX_LABELS_MAGIC, &[3]), vec![0, 1, 2]].concat());
        assert!(matches!(read_idx(&img_ok, &lab3), Err(Error::Consistency(_))));

        let short = write_raw(dir.path(), "short", &img[..img.len() - 1]);
        assert!(matches!(read_idx(&short, &lab_ok), Err(Error::Io { .. })));

        assert!(matches!(read_idx(&dir.path().join("missing"), &lab_ok), Err(Error::Io { .. })));
    }

    #[test]
    fn synth_is_seeded_and_bounded() {
        let a = synth_dataset(50, 3).unwrap();
        assert_eq!(a, synth_dataset(50, 3).unwrap());
        assert_ne!(a.images, synth_dataset(50, 4).unwrap().images);
        assert!(a.images.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.labels.iter().all(|&y| y < 10));
        let o = synth_outliers(20, 3).unwrap();
        assert!(o.images.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(synth_dataset(0, 1).is_err());
    }

    #[test]
    fn full_batch_is_permutation() {
        let data = synth_dataset(37, 1).unwrap();
        let mut plan = BatchPlan::new(37, 37, 5).unwrap();
        let b = next_batch(&data, &mut plan).unwrap();
        let mut seen: Vec<usize> = plan.permutation().to_vec();
        seen.sort_unstable();
        assert_eq!(seen, (0..37).collect::<Vec<_>>());
        assert_eq!(b.len(), 37);
    }

    #[test]
    fn equal_seeds_equal_sequences() {
        let mut a = BatchPlan::new(1000, 100, 9).unwrap();
        let mut b = BatchPlan::new(1000, 100, 9).unwrap();
        for _ in 0..25 {
            assert_eq!(a.next_indices(), b.next_indices());
        }
        assert!(a.epoch() >= 2);
    }

    #[test]
    fn epoch_covers_every_index() {
        let n = 60_000;
        let mut plan = BatchPlan::new(n, 100, 0).unwrap();
        for _epoch in 0..2 {
            let mut seen = HashSet::with_capacity(n);
            for _ in 0..600 {
                seen.extend(plan.next_indices().iter().copied());
            }
            assert_eq!(seen.len(), n);
        }
    }

    #[test]
    fn batch_plan_rejects_bad_sizes() {
        assert!(BatchPlan::new(10, 0, 0).is_err());
        assert!(BatchPlan::new(10, 11, 0).is_err());
    }
}
