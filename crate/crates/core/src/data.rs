//! Datasets, IDX ingestion, synthetic generators and replayable batch schedules.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, IdxError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the directory that holds MNIST IDX files.
pub const DATA_DIR_ENV: &str = "REVLEARN_DATA_DIR";

/// Row-major `len x features` inputs with integer labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    features: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, features: usize, classes: usize) -> Result<Self> {
        if features == 0 || inputs.len() != labels.len() * features {
            return Err(Error::Data(format!(
                "{} input values do not form {} rows of {features} features",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        Ok(Self { inputs, labels, features, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.features..(i + 1) * self.features]
    }

    /// Rows `idx` as a flat row-major block plus their labels.
    pub fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.features);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.row(i));
            y.push(self.labels[i]);
        }
        (x, y)
    }

    /// First `n` rows and the remainder.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let cut = n * self.features;
        let head = Dataset {
            inputs: self.inputs[..cut].to_vec(),
            labels: self.labels[..n].to_vec(),
            features: self.features,
            classes: self.classes,
        };
        let tail = Dataset {
            inputs: self.inputs[cut..].to_vec(),
            labels: self.labels[n..].to_vec(),
            features: self.features,
            classes: self.classes,
        };
        (head, tail)
    }

    pub fn take(&self, n: usize) -> Dataset {
        self.split(n).0
    }
}

fn read_u32_be(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(IdxError::Truncated { needed: at + 4, found: bytes.len() })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = match bytes.get(0..4) {
        Some(b) => u32::from_be_bytes(b.try_into().unwrap()),
        None => 0,
    };
    if found != expected {
        return Err(IdxError::BadMagic { found, expected });
    }
    Ok(())
}

fn check_payload(bytes: &[u8], header: usize, needed: usize) -> Result<(), IdxError> {
    let have = bytes.len() - header;
    if have < needed {
        return Err(IdxError::Truncated { needed: header + needed, found: bytes.len() });
    }
    if have > needed {
        return Err(IdxError::DimensionMismatch(format!(
            "header declares {needed} payload bytes but the file has {have}"
        )));
    }
    Ok(())
}

/// Decoded IDX image file: `count` images of `rows x cols` pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let needed = count
        .checked_mul(rows)
        .and_then(|x| x.checked_mul(cols))
        .ok_or_else(|| IdxError::DimensionMismatch(format!("{count}x{rows}x{cols} overflows")))?;
    check_payload(bytes, 16, needed)?;
    let pixels = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(IdxImages { count, rows, cols, pixels })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = read_u32_be(bytes, 4)? as usize;
    check_payload(bytes, 8, count)?;
    Ok(bytes[8..].to_vec())
}

/// Encodes pixels in `[0, 1]` as bytes `round(255 p)`.
pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[f64]) -> Result<Vec<u8>> {
    if pixels.len() != count * rows * cols {
        return Err(Error::Shape(format!("{} pixels for {count}x{rows}x{cols} images", pixels.len())));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for &p in pixels {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Data(format!("pixel {p} outside [0, 1] cannot be stored as IDX")));
        }
        out.push((p * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let b = u8::try_from(l).map_err(|_| Error::Data(format!("label {l} does not fit a byte")))?;
        out.push(b);
    }
    Ok(out)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an image/label IDX pair. Images are flattened to `rows*cols` features.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = parse_idx_images(&read_file(images)?)?;
    let lab = parse_idx_labels(&read_file(labels)?)?;
    if img.count != lab.len() {
        return Err(IdxError::DimensionMismatch(format!("{} images but {} labels", img.count, lab.len())).into());
    }
    let labels: Vec<usize> = lab.into_iter().map(usize::from).collect();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Dataset::new(img.pixels, labels, img.rows * img.cols, classes)
}

/// Writes `data` as an IDX pair. Features must factor as `rows * cols`.
pub fn write_idx(data: &Dataset, rows: usize, cols: usize, images: &Path, labels: &Path) -> Result<()> {
    if rows * cols != data.features() {
        return Err(Error::Shape(format!("{rows}x{cols} images for {} features", data.features())));
    }
    let img = encode_idx_images(data.len(), rows, cols, data.inputs())?;
    let lab = encode_idx_labels(data.labels())?;
    fs::write(images, img).map_err(|e| Error::io(images, e))?;
    fs::write(labels, lab).map_err(|e| Error::io(labels, e))?;
    Ok(())
}

/// The MNIST training pair under `REVLEARN_DATA_DIR`, if both files exist.
pub fn mnist_paths() -> Option<(PathBuf, PathBuf)> {
    let dir = PathBuf::from(std::env::var_os(DATA_DIR_ENV)?);
    let images = dir.join("train-images-idx3-ubyte");
    let labels = dir.join("train-labels-idx1-ubyte");
    (images.is_file() && labels.is_file()).then_some((images, labels))
}

/// Gaussian class clusters. Class `c` is centred on `separation / sqrt(2)`
/// times basis direction `c mod features`, so distinct centres sit
/// `separation` apart when `classes <= features`. Labels cycle `0..k` before
/// a seeded shuffle, keeping the histogram balanced within one.
pub fn synthetic_classification(seed: u64, n: usize, features: usize, classes: usize, separation: f64) -> Result<Dataset> {
    if classes < 2 || n < classes || features == 0 {
        return Err(Error::Data(format!(
            "synthetic data needs n >= classes >= 2 and features >= 1 (got n={n}, classes={classes}, features={features})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let offset = separation / std::f64::consts::SQRT_2;
    let mut inputs = Vec::with_capacity(n * features);
    for &label in &labels {
        for j in 0..features {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let centre = if j == label % features { offset } else { 0.0 };
            inputs.push(centre + noise);
        }
    }
    Dataset::new(inputs, labels, features, classes)
}

/// Per-iteration minibatch indices. Each epoch is a fresh seeded permutation
/// cut into consecutive blocks; the final block of an epoch may be short.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSchedule {
    batches: Vec<Vec<usize>>,
}

impl BatchSchedule {
    pub fn new(seed: u64, n: usize, batch_size: usize, iterations: usize) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::Data(format!("batch size {batch_size} must be in 1..={n}")));
        }
        let per_epoch = n.div_ceil(batch_size);
        let mut batches = Vec::with_capacity(iterations);
        let mut epoch = 0u64;
        while batches.len() < iterations {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            for chunk in perm.chunks(batch_size).take(per_epoch) {
                if batches.len() == iterations {
                    break;
                }
                batches.push(chunk.to_vec());
            }
            epoch += 1;
        }
        Ok(Self { batches })
    }

    /// Every iteration sees the whole set, in order.
    pub fn full(n: usize, iterations: usize) -> Self {
        Self { batches: vec![(0..n).collect(); iterations] }
    }

    pub fn iterations(&self) -> usize {
        self.batches.len()
    }

    /// Batch for zero-based iteration `t`.
    pub fn batch(&self, t: usize) -> &[usize] {
        &self.batches[t]
    }
}

pub fn batch_schedule(seed: u64, n: usize, batch_size: usize, iterations: usize) -> Result<BatchSchedule> {
    BatchSchedule::new(seed, n, batch_size, iterations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_is_bad_magic() {
        assert!(matches!(parse_idx_images(&[]), Err(IdxError::BadMagic { found: 0, .. })));
        assert!(matches!(parse_idx_labels(&[]), Err(IdxError::BadMagic { .. })));
        assert!(matches!(parse_idx_images(&IDX_LABELS_MAGIC.to_be_bytes()), Err(IdxError::BadMagic { .. })));
    }

    #[test]
    fn truncated_and_oversized_payloads_are_distinct() {
        let bytes = encode_idx_images(2, 2, 2, &[0.0; 8]).unwrap();
        assert!(matches!(parse_idx_images(&bytes[..bytes.len() - 1]), Err(IdxError::Truncated { .. })));
        assert!(matches!(parse_idx_images(&bytes[..10]), Err(IdxError::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(parse_idx_images(&long), Err(IdxError::DimensionMismatch(_))));
        assert_eq!(parse_idx_images(&bytes).unwrap().count, 2);
    }

    #[test]
    fn canonical_mnist_header_shape() {
        // Header only plus a zeroed payload of the canonical size.
        let mut bytes = Vec::new();
        for v in [IDX_IMAGES_MAGIC, 60_000, 28, 28] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        bytes.resize(16 + 60_000 * 784, 0);
        let img = parse_idx_images(&bytes).unwrap();
        assert_eq!((img.count, img.rows * img.cols), (60_000, 784));
    }

    #[test]
    fn image_label_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        fs::write(&ip, encode_idx_images(2, 1, 1, &[0.0, 1.0]).unwrap()).unwrap();
        fs::write(&lp, encode_idx_labels(&[1, 2, 3]).unwrap()).unwrap();
        let err = load_idx(&ip, &lp).unwrap_err();
        assert!(matches!(err, Error::Idx(IdxError::DimensionMismatch(_))));
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = synthetic_classification(7, 101, 5, 4, 3.0).unwrap();
        let b = synthetic_classification(7, 101, 5, 4, 3.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synthetic_classification(8, 101, 5, 4, 3.0).unwrap());
        let mut hist = [0usize; 4];
        for &l in a.labels() {
            hist[l] += 1;
        }
        assert!(hist.iter().max().unwrap() - hist.iter().min().unwrap() <= 1);
        assert!(synthetic_classification(0, 1, 5, 2, 3.0).is_err());
    }

    #[test]
    fn batch_schedule_properties() {
        let full = BatchSchedule::new(0, 10, 10, 3).unwrap();
        for t in 0..3 {
            let mut b = full.batch(t).to_vec();
            b.sort();
            assert_eq!(b, (0..10).collect::<Vec<_>>());
        }
        let s = BatchSchedule::new(1, 10, 3, 8).unwrap();
        let mut epoch: Vec<usize> = (0..4).flat_map(|t| s.batch(t).to_vec()).collect();
        epoch.sort();
        assert_eq!(epoch, (0..10).collect::<Vec<_>>());
        assert_eq!(s, BatchSchedule::new(1, 10, 3, 8).unwrap());
        assert_ne!(s, BatchSchedule::new(2, 10, 3, 8).unwrap());
        assert!(BatchSchedule::new(0, 3, 4, 1).is_err());
    }

    proptest! {
        #[test]
        fn idx_round_trip(count in 1usize..6, rows in 1usize..5, cols in 1usize..5,
                          seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pixels: Vec<f64> = (0..count * rows * cols).map(|_| rng.random::<u8>() as f64 / 255.0).collect();
            let labels: Vec<usize> = (0..count).map(|_| rng.random_range(0..10)).collect();
            let classes = labels.iter().max().unwrap() + 1;
            let data = Dataset::new(pixels, labels, rows * cols, classes).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
            write_idx(&data, rows, cols, &ip, &lp).unwrap();
            prop_assert_eq!(load_idx(&ip, &lp).unwrap(), data);
        }
    }
}
