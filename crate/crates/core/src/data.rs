//! Image classification data: a synthetic texture task, the CIFAR-10 binary
//! format, splitting and batching.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte followed by 1024 red, 1024 green and 1024 blue bytes.
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Images `[N, 3, H, W]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::contract(format!("images must be (N, 3, H, W), got {shape:?}")));
        }
        if shape[0] != labels.len() {
            return Err(Error::contract(format!("{} images but {} labels", shape[0], labels.len())));
        }
        if labels.is_empty() {
            return Err(Error::contract("dataset is empty"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Dataset { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Shuffled minibatches for one epoch; the order depends only on
    /// `(seed, epoch)` and the last batch may be short.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
        Ok(batch_order(self.len(), batch_size, seed, epoch)?
            .into_iter()
            .map(|rows| Batch { images: self.images.select_rows(&rows), labels: rows.iter().map(|&r| self.labels[r]).collect() })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Row indices of each batch of one epoch.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("search.batch_size", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Disjoint shuffled partition; the first part holds `round(fraction * n)`
/// samples.
pub fn split(dataset: &Dataset, fraction: Float, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("search.split_fraction", format!("{fraction} is not in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let cut = (fraction as f64 * dataset.len() as f64).round() as usize;
    let (a, b) = order.split_at(cut);
    if a.is_empty() || b.is_empty() {
        return Err(Error::config(
            "search.split_fraction",
            format!("splitting {} samples at {fraction} leaves an empty part", dataset.len()),
        ));
    }
    Ok((dataset.subset(a), dataset.subset(b)))
}

/// Mirrors every image left to right.
pub fn flip_horizontal(images: &Tensor, rows: &[bool]) -> Tensor {
    let mut out = images.clone();
    let w = images.shape()[3];
    let per_image = images.numel() / images.shape()[0].max(1);
    for (img, &flip) in out.data_mut().chunks_mut(per_image).zip(rows) {
        if flip {
            for row in img.chunks_mut(w) {
                row.reverse();
            }
        }
    }
    out
}

/// Random horizontal flips, one coin per image, keyed by `(seed, epoch, batch)`.
pub fn random_flips(count: usize, seed: u64, epoch: usize, batch: usize) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f11b);
    rng.set_stream(((epoch as u64) << 32) | batch as u64);
    (0..count).map(|_| rng.random_bool(0.5)).collect()
}

/// Per-channel standardization computed on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<Float>,
    pub std: Vec<Float>,
}

impl Normalizer {
    pub fn fit(dataset: &Dataset) -> Normalizer {
        let s = dataset.images.shape();
        let plane = s[2] * s[3];
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for (k, chunk) in dataset.images.data().chunks(plane).enumerate() {
            for &v in chunk {
                sum[k % 3] += v as f64;
                sq[k % 3] += (v as f64) * (v as f64);
            }
        }
        let n = (s[0] * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| ((q / n - m * m).max(0.0).sqrt()).max(1e-6) as Float).collect();
        Normalizer { mean: mean.into_iter().map(|m| m as Float).collect(), std }
    }

    pub fn apply(&self, dataset: &Dataset) -> Dataset {
        let s = dataset.images.shape();
        let plane = s[2] * s[3];
        let mut images = dataset.images.clone();
        for (k, chunk) in images.data_mut().chunks_mut(plane).enumerate() {
            let (m, sd) = (self.mean[k % 3], self.std[k % 3]);
            for v in chunk {
                *v = (*v - m) / sd;
            }
        }
        Dataset { images, labels: dataset.labels.clone(), classes: dataset.classes }
    }
}

// ---- synthetic textures ----------------------------------------------------

const GRATING_AMPLITUDE: f64 = 0.22;
const PIXEL_NOISE: f64 = 0.2;
const CLASS_TINT: f64 = 0.02;

/// Oriented sinusoidal gratings with a random phase and pixel noise.
///
/// Class `c` has orientation `pi c / classes`, spatial frequency
/// `2 + c mod 3` cycles per image and a faint tint on channel `c mod 3`.
/// Labels cycle through the classes and are then shuffled, so each class
/// gets `count / classes` samples (the first `count mod classes` classes get
/// one more).
pub fn synth_generate(classes: usize, count: usize, height: usize, width: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::config("task.classes", "need at least 2 classes"));
    }
    if count == 0 {
        return Err(Error::config("task.train_count", "need at least one sample"));
    }
    if height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0 {
        return Err(Error::config("task.height", format!("{height}x{width} must be positive multiples of 4")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("positive std");
    let plane = height * width;
    let mut data = Vec::with_capacity(count * 3 * plane);
    for &label in &labels {
        let angle = PI * label as f64 / classes as f64;
        let cycles = 2.0 + (label % 3) as f64;
        let (ca, sa) = (angle.cos(), angle.sin());
        let phase = rng.random_range(0.0..2.0 * PI);
        let mut pattern = Vec::with_capacity(plane);
        for y in 0..height {
            for x in 0..width {
                let u = (x as f64 / width as f64) * ca + (y as f64 / height as f64) * sa;
                pattern.push(GRATING_AMPLITUDE * (2.0 * PI * cycles * u + phase).sin());
            }
        }
        for channel in 0..3 {
            let tint = if channel == label % 3 { CLASS_TINT } else { 0.0 };
            for &p in &pattern {
                let v = 0.5 + tint + p + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0) as Float);
            }
        }
    }
    Dataset::new(Tensor::new(vec![count, 3, height, width], data)?, labels, classes)
}

// ---- CIFAR-10 binary ----------------------------------------------------

/// Parses concatenated CIFAR-10 records.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::Format { offset: 0, message: "file holds no records".into() });
    }
    if bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::Format {
            offset: whole as u64,
            message: format!(
                "{} bytes is not a multiple of the {CIFAR_RECORD}-byte record; trailing record has {} bytes",
                bytes.len(),
                bytes.len() - whole
            ),
        });
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * (CIFAR_RECORD - 1));
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format {
                offset: (r * CIFAR_RECORD) as u64,
                message: format!("label byte {label} exceeds 9"),
            });
        }
        labels.push(label);
        data.extend(record[1..].iter().map(|&b| b as Float / 255.0));
    }
    Dataset::new(Tensor::new(vec![count, 3, CIFAR_SIDE, CIFAR_SIDE], data)?, labels, CIFAR_CLASSES)
}

/// Reads one CIFAR-10 binary batch file.
pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    parse_cifar10(&bytes).map_err(|e| match e {
        Error::Format { offset, message } => Error::Format { offset, message: format!("{}: {message}", path.display()) },
        other => other,
    })
}

/// Reads `data_batch_1..5.bin` and `test_batch.bin` from a directory.
pub fn load_cifar10_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = (1..=5).map(|i| load_cifar10_binary(&dir.join(format!("data_batch_{i}.bin")))).collect::<Result<Vec<_>>>()?;
    let test = load_cifar10_binary(&dir.join("test_batch.bin"))?;
    Ok((concat(&train)?, test))
}

pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
    let first = parts.first().ok_or_else(|| Error::contract("nothing to concatenate"))?;
    let mut shape = first.images.shape().to_vec();
    shape[0] = parts.iter().map(Dataset::len).sum();
    let data = parts.iter().flat_map(|d| d.images.data().iter().copied()).collect();
    let labels = parts.iter().flat_map(|d| d.labels.iter().copied()).collect();
    Dataset::new(Tensor::new(shape, data)?, labels, first.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_balanced_and_bounded() {
        let d = synth_generate(4, 400, 16, 16, 3).unwrap();
        assert_eq!(d.class_counts(), vec![100; 4]);
        assert!(d.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(d.images.shape(), &[400, 3, 16, 16]);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synth_generate(4, 40, 8, 8, 11).unwrap();
        let b = synth_generate(4, 40, 8, 8, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_generate(4, 40, 8, 8, 12).unwrap());
    }

    #[test]
    fn synthetic_rejects_bad_extent() {
        assert!(synth_generate(4, 10, 10, 16, 0).is_err());
        assert!(synth_generate(1, 10, 16, 16, 0).is_err());
    }

    #[test]
    fn batches_of_ten_by_four() {
        let sizes: Vec<usize> = batch_order(10, 4, 0, 0).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(batch_order(10, 4, 0, 3).unwrap(), batch_order(10, 4, 0, 3).unwrap());
        assert!(batch_order(10, 0, 0, 0).is_err());
    }

    #[test]
    fn epochs_reshuffle() {
        assert_ne!(batch_order(1000, 1000, 7, 0).unwrap(), batch_order(1000, 1000, 7, 1).unwrap());
    }

    #[test]
    fn split_is_a_partition() {
        let d = synth_generate(2, 50, 4, 4, 0).unwrap();
        let tagged = Dataset { images: d.images.clone(), labels: d.labels.clone(), classes: 2 };
        let (a, b) = split(&tagged, 0.5, 9).unwrap();
        assert_eq!((a.len(), b.len()), (25, 25));
        // every image is distinct, so images identify rows
        let key = |img: &[Float]| img.iter().map(|v| v.to_bits() as u64).fold(0u64, |h, b| h.rotate_left(5) ^ b);
        let per = 3 * 16;
        let mut all: Vec<u64> = a.images.data().chunks(per).chain(b.images.data().chunks(per)).map(key).collect();
        let mut orig: Vec<u64> = d.images.data().chunks(per).map(key).collect();
        all.sort_unstable();
        orig.sort_unstable();
        assert_eq!(all, orig);
        assert_eq!(split(&tagged, 0.5, 9).unwrap().0, a);
        assert!(split(&tagged, 1.0, 9).is_err());
    }

    #[test]
    fn flip_reverses_rows() {
        let t = Tensor::new(vec![1, 3, 1, 3], (0..9).map(|v| v as Float).collect()).unwrap();
        let f = flip_horizontal(&t, &[true]);
        assert_eq!(f.data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0, 8.0, 7.0, 6.0]);
        assert_eq!(flip_horizontal(&t, &[false]), t);
    }

    #[test]
    fn normalizer_standardizes_channels() {
        let d = synth_generate(4, 64, 8, 8, 1).unwrap();
        let n = Normalizer::fit(&d);
        let back = Normalizer::fit(&n.apply(&d));
        for c in 0..3 {
            assert!(back.mean[c].abs() < 1e-9);
            assert!((back.std[c] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cifar_bad_label_names_offset() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[CIFAR_RECORD] = 10;
        match parse_cifar10(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
    }
}
