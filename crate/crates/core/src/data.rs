//! CIFAR-10 binary batches, input quantization, augmentation and a synthetic
//! stand-in dataset.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{IMAGE_CHANNELS, IMAGE_SIZE};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const PIXELS: usize = IMAGE_CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
pub const RECORD_BYTES: usize = PIXELS + 1;
pub const RECORDS_PER_FILE: usize = 10_000;
pub const BATCH_FILE_BYTES: usize = RECORD_BYTES * RECORDS_PER_FILE;
pub const CIFAR_CLASSES: usize = 10;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";
pub const PAD: usize = 2;

const SYNTHETIC_STREAM: u64 = 0x5;
const NOISE_STD: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, 3, 32, 32]`, values in `[0, 1)`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }

    /// The first `n` records (all of them if `n` exceeds the size).
    pub fn subset(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn quantized(&self, bits: u32, mode: QuantMode) -> Dataset {
        Dataset {
            images: quantize(&self.images, bits, mode),
            labels: self.labels.clone(),
            split: self.split,
        }
    }

    /// Batches of sample indices in order.
    pub fn sequential_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// Batches of sample indices in a seeded random order.
    pub fn shuffled_batches(&self, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// Parse concatenated CIFAR-10 records.
pub fn parse_records(bytes: &[u8], split: Split) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::data(format!(
            "{} bytes is not a whole number of {RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * PIXELS);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::data(format!("record {i}: label byte {label} > 9")));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 256.0));
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], pixels)?,
        labels,
        split,
    })
}

/// Read one full batch file (exactly 10000 records).
pub fn read_batch_file(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != BATCH_FILE_BYTES {
        return Err(Error::data(format!(
            "{}: expected {BATCH_FILE_BYTES} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    parse_records(&bytes, split)
}

fn concat(parts: Vec<Dataset>, split: Split) -> Result<Dataset> {
    let n: usize = parts.iter().map(Dataset::len).sum();
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for p in parts {
        labels.extend(p.labels);
        pixels.extend(p.images.into_data());
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], pixels)?,
        labels,
        split,
    })
}

/// Load the train (50000) and test (10000) splits from an extracted
/// `cifar-10-batches-bin` directory.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    if !dir.is_dir() {
        return Err(Error::data(format!("data directory {} not found", dir.display())));
    }
    let train = TRAIN_FILES
        .iter()
        .map(|f| read_batch_file(&dir.join(f), Split::Train))
        .collect::<Result<Vec<_>>>()?;
    let test = read_batch_file(&dir.join(TEST_FILE), Split::Test)?;
    Ok((concat(train, Split::Train)?, test))
}

/// Serialize records in the CIFAR-10 layout. Pixels are mapped back with
/// `round(x * 256)`, so decoded batches reproduce their source bytes.
pub fn write_records(data: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(data.len() * RECORD_BYTES);
    for (i, img) in data.images.data().chunks(PIXELS).enumerate() {
        let label = data.labels[i];
        if label >= 256 {
            return Err(Error::data(format!("label {label} does not fit a byte")));
        }
        out.push(label as u8);
        for &x in img {
            let b = (x * 256.0).round();
            if !(0.0..=255.0).contains(&b) {
                return Err(Error::data(format!("pixel {x} outside the byte range")));
            }
            out.push(b as u8);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// `round(x (2^b - 1)) / (2^b - 1)`.
    #[default]
    Round,
    /// `floor(x 2^b) / 2^b`.
    Floor,
}

pub fn quantize_value(x: f64, bits: u32, mode: QuantMode) -> f64 {
    match mode {
        QuantMode::Round => {
            let levels = ((1u32 << bits) - 1) as f64;
            (x * levels).round() / levels
        }
        QuantMode::Floor => {
            let levels = (1u32 << bits) as f64;
            (x * levels).floor() / levels
        }
    }
}

pub fn quantize(images: &Tensor, bits: u32, mode: QuantMode) -> Tensor {
    images.map(|x| quantize_value(x, bits, mode))
}

/// Place one `3x32x32` image into a zero-padded canvas, crop at `(dy, dx)`
/// (each in `0..=4`, `(2, 2)` is centered) and optionally mirror.
pub fn augment_with(image: &[f64], dy: usize, dx: usize, flip: bool, out: &mut [f64]) {
    let s = IMAGE_SIZE as isize;
    for c in 0..IMAGE_CHANNELS {
        let src = &image[c * IMAGE_SIZE * IMAGE_SIZE..(c + 1) * IMAGE_SIZE * IMAGE_SIZE];
        let dst = &mut out[c * IMAGE_SIZE * IMAGE_SIZE..(c + 1) * IMAGE_SIZE * IMAGE_SIZE];
        for y in 0..s {
            let sy = y + dy as isize - PAD as isize;
            for x in 0..s {
                let xx = if flip { s - 1 - x } else { x };
                let sx = xx + dx as isize - PAD as isize;
                dst[(y * s + x) as usize] = if (0..s).contains(&sy) && (0..s).contains(&sx) {
                    src[(sy * s + sx) as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

/// Random pad-and-crop and horizontal flip for every image of a batch.
pub fn augment(batch: &Tensor, rng: &mut Rng) -> Tensor {
    let mut out = Tensor::zeros(batch.shape());
    for (img, dst) in batch.data().chunks(PIXELS).zip(out.data_mut().chunks_mut(PIXELS)) {
        let dy = rng.random_range(0..=2 * PAD);
        let dx = rng.random_range(0..=2 * PAD);
        let flip = rng.random_bool(0.5);
        augment_with(img, dy, dx, flip, dst);
    }
    out
}

struct Blob {
    cy: f64,
    cx: f64,
    radius: f64,
    color: [f64; IMAGE_CHANNELS],
}

/// Class-separable images built from per-class Gaussian-blob prototypes with
/// random shifts, brightness jitter and pixel noise. Pixels lie on the
/// `k / 256` grid of the CIFAR-10 decoder, labels cycle through the classes.
pub fn synthetic_dataset(n: usize, classes: usize, seed: u64, split: Split) -> Dataset {
    let mut proto_rng = rng::stream(seed, SYNTHETIC_STREAM);
    let prototypes: Vec<Vec<Blob>> = (0..classes)
        .map(|_| {
            (0..3)
                .map(|_| Blob {
                    cy: proto_rng.random_range(6.0..26.0),
                    cx: proto_rng.random_range(6.0..26.0),
                    radius: proto_rng.random_range(2.5..6.0),
                    color: std::array::from_fn(|_| proto_rng.random_range(0.0..1.0)),
                })
                .collect()
        })
        .collect();
    let stream = match split {
        Split::Train => SYNTHETIC_STREAM + 1,
        Split::Test => SYNTHETIC_STREAM + 2,
    };
    let mut rng = rng::stream(seed, stream);
    let mut pixels = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        labels.push(label);
        let shift_y: f64 = rng.random_range(-5.0..5.0);
        let shift_x: f64 = rng.random_range(-5.0..5.0);
        let gain: f64 = rng.random_range(0.4..1.0);
        let background: f64 = rng.random_range(0.05..0.4);
        let distractor = rng.random_range(0..classes);
        let d_shift = (rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0));
        let d_gain: f64 = rng.random_range(0.2..0.6);
        let mut img = vec![background; PIXELS];
        let blobs = prototypes[label]
            .iter()
            .map(|b| (b, shift_y, shift_x, gain))
            .chain(std::iter::once((&prototypes[distractor][0], d_shift.0, d_shift.1, d_gain)));
        for (blob, sy, sx, g) in blobs {
            let (cy, cx) = (blob.cy + sy, blob.cx + sx);
            let inv = 1.0 / (2.0 * blob.radius * blob.radius);
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let w = g * (-d2 * inv).exp();
                    for c in 0..IMAGE_CHANNELS {
                        img[c * IMAGE_SIZE * IMAGE_SIZE + y * IMAGE_SIZE + x] += w * blob.color[c];
                    }
                }
            }
        }
        for v in &mut img {
            let noisy = *v + NOISE_STD * rng.sample::<f64, _>(StandardNormal);
            *v = (noisy * 256.0).floor().clamp(0.0, 255.0) / 256.0;
        }
        pixels.extend(img);
    }
    Dataset {
        images: Tensor::new(vec![n, IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE], pixels)
            .expect("synthetic shape"),
        labels,
        split,
    }
}
