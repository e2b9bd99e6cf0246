//! Image datasets: a synthetic generator and a small binary container.
//!
//! Container layout (all integers little-endian `u32`):
//!
//! | offset | field                         |
//! |--------|-------------------------------|
//! | 0      | magic `b"APDS"`               |
//! | 4      | version (1)                   |
//! | 8      | record count                  |
//! | 12     | height                        |
//! | 16     | width                         |
//! | 20     | classes                       |
//! | 24     | records                       |
//!
//! Each record is one label byte followed by `height · width · 3` pixel
//! bytes in row-major HWC order.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"APDS";
pub const VERSION: u32 = 1;
const HEADER: usize = 24;
pub const CHANNELS: usize = 3;
const MEAN: f32 = 0.5;
const STD: f32 = 0.25;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    height: usize,
    width: usize,
    classes: usize,
    labels: Vec<u8>,
    pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Dataset(format!("byte {at}: header truncated")))
}

impl Dataset {
    pub fn new(height: usize, width: usize, classes: usize, labels: Vec<u8>, pixels: Vec<u8>) -> Result<Self> {
        let per = height * width * CHANNELS;
        if pixels.len() != labels.len() * per {
            return Err(Error::Dataset(format!(
                "{} pixel bytes for {} records of {per}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= classes) {
            return Err(Error::Dataset(format!(
                "record {i}: label {} outside {classes} classes",
                labels[i]
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            labels,
            pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Image side; datasets used for training are square.
    pub fn side(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    fn record_len(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.record_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.record_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            height: self.height,
            width: self.width,
            classes: self.classes,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            pixels,
        }
    }

    /// Normalised `[n, 3, h, w]` batch and its labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0.0f32; indices.len() * CHANNELS * h * w];
        for (b, &i) in indices.iter().enumerate() {
            let img = self.image(i);
            let out = &mut data[b * CHANNELS * h * w..(b + 1) * CHANNELS * h * w];
            for p in 0..h * w {
                for c in 0..CHANNELS {
                    out[c * h * w + p] = (img[p * CHANNELS + c] as f32 / 255.0 - MEAN) / STD;
                }
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        (
            Tensor::new(vec![indices.len(), CHANNELS, h, w], data).expect("batch shape"),
            labels,
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + self.labels.len() * (1 + self.record_len()));
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.len() as u32, self.height as u32, self.width as u32, self.classes as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.image(i));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.get(..4) != Some(&MAGIC[..]) {
            return Err(Error::Dataset("byte 0: missing dataset magic".into()));
        }
        let version = read_u32(bytes, 4)?;
        if version != VERSION {
            return Err(Error::Dataset(format!("byte 4: unsupported version {version}")));
        }
        let count = read_u32(bytes, 8)? as usize;
        let height = read_u32(bytes, 12)? as usize;
        let width = read_u32(bytes, 16)? as usize;
        let classes = read_u32(bytes, 20)? as usize;
        if classes == 0 || classes > 256 {
            return Err(Error::Dataset(format!("byte 20: invalid class count {classes}")));
        }
        let per = height * width * CHANNELS;
        let mut labels = Vec::with_capacity(count);
        let mut pixels = Vec::with_capacity(count * per);
        for i in 0..count {
            let at = HEADER + i * (1 + per);
            let Some(rec) = bytes.get(at..at + 1 + per) else {
                return Err(Error::Dataset(format!(
                    "record {i} at byte {at}: truncated ({} bytes left, {} needed)",
                    bytes.len().saturating_sub(at),
                    1 + per
                )));
            };
            if rec[0] as usize >= classes {
                return Err(Error::Dataset(format!(
                    "record {i} at byte {at}: label {} outside {classes} classes",
                    rec[0]
                )));
            }
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
        let end = HEADER + count * (1 + per);
        if bytes.len() != end {
            return Err(Error::Dataset(format!(
                "byte {end}: {} trailing bytes after {count} records",
                bytes.len() - end
            )));
        }
        Self::new(height, width, classes, labels, pixels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Dataset(m) => Error::Dataset(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

/// Smooth class templates: a few low-frequency waves per channel.
fn templates(classes: usize, side: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..classes)
        .map(|_| {
            let waves: Vec<(usize, f32, f32, f32, f32)> = (0..CHANNELS * 3)
                .map(|k| {
                    (
                        k % CHANNELS,
                        rng.gen_range(0.5..3.0),
                        rng.gen_range(0.5..3.0),
                        rng.gen_range(0.0..std::f32::consts::TAU),
                        rng.gen_range(0.5..1.0),
                    )
                })
                .collect();
            let mut img = vec![0.0f32; side * side * CHANNELS];
            for y in 0..side {
                for x in 0..side {
                    for &(c, fx, fy, phase, amp) in &waves {
                        let u = std::f32::consts::TAU * (fx * x as f32 + fy * y as f32) / side as f32;
                        img[(y * side + x) * CHANNELS + c] += amp * (u + phase).sin();
                    }
                }
            }
            img
        })
        .collect()
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Synthetic {
    pub classes: usize,
    pub train: usize,
    pub eval: usize,
    pub side: usize,
    pub seed: u64,
    /// Pixel noise relative to the template amplitude.
    #[serde(default = "default_noise")]
    pub noise: f32,
    /// Largest circular shift in pixels.
    #[serde(default = "default_shift")]
    pub max_shift: usize,
    /// Largest weight given to a second, randomly chosen class template
    /// blended into each image.
    #[serde(default = "default_distractor")]
    pub distractor: f32,
}

fn default_noise() -> f32 {
    0.8
}

fn default_shift() -> usize {
    4
}

fn default_distractor() -> f32 {
    0.0
}

impl Synthetic {
    pub fn new(classes: usize, train: usize, eval: usize, side: usize, seed: u64) -> Self {
        Self {
            classes,
            train,
            eval,
            side,
            seed,
            noise: default_noise(),
            max_shift: default_shift(),
            distractor: default_distractor(),
        }
    }

    fn split(&self, templates: &[Vec<f32>], count: usize, stream: u64) -> Dataset {
        let side = self.side;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut labels: Vec<u8> = (0..count).map(|i| (i % self.classes) as u8).collect();
        labels.shuffle(&mut rng);
        let shift = self.max_shift as i64;
        let mut pixels = Vec::with_capacity(count * side * side * CHANNELS);
        for &l in &labels {
            let t = &templates[l as usize];
            let other = &templates[rng.gen_range(0..self.classes)];
            let mix: f32 = if self.distractor > 0.0 { rng.gen_range(0.0..self.distractor) } else { 0.0 };
            let dx = rng.gen_range(-shift..=shift);
            let dy = rng.gen_range(-shift..=shift);
            let contrast: f32 = rng.gen_range(0.7..1.3);
            let offset: f32 = rng.gen_range(-0.3..0.3);
            for y in 0..side as i64 {
                for x in 0..side as i64 {
                    let sy = (y + dy).rem_euclid(side as i64) as usize;
                    let sx = (x + dx).rem_euclid(side as i64) as usize;
                    for c in 0..CHANNELS {
                        let n: f32 = rng.sample(StandardNormal);
                        let at = (sy * side + sx) * CHANNELS + c;
                        let shape = (1.0 - mix) * t[at] + mix * other[at];
                        let v = contrast * shape + offset + self.noise * n;
                        // template amplitude is ~1.5; map roughly to [0, 255]
                        let q = 127.5 + 50.0 * v;
                        pixels.push(q.round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
        }
        Dataset::new(side, side, self.classes, labels, pixels).expect("consistent synthetic data")
    }

    /// Balanced train and eval splits drawn around shared class templates.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        if self.classes == 0 || self.classes > 256 || self.side == 0 {
            return Err(Error::Config(format!(
                "synthetic data needs 1..=256 classes and a positive side, got {} and {}",
                self.classes, self.side
            )));
        }
        let t = templates(self.classes, self.side, self.seed);
        Ok((self.split(&t, self.train, 1), self.split(&t, self.eval, 2)))
    }
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(Synthetic),
    /// Directory holding `train.bin` and `eval.bin` containers.
    Dir { path: PathBuf },
}

impl DataSource {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synthetic(s) => s.generate(),
            DataSource::Dir { path } => {
                let train = Dataset::load(&path.join("train.bin"))?;
                let eval = Dataset::load(&path.join("eval.bin"))?;
                if (train.height, train.width, train.classes) != (eval.height, eval.width, eval.classes) {
                    return Err(Error::Dataset(format!(
                        "{}: train and eval splits disagree on image size or classes",
                        path.display()
                    )));
                }
                if train.height != train.width {
                    return Err(Error::Dataset(format!(
                        "{}: images must be square, got {}x{}",
                        path.display(),
                        train.height,
                        train.width
                    )));
                }
                Ok((train, eval))
            }
        }
    }
}

/// Sample order for one epoch, reproducible from `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d)));
    order.shuffle(&mut rng);
    order
}

/// Adds `N(0, std²)` noise to every element in place.
pub fn add_noise(batch: &mut Tensor, std: f32, seed: u64) {
    if std <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in batch.data_mut() {
        let n: f32 = rng.sample(StandardNormal);
        *v += std * n;
    }
}
