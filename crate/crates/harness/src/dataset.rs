use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use clustr_core::numerics::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Stream ids keep the data and batch-order RNGs independent of the
/// per-parameter init streams for the same seed.
pub const DATA_STREAM: u64 = 0xD47A_0000_0000_0001;
pub const BATCH_STREAM: u64 = 0xD47A_0000_0000_0002;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub n_per_class: usize,
    pub size: usize,
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            n_per_class: 32,
            size: 32,
            noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    /// `<path>/<class>/<image>`; class ids follow sorted directory names and
    /// images are resized to `size × size` RGB.
    ImageFolder { path: PathBuf, size: usize },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Synthetic(s) => {
                if s.size < 16 {
                    return Err(HarnessError::Config(format!("synthetic images must be at least 16 pixels, got {}", s.size)));
                }
                if s.classes == 0 || s.n_per_class == 0 {
                    return Err(HarnessError::Config("synthetic dataset needs classes and samples".into()));
                }
                if !(s.noise >= 0.0) {
                    return Err(HarnessError::Config("noise must be nonnegative".into()));
                }
            }
            DatasetSpec::ImageFolder { size, .. } => {
                if *size == 0 {
                    return Err(HarnessError::Config("image size must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn image_size(&self) -> usize {
        match self {
            DatasetSpec::Synthetic(s) => s.size,
            DatasetSpec::ImageFolder { size, .. } => *size,
        }
    }

    pub fn load(&self, seed: u64, base: &Path) -> Result<Dataset> {
        self.validate()?;
        match self {
            DatasetSpec::Synthetic(s) => Ok(gen_synthetic_dataset(seed, s.classes, s.n_per_class, s.size, s.noise)),
            DatasetSpec::ImageFolder { path, size } => {
                let p = if path.is_absolute() { path.clone() } else { base.join(path) };
                load_image_folder(&p, *size)
            }
        }
    }
}

/// Labeled `size × size × channels` images, stored row-major, channel last.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub size: usize,
    pub channels: usize,
    pub classes: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.size * self.size * self.channels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// `[B × size × size × channels]` batch of the given images.
    pub fn batch<T: Real>(&self, idx: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            data.extend(self.image(i).iter().map(|&v| T::lit(v)));
        }
        Tensor::new(vec![idx.len(), self.size, self.size, self.channels], data).expect("batch shape matches data")
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Little-endian dump of labels then pixels, for byte-level comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (self.labels.len() + self.pixels.len()));
        for &l in &self.labels {
            out.extend_from_slice(&(l as u64).to_le_bytes());
        }
        for &p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }
}

/// Class-conditional RGB textures: class `c` combines an oriented grating
/// (angle from `c mod 5`) with a colored blob (position and color from
/// `c div 5`). Grating phase, blob jitter and pixel noise are random per
/// image, so the class is carried by orientation and blob placement.
pub fn gen_synthetic_dataset(seed: u64, classes: usize, n_per_class: usize, size: usize, noise: f64) -> Dataset {
    let mut rng = stream_rng(seed, DATA_STREAM);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("valid std");
    let orientations = classes.min(5);
    let positions = classes.div_ceil(orientations);
    let s = size as f64;
    let freq = 2.0 * PI * 4.0 / s;
    let sigma = s / 10.0;
    let mut pixels = Vec::with_capacity(classes * n_per_class * size * size * 3);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for i in 0..classes * n_per_class {
        // Interleave classes so prefixes stay balanced.
        let c = i % classes;
        let theta = PI * (c % orientations) as f64 / orientations as f64;
        let slot = c / orientations;
        let (cx, cy) = if positions == 1 {
            (s / 2.0, s / 2.0)
        } else {
            let a = 2.0 * PI * slot as f64 / positions as f64;
            (s / 2.0 + s / 4.0 * a.cos(), s / 2.0 + s / 4.0 * a.sin())
        };
        let jitter = s / 16.0;
        let (bx, by) = (cx + rng.random_range(-jitter..=jitter), cy + rng.random_range(-jitter..=jitter));
        let phase = rng.random_range(0.0..2.0 * PI);
        let color = [1.0, 0.5 + 0.5 * (slot % 2) as f64, 1.0 - 0.5 * (slot % 3) as f64];
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..size {
            for x in 0..size {
                let (xf, yf) = (x as f64, y as f64);
                let grating = 0.6 * (freq * (xf * ct + yf * st) + phase).sin();
                let d2 = (xf - bx).powi(2) + (yf - by).powi(2);
                let blob = (-d2 / (2.0 * sigma * sigma)).exp();
                for col in color {
                    let n = if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                    pixels.push(grating + col * blob + n);
                }
            }
        }
        labels.push(c);
    }
    Dataset {
        size,
        channels: 3,
        classes,
        pixels,
        labels,
    }
}

fn load_image_folder(root: &Path, size: usize) -> Result<Dataset> {
    let io = |e: std::io::Error| HarnessError::Config(format!("{}: {e}", root.display()));
    let mut classes: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(HarnessError::Config(format!("{} has no class directories", root.display())));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            let img = image::open(&f).map_err(|e| HarnessError::Image {
                path: f.display().to_string(),
                message: e.to_string(),
            })?;
            let img = img.resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle).to_rgb8();
            pixels.extend(img.as_raw().iter().map(|&b| b as f64 / 127.5 - 1.0));
            labels.push(label);
        }
    }
    Ok(Dataset {
        size,
        channels: 3,
        classes: classes.len(),
        pixels,
        labels,
    })
}

/// Training accuracy of a nearest-class-mean classifier on raw pixels.
pub fn nearest_centroid_accuracy(data: &Dataset) -> f64 {
    let n = data.image_len();
    let mut means = vec![vec![0.0; n]; data.classes];
    let mut counts = vec![0usize; data.classes];
    for i in 0..data.len() {
        let l = data.labels[i];
        counts[l] += 1;
        for (m, &p) in means[l].iter_mut().zip(data.image(i)) {
            *m += p;
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c.max(1) as f64);
    }
    let correct = (0..data.len())
        .filter(|&i| {
            let img = data.image(i);
            let best = (0..data.classes)
                .min_by(|&a, &b| {
                    let da: f64 = means[a].iter().zip(img).map(|(m, p)| (m - p).powi(2)).sum();
                    let db: f64 = means[b].iter().zip(img).map(|(m, p)| (m - p).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            best == data.labels[i]
        })
        .count();
    correct as f64 / data.len() as f64
}
