//! Labeled datasets: the seeded synthetic generator, grand-mean computation,
//! train/test splitting and the on-disk manifest (`image_path,label`).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{read_ppm, write_ppm, ImageU8};

/// Lowest and highest label the synthetic generator emits.
pub const LABEL_MIN: f64 = 14.0;
pub const LABEL_MAX: f64 = 45.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageU8,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub generator: String,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn new(generator: impl Into<String>, seed: u64, samples: Vec<Sample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let shape = first.image.shape();
            for s in &samples {
                if s.image.shape() != shape {
                    return Err(Error::ShapeMismatch {
                        expected: shape.to_vec(),
                        actual: s.image.shape().to_vec(),
                    });
                }
                if !s.label.is_finite() {
                    return Err(Error::InvalidArgument(format!("non-finite label for {}", s.id)));
                }
            }
        }
        Ok(Self {
            generator: generator.into(),
            seed,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn shape(&self) -> Option<[usize; 3]> {
        self.samples.first().map(|s| s.image.shape())
    }
}

/// Difference between the bottom-half and top-half mean brightness, in units of 255.
///
/// Lies in `[-1, 1]`; zero for single-row images.
pub fn vertical_gradient_coefficient(image: &ImageU8) -> f64 {
    let half = image.height() / 2;
    if half == 0 {
        return 0.0;
    }
    let (h, w) = (image.height(), image.width());
    let mut top = 0u64;
    let mut bottom = 0u64;
    for c in 0..image.channels() {
        for y in 0..half {
            for x in 0..w {
                top += u64::from(image.get(c, y, x));
                bottom += u64::from(image.get(c, h - half + y, x));
            }
        }
    }
    let n = (image.channels() * half * w) as f64;
    (bottom as f64 - top as f64) / n / 255.0
}

/// Ground-truth label of a synthetic image.
pub fn synth_label(image: &ImageU8) -> f64 {
    let raw = 15.0 + 20.0 * image.mean() / 255.0 + 3.0 * vertical_gradient_coefficient(image);
    raw.clamp(LABEL_MIN, LABEL_MAX)
}

struct Blob {
    cy: f64,
    cx: f64,
    inv_two_sigma_sq: f64,
    amplitude: f64,
}

fn synth_image(shape: [usize; 3], rng: &mut ChaCha8Rng) -> ImageU8 {
    let [c, h, w] = shape;
    let base: f64 = rng.random_range(25.0..230.0);
    let vertical: f64 = rng.random_range(-120.0..120.0);
    let horizontal: f64 = rng.random_range(-40.0..40.0);
    let tints: Vec<f64> = (0..c).map(|_| rng.random_range(-15.0..15.0)).collect();
    let blobs: Vec<Blob> = (0..rng.random_range(1..=3))
        .map(|_| {
            let sigma = rng.random_range(0.06..0.25) * h.max(w) as f64;
            Blob {
                cy: rng.random_range(0.0..h as f64),
                cx: rng.random_range(0.0..w as f64),
                inv_two_sigma_sq: 1.0 / (2.0 * sigma * sigma),
                amplitude: rng.random_range(-50.0..50.0),
            }
        })
        .collect();
    // Heavy pixel noise discourages the victim from steep per-pixel sensitivity.
    let noise = rng.random_range(30.0..60.0);

    let norm = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 - 0.5 } else { 0.0 };
    let mut pixels = Vec::with_capacity(c * h * w);
    for &tint in &tints {
        for y in 0..h {
            for x in 0..w {
                let mut v = base + tint + vertical * norm(y, h) + horizontal * norm(x, w);
                for b in &blobs {
                    let d2 = (y as f64 - b.cy).powi(2) + (x as f64 - b.cx).powi(2);
                    v += b.amplitude * (-d2 * b.inv_two_sigma_sq).exp();
                }
                v += rng.random_range(-noise..noise);
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageU8::new(c, h, w, pixels).expect("shape checked by caller")
}

/// Seeded synthetic dataset of smooth gradients, blobs and pixel noise.
///
/// Each image draws from its own ChaCha stream, so image `i` does not depend on `n`.
pub fn synth_dataset(n: usize, shape: [usize; 3], seed: u64) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic dataset size must be >= 1".into()));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape(format!("image shape must be positive, got {shape:?}")));
    }
    let width = n.to_string().len().max(4);
    let samples = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let image = synth_image(shape, &mut rng);
            let label = synth_label(&image);
            Sample {
                id: format!("img_{i:0width$}"),
                image,
                label,
            }
        })
        .collect();
    LabeledDataset::new("synthetic-v1", seed, samples)
}

/// Mean over every pixel of every image, as a real in `[0, 255]`.
pub fn grand_mean(dataset: &LabeledDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0u128;
    let mut count = 0u128;
    for s in &dataset.samples {
        total += s.image.pixels().iter().map(|&p| u128::from(p)).sum::<u128>();
        count += s.image.len() as u128;
    }
    Ok(total as f64 / count as f64)
}

/// Seeded shuffle, then the first `round(n * train_fraction)` samples go to the training side.
pub fn split(
    dataset: &LabeledDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n = dataset.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidArgument(format!(
            "split of {n} samples at fraction {train_fraction} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.samples[i].clone()).collect();
    Ok((
        LabeledDataset {
            generator: dataset.generator.clone(),
            seed: dataset.seed,
            samples: pick(&order[..n_train]),
        },
        LabeledDataset {
            generator: dataset.generator.clone(),
            seed: dataset.seed,
            samples: pick(&order[n_train..]),
        },
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    image_path: String,
    label: f64,
}

/// Write every sample as `<id>.ppm` under `dir`, plus `manifest.csv`. Returns the manifest path.
pub fn write_dataset(dataset: &LabeledDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest).map_err(|e| csv_err(&manifest, e))?;
    for s in &dataset.samples {
        let file = format!("{}.ppm", s.id);
        write_ppm(&s.image, dir.join(&file))?;
        w.serialize(ManifestRow {
            image_path: file,
            label: s.label,
        })
        .map_err(|e| csv_err(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Load a dataset from a manifest CSV; image paths are resolved relative to the manifest.
pub fn read_dataset(manifest: impl AsRef<Path>) -> Result<LabeledDataset> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut r = csv::Reader::from_path(manifest).map_err(|e| csv_err(manifest, e))?;
    let mut samples = Vec::new();
    for (i, row) in r.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| Error::Csv {
            path: manifest.to_path_buf(),
            message: format!("row {}: {e}", i + 1),
        })?;
        let path = base.join(&row.image_path);
        let id = Path::new(&row.image_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| row.image_path.clone());
        samples.push(Sample {
            id,
            image: read_ppm(&path)?,
            label: row.label,
        });
    }
    LabeledDataset::new("manifest", 0, samples)
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}
