//! Synthetic datasets and their on-disk format.
//!
//! A dataset directory holds `meta.json`, `x.f32` and `y.f32`; the binary
//! files are raw little-endian 32-bit floats in row-major order (images as
//! `(m, c, h, w)`). Values are rounded to 32-bit precision at generation
//! time, so writing and reading back is exact.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::loss::one_hot;
use crate::space::InputShape;

pub const META_FILE: &str = "meta.json";
pub const X_FILE: &str = "x.f32";
pub const Y_FILE: &str = "y.f32";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Blobs,
    Spirals,
    GaussianNoise,
    ImagePatches,
}

impl std::str::FromStr for GeneratorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "blobs" => Ok(GeneratorKind::Blobs),
            "spirals" => Ok(GeneratorKind::Spirals),
            "gaussian_noise" => Ok(GeneratorKind::GaussianNoise),
            "image_patches" => Ok(GeneratorKind::ImagePatches),
            _ => Err(Error::Parse {
                what: "generator kind".into(),
                detail: format!("unknown kind '{s}' (blobs, spirals, gaussian_noise, image_patches)"),
            }),
        }
    }
}

/// Generator parameters. Irrelevant fields are ignored by a given kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenParams {
    pub samples: usize,
    /// `[n0]` for vectors or `[h, w, c]` for images.
    pub input: InputShape,
    pub classes: usize,
    /// Within-class noise scale.
    pub noise: f64,
    pub normalize: bool,
}

impl GenParams {
    pub fn validate(&self, kind: GeneratorKind) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.samples == 0 || self.classes == 0 {
            return bad("samples and classes must be positive".into());
        }
        if !(self.noise >= 0.0) {
            return bad(format!("noise must be non-negative, got {}", self.noise));
        }
        match (kind, self.input) {
            (GeneratorKind::ImagePatches, InputShape::Image { h, w, c }) if h >= 3 && w >= 3 && c >= 1 => Ok(()),
            (GeneratorKind::ImagePatches, _) => bad("image_patches needs an image input of at least 3x3".into()),
            (GeneratorKind::Spirals, InputShape::Vector(2)) => Ok(()),
            (GeneratorKind::Spirals, _) => bad("spirals are two-dimensional".into()),
            (_, InputShape::Vector(n)) if n >= 1 => Ok(()),
            (_, InputShape::Image { .. }) => bad(format!("{kind:?} generates vectors only")),
            _ => bad("input must be non-empty".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub samples: usize,
    pub input: InputShape,
    pub classes: usize,
    pub normalized: bool,
    pub generator: GeneratorKind,
    pub seed: u64,
    pub noise: f64,
}

/// Inputs `x` (`(m, ...)`) with one-hot labels `y` (`(m, classes)`).
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub meta: DatasetMeta,
    pub x: Tensor,
    pub y: Tensor,
}

fn to_f32_precision(v: f64) -> f64 {
    v as f32 as f64
}

/// Scales all rows by one common factor so the largest has norm just
/// below 1 (after 32-bit rounding).
fn normalize_rows(data: &mut [f64], row_len: usize) {
    let max = data
        .chunks(row_len)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0f64, f64::max);
    if max > 0.0 {
        let s = 1.0 / (max * (1.0 + 1e-6));
        data.iter_mut().for_each(|v| *v *= s);
    }
}

fn blobs(p: &GenParams, n0: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let centers: Vec<Vec<f64>> = (0..p.classes)
        .map(|_| {
            let v: Vec<f64> = (0..n0).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|a| a / norm).collect()
        })
        .collect();
    let noise = Normal::new(0.0, p.noise / (n0 as f64).sqrt()).expect("finite noise");
    let mut x = Vec::with_capacity(p.samples * n0);
    let mut y = Vec::with_capacity(p.samples);
    for i in 0..p.samples {
        let c = i % p.classes;
        x.extend(centers[c].iter().map(|&v| v + noise.sample(rng)));
        y.push(c);
    }
    (x, y)
}

fn spirals(p: &GenParams, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let mut x = Vec::with_capacity(p.samples * 2);
    let mut y = Vec::with_capacity(p.samples);
    for i in 0..p.samples {
        let c = i % p.classes;
        let r: f64 = rng.random_range(0.05..1.0);
        let angle = 3.0 * PI * r + 2.0 * PI * c as f64 / p.classes as f64;
        let jitter: f64 = StandardNormal.sample(rng);
        let a = angle + p.noise * jitter;
        x.push(r * a.cos());
        x.push(r * a.sin());
        y.push(c);
    }
    (x, y)
}

fn gaussian_noise(p: &GenParams, n0: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let x = (0..p.samples * n0).map(|_| StandardNormal.sample(rng)).collect();
    let y = (0..p.samples).map(|_| rng.random_range(0..p.classes)).collect();
    (x, y)
}

/// Each class owns a random 3x3 motif; a sample places its class motif at a
/// uniformly random position on a noisy background.
fn image_patches(p: &GenParams, h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let motifs: Vec<Vec<f64>> = (0..p.classes)
        .map(|_| (0..c * 9).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    let bg = Normal::new(0.0, p.noise).expect("finite noise");
    let mut x = Vec::with_capacity(p.samples * c * h * w);
    let mut y = Vec::with_capacity(p.samples);
    for i in 0..p.samples {
        let class = i % p.classes;
        let mut img: Vec<f64> = (0..c * h * w).map(|_| bg.sample(rng)).collect();
        let (r0, c0) = (rng.random_range(0..=h - 3), rng.random_range(0..=w - 3));
        for ch in 0..c {
            for dr in 0..3 {
                for dc in 0..3 {
                    img[ch * h * w + (r0 + dr) * w + c0 + dc] += motifs[class][ch * 9 + dr * 3 + dc];
                }
            }
        }
        x.extend(img);
        y.push(class);
    }
    (x, y)
}

/// Generates a dataset; deterministic in `(kind, params, seed)`. Sample
/// order is shuffled so any prefix is class-balanced in expectation.
pub fn gen_dataset(kind: GeneratorKind, params: &GenParams, seed: u64) -> Result<DatasetBundle> {
    params.validate(kind)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut x, labels) = match (kind, params.input) {
        (GeneratorKind::Blobs, InputShape::Vector(n0)) => blobs(params, n0, &mut rng),
        (GeneratorKind::Spirals, _) => spirals(params, &mut rng),
        (GeneratorKind::GaussianNoise, InputShape::Vector(n0)) => gaussian_noise(params, n0, &mut rng),
        (GeneratorKind::ImagePatches, InputShape::Image { h, w, c }) => image_patches(params, h, w, c, &mut rng),
        _ => unreachable!("validated"),
    };
    let row = params.input.features();
    if params.normalize {
        normalize_rows(&mut x, row);
    }
    x.iter_mut().for_each(|v| *v = to_f32_precision(*v));

    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..params.samples).collect();
    order.shuffle(&mut rng);
    let xs = Tensor::new(params.input.batch_shape(params.samples), x)?.select_rows(&order);
    let ys: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    Ok(DatasetBundle {
        meta: DatasetMeta {
            samples: params.samples,
            input: params.input,
            classes: params.classes,
            normalized: params.normalize,
            generator: kind,
            seed,
            noise: params.noise,
        },
        x: xs,
        y: one_hot(&ys, params.classes)?,
    })
}

fn f32_bytes(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn read_f32(path: &Path, expect: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expect * 4 {
        return Err(Error::Parse {
            what: path.display().to_string(),
            detail: format!("expected {} bytes, found {}", expect * 4, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

impl DatasetBundle {
    pub fn samples(&self) -> usize {
        self.x.rows()
    }

    /// Class index of each row.
    pub fn classes(&self) -> Vec<usize> {
        (0..self.y.rows()).map(|i| crate::space::argmax(self.y.row(i))).collect()
    }

    /// Rows `[0, n)` and `[n, m)`.
    pub fn split(&self, n: usize) -> Result<(DatasetBundle, DatasetBundle)> {
        let m = self.samples();
        if n == 0 || n >= m {
            return Err(Error::InvalidArgument(format!("cannot split {m} samples at {n}")));
        }
        let part = |range: std::ops::Range<usize>| {
            let idx: Vec<usize> = range.collect();
            let mut meta = self.meta.clone();
            meta.samples = idx.len();
            DatasetBundle {
                meta,
                x: self.x.select_rows(&idx),
                y: self.y.select_rows(&idx),
            }
        };
        Ok((part(0..n), part(n..m)))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        atomic_write(&dir.join(X_FILE), &f32_bytes(self.x.data()))?;
        atomic_write(&dir.join(Y_FILE), &f32_bytes(self.y.data()))?;
        atomic_write(&dir.join(META_FILE), meta.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            what: meta_path.display().to_string(),
            detail: e.to_string(),
        })?;
        let x = read_f32(&dir.join(X_FILE), meta.samples * meta.input.features())?;
        let y = read_f32(&dir.join(Y_FILE), meta.samples * meta.classes)?;
        Ok(DatasetBundle {
            x: Tensor::new(meta.input.batch_shape(meta.samples), x)?,
            y: Tensor::new(vec![meta.samples, meta.classes], y)?,
            meta,
        })
    }
}

/// Replaces `x` with standard Gaussian rows rescaled to max-norm 1 (same
/// shape); used to test insensitivity to the input distribution.
pub fn gaussian_like(x: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize_rows(&mut data, x.row_len());
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Row-permuted labels.
pub fn permuted_rows(y: &Tensor, seed: u64) -> Tensor {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..y.rows()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    y.select_rows(&idx)
}

/// Largest row norm.
pub fn max_row_norm(x: &Tensor) -> f64 {
    (0..x.rows())
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}
