//! Labelled image sets: a seeded synthetic generator and loaders for the
//! CIFAR-10 binary layout and a PNG + CSV manifest layout.

use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use archleak_grad::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Images in NCHW layout with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Hidden attribute per image, if the source provides one.
    pub attributes: Option<Vec<usize>>,
    pub attribute_alphabet: Vec<String>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::domain(format!("label {l} outside 0..{num_classes}")));
        }
        Ok(Self { images, labels, num_classes, attributes: None, attribute_alphabet: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    /// Images at `idx` stacked into a batch.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let n = self.image_len();
        let src = self.images.data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let [c, h, w] = self.image_shape();
        Tensor::new(vec![idx.len(), c, h, w], out)
    }

    pub fn labels_at(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.batch(idx),
            labels: self.labels_at(idx),
            num_classes: self.num_classes,
            attributes: self.attributes.as_ref().map(|a| idx.iter().map(|&i| a[i]).collect()),
            attribute_alphabet: self.attribute_alphabet.clone(),
        }
    }
}

/// How the hidden attribute relates to the pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AttributeMode {
    None,
    /// Drawn independently and never rendered.
    Independent,
    /// Rendered as a background tint of the given amplitude.
    Rendered { strength: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_samples: usize,
    pub num_classes: usize,
    pub shape: [usize; 3],
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f32,
    /// Amplitude of the class pattern.
    pub signal: f32,
    pub attribute: AttributeMode,
    pub attribute_classes: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(num_samples: usize, num_classes: usize, shape: [usize; 3], seed: u64) -> Self {
        Self {
            num_samples,
            num_classes,
            shape,
            noise: 0.05,
            signal: 0.5,
            attribute: AttributeMode::None,
            attribute_classes: 2,
            seed,
        }
    }
}

/// Per-class rendering parameters, drawn from the generator seed.
struct Prototype {
    color: [f32; 3],
    angle: f32,
    freq: f32,
    blob: (f32, f32),
    blob_color: [f32; 3],
}

fn prototypes(classes: usize, seed: u64) -> Vec<Prototype> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_C1A5);
    (0..classes)
        .map(|c| Prototype {
            color: [rng.random(), rng.random(), rng.random()],
            angle: PI * (c as f32 + rng.random::<f32>() * 0.5) / classes as f32,
            freq: 1.0 + rng.random::<f32>() * 2.0,
            blob: (rng.random(), rng.random()),
            blob_color: [rng.random(), rng.random(), rng.random()],
        })
        .collect()
}

fn palette(attribute: usize, classes: usize) -> [f32; 3] {
    let t = 2.0 * PI * attribute as f32 / classes.max(1) as f32;
    [t.cos(), (t + 2.0 * PI / 3.0).cos(), (t + 4.0 * PI / 3.0).cos()]
}

/// Deterministic classification set: each class is an oriented grating
/// plus a coloured blob, jittered per image, with Gaussian pixel noise.
pub fn synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.num_classes < 2 || cfg.num_samples == 0 {
        return Err(Error::config("synthetic data needs at least 2 classes and 1 sample"));
    }
    let [c, h, w] = cfg.shape;
    let protos = prototypes(cfg.num_classes, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let mut data = Vec::with_capacity(cfg.num_samples * c * h * w);
    let mut labels = Vec::with_capacity(cfg.num_samples);
    let mut attrs = Vec::with_capacity(cfg.num_samples);
    for i in 0..cfg.num_samples {
        let label = i % cfg.num_classes;
        let p = &protos[label];
        let phase = rng.random::<f32>() * 2.0 * PI;
        let amp = cfg.signal * (0.75 + 0.5 * rng.random::<f32>());
        let (bx, by) = (
            (p.blob.0 + 0.15 * (rng.random::<f32>() - 0.5)) * w as f32,
            (p.blob.1 + 0.15 * (rng.random::<f32>() - 0.5)) * h as f32,
        );
        let radius = 0.2 * h.min(w) as f32;
        let attr = match cfg.attribute {
            AttributeMode::None => 0,
            _ => rng.random_range(0..cfg.attribute_classes.max(1)),
        };
        let tint = match cfg.attribute {
            AttributeMode::Rendered { strength } => palette(attr, cfg.attribute_classes).map(|v| v * strength),
            _ => [0.0; 3],
        };
        let (sa, ca) = p.angle.sin_cos();
        for ch in 0..c {
            let k = ch % 3;
            for y in 0..h {
                for x in 0..w {
                    let u = (x as f32 * ca + y as f32 * sa) / w as f32;
                    let grating = (2.0 * PI * p.freq * u + phase).sin();
                    let d2 = ((x as f32 - bx).powi(2) + (y as f32 - by).powi(2)) / (radius * radius);
                    let v = 0.5
                        + tint[k]
                        + amp * (p.color[k] - 0.5) * grating
                        + amp * (p.blob_color[k] - 0.5) * (-d2).exp()
                        + noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(label);
        attrs.push(attr);
    }
    let mut ds = Dataset::new(Tensor::new(vec![cfg.num_samples, c, h, w], data), labels, cfg.num_classes)?;
    if cfg.attribute != AttributeMode::None {
        ds.attributes = Some(attrs);
        ds.attribute_alphabet = (0..cfg.attribute_classes).map(|a| format!("attr{a}")).collect();
    }
    Ok(ds)
}

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

/// CIFAR-10 binary batches (`data_batch_1.bin` .. `data_batch_5.bin` or
/// `test_batch.bin`) from `dir` or its `cifar-10-batches-bin` child.
pub fn load_cifar10_binary(dir: &Path, train: bool) -> Result<Dataset> {
    let root = if dir.join("cifar-10-batches-bin").is_dir() { dir.join("cifar-10-batches-bin") } else { dir.to_path_buf() };
    let files: Vec<PathBuf> = if train {
        (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect()
    } else {
        vec![root.join("test_batch.bin")]
    };
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for f in files {
        let bytes = std::fs::read(&f).map_err(|e| Error::io(&f, e))?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Corrupted { path: f, reason: "length is not a whole number of records".into() });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if rec[0] >= 10 {
                return Err(Error::Corrupted { path: f.clone(), reason: format!("label byte {}", rec[0]) });
            }
            labels.push(rec[0] as usize);
            data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], data), labels, 10)
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    label: usize,
    #[serde(default)]
    attribute: Option<usize>,
}

/// Images listed in `dir/manifest.csv` with header `path,label[,attribute]`.
/// Paths are relative to `dir`; every image must share one size.
pub fn load_manifest(dir: &Path, num_classes: usize) -> Result<Dataset> {
    let manifest = dir.join("manifest.csv");
    let mut reader = csv::Reader::from_path(&manifest)?;
    let mut labels = Vec::new();
    let mut attrs = Vec::new();
    let mut data = Vec::new();
    let mut size: Option<(u32, u32)> = None;
    for row in reader.deserialize() {
        let row: ManifestRow = row?;
        let img = image::open(dir.join(&row.path))?.to_rgb8();
        let dims = img.dimensions();
        if *size.get_or_insert(dims) != dims {
            return Err(Error::shape(format!("{} is {dims:?}, expected {size:?}", row.path)));
        }
        let (w, h) = (dims.0 as usize, dims.1 as usize);
        let raw = img.into_raw();
        for ch in 0..3 {
            for i in 0..w * h {
                data.push(raw[i * 3 + ch] as f32 / 255.0);
            }
        }
        labels.push(row.label);
        attrs.push(row.attribute);
    }
    let (w, h) = size.ok_or_else(|| Error::config(format!("{} lists no images", manifest.display())))?;
    let n = labels.len();
    let mut ds = Dataset::new(Tensor::new(vec![n, 3, h as usize, w as usize], data), labels, num_classes)?;
    if attrs.iter().all(Option::is_some) {
        let a: Vec<usize> = attrs.into_iter().flatten().collect();
        let k = a.iter().max().map_or(0, |m| m + 1);
        ds.attribute_alphabet = (0..k).map(|i| format!("attr{i}")).collect();
        ds.attributes = Some(a);
    }
    Ok(ds)
}
