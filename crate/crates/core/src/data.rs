//! Datasets, preprocessing and stratified splits.
//!
//! Images are decoded lazily: an image-folder dataset keeps only paths and a
//! synthetic dataset regenerates each picture from its index, so memory stays
//! flat for large folders.

use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NEGATIVE: usize = 0;
pub const POSITIVE: usize = 1;
pub const CLASS_DIRS: [&str; 2] = ["negative", "positive"];
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Source {
    /// `path/{positive,negative}/*.png|jpg`.
    ImageFolder { path: PathBuf },
    /// Two flip-invariant classes: bright horizontal stripes (positive) and
    /// dark vertical stripes (negative), with per-image jitter and noise.
    Synthetic {
        seed: u64,
        n_per_class: usize,
        image_size: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitSpec {
    /// 80% train, 10% validation, remainder test.
    Ratio811,
    /// 80% train, remainder validation; test set read from a separate folder.
    Ratio82ExternalTest { test_path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: Source,
    pub split: SplitSpec,
    /// Seed for the split shuffle.
    #[serde(default)]
    pub seed: u64,
    /// Skip unreadable images with a warning instead of failing.
    #[serde(default)]
    pub skip_unreadable: bool,
}

impl DatasetSpec {
    pub fn synthetic(seed: u64, n_per_class: usize, image_size: usize) -> Self {
        Self {
            source: Source::Synthetic {
                seed,
                n_per_class,
                image_size,
            },
            split: SplitSpec::Ratio811,
            seed,
            skip_unreadable: false,
        }
    }
}

#[derive(Clone, Debug)]
enum Items {
    Files(Vec<PathBuf>),
    Synthetic { seed: u64, image_size: usize },
}

/// An ordered collection of labeled images.
#[derive(Clone, Debug)]
pub struct Dataset {
    items: Items,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn open(source: &Source, skip_unreadable: bool) -> Result<Self> {
        match source {
            Source::ImageFolder { path } => Self::image_folder(path, skip_unreadable),
            Source::Synthetic {
                seed,
                n_per_class,
                image_size,
            } => Ok(Self::synthetic(*seed, *n_per_class, *image_size)),
        }
    }

    /// Labels alternate negative, positive so any prefix is balanced.
    pub fn synthetic(seed: u64, n_per_class: usize, image_size: usize) -> Self {
        Self {
            items: Items::Synthetic { seed, image_size },
            labels: (0..2 * n_per_class).map(|i| i % 2).collect(),
        }
    }

    pub fn image_folder(root: &Path, skip_unreadable: bool) -> Result<Self> {
        let mut files = Vec::new();
        let mut labels = Vec::new();
        for (label, dir) in CLASS_DIRS.iter().enumerate() {
            let class_dir = root.join(dir);
            let entries = std::fs::read_dir(&class_dir).map_err(|e| {
                Error::Data(format!("cannot read class directory {}: {e}", class_dir.display()))
            })?;
            let mut paths: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                })
                .collect();
            paths.sort();
            for p in paths {
                match image::image_dimensions(&p) {
                    Ok((w, h)) if w > 0 && h > 0 => {
                        files.push(p);
                        labels.push(label);
                    }
                    other => {
                        let why = match other {
                            Err(e) => e.to_string(),
                            Ok(_) => "empty image".into(),
                        };
                        if !skip_unreadable {
                            return Err(Error::Image {
                                path: p.clone(),
                                message: why,
                            });
                        }
                        warn!("skipping unreadable image {}: {why}", p.display());
                    }
                }
            }
        }
        if files.is_empty() {
            return Err(Error::Data(format!("no images under {}", root.display())));
        }
        Ok(Self {
            items: Items::Files(files),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Stable identity of an item, used to check split disjointness.
    pub fn key(&self, i: usize) -> String {
        match &self.items {
            Items::Files(f) => f[i].display().to_string(),
            Items::Synthetic { seed, .. } => format!("synthetic:{seed}:{i}"),
        }
    }

    pub fn load(&self, i: usize) -> Result<RgbImage> {
        match &self.items {
            Items::Files(f) => {
                let img = image::open(&f[i]).map_err(|e| Error::Image {
                    path: f[i].clone(),
                    message: e.to_string(),
                })?;
                Ok(img.to_rgb8())
            }
            Items::Synthetic { seed, image_size } => Ok(synthetic_image(*seed, i, self.labels[i], *image_size)),
        }
    }

    /// Preprocess `indices` into a (B, 3, S, S) batch. Flip decisions are drawn
    /// from `rng` in index order before the images are decoded in parallel.
    pub fn batch(
        &self,
        indices: &[usize],
        cfg: &PreprocessConfig,
        train_mode: bool,
        rng: &mut impl Rng,
    ) -> Result<(Tensor, Vec<usize>)> {
        let flips: Vec<bool> = indices
            .iter()
            .map(|_| train_mode && cfg.hflip_prob > 0.0 && rng.gen_bool(cfg.hflip_prob))
            .collect();
        let images: Vec<Tensor> = indices
            .par_iter()
            .zip(&flips)
            .map(|(&i, &flip)| preprocess(&self.load(i)?, cfg, flip))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = images.iter().collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::stack(&refs)?, labels))
    }
}

fn synthetic_image(seed: u64, index: usize, label: usize, size: usize) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let period = rng.gen_range(3..6) as f64;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let base = if label == POSITIVE { 0.62 } else { 0.38 } + rng.gen_range(-0.05..0.05);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.04..0.04));
    let s = size as u32;
    RgbImage::from_fn(s, s, |x, y| {
        // stripes run along x for positives and along y for negatives; both are flip invariant up to phase
        let t = if label == POSITIVE { y } else { x } as f64;
        let wave = 0.18 * (std::f64::consts::TAU * t / period + phase).sin();
        let px = std::array::from_fn(|c| {
            let v = base + wave + tint[c] + rng.gen_range(-0.05..0.05);
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        });
        Rgb(px)
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    /// Scale the shortest side to the target, then center-crop.
    #[default]
    ShortestSideCrop,
    /// Scale both sides to the target, ignoring aspect ratio.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub image_size: usize,
    pub resize_mode: ResizeMode,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Probability of a horizontal flip in training mode.
    pub hflip_prob: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            resize_mode: ResizeMode::ShortestSideCrop,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            hflip_prob: 0.5,
        }
    }
}

/// Size after scaling the shortest side of a `w` x `h` image to `target`.
pub fn shortest_side_size(w: u32, h: u32, target: u32) -> (u32, u32) {
    if w <= h {
        (target, (u64::from(h) * u64::from(target) / u64::from(w)) as u32)
    } else {
        ((u64::from(w) * u64::from(target) / u64::from(h)) as u32, target)
    }
}

/// Resize, crop and normalize one RGB image into a (3, S, S) tensor.
pub fn preprocess(img: &RgbImage, cfg: &PreprocessConfig, flip: bool) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Data("cannot preprocess an empty image".into()));
    }
    let s = cfg.image_size as u32;
    let resized = match cfg.resize_mode {
        ResizeMode::Direct if (w, h) != (s, s) => imageops::resize(img, s, s, FilterType::Triangle),
        ResizeMode::ShortestSideCrop => {
            let (rw, rh) = shortest_side_size(w, h, s);
            let scaled = if (rw, rh) == (w, h) {
                img.clone()
            } else {
                imageops::resize(img, rw, rh, FilterType::Triangle)
            };
            if (rw, rh) == (s, s) {
                scaled
            } else {
                imageops::crop_imm(&scaled, (rw - s) / 2, (rh - s) / 2, s, s).to_image()
            }
        }
        ResizeMode::Direct => img.clone(),
    };
    let n = cfg.image_size;
    let mut out = Tensor::zeros(&[3, n, n]);
    let data = out.data_mut();
    for (x, y, px) in resized.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        let col = if flip { n - 1 - x } else { x };
        for c in 0..3 {
            data[(c * n + y) * n + col] = (f64::from(px[c]) / 255.0 - cfg.mean[c]) / cfg.std[c];
        }
    }
    Ok(out)
}

/// Disjoint index lists.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split of `labels` into fractions of the total. Global sizes are
/// `floor(f * n)` for each fraction, with the remainder going to the last
/// part; per-class counts are allocated by largest remainder.
pub fn stratified_split(labels: &[usize], fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = labels.len();
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }
    // counts[c][k]: examples of class c in part k
    let mut counts = vec![vec![0usize; fractions.len() + 1]; classes];
    for (k, &f) in fractions.iter().enumerate() {
        let target = (f * n as f64 + 1e-9).floor() as usize;
        let ideal: Vec<f64> = by_class.iter().map(|m| f * m.len() as f64).collect();
        let mut alloc: Vec<usize> = ideal.iter().map(|x| (x + 1e-9).floor() as usize).collect();
        let mut order: Vec<usize> = (0..classes).collect();
        order.sort_by(|&a, &b| {
            let fa = ideal[a] - alloc[a] as f64;
            let fb = ideal[b] - alloc[b] as f64;
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        let mut missing = target.saturating_sub(alloc.iter().sum());
        for &c in order.iter().cycle().take(classes * 2) {
            if missing == 0 {
                break;
            }
            let used: usize = counts[c][..k].iter().sum();
            if used + alloc[c] < by_class[c].len() {
                alloc[c] += 1;
                missing -= 1;
            }
        }
        for c in 0..classes {
            counts[c][k] = alloc[c];
        }
    }
    let last = fractions.len();
    for c in 0..classes {
        let used: usize = counts[c][..last].iter().sum();
        counts[c][last] = by_class[c].len() - used;
    }
    let mut parts = vec![Vec::new(); last + 1];
    for (c, members) in by_class.iter().enumerate() {
        let mut start = 0;
        for (k, part) in parts.iter_mut().enumerate() {
            part.extend_from_slice(&members[start..start + counts[c][k]]);
            start += counts[c][k];
        }
    }
    for part in &mut parts {
        part.sort_unstable();
    }
    Ok(parts)
}

/// Split per `spec`. For the external-test layout only train and validation
/// come from `labels`; `test` is left empty.
pub fn split_dataset(labels: &[usize], split: &SplitSpec, seed: u64) -> Result<Splits> {
    let n = labels.len();
    if n < 10 {
        return Err(Error::Data(format!("ratio splits need at least 10 examples, got {n}")));
    }
    match split {
        SplitSpec::Ratio811 => {
            for class in 0..2 {
                let k = labels.iter().filter(|&&l| l == class).count();
                if k < 3 {
                    return Err(Error::Data(format!(
                        "class {} has {k} examples; an 8:1:1 split needs at least 3",
                        CLASS_DIRS[class]
                    )));
                }
            }
            let mut parts = stratified_split(labels, &[0.8, 0.1], seed)?.into_iter();
            Ok(Splits {
                train: parts.next().unwrap_or_default(),
                val: parts.next().unwrap_or_default(),
                test: parts.next().unwrap_or_default(),
            })
        }
        SplitSpec::Ratio82ExternalTest { .. } => {
            let mut parts = stratified_split(labels, &[0.8], seed)?.into_iter();
            Ok(Splits {
                train: parts.next().unwrap_or_default(),
                val: parts.next().unwrap_or_default(),
                test: Vec::new(),
            })
        }
    }
}
