use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::check_resolution;
use crate::numerics::Tensor;

use super::pnm::read_ppm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`.
    pub image: Tensor,
    pub label: usize,
    /// Image quadrant holding most of the object (0 top-left, 1 top-right,
    /// 2 bottom-left, 3 bottom-right), when known.
    pub quadrant: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<Sample>,
    pub class_names: Vec<String>,
    pub split: Split,
    pub resolution: usize,
    /// Standardization already applied to `items`.
    pub norm: Normalization,
}

/// Per-channel standardization constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Mean and (population) standard deviation per channel.
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self::from_images(&ds.items.iter().map(|s| &s.image).collect::<Vec<_>>())
    }

    pub fn from_images(images: &[&Tensor]) -> Self {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut count = 0.0;
        for image in images {
            let plane = image.numel() / 3;
            for c in 0..3 {
                for &v in &image.data()[c * plane..(c + 1) * plane] {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += plane as f64;
        }
        if count == 0.0 {
            return Self::identity();
        }
        let mean = sum.map(|s| s / count);
        let mut std = [1.0; 3];
        for c in 0..3 {
            let var = sq[c] / count - mean[c] * mean[c];
            std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn apply(&self, image: &mut Tensor) {
        let plane = image.numel() / 3;
        let data = image.data_mut();
        for c in 0..3 {
            for v in &mut data[c * plane..(c + 1) * plane] {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }

    pub fn invert(&self, image: &mut Tensor) {
        let plane = image.numel() / 3;
        let data = image.data_mut();
        for c in 0..3 {
            for v in &mut data[c * plane..(c + 1) * plane] {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Standardizes the images in place and records the constants.
    pub fn normalize(&mut self, norm: &Normalization) {
        for s in &mut self.items {
            norm.apply(&mut s.image);
        }
        self.norm = *norm;
    }

    pub(crate) fn standardize_pair(mut train: Dataset, mut val: Dataset) -> (Dataset, Dataset) {
        let norm = Normalization::from_dataset(&train);
        train.normalize(&norm);
        val.normalize(&norm);
        (train, val)
    }

    /// Stacks the selected samples into `[B, 3, H, W]` plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images: Vec<&Tensor> = indices.iter().map(|&i| &self.items[i].image).collect();
        let labels = indices.iter().map(|&i| self.items[i].label).collect();
        Ok((Tensor::stack(&images)?, labels))
    }

    /// Copy with every image bilinearly resampled to `resolution`.
    pub fn resized(&self, resolution: usize) -> Result<Self> {
        check_resolution(resolution, resolution)?;
        let items = self
            .items
            .iter()
            .map(|s| {
                Ok(Sample {
                    image: resize_bilinear(&s.image, resolution, resolution)?,
                    ..s.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            items,
            resolution,
            ..self.clone()
        })
    }
}

/// Bilinear resampling of a `[C, H, W]` tensor with half-pixel centers.
pub fn resize_bilinear(t: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::dim("resize", format!("expected [C, H, W], got {:?}", t.shape())));
    };
    if (h, w) == (oh, ow) {
        return Ok(t.clone());
    }
    let src = |len: usize, olen: usize, o: usize| {
        let x = ((o as f64 + 0.5) * len as f64 / olen as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, x - i0 as f64)
    };
    let d = t.data();
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let ch = i / (oh * ow);
        let (y, x) = ((i / ow) % oh, i % ow);
        let (y0, y1, fy) = src(h, oh, y);
        let (x0, x1, fx) = src(w, ow, x);
        let at = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// Crops the central square and resamples it to `resolution`.
pub fn center_resize(t: &Tensor, resolution: usize) -> Result<Tensor> {
    let &[c, h, w] = t.shape() else {
        return Err(Error::dim("center_resize", format!("expected [C, H, W], got {:?}", t.shape())));
    };
    let side = h.min(w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let d = t.data();
    let square = Tensor::from_fn(&[c, side, side], |i| {
        let ch = i / (side * side);
        let (y, x) = ((i / side) % side, i % side);
        d[(ch * h + y0 + y) * w + x0 + x]
    });
    resize_bilinear(&square, resolution, resolution)
}

/// Random horizontal flip and a random crop from a zero-padded copy
/// (padding `pad` on every side), same output size.
pub fn augment(t: &Tensor, pad: usize, rng: &mut impl Rng) -> Tensor {
    let &[c, h, w] = t.shape() else {
        unreachable!("images are [C, H, W]")
    };
    let flip = rng.random_bool(0.5);
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let d = t.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let ch = i / (h * w);
        let y = ((i / w) % h) as isize + dy;
        let xo = (i % w) as isize;
        let x = if flip { w as isize - 1 - xo } else { xo } + dx;
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            d[(ch * h + y as usize) * w + x as usize]
        }
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Loads `root/<class>/*.ppm`, center-resizes to `resolution`, splits each
/// class 90/10 deterministically from `seed` and standardizes both splits
/// with statistics of the training split.
pub fn load_dataset(root: &Path, resolution: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    check_resolution(resolution, resolution)?;
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{} has no class subdirectories", root.display())));
    }
    let mut class_names = Vec::new();
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (label, dir) in class_dirs.iter().enumerate() {
        class_names.push(dir.file_name().unwrap().to_string_lossy().into_owned());
        let files: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
            .collect();
        if files.is_empty() {
            return Err(Error::Data(format!("class directory {} contains no .ppm files", dir.display())));
        }
        let images: Vec<Tensor> = files
            .par_iter()
            .map(|p| center_resize(&read_ppm(p)?.to_tensor(), resolution))
            .collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng);
        let n_val = if images.len() < 2 {
            0
        } else {
            ((images.len() as f64 * 0.1).round() as usize).max(1)
        };
        let mut images: Vec<Option<Tensor>> = images.into_iter().map(Some).collect();
        for (rank, &i) in order.iter().enumerate() {
            let sample = Sample {
                image: images[i].take().unwrap(),
                label,
                quadrant: None,
            };
            if rank < n_val {
                val.push(sample);
            } else {
                train.push(sample);
            }
        }
    }
    let train = Dataset {
        items: train,
        class_names: class_names.clone(),
        split: Split::Train,
        resolution,
        norm: Normalization::identity(),
    };
    let val = Dataset {
        items: val,
        class_names,
        split: Split::Val,
        resolution,
        norm: Normalization::identity(),
    };
    Ok(Dataset::standardize_pair(train, val))
}
